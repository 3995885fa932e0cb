"""Reading and writing behaviour-log corpora.

Canonical CSV layout::

    # cogbias-corpus v1 vocab_size=33 n=21
    user_id,visit_index,position,action_id,focal
    u001,0,0,12,0
    ...

Only real (unpadded) actions are stored.  ``focal`` is optional; when a visit
marks several focal actions the first one is used.  The JSON-lines variant
holds one visit per line: ``{"user_id": ..., "visit_index": ..., "actions": [...],
"focal": <position or null>}``.
"""

from __future__ import annotations

import csv
import io
import json
import re
from collections import defaultdict
from pathlib import Path
from typing import Iterable

from .domain import DEFAULT_VISIT_LENGTH, DEFAULT_VOCAB_SIZE, UserLog, normalize_visit
from .errors import InvalidVisit
from .synthgen import BiasClass, Corpus

FORMAT_NAME = "cogbias-corpus"
FORMAT_VERSION = 1
COLUMNS = ["user_id", "visit_index", "position", "action_id", "focal"]
LABEL_COLUMNS = ["user_id", "class", "lambda", "rho", "role"]

_HEADER = re.compile(r"#\s*cogbias-corpus\s+v(\d+)(.*)")


def header_line(vocab_size: int, n: int) -> str:
    return f"# {FORMAT_NAME} v{FORMAT_VERSION} vocab_size={vocab_size} n={n}"


def write_corpus(path, logs: Iterable[UserLog], vocab_size: int = DEFAULT_VOCAB_SIZE,
                 n: int = DEFAULT_VISIT_LENGTH) -> None:
    path = Path(path)
    logs = list(logs)
    if path.suffix == ".jsonl":
        lines = [json.dumps({"_format": FORMAT_NAME, "version": FORMAT_VERSION,
                             "vocab_size": vocab_size, "n": n})]
        for log in logs:
            for k, v in enumerate(log.visits):
                lines.append(json.dumps({"user_id": log.user_id, "visit_index": k,
                                         "actions": list(v.real_actions), "focal": None}))
        path.write_text("\n".join(lines) + "\n")
        return
    buf = io.StringIO()
    buf.write(header_line(vocab_size, n) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for log in logs:
        for k, v in enumerate(log.visits):
            for j, a in enumerate(v.real_actions):
                w.writerow([log.user_id, k, j, a, 0])
    path.write_text(buf.getvalue())


def _parse_meta(text: str) -> dict:
    return {k: int(v) for k, v in re.findall(r"(\w+)=(\d+)", text)}


def read_corpus(path, n: int | None = None) -> tuple[list[UserLog], dict]:
    """Load a corpus; returns (user logs in first-seen order, header metadata).

    Visits are ordered by ``visit_index`` and actions by ``position``; every
    visit is normalised to ``n`` actions (header value unless overridden).
    """
    path = Path(path)
    raw: dict[str, dict[int, dict]] = defaultdict(dict)
    order: list[str] = []
    meta = {"vocab_size": DEFAULT_VOCAB_SIZE, "n": DEFAULT_VISIT_LENGTH}

    def visit_slot(uid, k):
        if uid not in raw:
            order.append(uid)
        return raw[uid].setdefault(k, {"actions": {}, "focal": None})

    with path.open() as fh:
        if path.suffix == ".jsonl":
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                if "_format" in rec:
                    if rec["_format"] != FORMAT_NAME or rec.get("version") != FORMAT_VERSION:
                        raise ValueError(f"{path}: unsupported header {rec}")
                    meta.update({k: rec[k] for k in ("vocab_size", "n") if k in rec})
                    continue
                slot = visit_slot(str(rec["user_id"]), int(rec["visit_index"]))
                slot["actions"] = dict(enumerate(int(a) for a in rec["actions"]))
                slot["focal"] = rec.get("focal")
        else:
            first = fh.readline()
            m = _HEADER.match(first.strip())
            if m:
                if int(m.group(1)) != FORMAT_VERSION:
                    raise ValueError(f"{path}: unsupported corpus version {m.group(1)}")
                meta.update(_parse_meta(m.group(2)))
            else:
                fh.seek(0)
            reader = csv.DictReader(fh)
            missing = set(COLUMNS[:4]) - set(reader.fieldnames or [])
            if missing:
                raise ValueError(f"{path}: missing columns {sorted(missing)}")
            for row in reader:
                slot = visit_slot(row["user_id"], int(row["visit_index"]))
                pos = int(row["position"])
                slot["actions"][pos] = int(row["action_id"])
                if row.get("focal") in ("1", "true", "True") and (slot["focal"] is None or pos < slot["focal"]):
                    slot["focal"] = pos
    n = n or meta["n"]
    logs = []
    for uid in order:
        visits = []
        for k in sorted(raw[uid]):
            slot = raw[uid][k]
            positions = sorted(slot["actions"])
            actions = [slot["actions"][p] for p in positions]
            focal = positions.index(slot["focal"]) if slot["focal"] in slot["actions"] else None
            try:
                visits.append(normalize_visit(actions, n, focal=focal, vocab_size=meta["vocab_size"]))
            except InvalidVisit as exc:
                raise InvalidVisit(f"user {uid} visit {k}: {exc}") from exc
        logs.append(UserLog(uid, tuple(visits)))
    meta["n"] = n
    return logs, meta


def write_labels(path, corpus: Corpus) -> None:
    cfg = corpus.cfg
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_COLUMNS)
        for log in corpus.logs:
            uid = log.user_id
            w.writerow([uid, corpus.labels[uid].value, repr(cfg.bias_strength), repr(cfg.noise_rate),
                        corpus.roles[uid]])


def read_labels(path) -> dict[str, BiasClass]:
    with Path(path).open() as fh:
        return {row["user_id"]: BiasClass(row["class"]) for row in csv.DictReader(fh)
                if row.get("role", "detect") == "detect"}
