"""Command-line entry point: ``cogbias <command> ...``.

Commands: init, generate, train, detect, baseline, compare, report.
Errors are printed to stderr as one JSON object and the exit code is 1.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__, config as config_mod, plots, reports
from .autodiff import save_checkpoint
from .baseline import baseline_classify
from .corpus import read_corpus, read_labels, write_corpus, write_labels
from .errors import CogBiasError, InsufficientPoints, InsufficientVisits, MissingInput
from .pipeline import run_pipeline
from .stats import LABEL_ORDER, BiasLabel, classify, concordance, fit_user_regression, slope_trend_personalized
from .synthgen import BiasClass, generate_corpus

log = logging.getLogger("cogbias")

ENV_OUTPUT = "COGBIAS_OUTPUT_DIR"
ENV_WORKERS = "COGBIAS_WORKERS"
DEFAULT_OUTPUT = "cogbias-out"
CONFIG_COPY = "config.yaml"


# -- configuration ----------------------------------------------------------

def _apply_overrides(data: dict, pairs: list[str]) -> dict:
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ValueError(f"--set expects section.key=value, got {pair!r}")
        data.setdefault(section, {})[name] = yaml.safe_load(raw)
    return data


def resolve_config(args) -> config_mod.RunConfig:
    path = getattr(args, "config", None)
    if path is None:
        run_copy = Path(output_dir(args)) / CONFIG_COPY
        path = run_copy if getattr(args, "reuse_run_config", False) and run_copy.exists() else None
    if path is not None and not Path(path).exists():
        raise MissingInput(f"missing config file: {path}")
    data = config_mod.RunConfig.from_dict(yaml.safe_load(Path(path).read_text()) if path else None).to_dict()
    data = _apply_overrides(data, getattr(args, "set", None) or [])
    training = data["training"]
    if getattr(args, "seed", None) is not None:
        training["seed"] = args.seed
    if getattr(args, "m", None) is not None:
        data["model"]["m"] = args.m
    if getattr(args, "alpha", None) is not None:
        training["alpha"] = args.alpha
    workers = getattr(args, "workers", None)
    if workers is None and os.environ.get(ENV_WORKERS):
        workers = int(os.environ[ENV_WORKERS])
    if workers is not None:
        training["workers"] = workers
    return config_mod.RunConfig.from_dict(data)


def output_dir(args) -> Path:
    out = getattr(args, "out", None) or os.environ.get(ENV_OUTPUT) or DEFAULT_OUTPUT
    return Path(out)


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingInput(f"{path} not found; run `cogbias {stage}` first")
    return path


# -- commands ---------------------------------------------------------------

def cmd_init(args) -> dict | None:
    text = config_mod.to_yaml(resolve_config(args))
    if args.path == "-":
        sys.stdout.write(text)
        return None
    Path(args.path).write_text(text)
    return {"config": str(args.path)}


def cmd_generate(args) -> dict:
    cfg = resolve_config(args)
    out = output_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    corpus = generate_corpus(cfg.generator)
    name = "corpus.jsonl" if args.format == "jsonl" else "corpus.csv"
    write_corpus(out / name, corpus.logs, cfg.generator.vocab_size, cfg.generator.n)
    write_labels(out / "labels.csv", corpus)
    config_mod.dump(cfg, out / CONFIG_COPY)
    reports.update_manifest(out, [name, "labels.csv", CONFIG_COPY], "generate",
                            {"users": len(corpus.logs), "generator": dataclasses.asdict(cfg.generator)})
    return {"corpus": str(out / name), "users": len(corpus.logs)}


def _find_corpus(args, out: Path) -> Path:
    if args.corpus:
        return _require(Path(args.corpus), "generate")
    for name in ("corpus.csv", "corpus.jsonl"):
        if (out / name).exists():
            return out / name
    raise MissingInput(f"no corpus given and none found in {out}; pass --corpus or run `cogbias generate`")


def cmd_train(args) -> dict:
    cfg = resolve_config(args)
    out = output_dir(args)
    corpus_path = _find_corpus(args, out)
    logs, meta = read_corpus(corpus_path, n=cfg.model.n)
    if meta["vocab_size"] != cfg.model.vocab_size:
        raise ValueError(f"corpus vocabulary {meta['vocab_size']} != model vocab_size {cfg.model.vocab_size}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    t0 = time.perf_counter()
    res = run_pipeline(logs, cfg.pipeline)
    elapsed = time.perf_counter() - t0
    ck_meta = {"model": cfg.model.to_dict(), "seed": cfg.pipeline.seed, "stage": "common",
               "norm": res.norm.alpha.tolist()}
    save_checkpoint(out / "checkpoints" / "common.json", res.common_model.params, ck_meta)
    written = ["checkpoints/common.json"]
    reports.write_norm(out / "norm.csv", res.norm.alpha)
    profiles = [p for r in res.users.values() for p in (r.personalized, r.extended) if p is not None]
    reports.write_profiles(out / "profiles.csv", profiles)
    reports.write_deviations(out / "deviations.csv", [r.surface for r in res.users.values() if r.surface is not None])
    reports.write_excluded(out / "excluded.csv", res.excluded())
    config_mod.dump(cfg, out / CONFIG_COPY)
    summary = {
        "corpus": str(corpus_path),
        "detection_users": len(res.users),
        "norm_only_users": len(res.norm_only_users),
        "dropped_users": res.dropped_users,
        "common_windows": res.n_common_windows,
        "common_epoch_losses": res.common_history,
        "norm": res.norm.alpha.tolist(),
    }
    if cfg.pipeline.check_invariants:
        summary["max_simplex_error"] = {"common": res.common_simplex_error, **{
            stage: max((getattr(r, stage).simplex_error for r in res.users.values()
                        if getattr(r, stage) is not None), default=None)
            for stage in ("personalized", "extended")}}
    reports.write_json(out / "train_summary.json", summary)
    written += ["norm.csv", "profiles.csv", "deviations.csv", "excluded.csv", CONFIG_COPY, "train_summary.json"]
    reports.update_manifest(out, written, "train", {"seconds": round(elapsed, 1)})
    return {"out": str(out), "users": len(res.users), "excluded": len(res.excluded()),
            "final_common_loss": res.common_history[-1]}


def detect_reports(out: Path, alpha: float):
    """Regression reports from the files written by ``train``."""
    deviations = reports.read_deviations(_require(out / "deviations.csv", "train"))
    profiles = reports.read_profiles(_require(out / "profiles.csv", "train"))
    norm = reports.read_norm(_require(out / "norm.csv", "train"))
    excluded = reports.read_excluded(out / "excluded.csv") if (out / "excluded.csv").exists() else {}
    users = sorted(set(deviations) | {u for u, _ in profiles} | set(excluded))
    full, quick = {}, {}
    for uid in users:
        full[uid] = classify(fit_user_regression(deviations[uid], uid), alpha) if uid in deviations else None
        try:
            prof = profiles.get((uid, "personalized"))
            quick[uid] = slope_trend_personalized(prof, norm, alpha) if prof is not None else None
        except InsufficientPoints:
            quick[uid] = None
        if quick[uid] is not None:
            quick[uid] = dataclasses.replace(quick[uid], user_id=uid)
    return full, quick


def cmd_detect(args) -> dict:
    out = output_dir(args)
    args.reuse_run_config = True
    cfg = resolve_config(args)
    full, quick = detect_reports(out, cfg.pipeline.alpha)
    reports.write_bias_report(out / "bias_report.csv", full)
    reports.write_bias_report(out / "quick_report.csv", quick)
    reports.update_manifest(out, ["bias_report.csv", "quick_report.csv"], "detect", {"alpha": cfg.pipeline.alpha})
    counts = {lab.value: sum(1 for r in full.values() if (r.label if r else BiasLabel.INCONCLUSIVE) is lab)
              for lab in LABEL_ORDER}
    return {"report": str(out / "bias_report.csv"), "labels": counts}


def cmd_baseline(args) -> dict:
    out = output_dir(args)
    args.reuse_run_config = True
    cfg = resolve_config(args)
    logs, meta = read_corpus(_find_corpus(args, out), n=cfg.model.n)
    p = cfg.pipeline
    rows = {}
    for u in logs:
        if not p.min_visits <= len(u.visits) <= p.max_visits:
            continue
        try:
            rows[u.user_id] = baseline_classify(u, cfg.model.m, p.alpha, meta["vocab_size"])
        except (InsufficientVisits, InsufficientPoints):
            rows[u.user_id] = None
    out.mkdir(parents=True, exist_ok=True)
    reports.write_bias_report(out / "baseline_report.csv", rows)
    reports.update_manifest(out, ["baseline_report.csv"], "baseline", {"m": cfg.model.m, "alpha": p.alpha})
    return {"report": str(out / "baseline_report.csv"), "users": len(rows)}


def _report_path(spec: str) -> tuple[str, Path]:
    name, sep, path = spec.partition("=")
    if not sep:
        name, path = Path(spec).name or spec, spec
    path = Path(path)
    if path.is_dir():
        path = path / "bias_report.csv"
    return name, _require(path, "detect")


def cmd_compare(args) -> dict:
    if len(args.runs) < 2:
        raise ValueError("compare needs at least two runs")
    out = output_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    runs = [_report_path(r) for r in args.runs]
    labels = {name: reports.read_labels_only(path) for name, path in runs}
    pairs, written = [], []
    names = [n for n, _ in runs]
    for a, b in itertools.combinations(names, 2):
        c = concordance(labels[a], labels[b])
        pairs.append({"a": a, "b": b, **c.to_dict()})
        fname = f"concordance_{a}_{b}.svg".replace("/", "_")
        plots.save(out / fname, plots.label_matrix(c.matrix, [l.value for l in LABEL_ORDER],
                                                  [l.value for l in LABEL_ORDER],
                                                  f"{a} vs {b}", row_title=a, col_title=b,
                                                  subtitle=f"CP = {c.score:.3f} ({c.n_users} users)"))
        written.append(fname)
    reports.write_json(out / "concordance.json", {"runs": {n: str(p) for n, p in runs}, "pairs": pairs})
    reports.update_manifest(out, ["concordance.json", *written], "compare")
    return {"concordance": {f"{p['a']}~{p['b']}": p["score"] for p in pairs}}


def confusion(truth, predicted) -> np.ndarray:
    """Rows: planted class (anchoring, neutral, recency); columns: label order."""
    rows = (BiasClass.ANCHORING, BiasClass.NEUTRAL, BiasClass.RECENCY)
    mat = np.zeros((3, 3), dtype=np.int64)
    for uid, cls in truth.items():
        if uid in predicted:
            mat[rows.index(cls), LABEL_ORDER.index(BiasLabel(predicted[uid]))] += 1
    return mat


def cmd_report(args) -> dict:
    out = output_dir(args)
    fig = out / "figures"
    fig.mkdir(parents=True, exist_ok=True)
    report = reports.read_bias_report(_require(out / "bias_report.csv", "detect"))
    labels = {u: r["label"] for u, r in report.items()}
    profiles = reports.read_profiles(_require(out / "profiles.csv", "train"))
    norm = reports.read_norm(_require(out / "norm.csv", "train"))
    deviations = reports.read_deviations(_require(out / "deviations.csv", "train"))
    curves = {u: a[-1] - norm for (u, stage), a in profiles.items() if stage == "personalized"}
    written = [plots.save(fig / "deviation_lines.svg",
                          plots.deviation_lines(curves, labels, "Last personalized window: deviation from the norm"))]
    reports.write_lines(fig / "deviation_lines.csv", curves, labels)
    written.append(fig / "deviation_lines.csv")
    users = [args.user] if args.user else sorted(deviations)[:1]
    for uid in users:
        if uid not in deviations:
            raise KeyError(f"user {uid!r} has no deviation surface")
        written.append(plots.save(fig / f"surface_{uid}.svg",
                                  plots.deviation_surface(deviations[uid], f"Extended stage deviations: {uid}")))
    result = {"figures": [str(p.relative_to(out)) for p in written]}
    labels_path = Path(args.labels) if args.labels else out / "labels.csv"
    if labels_path.exists():
        truth = read_labels(labels_path)
        mat = confusion(truth, labels)
        written.append(plots.save(fig / "confusion.svg", plots.label_matrix(
            mat, ["anchoring", "neutral", "recency"], [l.value for l in LABEL_ORDER],
            "Recovered label vs planted class", row_title="planted", col_title="detected")))
        reports.write_json(out / "confusion.json", {"rows": ["anchoring", "neutral", "recency"],
                                                    "columns": [l.value for l in LABEL_ORDER],
                                                    "matrix": mat.tolist()})
        result["confusion"] = mat.tolist()
        reports.update_manifest(out, ["confusion.json"], "report")
    if (out / "concordance.json").exists():
        data = json.loads((out / "concordance.json").read_text())
        for pair in data["pairs"]:
            fname = f"concordance_{pair['a']}_{pair['b']}.svg".replace("/", "_")
            written.append(plots.save(fig / fname, plots.label_matrix(
                np.array(pair["matrix"]), pair["labels"], pair["labels"], f"{pair['a']} vs {pair['b']}",
                row_title=pair["a"], col_title=pair["b"], subtitle=f"CP = {pair['score']:.3f}")))
    reports.update_manifest(out, [str(p.relative_to(out)) for p in written], "report")
    result["figures"] = [str(p.relative_to(out)) for p in written]
    return result


# -- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cogbias", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cogbias {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True, cfg=True):
        if out:
            p.add_argument("--out", help=f"output / run directory (env {ENV_OUTPUT}, default {DEFAULT_OUTPUT})")
        if cfg:
            p.add_argument("--config", help="YAML run configuration (see `cogbias init`)")
            p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                           help="override one config value; repeatable")

    p = sub.add_parser("init", help="write a configuration file with every default")
    p.add_argument("path", nargs="?", default="cogbias.yaml", help="destination, or - for stdout")
    common(p, out=False)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("generate", help="write a synthetic corpus with planted biases")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    p.set_defaults(func=lambda a: cmd_generate(_seed_to_generator(a)))

    p = sub.add_parser("train", help="common, personalized and extended training; writes profiles and deviations")
    common(p)
    p.add_argument("--corpus", help="corpus file (default: corpus.csv in the run directory)")
    p.add_argument("--m", type=int, help="visits per window")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help=f"parallel per-user fine-tunes (env {ENV_WORKERS})")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="per-user regression and labels -> bias_report.csv")
    common(p)
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("baseline", help="Wasserstein frequency baseline -> baseline_report.csv")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--m", type=int)
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("compare", help="pairwise concordance of label reports -> concordance.json")
    common(p, cfg=False)
    p.add_argument("runs", nargs="+", help="run directories or report files, optionally NAME=PATH")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="SVG figures for a detected run")
    common(p, cfg=False)
    p.add_argument("--labels", help="ground-truth labels.csv for the confusion matrix")
    p.add_argument("--user", help="user whose deviation surface is drawn (default: first)")
    p.set_defaults(func=cmd_report)
    return parser


def _seed_to_generator(args):
    if args.seed is not None:
        args.set = (args.set or []) + [f"generator.seed={args.seed}"]
        args.seed = None
    return args


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        result = args.func(args)
    except (CogBiasError, ValueError, KeyError, OSError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc).strip("'\""), "command": args.command}
        if isinstance(exc, (MissingInput, FileNotFoundError)):
            err["stage_dependency"] = True
        sys.stderr.write(json.dumps(err) + "\n")
        return 1
    if result is not None:
        sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
