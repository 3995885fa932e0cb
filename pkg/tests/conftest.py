import time
from pathlib import Path

import numpy as np
import pytest

from cogbias import cli, reports

from cogbias.domain import UserLog, Visit, Window, normalize_visit
from cogbias.han import ModelConfig

TINY = dict(vocab_size=5, n=4, m=2, embed_dim=3, action_hidden=3, visit_hidden=4, decoder_hidden=4)


def tiny_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**TINY, "dropout_p": 0.0, **overrides})


def random_visit(rng, V, n, min_len=1) -> Visit:
    length = int(rng.integers(min_len, n + 1))
    return normalize_visit(rng.integers(0, V, size=length).tolist(), n, vocab_size=V)


def random_windows(rng, count, V=5, n=4, m=2, min_len=1) -> list[Window]:
    return [Window(tuple(random_visit(rng, V, n, min_len) for _ in range(m)), random_visit(rng, V, n, min_len))
            for _ in range(count)]


def random_log(rng, user_id, n_visits, V=5, n=4) -> UserLog:
    return UserLog(user_id, tuple(random_visit(rng, V, n) for _ in range(n_visits)))


def central_differences(f, params: dict, eps: float = 1e-5) -> dict:
    """Central finite differences of scalar ``f(params)`` for every entry of every array."""
    out = {}
    for k, v in params.items():
        g = np.zeros_like(v)
        flat = v.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + eps
            hi = f(params)
            flat[j] = old - eps
            lo = f(params)
            flat[j] = old
            g.reshape(-1)[j] = (hi - lo) / (2 * eps)
        out[k] = g
    return out


def max_rel_error(analytic: dict, numeric: dict, floor: float = 1e-6) -> float:
    # floor keeps entries whose true gradient is ~0 from dividing roundoff by roundoff
    worst = 0.0
    for k in numeric:
        a, n = analytic[k], numeric[k]
        rel = np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)
        worst = max(worst, float(rel.max()))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- end-to-end runs shared by the acceptance and end-to-end tests --------------

def cogbias(*argv) -> float:
    t0 = time.perf_counter()
    code = cli.main([str(a) for a in argv])
    assert code == 0, f"cogbias {' '.join(map(str, argv))} exited {code}"
    return time.perf_counter() - t0


INVARIANTS = ["--set", "training.check_invariants=true"]


def pipeline_run(out: Path, corpus: Path, *extra) -> dict:
    seconds = cogbias("train", "--out", out, "--corpus", corpus, *INVARIANTS, *extra)
    seconds += cogbias("detect", "--out", out)
    return {"dir": out, "seconds": seconds, "labels": reports.read_labels_only(out / "bias_report.csv")}


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    cogbias("generate", "--out", out)
    return out


@pytest.fixture(scope="session")
def default_run(corpus_dir, tmp_path_factory):
    return pipeline_run(tmp_path_factory.mktemp("m6"), corpus_dir / "corpus.csv")


@pytest.fixture(scope="session")
def rerun(corpus_dir, tmp_path_factory):
    return pipeline_run(tmp_path_factory.mktemp("m6_rerun"), corpus_dir / "corpus.csv")


@pytest.fixture(scope="session")
def window_runs(corpus_dir, tmp_path_factory):
    return {m: pipeline_run(tmp_path_factory.mktemp(f"m{m}"), corpus_dir / "corpus.csv", "--m", m) for m in (4, 8)}


@pytest.fixture(scope="session")
def null_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("null")
    cogbias("generate", "--out", out, "--set", "generator.bias_strength=0.0", "--set", "generator.noise_rate=1.0")
    return pipeline_run(out, out / "corpus.csv")


def pytest_terminal_summary(terminalreporter):
    import sys
    lines = getattr(sys.modules.get("test_acceptance"), "ACCEPTANCE_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
