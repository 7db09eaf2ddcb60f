import json
from pathlib import Path

import numpy as np
import pytest

from ddoslab.flowdata import BENIGN, DDOS, FlowTable
from ddoslab.toy import make_toy


def make_table(features, labels=None, names=None, source="t"):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    if labels is None:
        labels = np.zeros(len(features), dtype=np.int8)
    names = names or [f"f{i}" for i in range(features.shape[1])]
    return FlowTable(features, np.asarray(labels), names, source)


def write_csv(path: Path, header, rows):
    lines = [",".join(header)] + [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    make_toy(d, seed=0)
    return d


@pytest.fixture(scope="session")
def quick_config(toy_dir):
    """Toy config with a few epochs, for pipeline plumbing tests."""
    cfg = json.loads(json.dumps({
        "seed": 0,
        "schema": "schema.json",
        "ranges": "ranges.json",
        "silos": {"A": "A.csv", "B": "B.csv", "C": "C.csv"},
        "external": {"X": "X.csv"},
        "ganomaly": {"latent_dim": 4, "hidden": [16, 8], "lr": 1e-3, "local_epochs": 2},
        "federation": {"rounds": 2, "local_epochs": 1},
        "generate": {"n": 600},
        "external_models": {"pretrain": {"epochs": 2, "n_trees": 10},
                            "finetune": {"epochs": 1}},
    }))
    path = toy_dir / "quick.json"
    path.write_text(json.dumps(cfg, indent=2))
    return path


@pytest.fixture
def two_blobs():
    """Benign N(0, I) and anomalies N(3, I) in 4 dims, as an unscaled table."""
    rng = np.random.default_rng(7)
    benign = rng.normal(0.0, 1.0, (400, 4))
    ddos = rng.normal(3.0, 1.0, (100, 4))
    labels = np.r_[np.full(400, BENIGN), np.full(100, DDOS)]
    return make_table(np.vstack([benign, ddos]), labels)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, recorded by tests/test_acceptance.py."""
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when != "call":
                continue
            lines += [v for k, v in rep.user_properties if k == "acceptance"]
            if key == "failed" and "test_acceptance" in rep.nodeid and not rep.user_properties:
                lines.append(f"{rep.nodeid.split('::')[-1][5:7].upper()} FAIL  (error before "
                             "the criterion was measured)")
    for rep in terminalreporter.stats.get("skipped", []):
        if "test_acceptance" in rep.nodeid:
            lines.append(f"{rep.nodeid.split('::')[-1][5:7].upper()} SKIP  {rep.longrepr[2]}")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.line(line)
