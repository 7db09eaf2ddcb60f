import argparse
import json
import os
import shutil
import socket
import threading
from pathlib import Path

import pytest

from ddoslab import cli
from ddoslab import pipeline as pl

STAGES = [
    ["preprocess"],
    ["train-local"],
    ["federate", "simulate"],
    ["generate"],
    ["audit"],
    ["external", "pretrain"],
    ["external", "finetune"],
    ["external", "eval"],
    ["crosseval"],
    ["report"],
]


def run(cmd, config, out, *extra):
    return cli.main([*cmd, "--config", str(config), "--out", str(out), "--log-level", "WARNING",
                     *extra])


def tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.stat().st_mtime_ns
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, quick_config):
    ws = tmp_path_factory.mktemp("ws")
    for cmd in STAGES:
        assert run(cmd, quick_config, ws) == 0, cmd
    return ws


# ---------------------------------------------------------------- help

def _parsers(parser, path=()):
    yield path, parser
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for name, sub in action.choices.items():
                yield from _parsers(sub, path + (name,))


def test_every_flag_is_documented():
    checked = 0
    for path, p in _parsers(cli.build_parser()):
        text = p.format_help()
        for action in p._actions:
            for opt in action.option_strings:
                assert opt in text, (path, opt)
            if action.option_strings and action.help is None:
                pytest.fail(f"{' '.join(path)} {action.option_strings} has no help text")
        checked += 1
    assert checked >= 15


def test_global_flags_on_pipeline_commands():
    for path, p in _parsers(cli.build_parser()):
        if not path or path in (("federate",), ("external",), ("schema",)):
            continue
        opts = {o for a in p._actions for o in a.option_strings}
        assert {"--config", "--seed", "--out", "--log-level"} <= opts, path


# ---------------------------------------------------------------- full pipeline

def test_pipeline_writes_one_manifest_per_stage(workspace):
    for name in ("preprocess", "train-local", "federate", "generate", "audit",
                 "external-pretrain", "external-finetune", "external-eval", "crosseval", "report"):
        m = pl.verify_dir(workspace / name)
        assert m.outputs and m.tool_version and m.wall_time_s >= 0
    for silo in "ABC":
        assert {"train.csv", "test.csv", "validation.csv"} <= {
            p.name for p in (workspace / "preprocess" / silo).iterdir()}


def test_crosseval_has_twelve_cells(workspace):
    report = json.loads((workspace / "crosseval" / "report.json").read_text())
    assert len(report["cells"]) == 12
    assert report["models"] == ["A", "B", "C", "FL"]
    assert set(report["threshold_sensitivity"]) >= {"A", "FL"}
    text = (workspace / "crosseval" / "report.txt").read_text()
    assert text.count("average F1") == 4


def test_generate_default_count_comes_from_config(workspace):
    audit = json.loads((workspace / "generate" / "audit.json").read_text())
    assert sum(audit["shares"].values()) == 600
    lines = (workspace / "generate" / "synthetic.csv").read_text().splitlines()
    assert len(lines) == 601


def test_rerun_reproduces_fingerprints(workspace, quick_config, tmp_path):
    for cmd in STAGES[:4]:
        assert run(cmd, quick_config, tmp_path) == 0
    for name in ("preprocess", "train-local", "federate", "generate"):
        assert pl.RunManifest.read(tmp_path / name).output_digest == \
            pl.RunManifest.read(workspace / name).output_digest, name


def test_no_writes_outside_out(quick_config, tmp_path):
    data_dir = quick_config.parent
    before = tree(data_dir)
    cwd = os.getcwd()
    os.chdir(tmp_path)
    try:
        assert run(["preprocess"], quick_config, tmp_path / "out") == 0
        assert run(["train-local"], quick_config, tmp_path / "out") == 0
    finally:
        os.chdir(cwd)
    assert tree(data_dir) == before
    assert {p.name for p in tmp_path.iterdir()} == {"out"}


def test_crosseval_explicit_dirs(workspace, tmp_path):
    out = tmp_path / "r.json"
    code = cli.main(["crosseval", "--models", str(workspace / "train-local" / "A"),
                     "--models", str(workspace / "federate"),
                     "--datasets", str(workspace / "preprocess"), "--out", str(out),
                     "--log-level", "WARNING"])
    assert code == 0
    report = json.loads(out.read_text())
    assert report["models"] == ["A", "FL"] and len(report["cells"]) == 6
    assert (tmp_path / "r.txt").exists() and (tmp_path / "r.manifest.json").exists()


# ---------------------------------------------------------------- exit codes

def test_missing_config_is_exit_2(tmp_path):
    assert run(["preprocess"], tmp_path / "nope.json", tmp_path / "o") == 2


def test_invalid_config_is_exit_2(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"schema": "s.json", "silos": {}}))
    assert run(["preprocess"], p, tmp_path / "o") == 2


def test_missing_data_file_is_exit_3(toy_dir, tmp_path, caplog):
    cfg = json.loads((toy_dir / "quick.json").read_text())
    cfg["silos"]["A"] = "missing_A.csv"
    p = toy_dir / "missing.json"
    p.write_text(json.dumps(cfg))
    assert run(["preprocess"], p, tmp_path / "o") == 3
    assert "missing_A.csv" in caplog.text


def test_missing_upstream_is_exit_4(quick_config, tmp_path):
    assert run(["train-local"], quick_config, tmp_path) == 4
    assert not (tmp_path / "train-local").exists()


def test_tampered_upstream_is_exit_4(workspace, quick_config, tmp_path):
    ws = tmp_path / "ws"
    shutil.copytree(workspace / "preprocess", ws / "preprocess")
    victim = ws / "preprocess" / "A" / "train.csv"
    lines = victim.read_text().splitlines()
    victim.write_text("\n".join(lines[:-1]) + "\n")
    assert run(["train-local"], quick_config, ws) == 4


def test_changed_config_is_exit_4(workspace, toy_dir, tmp_path):
    ws = tmp_path / "ws"
    shutil.copytree(workspace / "preprocess", ws / "preprocess")
    cfg = json.loads((toy_dir / "quick.json").read_text())
    cfg["preprocess"] = {"iqr_k": 2.5}
    p = toy_dir / "changed.json"
    p.write_text(json.dumps(cfg))
    assert run(["train-local"], p, ws) == 4


def test_seed_flag_changes_outputs(quick_config, tmp_path):
    assert run(["preprocess"], quick_config, tmp_path / "a", "--seed", "1") == 0
    assert run(["preprocess"], quick_config, tmp_path / "b", "--seed", "2") == 0
    a = pl.RunManifest.read(tmp_path / "a" / "preprocess")
    b = pl.RunManifest.read(tmp_path / "b" / "preprocess")
    assert a.seeds != b.seeds and a.output_digest != b.output_digest


def test_seed_env_var(quick_config, tmp_path, monkeypatch):
    monkeypatch.setenv("ANOMALY_FLOW_SEED", "7")
    assert run(["preprocess"], quick_config, tmp_path) == 0
    assert pl.RunManifest.read(tmp_path / "preprocess").config["seed"] == 7


# ---------------------------------------------------------------- other commands

def test_schema_command(capsys):
    assert cli.main(["schema"]) == 0
    schema = json.loads(capsys.readouterr().out)
    assert schema["required"] == ["schema", "silos"]


def test_maketoy_writes_ready_config(tmp_path):
    assert cli.main(["maketoy", "--out", str(tmp_path), "--seed", "3",
                     "--log-level", "WARNING"]) == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert {"A.csv", "B.csv", "C.csv", "X.csv", "schema.json", "ranges.json",
            "config.json", "manifest.json"} <= names
    assert json.loads((tmp_path / "config.json").read_text())["seed"] == 3


def test_audit_of_explicit_table(workspace, quick_config, tmp_path):
    table = workspace / "preprocess" / "A" / "train.csv"
    assert run(["audit"], quick_config, tmp_path, "--input", str(table)) == 0
    report = json.loads((tmp_path / "audit" / "audit.json").read_text())
    assert report["violating_rows"] == 0


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_federate_serve_and_clients_match_simulation(workspace, quick_config, tmp_path):
    shutil.copytree(workspace / "preprocess", tmp_path / "preprocess")
    addr = f"127.0.0.1:{_free_port()}"
    codes = {}
    server = threading.Thread(target=lambda: codes.__setitem__("serve", run(
        ["federate", "serve"], quick_config, tmp_path, "--bind", addr, "--join-timeout", "60")))
    server.start()
    clients = []
    for silo in "ABC":
        t = threading.Thread(target=lambda s=silo: codes.__setitem__(s, _client(
            quick_config, tmp_path, addr, s)))
        t.start()
        clients.append(t)
    for t in clients + [server]:
        t.join(300)
    assert codes == {"serve": 0, "A": 0, "B": 0, "C": 0}
    wire_fp = json.loads((tmp_path / "federate" / "FL" / "manifest.json").read_text())["fingerprint"]
    sim_fp = json.loads((workspace / "federate" / "FL" / "manifest.json").read_text())["fingerprint"]
    assert wire_fp == sim_fp
    for silo in "ABC":
        assert (tmp_path / f"federate-client-{silo}" / "calibration.json").exists()


def _client(config, ws, addr, silo):
    import time
    for _ in range(50):
        code = run(["federate", "client"], config, ws, "--server", addr, "--silo", silo)
        if code != 1:
            return code
        time.sleep(0.2)  # server not listening yet
    return code
