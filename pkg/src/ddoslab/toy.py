"""Synthetic multi-domain NetFlow benchmark.

Each domain draws benign flows from its own Gaussian mixture; every mixture
component also carries its own protocol and TCP-flag mix. DDoS flows are the same
mixture pushed along a shared shift (short, packet-heavy, SYN-flagged flows).
Parameters live in ``presets/toy_v1.json``.
"""
from __future__ import annotations

import csv
import json
from importlib import resources
from pathlib import Path

import numpy as np

from .flowdata import FlowSchema

DEFAULT_PRESET = "toy_v1"
DROP_COLUMNS = ("src_ip", "dst_ip", "src_port", "dst_port")

SEMANTIC_RANGES = {
    "protocol": [0, 255],
    "flow_duration": {"min": 0},
    "in_bytes": {"min": 0},
    "out_bytes": {"min": 0},
    "in_pkts": {"min": 0},
    "out_pkts": {"min": 0},
    "mean_iat": {"min": 0},
}


def load_preset(name: str = DEFAULT_PRESET) -> dict:
    text = resources.files("ddoslab.presets").joinpath(f"{name}.json").read_text()
    return json.loads(text)


def toy_schema(preset: dict | None = None) -> FlowSchema:
    preset = preset or load_preset()
    return FlowSchema(
        feature_names=("protocol", "tcp_flags", *preset["continuous"]),
        label_column="label",
        benign_label_value="benign",
        flag_columns=("tcp_flags",),
        drop_columns=DROP_COLUMNS,
    )


def semantic_ranges() -> dict:
    rules = dict(SEMANTIC_RANGES)
    for k in range(8):
        rules[f"tcp_flags_bit{k}"] = [0, 1]
    return rules


def _categorical(rng, table: dict, n: int) -> np.ndarray:
    keys = np.array([int(k) for k in table])
    p = np.array(list(table.values()), dtype=np.float64)
    return keys[rng.choice(len(keys), size=n, p=p / p.sum())]


def _mixture(rng, components: list, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Continuous draws and the component index of every row."""
    w = np.array([c["weight"] for c in components], dtype=np.float64)
    which = rng.choice(len(components), size=n, p=w / w.sum())
    dim = len(components[0]["mean"])
    out = np.empty((n, dim))
    for i, comp in enumerate(components):
        idx = np.flatnonzero(which == i)
        eps = rng.standard_normal((idx.size, dim))
        factor = rng.standard_normal((idx.size, 1))
        out[idx] = (np.asarray(comp["mean"]) + np.asarray(comp["std"]) * eps
                    + np.asarray(comp["loading"]) * factor)
    return out, which


def _protocol_and_flags(rng, components: list, which: np.ndarray,
                        override: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
    tcp = np.zeros(which.size, dtype=bool)
    flags = np.zeros(which.size, dtype=np.int64)
    for i, comp in enumerate(components):
        src = override or comp
        idx = np.flatnonzero(which == i)
        tcp[idx] = rng.random(idx.size) < src["p_tcp"]
        flags[idx] = _categorical(rng, src["flags"], idx.size)
    return np.where(tcp, 6, 17), np.where(tcp, flags, 0)


def sample_domain(name: str, seed: int, preset: dict | None = None) -> dict:
    """Raw rows for one domain as a dict of column arrays (string columns included)."""
    preset = preset or load_preset()
    dom = preset["domains"][name]
    ddos_cfg = preset["ddos"]
    rng = np.random.default_rng([seed, ord(name[0])])
    nb, nd = dom["benign_rows"], dom["ddos_rows"]
    g_benign, w_benign = _mixture(rng, dom["components"], nb)
    g_ddos, w_ddos = _mixture(rng, dom["components"], nd)
    g = np.vstack([g_benign, g_ddos + np.asarray(ddos_cfg["shift"])])
    base, scale = np.asarray(preset["base"]), np.asarray(preset["scale"])
    cont = np.round(base + scale * g, 3)
    labels = np.array(["benign"] * nb + ["ddos"] * nd)
    proto_b, flags_b = _protocol_and_flags(rng, dom["components"], w_benign)
    proto_d, flags_d = _protocol_and_flags(rng, dom["components"], w_ddos, ddos_cfg)
    protocol = np.concatenate([proto_b, proto_d])
    flags = np.concatenate([flags_b, flags_d])
    n = nb + nd
    cols = {
        "src_ip": [f"10.{ord(name[0]) % 256}.{a}.{b}" for a, b in rng.integers(0, 256, (n, 2))],
        "dst_ip": [f"192.168.{a}.{b}" for a, b in rng.integers(0, 256, (n, 2))],
        "src_port": rng.integers(1024, 65536, n),
        "dst_port": rng.choice([53, 80, 443, 8080], n),
        "protocol": protocol,
        "tcp_flags": flags,
    }
    for j, c in enumerate(preset["continuous"]):
        cols[c] = cont[:, j]
    cols["label"] = labels
    order = rng.permutation(n)
    return {k: [v[i] for i in order] for k, v in cols.items()}


def write_domain_csv(path: str | Path, columns: dict) -> None:
    names = list(columns)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in zip(*(columns[c] for c in names)):
            w.writerow([v.item() if isinstance(v, np.generic) else v for v in row])


def make_toy(out_dir: str | Path, seed: int = 0, preset_name: str = DEFAULT_PRESET,
             domains: tuple[str, ...] = ("A", "B", "C", "X")) -> dict:
    """Write one CSV per domain plus ``schema.json`` and ``ranges.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    preset = load_preset(preset_name)
    files = {}
    for name in domains:
        path = out / f"{name}.csv"
        write_domain_csv(path, sample_domain(name, seed, preset))
        files[name] = path.name
    (out / "schema.json").write_text(json.dumps(toy_schema(preset).to_dict(), indent=2))
    (out / "ranges.json").write_text(json.dumps(semantic_ranges(), indent=2))
    return {"preset": preset["version"], "seed": seed, "files": files}
