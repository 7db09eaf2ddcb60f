"""The three pipeline stages as functions over a workspace directory.

Every stage writes into its own subdirectory of the workspace and finishes with a
``manifest.json`` (command, config snapshot, seeds, input and output hashes, tool
version, wall time). Downstream stages re-hash upstream outputs before reading
them and refuse to run on anything stale. Wall times live only in manifests, so
the hashed outputs of a rerun with the same seed are byte-identical.
"""
from __future__ import annotations

import hashlib
import json
import logging
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import evalkit as ek
from . import extmodels as ext
from . import federation as fl
from . import ganomaly as gan
from .federation import wire
from .flowdata import (DataError, FlowSchema, FlowTable, ScalerParams, SplitSet,
                       concat_tables, labeled_holdout, load_csv, preprocess, processed_columns,
                       read_table, scale_array, split, write_table)

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
FL_ID = "FL"

# config sections each stage depends on; a mismatch with the upstream snapshot is stale
STAGE_KEYS = {
    "preprocess": ("seed", "schema", "silos", "external", "preprocess"),
    "train-local": ("ganomaly", "evaluation"),
    "federate": ("ganomaly", "federation", "evaluation"),
    "generate": ("generate",),
    "external-pretrain": ("external_models",),
    "external-finetune": ("external_models",),
}
UPSTREAM = {
    "train-local": ("preprocess",),
    "federate": ("preprocess",),
    "generate": ("preprocess", "federate"),
    "external-pretrain": ("generate",),
    "external-finetune": ("preprocess", "external-pretrain"),
    "external-eval": ("preprocess", "external-finetune"),
    "crosseval": ("preprocess", "train-local", "federate"),
}


class StaleError(RuntimeError):
    """An upstream artifact is missing, modified, or built from a different config."""


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(directory: Path) -> dict:
    """Relative path -> sha256 for every file below ``directory`` but its own manifest."""
    out = {}
    for p in sorted(directory.rglob("*")):
        rel = p.relative_to(directory).as_posix()
        if p.is_file() and rel != MANIFEST:
            out[rel] = sha256_file(p)
    return out


def digest(hashes: dict) -> str:
    return hashlib.sha256(json.dumps(hashes, sort_keys=True).encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    inputs: dict
    outputs: dict
    tool_version: str = __version__
    wall_time_s: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def output_digest(self) -> str:
        return digest(self.outputs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["output_digest"] = self.output_digest
        return d

    @classmethod
    def read(cls, directory: str | Path) -> "RunManifest":
        d = json.loads((Path(directory) / MANIFEST).read_text())
        d.pop("output_digest", None)
        return cls(**d)


class Stage:
    """Context for one stage run: a fresh output directory plus manifest bookkeeping."""

    def __init__(self, workspace: str | Path, name: str, command: str, cfg: dict | None,
                 report_path: Path | None = None):
        self.workspace = Path(workspace)
        self.name = name
        self.command = command
        self.cfg = cfg or {}
        self.inputs: dict = {}
        self.extra: dict = {}
        self.t0 = time.perf_counter()
        # a report written into a shared directory only owns its own files
        self.own_files: list[str] | None = None
        self.manifest_name = MANIFEST
        self._dir = self.workspace / name
        self._ready = False
        if report_path is not None:
            self._dir = Path(report_path).parent
            stem = Path(report_path).stem
            self.own_files = [Path(report_path).name, stem + ".txt"]
            self.manifest_name = stem + ".manifest.json"

    @property
    def dir(self) -> Path:
        """Output directory, emptied on first use so upstream checks run before any deletion."""
        if not self._ready:
            if self.own_files is None and self._dir.exists():
                shutil.rmtree(self._dir)
            self._dir.mkdir(parents=True, exist_ok=True)
            self._ready = True
        return self._dir

    def add_input(self, name: str, path: str | Path) -> None:
        self.inputs[name] = sha256_file(path)

    def use(self, stage: str) -> RunManifest:
        m = require(self.workspace, stage, self.cfg)
        self.inputs[f"stage:{stage}"] = m.output_digest
        return m

    def finish(self) -> RunManifest:
        outputs = hash_tree(self.dir) if self.own_files is None else {
            f: sha256_file(self.dir / f) for f in self.own_files}
        m = RunManifest(self.command, self.cfg, {"seed": self.cfg.get("seed")}, self.inputs,
                        outputs, __version__, round(time.perf_counter() - self.t0, 3), self.extra)
        (self.dir / self.manifest_name).write_text(
            json.dumps(m.to_dict(), indent=2, sort_keys=True))
        log.info("%s done in %.1fs -> %s", self.name, m.wall_time_s, self.dir)
        return m


def verify_dir(directory: Path) -> RunManifest:
    if not (directory / MANIFEST).is_file():
        raise StaleError(f"{directory} has no {MANIFEST}; run its stage first")
    m = RunManifest.read(directory)
    now = hash_tree(directory)
    changed = sorted(k for k in m.outputs if now.get(k) != m.outputs[k])
    added = sorted(set(now) - set(m.outputs))
    if changed or added:
        raise StaleError(f"{directory}: outputs differ from its manifest "
                         f"(modified or missing: {changed[:5]}, unexpected: {added[:5]})")
    return m


def require(workspace: Path, stage: str, cfg: dict | None = None) -> RunManifest:
    """Load and check an upstream stage: its files, its config, and its own inputs."""
    m = verify_dir(Path(workspace) / stage)
    if cfg:
        keys = set(STAGE_KEYS.get(stage, ()))
        for up in _ancestors(stage):
            keys |= set(STAGE_KEYS.get(up, ()))
        diff = sorted(k for k in keys if m.config.get(k) != cfg.get(k))
        if diff:
            raise StaleError(f"{stage} was built with a different config; differing keys: {diff}")
    for name, value in m.inputs.items():
        if not name.startswith("stage:"):
            continue
        up = name[len("stage:"):]
        current = RunManifest.read(Path(workspace) / up).output_digest \
            if (Path(workspace) / up / MANIFEST).is_file() else None
        if current != value:
            raise StaleError(f"{stage} is older than its input stage {up}; rerun {stage}")
    return m


def _ancestors(stage: str) -> set:
    out = set()
    for up in UPSTREAM.get(stage, ()):
        out.add(up)
        out |= _ancestors(up)
    return out


# ---------------------------------------------------------------- config -> objects

def load_schema(cfg: dict) -> FlowSchema:
    return FlowSchema.load(cfg["schema"])


def arch_from(cfg: dict, input_dim: int) -> gan.GanomalyArch:
    g = cfg["ganomaly"]
    return gan.GanomalyArch(input_dim, int(g["latent_dim"]), tuple(g["hidden"]))


def train_config_from(cfg: dict, epochs: int) -> gan.TrainConfig:
    g = cfg["ganomaly"]
    return gan.TrainConfig(epochs=epochs, batch_size=int(g["batch_size"]), lr=float(g["lr"]),
                           beta1=float(g["beta1"]), w_adv=float(g["w_adv"]),
                           w_con=float(g["w_con"]), w_enc=float(g["w_enc"]))


def fl_config_from(cfg: dict) -> fl.FLConfig:
    f = cfg["federation"]
    return fl.FLConfig(rounds=int(f["rounds"]), local_epochs=int(f["local_epochs"]),
                       seed=int(cfg["seed"]), weighting=f["weighting"],
                       min_quorum=int(f["min_quorum"]), round_timeout=float(f["round_timeout"]))


def _sub_seed(seed: int, *tags: str) -> np.random.Generator:
    ints = [int.from_bytes(hashlib.sha256(t.encode()).digest()[:8], "big") for t in tags]
    return np.random.default_rng([seed, *ints])


# ---------------------------------------------------------------- stage: preprocess

def prepare_silo(cfg: dict, schema: FlowSchema, silo: str) -> SplitSet:
    table = preprocess(load_csv(cfg["silos"][silo], schema), schema, cfg["preprocess"]["iqr_k"])
    return split(table, int(cfg["seed"]))


def prepare_external(cfg: dict, schema: FlowSchema, party: str) -> tuple[FlowTable, FlowTable]:
    table = preprocess(load_csv(cfg["external"][party], schema), schema,
                       cfg["preprocess"]["iqr_k"])
    return labeled_holdout(table, int(cfg["seed"]), cfg["preprocess"]["external_test_fraction"])


def run_preprocess(cfg: dict, workspace: str | Path) -> RunManifest:
    schema = load_schema(cfg)
    st = Stage(workspace, "preprocess", "preprocess", cfg)
    st.add_input("schema", cfg["schema"])
    for silo, path in sorted(cfg["silos"].items()):
        st.add_input(f"silo:{silo}", path)
        parts = prepare_silo(cfg, schema, silo)
        d = st.dir / silo
        d.mkdir()
        for name in ("train", "test", "validation"):
            write_table(getattr(parts, name), d / f"{name}.csv", {"silo": silo})
    for party, path in sorted(cfg["external"].items()):
        st.add_input(f"external:{party}", path)
        local, test = prepare_external(cfg, schema, party)
        d = st.dir / party
        d.mkdir()
        write_table(local, d / "local.csv", {"external_party": party})
        write_table(test, d / "test.csv", {"external_party": party})
    return st.finish()


def load_split(directory: Path) -> SplitSet:
    parts = {n: read_table(directory / f"{n}.csv") for n in ("train", "test", "validation")}
    return SplitSet(parts["train"], parts["test"], parts["validation"],
                    int(parts["train"].provenance.get("split_seed", 0)))


# ---------------------------------------------------------------- calibration

def calibrate(model: gan.GanomalyModel, scaler: ScalerParams, parts: SplitSet, q: float,
              name: str) -> tuple[ek.Detector, dict]:
    """Per-silo score normalization, threshold and latent statistics for one model."""
    det = ek.Detector(model.clone(), scaler, name)
    report = ek.select_threshold(det, parts.validation, q)
    gan.fit_latent(det.model, scale_array(parts.train.features, scaler))
    cal = {
        "scaler": scaler.to_dict(),
        "score_norm": list(det.model.score_norm),
        "threshold": report.threshold,
        "threshold_report": report.to_dict(),
        "latent_mean": det.model.latent_mean.tolist(),
        "latent_std": det.model.latent_std.tolist(),
        "train_rows": len(parts.train),
        "weights_fingerprint": model.get_weights().fingerprint(),
    }
    return det, cal


def write_calibration(model_dir: Path, dataset: str, cal: dict) -> None:
    d = model_dir / "calibration"
    d.mkdir(parents=True, exist_ok=True)
    (d / f"{dataset}.json").write_text(json.dumps(cal, indent=2, sort_keys=True))


def detector_from(model: gan.GanomalyModel, cal: dict, name: str) -> ek.Detector:
    m = model.clone()
    m.score_norm = tuple(cal["score_norm"])
    m.latent_mean = np.asarray(cal["latent_mean"])
    m.latent_std = np.asarray(cal["latent_std"])
    return ek.Detector(m, ScalerParams.from_dict(cal["scaler"]), name, cal["threshold"])


def load_detectors(model_dir: Path) -> dict[str, ek.Detector]:
    """Dataset id -> detector for a bundle directory with ``calibration/*.json``."""
    model = gan.load_bundle(model_dir)
    out = {}
    for p in sorted((model_dir / "calibration").glob("*.json")):
        cal = json.loads(p.read_text())
        if cal["weights_fingerprint"] != model.get_weights().fingerprint():
            raise StaleError(f"{p} calibrates different weights than {model_dir}")
        out[p.stem] = detector_from(model, cal, model_dir.name)
    if not out:
        raise StaleError(f"{model_dir} has no calibration files")
    return out


# ---------------------------------------------------------------- stage: train-local

def run_train_local(cfg: dict, workspace: str | Path) -> RunManifest:
    st = Stage(workspace, "train-local", "train-local", cfg)
    st.use("preprocess")
    seed = int(cfg["seed"])
    epochs = int(cfg["ganomaly"]["local_epochs"])
    for silo in sorted(cfg["silos"]):
        parts = load_split(st.workspace / "preprocess" / silo)
        arch = arch_from(cfg, len(parts.train.column_names))
        tcfg = train_config_from(cfg, epochs)
        log.info("train-local: %s, %d epochs on %d rows", silo, epochs, len(parts.train))
        model, scaler = fl.train_solo(parts, arch, tcfg, seed, silo, epochs)
        _, cal = calibrate(model, scaler, parts, cfg["evaluation"]["q"], silo)
        gan.save_bundle(model, st.dir / silo, {"scaler_fingerprint": scaler.fitted_on,
                                                 "trained_on": [silo]})
        write_calibration(st.dir / silo, silo, cal)
    return st.finish()


# ---------------------------------------------------------------- stage: federate

def _rounds_json(logs) -> list:
    # wall times are left out so the file hashes identically across reruns
    return [{k: v for k, v in rl.to_dict().items() if k != "aggregation_seconds"} for rl in logs]


def run_federate_simulate(cfg: dict, workspace: str | Path) -> RunManifest:
    st = Stage(workspace, "federate", "federate simulate", cfg)
    st.use("preprocess")
    fcfg = fl_config_from(cfg)
    splits = {s: load_split(st.workspace / "preprocess" / s) for s in sorted(cfg["silos"])}
    arch = arch_from(cfg, len(next(iter(splits.values())).train.column_names))
    tcfg = train_config_from(cfg, fcfg.local_epochs)
    clients = [fl.Client(s, parts, arch, tcfg, fcfg.seed) for s, parts in splits.items()]
    result = fl.run_federation(
        fcfg, clients, arch, tcfg,
        on_round=lambda rl: log.info("round %d: %s", rl.round, rl.fingerprint[:12]))
    st.extra["aggregation_seconds"] = [rl.aggregation_seconds for rl in result.logs]
    _write_global(st, result, arch, tcfg, fcfg, sorted(splits))
    for c in clients:
        _, cal = calibrate(_global(result, arch, tcfg, fcfg), c.scaler, c.split,
                           cfg["evaluation"]["q"], FL_ID)
        write_calibration(st.dir / FL_ID, c.client_id, cal)
    return st.finish()


def _global(result, arch, tcfg, fcfg) -> gan.GanomalyModel:
    return fl.global_model(result.weights, arch, tcfg, fcfg.seed, fcfg.rounds * fcfg.local_epochs)


def _write_global(st: Stage, result, arch, tcfg, fcfg, participants) -> None:
    gan.save_bundle(_global(result, arch, tcfg, fcfg), st.dir / FL_ID,
                    {"trained_on": list(participants), "rounds": fcfg.rounds,
                     "local_epochs": fcfg.local_epochs, "weighting": fcfg.weighting})
    (st.dir / "rounds.json").write_text(json.dumps(_rounds_json(result.logs), indent=2,
                                                   sort_keys=True))


def run_federate_serve(cfg: dict, workspace: str | Path, bind: str,
                       expected_clients: int | None = None, join_timeout: float = 120.0
                       ) -> RunManifest:
    """Aggregation server. Holds no data: the input width comes from the schema."""
    schema = load_schema(cfg)
    st = Stage(workspace, "federate", "federate serve", cfg)
    st.add_input("schema", cfg["schema"])
    fcfg = fl_config_from(cfg)
    arch = arch_from(cfg, len(processed_columns(schema)))
    tcfg = train_config_from(cfg, fcfg.local_epochs)
    n = expected_clients or len(cfg["silos"])
    server = wire.FederationServer(fcfg, arch, tcfg, n, wire.parse_address(bind), join_timeout)
    log.info("federate serve: listening on %s:%d for %d clients", *server.address, n)
    try:
        result = server.run()
    finally:
        server.close()
    st.extra["events"] = server.events
    st.extra["aggregation_seconds"] = [rl.aggregation_seconds for rl in result.logs]
    participants = sorted({p for rl in result.logs for p in rl.participants})
    _write_global(st, result, arch, tcfg, fcfg, participants)
    (st.dir / "events.json").write_text(json.dumps(server.events, indent=2, sort_keys=True))
    return st.finish()


def run_federate_client(cfg: dict, workspace: str | Path, server: str, silo: str | None = None,
                        timeout: float = 3600.0) -> RunManifest:
    """One silo joining a served federation; writes its local calibration of the result."""
    if silo is None:
        if len(cfg["silos"]) != 1:
            raise ValueError("config lists several silos; choose one with --silo")
        silo = next(iter(cfg["silos"]))
    if silo not in cfg["silos"]:
        raise ValueError(f"silo {silo!r} is not in the config")
    schema = load_schema(cfg)
    st = Stage(workspace, f"federate-client-{silo}", f"federate client --silo {silo}", cfg)
    st.add_input(f"silo:{silo}", cfg["silos"][silo])
    parts = prepare_silo(cfg, schema, silo)
    fcfg = fl_config_from(cfg)
    arch = arch_from(cfg, len(parts.train.column_names))
    tcfg = train_config_from(cfg, fcfg.local_epochs)
    client = fl.Client(silo, parts, arch, tcfg, fcfg.seed)
    weights = wire.connect(server, client, timeout)
    model = fl.global_model(weights, arch, tcfg, fcfg.seed, fcfg.rounds * fcfg.local_epochs)
    _, cal = calibrate(model, client.scaler, parts, cfg["evaluation"]["q"], FL_ID)
    (st.dir / "calibration.json").write_text(json.dumps(cal, indent=2, sort_keys=True))
    return st.finish()


def fl_calibrations(workspace: Path) -> tuple[gan.GanomalyModel, dict[str, dict]]:
    """The federated model and its calibration at each silo.

    In simulation the calibrations sit next to the bundle; in wire mode each silo
    writes its own ``federate-client-<silo>/calibration.json``.
    """
    model_dir = workspace / "federate" / FL_ID
    model = gan.load_bundle(model_dir)
    fp = model.get_weights().fingerprint()
    cals = {}
    if (model_dir / "calibration").is_dir():
        files = {p.stem: p for p in sorted((model_dir / "calibration").glob("*.json"))}
    else:
        files = {}
        for d in sorted(workspace.glob("federate-client-*")):
            verify_dir(d)
            files[d.name[len("federate-client-"):]] = d / "calibration.json"
    for silo, p in files.items():
        cal = json.loads(p.read_text())
        if cal["weights_fingerprint"] != fp:
            raise StaleError(f"{p} calibrates different weights than the federated bundle")
        cals[silo] = cal
    if not cals:
        raise StaleError("no per-silo calibration of the federated model was found")
    return model, cals


def fl_detectors(workspace: Path) -> dict[str, ek.Detector]:
    model, cals = fl_calibrations(workspace)
    return {s: detector_from(model, cal, FL_ID) for s, cal in cals.items()}


# ---------------------------------------------------------------- stage: generate

def share_counts(n: int, weights: dict) -> dict:
    """Split ``n`` in proportion to ``weights`` (largest remainder, ties by key)."""
    keys = sorted(weights)
    total = sum(weights[k] for k in keys)
    exact = {k: n * weights[k] / total for k in keys}
    out = {k: int(np.floor(exact[k])) for k in keys}
    rest = n - sum(out.values())
    for k in sorted(keys, key=lambda k: (-(exact[k] - out[k]), k))[:rest]:
        out[k] += 1
    return out


def load_ranges(cfg: dict) -> list[gan.RangeRule]:
    if not cfg.get("ranges"):
        return []
    return gan.rules_from_dict(json.loads(Path(cfg["ranges"]).read_text()))


def generate_shares(model: gan.GanomalyModel, cals: dict[str, dict], n: int, seed: int
                    ) -> dict[str, FlowTable]:
    """Each silo decodes its share with its own latent statistics and scaler.

    Shares are proportional to the silos' training row counts.
    """
    counts = share_counts(n, {s: cal["train_rows"] for s, cal in cals.items()})
    out = {}
    for s in sorted(cals):
        if counts[s] == 0:
            continue
        det = detector_from(model, cals[s], FL_ID)
        out[s] = gan.generate_synthetic(det.model, counts[s], _sub_seed(seed, "generate", s),
                                        det.scaler, source="synthetic")
    return out


def nn_histogram(share: FlowTable, train: FlowTable, scaler: ScalerParams) -> dict:
    """Distances from a synthetic share to its silo's training rows, in scaled space."""
    scaled = share.with_features(scale_array(share.features, scaler))
    rep, _ = gan.audit_synthetic(scaled, [], reference=scale_array(train.features, scaler))
    return rep.nn_distance_histogram


def run_generate(cfg: dict, workspace: str | Path, n: int | None = None) -> RunManifest:
    st = Stage(workspace, "generate", "generate", cfg)
    st.use("preprocess")
    st.use("federate")
    n = int(n or cfg["generate"]["n"])
    model, cals = fl_calibrations(st.workspace)
    shares = generate_shares(model, cals, n, int(cfg["seed"]))
    synth = concat_tables([shares[s] for s in sorted(shares)], source="synthetic")
    write_table(synth, st.dir / "synthetic.csv",
                {"shares": {s: len(t) for s, t in shares.items()},
                 "generator_fingerprint": model.get_weights().fingerprint()})
    report, _ = gan.audit_synthetic(synth, load_ranges(cfg))
    hist = {s: nn_histogram(t, read_table(st.workspace / "preprocess" / s / "train.csv"),
                            ScalerParams.from_dict(cals[s]["scaler"]))
            for s, t in sorted(shares.items())}
    audit = {"range_audit": report.to_dict(), "shares": {s: len(t) for s, t in shares.items()},
             "nearest_neighbour": hist,
             "note": "nearest-neighbour distances are informational, not a privacy guarantee"}
    (st.dir / "audit.json").write_text(json.dumps(audit, indent=2, sort_keys=True))
    return st.finish()


def run_audit(cfg: dict, workspace: str | Path, table_path: str | Path | None = None
              ) -> RunManifest:
    """Stand-alone range audit of any processed-schema CSV (default: the synthetic batch)."""
    st = Stage(workspace, "audit", "audit", cfg)
    if table_path is None:
        st.use("generate")
        table_path = st.workspace / "generate" / "synthetic.csv"
    st.add_input("table", table_path)
    table = read_table(table_path)
    report, kept = gan.audit_synthetic(table, load_ranges(cfg))
    (st.dir / "audit.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    (st.dir / "audit.txt").write_text(render_audit(report) + "\n")
    return st.finish()


def render_audit(report: gan.AuditReport) -> str:
    lines = [f"rows audited: {report.rows}",
             f"violating rows: {report.violating_rows} ({report.violation_ratio:.2%})"]
    for feat, rules in sorted(report.violations.items()):
        for rule, count in sorted(rules.items()):
            lines.append(f"  {feat:<24}{rule:<14}{count:>8}")
    return "\n".join(lines)


# ---------------------------------------------------------------- stage: external models

def _pretrain_config(cfg: dict) -> ext.PretrainConfig:
    p = dict(cfg["external_models"]["pretrain"])
    p["hidden"] = tuple(p.get("hidden", (64, 32)))
    return ext.PretrainConfig(seed=int(cfg["seed"]), **p)


def _finetune_config(cfg: dict) -> ext.FineTuneConfig:
    return ext.FineTuneConfig(seed=int(cfg["seed"]), **cfg["external_models"]["finetune"])


def synthetic_bundle(workspace: Path) -> ext.SyntheticBundle:
    table = read_table(workspace / "generate" / "synthetic.csv")
    audit = json.loads((workspace / "generate" / "audit.json").read_text())["range_audit"]
    report = gan.AuditReport(audit["rows"], audit["violations"], audit["violating_rows"],
                             audit.get("nn_distance_histogram"))
    return ext.SyntheticBundle(table, report, table.provenance.get("generator_fingerprint", ""))


def usable_rows(bundle: ext.SyntheticBundle, rules) -> ext.SyntheticBundle:
    """Drop rows that break a range rule; the audit verdict on the batch is kept."""
    _, kept = gan.audit_synthetic(bundle.table, rules)
    return ext.SyntheticBundle(kept, bundle.audit, bundle.generator_fingerprint)


def run_external_pretrain(cfg: dict, workspace: str | Path) -> RunManifest:
    st = Stage(workspace, "external-pretrain", "external pretrain", cfg)
    st.use("generate")
    bundle = usable_rows(synthetic_bundle(st.workspace), load_ranges(cfg))
    pcfg = _pretrain_config(cfg)
    for kind in cfg["external_models"]["kinds"]:
        log.info("external pretrain: %s on %d synthetic rows", kind, len(bundle.table))
        ext.save(ext.pretrain(kind, bundle, pcfg), st.dir / f"{kind}.extm")
    return st.finish()


def _external_party(cfg: dict) -> str:
    if not cfg["external"]:
        raise ValueError("config has no external party")
    return next(iter(cfg["external"]))


def run_external_finetune(cfg: dict, workspace: str | Path) -> RunManifest:
    st = Stage(workspace, "external-finetune", "external finetune", cfg)
    st.use("preprocess")
    st.use("external-pretrain")
    party = _external_party(cfg)
    local = read_table(st.workspace / "preprocess" / party / "local.csv")
    fcfg = _finetune_config(cfg)
    for kind in cfg["external_models"]["kinds"]:
        model = ext.load(st.workspace / "external-pretrain" / f"{kind}.extm")
        ext.save(ext.fine_tune(model, local, fcfg), st.dir / f"{kind}.extm")
    return st.finish()


def run_external_eval(cfg: dict, workspace: str | Path) -> RunManifest:
    st = Stage(workspace, "external-eval", "external eval", cfg)
    st.use("preprocess")
    st.use("external-finetune")
    party = _external_party(cfg)
    tests = {party: read_table(st.workspace / "preprocess" / party / "test.csv")}
    for s in sorted(cfg["silos"]):
        tests[s] = read_table(st.workspace / "preprocess" / s / "test.csv")
    report = {"own_domain": party, "models": {}}
    for kind in cfg["external_models"]["kinds"]:
        model = ext.load(st.workspace / "external-finetune" / f"{kind}.extm")
        report["models"][kind] = ext.report_dict(ext.evaluate_unseen(model, tests))
    (st.dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    (st.dir / "report.txt").write_text(render_external(report) + "\n")
    return st.finish()


def render_external(report: dict) -> str:
    lines = [f"{'Model':<20}{'Evaluation Dataset':<22}{'ROC-AUC':>9}{'F1':>9}"]
    lines.append("-" * len(lines[0]))
    for kind, cells in report["models"].items():
        first = True
        for d, c in cells.items():
            auc = "n/a" if c["roc_auc"] is None else f"{c['roc_auc']:.3f}"
            tag = f"{d} (own)" if d == report["own_domain"] else d
            lines.append(f"{kind if first else '':<20}{tag:<22}{auc:>9}{c['f1']:>9.3f}")
            first = False
    return "\n".join(lines)


# ---------------------------------------------------------------- stage: crosseval + report

def collect_models(model_dirs: list[Path]) -> tuple[dict, dict, dict]:
    """Scan directories for bundles: single-calibration models and per-silo calibrated ones."""
    locals_, multi, participants = {}, {}, {}
    for root in model_dirs:
        candidates = [root] if (root / "manifest.json").is_file() and \
            (root / "GE.bin").is_file() else sorted(p for p in root.iterdir() if p.is_dir())
        for d in candidates:
            if not (d / "GE.bin").is_file():
                continue
            bundle_meta = json.loads((d / "manifest.json").read_text())
            if d.name == FL_ID and d.parent.name == "federate":
                dets = fl_detectors(d.parent.parent)
            else:
                dets = load_detectors(d)
            participants[d.name] = bundle_meta.get("trained_on", sorted(dets))
            if len(dets) == 1:
                locals_[d.name] = next(iter(dets.values()))
            else:
                multi[d.name] = dets
    return locals_, multi, participants


def run_crosseval(cfg: dict | None, workspace: str | Path, models: list | None = None,
                  datasets: str | Path | None = None, report_path: str | Path | None = None
                  ) -> RunManifest:
    """Every model on every silo test set; ``report_path`` redirects the report files."""
    st = Stage(workspace, "crosseval", "crosseval", cfg,
               Path(report_path) if report_path is not None else None)
    if models is None:
        st.use("train-local")
        st.use("federate")
        model_dirs = [st.workspace / "train-local", st.workspace / "federate"]
    else:
        model_dirs = [Path(m) for m in models]
        for m in model_dirs:
            st.inputs[f"models:{m.name}"] = digest(hash_tree(m))
    if datasets is None:
        st.use("preprocess")
        datasets = st.workspace / "preprocess"
    datasets = Path(datasets)
    wanted = sorted(cfg["silos"]) if cfg else sorted(
        p.name for p in datasets.iterdir() if (p / "test.csv").is_file()
        and (p / "train.csv").is_file())
    tests = {}
    for s in wanted:
        p = datasets / s / "test.csv"
        st.add_input(f"test:{s}", p)
        tests[s] = read_table(p)
    locals_, multi, participants = collect_models(model_dirs)
    fl_dets = multi.pop(FL_ID, None)
    if multi:
        raise DataError(f"models with several calibrations besides {FL_ID}: {sorted(multi)}")
    matrix = ek.cross_evaluate(locals_, tests, fl_dets, FL_ID, participants)
    report = matrix.to_dict()
    report["threshold_sensitivity"] = sensitivity(locals_, fl_dets or {}, tests, datasets)
    name = Path(report_path).name if report_path is not None else "report.json"
    (st.dir / name).write_text(json.dumps(report, indent=2, sort_keys=True))
    (st.dir / (Path(name).stem + ".txt")).write_text(ek.render_table(matrix) + "\n")
    return st.finish()


def sensitivity(locals_: dict, fl_dets: dict, tests: dict, datasets: Path) -> dict:
    """F1 per cell at q in {0.90, 0.95, 0.99}, each model using its calibrating silo's validation."""
    out = {}
    for m, det in locals_.items():
        vpath = datasets / m / "validation.csv"
        if not vpath.is_file():
            continue
        val = read_table(vpath)
        out[m] = {d: ek.threshold_sensitivity(det, val, t) for d, t in tests.items()}
    if fl_dets:
        out[FL_ID] = {}
        for d, t in tests.items():
            vpath = datasets / d / "validation.csv"
            if d in fl_dets and vpath.is_file():
                out[FL_ID][d] = ek.threshold_sensitivity(fl_dets[d], read_table(vpath), t)
    return out


def run_report(cfg: dict, workspace: str | Path) -> RunManifest:
    """Summary of the whole run: cross-evaluation table, external table, round log."""
    st = Stage(workspace, "report", "report", cfg)
    parts = {}
    text = []
    if (st.workspace / "crosseval" / MANIFEST).is_file():
        st.use("crosseval")
        parts["crosseval"] = json.loads((st.workspace / "crosseval" / "report.json").read_text())
        text += ["Cross-evaluation (GANomaly, threshold q = "
                 f"{cfg['evaluation']['q']})", ek.render_table(parts["crosseval"]), ""]
    if (st.workspace / "federate" / MANIFEST).is_file():
        st.use("federate")
        parts["rounds"] = json.loads((st.workspace / "federate" / "rounds.json").read_text())
    if (st.workspace / "generate" / MANIFEST).is_file():
        st.use("generate")
        a = json.loads((st.workspace / "generate" / "audit.json").read_text())
        parts["synthetic_audit"] = a["range_audit"]
        text += [f"Synthetic batch: {a['range_audit']['rows']} rows, "
                 f"{a['range_audit']['violation_ratio']:.2%} violating a range rule", ""]
    if (st.workspace / "external-eval" / MANIFEST).is_file():
        st.use("external-eval")
        parts["external"] = json.loads((st.workspace / "external-eval" / "report.json").read_text())
        text += ["External models (pretrained on synthetic data, fine-tuned locally)",
                 render_external(parts["external"]), ""]
    if not parts:
        raise StaleError("nothing to report; run crosseval or external eval first")
    (st.dir / "summary.json").write_text(json.dumps(parts, indent=2, sort_keys=True))
    (st.dir / "summary.txt").write_text("\n".join(text) + "\n")
    return st.finish()
