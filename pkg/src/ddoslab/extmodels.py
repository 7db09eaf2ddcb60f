"""External models trained on synthetic benign flows and shared outside the federation.

Two kinds are supported: an isolation forest and an MLP. Both are pretrained on a
synthetic bundle and then updated incrementally on an external party's own data,
never seeing the synthetic rows again.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import evalkit as ek
from . import netcore as nc
from .flowdata import BENIGN, DDOS, FlowTable, SchemaError
from .ganomaly import AuditReport

KINDS = ("isolation_forest", "mlp_classifier")
EXT_MAGIC = b"EXTM"
EULER_GAMMA = 0.5772156649015329


class AuditRefusal(ValueError):
    def __init__(self, message: str, report: AuditReport):
        super().__init__(message)
        self.report = report


# ---------------------------------------------------------------- isolation forest

def average_path_length(n) -> np.ndarray:
    """c(n): mean path length of an unsuccessful BST search over n points."""
    n = np.asarray(n, dtype=np.float64)
    out = np.zeros_like(n)
    out[n == 2] = 1.0
    big = n > 2
    m = n[big]
    out[big] = 2.0 * (np.log(m - 1.0) + EULER_GAMMA) - 2.0 * (m - 1.0) / m
    return out


@dataclass
class IsolationTree:
    """Array-encoded tree; ``feature == -1`` marks a leaf holding ``size`` rows."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray

    @property
    def height(self) -> int:
        depth = np.zeros(len(self.feature), dtype=int)
        for i in range(len(self.feature)):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[i] + 1
                depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def path_length(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(x.shape[0], dtype=np.int64)
        depth = np.zeros(x.shape[0])
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = x[idx, self.feature[nd]] < self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            depth[idx] += 1
            active = self.feature[node] >= 0
        return depth + average_path_length(self.size[node])

    def arrays(self) -> list[np.ndarray]:
        return [self.feature.astype(np.float64), self.threshold, self.left.astype(np.float64),
                self.right.astype(np.float64), self.size.astype(np.float64)]

    @classmethod
    def from_arrays(cls, arrs) -> "IsolationTree":
        f, t, l, r, s = arrs
        return cls(f.astype(np.int64), t.copy(), l.astype(np.int64), r.astype(np.int64),
                   s.astype(np.int64))


def grow_tree(x: np.ndarray, max_height: int, rng: np.random.Generator) -> IsolationTree:
    feature, threshold, left, right, size = [], [], [], [], []

    def new_node():
        for lst, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (size, 0)):
            lst.append(v)
        return len(feature) - 1

    stack = [(new_node(), np.arange(x.shape[0]), 0)]
    while stack:
        node, rows, depth = stack.pop()
        size[node] = rows.size
        if depth >= max_height or rows.size <= 1:
            continue
        sub = x[rows]
        lo, hi = sub.min(axis=0), sub.max(axis=0)
        candidates = np.flatnonzero(hi > lo)
        if candidates.size == 0:
            continue
        j = int(rng.choice(candidates))
        t = float(rng.uniform(lo[j], hi[j]))
        mask = sub[:, j] < t
        feature[node], threshold[node] = j, t
        l, r = new_node(), new_node()
        left[node], right[node] = l, r
        stack.append((r, rows[~mask], depth + 1))
        stack.append((l, rows[mask], depth + 1))
    return IsolationTree(np.array(feature), np.array(threshold, dtype=np.float64),
                         np.array(left), np.array(right), np.array(size))


class IsolationForest:
    def __init__(self, n_trees: int = 100, subsample: int = 256):
        self.n_trees = n_trees
        self.subsample = subsample
        self.trees: list[IsolationTree] = []
        self.psi = 0
        self.trained_rows = 0

    def fit(self, x: np.ndarray, rng: np.random.Generator) -> "IsolationForest":
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] < 2:
            raise ValueError("isolation forest needs at least two rows")
        self.psi = min(self.subsample, x.shape[0])
        max_height = math.ceil(math.log2(self.psi))
        self.trees = []
        for _ in range(self.n_trees):
            rows = rng.choice(x.shape[0], size=self.psi, replace=False)
            self.trees.append(grow_tree(x[rows], max_height, rng))
        self.trained_rows = x.shape[0]
        return self

    def expected_path_length(self, x: np.ndarray) -> np.ndarray:
        return np.mean([t.path_length(x) for t in self.trees], axis=0)

    def score(self, x: np.ndarray) -> np.ndarray:
        """s(x) = 2^(-E[h(x)] / c(psi)); close to 1 means anomalous."""
        c = float(average_path_length(self.psi))
        return np.power(2.0, -self.expected_path_length(np.asarray(x, dtype=np.float64)) / c)


# ---------------------------------------------------------------- bundle + configs

@dataclass
class SyntheticBundle:
    table: FlowTable
    audit: AuditReport
    generator_fingerprint: str = ""

    def __post_init__(self):
        if self.table.n_ddos:
            raise ValueError("synthetic bundle must hold benign rows only")


@dataclass
class PretrainConfig:
    seed: int = 0
    n_trees: int = 100
    subsample: int = 256
    hidden: tuple = (64, 32)
    epochs: int = 30
    batch_size: int = 256
    lr: float = 1e-3
    q: float = 0.95
    max_violation_ratio: float = 0.10


@dataclass
class FineTuneConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 256
    lr: float = 1e-3
    trees_per_batch: int = 10
    q: float = 0.95


class ExternalModel:
    """Shared model: kind, fitted parameters, pretraining fingerprint, fine-tune log."""

    kind = ""

    def __init__(self, column_names, name: str = ""):
        self.column_names = tuple(column_names)
        self.name = name or self.kind
        self.pretrain_fingerprint = ""
        self.fine_tune_log: list[dict] = []
        self.threshold = 0.5
        self.mean = np.zeros(len(self.column_names))
        self.std = np.ones(len(self.column_names))

    def _standardize(self, table: FlowTable) -> np.ndarray:
        if tuple(table.column_names) != self.column_names:
            raise SchemaError(f"{table.source!r} columns differ from the pretraining features")
        return (table.features - self.mean) / self.std

    def _fit_standardizer(self, x: np.ndarray) -> None:
        self.mean = x.mean(axis=0)
        std = x.std(axis=0)
        self.std = np.where(std > 0, std, 1.0)

    def score(self, table: FlowTable) -> np.ndarray:
        raise NotImplementedError

    def fingerprint(self) -> str:
        return hashlib.sha256(to_bytes(self)).hexdigest()


class ForestModel(ExternalModel):
    kind = "isolation_forest"

    def __init__(self, column_names, name: str = ""):
        super().__init__(column_names, name)
        self.pretrained = IsolationForest()
        self.finetuned: IsolationForest | None = None

    def score(self, table: FlowTable) -> np.ndarray:
        x = self._standardize(table)
        s = self.pretrained.score(x)
        if self.finetuned is not None and self.finetuned.trees:
            s = 0.5 * s + 0.5 * self.finetuned.score(x)
        return s


class MLPModel(ExternalModel):
    kind = "mlp_classifier"
    # A column that is nearly constant in the synthetic batch (a collapsed flag bit)
    # gets a tiny std; real rows would then standardize to 1e4 and saturate the net.
    INPUT_CLIP = 10.0

    def __init__(self, column_names, name: str = ""):
        super().__init__(column_names, name)
        self.encoder: nc.DenseNet | None = None
        self.decoder: nc.DenseNet | None = None
        self.head: nc.DenseNet | None = None
        self.recon_norm = (0.0, 1.0)

    def _standardize(self, table: FlowTable) -> np.ndarray:
        return np.clip(super()._standardize(table), -self.INPUT_CLIP, self.INPUT_CLIP)

    def reconstruction_error(self, x: np.ndarray) -> np.ndarray:
        r = self.decoder(self.encoder(x))
        return np.mean((r - x) ** 2, axis=1)

    def score(self, table: FlowTable) -> np.ndarray:
        x = self._standardize(table)
        if self.head is not None:
            return self.head(self.encoder(x))[:, 0]
        lo, hi = self.recon_norm
        err = self.reconstruction_error(x)
        return np.clip((err - lo) / (hi - lo), 0.0, 1.0) if hi > lo else np.zeros_like(err)


# ---------------------------------------------------------------- operations

def pretrain(kind: str, bundle: SyntheticBundle, config: PretrainConfig | None = None
             ) -> ExternalModel:
    config = config or PretrainConfig()
    if kind not in KINDS:
        raise ValueError(f"unknown external model kind {kind!r}")
    table = bundle.table
    if len(table) == 0:
        raise ValueError("empty synthetic bundle")
    if bundle.audit.violation_ratio > config.max_violation_ratio:
        raise AuditRefusal(
            f"synthetic audit violation ratio {bundle.audit.violation_ratio:.3f} exceeds "
            f"{config.max_violation_ratio:.3f}", bundle.audit)
    rng = np.random.default_rng(config.seed)
    model: ExternalModel
    if kind == "isolation_forest":
        model = ForestModel(table.column_names)
        model._fit_standardizer(table.features)
        x = model._standardize(table)
        model.pretrained = IsolationForest(config.n_trees, config.subsample).fit(x, rng)
        model.threshold = float(ek.quantile_threshold(model.pretrained.score(x), config.q).threshold)
    else:
        model = MLPModel(table.column_names)
        model._fit_standardizer(table.features)
        x = model._standardize(table)
        _pretrain_autoencoder(model, x, config, rng)
        err = model.reconstruction_error(x)
        model.recon_norm = (float(err.min()), float(err.max()))
        model.threshold = float(ek.quantile_threshold(model.score(table), config.q).threshold)
    model.pretrain_fingerprint = table.fingerprint()
    return model


def _pretrain_autoencoder(model: MLPModel, x: np.ndarray, config: PretrainConfig,
                          rng: np.random.Generator) -> None:
    d = x.shape[1]
    hidden = tuple(config.hidden)
    model.encoder = nc.init((d, *hidden), ("leaky_relu",) * len(hidden), config.seed)
    dec_dims = (*reversed(hidden), d)
    model.decoder = nc.init(dec_dims, ("relu",) * (len(hidden) - 1) + ("linear",), config.seed + 1)
    opt = nc.adam(config.lr)
    nets = [model.encoder, model.decoder]
    for _ in range(config.epochs):
        order = rng.permutation(x.shape[0])
        for start in range(0, x.shape[0], config.batch_size):
            xb = x[order[start:start + config.batch_size]]
            h, c_enc = nc.forward(model.encoder, xb)
            r, c_dec = nc.forward(model.decoder, h)
            _, g = nc.mse_loss(r, xb)
            g_dec, g_h = nc.backward(model.decoder, c_dec, g)
            g_enc, _ = nc.backward(model.encoder, c_enc, g_h)
            _step_nets(opt, nets, [g_enc, g_dec])


def _step_nets(opt: nc.OptimizerState, nets, grads) -> None:
    params = [p for n in nets for p in n.parameters()]
    flat = [g for gs in grads for g in gs]
    nc.step_params(opt, params, flat)
    for n in nets:
        n.version += 1


def fine_tune(model: ExternalModel, local: FlowTable, config: FineTuneConfig | None = None
              ) -> ExternalModel:
    """Incremental update on the external party's labeled data.

    Forest: new trees grown on local benign rows, one batch at a time, scored 50/50
    against the pretrained trees. MLP: a sigmoid head on the pretrained encoder,
    trained on labeled batches with cross-entropy.
    """
    config = config or FineTuneConfig()
    if config.epochs == 0 or len(local) == 0:
        return model
    x = model._standardize(local)
    rng = np.random.default_rng([config.seed, len(model.fine_tune_log)])
    if isinstance(model, ForestModel):
        benign = x[local.labels == BENIGN]
        if benign.shape[0] < 2:
            raise ValueError("forest fine-tuning needs local benign rows")
        new = model.finetuned or IsolationForest(0, model.pretrained.subsample)
        for _ in range(config.epochs):
            order = rng.permutation(benign.shape[0])
            for start in range(0, benign.shape[0], config.batch_size):
                rows = benign[order[start:start + config.batch_size]]
                if rows.shape[0] < 2:
                    continue
                batch_forest = IsolationForest(config.trees_per_batch, new.subsample).fit(rows, rng)
                new.trees.extend(batch_forest.trees)
                new.psi = max(new.psi, batch_forest.psi)
                new.trained_rows += rows.shape[0]
                model.fine_tune_log.append({"batch_size": int(rows.shape[0]),
                                            "trees": len(new.trees)})
        new.n_trees = len(new.trees)
        model.finetuned = new
        model.threshold = float(ek.quantile_threshold(
            model.score(local.take(local.labels == BENIGN)), config.q).threshold)
        return model

    if isinstance(model, MLPModel):
        if local.n_ddos == 0 or local.n_benign == 0:
            raise ValueError("MLP fine-tuning needs both benign and ddos rows")
        if model.head is None:
            model.head = nc.init((model.encoder.out_dim, 1), ("sigmoid",), config.seed + 7)
        y = (local.labels == DDOS).astype(np.float64)[:, None]
        opt = nc.adam(config.lr)
        nets = [model.encoder, model.head]
        for _ in range(config.epochs):
            order = rng.permutation(x.shape[0])
            total, batches = 0.0, 0
            for start in range(0, x.shape[0], config.batch_size):
                idx = order[start:start + config.batch_size]
                h, c_enc = nc.forward(model.encoder, x[idx])
                p, c_head = nc.forward(model.head, h)
                loss, g = nc.bce_loss(p, y[idx])
                g_head, g_h = nc.backward(model.head, c_head, g)
                g_enc, _ = nc.backward(model.encoder, c_enc, g_h)
                _step_nets(opt, nets, [g_enc, g_head])
                total += loss
                batches += 1
            model.fine_tune_log.append({"batch_size": config.batch_size,
                                        "loss": total / batches})
        model.threshold = 0.5
        return model
    raise TypeError(f"cannot fine-tune {type(model).__name__}")


def evaluate_unseen(model: ExternalModel, foreign_tests: Mapping[str, FlowTable]
                    ) -> dict[str, ek.EvalReport]:
    bad = [d for d, t in foreign_tests.items() if tuple(t.column_names) != model.column_names]
    if bad:
        raise SchemaError(f"schema mismatch for domains: {bad}")
    return {d: ek.evaluate(model, t, model.threshold, model_id=model.name, dataset_id=d)
            for d, t in foreign_tests.items()}


# ---------------------------------------------------------------- export

def to_bytes(model: ExternalModel) -> bytes:
    tensors = [model.mean, model.std]
    manifest = {
        "kind": model.kind,
        "name": model.name,
        "column_names": list(model.column_names),
        "pretrain_fingerprint": model.pretrain_fingerprint,
        "fine_tune_log": model.fine_tune_log,
        "threshold": model.threshold,
    }
    if isinstance(model, ForestModel):
        for key, forest in (("pretrained", model.pretrained), ("finetuned", model.finetuned)):
            if forest is None:
                manifest[key] = None
                continue
            manifest[key] = {"n_trees": len(forest.trees), "subsample": forest.subsample,
                             "psi": forest.psi, "trained_rows": forest.trained_rows}
            for t in forest.trees:
                tensors.extend(t.arrays())
    else:
        nets = {"encoder": model.encoder, "decoder": model.decoder, "head": model.head}
        manifest["recon_norm"] = list(model.recon_norm)
        manifest["nets"] = {}
        for key, net in nets.items():
            if net is None:
                manifest["nets"][key] = None
                continue
            manifest["nets"][key] = {"dims": list(net.dims), "activations": list(net.activations)}
            tensors.extend(net.parameters())
    meta = json.dumps(manifest, sort_keys=True).encode()
    return EXT_MAGIC + struct.pack("<I", len(meta)) + meta + nc.encode_tensors(tensors)


def from_bytes(blob: bytes) -> ExternalModel:
    if blob[:4] != EXT_MAGIC:
        raise ValueError("not an external model file")
    (mlen,) = struct.unpack_from("<I", blob, 4)
    manifest = json.loads(blob[8:8 + mlen])
    tensors = nc.decode_tensors(blob[8 + mlen:])
    cls = ForestModel if manifest["kind"] == "isolation_forest" else MLPModel
    model = cls(manifest["column_names"], manifest["name"])
    model.pretrain_fingerprint = manifest["pretrain_fingerprint"]
    model.fine_tune_log = manifest["fine_tune_log"]
    model.threshold = manifest["threshold"]
    model.mean, model.std = tensors[0], tensors[1]
    i = 2
    if isinstance(model, ForestModel):
        for key in ("pretrained", "finetuned"):
            meta = manifest[key]
            if meta is None:
                setattr(model, key, None)
                continue
            forest = IsolationForest(meta["n_trees"], meta["subsample"])
            forest.psi, forest.trained_rows = meta["psi"], meta["trained_rows"]
            for _ in range(meta["n_trees"]):
                forest.trees.append(IsolationTree.from_arrays(tensors[i:i + 5]))
                i += 5
            setattr(model, key, forest)
    else:
        model.recon_norm = tuple(manifest["recon_norm"])
        for key in ("encoder", "decoder", "head"):
            meta = manifest["nets"][key]
            if meta is None:
                continue
            k = 2 * len(meta["activations"])
            net = nc.deserialize_weights(nc.ModelWeights(tensors[i:i + k]), meta["dims"],
                                         meta["activations"])
            setattr(model, key, net)
            i += k
    return model


def save(model: ExternalModel, path: str | Path) -> str:
    blob = to_bytes(model)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path: str | Path) -> ExternalModel:
    return from_bytes(Path(path).read_bytes())


def report_dict(reports: Mapping[str, ek.EvalReport]) -> dict:
    return {d: asdict(r) for d, r in reports.items()}
