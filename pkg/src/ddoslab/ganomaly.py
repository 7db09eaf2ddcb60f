"""Dense GANomaly: encoder-decoder-encoder generator plus discriminator.

The generator maps a flow ``x`` to ``z = GE(x)``, reconstructs ``x_hat = GD(z)``
and re-encodes ``z_hat = E(x_hat)``. The anomaly score is the mean absolute
latent residual ``|z - z_hat|``. The discriminator is split into a feature
trunk (used for feature matching) and a one-unit sigmoid head.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import netcore as nc
from .flowdata import BENIGN, FlowTable, ScalerParams, unscale_array


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class GanomalyArch:
    input_dim: int
    latent_dim: int = 32
    hidden: tuple[int, ...] = (1024, 512, 256)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim <= 0 or self.latent_dim <= 0 or any(h <= 0 for h in self.hidden):
            raise ValueError(f"invalid architecture {self}")

    @property
    def encoder_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.latent_dim)

    @property
    def decoder_dims(self) -> tuple[int, ...]:
        return (self.latent_dim, *reversed(self.hidden), self.input_dim)

    @property
    def disc_feature_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden)

    @property
    def encoder_acts(self) -> tuple[str, ...]:
        return ("leaky_relu",) * len(self.hidden) + ("linear",)

    @property
    def decoder_acts(self) -> tuple[str, ...]:
        return ("relu",) * len(self.hidden) + ("sigmoid",)

    @property
    def disc_feature_acts(self) -> tuple[str, ...]:
        return ("leaky_relu",) * len(self.hidden)

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "latent_dim": self.latent_dim,
                "hidden": list(self.hidden)}

    def sha256(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256
    lr: float = 1e-4
    beta1: float = 0.5
    w_adv: float = 1.0
    w_con: float = 50.0
    w_enc: float = 1.0

    def __post_init__(self):
        ws = (self.w_adv, self.w_con, self.w_enc)
        if min(ws) < 0 or max(ws) == 0:
            raise ValueError("loss weights must be non-negative and not all zero")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class AnomalyScore:
    raw: float
    normalized: float


NET_ORDER = ("GE", "GD", "E", "D")


class GanomalyModel:
    def __init__(self, arch: GanomalyArch, seed: int = 0, config: TrainConfig | None = None):
        self.arch = arch
        self.seed = seed
        self.config = config or TrainConfig()
        self.ge = nc.init(arch.encoder_dims, arch.encoder_acts, seed)
        self.gd = nc.init(arch.decoder_dims, arch.decoder_acts, seed + 1)
        self.e = nc.init(arch.encoder_dims, arch.encoder_acts, seed + 2)
        self.d_feat = nc.init(arch.disc_feature_dims, arch.disc_feature_acts, seed + 3)
        self.d_head = nc.init((arch.hidden[-1], 1), ("sigmoid",), seed + 4)
        self.score_norm: tuple[float, float] | None = None
        self.latent_mean: np.ndarray | None = None
        self.latent_std: np.ndarray | None = None
        self.trained_epochs = 0
        self.reset_optimizers()

    @property
    def loss_weights(self) -> tuple[float, float, float]:
        c = self.config
        return c.w_adv, c.w_con, c.w_enc

    def reset_optimizers(self) -> None:
        c = self.config
        self.g_opt = nc.adam(c.lr, beta1=c.beta1)
        self.d_opt = nc.adam(c.lr, beta1=c.beta1)

    def generator_nets(self) -> list[nc.DenseNet]:
        return [self.ge, self.gd, self.e]

    def nets(self) -> dict[str, list[nc.DenseNet]]:
        return {"GE": [self.ge], "GD": [self.gd], "E": [self.e], "D": [self.d_feat, self.d_head]}

    # -- weights crossing the federation boundary
    def get_weights(self) -> nc.ModelWeights:
        tensors = []
        for name in NET_ORDER:
            for net in self.nets()[name]:
                tensors.extend(p.copy() for p in net.parameters())
        return nc.ModelWeights(tensors)

    def set_weights(self, weights: nc.ModelWeights) -> None:
        tensors = list(weights.tensors)
        expected = [p.shape for name in NET_ORDER for n in self.nets()[name] for p in n.parameters()]
        if [t.shape for t in tensors] != expected:
            raise nc.ShapeError("weights do not match this GANomaly architecture")
        i = 0
        for name in NET_ORDER:
            for net in self.nets()[name]:
                k = len(net.parameters())
                nc.load_into(net, tensors[i:i + k])
                i += k

    def clone(self) -> "GanomalyModel":
        return copy.deepcopy(self)


# ---------------------------------------------------------------- losses

def generator_losses(model: GanomalyModel, x: np.ndarray, need_grads: bool = True):
    """Composite generator loss and gradients for GE, GD and E.

    Returns ``(components, total, grads, x_hat)`` where ``components`` holds the
    unweighted adversarial, contextual and encoder losses and ``grads`` maps
    net name to its parameter gradient list (discriminator untouched).
    """
    w_adv, w_con, w_enc = model.loss_weights
    z, c_ge = nc.forward(model.ge, x)
    x_hat, c_gd = nc.forward(model.gd, z)
    z_hat, c_e = nc.forward(model.e, x_hat)
    f_real = nc.forward(model.d_feat, x)[0]
    f_fake, c_df = nc.forward(model.d_feat, x_hat)

    l_adv, g_ffake = nc.mse_loss(f_fake, f_real)
    l_con, g_xhat_con = nc.l1_loss(x_hat, x)
    l_enc, g_zhat = nc.mse_loss(z_hat, z)
    total = w_adv * l_adv + w_con * l_con + w_enc * l_enc
    comps = {"adv": l_adv, "con": l_con, "enc": l_enc}
    for k, v in comps.items():
        if not math.isfinite(v):
            raise TrainingError(f"non-finite {k} loss")
    if not need_grads:
        return comps, total, None, x_hat

    _, g_xhat_adv = nc.backward(model.d_feat, c_df, w_adv * g_ffake)
    e_grads, g_xhat_enc = nc.backward(model.e, c_e, w_enc * g_zhat)
    g_xhat = g_xhat_adv + w_con * g_xhat_con + g_xhat_enc
    gd_grads, g_z = nc.backward(model.gd, c_gd, g_xhat)
    # z also appears as the target of the encoder loss
    g_z = g_z - w_enc * g_zhat
    ge_grads, _ = nc.backward(model.ge, c_ge, g_z)
    return comps, total, {"GE": ge_grads, "GD": gd_grads, "E": e_grads}, x_hat


def discriminator_loss(model: GanomalyModel, x: np.ndarray, x_hat: np.ndarray,
                       need_grads: bool = True):
    """Binary cross-entropy with real=1, reconstruction=0, averaged over both halves."""
    n = x.shape[0]
    both = np.vstack([x, x_hat])
    target = np.concatenate([np.ones((n, 1)), np.zeros((n, 1))])
    feats, c_f = nc.forward(model.d_feat, both)
    prob, c_h = nc.forward(model.d_head, feats)
    loss, g_prob = nc.bce_loss(prob, target)
    if not math.isfinite(loss):
        raise TrainingError("non-finite disc loss")
    if not need_grads:
        return loss, None
    head_grads, g_feat = nc.backward(model.d_head, c_h, g_prob)
    feat_grads, _ = nc.backward(model.d_feat, c_f, g_feat)
    return loss, {"D_feat": feat_grads, "D_head": head_grads}


def _apply(opt: nc.OptimizerState, nets: Sequence[nc.DenseNet], grads: Sequence[list]) -> None:
    params, flat, names = [], [], []
    for i, (net, g) in enumerate(zip(nets, grads)):
        params.extend(net.parameters())
        flat.extend(g)
        names.extend(f"net{i}.{n}" for n in net.parameter_names())
    nc.step_params(opt, params, flat, names)
    for net in nets:
        net.version += 1


def _check_train_table(train: FlowTable | np.ndarray, model: GanomalyModel) -> np.ndarray:
    if isinstance(train, FlowTable):
        if np.any(train.labels != BENIGN):
            raise TrainingError("GANomaly trains on benign rows only; table has ddos labels")
        x = train.features
    else:
        x = np.asarray(train, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.arch.input_dim:
        raise nc.ShapeError(f"expected {model.arch.input_dim} features, got {x.shape}")
    if x.shape[0] == 0:
        raise TrainingError("empty training table")
    if not np.all(np.isfinite(x)):
        raise TrainingError("training data contains non-finite values")
    return x


def train_step(model: GanomalyModel, xb: np.ndarray) -> dict:
    comps, total, g_grads, x_hat = generator_losses(model, xb)
    _apply(model.g_opt, [model.ge, model.gd, model.e],
           [g_grads["GE"], g_grads["GD"], g_grads["E"]])
    d_loss, d_grads = discriminator_loss(model, xb, x_hat)
    _apply(model.d_opt, [model.d_feat, model.d_head], [d_grads["D_feat"], d_grads["D_head"]])
    comps = dict(comps)
    comps["gen"] = total
    comps["disc"] = d_loss
    return comps


def train_epoch(model: GanomalyModel, train: FlowTable | np.ndarray, batch_size: int | None,
                rng: np.random.Generator) -> dict:
    """One shuffled pass; returns batch-mean loss components."""
    x = _check_train_table(train, model)
    bs = batch_size or model.config.batch_size
    order = rng.permutation(x.shape[0])
    sums: dict[str, float] = {}
    batches = 0
    for start in range(0, x.shape[0], bs):
        comps = train_step(model, x[order[start:start + bs]])
        for k, v in comps.items():
            sums[k] = sums.get(k, 0.0) + v
        batches += 1
    model.trained_epochs += 1
    return {k: v / batches for k, v in sums.items()}


def train(model: GanomalyModel, train_data: FlowTable | np.ndarray, epochs: int | None = None,
          rng: np.random.Generator | None = None) -> list[dict]:
    rng = rng if rng is not None else np.random.default_rng(model.seed)
    epochs = model.config.epochs if epochs is None else epochs
    return [train_epoch(model, train_data, None, rng) for _ in range(epochs)]


# ---------------------------------------------------------------- scoring

def latent_pair(model: GanomalyModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = model.ge(x)
    return z, model.e(model.gd(z))


def raw_score(model: GanomalyModel, x: np.ndarray) -> np.ndarray:
    """Mean absolute latent residual per row (scalar for a single vector)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.shape[1] != model.arch.input_dim:
        raise nc.ShapeError(f"expected {model.arch.input_dim} features, got {x2.shape[1]}")
    z, z_hat = latent_pair(model, x2)
    s = np.mean(np.abs(z - z_hat), axis=1)
    return float(s[0]) if single else s


def fit_score_norm(model: GanomalyModel, scores: Sequence[float]) -> GanomalyModel:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("cannot fit score normalization on an empty list")
    if scores.size < 2:
        raise ValueError("need at least two scores to fit normalization")
    model.score_norm = (float(scores.min()), float(scores.max()))
    return model


def normalize_scores(norm: tuple[float, float] | None, raw: np.ndarray) -> np.ndarray:
    if norm is None:
        raise ValueError("score normalization has not been fitted")
    lo, hi = norm
    raw = np.asarray(raw, dtype=np.float64)
    if hi <= lo:
        return np.zeros_like(raw)
    return np.clip((raw - lo) / (hi - lo), 0.0, 1.0)


def normalize(model: GanomalyModel, raw: float) -> AnomalyScore:
    return AnomalyScore(float(raw), float(normalize_scores(model.score_norm, raw)))


# ---------------------------------------------------------------- generation

def fit_latent(model: GanomalyModel, train: FlowTable | np.ndarray) -> GanomalyModel:
    """Diagonal Gaussian over ``GE(x)`` for the training rows."""
    x = train.features if isinstance(train, FlowTable) else np.asarray(train)
    z = model.ge(x)
    model.latent_mean = z.mean(axis=0)
    model.latent_std = z.std(axis=0)
    return model


def latent_moments(model: GanomalyModel, x: np.ndarray) -> dict:
    """Count, sum and sum of squares of ``GE(x)``; poolable across silos."""
    z = model.ge(x)
    return {"n": int(z.shape[0]), "sum": z.sum(axis=0), "sumsq": (z * z).sum(axis=0)}


def set_latent_from_moments(model: GanomalyModel, moments: Sequence[dict]) -> GanomalyModel:
    n = sum(m["n"] for m in moments)
    s = sum(m["sum"] for m in moments)
    ss = sum(m["sumsq"] for m in moments)
    mean = s / n
    model.latent_mean = mean
    model.latent_std = np.sqrt(np.maximum(ss / n - mean * mean, 0.0))
    return model


def generate_synthetic(model: GanomalyModel, n: int, rng: np.random.Generator,
                       scaler: ScalerParams | None = None, source: str = "synthetic") -> FlowTable:
    """Sample latents from the fitted Gaussian, decode, and map back to raw units."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if model.trained_epochs == 0 or model.latent_mean is None:
        raise TrainingError("model is untrained or has no latent statistics")
    if not (np.all(np.isfinite(model.latent_mean)) and np.all(np.isfinite(model.latent_std))):
        raise TrainingError("degenerate latent statistics")
    if np.all(model.latent_std == 0):
        raise TrainingError("degenerate latent statistics (zero spread)")
    z = model.latent_mean + model.latent_std * rng.standard_normal((n, model.arch.latent_dim))
    x = model.gd(z)
    names = scaler.column_names if scaler is not None else tuple(
        f"f{i}" for i in range(model.arch.input_dim))
    if scaler is not None:
        x = unscale_array(x, scaler)
    return FlowTable(x, np.zeros(n, dtype=np.int8), names, source,
                     {"synthetic": True, "generator_seed": model.seed,
                      "generator_fingerprint": model.get_weights().fingerprint()})


# ---------------------------------------------------------------- audit

@dataclass
class RangeRule:
    feature: str
    low: float = -math.inf
    high: float = math.inf
    name: str = "range"


@dataclass
class AuditReport:
    rows: int
    violations: dict = field(default_factory=dict)  # feature -> rule -> count
    violating_rows: int = 0
    nn_distance_histogram: dict | None = None

    @property
    def violation_ratio(self) -> float:
        return self.violating_rows / self.rows if self.rows else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["violation_ratio"] = self.violation_ratio
        return d


def rules_from_dict(spec: dict) -> list[RangeRule]:
    """``{"protocol": [0, 255], "duration": {"min": 0}}`` style declarations."""
    rules = []
    for feat, r in spec.items():
        if isinstance(r, dict):
            lo, hi = r.get("min", -math.inf), r.get("max", math.inf)
        else:
            lo, hi = r
        name = "non_negative" if lo == 0 and hi == math.inf else "range"
        rules.append(RangeRule(feat, float(lo), float(hi), name))
    return rules


def audit_synthetic(table: FlowTable, rules: Sequence[RangeRule],
                    reference: np.ndarray | None = None, bins: int = 10,
                    ) -> tuple[AuditReport, FlowTable]:
    """Count per-feature range violations; returns the report and a filtered copy.

    ``reference`` (rows in the same column space) adds a histogram of nearest-neighbour
    distances from synthetic rows to it. Informational only.
    """
    bad = np.zeros(len(table), dtype=bool)
    violations: dict = {}
    for rule in rules:
        if rule.feature not in table.column_names:
            continue
        x = table.column(rule.feature)
        hit = (x < rule.low) | (x > rule.high) | ~np.isfinite(x)
        count = int(hit.sum())
        violations.setdefault(rule.feature, {})[rule.name] = count
        bad |= hit
    hist = None
    if reference is not None and len(table):
        from scipy.spatial import cKDTree
        dist, _ = cKDTree(reference).query(table.features, k=1)
        counts, edges = np.histogram(dist, bins=bins)
        hist = {"counts": counts.tolist(), "edges": edges.tolist(),
                "min": float(dist.min()), "median": float(np.median(dist))}
    report = AuditReport(len(table), violations, int(bad.sum()), hist)
    return report, table.take(np.flatnonzero(~bad), audit_filtered=True)


# ---------------------------------------------------------------- bundle I/O

def save_bundle(model: GanomalyModel, directory: str | Path, extra: dict | None = None) -> dict:
    """Four weight files plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    hashes = {}
    for name in NET_ORDER:
        tensors = [p for net in model.nets()[name] for p in net.parameters()]
        blob = nc.encode_tensors(tensors)
        (directory / f"{name}.bin").write_bytes(blob)
        hashes[name] = hashlib.sha256(blob).hexdigest()
    manifest = {
        "arch": model.arch.to_dict(),
        "seed": model.seed,
        "train_config": asdict(model.config),
        "score_norm": model.score_norm,
        "trained_epochs": model.trained_epochs,
        "latent_mean": None if model.latent_mean is None else model.latent_mean.tolist(),
        "latent_std": None if model.latent_std is None else model.latent_std.tolist(),
        "weights_sha256": hashes,
        "fingerprint": model.get_weights().fingerprint(),
    }
    manifest.update(extra or {})
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_bundle(directory: str | Path) -> GanomalyModel:
    directory = Path(directory)
    m = json.loads((directory / "manifest.json").read_text())
    arch = GanomalyArch(m["arch"]["input_dim"], m["arch"]["latent_dim"], tuple(m["arch"]["hidden"]))
    model = GanomalyModel(arch, m["seed"], TrainConfig(**m["train_config"]))
    tensors = []
    for name in NET_ORDER:
        tensors.extend(nc.decode_tensors((directory / f"{name}.bin").read_bytes()))
    model.set_weights(nc.ModelWeights(tensors))
    model.score_norm = tuple(m["score_norm"]) if m["score_norm"] else None
    model.trained_epochs = m["trained_epochs"]
    if m.get("latent_mean") is not None:
        model.latent_mean = np.asarray(m["latent_mean"])
        model.latent_std = np.asarray(m["latent_std"])
    return model
