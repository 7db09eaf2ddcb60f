"""FedAvg over GANomaly weights, simulated in-process."""
from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import ganomaly as gan
from .. import netcore as nc
from ..flowdata import DataError, FlowTable, ScalerParams, SplitSet, apply_scaler, fit_scaler

log = logging.getLogger(__name__)


class FederationError(RuntimeError):
    pass


@dataclass
class FLConfig:
    rounds: int = 10
    local_epochs: int = 50
    seed: int = 0
    weighting: str = "samples"
    min_quorum: int = 1
    round_timeout: float = 600.0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.weighting not in ("samples", "uniform"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.min_quorum < 1:
            raise ValueError("min_quorum must be >= 1")


@dataclass
class ClientUpdate:
    client_id: str
    round: int
    weights: nc.ModelWeights
    sample_count: int
    losses: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.sample_count <= 0:
            raise ValueError("sample_count must be positive")

    def to_bytes(self) -> bytes:
        meta = json.dumps({"client_id": self.client_id, "losses": self.losses},
                          sort_keys=True).encode()
        return (struct.pack(">IQI", self.round, self.sample_count, len(meta)) + meta
                + self.weights.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ClientUpdate":
        rnd, count, mlen = struct.unpack_from(">IQI", blob, 0)
        meta = json.loads(blob[16:16 + mlen])
        weights = nc.ModelWeights.from_bytes(blob[16 + mlen:])
        return cls(meta["client_id"], rnd, weights, count, meta["losses"])


@dataclass
class RoundLog:
    round: int
    client_losses: dict
    participants: list
    failed: dict
    aggregation_seconds: float
    fingerprint: str

    def to_dict(self) -> dict:
        return {"round": self.round, "client_losses": self.client_losses,
                "participants": self.participants, "failed": self.failed,
                "aggregation_seconds": self.aggregation_seconds,
                "fingerprint": self.fingerprint}


def fedavg(updates: Sequence[ClientUpdate], weighting: str = "samples") -> nc.ModelWeights:
    """Sample-weighted elementwise mean, summed in client-id order."""
    if not updates:
        raise FederationError("no client updates to aggregate")
    ups = sorted(updates, key=lambda u: u.client_id)
    rounds = {u.round for u in ups}
    if len(rounds) != 1:
        raise FederationError(f"updates from different rounds: {sorted(rounds)}")
    shapes = ups[0].weights.shapes
    for u in ups[1:]:
        if u.weights.shapes != shapes:
            raise FederationError(f"client {u.client_id!r} sent weights with mismatched shapes")
    if weighting == "samples":
        total = float(sum(u.sample_count for u in ups))
        coef = [u.sample_count / total for u in ups]
    elif weighting == "uniform":
        coef = [1.0 / len(ups)] * len(ups)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    out = []
    for i in range(len(shapes)):
        # anchored at the first update: identical updates aggregate bit-exactly
        anchor = ups[0].weights.tensors[i]
        acc = anchor.copy()
        lo, hi = anchor.copy(), anchor.copy()
        for c, u in zip(coef[1:], ups[1:]):
            t = u.weights.tensors[i]
            acc += c * (t - anchor)
            np.minimum(lo, t, out=lo)
            np.maximum(hi, t, out=hi)
        out.append(np.clip(acc, lo, hi))
    return nc.ModelWeights(out)


def client_rng(seed: int, client_id: str, round_no: int) -> np.random.Generator:
    cid = int.from_bytes(hashlib.sha256(client_id.encode()).digest()[:8], "big")
    return np.random.default_rng([seed, cid, round_no])


class Client:
    """One silo: private data, private scaler, a local model copy and optimizer state."""

    def __init__(self, client_id: str, split: SplitSet, arch: gan.GanomalyArch,
                 config: gan.TrainConfig, seed: int = 0):
        if len(split.train) == 0:
            raise DataError(f"client {client_id!r} has no training rows")
        if split.train.n_ddos:
            raise DataError(f"client {client_id!r} training split contains ddos rows")
        self.client_id = client_id
        self.split = split
        self.scaler: ScalerParams = fit_scaler(split.train)
        self.train_table: FlowTable = apply_scaler(split.train, self.scaler)
        self.model = gan.GanomalyModel(arch, seed, config)

    @property
    def sample_count(self) -> int:
        return len(self.train_table)

    def local_train(self, global_weights: nc.ModelWeights, round_no: int, epochs: int,
                    fl_seed: int) -> ClientUpdate:
        self.model.set_weights(global_weights)
        rng = client_rng(fl_seed, self.client_id, round_no)
        losses = {}
        for _ in range(epochs):
            losses = gan.train_epoch(self.model, self.train_table, None, rng)
        return ClientUpdate(self.client_id, round_no, self.model.get_weights(),
                            self.sample_count, losses)


def initial_weights(arch: gan.GanomalyArch, config: gan.TrainConfig, seed: int) -> nc.ModelWeights:
    return gan.GanomalyModel(arch, seed, config).get_weights()


def run_round(global_weights: nc.ModelWeights, clients: Sequence[Client], cfg: FLConfig,
              round_no: int) -> tuple[nc.ModelWeights, RoundLog]:
    updates, failed = [], {}
    for c in sorted(clients, key=lambda c: c.client_id):
        try:
            updates.append(c.local_train(global_weights, round_no, cfg.local_epochs, cfg.seed))
        except Exception as exc:  # a failing silo is dropped from this round only
            log.warning("round %d: client %s failed: %s", round_no, c.client_id, exc)
            failed[c.client_id] = repr(exc)
    return aggregate_round(updates, failed, cfg, round_no)


def aggregate_round(updates: list[ClientUpdate], failed: dict, cfg: FLConfig,
                    round_no: int) -> tuple[nc.ModelWeights, RoundLog]:
    if len(updates) < cfg.min_quorum:
        raise FederationError(
            f"round {round_no}: {len(updates)} updates, quorum is {cfg.min_quorum}; failed={failed}")
    t0 = time.perf_counter()
    new = fedavg(updates, cfg.weighting)
    elapsed = time.perf_counter() - t0
    rl = RoundLog(round_no, {u.client_id: u.losses for u in updates},
                  sorted(u.client_id for u in updates), failed, elapsed, new.fingerprint())
    log.info("round %d aggregated %d updates -> %s", round_no, len(updates), rl.fingerprint[:12])
    return new, rl


@dataclass
class FederationResult:
    weights: nc.ModelWeights
    logs: list[RoundLog]

    @property
    def fingerprint(self) -> str:
        return self.weights.fingerprint()


def run_federation(cfg: FLConfig, clients: Sequence[Client], arch: gan.GanomalyArch,
                   config: gan.TrainConfig,
                   on_round: Callable[[RoundLog], None] | None = None) -> FederationResult:
    if not clients:
        raise FederationError("federation needs at least one client")
    weights = initial_weights(arch, config, cfg.seed)
    logs = []
    for r in range(1, cfg.rounds + 1):
        weights, rl = run_round(weights, clients, cfg, r)
        logs.append(rl)
        if on_round:
            on_round(rl)
    return FederationResult(weights, logs)


def global_model(result_weights: nc.ModelWeights, arch: gan.GanomalyArch, config: gan.TrainConfig,
                 seed: int, epochs_done: int) -> gan.GanomalyModel:
    model = gan.GanomalyModel(arch, seed, config)
    model.set_weights(result_weights)
    model.trained_epochs = epochs_done
    return model


def train_solo(split: SplitSet, arch: gan.GanomalyArch, config: gan.TrainConfig, seed: int,
               client_id: str, epochs: int) -> tuple[gan.GanomalyModel, ScalerParams]:
    """Local-only training; matches a one-client, one-round federation bit for bit."""
    client = Client(client_id, split, arch, config, seed)
    update = client.local_train(initial_weights(arch, config, seed), 1, epochs, seed)
    model = global_model(update.weights, arch, config, seed, epochs)
    return model, client.scaler

