"""Synchronous federated rounds: sample, broadcast, train locally, average.

Each simulated client owns a private clone of the trainable stores plus its
precomputed feature cache; the frozen encoders are shared read-only. Rounds
are synchronous: all sampled clients finish before aggregation, and
aggregation consumes updates in ascending client id regardless of arrival
order, so threaded and sequential execution produce bitwise identical
parameters. The only thing a client ever sends back is a ClientUpdate.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .datagen import ClientShard, Dataset
from .losses import LossConfig
from .numerics import ParameterStore
from .numerics.tensor import NonFiniteError
from .pipeline import ClassSet, FeatureRows, PromptModel, build_class_set, precompute_features, train_step
from .seeding import split_seed


class ProtocolError(ValueError):
    """An update violates the aggregation contract (shape or name drift)."""


class TrainingDiverged(ArithmeticError):
    """A non-finite value surfaced during local training; carries context."""

    def __init__(self, round_idx: int, client_id: int, step: int, cause: str):
        self.round_idx = round_idx
        self.client_id = client_id
        self.step = step
        self.cause = cause
        super().__init__(f"non-finite value at round {round_idx}, client {client_id}, step {step}: {cause}")


@dataclass
class RoundConfig:
    rounds: int
    local_steps: int
    lr: float
    participation: float = 1.0
    client_seed: int = 0
    lr_schedule: str = "constant"
    batch_size: int | None = None
    weighted: bool = False

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError(f"rounds must be >= 0, got {self.rounds}")
        if self.local_steps < 0:
            raise ValueError(f"local_steps must be >= 0, got {self.local_steps}")
        if self.lr < 0.0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 < self.participation <= 1.0:
            raise ValueError(f"participation must be in (0, 1], got {self.participation}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1 or None, got {self.batch_size}")

    def lr_at(self, round_idx: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * round_idx / max(1, self.rounds)))


@dataclass
class ClientUpdate:
    client_id: int
    theta_i: ParameterStore
    phi_i: ParameterStore | None  # None when the injection block is frozen out
    local_loss_trace: list[float]
    ce_trace: list[float]
    crp_trace: list[float]
    examples_seen: int


@dataclass
class RoundReport:
    round: int
    train_loss: float
    ce: float
    crp: float
    acc_local: float
    acc_base: float
    acc_new: float
    hm: float
    bytes_communicated: int
    participants: list[int]


@dataclass
class FederatedClient:
    client_id: int
    model: PromptModel
    class_set: ClassSet
    feats: FeatureRows

    def n_examples(self) -> int:
        return len(self.feats)


@dataclass
class ServerState:
    model: PromptModel
    rng: np.random.Generator
    round: int = 0
    history: list[RoundReport] = field(default_factory=list)

    @property
    def theta(self) -> ParameterStore:
        return self.model.generator.store

    @property
    def phi(self) -> ParameterStore:
        return self.model.injection.store


def build_clients(global_model: PromptModel, dataset: Dataset, shards: Sequence[ClientShard]) -> list[FederatedClient]:
    """Clone the trainable stores per shard and cache each shard's features."""
    clients = []
    for shard in shards:
        class_set = build_class_set(global_model.text, shard.class_ids, dataset.class_names)
        feats = precompute_features(
            global_model.vision,
            shard.images_array(),
            shard.labels_array(),
            np.full(len(shard.examples), shard.domain_id, dtype=np.int64),
        )
        clients.append(
            FederatedClient(
                client_id=shard.client_id,
                model=global_model.clone(),
                class_set=class_set,
                feats=feats,
            )
        )
    return clients


def sample_clients(n_clients: int, participation: float, rng: np.random.Generator) -> list[int]:
    """Uniform without replacement; size max(1, round-half-up(fraction * N))."""
    if n_clients < 1:
        raise ValueError(f"need at least one client, got {n_clients}")
    if not 0.0 < participation <= 1.0:
        raise ValueError(f"participation must be in (0, 1], got {participation}")
    size = max(1, int(math.floor(participation * n_clients + 0.5)))
    size = min(size, n_clients)
    picked = rng.choice(n_clients, size=size, replace=False)
    return sorted(int(c) for c in picked)


class _BatchSampler:
    """Without-replacement batches, reshuffled per epoch; partial tail
    batches are folded into a fresh shuffle rather than emitted short."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self.perm = rng.permutation(n)
        self.cursor = 0

    def next(self) -> np.ndarray:
        if self.cursor + self.batch_size > self.n:
            self.perm = self.rng.permutation(self.n)
            self.cursor = 0
        out = self.perm[self.cursor : self.cursor + self.batch_size]
        self.cursor += self.batch_size
        return out


def local_train(
    client: FederatedClient,
    broadcast: dict[str, np.ndarray],
    round_idx: int,
    cfg: RoundConfig,
    loss_cfg: LossConfig,
) -> ClientUpdate:
    """Load the global parameters, take K SGD steps, return private copies."""
    model = client.model
    model.load_trainable(broadcast)
    n = client.n_examples()
    if n == 0:
        raise ValueError(f"client {client.client_id} has an empty shard")
    sampler = None
    if cfg.batch_size is not None and cfg.batch_size < n:
        rng = np.random.default_rng(split_seed(cfg.client_seed, f"fed.batch.{client.client_id}.{round_idx}"))
        sampler = _BatchSampler(n, cfg.batch_size, rng)
    lr = cfg.lr_at(round_idx)
    trace: list[float] = []
    ce_trace: list[float] = []
    crp_trace: list[float] = []
    seen = 0
    for step in range(cfg.local_steps):
        idx = sampler.next() if sampler is not None else None
        try:
            stats = train_step(model, client.class_set, client.feats, idx, loss_cfg, lr)
        except NonFiniteError as e:
            raise TrainingDiverged(round_idx, client.client_id, step, str(e)) from e
        if not math.isfinite(stats.total):
            raise TrainingDiverged(round_idx, client.client_id, step, f"loss became {stats.total}")
        trace.append(stats.total)
        ce_trace.append(stats.ce)
        crp_trace.append(stats.crp)
        seen += n if idx is None else len(idx)
    return ClientUpdate(
        client_id=client.client_id,
        theta_i=model.generator.store.copy(),
        phi_i=None if model.disable_injection else model.injection.store.copy(),
        local_loss_trace=trace,
        ce_trace=ce_trace,
        crp_trace=crp_trace,
        examples_seen=seen,
    )


def _mean_arrays(stores: list[ParameterStore], weights: np.ndarray, owners: list[int]) -> dict[str, np.ndarray]:
    names = set(stores[0].names())
    for cid, store in zip(owners, stores):
        if set(store.names()) != names:
            raise ProtocolError(f"client {cid} sent parameter names that differ from the first update")
    out: dict[str, np.ndarray] = {}
    for name in stores[0].names():
        ref_shape = stores[0][name].shape
        acc = np.zeros(ref_shape)
        for cid, w, store in zip(owners, weights, stores):
            arr = store[name].data
            if arr.shape != ref_shape:
                raise ProtocolError(f"client {cid} sent {name} with shape {arr.shape}, expected {ref_shape}")
            acc += w * arr
        out[name] = acc
    return out


def aggregate_fedavg(updates: Sequence[ClientUpdate], weighted: bool = False) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray] | None]:
    """Arithmetic mean per parameter, accumulated in ascending client id.

    Unweighted by default: every participant counts equally regardless of
    shard size. The optional weighted mode scales by examples seen.
    """
    if len(updates) == 0:
        raise ProtocolError("cannot aggregate zero updates")
    ordered = sorted(updates, key=lambda u: u.client_id)
    ids = [u.client_id for u in ordered]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate client ids in updates: {ids}")
    if weighted:
        total = sum(u.examples_seen for u in ordered)
        if total == 0:
            raise ProtocolError("weighted aggregation with zero examples seen")
        weights = np.array([u.examples_seen / total for u in ordered])
    else:
        weights = np.full(len(ordered), 1.0 / len(ordered))
    theta = _mean_arrays([u.theta_i for u in ordered], weights, ids)
    has_phi = [u.phi_i is not None for u in ordered]
    if any(has_phi) != all(has_phi):
        raise ProtocolError("updates disagree on whether the injection block is trainable")
    phi = _mean_arrays([u.phi_i for u in ordered], weights, ids) if all(has_phi) else None
    return theta, phi


def thread_cap() -> int | None:
    """FEDCSAP_THREADS caps client parallelism; unset or invalid means no cap."""
    raw = os.environ.get("FEDCSAP_THREADS", "").strip()
    if not raw:
        return None
    try:
        value = int(raw)
    except ValueError:
        return None
    return value if value >= 1 else None


EvalFn = Callable[[PromptModel, int], tuple[float, float, float, float]]


def run_rounds(
    server: ServerState,
    clients: Sequence[FederatedClient],
    cfg: RoundConfig,
    loss_cfg: LossConfig,
    eval_fn: EvalFn | None = None,
    eval_cadence: int = 1,
) -> list[RoundReport]:
    """The full round loop; returns one report per evaluated round.

    ``eval_fn(model, round)`` supplies (acc_local, acc_base, acc_new, hm)
    at the configured cadence; reports are appended to server.history.
    """
    if eval_cadence < 1 or (cfg.rounds % eval_cadence) != 0:
        raise ValueError(f"eval_cadence must divide rounds, got {eval_cadence} vs {cfg.rounds}")
    n_broadcast = server.model.trainable.n_elements()
    reports: list[RoundReport] = []
    cap = thread_cap()
    for r in range(cfg.rounds):
        sampled = sample_clients(len(clients), cfg.participation, server.rng)
        broadcast = server.model.state_arrays()
        participants = [clients[i] for i in sampled]
        workers = len(participants) if cap is None else min(cap, len(participants))
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [
                    pool.submit(local_train, c, broadcast, r, cfg, loss_cfg) for c in participants
                ]
                updates = [f.result() for f in futures]
        else:
            updates = [local_train(c, broadcast, r, cfg, loss_cfg) for c in participants]
        theta, phi = aggregate_fedavg(updates, weighted=cfg.weighted)
        merged = dict(theta)
        if phi is not None:
            merged.update(phi)
        server.model.load_trainable(merged)
        server.round = r + 1

        if eval_cadence and (r + 1) % eval_cadence == 0:
            traces = [t for u in updates for t in u.local_loss_trace]
            ces = [t for u in updates for t in u.ce_trace]
            crps = [t for u in updates for t in u.crp_trace]
            mean_loss = float(np.mean(traces)) if traces else 0.0
            ce = float(np.mean(ces)) if ces else 0.0
            crp = float(np.mean(crps)) if crps else 0.0
            acc_local = acc_base = acc_new = hm = 0.0
            if eval_fn is not None:
                acc_local, acc_base, acc_new, hm = eval_fn(server.model, r + 1)
            report = RoundReport(
                round=r + 1,
                train_loss=mean_loss,
                ce=ce,
                crp=crp,
                acc_local=acc_local,
                acc_base=acc_base,
                acc_new=acc_new,
                hm=hm,
                bytes_communicated=len(sampled) * n_broadcast * 8 * 2,
                participants=list(sampled),
            )
            reports.append(report)
            server.history.append(report)
    return reports
