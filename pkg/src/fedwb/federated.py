"""Federated MNIST training: local epochs, barrier aggregation, broadcast.

One round ("epoch") = every agent makes one local pass over its shard (B
batches), the server fuses the collected parameters (barycenter, average, or
not at all), and the fused model is broadcast back. Agents all start from
one seed-built initialization; per-(agent, epoch) RNG streams are derived
from the master seed so results are identical whether agents run
sequentially or in a process pool.

With ``method="none"`` and one agent this reduces to plain single-agent SGD.
With ``method="none"`` and several agents there is no global model; agent
0's parameters fill the global column so the metrics stay total.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import multiprocessing
import numpy as np

from .errors import DimensionError, DomainError
from .fusion import FusionWeights, fuse_avg, fuse_wb
from .mnist_data import FederatedSplit, N_CLASSES
from .nn import (
    Activation,
    Loss,
    NetworkParams,
    SgdConfig,
    backprop,
    forward,
    params_from_bytes,
    params_to_bytes,
    sgd_step_inplace,
)
from .ot import GroundCost

__all__ = [
    "CLASSIFIER_ACTIVATIONS",
    "FedConfig",
    "RoundMetrics",
    "SpeedupRow",
    "run_federated",
    "evaluate_accuracy",
    "local_training_pass",
    "epochs_to_target",
    "build_speedup_table",
    "write_rounds_csv",
    "write_speedup_csv",
]

CLASSIFIER_ACTIVATIONS = (Activation.RELU, Activation.IDENTITY)
METHODS = ("wb", "avg", "none")


@dataclass(frozen=True)
class FedConfig:
    agents: int
    epochs: int
    method: str = "wb"
    batches_per_round: int | None = None     # None: one full pass over the shard
    lam: FusionWeights | None = None         # None: uniform
    sgd: SgdConfig = field(default_factory=SgdConfig)
    seed: int = 0
    accuracy_target: float = 0.90
    stop_at_target: bool = False
    hidden_units: int = 256
    cost: GroundCost = GroundCost(2)
    projection: str = "round"
    workers: int = 1

    def __post_init__(self):
        if self.agents < 1 or self.epochs < 1 or self.hidden_units < 1 or self.workers < 1:
            raise DomainError("agents, epochs, hidden_units and workers must be positive")
        if self.batches_per_round is not None and self.batches_per_round < 1:
            raise DomainError("batches_per_round must be positive")
        if not 0.0 < self.accuracy_target <= 1.0:
            raise DomainError("accuracy_target must lie in (0, 1]")
        if self.method not in METHODS:
            raise DomainError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.lam is not None and len(self.lam.lam) != self.agents:
            raise DimensionError("fusion weights length must equal agent count")


@dataclass
class RoundMetrics:
    epoch: int
    global_acc: float
    local_accs: list
    train_seconds: list          # per-agent local-training wall clock
    fuse_seconds: float
    broadcast_seconds: float


@dataclass(frozen=True)
class SpeedupRow:
    agents: int
    epochs_to_target: int | None
    time_fraction: float | None


def evaluate_accuracy(params: NetworkParams, images: np.ndarray, labels: np.ndarray,
                      chunk: int = 4096) -> float:
    """Top-1 accuracy of the classifier on an image/label array."""
    correct = 0
    for lo in range(0, len(images), chunk):
        out, _ = forward(params, images[lo:lo + chunk], CLASSIFIER_ACTIVATIONS)
        correct += int((np.argmax(out, axis=1) == labels[lo:lo + chunk]).sum())
    return correct / len(images)


def local_training_pass(params: NetworkParams, images: np.ndarray, labels: np.ndarray,
                        sgd: SgdConfig, n_batches: int,
                        rng: np.random.Generator) -> NetworkParams:
    """Train ``n_batches`` SGD batches over a fresh shuffle of the shard in place."""
    order = rng.permutation(len(images))
    bs = sgd.batch_size
    lr = sgd.learning_rate
    for k in range(n_batches):
        idx = order[k * bs:(k + 1) * bs]
        if idx.size == 0:
            break
        _, cache = forward(params, images[idx], CLASSIFIER_ACTIVATIONS)
        grads = backprop(params, cache, labels[idx], Loss.CROSS_ENTROPY)
        sgd_step_inplace(params, grads, lr)
    return params


# Worker-side state for the fork-based process pool: the split is published
# here by the parent before the pool is created, so children inherit it.
_POOL_SPLIT: FederatedSplit | None = None
_POOL_CONFIG: FedConfig | None = None


def _local_round(task):
    """Train one agent for one round; runs in the parent or in a pool worker."""
    agent_id, epoch, blob = task
    split, config = _POOL_SPLIT, _POOL_CONFIG
    started = time.perf_counter()
    params = params_from_bytes(blob)
    images, labels = split.shard(agent_id)
    n_batches = config.batches_per_round
    if n_batches is None:
        n_batches = -(-len(images) // config.sgd.batch_size)  # ceil: full pass
    rng = np.random.default_rng([config.seed, agent_id, epoch])
    local_training_pass(params, images, labels, config.sgd, n_batches, rng)
    return agent_id, epoch, params_to_bytes(params), time.perf_counter() - started


def _fuse(config: FedConfig, locals_: list[NetworkParams]) -> NetworkParams:
    if config.method == "wb":
        return fuse_wb(locals_, config.lam, config.cost, config.projection)
    if config.method == "avg":
        return fuse_avg(locals_)
    return locals_[0]


def run_federated(config: FedConfig, split: FederatedSplit) -> list[RoundMetrics]:
    """Run the federated training loop and collect per-round metrics.

    The round-0 entry records the freshly initialized (pre-training,
    pre-fusion) model so the first-aggregation accuracy jump is visible in
    the series.
    """
    global _POOL_SPLIT, _POOL_CONFIG
    if split.n_agents != config.agents:
        raise DimensionError(
            f"config expects {config.agents} agents, split has {split.n_agents}")

    init_rng = np.random.default_rng(config.seed)
    dims = (split.train_images.shape[1], config.hidden_units, N_CLASSES)
    global_params = NetworkParams.glorot(dims, init_rng)
    blob = params_to_bytes(global_params)
    agent_blobs = [blob] * config.agents

    init_acc = evaluate_accuracy(global_params, split.test_images, split.test_labels)
    metrics = [RoundMetrics(0, init_acc, [init_acc] * config.agents,
                            [0.0] * config.agents, 0.0, 0.0)]

    _POOL_SPLIT, _POOL_CONFIG = split, config
    pool = None
    try:
        if config.workers > 1 and config.agents > 1:
            pool = ProcessPoolExecutor(
                max_workers=min(config.workers, config.agents),
                mp_context=multiprocessing.get_context("fork"))
        for epoch in range(1, config.epochs + 1):
            tasks = [(d, epoch, agent_blobs[d]) for d in range(config.agents)]
            if pool is not None:
                results = list(pool.map(_local_round, tasks))
            else:
                results = [_local_round(t) for t in tasks]

            # Aggregation barrier: every agent must have finished this round.
            seen = {r[0] for r in results}
            if seen != set(range(config.agents)) or any(r[1] != epoch for r in results):
                raise RuntimeError(f"round {epoch} barrier violated: got {sorted(seen)}")

            results.sort(key=lambda r: r[0])
            train_seconds = [r[3] for r in results]
            local_params = [params_from_bytes(r[2]) for r in results]
            local_accs = [evaluate_accuracy(p, split.test_images, split.test_labels)
                          for p in local_params]

            t_fuse = time.perf_counter()
            global_params = _fuse(config, local_params)
            fuse_seconds = time.perf_counter() - t_fuse

            t_cast = time.perf_counter()
            if config.method == "none":
                agent_blobs = [r[2] for r in results]
            else:
                blob = params_to_bytes(global_params)
                agent_blobs = [blob] * config.agents
                if any(b != blob for b in agent_blobs):
                    raise RuntimeError("broadcast incoherent")
            broadcast_seconds = time.perf_counter() - t_cast

            global_acc = evaluate_accuracy(global_params, split.test_images,
                                           split.test_labels)
            metrics.append(RoundMetrics(epoch, global_acc, local_accs, train_seconds,
                                        fuse_seconds, broadcast_seconds))
            if config.stop_at_target and global_acc >= config.accuracy_target:
                break
    finally:
        if pool is not None:
            pool.shutdown()
        _POOL_SPLIT, _POOL_CONFIG = None, None
    return metrics


def epochs_to_target(metrics: list[RoundMetrics], target: float) -> int | None:
    """First epoch whose global accuracy reaches the target, or None."""
    if not metrics:
        raise DomainError("metrics series is empty")
    for row in sorted(metrics, key=lambda m: m.epoch):
        if row.global_acc >= target:
            return row.epoch
    return None


def build_speedup_table(epoch_counts: dict) -> list[SpeedupRow]:
    """Normalized time-to-target per agent count, relative to the 1-agent run.

    ``fraction_D = epochs_D / (D * epochs_1)``: one distributed epoch counts
    as 1/D of a serial epoch, synchronization cost excluded.
    """
    baseline = epoch_counts.get(1)
    if baseline is None:
        raise DomainError("speedup table needs the 1-agent baseline epoch count")
    if baseline < 1:
        raise DomainError("baseline met the target before training; no time scale")
    rows = []
    for agents in sorted(epoch_counts):
        epochs = epoch_counts[agents]
        fraction = None if epochs is None else epochs / (agents * baseline)
        rows.append(SpeedupRow(agents, epochs, fraction))
    return rows


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_rounds_csv(path, metrics: list[RoundMetrics]) -> None:
    """Per-round rows: one line per agent plus one server line (agent_id=-1).

    Agent lines carry that agent's local-training wall clock in phase_ms;
    the server line carries fuse+broadcast wall clock.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "global_acc", "agent_id", "local_acc", "phase_ms"])
        for row in metrics:
            for d, (acc, secs) in enumerate(zip(row.local_accs, row.train_seconds)):
                writer.writerow([row.epoch, _fmt(row.global_acc), d, _fmt(acc),
                                 _fmt(secs * 1000.0)])
            writer.writerow([row.epoch, _fmt(row.global_acc), -1, "",
                             _fmt((row.fuse_seconds + row.broadcast_seconds) * 1000.0)])


def write_speedup_csv(path, rows: list[SpeedupRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["agents", "epochs_to_90", "time_fraction"])
        for row in rows:
            writer.writerow([row.agents, _fmt(row.epochs_to_target),
                             _fmt(row.time_fraction)])
