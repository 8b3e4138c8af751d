"""Learning strategies over simulated silos.

Three strategies share one model/optimizer core:

- dfl: peer-to-peer rounds alternating one consensus exchange over the
  overlay (neighbor parameters mixed through the consensus matrix) with s
  local mini-batch gradient steps; the schedule follows the iteration
  counter k (consensus when k % (s+1) == 0).
- sfl: server-based rounds; every silo takes s local steps, a virtual server
  averages all parameter vectors equally and broadcasts the result.
- cll: single-node mini-batch training on the merged dataset.

Everything is deterministic given the config seed: silo batch samplers use
per-silo seeded generators, all silos start from one broadcast seeded init,
and cross-silo reductions run in fixed silo-id order, so results do not
depend on the worker-thread count.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as M
from . import simnet
from .data import Dataset
from .topology import ConnectivityGraph, ConsensusMatrix, DelayParams, Overlay

_SAMPLER_TAG = 0x51105A17

STRATEGIES = ("dfl", "sfl", "cll")

METRICS_HEADER = ("round", "sim_time_s", "train_loss", "test_rmse", "strategy")


class NanGradientError(RuntimeError):
    """Raised when a gradient step produces non-finite values."""


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; defaults follow the reference setup
    (batch 32, learning rate 1e-3, Adam, one local step, 3000 rounds)."""

    strategy: str = "dfl"
    rounds: int = 3000
    local_steps: int = 1
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    eval_interval: int = 10
    eval_mask: tuple[int, ...] | None = None
    workers: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    server_latency_s: float = 0.05
    server_bandwidth_Bps: float = 2.5e7
    server_compute_s: float = 0.05
    cll_compute_s: float = 0.1

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if self.local_steps < 1:
            raise ValueError(f"local_steps must be >= 1, got {self.local_steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.eval_interval < 1:
            raise ValueError(f"eval_interval must be >= 1, got {self.eval_interval}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if self.eval_mask is not None and sum(self.eval_mask) < 1:
            raise ValueError("eval_mask must select at least one silo")


@dataclass
class SiloState:
    """Mutable per-silo training state."""

    silo_id: int
    params: np.ndarray
    shard: Dataset
    rng: np.random.Generator
    k: int = 0
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    adam_t: int = 0
    last_loss: float | None = None


@dataclass(frozen=True)
class MetricsRow:
    round: int
    sim_time_s: float
    train_loss: float
    test_rmse: float
    strategy: str


@dataclass
class MetricsLog:
    rows: list[MetricsRow] = field(default_factory=list)
    # final aggregated parameter vector of the run; not part of the CSV
    final_params: np.ndarray | None = None

    def append(self, row: MetricsRow) -> None:
        if self.rows:
            if row.round <= self.rows[-1].round:
                raise ValueError("metrics rounds must be strictly increasing")
            if row.sim_time_s < self.rows[-1].sim_time_s:
                raise ValueError("simulated time must be nondecreasing")
        self.rows.append(row)

    @property
    def final(self) -> MetricsRow:
        return self.rows[-1]

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for r in self.rows:
            writer.writerow([r.round, repr(r.sim_time_s), repr(r.train_loss),
                             repr(r.test_rmse), r.strategy])
        return buf.getvalue()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write(self.to_csv_string())

    @classmethod
    def from_csv(cls, path) -> "MetricsLog":
        log = cls()
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if tuple(reader.fieldnames or ()) != METRICS_HEADER:
                raise ValueError(f"unexpected metrics header {reader.fieldnames}")
            for row in reader:
                log.append(MetricsRow(int(row["round"]), float(row["sim_time_s"]),
                                      float(row["train_loss"]), float(row["test_rmse"]),
                                      row["strategy"]))
        return log


def is_consensus_step(k: int, local_steps: int) -> bool:
    """The update schedule: consensus when k % (s+1) == 0, gradient otherwise."""
    return k % (local_steps + 1) == 0


def federated_average(params_list, mask=None) -> np.ndarray:
    """Equal-weight mean of the participating silos' parameter vectors."""
    if mask is None:
        mask = [1] * len(params_list)
    if len(mask) != len(params_list):
        raise ValueError(f"mask length {len(mask)} != {len(params_list)} silos")
    selected = [np.asarray(p) for p, m in zip(params_list, mask) if m]
    if not selected:
        raise ValueError("participation mask selects no silos")
    length = selected[0].shape
    for p in selected[1:]:
        if p.shape != length:
            raise ValueError("parameter vectors must have equal lengths")
    return np.mean(np.stack(selected, axis=0), axis=0)


def evaluate(model_kind: str, model_cfg: M.FADNetConfig, theta: np.ndarray,
             test: Dataset, batch_size: int = 256) -> float:
    """Test RMSE of one parameter vector, batched in fixed index order."""
    preds = np.empty(test.count)
    for start in range(0, test.count, batch_size):
        stop = min(start + batch_size, test.count)
        preds[start:stop] = M.predict(model_kind, model_cfg, theta,
                                      test.inputs[start:stop])
    return M.rmse(preds, test.targets)


def make_silo(silo_id: int, theta0: np.ndarray, shard: Dataset,
              cfg: TrainConfig) -> SiloState:
    """Silo with the broadcast initial parameters and its own seeded sampler."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _SAMPLER_TAG, silo_id]))
    state = SiloState(silo_id=silo_id, params=theta0.copy(), shard=shard, rng=rng)
    if cfg.optimizer == "adam":
        state.adam_m = np.zeros_like(theta0)
        state.adam_v = np.zeros_like(theta0)
    return state


def _gradient_step(state: SiloState, cfg: TrainConfig, loss_grad_fn) -> float:
    idx = state.rng.integers(0, state.shard.count, size=cfg.batch_size)
    batch = M.Batch(inputs=state.shard.inputs[idx], targets=state.shard.targets[idx])
    loss, grad = loss_grad_fn(state.params, batch)
    if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NanGradientError(
            f"non-finite gradient at silo {state.silo_id}, iteration k={state.k} "
            f"(loss={loss!r}); aborting run")
    if cfg.optimizer == "sgd":
        state.params -= cfg.learning_rate * grad
    else:
        state.adam_t += 1
        state.adam_m = cfg.adam_beta1 * state.adam_m + (1 - cfg.adam_beta1) * grad
        state.adam_v = cfg.adam_beta2 * state.adam_v + (1 - cfg.adam_beta2) * grad ** 2
        m_hat = state.adam_m / (1 - cfg.adam_beta1 ** state.adam_t)
        v_hat = state.adam_v / (1 - cfg.adam_beta2 ** state.adam_t)
        state.params -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    state.last_loss = loss
    return loss


def dpasgd_update(state: SiloState, inbox: dict, a: ConsensusMatrix,
                  cfg: TrainConfig, loss_grad_fn) -> SiloState:
    """One iteration of the decentralized update schedule.

    Consensus iterations replace the silo's parameters with the
    matrix-weighted mix of its own and its in-neighbors' parameters (taken
    from ``inbox`` at their current iteration); gradient iterations take one
    mini-batch step.  The iteration counter always advances by one.
    """
    i = state.silo_id
    if is_consensus_step(state.k, cfg.local_steps):
        row = a.a[i]
        neighbors = [j for j in range(a.order) if j != i and row[j] > 0.0]
        missing = [j for j in neighbors if j not in inbox]
        if missing:
            raise ValueError(f"silo {i} consensus step at k={state.k} missing "
                             f"in-neighbor parameters from {missing}")
        mixed = row[i] * state.params
        for j in neighbors:
            mixed = mixed + row[j] * inbox[j]
        state.params = mixed
        state.last_loss = None
    else:
        _gradient_step(state, cfg, loss_grad_fn)
    state.k += 1
    return state


def _loss_grad_fn(model_kind: str, model_cfg: M.FADNetConfig):
    def fn(theta, batch):
        return M.loss_and_grad(model_kind, model_cfg, theta, batch)
    return fn


def _probe_loss(silos, cfg, loss_grad_fn) -> float:
    """Mean initial-model loss over per-silo probe batches (first samples of
    each shard); used for the round-0 metrics row."""
    losses = []
    for s in silos:
        n = min(cfg.batch_size, s.shard.count)
        batch = M.Batch(inputs=s.shard.inputs[:n], targets=s.shard.targets[:n])
        loss, _ = loss_grad_fn(s.params, batch)
        losses.append(loss)
    return float(np.mean(losses))


def _fan_out(silos, pool, fn) -> list:
    """Apply fn to every silo; states are disjoint so fanning out over a
    thread pool is safe, and results come back in silo-id order either way."""
    if pool is not None and len(silos) > 1:
        return list(pool.map(fn, silos))
    return [fn(s) for s in silos]


def _eval_rounds(cfg: TrainConfig):
    marks = {0, cfg.rounds}
    marks.update(range(0, cfg.rounds + 1, cfg.eval_interval))
    return marks


def _run_consensus_rounds(silos, a: ConsensusMatrix, round_duration: float,
                          model_kind, model_cfg, test, cfg, strategy_tag) -> MetricsLog:
    """Shared driver for dfl (and its single-silo degenerate form, cll)."""
    loss_grad_fn = _loss_grad_fn(model_kind, model_cfg)
    clock = simnet.Clock()
    log = MetricsLog()
    eval_at = _eval_rounds(cfg)
    neighbor_lists = [[j for j in range(a.order) if j != i and a.a[i, j] > 0.0]
                      for i in range(a.order)]
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None

    def record(rnd: int, train_loss: float) -> None:
        theta = federated_average([s.params for s in silos], cfg.eval_mask)
        log.append(MetricsRow(rnd, clock.now, train_loss,
                              evaluate(model_kind, model_cfg, theta, test),
                              strategy_tag))

    try:
        record(0, _probe_loss(silos, cfg, loss_grad_fn))
        for rnd in range(1, cfg.rounds + 1):
            snapshot = [s.params.copy() for s in silos]
            for s in silos:
                inbox = {j: snapshot[j] for j in neighbor_lists[s.silo_id]}
                dpasgd_update(s, inbox, a, cfg, loss_grad_fn)
            round_losses = []
            for _ in range(cfg.local_steps):
                _fan_out(silos, pool, lambda s: dpasgd_update(s, {}, a, cfg, loss_grad_fn))
                round_losses.append([s.last_loss for s in silos])
            clock.advance(round_duration)
            if rnd in eval_at:
                record(rnd, float(np.mean(round_losses)))
    finally:
        if pool is not None:
            pool.shutdown()
    log.final_params = federated_average([s.params for s in silos], cfg.eval_mask)
    return log


def run_dfl(graph: ConnectivityGraph | None, overlay: Overlay, a: ConsensusMatrix,
            model_kind: str, model_cfg: M.FADNetConfig, shards: list[Dataset],
            test: Dataset, cfg: TrainConfig) -> MetricsLog:
    """Peer-to-peer training over the overlay; returns the metrics log.

    One round = one consensus exchange plus ``local_steps`` gradient steps
    per silo; the simulated clock advances by the overlay's worst edge delay
    each round.
    """
    n = a.order
    if len(shards) != n:
        raise ValueError(f"need {n} shards for {n} silos, got {len(shards)}")
    if overlay.n != n:
        raise ValueError(f"overlay order {overlay.n} != consensus matrix order {n}")
    theta0 = M.init_params(model_kind, model_cfg, cfg.seed)
    silos = [make_silo(i, theta0, shards[i], cfg) for i in range(n)]
    delay = DelayParams(model_size_bytes=8.0 * theta0.size, local_steps=cfg.local_steps)
    round_duration = simnet.simulate_round(overlay, delay, "dfl_ring")
    return _run_consensus_rounds(silos, a, round_duration, model_kind, model_cfg,
                                 test, cfg, "dfl")


def run_cll(model_kind: str, model_cfg: M.FADNetConfig, dataset: Dataset,
            test: Dataset, cfg: TrainConfig) -> MetricsLog:
    """Centralized training on the merged dataset (the single-silo degenerate
    form of the consensus schedule, so dfl with one silo matches it exactly)."""
    theta0 = M.init_params(model_kind, model_cfg, cfg.seed)
    silos = [make_silo(0, theta0, dataset, cfg)]
    a = ConsensusMatrix(a=np.ones((1, 1)))
    delay = DelayParams(model_size_bytes=8.0 * theta0.size, local_steps=cfg.local_steps)
    round_duration = simnet.simulate_round(
        simnet.SingleSpec(compute_time_s=cfg.cll_compute_s), delay, "cll_single")
    mask_cfg = cfg if cfg.eval_mask is None else replace(cfg, eval_mask=(1,))
    return _run_consensus_rounds(silos, a, round_duration, model_kind, model_cfg,
                                 test, mask_cfg, "cll")


def run_sfl(graph: ConnectivityGraph | None, model_kind: str, model_cfg: M.FADNetConfig,
            shards: list[Dataset], test: Dataset, cfg: TrainConfig) -> MetricsLog:
    """Server-based training: local steps, equal-weight server average,
    broadcast.  The virtual server links to every silo with the configured
    latency/bandwidth; round duration is the worst silo round trip plus one
    server aggregation.  ``graph`` may be None only in the one-silo
    degenerate case (compute time then falls back to ``cll_compute_s``)."""
    if graph is None:
        if len(shards) != 1:
            raise ValueError("run_sfl needs a connectivity graph for more than one silo")
        compute_times = (cfg.cll_compute_s,)
    else:
        compute_times = tuple(graph.compute_time(i) for i in range(graph.n))
    n = len(compute_times)
    if len(shards) != n:
        raise ValueError(f"need {n} shards for {n} silos, got {len(shards)}")
    loss_grad_fn = _loss_grad_fn(model_kind, model_cfg)
    theta0 = M.init_params(model_kind, model_cfg, cfg.seed)
    silos = [make_silo(i, theta0, shards[i], cfg) for i in range(n)]
    delay = DelayParams(model_size_bytes=8.0 * theta0.size, local_steps=cfg.local_steps)
    star = simnet.StarSpec(
        silo_compute_s=compute_times,
        server_latency_s=cfg.server_latency_s,
        server_bandwidth_Bps=cfg.server_bandwidth_Bps,
        server_compute_s=cfg.server_compute_s,
    )
    round_duration = simnet.simulate_round(star, delay, "sfl_star")

    clock = simnet.Clock()
    log = MetricsLog()
    eval_at = _eval_rounds(cfg)
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None

    def sfl_step(s: SiloState) -> float:
        loss = _gradient_step(s, cfg, loss_grad_fn)
        s.k += 1
        return loss

    def record(rnd: int, train_loss: float, theta) -> None:
        log.append(MetricsRow(rnd, clock.now, train_loss,
                              evaluate(model_kind, model_cfg, theta, test), "sfl"))

    try:
        record(0, _probe_loss(silos, cfg, loss_grad_fn), silos[0].params)
        for rnd in range(1, cfg.rounds + 1):
            round_losses = []
            for _ in range(cfg.local_steps):
                round_losses.append(_fan_out(silos, pool, sfl_step))
            theta = federated_average([s.params for s in silos])
            for s in silos:
                s.params = theta.copy()
            clock.advance(round_duration)
            if rnd in eval_at:
                record(rnd, float(np.mean(round_losses)), theta)
    finally:
        if pool is not None:
            pool.shutdown()
    log.final_params = silos[0].params.copy()
    return log
