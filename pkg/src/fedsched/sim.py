"""Synthetic federated SGD simulator on strongly convex quadratic tasks.

Each client's data is whitened so that its local objective is exactly
f_j(w) = 1/2 (w - w_j*)^T S_j (w - w_j*) + c_j; `skew` spreads the optima w_j* and the
curvatures S_j. With skew = 0 every client has the same objective (lambda = 1).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .convergence import LearningRateSchedule, noniid_metric, running_lambda
from .core import (Fleet, RngStream, SystemConfig, sample_channel_gains, sample_losses,
                   sample_participants)
from .scheduler import make_schedule, prune_candidates

logger = logging.getLogger(__name__)

AGGREGATION_MODES = ("weighted", "sampled")  # (N/K) sum q_j w_j, or the plain survivor mean
NOT_REACHED = -1


class SimulationDiverged(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SyntheticTask:
    features: np.ndarray  # (N, D_max, d), zero padded
    labels: np.ndarray  # (N, D_max)
    data_size: np.ndarray  # (N,)
    weights: np.ndarray  # q_j
    hessians: np.ndarray  # (N, d, d) = X_j^T X_j / D_j
    local_optima: np.ndarray  # (N, d)
    offsets: np.ndarray  # (N,) residual loss at the local optimum
    skew: float

    @property
    def num_clients(self) -> int:
        return len(self.data_size)

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    @property
    def global_hessian(self) -> np.ndarray:
        return np.einsum("j,jab->ab", self.weights, self.hessians)

    @property
    def optimum(self) -> np.ndarray:
        rhs = np.einsum("j,jab,jb->a", self.weights, self.hessians, self.local_optima)
        return np.linalg.solve(self.global_hessian, rhs)

    @property
    def smoothness(self) -> float:
        return float(np.linalg.eigvalsh(self.global_hessian)[-1])

    @property
    def strong_convexity(self) -> float:
        return float(np.linalg.eigvalsh(self.global_hessian)[0])

    @property
    def max_local_smoothness(self) -> float:
        return float(max(np.linalg.eigvalsh(h)[-1] for h in self.hessians))

    def local_losses(self, w: np.ndarray) -> np.ndarray:
        diff = w[None, :] - self.local_optima
        return 0.5 * np.einsum("ja,jab,jb->j", diff, self.hessians, diff) + self.offsets

    def loss(self, w: np.ndarray) -> float:
        return float(self.weights @ self.local_losses(w))

    @property
    def optimal_loss(self) -> float:
        return self.loss(self.optimum)

    def local_gradients(self, w: np.ndarray) -> np.ndarray:
        return np.einsum("jab,jb->ja", self.hessians, w[None, :] - self.local_optima)

    def gradient(self, w: np.ndarray) -> np.ndarray:
        return self.weights @ self.local_gradients(w)

    def lambda_at(self, w: np.ndarray) -> float | None:
        return noniid_metric(self.local_gradients(w), self.weights)


def make_synthetic_task(n: int, data_sizes, skew: float, rng: RngStream, dim: int = 10,
                        curvature_range: tuple[float, float] = (1.0, 4.0), optimum_scale: float = 1.0,
                        optimum_spread: float = 1.0, curvature_spread: float = 0.5,
                        label_noise: float = 0.1) -> SyntheticTask:
    """Quadratic least-squares task with controllable heterogeneity.

    `data_sizes` is an int (same D_j for everyone) or a length-N sequence. Client optima are
    w* + skew*optimum_spread*N(0, I); client curvatures are the base spectrum scaled
    per-coordinate by exp(skew*curvature_spread*U(-1, 1)).
    """
    if n < 2:
        raise ValueError("need N >= 2 clients")
    if skew < 0:
        raise ValueError("skew must be >= 0")
    sizes = np.full(n, int(data_sizes)) if np.isscalar(data_sizes) else np.asarray(data_sizes, dtype=int)
    if sizes.shape != (n,) or np.any(sizes < 10):
        raise ValueError("need one data size >= 10 per client")
    if np.any(sizes <= dim):
        raise ValueError("data size must exceed the model dimension")
    gen = rng.gen
    base_spec = np.linspace(curvature_range[0], curvature_range[1], dim)
    w_star = optimum_scale * gen.standard_normal(dim)
    optima = w_star + skew * optimum_spread * gen.standard_normal((n, dim))
    scales = np.exp(skew * curvature_spread * gen.uniform(-1, 1, (n, dim)))
    spectra = base_spec * scales

    d_max = int(sizes.max())
    x = np.zeros((n, d_max, dim))
    y = np.zeros((n, d_max))
    hess = np.zeros((n, dim, dim))
    offsets = np.zeros(n)
    for j in range(n):
        dj = sizes[j]
        q, _ = np.linalg.qr(gen.standard_normal((dj, dim)))
        xj = math.sqrt(dj) * q * np.sqrt(spectra[j])[None, :]
        noise = gen.standard_normal(dj)
        noise -= q @ (q.T @ noise)  # orthogonal to the features: keeps the optimum exact
        noise *= label_noise * math.sqrt(dj) / max(np.linalg.norm(noise), 1e-300)
        x[j, :dj] = xj
        y[j, :dj] = xj @ optima[j] + noise
        hess[j] = xj.T @ xj / dj
        offsets[j] = 0.5 * float(noise @ noise) / dj
    weights = sizes / sizes.sum()
    return SyntheticTask(x, y, sizes.astype(float), weights, hess, optima, offsets, float(skew))


@dataclass
class TrainingTrace:
    loss_gap: list = field(default_factory=list)
    lambda_sample: list = field(default_factory=list)
    lambda_hat: list = field(default_factory=list)
    k_gamma: list = field(default_factory=list)
    retransmissions: list = field(default_factory=list)
    time_cost: list = field(default_factory=list)  # accumulated
    energy_cost: list = field(default_factory=list)  # accumulated
    round_cost: list = field(default_factory=list)  # per epoch: C_u,t + C_n,t + T_d
    metadata: dict = field(default_factory=dict)

    @property
    def epochs(self) -> int:
        return len(self.loss_gap)

    def rows(self):
        """CSV rows (epoch, loss_gap, lambda_hat, K_gamma, time_cost, energy_cost)."""
        for i in range(self.epochs):
            lh = self.lambda_hat[i]
            yield (i + 1, self.loss_gap[i], "" if lh is None or np.isnan(lh) else lh, self.k_gamma[i],
                   self.time_cost[i], self.energy_cost[i])

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss_gap", "lambda_hat", "K_gamma", "time_cost", "energy_cost"])
            w.writerows(self.rows())


def measure_G_epsilon(trace: TrainingTrace | Sequence[float], eps: float) -> int:
    """First 1-based global epoch whose loss gap is <= eps, or NOT_REACHED."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    gaps = trace.loss_gap if isinstance(trace, TrainingTrace) else trace
    for i, g in enumerate(gaps):
        if g <= eps:
            return i + 1
    return NOT_REACHED


@dataclass(frozen=True)
class SimSettings:
    k: int
    local_epochs: int
    gamma: float = 0.0
    sampling: str = "by_weight"
    aggregation: str = "sampled"
    loss_mode: str = "bernoulli"
    batch_fraction: float = 0.1
    full_batch: bool = False
    max_epochs: int = 150
    eps: float | None = None  # stop once the gap reaches eps
    lr_safety: float = 1.0
    lam_hat: float | None = None  # lambda used in the learning-rate offset; default Lambda(w0)
    burn_in: int = 5
    policy: str | None = None  # cost accounting; None skips scheduling
    redraw_gains: bool = True

    def __post_init__(self):
        if self.k < 1 or self.local_epochs < 1:
            raise ValueError("K and E_l must be >= 1")
        if self.aggregation not in AGGREGATION_MODES:
            raise ValueError(f"aggregation must be one of {AGGREGATION_MODES}")
        if not 0 < self.batch_fraction <= 1:
            raise ValueError("batch_fraction must be in (0, 1]")
        if self.lr_safety <= 0:
            raise ValueError("lr_safety must be > 0")


def learning_rate_for(task: SyntheticTask, settings: SimSettings, w0: np.ndarray) -> LearningRateSchedule:
    """v = 2/mu, beta + 1 = 2 L lambda (scaled by the safety factor), with the first step
    additionally kept below 1/max_j L_j so no client's local iteration blows up."""
    mu, L = task.strong_convexity, task.smoothness
    lam = settings.lam_hat if settings.lam_hat is not None else (task.lambda_at(w0) or 1.0)
    base = LearningRateSchedule.default(L, mu, lam * settings.lr_safety)
    beta = max(base.beta, base.v * task.max_local_smoothness)
    return LearningRateSchedule(base.v, beta, 1.0)


def _local_sgd(task: SyntheticTask, w: np.ndarray, ids: np.ndarray, steps: int, t0: int,
               lr: LearningRateSchedule, gen: np.random.Generator, settings: SimSettings) -> np.ndarray:
    k = len(ids)
    models = np.repeat(w[None, :], k, axis=0)
    if settings.full_batch or settings.batch_fraction >= 1:
        hess, opt = task.hessians[ids], task.local_optima[ids]
        for i in range(steps):
            grad = np.einsum("kab,kb->ka", hess, models - opt)
            models -= lr(t0 + i) * grad
        return models
    sizes = task.data_size[ids]
    batch = np.maximum(1, np.round(settings.batch_fraction * sizes)).astype(int)
    bmax = int(batch.max())
    mask = (np.arange(bmax)[None, :] < batch[:, None]) / batch[:, None]
    rows = ids[:, None]
    for i in range(steps):
        # sampling with replacement keeps the minibatch variance proportional to 1/D_j
        idx = (gen.random((k, bmax)) * sizes[:, None]).astype(int)
        xb = task.features[rows, idx]
        resid = (np.einsum("kbd,kd->kb", xb, models) - task.labels[rows, idx]) * mask
        models -= lr(t0 + i) * np.einsum("kbd,kb->kd", xb, resid)
    return models


def run_training(task: SyntheticTask, settings: SimSettings, rng: RngStream, config: SystemConfig | None = None,
                 fleet: Fleet | None = None, w0: np.ndarray | None = None) -> TrainingTrace:
    """Synchronous FL: E_l local SGD steps per selected client, then aggregation over survivors."""
    n = task.num_clients
    if settings.k > n:
        raise ValueError("K exceeds the number of clients")
    if settings.policy is not None and (config is None or fleet is None or len(fleet) != n):
        raise ValueError("cost accounting needs a config and a fleet matching the task")
    w = np.zeros(task.dim) if w0 is None else np.asarray(w0, dtype=float).copy()
    lr = learning_rate_for(task, settings, w)
    f_star = task.optimal_loss
    initial_gap = task.loss(w) - f_star
    sel_rng, loss_rng, sgd_rng, chan_rng = rng.split(4)
    gen = sgd_rng.gen
    trace = TrainingTrace(metadata={
        "seed": rng.seed, "stream_id": list(rng.stream_id), "K": settings.k, "E_l": settings.local_epochs,
        "gamma": settings.gamma, "sampling": settings.sampling, "aggregation": settings.aggregation,
        "loss_mode": settings.loss_mode, "lr_v": lr.v, "lr_beta": lr.beta, "skew": task.skew,
        "initial_gap": initial_gap,
    })
    time_acc = energy_acc = 0.0
    lambdas = []
    for epoch in range(settings.max_epochs):
        candidates = None
        cur_fleet = fleet
        if settings.policy is not None:
            if settings.redraw_gains:
                cur_fleet = fleet.with_gains(sample_channel_gains(chan_rng, config.fading, n))
            candidates = prune_candidates(cur_fleet, config, settings.k)
        selected = sample_participants(sel_rng, task.weights, settings.k, settings.sampling, candidates)
        outcome = sample_losses(loss_rng, selected, settings.gamma, settings.loss_mode)
        uniq, inverse = np.unique(selected, return_inverse=True)
        models = _local_sgd(task, w, uniq, settings.local_epochs, epoch * settings.local_epochs, lr, gen, settings)
        slot_models = models[inverse]
        surv_slots = np.isin(np.arange(len(selected)), _surviving_slots(selected, outcome))
        if settings.aggregation == "sampled":
            w = slot_models[surv_slots].mean(axis=0)
        else:
            q = task.weights[selected][surv_slots]
            w = n / surv_slots.sum() * (q @ slot_models[surv_slots])

        if settings.policy is not None:
            sched = make_schedule(settings.policy, selected, settings.local_epochs, cur_fleet, config,
                                  round_id=epoch + 1)
            up, comp = sched.upload, sched.compute
            time_acc += up.time_s + comp.time_s + config.broadcast_time_s
            energy_acc += up.energy_j + comp.mean_energy_j
            trace.round_cost.append(up.combined + comp.combined + config.broadcast_time_s)
        gap = task.loss(w) - f_star
        if not np.isfinite(gap) or gap > 1e6 * max(initial_gap, 1e-300):
            raise SimulationDiverged(f"loss gap {gap:.3g} at epoch {epoch + 1} (initial {initial_gap:.3g})")
        lam = task.lambda_at(w)
        lambdas.append(lam)
        trace.loss_gap.append(float(gap))
        trace.lambda_sample.append(lam)
        trace.k_gamma.append(outcome.k_gamma)
        trace.retransmissions.append(outcome.retransmissions)
        trace.time_cost.append(time_acc)
        trace.energy_cost.append(energy_acc)
        if settings.eps is not None and gap <= settings.eps:
            break
    trace.lambda_hat = list(running_lambda(lambdas, settings.burn_in))
    return trace


def _surviving_slots(selected: np.ndarray, outcome) -> np.ndarray:
    """Map survivor ids back to slot indices of `selected` (ids may repeat)."""
    remaining = list(outcome.survivors)
    slots = []
    for i, cid in enumerate(selected):
        if cid in remaining:
            remaining.remove(cid)
            slots.append(i)
    return np.asarray(slots, dtype=int)


@dataclass(frozen=True, eq=False)
class PolicyComparison:
    policies: tuple
    costs: np.ndarray  # (replicas, policies): C_u,t + C_n,t per epoch
    objectives: np.ndarray  # (replicas, policies): coupled finish-time objective

    def mean(self, policy: str) -> float:
        return float(self.costs[:, self.policies.index(policy)].mean())

    def ci(self, policy: str, z: float = 1.96) -> tuple[float, float]:
        x = self.costs[:, self.policies.index(policy)]
        half = z * x.std(ddof=1) / math.sqrt(len(x)) if len(x) > 1 else 0.0
        return float(x.mean() - half), float(x.mean() + half)

    def rows(self):
        """CSV rows (replica, policy, round_cost, coupled_objective)."""
        for r in range(len(self.costs)):
            for i, p in enumerate(self.policies):
                yield r, p, float(self.costs[r, i]), float(self.objectives[r, i])


def compare_policies(fleet: Fleet, config: SystemConfig, k: int, local_epochs: int, policies: Sequence[str],
                     rng: RngStream, replicas: int = 50, sampling: str = "by_weight",
                     redraw_gains: bool = True) -> PolicyComparison:
    """Schedule the same sampled rounds (channel draw + P_t) under every policy."""
    policies = tuple(policies)
    if len(policies) < 2:
        raise ValueError("need at least two policies to compare")
    costs = np.zeros((replicas, len(policies)))
    objs = np.zeros_like(costs)
    for r, sub in enumerate(rng.split(replicas)):
        chan, sel = sub.split(2)
        cur = fleet.with_gains(sample_channel_gains(chan, config.fading, len(fleet))) if redraw_gains else fleet
        selected = sample_participants(sel, cur.weight, k, sampling, prune_candidates(cur, config, k))
        for i, p in enumerate(policies):
            s = make_schedule(p, selected, local_epochs, cur, config, round_id=r + 1)
            costs[r, i] = s.round_cost
            objs[r, i] = s.coupled_objective
    return PolicyComparison(policies, costs, objs)
