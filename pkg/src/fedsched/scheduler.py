"""Per-round resource allocation: bandwidth shares, CPU frequencies, the centralized convex
solution and KKT residual checks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, minimize

from .compute import ComputeCost, local_energy, local_latency
from .core import Fleet, SystemConfig
from .wireless import UploadCost, unit_rate, upload_energy, upload_time

logger = logging.getLogger(__name__)

POLICIES = ("distributed", "centralized", "even")


class UnboundedFrequency(ValueError):
    """l0 == 0: time-only cost pushes the reference frequency to infinity."""


def bandwidth_allocation(chip_coeff, freqs, r0) -> np.ndarray:
    """a_j proportional to sqrt(kappa_j f_j^3 / r0_j), normalized to sum to one."""
    chip_coeff, freqs, r0 = (np.asarray(x, dtype=float) for x in (chip_coeff, freqs, r0))
    if chip_coeff.size == 0:
        raise ValueError("empty client set")
    if np.any(chip_coeff <= 0) or np.any(freqs <= 0) or np.any(r0 <= 0):
        raise ValueError("bandwidth_allocation requires positive inputs")
    # factor out the largest term so kappa*f^3 never under/overflows
    logw = 0.5 * (np.log(chip_coeff) + 3 * np.log(freqs) - np.log(r0))
    w = np.exp(logw - logw.max())
    return w / w.sum()


def reference_frequency(power_weight: float, mean_chip_coeff: float) -> float:
    """Stationary point of alpha0*D/f + l0*kappa*f^2*alpha0*D, i.e. (1/(2 l0 kappa))^(1/3)."""
    if mean_chip_coeff <= 0:
        raise ValueError("mean chip coefficient must be > 0")
    if power_weight == 0:
        raise UnboundedFrequency("l0 == 0: clamp the reference frequency to f_max")
    if power_weight < 0:
        raise ValueError("power weight must be >= 0")
    return (1.0 / (2.0 * power_weight * mean_chip_coeff)) ** (1.0 / 3.0)


def local_frequency(data_size, mean_data_size, fbar, f_min, f_max) -> tuple[np.ndarray, np.ndarray]:
    """(D_j/D)*fbar clipped to [f_min, f_max]; also returns the clamp mask (stragglers)."""
    data_size, f_min, f_max = (np.asarray(x, dtype=float) for x in (data_size, f_min, f_max))
    if np.any(f_min > f_max):
        raise ValueError("f_min > f_max")
    if np.any(data_size <= 0) or mean_data_size <= 0 or fbar <= 0:
        raise ValueError("local_frequency requires positive inputs")
    raw = data_size / mean_data_size * fbar
    f = np.clip(raw, f_min, f_max)
    return f, f != raw


def fleet_reference_frequency(fleet: Fleet, config: SystemConfig) -> float:
    return reference_frequency(config.power_weight, fleet.mean_chip_coeff)


@dataclass(frozen=True, eq=False)
class Schedule:
    selected: np.ndarray
    shares: np.ndarray
    freqs: np.ndarray
    local_epochs: int
    upload_times: np.ndarray
    compute_times: np.ndarray
    upload_energies: np.ndarray
    compute_energies: np.ndarray
    power_weight: float
    policy: str = "distributed"
    round_id: int = 0
    clamped: np.ndarray = field(default=None)
    converged: bool = True

    @property
    def k(self) -> int:
        return len(self.selected)

    @property
    def upload(self) -> UploadCost:
        return UploadCost(float(self.upload_times.max()), float(self.upload_energies.sum()), self.power_weight)

    @property
    def compute(self) -> ComputeCost:
        return ComputeCost(float(self.compute_times.max()), float(self.compute_energies.mean()), self.power_weight)

    @property
    def finish_time(self) -> float:
        """H: the latest per-client upload + compute finish."""
        return float(np.max(self.upload_times + self.compute_times))

    @property
    def energy_term(self) -> float:
        return float(self.upload_energies.sum() + self.compute_energies.mean())

    @property
    def round_cost(self) -> float:
        """C_{u,t} + C_{n,t} with separate maxima over upload and compute time."""
        return self.upload.combined + self.compute.combined

    @property
    def coupled_objective(self) -> float:
        """H + l0*(sum upload energy + mean compute energy); clients upload as soon as they finish."""
        return self.finish_time + self.power_weight * self.energy_term

    def rows(self):
        """CSV rows (round, client, a_j, f_j, t_u, t_n, e_u, e_n)."""
        for i, cid in enumerate(self.selected):
            yield (self.round_id, int(cid), float(self.shares[i]), float(self.freqs[i]),
                   float(self.upload_times[i]), float(self.compute_times[i]),
                   float(self.upload_energies[i]), float(self.compute_energies[i]))


def build_schedule(selected, shares, freqs, local_epochs, fleet: Fleet, config: SystemConfig, policy: str,
                   round_id: int = 0, clamped=None, converged: bool = True) -> Schedule:
    selected = np.asarray(selected, dtype=int)
    shares = np.asarray(shares, dtype=float)
    freqs = np.asarray(freqs, dtype=float)
    if np.any(shares <= 0) or shares.sum() > 1 + 1e-9:
        raise ValueError("allocation violates the simplex constraint")
    r0 = unit_rate(fleet.unit_power[selected], fleet.channel_gain[selected], config.noise_density)
    d = fleet.data_size[selected]
    a0 = config.cycles_per_sample
    return Schedule(
        selected=selected,
        shares=shares,
        freqs=freqs,
        local_epochs=int(local_epochs),
        upload_times=upload_time(config.model_size_bits, np.minimum(shares, 1.0), config.total_bandwidth_hz, r0),
        compute_times=local_latency(local_epochs, d, a0, freqs),
        upload_energies=upload_energy(fleet.unit_power[selected], config.model_size_bits, r0),
        compute_energies=local_energy(local_epochs, fleet.chip_coeff[selected], freqs, d, a0),
        power_weight=config.power_weight,
        policy=policy,
        round_id=round_id,
        clamped=np.zeros(len(selected), bool) if clamped is None else np.asarray(clamped, bool),
        converged=converged,
    )


def _distributed_freqs(selected, fleet: Fleet, config: SystemConfig, fbar=None):
    if fbar is None:
        try:
            fbar = fleet_reference_frequency(fleet, config)
        except UnboundedFrequency:
            return fleet.f_max[selected].copy(), np.ones(len(selected), bool)
    return local_frequency(fleet.data_size[selected], fleet.mean_data_size, fbar,
                           fleet.f_min[selected], fleet.f_max[selected])


def schedule_round(selected, local_epochs: int, fleet: Fleet, config: SystemConfig, fbar: float | None = None,
                   round_id: int = 0) -> Schedule:
    """Distributed policy: clients set f_j from the broadcast fbar, server allocates shares."""
    selected = np.unique(np.asarray(selected, dtype=int))
    freqs, clamped = _distributed_freqs(selected, fleet, config, fbar)
    r0 = unit_rate(fleet.unit_power[selected], fleet.channel_gain[selected], config.noise_density)
    shares = bandwidth_allocation(fleet.chip_coeff[selected], freqs, r0)
    return build_schedule(selected, shares, freqs, local_epochs, fleet, config, "distributed", round_id, clamped)


def even_schedule(selected, local_epochs: int, fleet: Fleet, config: SystemConfig, fbar: float | None = None,
                  round_id: int = 0) -> Schedule:
    """Baseline: a_j = 1/K and f_j = fbar (clipped to the client's range)."""
    selected = np.unique(np.asarray(selected, dtype=int))
    if fbar is None:
        try:
            fbar = fleet_reference_frequency(fleet, config)
        except UnboundedFrequency:
            fbar = np.inf
    freqs = np.clip(np.full(len(selected), fbar), fleet.f_min[selected], fleet.f_max[selected])
    shares = np.full(len(selected), 1.0 / len(selected))
    return build_schedule(selected, shares, freqs, local_epochs, fleet, config, "even", round_id,
                          freqs != fbar)


# --------------------------------------------------------------------------- centralized solver


def equal_finish_time(upload_unit, compute_time) -> tuple[float, np.ndarray]:
    """Smallest H with sum_j s_j/(H - tau_j) = 1, and the shares a_j = s_j/(H - tau_j).

    These shares give every client the same upload+compute finish time; they minimize the
    latest finish for fixed frequencies.
    """
    s = np.asarray(upload_unit, dtype=float)
    tau = np.asarray(compute_time, dtype=float)
    lo = tau.max()
    hi = lo + 2.0 * s.sum()

    def g(h):
        return np.sum(s / (h - tau)) - 1.0

    # g is +inf at lo and <= -1/2 at hi
    eps = 1e-300
    h = brentq(g, lo + max(eps, 1e-15 * lo), hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    a = s / (h - tau)
    return h, a / a.sum()


class _Coupled:
    """min_f H*(f) + l0 * energy(f) with shares eliminated via equal finish times."""

    def __init__(self, selected, local_epochs, fleet: Fleet, config: SystemConfig):
        self.k = len(selected)
        self.l0 = config.power_weight
        r0 = unit_rate(fleet.unit_power[selected], fleet.channel_gain[selected], config.noise_density)
        self.s = config.model_size_bits / (config.total_bandwidth_hz * r0)
        self.c = local_epochs * config.cycles_per_sample * fleet.data_size[selected]
        self.kappa = fleet.chip_coeff[selected]
        self.e_up = float(np.sum(upload_energy(fleet.unit_power[selected], config.model_size_bits, r0)))

    def value_grad(self, f):
        h, a = equal_finish_time(self.s, self.c / f)
        w = a ** 2 / self.s
        beta = w / w.sum()
        val = h + self.l0 * (self.e_up + np.sum(self.c * self.kappa * f ** 2) / self.k)
        grad = -beta * self.c / f ** 2 + 2 * self.l0 / self.k * self.c * self.kappa * f
        return val, grad, a


def _newton_polish(prob: _Coupled, f, lo, hi, steps: int = 4):
    """Newton steps in log-frequency on the free coordinates; stops once no step helps."""
    x = np.log(f)
    val, g, _ = prob.value_grad(f)
    for _ in range(steps):
        gx = g * np.exp(x)
        free = ~(np.isclose(x, np.log(lo), rtol=0, atol=1e-12) & (gx > 0)) & \
               ~(np.isclose(x, np.log(hi), rtol=0, atol=1e-12) & (gx < 0))
        idx = np.flatnonzero(free)
        if idx.size == 0:
            break
        hess = np.empty((idx.size, idx.size))
        h = 1e-6
        for col, i in enumerate(idx):
            xp = x.copy()
            xp[i] += h
            gp = prob.value_grad(np.exp(xp))[1] * np.exp(xp)
            hess[:, col] = (gp[idx] - gx[idx]) / h
        hess = 0.5 * (hess + hess.T)
        try:
            step = np.linalg.solve(hess, -gx[idx])
        except np.linalg.LinAlgError:
            break
        x_new = x.copy()
        x_new[idx] += step
        x_new = np.clip(x_new, np.log(lo), np.log(hi))
        val_new, g_new, _ = prob.value_grad(np.exp(x_new))
        if not np.max(np.abs(g_new * np.exp(x_new))[idx]) < np.max(np.abs(gx[idx])):
            break
        x, val, g = x_new, val_new, g_new
    return np.clip(np.exp(x), lo, hi)


def centralized_schedule(selected, local_epochs: int, fleet: Fleet, config: SystemConfig, tol: float = 1e-10,
                         max_iter: int = 1000, round_id: int = 0) -> Schedule:
    """Jointly optimal shares and frequencies for the coupled-finish-time round problem.

    Shares are eliminated in closed form (equal finish times); the remaining smooth convex
    problem in f is solved with bounded L-BFGS in log-frequency, warm-started at the
    distributed policy. Non-convergence returns the best iterate with converged=False.
    """
    selected = np.unique(np.asarray(selected, dtype=int))
    if tol <= 0:
        raise ValueError("tol must be > 0")
    prob = _Coupled(selected, local_epochs, fleet, config)
    lo, hi = fleet.f_min[selected], fleet.f_max[selected]
    f_start, _ = _distributed_freqs(selected, fleet, config)
    if prob.l0 == 0:
        f_opt = hi.copy()
        converged = True
    else:
        ref = f_start.copy()
        val0 = prob.value_grad(f_start)[0]

        def fun(x):
            f = ref * np.exp(x)
            v, g, _ = prob.value_grad(f)
            return v / val0, g * f / val0

        bounds = list(zip(np.log(lo / ref), np.log(hi / ref)))
        res = minimize(fun, np.zeros(len(selected)), jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": max_iter, "ftol": 0.0, "gtol": tol, "maxcor": 30})
        f_opt = _newton_polish(prob, np.clip(ref * np.exp(res.x), lo, hi), lo, hi)
        # L-BFGS-B reports ABNORMAL when it starts (or lands) on the optimum to rounding level;
        # judge convergence by the projected log-space gradient instead
        _, g, _ = prob.value_grad(f_opt)
        pg = g * f_opt / val0
        pg[(f_opt <= lo * (1 + 1e-12)) & (pg > 0)] = 0.0
        pg[(f_opt >= hi * (1 - 1e-12)) & (pg < 0)] = 0.0
        converged = bool(res.success) or float(np.max(np.abs(pg))) <= 1e-8
        if not converged:
            logger.warning("centralized solve did not converge: %s", res.message)
    _, _, shares = prob.value_grad(f_opt)
    clamped = np.isclose(f_opt, lo, rtol=1e-9) | np.isclose(f_opt, hi, rtol=1e-9)
    return build_schedule(selected, shares, f_opt, local_epochs, fleet, config, "centralized", round_id,
                          clamped, converged)


def make_schedule(policy: str, selected, local_epochs: int, fleet: Fleet, config: SystemConfig,
                  round_id: int = 0, fbar: float | None = None) -> Schedule:
    if policy == "distributed":
        return schedule_round(selected, local_epochs, fleet, config, fbar, round_id)
    if policy == "even":
        return even_schedule(selected, local_epochs, fleet, config, fbar, round_id)
    if policy == "centralized":
        return centralized_schedule(selected, local_epochs, fleet, config, round_id=round_id)
    raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")


# --------------------------------------------------------------------------- KKT


@dataclass(frozen=True, eq=False)
class KKTResiduals:
    R: float
    beta: np.ndarray
    stationarity_a: np.ndarray  # (R - beta_j s_j / a_j^2) / R
    stationarity_f: np.ndarray  # relative d/df_j of the Lagrangian
    stationarity_h: float  # 1 - sum beta
    slackness_time: np.ndarray  # beta_j (t_j - H) / H
    slackness_simplex: float  # R (sum a - 1)
    boundary: np.ndarray  # clients at a frequency bound

    @property
    def max_interior(self) -> float:
        """Largest absolute residual, ignoring f-stationarity of clamped clients."""
        parts = [np.abs(self.stationarity_a), np.abs(self.stationarity_f[~self.boundary]),
                 np.abs(self.slackness_time), [abs(self.stationarity_h)], [abs(self.slackness_simplex)]]
        return float(max(np.max(p) if len(p) else 0.0 for p in parts))


def _upload_unit(schedule: Schedule, fleet: Fleet, config: SystemConfig) -> np.ndarray:
    sel = schedule.selected
    r0 = unit_rate(fleet.unit_power[sel], fleet.channel_gain[sel], config.noise_density)
    return config.model_size_bits / (config.total_bandwidth_hz * r0)


def closed_form_duals(schedule: Schedule, fleet: Fleet, config: SystemConfig) -> tuple[float, np.ndarray]:
    """beta_j = (2 l0/K) kappa_j f_j^3 and the R that makes sum a_j = 1."""
    s = _upload_unit(schedule, fleet, config)
    beta = 2 * config.power_weight / schedule.k * fleet.chip_coeff[schedule.selected] * schedule.freqs ** 3
    return float(np.sum(np.sqrt(beta * s)) ** 2), beta


def implied_duals(schedule: Schedule, fleet: Fleet, config: SystemConfig) -> tuple[float, np.ndarray]:
    """Duals implied by the shares through a- and H-stationarity."""
    s = _upload_unit(schedule, fleet, config)
    w = schedule.shares ** 2 / s
    return float(1.0 / w.sum()), w / w.sum()


def kkt_residuals(schedule: Schedule, fleet: Fleet, config: SystemConfig, duals=None) -> KKTResiduals:
    """Residuals of the round problem's KKT system at `schedule` (duals default to implied)."""
    R, beta = duals if duals is not None else implied_duals(schedule, fleet, config)
    beta = np.asarray(beta, dtype=float)
    s = _upload_unit(schedule, fleet, config)
    a, f = schedule.shares, schedule.freqs
    c = schedule.local_epochs * config.cycles_per_sample * fleet.data_size[schedule.selected]
    kappa = fleet.chip_coeff[schedule.selected]
    energy_grad = 2 * config.power_weight / schedule.k * c * kappa * f
    time_grad = beta * c / f ** 2
    scale = np.maximum(energy_grad, time_grad)
    times = schedule.upload_times + schedule.compute_times
    h = times.max()
    return KKTResiduals(
        R=float(R),
        beta=beta,
        stationarity_a=(R - beta * s / a ** 2) / R,
        stationarity_f=(energy_grad - time_grad) / np.where(scale > 0, scale, 1.0),
        stationarity_h=float(1.0 - beta.sum()),
        slackness_time=beta * (times - h) / h,
        slackness_simplex=float(R * (a.sum() - 1.0)),
        boundary=schedule.clamped.copy(),
    )


# --------------------------------------------------------------------------- candidate pruning


def prune_candidates(fleet: Fleet, config: SystemConfig, k: int) -> np.ndarray:
    """Drop clients whose r0 or D_j lies strictly below the prune percentile, never leaving fewer than K.

    Ties with the percentile value are kept, so a homogeneous fleet is never pruned.
    """
    n = len(fleet)
    if config.prune_percentile == 0 or n <= k:
        return np.arange(n)
    r0 = unit_rate(fleet.unit_power, fleet.channel_gain, config.noise_density)
    cut_r = np.percentile(r0, config.prune_percentile)
    cut_d = np.percentile(fleet.data_size, config.prune_percentile)
    # relative shortfall below the cut; 0 means the client is kept
    short = np.maximum((cut_r - r0) / cut_r, (cut_d - fleet.data_size) / cut_d)
    bad = np.flatnonzero(short > 0)
    bad = bad[np.argsort(-short[bad], kind="stable")][: n - k]
    return np.setdiff1d(np.arange(n), bad)
