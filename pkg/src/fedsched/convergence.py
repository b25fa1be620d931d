"""Analytical convergence model: non-i.i.d. metric, global-epoch predictor, local-epoch rule,
loss-bound curve and fitting of the predictor's composite coefficients."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import nnls


class UnboundedLocalEpochs(ValueError):
    """lambda == 1: the computation bracket has no interior minimum, E_l should be capped."""


@dataclass(frozen=True)
class TrainingConstants:
    L: float
    mu: float
    G2: float
    C1: float
    sigma2: float
    phi0: float
    f0: float
    lam: float
    delta1: float = 1.0

    def __post_init__(self):
        for name in ("L", "mu", "G2", "C1", "f0", "delta1"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be >= 0")
        if self.lam < 1:
            raise ValueError("lam must be >= 1")
        if self.phi0 < 1:
            raise ValueError("phi0 must be >= 1")
        if self.mu > self.L:
            raise ValueError("mu must not exceed L")

    @property
    def prefactor(self) -> float:
        """4 L^2 G^2 lambda / mu^2 (divide by epsilon for the epoch predictor)."""
        return 4 * self.L ** 2 * self.G2 * self.lam / self.mu ** 2

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "TrainingConstants":
        return cls(**json.loads(Path(path).read_text()))


def _check_args(eps, k, local_epochs, gamma, d):
    if eps <= 0:
        raise ValueError("epsilon must be > 0")
    if np.any(np.asarray(k) < 1) or np.any(np.asarray(local_epochs) < 1) or np.any(np.asarray(d) < 1):
        raise ValueError("K, E_l and D must be >= 1")
    if np.any(np.asarray(gamma) < 0) or np.any(np.asarray(gamma) >= 1):
        raise ValueError("gamma must be in [0, 1)")


def communication_term(c: TrainingConstants, k, gamma, d):
    return (c.lam - 1) / (k * (1 - gamma)) / (2 * d)


def computation_term(c: TrainingConstants, local_epochs):
    return (c.lam - 1) * local_epochs / (2 * c.C1 * c.phi0) + c.f0 / (4 * local_epochs)


def predict_global_epochs(c: TrainingConstants, eps: float, k: float, local_epochs: float, gamma: float,
                          d: float) -> float:
    """Real-valued G_eps; callers round up."""
    _check_args(eps, k, local_epochs, gamma, d)
    return c.prefactor / eps * (communication_term(c, k, gamma, d) + computation_term(c, local_epochs))


def optimal_local_epochs_real(c: TrainingConstants) -> float:
    if c.lam <= 1:
        raise UnboundedLocalEpochs("lambda == 1: E_l can be arbitrarily large; cap it by E_l_max")
    return math.sqrt(c.C1 * c.phi0 * c.f0 / (2 * (c.lam - 1)))


def optimal_local_epochs(c: TrainingConstants) -> tuple[float, int]:
    """(real E_l*, better of floor/ceil under the computation bracket)."""
    e = optimal_local_epochs_real(c)
    cands = {max(1, math.floor(e)), max(1, math.ceil(e))}
    return e, min(sorted(cands), key=lambda x: computation_term(c, x))


@dataclass(frozen=True)
class LearningRateSchedule:
    """eta_t = v / (t + beta)^alpha, t counted in local steps."""

    v: float
    beta: float
    alpha: float = 1.0

    def __post_init__(self):
        if self.v <= 0:
            raise ValueError("v must be > 0")
        if self.alpha > 1:
            raise ValueError("alpha > 1 breaks the induction step; the bound does not hold")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")

    @classmethod
    def default(cls, L: float, mu: float, lam: float) -> "LearningRateSchedule":
        return cls(v=2.0 / mu, beta=max(2 * L * lam - 1, 0.0), alpha=1.0)

    def __call__(self, t):
        return self.v / (np.asarray(t, dtype=float) + self.beta) ** self.alpha


@dataclass(frozen=True)
class LossBoundModel:
    constants: TrainingConstants
    k: float
    local_epochs: float
    gamma: float
    d: float
    schedule: LearningRateSchedule

    def __post_init__(self):
        if self.constants.mu * self.schedule.v < 1:
            raise ValueError("need mu * v >= 1")

    @classmethod
    def build(cls, c: TrainingConstants, k, local_epochs, gamma, d, schedule=None) -> "LossBoundModel":
        return cls(c, k, local_epochs, gamma, d, schedule or LearningRateSchedule.default(c.L, c.mu, c.lam))

    @property
    def dropped_term(self) -> float:
        """1/(2 L K D (1-gamma) E_l), the small bracket term left out of the epoch predictor."""
        return 1.0 / (2 * self.constants.L * self.k * self.d * (1 - self.gamma) * self.local_epochs)

    @property
    def M(self) -> float:
        c = self.constants
        bracket = (computation_term(c, self.local_epochs) - c.f0 / (4 * self.local_epochs)
                   + self.dropped_term + communication_term(c, self.k, self.gamma, self.d))
        return self.local_epochs * c.G2 * c.L ** 2 * c.lam * bracket

    @property
    def X(self) -> float:
        s, c = self.schedule, self.constants
        return max(s.v ** 2 * self.M / (c.mu * s.v - 1) if c.mu * s.v > 1 else math.inf,
                   (s.beta + 1) ** s.alpha * c.delta1)

    def induction_bound(self, t):
        """X / (t + beta)^alpha."""
        return self.X / (np.asarray(t, dtype=float) + self.schedule.beta) ** self.schedule.alpha


def loss_bound_curve(model: LossBoundModel, t_max: int, include_dropped: bool = False) -> np.ndarray:
    """Bound on E[f(w_t)] - f* for t = 1..t_max local steps (O(1/t))."""
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    c = model.constants
    bracket = (communication_term(c, model.k, model.gamma, model.d) + computation_term(c, model.local_epochs))
    if include_dropped:
        bracket += model.dropped_term
    t = np.arange(1, t_max + 1, dtype=float)
    return c.prefactor * model.local_epochs * bracket / t


def loss_bound_at(model: LossBoundModel, t: float) -> float:
    c = model.constants
    bracket = communication_term(c, model.k, model.gamma, model.d) + computation_term(c, model.local_epochs)
    return c.prefactor * model.local_epochs * bracket / t


# --------------------------------------------------------------------------- non-i.i.d. metric


def noniid_metric(gradients, weights) -> float | None:
    """sum pi_j |g_j|^2 / |sum pi_j g_j|^2, or None when the aggregate gradient vanishes."""
    g = np.atleast_2d(np.asarray(gradients, dtype=float))
    pi = np.asarray(weights, dtype=float)
    if abs(pi.sum() - 1) > 1e-9:
        raise ValueError("weights must sum to 1")
    agg = pi @ g
    denom = float(agg @ agg)
    num = float(pi @ np.einsum("ij,ij->i", g, g))
    if denom <= 1e-12 * max(num, np.finfo(float).tiny):
        return None
    return max(num / denom, 1.0)


def running_lambda(samples, burn_in: int = 5) -> np.ndarray:
    """Running max of per-epoch Lambda samples after `burn_in` epochs (NaN before / for skipped samples)."""
    out = np.full(len(samples), np.nan)
    best = np.nan
    for i, s in enumerate(samples):
        if i >= burn_in and s is not None and np.isfinite(s):
            best = s if np.isnan(best) else max(best, s)
        out[i] = best
    return out


# --------------------------------------------------------------------------- fitting


@dataclass(frozen=True)
class FittedCoefficients:
    """G_eps ~= comm/(K(1-gamma)D) + comp_linear*E_l + comp_inverse/E_l.

    comm = A(lambda-1)/2, comp_linear = A(lambda-1)/(2 C1 phi0), comp_inverse = A f0/4, with
    A = 4 L^2 G^2 lambda / (mu^2 eps). The individual constants are not identifiable.
    """

    comm: float
    comp_linear: float
    comp_inverse: float
    r2: float
    residuals: np.ndarray

    def predict(self, k, local_epochs, gamma, d):
        return (self.comm / (np.asarray(k) * (1 - np.asarray(gamma)) * np.asarray(d))
                + self.comp_linear * np.asarray(local_epochs) + self.comp_inverse / np.asarray(local_epochs))

    @property
    def implied_local_epochs(self) -> float:
        if self.comp_linear <= 0:
            return math.inf
        return math.sqrt(self.comp_inverse / self.comp_linear)


def design_matrix(samples) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(samples, dtype=float)
    k, e, gamma, d, g = s.T
    x = np.column_stack([1.0 / (k * (1 - gamma) * d), e, 1.0 / e])
    return x, g


def fit_constants(samples) -> FittedCoefficients:
    """Non-negative least squares over rows (K, E_l, gamma, D, measured G_eps)."""
    s = np.asarray(samples, dtype=float)
    if s.ndim != 2 or s.shape[1] != 5 or len(s) < 4:
        raise ValueError("need >= 4 samples of (K, E_l, gamma, D, G_eps)")
    if len(np.unique(s[:, 0] * (1 - s[:, 2]) * s[:, 3])) < 2 or len(np.unique(s[:, 1])) < 2:
        raise ValueError("rank-deficient design: need >= 2 distinct K and >= 2 distinct E_l")
    x, g = design_matrix(s)
    # column scaling keeps nnls well conditioned when 1/(KD) is tiny
    scale = np.linalg.norm(x, axis=0)
    if np.linalg.matrix_rank(x / scale) < 3:
        raise ValueError("rank-deficient design")
    theta, _ = nnls(x / scale, g)
    theta = theta / scale
    resid = g - x @ theta
    ss_tot = float(np.sum((g - g.mean()) ** 2))
    r2 = 1 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return FittedCoefficients(float(theta[0]), float(theta[1]), float(theta[2]), r2, resid)
