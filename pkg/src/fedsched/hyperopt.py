"""Hyper-parameter layer: joint training cost, participation size K*, local epochs and a grid oracle."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .convergence import (TrainingConstants, UnboundedLocalEpochs, optimal_local_epochs,
                          predict_global_epochs)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class UnitCosts:
    upload: float  # C_u,0
    compute: float  # C_n,0
    broadcast: float = 0.0  # T_d

    def __post_init__(self):
        if self.upload <= 0 or self.compute <= 0 or self.broadcast < 0:
            raise ValueError("unit costs must be positive (T_d >= 0)")

    def scaled(self, factor: float) -> "UnitCosts":
        return UnitCosts(self.upload * factor, self.compute * factor, self.broadcast * factor)


@dataclass(frozen=True)
class HyperParams:
    k: int
    local_epochs: int
    rho0: float | None = None
    k_real: float | None = None
    local_epochs_real: float | None = None
    advisory: str = ""

    def __post_init__(self):
        if self.k < 1 or self.local_epochs < 1:
            raise ValueError("K and E_l must be >= 1")


def rho0(c: TrainingConstants) -> float:
    """(2(lambda-1) C1 phi0 / f0)^(1/4)."""
    return (2 * (c.lam - 1) * c.C1 * c.phi0 / c.f0) ** 0.25


def round_cost(k, local_epochs, costs: UnitCosts):
    """C_g = K C_u,0 + E_l C_n,0 + T_d."""
    return k * costs.upload + local_epochs * costs.compute + costs.broadcast


def joint_cost(k, local_epochs, costs: UnitCosts, c: TrainingConstants, eps: float, gamma: float, d: float) -> float:
    """Total expected cost G_eps * C_g with the full epoch predictor."""
    g = predict_global_epochs(c, eps, k, local_epochs, gamma, d)
    total = g * round_cost(k, local_epochs, costs)
    if not math.isfinite(total):
        raise ValueError("non-finite joint cost")
    return total


def joint_cost_substituted(k, local_epochs, costs: UnitCosts, c: TrainingConstants, gamma: float, d: float) -> float:
    """The E_l*-substituted total used to derive K* (prefactor dropped).

    (E_l C_n,0 + T_d) s + C_u,0 b + K C_u,0 s + b (E_l C_n,0 + T_d)/K with
    s = sqrt((lambda-1) f0 / (8 C1 phi0)) and b = (lambda-1)/(2 D (1-gamma)).
    """
    s = math.sqrt((c.lam - 1) * c.f0 / (8 * c.C1 * c.phi0))
    b = (c.lam - 1) / (2 * d * (1 - gamma))
    w = local_epochs * costs.compute + costs.broadcast
    return w * s + costs.upload * b + k * costs.upload * s + b * w / k


def optimal_participation_real(c: TrainingConstants, local_epochs: float, d: float, gamma: float,
                               costs: UnitCosts) -> float:
    if c.lam <= 1:
        raise ValueError("lambda == 1: no communication term, K* undefined")
    ratio = (costs.compute + costs.broadcast / local_epochs) / costs.upload
    return rho0(c) * math.sqrt(local_epochs / (d * (1 - gamma))) * math.sqrt(ratio)


def optimal_participation(c: TrainingConstants, local_epochs: int, d: float, gamma: float, costs: UnitCosts,
                          n: int, eps: float = 1.0) -> HyperParams:
    """K* (real) and the better of its clamped floor/ceil under the joint cost."""
    if c.lam <= 1:
        return HyperParams(1, local_epochs, rho0(c), None,
                           advisory="lambda == 1: communication term absent, use K = 1")
    k_real = optimal_participation_real(c, local_epochs, d, gamma, costs)
    cands = sorted({min(max(math.floor(k_real), 1), n), min(max(math.ceil(k_real), 1), n)})
    best = min(cands, key=lambda k: joint_cost(k, local_epochs, costs, c, eps, gamma, d))
    return HyperParams(best, local_epochs, rho0(c), k_real)


def optimal_hyperparams(c: TrainingConstants, costs: UnitCosts, d: float, gamma: float, n: int,
                        max_local_epochs: int = 100, eps: float = 1.0) -> HyperParams:
    """E_l from the local-epoch rule, then K* at that E_l."""
    try:
        e_real, e_int = optimal_local_epochs(c)
    except UnboundedLocalEpochs:
        return HyperParams(1, max_local_epochs, rho0(c), None, None,
                           advisory="lambda == 1: E_l capped at E_l_max, K = 1")
    e_int = min(e_int, max_local_epochs)
    hp = optimal_participation(c, e_int, d, gamma, costs, n, eps)
    return HyperParams(hp.k, e_int, hp.rho0, hp.k_real, e_real, hp.advisory)


@dataclass(frozen=True, eq=False)
class CostSurface:
    k_values: np.ndarray
    local_epoch_values: np.ndarray
    g_eps: np.ndarray  # [len(k), len(E_l)]
    round_cost: np.ndarray
    total: np.ndarray

    @property
    def argmin(self) -> tuple[int, int]:
        i, j = np.unravel_index(np.argmin(self.total), self.total.shape)
        return int(self.k_values[i]), int(self.local_epoch_values[j])

    def rows(self):
        """CSV rows (K, E_l, G_eps, C_g, total)."""
        for i, k in enumerate(self.k_values):
            for j, e in enumerate(self.local_epoch_values):
                yield int(k), int(e), float(self.g_eps[i, j]), float(self.round_cost[i, j]), float(self.total[i, j])


def grid_search_hyperparams(c: TrainingConstants, costs: UnitCosts, k_values, local_epoch_values, eps: float = 1.0,
                            gamma: float = 0.0, d: float = 500.0) -> CostSurface:
    """Exhaustive argmin of the joint cost over an integer (K, E_l) grid."""
    ks = np.asarray(sorted(set(int(k) for k in k_values)))
    es = np.asarray(sorted(set(int(e) for e in local_epoch_values)))
    if ks.size == 0 or es.size == 0:
        raise ValueError("empty grid")
    kk, ee = np.meshgrid(ks, es, indexing="ij")
    g = predict_global_epochs(c, eps, kk, ee, gamma, d)
    cg = round_cost(kk, ee, costs)
    return CostSurface(ks, es, g, cg, g * cg)
