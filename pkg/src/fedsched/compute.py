"""Local-training latency/energy and the computation costs C_n, C_n,0."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Callable

import numpy as np

from .core import Fleet, RngStream, SystemConfig, sample_participants
from .wireless import Estimate

# (selected ids, fleet, config) -> CPU frequencies aligned with selected ids
FrequencyPolicy = Callable[[np.ndarray, Fleet, SystemConfig], np.ndarray]

ENUMERATION_LIMIT = 10_000
BOUND_RTOL = 1e-9


def local_latency(local_epochs, data_size, cycles_per_sample, freq):
    if np.any(np.asarray(freq) <= 0):
        raise ValueError("frequency must be > 0")
    if np.any(np.asarray(local_epochs) < 1):
        raise ValueError("local_epochs must be >= 1")
    return np.asarray(local_epochs) * cycles_per_sample * np.asarray(data_size) / np.asarray(freq)


def local_energy(local_epochs, chip_coeff, freq, data_size, cycles_per_sample):
    for v in (local_epochs, chip_coeff, freq, data_size, cycles_per_sample):
        if np.any(np.asarray(v) <= 0):
            raise ValueError("local_energy requires positive inputs")
    return (np.asarray(local_epochs) * np.asarray(chip_coeff) * np.asarray(freq) ** 2
            * cycles_per_sample * np.asarray(data_size))


@dataclass(frozen=True)
class ComputeCost:
    time_s: float
    mean_energy_j: float
    power_weight: float

    @property
    def combined(self) -> float:
        return self.time_s + self.power_weight * self.mean_energy_j


def round_compute_cost(selected, freqs, local_epochs: int, fleet: Fleet, config: SystemConfig) -> ComputeCost:
    """C_{n,t}: slowest local training plus l0 times the mean training energy."""
    selected = np.asarray(selected, dtype=int)
    freqs = np.asarray(freqs, dtype=float)
    lo, hi = fleet.f_min[selected], fleet.f_max[selected]
    if np.any(freqs < lo * (1 - BOUND_RTOL)) or np.any(freqs > hi * (1 + BOUND_RTOL)):
        raise ValueError("frequency outside [f_min, f_max]")
    d = fleet.data_size[selected]
    t = local_latency(local_epochs, d, config.cycles_per_sample, freqs)
    e = local_energy(local_epochs, fleet.chip_coeff[selected], freqs, d, config.cycles_per_sample)
    return ComputeCost(float(np.max(t)), float(np.mean(e)), config.power_weight)


def closed_form_unit_compute_cost(mean_data: float, mean_chip: float, fbar: float, config: SystemConfig) -> float:
    """alpha0*D/fbar + l0*fbar^2*alpha0*kappa*D for a fleet running at the reference frequency."""
    a = config.cycles_per_sample
    return a * mean_data / fbar + config.power_weight * fbar ** 2 * a * mean_chip * mean_data


def unit_compute_cost(fleet: Fleet, config: SystemConfig, policy: FrequencyPolicy, k: int,
                      rng: RngStream | None = None, replicas: int = 2000, mode: str = "uniform") -> Estimate:
    """C_n,0 = E_{P_t}[C_{n,t}] / E_l at size K.

    Uniform selection is enumerated exactly when C(N, K) <= 10^4, otherwise sampled.
    """
    n = len(fleet)

    def cost(sel):
        sel = np.asarray(sel, dtype=int)
        return round_compute_cost(sel, policy(sel, fleet, config), 1, fleet, config).combined

    if mode == "uniform" and math.comb(n, k) <= ENUMERATION_LIMIT:
        vals = [cost(s) for s in combinations(range(n), k)]
        return Estimate(float(np.mean(vals)), 0.0, len(vals))
    if rng is None:
        raise ValueError("rng required for Monte Carlo estimation")
    vals = [cost(np.unique(sample_participants(sub, fleet.weight, k, mode))) for sub in rng.split(replicas)]
    return Estimate.from_samples(vals)
