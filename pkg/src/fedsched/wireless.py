"""OFDMA uplink model: rates, upload time/energy and the uploading costs C_u, C_u,0."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import Fleet, RngStream, SystemConfig, sample_channel_gains, sample_participants

# (selected ids, fleet, config) -> bandwidth shares aligned with selected ids
SharePolicy = Callable[[np.ndarray, Fleet, SystemConfig], np.ndarray]

SIMPLEX_TOL = 1e-9


def _positive(name, *values):
    for v in values:
        if np.any(np.asarray(v) <= 0):
            raise ValueError(f"{name} requires positive inputs")


def unit_rate(p0, h, n0):
    """Spectral efficiency log2(1 + p0*h/N0) in bit/s/Hz."""
    _positive("unit_rate", p0, h, n0)
    return np.log2(1.0 + np.asarray(p0) * np.asarray(h) / n0)


def transmission_rate(a, bandwidth, r0):
    a = np.asarray(a, dtype=float)
    if np.any(a <= 0) or np.any(a > 1):
        raise ValueError("bandwidth share must lie in (0, 1]")
    return a * bandwidth * r0


def upload_time(z_m, a, bandwidth, r0):
    _positive("upload_time", z_m, a, bandwidth, r0)
    if np.any(np.asarray(a) > 1):
        raise ValueError("bandwidth share must lie in (0, 1]")
    return z_m / (np.asarray(a) * bandwidth * np.asarray(r0))


def upload_energy(p0, z_m, r0):
    """p_j * t_u with p_j = p0*a*B; the share and the bandwidth cancel."""
    _positive("upload_energy", p0, z_m, r0)
    return np.asarray(p0) * z_m / np.asarray(r0)


@dataclass(frozen=True)
class UploadCost:
    time_s: float
    energy_j: float
    power_weight: float

    @property
    def combined(self) -> float:
        return self.time_s + self.power_weight * self.energy_j


def fleet_rates(fleet: Fleet, config: SystemConfig) -> np.ndarray:
    return unit_rate(fleet.unit_power, fleet.channel_gain, config.noise_density)


def round_upload_cost(selected, shares, fleet: Fleet, config: SystemConfig) -> UploadCost:
    """C_{u,t}: slowest upload plus l0 * total upload energy over the selected clients."""
    selected = np.asarray(selected, dtype=int)
    shares = np.asarray(shares, dtype=float)
    if shares.shape != selected.shape:
        raise ValueError("one share per selected client required")
    if np.any(shares <= 0) or shares.sum() > 1 + SIMPLEX_TOL:
        raise ValueError("allocation violates the simplex constraint")
    r0 = unit_rate(fleet.unit_power[selected], fleet.channel_gain[selected], config.noise_density)
    t = upload_time(config.model_size_bits, np.minimum(shares, 1.0), config.total_bandwidth_hz, r0)
    e = upload_energy(fleet.unit_power[selected], config.model_size_bits, r0)
    return UploadCost(float(np.max(t)), float(np.sum(e)), config.power_weight)


@dataclass(frozen=True)
class Estimate:
    mean: float
    stderr: float
    n: int

    @classmethod
    def from_samples(cls, samples) -> "Estimate":
        x = np.asarray(samples, dtype=float)
        se = float(np.std(x, ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0
        return cls(float(np.mean(x)), se, len(x))


def expected_upload_cost(fleet: Fleet, k: int, policy: SharePolicy, config: SystemConfig, rng: RngStream,
                         replicas: int = 1000, mode: str = "uniform", redraw_gains: bool = False) -> Estimate:
    """Monte Carlo estimate of C_u = E_{P_t}[C_{u,t}]; lost uploads are still paid for."""
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    samples = np.empty(replicas)
    for i, sub in enumerate(rng.split(replicas)):
        fl = fleet.with_gains(sample_channel_gains(sub, config.fading, len(fleet))) if redraw_gains else fleet
        sel = np.unique(sample_participants(sub, fl.weight, k, mode))
        samples[i] = round_upload_cost(sel, policy(sel, fl, config), fl, config).combined
    return Estimate.from_samples(samples)


def unit_upload_cost(fleet: Fleet, config: SystemConfig, policy: SharePolicy) -> float:
    """C_u,0: the full-participation upload cost divided by N."""
    everyone = np.arange(len(fleet))
    cost = round_upload_cost(everyone, policy(everyone, fleet, config), fleet, config)
    return cost.combined / len(fleet)
