"""Domain types, config loading and seeded sampling of channels, participants and losses."""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

logger = logging.getLogger(__name__)

SAMPLING_MODES = ("uniform", "by_weight")
LOSS_MODES = ("bernoulli", "worst_case")

WEIGHT_TOL = 1e-6


class ConfigError(ValueError):
    """Raised for malformed configs or violated invariants; names the offending field."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


def _require(cond: bool, field_name: str, message: str) -> None:
    if not cond:
        raise ConfigError(field_name, message)


@dataclass(frozen=True)
class FadingModel:
    """Exponential block fading: h = g0 * (d0/d)**theta * Exp(1)."""

    base_gain: float = 1e-4
    path_exponent: float = 4.0
    ref_distance: float = 1.0
    distance: float = 200.0

    def __post_init__(self):
        _require(self.base_gain > 0, "base_gain", "must be > 0")
        _require(self.path_exponent >= 0, "path_exponent", "must be >= 0")
        _require(self.ref_distance > 0, "ref_distance", "must be > 0")
        _require(self.distance > 0, "distance", "must be > 0")

    @property
    def mean_gain(self) -> float:
        return self.base_gain * (self.ref_distance / self.distance) ** self.path_exponent


@dataclass(frozen=True)
class SystemConfig:
    total_bandwidth_hz: float = 20e6
    noise_density: float = 5e-20
    model_size_bits: float = 3e4
    cycles_per_sample: float = 5e5
    power_weight: float = 1.0
    broadcast_time_s: float = 0.0
    loss_rate: float = 0.0
    num_clients: int = 50
    fading: FadingModel = field(default_factory=FadingModel)
    # candidate pruning before selection; percentile of the round's r0 / D_j values
    prune_percentile: float = 5.0

    def __post_init__(self):
        _require(self.total_bandwidth_hz > 0, "total_bandwidth_hz", "must be > 0")
        _require(self.noise_density > 0, "noise_density", "must be > 0")
        _require(self.model_size_bits > 0, "model_size_bits", "must be > 0")
        _require(self.cycles_per_sample > 0, "cycles_per_sample", "must be > 0")
        _require(self.power_weight >= 0, "power_weight", "must be >= 0")
        _require(self.broadcast_time_s >= 0, "broadcast_time_s", "must be >= 0")
        _require(0 <= self.loss_rate < 1, "loss_rate", "loss_rate out of range [0, 1)")
        _require(int(self.num_clients) >= 1, "num_clients", "must be >= 1")
        _require(0 <= self.prune_percentile < 100, "prune_percentile", "must be in [0, 100)")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "fading"}
        d["fading"] = {k: getattr(self.fading, k) for k in self.fading.__dataclass_fields__}
        return d


@dataclass(frozen=True)
class Client:
    id: int
    data_size: float
    weight: float
    chip_coeff: float
    unit_power: float
    channel_gain: float
    f_min: float
    f_max: float

    def __post_init__(self):
        _require(self.data_size >= 1, "data_size", f"client {self.id}: must be >= 1")
        _require(self.weight > 0, "weight", f"client {self.id}: must be > 0")
        _require(self.chip_coeff > 0, "chip_coeff", f"client {self.id}: must be > 0")
        _require(self.unit_power > 0, "unit_power", f"client {self.id}: must be > 0")
        _require(self.channel_gain > 0, "channel_gain", f"client {self.id}: must be > 0")
        _require(0 < self.f_min <= self.f_max, "f_min", f"client {self.id}: need 0 < f_min <= f_max")


@dataclass(frozen=True, eq=False)
class Fleet:
    """Struct-of-arrays view of a client list; index i is client id i."""

    data_size: np.ndarray
    weight: np.ndarray
    chip_coeff: np.ndarray
    unit_power: np.ndarray
    channel_gain: np.ndarray
    f_min: np.ndarray
    f_max: np.ndarray

    @classmethod
    def from_clients(cls, clients: Sequence[Client]) -> "Fleet":
        if not clients:
            raise ConfigError("clients", "empty client list")
        cols = {
            name: np.array([getattr(c, name) for c in clients], dtype=float)
            for name in ("data_size", "weight", "chip_coeff", "unit_power", "channel_gain", "f_min", "f_max")
        }
        for arr in cols.values():
            arr.setflags(write=False)
        return cls(**cols)

    def clients(self) -> list[Client]:
        return [
            Client(i, float(self.data_size[i]), float(self.weight[i]), float(self.chip_coeff[i]),
                   float(self.unit_power[i]), float(self.channel_gain[i]), float(self.f_min[i]),
                   float(self.f_max[i]))
            for i in range(len(self))
        ]

    def __len__(self) -> int:
        return len(self.data_size)

    @property
    def mean_data_size(self) -> float:
        return float(np.mean(self.data_size))

    @property
    def mean_chip_coeff(self) -> float:
        return float(np.mean(self.chip_coeff))

    @property
    def data_ratio(self) -> np.ndarray:
        """l_j = D / D_j with D the fleet average."""
        return self.mean_data_size / self.data_size

    def with_gains(self, gains: np.ndarray) -> "Fleet":
        gains = np.asarray(gains, dtype=float)
        if gains.shape != self.data_size.shape or np.any(gains <= 0):
            raise ValueError("gains must be positive with one entry per client")
        return replace(self, channel_gain=gains)


@dataclass(frozen=True)
class RoundOutcome:
    selected: np.ndarray  # P_t, may repeat ids under by_weight sampling
    survivors: np.ndarray  # P_{t,gamma}, slots of `selected` that got through
    retransmissions: int = 0

    @property
    def k(self) -> int:
        return len(self.selected)

    @property
    def k_gamma(self) -> int:
        return len(self.survivors)


class RngStream:
    """Seeded random stream; (seed, stream_id) fully determines the draw sequence."""

    def __init__(self, seed: int, stream_id: Sequence[int] | int = ()):
        if isinstance(stream_id, int):
            stream_id = (stream_id,)
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = tuple(int(s) for s in stream_id)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream_id)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def spawn(self, index: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id + (int(index),))

    def split(self, n: int) -> list["RngStream"]:
        return [self.spawn(i) for i in range(n)]

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


# --------------------------------------------------------------------------- sampling


def sample_channel_gains(rng: RngStream, fading: FadingModel, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    draws = rng.gen.exponential(1.0, size=n)
    # Exp(1) can return exactly 0 with negligible probability; gains must stay positive
    draws = np.maximum(draws, np.finfo(float).tiny)
    return fading.mean_gain * draws


def sample_participants(rng: RngStream, weights: np.ndarray, k: int, mode: str = "by_weight",
                        candidates: np.ndarray | None = None) -> np.ndarray:
    """Draw P_t. `uniform` returns K distinct ids; `by_weight` draws K ids i.i.d. with prob q_j."""
    weights = np.asarray(weights, dtype=float)
    pool = np.arange(len(weights)) if candidates is None else np.asarray(candidates, dtype=int)
    if not 1 <= k <= len(pool):
        raise ValueError(f"K={k} out of range [1, {len(pool)}]")
    if mode == "uniform":
        return np.sort(rng.gen.choice(pool, size=k, replace=False))
    if mode == "by_weight":
        p = weights[pool] / weights[pool].sum()
        return rng.gen.choice(pool, size=k, replace=True, p=p)
    raise ValueError(f"unknown sampling mode {mode!r}")


def worst_case_survivors(k: int, gamma: float) -> int:
    # guard against K*(1-gamma) landing a hair above an integer
    return max(1, math.ceil(k * (1.0 - gamma) - 1e-9))


def sample_losses(rng: RngStream, selected: np.ndarray, gamma: float, mode: str = "bernoulli") -> RoundOutcome:
    """Drop uploads from P_t. A Bernoulli round with no survivors is redrawn and counted."""
    if not 0 <= gamma < 1:
        raise ValueError("loss_rate out of range [0, 1)")
    selected = np.asarray(selected, dtype=int)
    k = len(selected)
    if gamma == 0:
        return RoundOutcome(selected, selected.copy())
    if mode == "worst_case":
        keep = np.sort(rng.gen.choice(k, size=worst_case_survivors(k, gamma), replace=False))
        return RoundOutcome(selected, selected[keep])
    if mode != "bernoulli":
        raise ValueError(f"unknown loss mode {mode!r}")
    retx = 0
    while True:
        mask = rng.gen.random(k) >= gamma
        if mask.any():
            return RoundOutcome(selected, selected[mask], retx)
        retx += 1


def exact_outcome_distribution(weights: np.ndarray, k: int, gamma: float = 0.0, mode: str = "by_weight",
                               loss_mode: str = "worst_case") -> Iterator[tuple[float, tuple, tuple]]:
    """Enumerate (probability, P_t, P_{t,gamma}) over every outcome of one round.

    Intended for small N and K; the number of outcomes grows combinatorially.
    """
    q = np.asarray(weights, dtype=float)
    q = q / q.sum()
    n = len(q)
    if mode == "by_weight":
        sels = ((float(np.prod(q[list(s)])), s) for s in itertools.product(range(n), repeat=k))
    elif mode == "uniform":
        total = math.comb(n, k)
        sels = ((1.0 / total, s) for s in itertools.combinations(range(n), k))
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    for p_sel, sel in sels:
        if gamma == 0:
            yield p_sel, sel, sel
            continue
        if loss_mode == "worst_case":
            kg = worst_case_survivors(k, gamma)
            subsets = list(itertools.combinations(range(k), kg))
            for keep in subsets:
                yield p_sel / len(subsets), sel, tuple(sel[i] for i in keep)
        elif loss_mode == "bernoulli":
            # conditioned on at least one survivor, matching the redraw rule
            norm = 1.0 - gamma ** k
            for pattern in itertools.product((0, 1), repeat=k):
                m = sum(pattern)
                if m == 0:
                    continue
                p = (1 - gamma) ** m * gamma ** (k - m) / norm
                yield p_sel * p, sel, tuple(s for s, keep in zip(sel, pattern) if keep)
        else:
            raise ValueError(f"unknown loss mode {loss_mode!r}")


# --------------------------------------------------------------------------- fleets & config


@dataclass(frozen=True)
class FleetSpec:
    """Generative fleet: kappa, p0 and D drawn uniformly in mean*(1 +- var)."""

    num_clients: int = 50
    mean_chip_coeff: float = 5e-27
    mean_unit_power: float = 4e-7
    mean_data_size: float = 500.0
    var: float = 0.0
    f_min: float = 1e7
    f_max: float = 5e9

    def __post_init__(self):
        _require(self.num_clients >= 1, "num_clients", "must be >= 1")
        _require(0 <= self.var < 1, "var", "must be in [0, 1)")
        _require(self.mean_chip_coeff > 0, "mean_chip_coeff", "must be > 0")
        _require(self.mean_unit_power > 0, "mean_unit_power", "must be > 0")
        _require(self.mean_data_size >= 1, "mean_data_size", "must be >= 1")
        _require(0 < self.f_min <= self.f_max, "f_min", "need 0 < f_min <= f_max")


def generate_fleet(spec: FleetSpec, fading: FadingModel, rng: RngStream, random_gains: bool = True) -> Fleet:
    """Draw a fleet per `spec`; gains from `fading` (or its mean when `random_gains` is False)."""
    n, v = spec.num_clients, spec.var

    def spread(mean):
        return rng.gen.uniform(mean * (1 - v), mean * (1 + v), size=n) if v > 0 else np.full(n, float(mean))

    kappa = spread(spec.mean_chip_coeff)
    p0 = spread(spec.mean_unit_power)
    data = np.maximum(1.0, np.round(spread(spec.mean_data_size)))
    gains = sample_channel_gains(rng, fading, n) if random_gains else np.full(n, fading.mean_gain)
    clients = [
        Client(i, float(data[i]), float(data[i] / data.sum()), float(kappa[i]), float(p0[i]),
               float(gains[i]), spec.f_min, spec.f_max)
        for i in range(n)
    ]
    return Fleet.from_clients(clients)


def normalize_weights(weights: Sequence[float]) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.size == 0 or not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ConfigError("weight", "weights must be finite and > 0 to normalize")
    total = w.sum()
    if abs(total - 1.0) > WEIGHT_TOL:
        logger.warning("client weights sum to %g; renormalizing", total)
    return w / total


_SYSTEM_KEYS = {f for f in SystemConfig.__dataclass_fields__ if f != "fading"}
_FADING_KEYS = set(FadingModel.__dataclass_fields__)
_CLIENT_KEYS = {"data_size", "weight", "chip_coeff", "unit_power", "channel_gain", "f_min", "f_max"}
_CLIENT_REQUIRED = {"data_size", "chip_coeff", "unit_power", "f_min", "f_max"}


def _check_keys(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(where, f"unknown keys {sorted(unknown)}")


def read_document(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError("path", f"config file {path} not found")
    text = path.read_text()
    try:
        if path.suffix.lower() == ".json":
            return json.loads(text)
        return tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError("path", f"cannot parse {path}: {exc}") from exc


def parse_config(doc: dict, rng: RngStream | None = None) -> tuple[SystemConfig, Fleet]:
    """Build (SystemConfig, Fleet) from a parsed document with [system], [fading], [clients]."""
    for sec in ("system", "clients"):
        if sec not in doc:
            raise ConfigError(sec, "missing section")
    system = dict(doc["system"])
    _check_keys(system, _SYSTEM_KEYS, "system")
    fading_doc = dict(doc.get("fading", {}))
    _check_keys(fading_doc, _FADING_KEYS, "fading")
    fading = FadingModel(**{k: float(v) for k, v in fading_doc.items()})

    clients_doc = doc["clients"]
    if "list" in clients_doc:
        rows = clients_doc["list"]
        draws = None
        clients = []
        q = normalize_weights([r.get("weight", r.get("data_size", 1.0)) for r in rows])
        for i, row in enumerate(rows):
            _check_keys(row, _CLIENT_KEYS, f"clients.list[{i}]")
            missing = _CLIENT_REQUIRED - set(row)
            if missing:
                raise ConfigError(sorted(missing)[0], f"missing field in clients.list[{i}]")
            gain = row.get("channel_gain")
            if gain is None:
                if draws is None:
                    draws = sample_channel_gains(rng or RngStream(0), fading, len(rows))
                gain = draws[i]
            clients.append(Client(i, float(row["data_size"]), float(q[i]), float(row["chip_coeff"]),
                                  float(row["unit_power"]), float(gain), float(row["f_min"]),
                                  float(row["f_max"])))
        fleet = Fleet.from_clients(clients)
    elif "fleet" in clients_doc:
        spec_doc = dict(clients_doc["fleet"])
        random_gains = bool(spec_doc.pop("random_gains", True))
        _check_keys(spec_doc, set(FleetSpec.__dataclass_fields__), "clients.fleet")
        spec = FleetSpec(**spec_doc)
        fleet = generate_fleet(spec, fading, rng or RngStream(0), random_gains=random_gains)
    else:
        raise ConfigError("clients", "need either clients.list or clients.fleet")

    system.setdefault("num_clients", len(fleet))
    _require(int(system["num_clients"]) == len(fleet), "num_clients",
             f"says {system['num_clients']} but {len(fleet)} clients defined")
    config = SystemConfig(fading=fading, **system)
    return config, fleet


def load_config(path: str | Path, rng: RngStream | None = None) -> tuple[SystemConfig, Fleet]:
    return parse_config(read_document(path), rng)
