import itertools

import numpy as np
import pytest

import oracles
from conftest import make_fleet
from fedsched.compute import (closed_form_unit_compute_cost, local_energy, local_latency, round_compute_cost,
                              unit_compute_cost)
from fedsched.core import RngStream, SystemConfig
from fedsched.scheduler import fleet_reference_frequency, local_frequency, reference_frequency


def at_fbar(sel, fleet, config):
    return np.full(len(sel), fleet_reference_frequency(fleet, config))


def distributed(sel, fleet, config):
    fbar = fleet_reference_frequency(fleet, config)
    return local_frequency(fleet.data_size[sel], fleet.mean_data_size, fbar, fleet.f_min[sel], fleet.f_max[sel])[0]


def test_latency_value():
    assert local_latency(20, 500, 5e5, 5e8) == pytest.approx(10.0, rel=1e-15)
    assert local_latency(2, 500, 5e5, 5e8) == 2 * local_latency(1, 500, 5e5, 5e8)


def test_latency_identity():
    rng = np.random.default_rng(0)
    e, d, f = rng.integers(1, 50, 100), rng.uniform(10, 1000, 100), rng.uniform(1e7, 5e9, 100)
    np.testing.assert_allclose(local_latency(e, d, 5e5, f) * f, e * 5e5 * d, rtol=1e-13)


def test_latency_rejects_bad_inputs():
    with pytest.raises(ValueError):
        local_latency(1, 500, 5e5, 0.0)
    with pytest.raises(ValueError):
        local_latency(0, 500, 5e5, 1e8)


def test_energy_value():
    assert local_energy(20, 5e-27, 5e8, 500, 5e5) == pytest.approx(6.25, rel=1e-12)


def test_energy_scaling_and_identity():
    e1 = local_energy(3, 5e-27, 4e8, 500, 5e5)
    assert local_energy(3, 5e-27, 8e8, 500, 5e5) == pytest.approx(4 * e1, rel=1e-12)
    assert local_latency(3, 500, 5e5, 8e8) == pytest.approx(local_latency(3, 500, 5e5, 4e8) / 2, rel=1e-12)
    rng = np.random.default_rng(1)
    k, f, d = rng.uniform(1e-28, 1e-26, 50), rng.uniform(1e7, 5e9, 50), rng.uniform(10, 1000, 50)
    np.testing.assert_allclose(local_energy(5, k, f, d, 5e5), k * f ** 3 * local_latency(5, d, 5e5, f), rtol=1e-12)


def test_energy_rejects_nonpositive():
    with pytest.raises(ValueError):
        local_energy(1, 0.0, 1e8, 500, 5e5)


def test_homogeneous_round_cost_closed_form(config):
    fleet = make_fleet(5)
    fbar = fleet_reference_frequency(fleet, config)
    sel = np.arange(5)
    for e in (1, 5, 20):
        cost = round_compute_cost(sel, np.full(5, fbar), e, fleet, config).combined
        expected = e * closed_form_unit_compute_cost(500, 5e-27, fbar, config)
        assert cost == pytest.approx(expected, rel=1e-12)


def test_single_client_round(config):
    fleet = make_fleet(1)
    cost = round_compute_cost([0], [3e8], 4, fleet, config).combined
    assert cost == pytest.approx(local_latency(4, 500, 5e5, 3e8) + local_energy(4, 5e-27, 3e8, 500, 5e5), rel=1e-12)


def test_round_cost_matches_recomputation():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = int(rng.integers(1, 8))
        config = SystemConfig(power_weight=float(rng.uniform(0, 3)))
        fleet = make_fleet(n, data=rng.uniform(100, 900, n), kappa=rng.uniform(1e-27, 1e-26, n))
        f = rng.uniform(1e8, 3e9, n)
        e = int(rng.integers(1, 30))
        got = round_compute_cost(np.arange(n), f, e, fleet, config).combined
        want = oracles.compute_round(f, fleet.chip_coeff, fleet.data_size, 5e5, e, config.power_weight)
        assert got == pytest.approx(want, rel=1e-12)


def test_round_cost_rejects_out_of_bounds(config, fleet4):
    with pytest.raises(ValueError):
        round_compute_cost([0], [1e10], 1, fleet4, config)


def test_unit_cost_homogeneous_exact(config):
    fleet = make_fleet(6)
    fbar = fleet_reference_frequency(fleet, config)
    est = unit_compute_cost(fleet, config, at_fbar, 3)
    assert est.mean == pytest.approx(closed_form_unit_compute_cost(500, 5e-27, fbar, config), rel=1e-12)
    assert est.n == 20  # all subsets enumerated


def test_unit_cost_linear_in_local_epochs(config):
    rng = np.random.default_rng(3)
    fleet = make_fleet(4, data=rng.uniform(200, 800, 4))
    sel = np.arange(4)
    f = distributed(sel, fleet, config)
    per_epoch = [round_compute_cost(sel, f, e, fleet, config).combined / e for e in (1, 5, 20)]
    assert np.ptp(per_epoch) <= 1e-12 * per_epoch[0]


def test_unit_cost_heterogeneous_vs_closed_form(config):
    rng = np.random.default_rng(4)
    fleet = make_fleet(4, data=rng.uniform(400, 600, 4), kappa=rng.uniform(4e-27, 6e-27, 4))
    exact = np.mean([round_compute_cost(list(s), distributed(np.array(s), fleet, config), 1, fleet, config).combined
                     for s in itertools.combinations(range(4), 2)])
    est = unit_compute_cost(fleet, config, distributed, 2)
    assert est.mean == pytest.approx(exact, rel=1e-12)
    fbar = fleet_reference_frequency(fleet, config)
    closed = closed_form_unit_compute_cost(fleet.mean_data_size, fleet.mean_chip_coeff, fbar, config)
    assert est.mean == pytest.approx(closed, rel=0.10)


def test_unit_cost_monte_carlo_path(config):
    fleet = make_fleet(30)
    with pytest.raises(ValueError):
        unit_compute_cost(fleet, config, at_fbar, 10)
    est = unit_compute_cost(fleet, config, at_fbar, 10, rng=RngStream(0), replicas=20)
    fbar = reference_frequency(1.0, 5e-27)
    assert est.mean == pytest.approx(closed_form_unit_compute_cost(500, 5e-27, fbar, config), rel=1e-12)
