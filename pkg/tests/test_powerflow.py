import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hdsse.fixtures import build_feeder60, chain_feeder
from hdsse.powerflow import (PowerFlowError, PowerInjection, energy_balance, forward_sweep, kcl_residual,
                             pack_currents, solve_powerflow, unpack_currents)


def two_node_closed_form(s: complex, z: complex, v0: float = 1.0) -> complex:
    # |V|^2 = conj(V) v0 - z conj(S); the imaginary part fixes Im V directly
    w = z * s.conjugate()
    b = -w.imag / v0
    a = (v0 + math.sqrt(v0 * v0 - 4.0 * (b * b + w.real))) / 2.0
    return complex(a, b)


@pytest.fixture(scope="module")
def feeder60():
    return build_feeder60()


def test_zero_currents_flat_profile():
    m = chain_feeder(5)
    v = forward_sweep(m, 1.02 + 0j, np.zeros(8))
    assert np.allclose(v, 1.02)


def test_single_branch_drop():
    m = chain_feeder(2, complex(0.01, 0.02))
    v = forward_sweep(m, 1.0, np.array([1.0, 0.0]))
    assert v[1] == pytest.approx(0.99 - 0.02j, abs=1e-15)


def test_chain_cumulative_drops():
    m = chain_feeder(4, complex(0.02, 0.05))
    cur = np.array([0.3 - 0.1j, 0.2 + 0.05j, -0.1 + 0.02j])
    v = forward_sweep(m, 1.0, cur)
    expected = [1.0]
    for k in range(3):
        expected.append(expected[-1] - complex(0.02, 0.05) * cur[k])
    assert np.allclose(v, expected, atol=1e-15)
    # real state layout gives the same answer
    assert np.allclose(forward_sweep(m, 1.0, pack_currents(cur)), v, atol=1e-15)


def test_sweep_dimension_mismatch():
    with pytest.raises(ValueError):
        forward_sweep(chain_feeder(3), 1.0, np.zeros(3))
    with pytest.raises(ValueError):
        forward_sweep(chain_feeder(3), 1.0, np.zeros(3, dtype=complex))


def test_pack_round_trip():
    cur = np.array([1 + 2j, -3 + 0.5j])
    assert np.array_equal(pack_currents(cur), [1, 2, -3, 0.5])
    assert np.array_equal(unpack_currents(pack_currents(cur)), cur)


def test_zero_injections():
    m = chain_feeder(6)
    v, i = solve_powerflow(m, {})
    assert np.all(i == 0)
    assert np.allclose(v, 1.0)


def test_two_node_matches_closed_form():
    z = complex(0.01, 0.02)
    m = chain_feeder(2, z)
    s = complex(0.1, 0.05)
    v, i = solve_powerflow(m, {1: PowerInjection(0.1, 0.05)}, tol=1e-12)
    exact = two_node_closed_form(s, z)
    assert abs(v[1] - exact) < 1e-11
    assert abs(i[0] - (s / exact).conjugate()) < 1e-11


def test_feeder60_nominal(feeder60):
    s = np.zeros(feeder60.n_nodes, dtype=complex)
    for c in feeder60.customers:
        s[c.node] = 0.05 * (1 + 1j * math.tan(math.acos(0.95)))
    v, i = solve_powerflow(feeder60, s, max_iter=20)
    assert np.all((np.abs(v) > 0.9) & (np.abs(v) < 1.1))
    assert kcl_residual(feeder60, v, i, s).max() < 1e-8


def test_non_convergence_reported():
    m = chain_feeder(2, complex(0.5, 0.5))
    with pytest.raises(PowerFlowError):
        solve_powerflow(m, {1: 5.0 + 5.0j}, max_iter=50)


def test_bad_tolerance():
    with pytest.raises(ValueError):
        solve_powerflow(chain_feeder(2), {}, tol=0)


def test_unknown_injection_node():
    with pytest.raises(KeyError):
        solve_powerflow(chain_feeder(2), {7: 0.1})


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_loadings_consistent(seed):
    m = chain_feeder(8, complex(0.01, 0.03))
    rng = np.random.default_rng(seed)
    s = rng.uniform(-0.1, 0.2, m.n_nodes) + 1j * rng.uniform(-0.05, 0.1, m.n_nodes)
    v, i = solve_powerflow(m, s, tol=1e-10)
    assert kcl_residual(m, v, i, s).max() < 1e-9
    assert abs(energy_balance(m, v, i, s)) < 1e-8
    assert np.abs(forward_sweep(m, 1.0, i) - v).max() < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sweep_superposition(seed):
    m = chain_feeder(6)
    rng = np.random.default_rng(seed)
    a = rng.normal(size=5) + 1j * rng.normal(size=5)
    b = rng.normal(size=5) + 1j * rng.normal(size=5)
    v0 = cmath.rect(1.0, rng.uniform(-0.1, 0.1))
    lhs = forward_sweep(m, v0, a + b)
    rhs = forward_sweep(m, v0, a) + forward_sweep(m, v0, b) - v0
    assert np.allclose(lhs, rhs, atol=1e-13)
