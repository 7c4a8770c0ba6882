import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hdsse import coordinator
from hdsse.actor_critic import BoundaryUp, circuit_dataset, make_modules, pretrain
from hdsse.coordinator import (CONVERGED, OSCILLATION, HierarchyConfig, StageAError, SwitchOp,
                               apply_topology_change, confidence_variance, estimate_stream, parse_switch_ops,
                               run_offline_update, run_timestep, write_results_jsonl)
from hdsse.fixtures import small_hierarchy
from hdsse.grid import FeederValidationError
from hdsse.neural import GaussianPolicy, Mlp
from hdsse.scenario import MeasurementSet, MeterReading, ScenarioConfig, generate_profiles, generate_truth, \
    synthesize_measurements
from hdsse.wls import Kind, Measurement, WlsConfig, wls_solve


@pytest.fixture(scope="module")
def model():
    return small_hierarchy()


@pytest.fixture(scope="module")
def stream(model):
    cfg = ScenarioConfig(timesteps=460, seed=2)
    truth = generate_truth(model, generate_profiles(model, cfg))
    return truth, synthesize_measurements(model, truth, cfg)


@pytest.fixture(scope="module")
def trained(model, stream):
    truth, msets = stream
    mods = make_modules(model)
    for m in mods.values():
        pretrain(m, circuit_dataset(model, m, truth, msets)[:400], epochs=40)
    return mods


def zero_load_set(model, t=0):
    scada = (Measurement(Kind.P_INJ, 0, 0.0, 1e-6), Measurement(Kind.Q_INJ, 0, 0.0, 1e-6),
             Measurement(Kind.V_MAG, 0, 1.0, 1e-4))
    meters = {c.node: MeterReading(1.0, 0.0) for c in model.customers}
    return MeasurementSet(t, scada, meters)


def zero_modules(model):
    mods = make_modules(model)
    for m in mods.values():
        m.policy = GaussianPolicy(Mlp((m.n_in, 4, m.dim)), Mlp((m.n_in, 4, m.dim)))
    return mods


def test_config_validation():
    with pytest.raises(ValueError):
        HierarchyConfig(eps_v=0.0)
    with pytest.raises(ValueError):
        HierarchyConfig(max_iter=0)


def test_zero_load_converges_in_one_iteration(model):
    res = run_timestep(model, zero_load_set(model), zero_modules(model))
    assert res.status == CONVERGED and res.iterations == 1
    assert np.allclose(res.voltages, 1.0, atol=1e-9)
    assert np.allclose(res.currents, 0.0, atol=1e-9)
    assert all(b.p == 0 and b.q == 0 for b in res.boundary.values())


def test_missing_module_rejected(model):
    mods = zero_modules(model)
    del mods[1]
    with pytest.raises(KeyError):
        run_timestep(model, zero_load_set(model), mods)


def test_trained_modules_settle(model, stream, trained):
    truth, msets = stream
    res = list(estimate_stream(model, msets[400:460], trained))
    assert sum(r.converged and r.iterations <= 10 for r in res) >= 0.95 * len(res)
    for r in res:
        assert r.iterations <= 20
        assert all(v >= 0 for v in r.timings.values())
    err = np.abs(np.abs(np.array([r.voltages for r in res])) - np.abs(truth.voltages[400:460]))
    assert err.mean() < 0.01


def test_boundary_fixed_point(model, stream, trained):
    _, msets = stream
    cfg = HierarchyConfig()
    res = run_timestep(model, msets[410], trained, cfg)
    assert res.converged
    again = run_timestep(model, msets[410], trained, HierarchyConfig(max_iter=1), previous=res)
    for sid in trained:
        assert abs(again.v_n[sid] - res.v_n[sid]) < cfg.eps_v
        assert abs(again.boundary[sid].p - res.boundary[sid].p) < 10 * cfg.eps_v
        assert abs(again.boundary[sid].q - res.boundary[sid].q) < 10 * cfg.eps_v


def test_mean_mode_deterministic(model, stream, trained):
    _, msets = stream
    a = run_timestep(model, msets[420], trained)
    b = run_timestep(model, msets[420], trained)
    assert json.dumps(a.to_json()) == json.dumps(b.to_json())


def test_parallel_matches_serial(model, stream, trained):
    _, msets = stream
    a = run_timestep(model, msets[430], trained)
    b = run_timestep(model, msets[430], trained, HierarchyConfig(workers=3))
    assert a.to_json() == b.to_json()


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-8, 1.0), st.floats(0.0, 10.0), st.floats(0.0, 10.0), st.floats(0.0, 5.0))
def test_confidence_monotone(var, tde_a, tde_b, kappa):
    lo, hi = sorted((tde_a, tde_b))
    assert confidence_variance(var, hi, kappa) >= confidence_variance(var, lo, kappa)
    assert confidence_variance(var, 0.0, kappa) == var


def test_untrusted_module_has_no_influence(model, stream, trained):
    _, msets = stream
    mods = dict(trained)
    low = mods[0].tde_ema
    try:
        mods[0].tde_ema = 1e14
        a = run_timestep(model, msets[440], mods, HierarchyConfig(max_iter=1))
        shifted = {**a.boundary, 0: BoundaryUp(a.boundary[0].p + 0.5, a.boundary[0].q, *a.boundary[0][2:])}
        meas = coordinator._primary_measurements(model, msets[440], mods, shifted, HierarchyConfig())
        weights = [1.0 / m.variance for m in meas if m.kind is Kind.XFMR_P]
        assert weights[0] < 1e-10 * min(weights[1:])
        s1 = wls_solve(model.primary.model, coordinator._primary_measurements(model, msets[440], mods, a.boundary,
                                                                              HierarchyConfig()))
        s2 = wls_solve(model.primary.model, meas)
        assert abs(s1.objective - s2.objective) < 1e-6 * max(s1.objective, 1.0)
        assert np.max(np.abs(s1.voltages - s2.voltages)) < 1e-8
    finally:
        mods[0].tde_ema = low


def test_oscillation_reported(model, stream, trained, monkeypatch):
    _, msets = stream
    real = coordinator.infer_module
    calls = {"n": 0}

    def swing(module, mset, v_n, s_base):
        inp, st_, b, dt = real(module, mset, v_n, s_base)
        k = calls["n"] // len(trained)
        calls["n"] += 1
        # confident boundary reports that swing further apart every iteration
        off = 0.05 * (k + 1) * (-1) ** k
        return inp, st_, BoundaryUp(b.p + off, b.q, 1e-8, 1e-8), dt

    monkeypatch.setattr(coordinator, "infer_module", swing)
    res = run_timestep(model, msets[450], trained)
    assert res.status == OSCILLATION
    assert res.iterations < 20
    dv = res.dv_history
    assert dv[-4] <= dv[-3] <= dv[-2] <= dv[-1]


def test_wls_failure_carries_iteration(model, stream, trained):
    _, msets = stream
    cfg = HierarchyConfig(wls=WlsConfig(max_iter=1))
    with pytest.raises(StageAError) as info:
        run_timestep(model, msets[5], trained, cfg)
    assert info.value.iteration == 1
    assert "iteration 1" in str(info.value)


def test_offline_update_empty():
    assert run_offline_update({}, []) == []


def test_offline_update_without_perturbation(model, stream):
    truth, msets = stream
    mods = {0: make_modules(model, u_max=0.0, u_floor=0.0)[0]}
    full = make_modules(model)
    for sid, m in full.items():
        if sid in mods:
            full[sid] = mods[sid]
    theta = mods[0].policy.mean_net.params.copy()
    ctx = list(estimate_stream(model, msets[:20], full))
    reports = run_offline_update(mods, ctx)
    assert len(reports) == 20 and all(set(r) == {0} for r in reports)
    assert np.array_equal(mods[0].policy.mean_net.params, theta)


def test_offline_update_checkpoints_and_isolates_failures(model, stream, caplog):
    _, msets = stream
    mods = make_modules(model)
    ctx = list(estimate_stream(model, msets[:6], mods))
    ctx[2].inputs[1] = None  # a broken context for one module only
    seen = []
    reports = run_offline_update(mods, ctx, checkpoint=lambda m, n: seen.append(n), checkpoint_every=2)
    assert seen == [2, 4, 6]
    assert reports[2][1].skipped
    assert not reports[2][0].skipped
    assert "module 1" in caplog.text


def test_results_jsonl(tmp_path, model, stream, trained):
    _, msets = stream
    res = list(estimate_stream(model, msets[400:403], trained))
    write_results_jsonl(tmp_path / "a.jsonl", res)
    write_results_jsonl(tmp_path / "b.jsonl", list(estimate_stream(model, msets[400:403], trained)))
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    rows = [json.loads(line) for line in open(tmp_path / "a.jsonl")]
    assert [r["t"] for r in rows] == [400, 401, 402]
    assert len(rows[0]["v_re"]) == model.n_nodes
    assert len(rows[0]["i_re"]) == len(rows[0]["i_im"]) == model.n_branches


def test_switch_file_parsing():
    ops = parse_switch_ops("# swap\nopen 2\nclose 1 3 0.01 0.02\n")
    assert ops == [SwitchOp("open", branch=2), SwitchOp("close", from_node=1, to_node=3, r=0.01, x=0.02)]
    with pytest.raises(ValueError, match="line 1"):
        parse_switch_ops("toggle 3")
    with pytest.raises(ValueError, match="line 2"):
        parse_switch_ops("open 1\nclose 1 2 x 0.1")


def test_identity_change(model):
    assert apply_topology_change(model, []) is model


def test_branch_swap_gives_valid_tree(model):
    new = apply_topology_change(model, parse_switch_ops("open 2\nclose 1 3 0.01 0.02"))
    assert new.n_branches == model.n_branches
    assert new.parent_branch[3] == 2
    assert new.branches[2].from_node == 1 and new.branches[2].to_node == 3
    for s in model.secondaries:
        assert np.array_equal(new.circuits[s.id].branches, model.circuits[s.id].branches)
    # the estimator runs unchanged on the new primary
    res = run_timestep(new, zero_load_set(new), zero_modules(new))
    assert res.converged


def test_invalid_changes(model):
    with pytest.raises(FeederValidationError):
        apply_topology_change(model, parse_switch_ops("open 4\nclose 3 4 0.01 0.01"))
    with pytest.raises(FeederValidationError):
        apply_topology_change(model, parse_switch_ops("open 4"))
    with pytest.raises(KeyError):
        apply_topology_change(model, parse_switch_ops("open 99\nclose 1 3 0.01 0.01"))
    sec_branch = model.secondaries[0].branches[1]
    with pytest.raises(FeederValidationError):
        apply_topology_change(model, [SwitchOp("open", branch=sec_branch)])
    lv = model.secondaries[0].nodes[0]
    with pytest.raises(FeederValidationError):
        apply_topology_change(model, parse_switch_ops(f"open 2\nclose 1 {lv} 0.01 0.01"))
