"""Closed-loop coupling of the primary WLS estimator and the secondary modules.

Per timestep (Stage A) the primary estimate hands transformer voltages down,
every module infers its circuit and reports the power drawn at its
transformer with a variance, and the primary estimate is redone with those
reports as pseudo-measurements until the transformer voltages settle.
Stage B (``run_offline_update``) then trains the modules on the settled
contexts.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .actor_critic import (AcInput, AcModule, BoundaryUp, TrainReport, boundary_up, circuit_voltages, infer_states,
                           make_input, state_variance, train_step)
from .grid import Branch, FeederModel, FeederValidationError, Role, make_feeder
from .powerflow import unpack_currents
from .scenario import MeasurementSet
from .wls import Kind, Measurement, WlsConfig, WlsError, WlsSolution, wls_solve

log = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITER = "max_iter"
OSCILLATION = "oscillation"


class StageAError(RuntimeError):
    def __init__(self, msg, iteration: int):
        super().__init__(msg)
        self.iteration = iteration


@dataclass
class HierarchyConfig:
    max_iter: int = 20
    eps_v: float = 1e-4
    kappa: float = 1.0
    wls: WlsConfig = field(default_factory=WlsConfig)
    zero_injection_var: float = 1e-10
    cold_var: float = 1e-2
    cold_power_factor: float = 0.95
    workers: int = 1

    def __post_init__(self):
        if self.eps_v <= 0:
            raise ValueError("eps_v must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")


@dataclass
class TimestepResult:
    t: int
    wls: WlsSolution
    states: dict[int, np.ndarray]
    boundary: dict[int, BoundaryUp]
    inputs: dict[int, AcInput]
    v_n: dict[int, complex]
    iterations: int
    status: str
    dv_history: list[float]
    timings: dict[str, float]
    module_times: list[float]
    voltages: np.ndarray  # full network, by global node id
    currents: np.ndarray  # full network, by global branch id

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED

    def to_json(self) -> dict:
        """Deterministic part of the result (timings left out)."""
        return {
            "t": self.t,
            "status": self.status,
            "iterations": self.iterations,
            "objective": _num(self.wls.objective),
            "dv": [_num(d) for d in self.dv_history],
            "v_re": [_num(v) for v in self.voltages.real],
            "v_im": [_num(v) for v in self.voltages.imag],
            "i_re": [_num(i) for i in self.currents.real],
            "i_im": [_num(i) for i in self.currents.imag],
            "boundary": {str(k): [_num(x) for x in b] for k, b in sorted(self.boundary.items())},
        }


def _num(x) -> float | None:
    x = float(x)
    return x if math.isfinite(x) else None


def confidence_variance(var: float, tde_ema: float, kappa: float) -> float:
    """Inflate a boundary variance by the module's recent |TDE|."""
    return var * (1.0 + kappa * abs(tde_ema))


def cold_boundary(module: AcModule, mset: MeasurementSet, s_base_va: float, config: HierarchyConfig) -> BoundaryUp:
    p = sum(mset.meter_power_pu(n, s_base_va) for n in module.metered)
    q = p * math.tan(math.acos(config.cold_power_factor))
    return BoundaryUp(p, q, config.cold_var, config.cold_var)


def _primary_measurements(model: FeederModel, mset: MeasurementSet, modules, boundary, config) -> list[Measurement]:
    prim = model.primary
    loc = prim.local_node
    meas = [Measurement(m.kind, loc[m.location], m.value, m.variance) for m in mset.scada]
    for sid, mod in modules.items():
        b = boundary[sid]
        n = loc[mod.circuit.transformer_node]
        vp = max(confidence_variance(b.var_p, mod.tde_ema, config.kappa), config.wls.var_floor)
        vq = max(confidence_variance(b.var_q, mod.tde_ema, config.kappa), config.wls.var_floor)
        meas.append(Measurement(Kind.XFMR_P, n, b.p, vp))
        meas.append(Measurement(Kind.XFMR_Q, n, b.q, vq))
    for node in prim.model.nodes:
        if node.role is Role.PRIMARY_JUNCTION:
            meas.append(Measurement(Kind.P_INJ, node.id, 0.0, config.zero_injection_var))
            meas.append(Measurement(Kind.Q_INJ, node.id, 0.0, config.zero_injection_var))
    return meas


def infer_module(module: AcModule, mset, v_n, s_base):
    """One module's share of a Stage A iteration; also returns its wall time."""
    t0 = time.perf_counter()
    inp = make_input(module, mset, v_n, s_base)
    st = infer_states(module, inp, "mean")
    var = state_variance(module, inp)
    b = boundary_up(module, v_n, st, var)
    return inp, st, b, time.perf_counter() - t0


def run_timestep(model: FeederModel, mset: MeasurementSet, modules: Mapping[int, AcModule],
                 config: HierarchyConfig | None = None, previous: TimestepResult | None = None) -> TimestepResult:
    config = config or HierarchyConfig()
    t_start = time.perf_counter()
    s_base = model.base.s_base_va
    prim = model.primary
    missing = {s.id for s in model.secondaries} - set(modules)
    if missing:
        raise KeyError(f"no module for secondary circuits {sorted(missing)}")

    v_root = next((m.value for m in mset.scada if m.kind is Kind.V_MAG and m.location == model.root), 1.0)
    if previous is not None:
        boundary = dict(previous.boundary)
        v_prev = dict(previous.v_n)
        x0 = previous.wls.state if previous.wls.state.shape == (2 * prim.model.n_branches,) else None
    else:
        boundary = {sid: cold_boundary(m, mset, s_base, config) for sid, m in modules.items()}
        v_prev = {sid: complex(v_root) for sid in modules}
        x0 = None

    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    t_l1 = t_l2 = 0.0
    module_times: list[float] = []
    dv_hist: list[float] = []
    snapshots = []
    status = MAX_ITER
    try:
        for k in range(1, config.max_iter + 1):
            t0 = time.perf_counter()
            meas = _primary_measurements(model, mset, modules, boundary, config)
            try:
                sol = wls_solve(prim.model, meas, config.wls, x0=x0)
            except WlsError as exc:
                raise StageAError(f"stage A iteration {k}: {exc}", k) from exc
            x0 = sol.state
            loc = prim.local_node
            v_n = {sid: complex(sol.voltages[loc[m.circuit.transformer_node]]) for sid, m in modules.items()}
            t1 = time.perf_counter()
            t_l1 += t1 - t0

            jobs = [(sid, m, v_n[sid]) for sid, m in modules.items()]
            if pool is not None:
                outs = list(pool.map(lambda j: infer_module(j[1], mset, j[2], s_base), jobs))
            else:
                outs = [infer_module(m, mset, v, s_base) for _, m, v in jobs]
            inputs, states = {}, {}
            new_boundary = {}
            for (sid, _, _), (inp, st, b, dt) in zip(jobs, outs):
                inputs[sid], states[sid], new_boundary[sid] = inp, st, b
                module_times.append(dt)
            boundary = new_boundary
            t_l2 += time.perf_counter() - t1

            dv = max((abs(v_n[s] - v_prev[s]) for s in v_n), default=0.0)
            dv_hist.append(dv)
            snapshots.append((sol, states, boundary, inputs, v_n))
            if dv < config.eps_v:
                status = CONVERGED
                break
            if len(dv_hist) >= 4 and dv_hist[-1] >= dv_hist[-2] >= dv_hist[-3] >= dv_hist[-4]:
                status = OSCILLATION
                break
            v_prev = v_n
    finally:
        if pool is not None:
            pool.shutdown()

    if status == CONVERGED:
        sol, states, boundary, inputs, v_n = snapshots[-1]
    else:
        best = min(range(len(snapshots)), key=lambda i: snapshots[i][0].objective)
        sol, states, boundary, inputs, v_n = snapshots[best]
        log.warning("timestep %s: stage A ended with %s after %d iterations", mset.t, status, len(dv_hist))

    voltages, currents = assemble_network_state(model, sol, modules, states, v_n)
    total = time.perf_counter() - t_start
    return TimestepResult(mset.t, sol, states, boundary, inputs, v_n, len(dv_hist), status, dv_hist,
                          {"layer1": t_l1, "layer2": t_l2, "total": total}, module_times, voltages, currents)


def assemble_network_state(model: FeederModel, sol: WlsSolution, modules, states, v_n):
    """Full-network voltages and branch currents from both layers."""
    prim = model.primary
    V = np.empty(model.n_nodes, dtype=complex)
    I = np.empty(model.n_branches, dtype=complex)
    V[prim.nodes] = sol.voltages
    I[prim.branches] = unpack_currents(sol.state)
    for sid, m in modules.items():
        V[m.sub.nodes] = circuit_voltages(m, v_n[sid], states[sid])
        I[m.sub.branches] = unpack_currents(states[sid])
    return V, I


def estimate_stream(model: FeederModel, msets: Iterable[MeasurementSet], modules, config=None):
    """Run Stage A over a stream, warm-starting each timestep from the last."""
    prev = None
    for ms in msets:
        prev = run_timestep(model, ms, modules, config, prev)
        yield prev


def run_offline_update(modules: Mapping[int, AcModule], contexts: Iterable[TimestepResult],
                       checkpoint=None, checkpoint_every: int = 0) -> list[dict[int, TrainReport]]:
    """Stage B: one train_step per module per settled timestep.

    ``contexts`` may be a lazy stream (e.g. ``estimate_stream``), in which
    case Stage A of the next timestep already sees the updated parameters.
    ``checkpoint(modules, n_done)`` is called every ``checkpoint_every``
    timesteps when given.
    """
    reports = []
    for i, ctx in enumerate(contexts, start=1):
        step = {}
        for sid, mod in modules.items():
            if not mod.has_meters:
                continue
            try:
                step[sid] = train_step(mod, ctx.inputs[sid])
            except Exception as exc:  # one bad module must not stop the others
                log.error("timestep %s, module %s: training step failed: %s", ctx.t, sid, exc)
                step[sid] = TrainReport(float("nan"), float("nan"), float("nan"), True, str(exc))
        reports.append(step)
        if checkpoint is not None and checkpoint_every > 0 and i % checkpoint_every == 0:
            checkpoint(modules, i)
    return reports


def write_results_jsonl(path, results: Iterable[TimestepResult]) -> None:
    with open(path, "w") as fh:
        for r in results:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# topology changes


@dataclass(frozen=True)
class SwitchOp:
    """``open`` removes branch ``branch``; ``close`` adds a tie between two nodes."""

    action: str
    branch: int | None = None
    from_node: int | None = None
    to_node: int | None = None
    r: float = 0.0
    x: float = 0.0


def parse_switch_ops(text: str) -> list[SwitchOp]:
    """Lines ``open <branch>`` or ``close <from> <to> <r_pu> <x_pu>``; ``#`` comments."""
    ops = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "open" and len(tok) == 2:
                ops.append(SwitchOp("open", branch=int(tok[1])))
            elif tok[0] == "close" and len(tok) == 5:
                ops.append(SwitchOp("close", from_node=int(tok[1]), to_node=int(tok[2]),
                                    r=float(tok[3]), x=float(tok[4])))
            else:
                raise ValueError
        except ValueError:
            raise ValueError(f"line {lineno}: expected 'open <branch>' or 'close <from> <to> <r> <x>'") from None
    return ops


def load_switch_ops(path) -> list[SwitchOp]:
    return parse_switch_ops(Path(path).read_text())


def apply_topology_change(model: FeederModel, ops: Iterable[SwitchOp]) -> FeederModel:
    """Open/close primary branches; closed ties reuse the ids freed by opened branches.

    Secondary circuits are left untouched, so their branch ids and the
    modules trained on them stay valid.
    """
    ops = list(ops)
    prim = set(model.primary_nodes)
    branches = {b.id: b for b in model.branches}
    freed = []
    for op in ops:
        if op.action != "open":
            continue
        b = branches.get(op.branch)
        if b is None:
            raise KeyError(f"cannot open unknown branch {op.branch}")
        if b.from_node not in prim or b.to_node not in prim:
            raise FeederValidationError(f"branch {b.id} is not a primary branch")
        del branches[b.id]
        freed.append(b.id)
    closes = [op for op in ops if op.action == "close"]
    freed.sort()
    next_id = model.n_branches
    for op in closes:
        for n in (op.from_node, op.to_node):
            if n not in prim:
                raise FeederValidationError(f"tie endpoint {n} is not a primary node")
        if op.r < 0:
            raise FeederValidationError("tie resistance must be >= 0")
        bid = freed.pop(0) if freed else next_id
        if bid == next_id:
            next_id += 1
        branches[bid] = Branch(bid, op.from_node, op.to_node, op.r, op.x)
    if freed:
        raise FeederValidationError(f"opening branches {freed} without closing ties disconnects the feeder")
    if not ops:
        return model
    new = make_feeder(model.nodes, [branches[i] for i in sorted(branches)], model.root, model.secondaries, model.base)
    # every secondary circuit must still hang off its transformer unchanged
    for s in model.secondaries:
        if model.circuits[s.id].model.branches != new.circuits[s.id].model.branches:
            raise FeederValidationError(f"switching altered secondary circuit {s.id}")
    return new
