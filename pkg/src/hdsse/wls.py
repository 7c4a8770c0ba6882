"""Weighted-least-squares branch-current state estimation (BCSE).

The state is the interleaved real/imaginary branch-current vector of a radial
network.  Node voltages are re-swept from the current iterate at the start of
every Gauss-Newton step and held fixed while the injection rows are
linearised, which makes those rows constant for the step.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import lapack

from .grid import FeederModel, Role
from .powerflow import forward_sweep, unpack_currents

log = logging.getLogger(__name__)


class WlsError(RuntimeError):
    pass


class WlsObservabilityError(WlsError):
    def __init__(self, msg, condition=np.inf):
        super().__init__(msg)
        self.condition = condition


class WlsConvergenceError(WlsError):
    def __init__(self, msg, solution=None):
        super().__init__(msg)
        self.solution = solution


class SingularJacobianError(WlsError):
    """A current-magnitude row was evaluated at a zero branch current."""

    def __init__(self, rows):
        super().__init__(f"current-magnitude rows {list(rows)} are singular at zero current")
        self.rows = list(rows)


class Kind(str, enum.Enum):
    P_INJ = "p_inj"
    Q_INJ = "q_inj"
    V_MAG = "v_mag"
    I_MAG = "i_mag"
    XFMR_P = "xfmr_p"
    XFMR_Q = "xfmr_q"


_BRANCH_KINDS = (Kind.I_MAG,)


@dataclass(frozen=True)
class Measurement:
    kind: Kind
    location: int
    value: float
    variance: float

    def __post_init__(self):
        if not (self.variance > 0 and np.isfinite(self.variance)):
            raise ValueError(f"measurement variance must be positive and finite, got {self.variance}")
        if not np.isfinite(self.value):
            raise ValueError("measurement value must be finite")


@dataclass(frozen=True)
class SensorSpec:
    """Nominal sensor accuracy; the stated max error is read as 3 sigma."""

    max_error: float
    full_scale: float = 1.0

    @property
    def sigma(self) -> float:
        return self.max_error * abs(self.full_scale) / 3.0


@dataclass
class WlsConfig:
    delta: float = 1e-6
    max_iter: int = 50
    var_floor: float = 1e-10
    init: str = "zero"  # or "random"
    seed: int = 0

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.var_floor <= 0:
            raise ValueError("var_floor must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class WlsSolution:
    state: np.ndarray
    iterations: int
    objective: float
    voltages: np.ndarray
    transformer_voltages: dict[int, complex]
    objective_history: list[float] = field(default_factory=list)
    condition: float = float("nan")
    converged: bool = True


class _Layout:
    """Measurement indices grouped by the kind of function they evaluate."""

    def __init__(self, model: FeederModel, measurements: Sequence[Measurement]):
        self.m = len(measurements)
        kinds = [m.kind for m in measurements]
        locs = np.array([m.location for m in measurements], dtype=int)
        self.z = np.array([m.value for m in measurements], dtype=float)
        self.var = np.array([m.variance for m in measurements], dtype=float)
        for k, loc in zip(kinds, locs):
            limit = model.n_branches if k in _BRANCH_KINDS else model.n_nodes
            if not 0 <= loc < limit:
                what = "branch" if k in _BRANCH_KINDS else "node"
                raise KeyError(f"{k.value} measurement references unknown {what} {loc}")

        def sel(*ks):
            rows = np.array([i for i, k in enumerate(kinds) if k in ks], dtype=int)
            return rows, locs[rows]

        self.p_rows, self.p_nodes = sel(Kind.P_INJ, Kind.XFMR_P)
        self.q_rows, self.q_nodes = sel(Kind.Q_INJ, Kind.XFMR_Q)
        self.v_rows, self.v_nodes = sel(Kind.V_MAG)
        self.i_rows, self.i_branches = sel(Kind.I_MAG)
        A = model.incidence
        self.A_p = A[self.p_nodes]
        self.A_q = A[self.q_nodes]
        self.P_v = model.path_matrix[self.v_nodes]


def _h(model, layout: _Layout, state, aux_voltages) -> np.ndarray:
    cur = unpack_currents(state)
    h = np.empty(layout.m)
    if layout.p_rows.size:
        v = aux_voltages[layout.p_nodes]
        h[layout.p_rows] = (v * np.conj(layout.A_p @ cur)).real
    if layout.q_rows.size:
        v = aux_voltages[layout.q_nodes]
        h[layout.q_rows] = (v * np.conj(layout.A_q @ cur)).imag
    if layout.v_rows.size:
        swept = forward_sweep(model, aux_voltages[model.root], cur)
        h[layout.v_rows] = np.abs(swept[layout.v_nodes])
    if layout.i_rows.size:
        h[layout.i_rows] = np.abs(cur[layout.i_branches])
    return h


def _H(model, layout: _Layout, state, aux_voltages, regularize=False) -> np.ndarray:
    cur = unpack_currents(state)
    H = np.zeros((layout.m, 2 * model.n_branches))
    if layout.p_rows.size:
        v = aux_voltages[layout.p_nodes][:, None]
        H[layout.p_rows, 0::2] = v.real * layout.A_p
        H[layout.p_rows, 1::2] = v.imag * layout.A_p
    if layout.q_rows.size:
        v = aux_voltages[layout.q_nodes][:, None]
        H[layout.q_rows, 0::2] = v.imag * layout.A_q
        H[layout.q_rows, 1::2] = -v.real * layout.A_q
    if layout.v_rows.size:
        swept = forward_sweep(model, aux_voltages[model.root], cur)[layout.v_nodes]
        mag = np.abs(swept)[:, None]
        c = np.conj(swept)[:, None] * model.z[None, :]
        H[layout.v_rows, 0::2] = -layout.P_v * c.real / mag
        H[layout.v_rows, 1::2] = layout.P_v * c.imag / mag
    if layout.i_rows.size:
        ib = cur[layout.i_branches]
        mag = np.abs(ib)
        zero = mag == 0
        if zero.any() and not regularize:
            raise SingularJacobianError(layout.i_rows[zero])
        safe = np.where(zero, 1.0, mag)
        re = np.where(zero, 1.0, ib.real / safe)
        im = np.where(zero, 0.0, ib.imag / safe)
        H[layout.i_rows, 2 * layout.i_branches] = re
        H[layout.i_rows, 2 * layout.i_branches + 1] = im
    return H


def measurement_function(model: FeederModel, state, aux_voltages, measurements) -> np.ndarray:
    """Evaluate h(x).  Injection rows use ``aux_voltages``; |V| rows sweep the state."""
    return _h(model, _Layout(model, measurements), np.asarray(state, float), np.asarray(aux_voltages))


def jacobian(model: FeederModel, state, aux_voltages, measurements) -> np.ndarray:
    """dh/dx with ``aux_voltages`` held constant.

    Raises SingularJacobianError when a current-magnitude row sits at zero
    current; the caller decides whether to drop or regularise those rows.
    """
    return _H(model, _Layout(model, measurements), np.asarray(state, float), np.asarray(aux_voltages))


def assemble_weights(sensor_specs: Sequence[SensorSpec], boundary_variances=(), var_floor: float = 1e-10):
    """Variances in measurement-block order: SCADA, then all p_s, then all q_s.

    ``boundary_variances`` is a sequence of (var_p, var_q) pairs from layer 2.
    The WLS weight of each entry is the reciprocal of the returned variance.
    """
    scada = [max(s.sigma ** 2, var_floor) for s in sensor_specs]
    bv = list(boundary_variances)
    var_p = [max(float(p), var_floor) if np.isfinite(p) else 1.0 / var_floor for p, _ in bv]
    var_q = [max(float(q), var_floor) if np.isfinite(q) else 1.0 / var_floor for _, q in bv]
    return scada + var_p + var_q


def _root_voltage(model, measurements) -> complex:
    for m in measurements:
        if m.kind is Kind.V_MAG and m.location == model.root:
            return complex(m.value)
    return 1.0 + 0j


def _transformer_nodes(model: FeederModel) -> list[int]:
    return [n.id for n in model.nodes if n.role is Role.TRANSFORMER]


def wls_solve(model: FeederModel, measurements: Sequence[Measurement], config: WlsConfig | None = None,
              x0=None, root_voltage: complex | None = None) -> WlsSolution:
    """Gauss-Newton WLS: x += G^-1 H^T W (z - h(x)),  G = H^T W H.

    The substation voltage is pinned at its measured magnitude (angle 0)
    unless ``root_voltage`` is given.
    """
    config = config or WlsConfig()
    n_state = 2 * model.n_branches
    layout = _Layout(model, measurements)
    if layout.m < n_state:
        raise WlsObservabilityError(f"{layout.m} measurements for {n_state} states: network is unobservable")
    v0 = _root_voltage(model, measurements) if root_voltage is None else complex(root_voltage)
    var = np.maximum(layout.var, config.var_floor)
    w = 1.0 / var
    if x0 is not None:
        x = np.array(x0, dtype=float)
        if x.shape != (n_state,):
            raise ValueError(f"x0 must have length {n_state}")
    elif config.init == "random":
        x = np.random.default_rng(config.seed).normal(scale=1e-2, size=n_state)
    else:
        x = np.zeros(n_state)

    history = []
    cond = float("nan")
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        v = forward_sweep(model, v0, x)
        r = layout.z - _h(model, layout, x, v)
        history.append(float(r @ (w * r)))
        H = _H(model, layout, x, v, regularize=True)
        Hw = H * w[:, None]
        G = H.T @ Hw
        scale = max(1.0, float(np.max(np.abs(G))))
        asym = float(np.max(np.abs(G - G.T))) if G.size else 0.0
        if asym > 1e-10 * scale:
            raise WlsError(f"gain matrix lost symmetry ({asym:.2e})")
        G = 0.5 * (G + G.T)
        c, info = lapack.dpotrf(G, lower=1, clean=1)
        if info != 0:
            raise WlsObservabilityError(
                f"gain matrix is not positive definite (leading minor {info}); network unobservable",
                condition=_cond(G),
            )
        anorm = float(np.max(np.sum(np.abs(G), axis=0)))
        rcond, _ = lapack.dpocon(c, anorm, uplo="L")
        cond = 1.0 / rcond if rcond > 0 else np.inf
        if rcond < 1e-15:
            raise WlsObservabilityError(f"gain matrix is ill-conditioned (cond ~ {cond:.2e})", condition=cond)
        dx, info = lapack.dpotrs(c, Hw.T @ r, lower=1)
        x = x + dx
        if np.max(np.abs(dx)) <= config.delta:
            converged = True
            break

    v = forward_sweep(model, v0, x)
    r = layout.z - _h(model, layout, x, v)
    obj = float(r @ (w * r))
    sol = WlsSolution(
        state=x,
        iterations=it,
        objective=obj,
        voltages=v,
        transformer_voltages={n: complex(v[n]) for n in _transformer_nodes(model)},
        objective_history=history,
        condition=cond,
        converged=converged,
    )
    if not converged:
        raise WlsConvergenceError(f"WLS did not converge within {config.max_iter} iterations", sol)
    return sol


def _cond(G) -> float:
    try:
        return float(np.linalg.cond(G))
    except np.linalg.LinAlgError:
        return float("inf")
