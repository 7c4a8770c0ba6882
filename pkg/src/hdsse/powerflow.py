"""Forward sweep and ladder (backward/forward sweep) power flow for radial feeders.

Branch currents travel as a real state vector laid out
``[I_re(b0), I_im(b0), I_re(b1), ...]``.  Injections follow the load
convention: positive P/Q is consumption, negative is generation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .grid import FeederModel


class PowerFlowError(RuntimeError):
    pass


@dataclass(frozen=True)
class PowerInjection:
    p: float
    q: float

    @property
    def s(self) -> complex:
        return complex(self.p, self.q)


def pack_currents(currents) -> np.ndarray:
    """Complex branch currents -> interleaved real state vector."""
    currents = np.asarray(currents, dtype=complex)
    x = np.empty(currents.shape[:-1] + (2 * currents.shape[-1],))
    x[..., 0::2] = currents.real
    x[..., 1::2] = currents.imag
    return x


def unpack_currents(state) -> np.ndarray:
    state = np.asarray(state, dtype=float)
    return state[..., 0::2] + 1j * state[..., 1::2]


def forward_sweep(model: FeederModel, root_voltage: complex, branch_currents) -> np.ndarray:
    """Node voltages from the root voltage and the branch currents.

    ``branch_currents`` is either the real state vector (length 2*B) or a
    complex array of length B.  Returns a complex array indexed by node id.
    """
    cur = np.asarray(branch_currents)
    if np.iscomplexobj(cur):
        if cur.shape[-1] != model.n_branches:
            raise ValueError(f"expected {model.n_branches} complex currents, got {cur.shape[-1]}")
    else:
        if cur.shape[-1] != 2 * model.n_branches:
            raise ValueError(f"state length {cur.shape[-1]} != 2 x {model.n_branches} branches")
        cur = unpack_currents(cur)
    drops = cur * model.z
    return root_voltage - drops @ model.path_matrix.T


def _injection_array(model: FeederModel, injections) -> np.ndarray:
    if isinstance(injections, Mapping):
        s = np.zeros(model.n_nodes, dtype=complex)
        for n, inj in injections.items():
            if not 0 <= n < model.n_nodes:
                raise KeyError(f"injection at unknown node {n}")
            s[n] = inj.s if isinstance(inj, PowerInjection) else complex(inj)
        return s
    s = np.asarray(injections, dtype=complex)
    if s.shape != (model.n_nodes,):
        raise ValueError(f"injection array must have shape ({model.n_nodes},)")
    return s


def solve_powerflow(model: FeederModel, injections, root_voltage: complex = 1.0 + 0j,
                    tol: float = 1e-8, max_iter: int = 100):
    """Ladder iteration with constant-power loads.

    Returns ``(voltages, branch_currents)`` as complex arrays indexed by node
    and branch id.  The root injection is ignored (the root is the slack).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    s = _injection_array(model, injections).copy()
    s[model.root] = 0.0
    if not np.all(np.isfinite(s)):
        raise ValueError("injections must be finite")
    P = model.path_matrix
    z = model.z
    v = np.full(model.n_nodes, root_voltage, dtype=complex)
    for it in range(1, max_iter + 1):
        if np.any(v == 0):
            raise PowerFlowError(f"zero voltage encountered at iteration {it}")
        i_load = np.conj(s / v)
        i_branch = P.T @ i_load
        v_new = root_voltage - P @ (z * i_branch)
        change = np.max(np.abs(v_new - v)) if v.size else 0.0
        v = v_new
        if not np.all(np.isfinite(v)):
            raise PowerFlowError(f"voltages diverged at iteration {it}")
        if change < tol:
            break
    else:
        raise PowerFlowError(f"no convergence within {max_iter} iterations (last change {change:.3e})")
    if np.any(v == 0):
        raise PowerFlowError("zero voltage at the solution")
    # final currents from the converged voltages, voltages re-swept so both are consistent
    i_branch = P.T @ np.conj(s / v)
    v = root_voltage - P @ (z * i_branch)
    return v, i_branch


def kcl_residual(model: FeederModel, voltages, branch_currents, injections) -> np.ndarray:
    """|net branch current into n - conj(S_n / V_n)| for every non-root node."""
    s = _injection_array(model, injections)
    net = model.incidence @ np.asarray(branch_currents, dtype=complex)
    res = np.abs(net - np.conj(s / voltages))
    res[model.root] = 0.0
    return res


def energy_balance(model: FeederModel, voltages, branch_currents, injections) -> complex:
    """Power entering at the root minus (loads + series losses)."""
    s = _injection_array(model, injections).copy()
    s[model.root] = 0.0
    i = np.asarray(branch_currents, dtype=complex)
    head = [b for b in model.children[model.root]]
    s_in = voltages[model.root] * np.conj(i[head].sum())
    losses = np.sum(model.z * np.abs(i) ** 2)
    return s_in - s.sum() - losses
