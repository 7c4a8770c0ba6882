"""Accuracy metrics, the monolithic WLS baseline and timing harness."""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .grid import FeederModel, Role
from .scenario import GroundTruth, MeasurementSet
from .wls import Kind, Measurement, WlsConfig, wls_solve


class MetricError(ValueError):
    pass


def mape(estimates, actuals, guard: float = 1e-9, return_excluded: bool = False):
    """Mean absolute percentage error, 100 * mean |actual - estimate| / |actual|.

    Entries with |actual| < ``guard`` are left out (and counted).
    """
    e = np.asarray(estimates, dtype=float).ravel()
    a = np.asarray(actuals, dtype=float).ravel()
    if e.shape != a.shape:
        raise MetricError(f"length mismatch: {e.size} estimates vs {a.size} actuals")
    if a.size == 0:
        raise MetricError("mape of an empty series")
    keep = np.abs(a) >= guard
    excluded = int(a.size - keep.sum())
    if not keep.any():
        raise MetricError("every actual value is below the guard; mape undefined")
    val = 100.0 * float(np.mean(np.abs((a[keep] - e[keep]) / a[keep])))
    return (val, excluded) if return_excluded else val


def angle_mae(est_voltages, true_voltages) -> float:
    """Mean absolute phase-angle error in radians."""
    d = np.angle(np.asarray(est_voltages) * np.conj(np.asarray(true_voltages)))
    return float(np.mean(np.abs(d)))


@dataclass
class Accuracy:
    v_mag_mape: float
    angle_mape: float
    angle_mae_rad: float
    current_mape: float
    n_values: int
    excluded_angles: int
    excluded_currents: int


def accuracy(est_v: np.ndarray, est_i: np.ndarray, truth: GroundTruth, rows: slice | Sequence[int] = slice(None),
             root: int = 0) -> Accuracy:
    """Compare stacked (T, N) voltage and (T, B) current estimates with the truth.

    The substation node is left out of the angle statistics (its angle is the
    reference and always zero).
    """
    tv, ti = truth.voltages[rows], truth.currents[rows]
    keep = np.ones(tv.shape[1], dtype=bool)
    keep[root] = False
    vm = mape(np.abs(est_v), np.abs(tv))
    am, ex_a = _mape_or_nan(np.angle(est_v[:, keep]), np.angle(tv[:, keep]))
    cm, ex_i = _mape_or_nan(np.abs(est_i), np.abs(ti))
    return Accuracy(vm, am, angle_mae(est_v[:, keep], tv[:, keep]), cm, int(tv.size), ex_a, ex_i)


def _mape_or_nan(est, act):
    # angles and currents are all zero on an unloaded feeder
    try:
        return mape(est, act, return_excluded=True)
    except MetricError:
        return float("nan"), int(np.size(act))


def per_step_mape(est_v: np.ndarray, true_v: np.ndarray) -> np.ndarray:
    """Voltage-magnitude MAPE of every timestep (row)."""
    a = np.abs(true_v)
    return 100.0 * np.mean(np.abs(a - np.abs(est_v)) / a, axis=1)


def mean_and_se(samples) -> tuple[float, float]:
    x = np.asarray(samples, dtype=float)
    se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else float("nan")
    return float(x.mean()), se


def trend_holds(values: Sequence[float], errors: Sequence[float]) -> tuple[bool, bool]:
    """Check an observability sweep ordered by rising meter penetration.

    Returns (last strictly below first, every step non-increasing within one
    pooled standard error).
    """
    strict = values[-1] < values[0]
    steps = all(b <= a + math.hypot(ea, eb) for a, b, ea, eb in zip(values, values[1:], errors, errors[1:]))
    return strict, steps


# ---------------------------------------------------------------------------
# monolithic baseline


@dataclass
class MonolithicConfig:
    """Pseudo-measurement settings for the single-layer estimator."""

    power_factor: float = 0.95
    pseudo_rel_sigma: float = 0.5
    pseudo_min_sigma: float = 0.005
    zero_injection_var: float = 1e-10
    meter_v_max_error: float = 0.03
    meter_e_max_error: float = 0.03
    wls: WlsConfig = field(default_factory=WlsConfig)


def monolithic_measurements(model: FeederModel, mset: MeasurementSet, config: MonolithicConfig | None = None):
    """Measurements for one WLS over the whole feeder.

    Metered customers give P (from energy) and |V|; their Q and the P/Q of
    unmetered customers are pseudo-measurements built from the mean metered
    power with a large variance.  Junctions and transformer nodes carry
    zero-injection rows.
    """
    cfg = config or MonolithicConfig()
    s_base = model.base.s_base_va
    tan_phi = math.tan(math.acos(cfg.power_factor))
    meas = list(mset.scada)
    p_met = {n: mset.meter_power_pu(n, s_base) for n in mset.meters}
    p_typ = float(np.mean(list(p_met.values()))) if p_met else 0.0
    sig_v = cfg.meter_v_max_error / 3.0
    for c in model.customers:
        if c.node in mset.meters:
            p = p_met[c.node]
            meas.append(Measurement(Kind.P_INJ, c.node, p, max((cfg.meter_e_max_error / 3.0 * p) ** 2, 1e-10)))
            meas.append(Measurement(Kind.V_MAG, c.node, mset.meters[c.node].v_mag, sig_v ** 2))
            q, sq = p * tan_phi, max(cfg.pseudo_rel_sigma * abs(p * tan_phi), cfg.pseudo_min_sigma)
            meas.append(Measurement(Kind.Q_INJ, c.node, q, sq ** 2))
        else:
            sp = max(cfg.pseudo_rel_sigma * abs(p_typ), cfg.pseudo_min_sigma)
            sq = max(cfg.pseudo_rel_sigma * abs(p_typ * tan_phi), cfg.pseudo_min_sigma)
            meas.append(Measurement(Kind.P_INJ, c.node, p_typ, sp ** 2))
            meas.append(Measurement(Kind.Q_INJ, c.node, p_typ * tan_phi, sq ** 2))
    for node in model.nodes:
        if node.role in (Role.PRIMARY_JUNCTION, Role.TRANSFORMER, Role.SECONDARY_JUNCTION):
            meas.append(Measurement(Kind.P_INJ, node.id, 0.0, cfg.zero_injection_var))
            meas.append(Measurement(Kind.Q_INJ, node.id, 0.0, cfg.zero_injection_var))
    return meas


def run_monolithic(model: FeederModel, mset: MeasurementSet, config: MonolithicConfig | None = None, x0=None):
    cfg = config or MonolithicConfig()
    return wls_solve(model, monolithic_measurements(model, mset, cfg), cfg.wls, x0=x0)


# ---------------------------------------------------------------------------
# timing


def time_calls(fn, repeats: int) -> list[float]:
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def summarize(samples: Sequence[float]) -> dict[str, float]:
    if not samples:
        return {"n": 0, "median": float("nan"), "mean": float("nan"), "p95": float("nan")}
    s = sorted(samples)
    return {"n": len(s), "median": statistics.median(s), "mean": statistics.fmean(s),
            "p95": s[min(len(s) - 1, int(0.95 * len(s)))]}


@dataclass
class BenchReport:
    accuracy: Accuracy
    baseline_accuracy: Accuracy | None
    timings: dict[str, list[float]]
    iterations: list[int]
    statuses: dict[str, int]

    @property
    def speedup(self) -> float:
        h = summarize(self.timings.get("pipeline", []))["median"]
        m = summarize(self.timings.get("monolithic", []))["median"]
        return m / h if h > 0 else float("nan")

    def mape_rows(self):
        rows = []
        for name, acc in (("hierarchical", self.accuracy), ("monolithic", self.baseline_accuracy)):
            if acc is None:
                continue
            rows += [(name, "v_mag_pct", acc.v_mag_mape), (name, "angle_pct", acc.angle_mape),
                     (name, "angle_mae_rad", acc.angle_mae_rad), (name, "current_pct", acc.current_mape)]
        return rows


def write_mape_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["estimator", "quantity", "value"])
        for r in rows:
            w.writerow([r[0], r[1], repr(float(r[2]))])


def write_timing_csv(path, timings: dict[str, list[float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "call", "seconds"])
        for stage in sorted(timings):
            for i, s in enumerate(timings[stage]):
                w.writerow([stage, i, repr(float(s))])
