"""Synthetic loads, PV, ground truth and sensor readings for a feeder model.

Customer sizes and PV capacities are fixed by ``seed``; the time window is
``[offset, offset + timesteps)`` so training and test windows drawn with the
same seed describe the same customer population.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import truncnorm

from .grid import Customer, FeederModel, SecondaryCircuit
from .powerflow import PowerFlowError, solve_powerflow
from .wls import Kind, Measurement


@dataclass
class ScenarioConfig:
    timesteps: int = 96
    seed: int = 0
    offset: int = 0
    pv_penetration: float = 0.5
    meter_penetration: float | None = None  # None keeps the model's meter flags
    max_error_scada: float = 0.03
    max_error_meter_v: float = 0.03
    max_error_meter_e: float = 0.03
    interval_minutes: float = 15.0
    mean_peak_kw: float = 5.0
    size_sigma: float = 0.35
    peak_shift_hours: float = 0.75
    ar_phi: float = 0.9
    ar_sigma: float = 0.15
    power_factor: float = 0.95
    pf_spread: float = 0.02
    cloud_phi: float = 0.95
    cloud_sigma: float = 0.08

    def __post_init__(self):
        if self.timesteps < 0:
            raise ValueError("timesteps must be >= 0")
        for name in ("pv_penetration", "meter_penetration"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("max_error_scada", "max_error_meter_v", "max_error_meter_e"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def replace(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **kw)


def load_scenario_config(path, base: ScenarioConfig | None = None, **overrides) -> ScenarioConfig:
    """Read a ``[scenario]`` INI section; unknown keys are rejected.

    Keys missing from the file keep their value from ``base`` (or the
    defaults); non-None ``overrides`` win over both.
    """
    cp = configparser.ConfigParser()
    cp.read_string(Path(path).read_text())
    if "scenario" not in cp:
        raise ValueError(f"{path}: missing [scenario] section")
    fields = {f.name: f for f in dataclasses.fields(ScenarioConfig)}
    kw = dataclasses.asdict(base) if base is not None else {}
    for key, raw in cp["scenario"].items():
        if key not in fields:
            raise ValueError(f"{path}: unknown scenario key {key!r}")
        if key in ("timesteps", "seed", "offset"):
            kw[key] = int(raw)
        elif key == "meter_penetration" and raw.strip().lower() in ("", "none"):
            kw[key] = None
        else:
            kw[key] = float(raw)
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return ScenarioConfig(**kw)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def with_meters(model: FeederModel, penetration: float, seed: int = 0) -> FeederModel:
    """Copy of ``model`` with ``round(penetration * customers)`` meters.

    Customers are ranked by one seeded permutation, so higher penetrations
    meter a superset of the customers metered at lower ones.
    """
    customers = model.customers
    k = round_half_up(penetration * len(customers))
    order = np.random.default_rng([seed, 7]).permutation(len(customers))
    chosen = {customers[i].node for i in order[:k]}
    secs = tuple(
        SecondaryCircuit(s.id, s.transformer_node, s.nodes, s.branches,
                         tuple(Customer(c.node, c.node in chosen, c.has_pv) for c in s.customers))
        for s in model.secondaries
    )
    return FeederModel(model.nodes, model.branches, model.root, secs, model.base)


@dataclass
class Profiles:
    hours: np.ndarray  # (T,) hour of day
    customers: np.ndarray  # (C,) node ids
    p_load: np.ndarray  # (T, C) p.u.
    q_load: np.ndarray
    p_pv: np.ndarray

    @property
    def net(self) -> np.ndarray:
        """Complex net consumption per customer, (T, C)."""
        return (self.p_load - self.p_pv) + 1j * self.q_load

    def injections(self, n_nodes: int) -> np.ndarray:
        s = np.zeros((len(self.hours), n_nodes), dtype=complex)
        s[:, self.customers] = self.net
        return s


def _template(h):
    """Residential double-peak shape, peak close to 1."""
    return (0.3 + 0.35 * np.exp(-0.5 * ((h - 7.5) / 1.3) ** 2)
            + 0.7 * np.exp(-0.5 * ((h - 19.0) / 2.0) ** 2)
            + 0.7 * np.exp(-0.5 * ((h + 5.0) / 2.0) ** 2))  # evening peak seen from after midnight


def _clear_sky(h):
    x = (h % 24.0 - 6.0) / 12.0
    return np.where((x > 0) & (x < 1), np.sin(np.pi * np.clip(x, 0, 1)) ** 1.2, 0.0)


# PV is scaled against the aggregate peaks of the first week of the stream
CALIBRATION_DAYS = 7


def _ar1(rng, phi, sigma, shape, n):
    eps = rng.standard_normal((n, *shape))
    out = np.empty((n, *shape))
    stat = sigma / math.sqrt(1.0 - phi ** 2)
    if n:
        out[0] = eps[0] * stat
    for t in range(1, n):
        out[t] = phi * out[t - 1] + sigma * eps[t]
    return out, stat


def generate_profiles(model: FeederModel, config: ScenarioConfig) -> Profiles:
    """Per-customer load, reactive load and PV series in p.u.

    The series is a window ``[offset, offset + timesteps)`` of one seeded
    stream, so windows of the same seed are consistent with each other.
    PV is scaled so that the largest aggregate PV output over the first
    week equals ``pv_penetration`` times the largest aggregate load.
    """
    cfg = config
    customers = model.customers
    C = len(customers)
    nodes = np.array([c.node for c in customers], dtype=int)
    pop = np.random.default_rng([cfg.seed, 1])
    size = np.exp(pop.normal(-0.5 * cfg.size_sigma ** 2, cfg.size_sigma, C))
    shift = pop.normal(0.0, cfg.peak_shift_hours, C)
    pf = np.clip(pop.normal(cfg.power_factor, cfg.pf_spread, C), 0.8, 1.0)
    tan_phi = np.tan(np.arccos(pf))
    has_pv = np.array([c.has_pv for c in customers], dtype=bool)
    pv_cap = np.where(has_pv, size * pop.uniform(0.7, 1.3, C), 0.0)

    dt_h = cfg.interval_minutes / 60.0
    n_cal = max(1, int(round(CALIBRATION_DAYS * 24 / dt_h)))
    total = max(cfg.offset + cfg.timesteps, n_cal)
    noise = np.random.default_rng([cfg.seed, 2])
    ar, stat = _ar1(noise, cfg.ar_phi, cfg.ar_sigma, (C,), total)
    cloud, _ = _ar1(noise, cfg.cloud_phi, cfg.cloud_sigma, (), total)
    hours = (np.arange(total) * dt_h) % 24.0
    peak_pu = cfg.mean_peak_kw * 1e3 / model.base.s_base_va

    def window(sl):
        h = hours[sl]
        shape = _template((h[:, None] + shift[None, :]) % 24.0)
        p = peak_pu * size[None, :] * shape * np.exp(ar[sl] - 0.5 * stat ** 2)
        clear = np.clip(1.0 - np.abs(cloud[sl]), 0.2, 1.0)
        pv = _clear_sky(h)[:, None] * clear[:, None] * pv_cap[None, :]
        return h, p, pv

    _, p_cal, pv_cal = window(slice(0, n_cal))
    pv_peak = pv_cal.sum(axis=1).max()
    k = cfg.pv_penetration * p_cal.sum(axis=1).max() / pv_peak if pv_peak > 0 else 0.0

    h, p_load, pv_shape = window(slice(cfg.offset, cfg.offset + cfg.timesteps))
    return Profiles(h, nodes, p_load, p_load * tan_phi[None, :], k * pv_shape)


def pv_ratio(profiles: Profiles) -> float:
    """Largest aggregate PV output over largest aggregate load."""
    load = profiles.p_load.sum(axis=1).max()
    return float(profiles.p_pv.sum(axis=1).max() / load) if load > 0 else 0.0


@dataclass
class GroundTruth:
    voltages: np.ndarray  # (T, N) complex
    currents: np.ndarray  # (T, B) complex
    injections: np.ndarray  # (T, N) complex

    @property
    def timesteps(self) -> int:
        return self.voltages.shape[0]


def generate_truth(model: FeederModel, profiles: Profiles, root_voltage: complex = 1.0 + 0j,
                   tol: float = 1e-10) -> GroundTruth:
    s = profiles.injections(model.n_nodes)
    T = s.shape[0]
    V = np.empty((T, model.n_nodes), dtype=complex)
    I = np.empty((T, model.n_branches), dtype=complex)
    for t in range(T):
        try:
            V[t], I[t] = solve_powerflow(model, s[t], root_voltage, tol=tol)
        except PowerFlowError as exc:
            raise PowerFlowError(f"timestep {t}: {exc}") from exc
    return GroundTruth(V, I, s)


@dataclass(frozen=True)
class MeterReading:
    v_mag: float
    energy_kwh: float


@dataclass
class MeasurementSet:
    t: int
    scada: tuple[Measurement, ...]
    meters: dict[int, MeterReading] = field(default_factory=dict)
    interval_minutes: float = 15.0

    def meter_power_pu(self, node: int, s_base_va: float) -> float:
        """Average active power over the interval from the energy reading."""
        e = self.meters[node].energy_kwh
        return e * 1e3 / (self.interval_minutes / 60.0) / s_base_va


def truncated_noise(rng: np.random.Generator, sigma, size=None):
    """Zero-mean Gaussian noise cut at +/- 3 sigma."""
    sigma = np.asarray(sigma, dtype=float)
    shape = np.broadcast(sigma, np.empty(size if size is not None else ())).shape
    e = truncnorm.rvs(-3.0, 3.0, size=shape, random_state=rng)
    return e * sigma


def synthesize_measurements(model: FeederModel, truth: GroundTruth, config: ScenarioConfig,
                            rng: np.random.Generator | None = None) -> list[MeasurementSet]:
    """Noisy SCADA (substation P, Q, |V|) and smart-meter (|V|, energy) readings.

    The substation reading enters as a node injection at the root, i.e. with
    the consumption sign (negative of the power drawn by the feeder).
    Unmetered customers produce no readings.
    """
    cfg = config
    scada_rng = rng if rng is not None else np.random.default_rng([cfg.seed, 3, cfg.offset])
    if cfg.meter_penetration is not None:
        model = with_meters(model, cfg.meter_penetration, cfg.seed)
    metered = np.array([c.node for c in model.customers if c.has_meter], dtype=int)
    root = model.root
    T = truth.timesteps
    head = list(model.children[root])
    s_root = -truth.voltages[:, root] * np.conj(truth.currents[:, head].sum(axis=1))
    vr = np.abs(truth.voltages[:, root])
    sig_pq = cfg.max_error_scada / 3.0
    sig_v = cfg.max_error_scada / 3.0
    p_meas = s_root.real + truncated_noise(scada_rng, sig_pq * np.abs(s_root.real))
    q_meas = s_root.imag + truncated_noise(scada_rng, sig_pq * np.abs(s_root.imag))
    v_meas = vr + truncated_noise(scada_rng, np.full(T, sig_v))

    dt_h = cfg.interval_minutes / 60.0
    to_kwh = model.base.s_base_va * dt_h / 1e3
    p_true = truth.injections[:, metered].real
    mv_true = np.abs(truth.voltages[:, metered])
    e_true = p_true * to_kwh
    mv, e = mv_true.copy(), e_true.copy()
    for j, n in enumerate(metered):
        # one stream per customer: a meter reads the same noise at any penetration
        g = rng if rng is not None else np.random.default_rng([cfg.seed, 4, cfg.offset, int(n)])
        mv[:, j] += truncated_noise(g, np.full(T, cfg.max_error_meter_v / 3.0))
        e[:, j] += truncated_noise(g, cfg.max_error_meter_e / 3.0 * np.abs(e_true[:, j]))

    var_floor = 1e-10
    out = []
    for t in range(T):
        scada = (
            Measurement(Kind.P_INJ, root, float(p_meas[t]), max((sig_pq * abs(p_meas[t])) ** 2, var_floor)),
            Measurement(Kind.Q_INJ, root, float(q_meas[t]), max((sig_pq * abs(q_meas[t])) ** 2, var_floor)),
            Measurement(Kind.V_MAG, root, float(v_meas[t]), max(sig_v ** 2, var_floor)),
        )
        meters = {int(n): MeterReading(float(mv[t, j]), float(e[t, j])) for j, n in enumerate(metered)}
        out.append(MeasurementSet(cfg.offset + t, scada, meters, cfg.interval_minutes))
    return out


# ---------------------------------------------------------------------------
# CSV output


def write_profiles_csv(path, profiles: Profiles) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "hour", "node", "p_load_pu", "q_load_pu", "p_pv_pu"])
        for t in range(len(profiles.hours)):
            for j, n in enumerate(profiles.customers):
                w.writerow([t, repr(float(profiles.hours[t])), int(n), repr(float(profiles.p_load[t, j])),
                            repr(float(profiles.q_load[t, j])), repr(float(profiles.p_pv[t, j]))])


def write_truth_csv(path, truth: GroundTruth) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "node", "v_re_pu", "v_im_pu"])
        for t in range(truth.timesteps):
            for n, v in enumerate(truth.voltages[t]):
                w.writerow([t, n, repr(float(v.real)), repr(float(v.imag))])


def write_measurements_csv(path, msets: list[MeasurementSet]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "source", "kind", "location", "value", "variance"])
        for ms in msets:
            for m in ms.scada:
                w.writerow([ms.t, "scada", m.kind.value, m.location, repr(m.value), repr(m.variance)])
            for n, r in ms.meters.items():
                w.writerow([ms.t, "meter", "v_mag", n, repr(r.v_mag), ""])
                w.writerow([ms.t, "meter", "energy_kwh", n, repr(r.energy_kwh), ""])
