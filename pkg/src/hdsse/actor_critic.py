"""Per-transformer actor-critic estimators for secondary circuits.

Each module maps its input vector ``c`` (smart-meter voltages and average
powers of its metered customers, plus the transformer voltage handed down
by the primary estimator) to a Gaussian over the circuit's branch currents.
The critic predicts the smart-meter voltage residual the policy will
realize; the actor is nudged toward perturbations that beat the prediction.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .grid import FeederModel, SecondaryCircuit, SubModel
from .neural import FORMAT_VERSION, Adam, GaussianPolicy, Mlp, policy_eval, policy_logdensity_and_grads
from .powerflow import forward_sweep, pack_currents, unpack_currents

HIDDEN = (10, 10, 10)
# relative step size of the log-variance head against the mean head
LOGVAR_GAIN = 1.5


class AcError(ValueError):
    pass


@dataclass(frozen=True)
class AcInput:
    """Raw (unstandardized) module input.

    ``meter_v`` and ``meter_p`` follow the circuit's metered-customer order;
    ``meter_p`` is average active power over the meter interval (p.u.).
    """

    meter_v: np.ndarray
    meter_p: np.ndarray
    v_n: complex

    def vector(self) -> np.ndarray:
        mv = np.asarray(self.meter_v, float)
        mp = np.asarray(self.meter_p, float)
        out = np.empty(2 * mv.size + 2)
        out[0:-2:2] = mv
        out[1:-2:2] = mp
        out[-2] = abs(self.v_n)
        out[-1] = math.atan2(self.v_n.imag, self.v_n.real)
        return out


class BoundaryUp(NamedTuple):
    p: float
    q: float
    var_p: float
    var_q: float


class TrainReport(NamedTuple):
    delta: float
    residual: float
    predicted: float
    skipped: bool = False
    reason: str = ""


@dataclass
class PretrainReport:
    mean_loss: list[float] = field(default_factory=list)
    logvar_loss: list[float] = field(default_factory=list)
    critic_loss: list[float] = field(default_factory=list)
    n_samples: int = 0
    r_scale: float = 1.0


def _ema_alpha(half_life: float) -> float:
    return 1.0 - 0.5 ** (1.0 / half_life)


class AcModule:
    """Actor-critic estimator for one secondary circuit."""

    def __init__(self, circuit: SecondaryCircuit, sub: SubModel, policy: GaussianPolicy | None = None,
                 critic: Mlp | None = None, l_a: float = 0.01, l_c: float = 0.01, u_max: float = 0.05,
                 u_decay: float = 0.999, u_floor: float = 0.005, seed: int = 0, max_step: float = 0.05,
                 tde_half_life: float = 20.0, level_half_life: float = 50.0, hidden=HIDDEN):
        if l_a <= 0 or l_c <= 0:
            raise ValueError("learning rates must be positive")
        if u_max < 0 or u_floor < 0:
            raise ValueError("perturbation half-width must be >= 0")
        self.circuit = circuit
        self.sub = sub
        self.metered = tuple(circuit.metered)
        self.meter_local = np.array([sub.local_node[n] for n in self.metered], dtype=int)
        heads = sub.model.children[sub.model.root]
        if len(heads) != 1:
            raise AcError(f"secondary {circuit.id}: expected one branch at the transformer, found {len(heads)}")
        self.head = int(heads[0])
        self.n_in = 2 * len(self.metered) + 2
        self.dim = 2 * sub.model.n_branches
        rng = np.random.default_rng([seed, circuit.id])
        self.policy = policy or GaussianPolicy.create(self.n_in, self.dim, hidden, rng)
        self.critic = critic or Mlp.xavier((self.n_in, *hidden, 1), rng)
        self.l_a, self.l_c = l_a, l_c
        self.u_max, self.u_decay, self.u_floor = u_max, u_decay, u_floor
        self.max_step = max_step
        self.in_mean = np.zeros(self.n_in)
        self.in_std = np.ones(self.n_in)
        self.r_scale: float | None = None
        self.tde_ema = 0.0
        self.tde_alpha = _ema_alpha(tde_half_life)
        self.r_level = 1.0
        self.level_alpha = _ema_alpha(level_half_life)
        self.steps = 0
        self.rng = np.random.default_rng([seed, circuit.id, 1])

    @property
    def id(self) -> int:
        return self.circuit.id

    @property
    def has_meters(self) -> bool:
        return bool(self.metered)

    def features(self, inp: AcInput) -> np.ndarray:
        raw = inp.vector()
        if raw.size != self.n_in:
            raise AcError(f"secondary {self.id}: input length {raw.size} != {self.n_in}")
        return (raw - self.in_mean) / self.in_std

    def fit_input_scaler(self, inputs: Sequence[AcInput]) -> None:
        """Set input standardization from a batch of unlabeled inputs."""
        X = np.array([i.vector() for i in inputs])
        if X.ndim != 2 or X.shape[1] != self.n_in:
            raise AcError(f"secondary {self.id}: inputs do not match the module layout")
        self.in_mean = X.mean(axis=0)
        sd = X.std(axis=0)
        self.in_std = np.where(sd > 1e-8, sd, 1.0)

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "circuit": self.circuit.id,
            "transformer_node": self.circuit.transformer_node,
            "metered": list(self.metered),
            "n_in": self.n_in,
            "dim": self.dim,
            "policy": self.policy.to_dict(),
            "critic": self.critic.to_dict(),
            "l_a": self.l_a,
            "l_c": self.l_c,
            "u_max": self.u_max,
            "u_decay": self.u_decay,
            "u_floor": self.u_floor,
            "max_step": self.max_step,
            "in_mean": self.in_mean.tolist(),
            "in_std": self.in_std.tolist(),
            "r_scale": self.r_scale,
            "tde_ema": self.tde_ema,
            "tde_alpha": self.tde_alpha,
            "r_level": self.r_level,
            "level_alpha": self.level_alpha,
            "steps": self.steps,
            "rng": self.rng.bit_generator.state,
        }

    @classmethod
    def from_dict(cls, d: dict, circuit: SecondaryCircuit, sub: SubModel) -> "AcModule":
        if d.get("format_version") != FORMAT_VERSION:
            raise AcError(f"unsupported checkpoint format {d.get('format_version')}")
        if d["circuit"] != circuit.id or list(d["metered"]) != list(circuit.metered):
            raise AcError(f"checkpoint for secondary {d['circuit']} does not match circuit {circuit.id} "
                          "(metered customers differ)")
        m = cls(circuit, sub, GaussianPolicy.from_dict(d["policy"]), Mlp.from_dict(d["critic"]),
                d["l_a"], d["l_c"], d["u_max"], d["u_decay"], d["u_floor"], max_step=d["max_step"])
        if m.dim != d["dim"]:
            raise AcError(f"checkpoint state dimension {d['dim']} != circuit's {m.dim}")
        m.in_mean = np.array(d["in_mean"])
        m.in_std = np.array(d["in_std"])
        m.r_scale = d["r_scale"]
        m.tde_ema = d["tde_ema"]
        m.tde_alpha = d["tde_alpha"]
        m.r_level = d["r_level"]
        m.level_alpha = d["level_alpha"]
        m.steps = d["steps"]
        m.rng.bit_generator.state = d["rng"]
        return m


def make_modules(model: FeederModel, seed: int = 0, **kw) -> dict[int, AcModule]:
    circuits = model.circuits
    return {s.id: AcModule(s, circuits[s.id], seed=seed, **kw) for s in model.secondaries}


def make_input(module: AcModule, mset, v_n: complex, s_base_va: float) -> AcInput:
    """Module input from one timestep's readings and a transformer voltage."""
    mv = np.array([mset.meters[n].v_mag for n in module.metered])
    mp = np.array([mset.meter_power_pu(n, s_base_va) for n in module.metered])
    return AcInput(mv, mp, complex(v_n))


# ---------------------------------------------------------------------------
# Stage A


def infer_states(module: AcModule, inp: AcInput, mode: str = "mean", rng: np.random.Generator | None = None):
    c = module.features(inp)
    mu, var = policy_eval(module.policy, c)
    if mode == "mean":
        return mu
    if mode == "sample":
        rng = rng if rng is not None else module.rng
        return mu + np.sqrt(var) * rng.standard_normal(mu.shape)
    raise ValueError(f"unknown inference mode {mode!r}")


def state_variance(module: AcModule, inp: AcInput) -> np.ndarray:
    return policy_eval(module.policy, module.features(inp))[1]


def boundary_up(module: AcModule, v_n: complex, states, var) -> BoundaryUp:
    """Net power drawn at the transformer node and its variances."""
    states = np.asarray(states, float)
    var = np.asarray(var, float)
    b = module.head
    i_head = complex(states[2 * b], states[2 * b + 1])
    s = v_n * i_head.conjugate()
    vm2 = abs(v_n) ** 2
    return BoundaryUp(s.real, s.imag, vm2 * float(var[2 * b]), vm2 * float(var[2 * b + 1]))


def circuit_voltages(module: AcModule, v_n: complex, states) -> np.ndarray:
    """Local node voltages of the circuit (local order, transformer node first)."""
    return forward_sweep(module.sub.model, v_n, states)


def realized_residual(module: AcModule, v_n: complex, states, meter_v) -> float:
    """Sum of squared smart-meter voltage-magnitude residuals."""
    if not module.has_meters:
        raise AcError(f"secondary {module.id} has no smart meters; residual undefined")
    v = circuit_voltages(module, v_n, states)
    d = np.abs(v[module.meter_local]) - np.asarray(meter_v, float)
    return float(d @ d)


# ---------------------------------------------------------------------------
# Stage B


def _clip(step: np.ndarray, limit: float) -> np.ndarray:
    n = float(np.max(np.abs(step))) if step.size else 0.0
    return step * (limit / n) if n > limit else step


def train_step(module: AcModule, inp: AcInput) -> TrainReport:
    """One perturb / evaluate / update cycle.

    The critic moves toward the realized residual; the actor moves toward
    the perturbed action in proportion to how much better than predicted it
    turned out.  The actor step is the score of the perturbed sample,
    weighted per dimension by the relative perturbation size, so it is
    exactly zero when no perturbation is applied.
    """
    if not module.has_meters:
        return TrainReport(float("nan"), float("nan"), float("nan"), True, "no smart meters")
    c = module.features(inp)
    pol = module.policy
    mu, var = policy_eval(pol, c)
    rng = module.rng
    eps = rng.standard_normal(mu.shape)
    u_max = module.u_max
    u = rng.uniform(-u_max, u_max, mu.shape) if u_max > 0 else np.zeros_like(mu)
    x = mu + np.sqrt(var) * eps + u
    module.u_max = max(module.u_floor, u_max * module.u_decay) if u_max > 0 else 0.0
    module.steps += 1

    r = realized_residual(module, inp.v_n, x, inp.meter_v)
    if not np.isfinite(r):
        return TrainReport(float("nan"), r, float("nan"), True, "non-finite residual")
    if module.r_scale is None:
        module.r_scale = max(r, 1e-12)
    r_n = r / module.r_scale
    out, acts = module.critic.forward_cache(c)
    r_hat = float(out[0])
    delta = r_hat - r_n

    # critic: gradient step on 0.5 (r_n - r_hat)^2
    g_c, _ = module.critic.backward(acts, np.ones(1))
    module.critic.params += _clip(module.l_c * (r_n - r_hat) * g_c, module.max_step)

    # the actor sees the TDE relative to its recent RMS
    module.r_level += module.level_alpha * (delta * delta - module.r_level)
    adv = float(np.clip(delta / math.sqrt(max(module.r_level, 1e-12)), -3.0, 3.0))
    if u_max > 0:
        # Fisher preconditioning keeps the step proportional to the exploration size
        w = np.abs(u) / u_max
        scale2 = np.square(np.broadcast_to(np.asarray(pol.out_scale, float), mu.shape))
        w_mean = w * var / np.sqrt(scale2 * (var + u_max ** 2 / 3.0))
        w_logvar = w * LOGVAR_GAIN * var / (var + u_max ** 2 / 3.0)
        grads = policy_logdensity_and_grads(pol, c, x, log=True, out_weights=(w_mean, w_logvar),
                                             through_clamp=True)
        pol.mean_net.params += _clip(module.l_a * adv * grads.d_theta, module.max_step)
        pol.logvar_net.params += _clip(module.l_a * adv * grads.d_gamma, module.max_step)

    module.tde_ema += module.tde_alpha * (abs(delta) - module.tde_ema)
    return TrainReport(delta, r, r_hat * module.r_scale)


# ---------------------------------------------------------------------------
# supervised warm start


def _adam_fit(net: Mlp, X, loss_grad, epochs, batch, lr, rng, history):
    opt = Adam(net.params, lr=lr)
    n = X.shape[0]
    for e in range(epochs):
        # cosine decay to 5% of the initial rate keeps late epochs from jittering
        opt.lr = lr * (0.05 + 0.95 * 0.5 * (1.0 + math.cos(math.pi * e / max(epochs, 1))))
        order = rng.permutation(n)
        for s in range(0, n, batch):
            idx = order[s:s + batch]
            out, acts = net.forward_cache(X[idx])
            _, g = loss_grad(out, idx)
            grads, _ = net.backward(acts, g / len(idx))
            opt.step(grads)
        out = net.forward(X)
        history.append(float(loss_grad(out, slice(None))[0]))


def pretrain(module: AcModule, dataset: Sequence[tuple[AcInput, np.ndarray]], epochs: int = 150,
             batch: int = 64, lr: float = 3e-3, seed: int = 0) -> PretrainReport:
    """Supervised warm start from labeled samples.

    Fits input/output standardization, the mean network (squared error), the
    log-variance network (Gaussian negative log-likelihood of the remaining
    error) and, for metered circuits, the critic on mean-mode residuals.
    """
    if not dataset:
        raise AcError("pretraining needs a non-empty dataset")
    inputs = [d[0] for d in dataset]
    Y = np.array([np.asarray(d[1], float) for d in dataset])
    if Y.shape[1] != module.dim:
        raise AcError(f"labels have {Y.shape[1]} states, module expects {module.dim}")
    module.fit_input_scaler(inputs)
    X = np.array([module.features(i) for i in inputs])
    pol = module.policy
    shift = Y.mean(axis=0)
    scale = Y.std(axis=0)
    scale = np.where(scale > 1e-6, scale, 1e-6)
    pol.out_shift, pol.out_scale = shift, scale
    T = (Y - shift) / scale
    rng = np.random.default_rng([seed, module.id, 2])
    rep = PretrainReport(n_samples=len(dataset))

    def mse(out, idx):
        d = out - T[idx]
        return 0.5 * float(np.mean(np.sum(d * d, axis=-1))), d

    _adam_fit(pol.mean_net, X, mse, epochs, batch, lr, rng, rep.mean_loss)

    D2 = (pol.mean_net.forward(X) - T) ** 2
    D2 = np.maximum(D2, np.exp(pol.lv_min))

    def nll(out, idx):
        lv = np.clip(out, pol.lv_min, pol.lv_max)
        e = D2[idx] * np.exp(-lv)
        inside = (out > pol.lv_min) & (out < pol.lv_max)
        g = np.where(inside, 0.5 * (1.0 - e), 0.0)
        return 0.5 * float(np.mean(np.sum(lv + e, axis=-1))), g

    _adam_fit(pol.logvar_net, X, nll, epochs, batch, lr, rng, rep.logvar_loss)

    if module.has_meters:
        mu, _ = policy_eval(pol, X)
        r = np.array([realized_residual(module, inp.v_n, m, inp.meter_v) for inp, m in zip(inputs, mu)])
        module.r_scale = max(float(r.mean()), 1e-12)
        R = (r / module.r_scale)[:, None]

        def sq(out, idx):
            d = out - R[idx]
            return 0.5 * float(np.mean(d * d)), d

        _adam_fit(module.critic, X, sq, epochs, batch, lr, rng, rep.critic_loss)
    rep.r_scale = module.r_scale if module.r_scale is not None else 1.0
    return rep


def circuit_dataset(model: FeederModel, module: AcModule, truth, msets) -> list[tuple[AcInput, np.ndarray]]:
    """Labeled samples for one module: true transformer voltage, true currents."""
    t_node = module.circuit.transformer_node
    branches = module.sub.branches
    out = []
    for k, ms in enumerate(msets):
        inp = make_input(module, ms, truth.voltages[k, t_node], model.base.s_base_va)
        out.append((inp, pack_currents(truth.currents[k, branches])))
    return out


# ---------------------------------------------------------------------------
# checkpoints and logs


def save_module(module: AcModule, path) -> None:
    Path(path).write_text(json.dumps(module.to_dict(), indent=1, sort_keys=True))


def load_module(path, circuit: SecondaryCircuit, sub: SubModel) -> AcModule:
    return AcModule.from_dict(json.loads(Path(path).read_text()), circuit, sub)


def write_training_log(path, rows) -> None:
    """rows: iterable of (module_id, step, r, r_hat, delta)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["module", "step", "r", "r_hat", "delta"])
        for mid, step, r, r_hat, delta in rows:
            w.writerow([mid, step, repr(float(r)), repr(float(r_hat)), repr(float(delta))])


def states_to_currents(states) -> np.ndarray:
    return unpack_currents(states)
