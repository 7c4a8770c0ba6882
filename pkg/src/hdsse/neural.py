"""Small dense networks with hand-written backprop and a diagonal Gaussian policy head."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

FORMAT_VERSION = 1


class Mlp:
    """tanh hidden layers, linear output.

    All weights and biases live in one flat ``params`` vector; ``weights`` and
    ``biases`` are views into it, so ``net.params += step`` updates the net.
    Inputs may be a single vector or a batch with one sample per row.
    """

    def __init__(self, sizes, params=None):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ValueError("an Mlp needs at least input and output sizes")
        n = self.n_params_for(self.sizes)
        if params is None:
            self.params = np.zeros(n)
        else:
            self.params = np.array(params, dtype=float)
            if self.params.shape != (n,):
                raise ValueError(f"expected {n} parameters, got {self.params.shape}")
        self.weights = []
        self.biases = []
        i = 0
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            self.weights.append(self.params[i:i + n_in * n_out].reshape(n_out, n_in))
            i += n_in * n_out
            self.biases.append(self.params[i:i + n_out])
            i += n_out

    @staticmethod
    def n_params_for(sizes) -> int:
        return sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))

    @classmethod
    def xavier(cls, sizes, rng: np.random.Generator) -> "Mlp":
        net = cls(sizes)
        for W in net.weights:
            n_out, n_in = W.shape
            lim = math.sqrt(6.0 / (n_in + n_out))
            W[...] = rng.uniform(-lim, lim, size=W.shape)
        return net

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, self.params.copy())

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"input length {x.shape[-1]} != {self.n_in}")
        return x

    def forward(self, x) -> np.ndarray:
        a = self._check(x)
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ W.T + b
            if i < last:
                a = np.tanh(a)
        return a

    def forward_cache(self, x):
        a = self._check(x)
        acts = [a]
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ W.T + b
            if i < last:
                a = np.tanh(a)
            acts.append(a)
        return a, acts

    def backward(self, acts, out_grad):
        """Gradients of sum(out * out_grad) w.r.t. params (summed over a batch) and input."""
        g = np.asarray(out_grad, dtype=float)
        if g.shape != acts[-1].shape:
            raise ValueError(f"output gradient shape {g.shape} != output shape {acts[-1].shape}")
        grads = np.empty_like(self.params)
        views_w, views_b = [], []
        i = 0
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            views_w.append(grads[i:i + n_in * n_out].reshape(n_out, n_in))
            i += n_in * n_out
            views_b.append(grads[i:i + n_out])
            i += n_out
        batched = g.ndim == 2
        for k in range(len(self.weights) - 1, -1, -1):
            a_prev = acts[k]
            if batched:
                views_w[k][...] = g.T @ a_prev
                views_b[k][...] = g.sum(axis=0)
            else:
                views_w[k][...] = np.outer(g, a_prev)
                views_b[k][...] = g
            g = g @ self.weights[k]
            if k > 0:
                g = g * (1.0 - acts[k] ** 2)
        return grads, g

    def to_dict(self) -> dict:
        return {"sizes": list(self.sizes), "params": self.params.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Mlp":
        return cls(d["sizes"], d["params"])


def mlp_forward(net: Mlp, x) -> np.ndarray:
    return net.forward(x)


def mlp_backward(net: Mlp, x, output_grad):
    """Returns ``(param_grads, input_grad)``; param_grads is flat, aligned with ``net.params``."""
    _, acts = net.forward_cache(x)
    return net.backward(acts, output_grad)


@dataclass
class GaussianPolicy:
    """Diagonal Gaussian over a state vector.

    mean = out_shift + out_scale * mean_net(c)
    var  = out_scale**2 * exp(clip(logvar_net(c), lv_min, lv_max))
    """

    mean_net: Mlp
    logvar_net: Mlp
    lv_min: float = -10.0
    lv_max: float = 2.0
    out_shift: np.ndarray | float = 0.0
    out_scale: np.ndarray | float = 1.0

    @property
    def dim(self) -> int:
        return self.mean_net.n_out

    @classmethod
    def create(cls, n_in: int, dim: int, hidden=(10, 10, 10), rng=None, **kw) -> "GaussianPolicy":
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = (n_in, *hidden, dim)
        return cls(Mlp.xavier(sizes, rng), Mlp.xavier(sizes, rng), **kw)

    def to_dict(self) -> dict:
        return {
            "mean_net": self.mean_net.to_dict(),
            "logvar_net": self.logvar_net.to_dict(),
            "lv_min": self.lv_min,
            "lv_max": self.lv_max,
            "out_shift": np.broadcast_to(self.out_shift, (self.dim,)).tolist(),
            "out_scale": np.broadcast_to(self.out_scale, (self.dim,)).tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "GaussianPolicy":
        return cls(Mlp.from_dict(d["mean_net"]), Mlp.from_dict(d["logvar_net"]), d["lv_min"], d["lv_max"],
                   np.array(d["out_shift"]), np.array(d["out_scale"]))


def policy_eval(policy: GaussianPolicy, c):
    """Return ``(mu, var)`` for input ``c`` (single vector or batch)."""
    mu = policy.out_shift + policy.out_scale * policy.mean_net.forward(c)
    lv = np.clip(policy.logvar_net.forward(c), policy.lv_min, policy.lv_max)
    var = np.square(policy.out_scale) * np.exp(lv)
    return mu, var


def policy_sample(policy: GaussianPolicy, c, rng: np.random.Generator) -> np.ndarray:
    mu, var = policy_eval(policy, c)
    return mu + np.sqrt(var) * rng.standard_normal(np.shape(mu))


class PolicyGrads(NamedTuple):
    density: float
    log_density: float
    d_theta: np.ndarray
    d_gamma: np.ndarray


def policy_logdensity_and_grads(policy: GaussianPolicy, c, x, log: bool = False, out_weights=None,
                                through_clamp: bool = False) -> PolicyGrads:
    """Density of ``x`` under the policy at ``c`` and its parameter gradients.

    With ``log=False`` the gradients are of the density itself; with
    ``log=True`` they are of the log-density (the score).  ``out_weights``
    scales each state dimension's contribution before it is backpropagated
    through the two networks; a ``(mean_weights, logvar_weights)`` pair
    weights the two heads separately.  ``None`` gives the exact gradient.
    """
    x = np.asarray(x, dtype=float)
    m_out, m_acts = policy.mean_net.forward_cache(c)
    l_out, l_acts = policy.logvar_net.forward_cache(c)
    scale = np.broadcast_to(np.asarray(policy.out_scale, float), m_out.shape)
    mu = policy.out_shift + scale * m_out
    lv = np.clip(l_out, policy.lv_min, policy.lv_max)
    var = scale ** 2 * np.exp(lv)
    d = x - mu
    maha = float(np.sum(d * d / var))
    log_det = float(np.sum(np.log(var)))
    log_density = -0.5 * (maha + log_det + mu.size * math.log(2.0 * math.pi))
    density = math.exp(log_density)

    # d log pi / d mean_net output and / d logvar_net output (zero where the clamp is active)
    g_m = scale * d / var
    g_l = 0.5 * (d * d / var - 1.0)
    if not through_clamp:
        inside = (l_out > policy.lv_min) & (l_out < policy.lv_max)
        g_l = np.where(inside, g_l, 0.0)
    factor = 1.0 if log else density
    g_m = factor * g_m
    g_l = factor * g_l
    if out_weights is not None:
        if isinstance(out_weights, tuple):
            w_m, w_l = out_weights
        else:
            w_m = w_l = out_weights
        g_m = g_m * np.asarray(w_m, dtype=float)
        g_l = g_l * np.asarray(w_l, dtype=float)
    d_theta, _ = policy.mean_net.backward(m_acts, g_m)
    d_gamma, _ = policy.logvar_net.backward(l_acts, g_l)
    return PolicyGrads(density, log_density, d_theta, d_gamma)


class Adam:
    """Adam steps on a flat parameter vector (in place)."""

    def __init__(self, params: np.ndarray, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros_like(params)
        self.v = np.zeros_like(params)
        self.t = 0

    def step(self, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        self.params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
