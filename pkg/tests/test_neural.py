import math

import numpy as np
import pytest

from hdsse.neural import (Adam, GaussianPolicy, Mlp, mlp_backward, mlp_forward, policy_eval,
                          policy_logdensity_and_grads, policy_sample)


def reference_forward(sizes, params, x):
    # independent re-evaluation straight from the flat parameter layout
    i = 0
    a = np.asarray(x, float)
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        W = np.array(params[i:i + n_in * n_out]).reshape(n_out, n_in)
        i += n_in * n_out
        b = np.array(params[i:i + n_out])
        i += n_out
        a = np.array([sum(W[r, c] * a[c] for c in range(n_in)) + b[r] for r in range(n_out)])
        if k < len(sizes) - 2:
            a = np.tanh(a)
    return a


def random_policy(rng, n_in=3, dim=2, hidden=(4, 3)):
    pol = GaussianPolicy.create(n_in, dim, hidden, rng)
    pol.logvar_net.params[:] = rng.normal(scale=0.4, size=pol.logvar_net.params.size)
    pol.out_shift = rng.normal(size=dim)
    pol.out_scale = rng.uniform(0.5, 2.0, size=dim)
    return pol


def test_parameter_count():
    net = Mlp((4, 10, 10, 10, 3))
    assert net.params.size == 5 * 10 + 11 * 10 + 11 * 10 + 11 * 3


def test_zero_net_outputs_zero():
    assert np.all(mlp_forward(Mlp((3, 5, 2)), [1.0, -2.0, 0.5]) == 0)


def test_hand_evaluated_net():
    net = Mlp((1, 1, 1), [1.0, 0.0, 1.0, 0.0])
    assert mlp_forward(net, [0.5])[0] == pytest.approx(0.46211715726, abs=1e-10)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        mlp_forward(Mlp((3, 2)), [1.0, 2.0])
    with pytest.raises(ValueError):
        mlp_backward(Mlp((3, 2)), [1.0, 2.0, 3.0], [1.0])
    with pytest.raises(ValueError):
        Mlp((3, 2), params=np.zeros(5))


def test_forward_matches_reference():
    rng = np.random.default_rng(0)
    for _ in range(20):
        sizes = (3, 5, 4, 2)
        net = Mlp.xavier(sizes, rng)
        net.params += rng.normal(scale=0.1, size=net.params.size)
        x = rng.normal(size=3)
        assert np.allclose(mlp_forward(net, x), reference_forward(sizes, net.params, x), atol=1e-12)


def test_batch_forward_matches_rows():
    rng = np.random.default_rng(1)
    net = Mlp.xavier((4, 6, 3), rng)
    X = rng.normal(size=(7, 4))
    assert np.allclose(net.forward(X), np.array([net.forward(x) for x in X]))


def test_zero_output_grad():
    rng = np.random.default_rng(2)
    net = Mlp.xavier((3, 4, 2), rng)
    g, gi = mlp_backward(net, rng.normal(size=3), np.zeros(2))
    assert np.all(g == 0) and np.all(gi == 0)


def test_linear_neuron_grads():
    net = Mlp((1, 1), [2.0, 0.5])
    g, gi = mlp_backward(net, [3.0], [1.0])
    assert g.tolist() == [3.0, 1.0]
    assert gi.tolist() == [2.0]


def fd_grad(f, params, eps=1e-6):
    out = np.empty_like(params)
    for i in range(params.size):
        old = params[i]
        params[i] = old + eps
        hi = f()
        params[i] = old - eps
        lo = f()
        params[i] = old
        out[i] = (hi - lo) / (2 * eps)
    return out


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-3))


def test_mlp_grads_match_finite_differences():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        net = Mlp.xavier((3, 4, 4, 2), rng)
        x = rng.normal(size=3)
        og = rng.normal(size=2)
        g, gi = mlp_backward(net, x, og)
        fd = fd_grad(lambda: float(net.forward(x) @ og), net.params)
        worst = max(worst, rel_err(g, fd))
        fdi = fd_grad(lambda: float(net.forward(x) @ og), x)
        worst = max(worst, rel_err(gi, fdi))
    assert worst < 1e-5


def test_zero_policy_eval():
    pol = GaussianPolicy(Mlp((2, 3, 2)), Mlp((2, 3, 2)))
    mu, var = policy_eval(pol, [0.3, -0.2])
    assert np.all(mu == 0) and np.all(var == 1)


def test_clamp_bounds():
    net = Mlp((1, 2), [0.0, 0.0, -50.0, 50.0])
    pol = GaussianPolicy(Mlp((1, 2)), net)
    _, var = policy_eval(pol, [1.0])
    assert var[0] == pytest.approx(math.exp(-10.0))
    assert var[1] == pytest.approx(math.exp(2.0))


def test_sample_reproducible_and_tight():
    rng = np.random.default_rng(4)
    pol = random_policy(rng)
    c = rng.normal(size=3)
    a = policy_sample(pol, c, np.random.default_rng(9))
    b = policy_sample(pol, c, np.random.default_rng(9))
    assert np.array_equal(a, b)
    pol.logvar_net.params[:] = 0.0
    pol.logvar_net.biases[-1][:] = -60.0
    pol.out_scale = 1.0
    mu, var = policy_eval(pol, c)
    x = policy_sample(pol, c, rng)
    assert np.all(np.abs(x - mu) <= 6 * np.sqrt(var))


def test_sample_statistics():
    rng = np.random.default_rng(5)
    pol = random_policy(rng)
    c = rng.normal(size=3)
    mu, var = policy_eval(pol, c)
    n = 100_000
    xs = policy_sample(pol, np.tile(c, (n, 1)), rng)
    se_mean = np.sqrt(var / n)
    se_var = var * np.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(xs.mean(axis=0) - mu) < 3 * se_mean)
    assert np.all(np.abs(xs.var(axis=0, ddof=1) - var) < 3 * se_var)


def test_density_at_mean_standard_normal():
    pol = GaussianPolicy(Mlp((1, 1)), Mlp((1, 1)))
    g = policy_logdensity_and_grads(pol, [0.7], [0.0])
    assert g.density == pytest.approx(1.0 / math.sqrt(2 * math.pi))
    assert np.all(g.d_theta == 0)
    # at x = mu only the -1/2 covariance term survives: d pi / d logvar = -pi/2
    assert g.d_gamma.tolist() == pytest.approx([-0.5 * g.density * 0.7, -0.5 * g.density])


def test_policy_grads_match_finite_differences():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        pol = random_policy(rng)
        c = rng.normal(size=3)
        mu, var = policy_eval(pol, c)
        x = mu + np.sqrt(var) * rng.normal(size=mu.size)
        for log in (False, True):
            g = policy_logdensity_and_grads(pol, c, x, log=log)

            def f():
                r = policy_logdensity_and_grads(pol, c, x)
                return r.log_density if log else r.density

            worst = max(worst, rel_err(g.d_theta, fd_grad(f, pol.mean_net.params)))
            worst = max(worst, rel_err(g.d_gamma, fd_grad(f, pol.logvar_net.params)))
    assert worst < 1e-4


def test_out_weights_scale_each_head():
    rng = np.random.default_rng(7)
    pol = random_policy(rng)
    c = rng.normal(size=3)
    x = rng.normal(size=2)
    full = policy_logdensity_and_grads(pol, c, x, log=True)
    none = policy_logdensity_and_grads(pol, c, x, log=True, out_weights=(np.zeros(2), np.ones(2)))
    assert np.all(none.d_theta == 0)
    assert np.allclose(none.d_gamma, full.d_gamma)
    half = policy_logdensity_and_grads(pol, c, x, log=True, out_weights=np.full(2, 0.5))
    assert np.allclose(half.d_theta, 0.5 * full.d_theta)


def test_density_positive_and_finite():
    rng = np.random.default_rng(8)
    pol = random_policy(rng)
    for _ in range(50):
        g = policy_logdensity_and_grads(pol, rng.normal(size=3), rng.normal(scale=3, size=2))
        assert g.density > 0 and math.isfinite(g.log_density)


def test_serialization_round_trip():
    rng = np.random.default_rng(9)
    pol = random_policy(rng)
    again = GaussianPolicy.from_dict(pol.to_dict())
    c = rng.normal(size=3)
    for a, b in zip(policy_eval(pol, c), policy_eval(again, c)):
        assert np.array_equal(a, b)


def test_adam_minimizes_quadratic():
    p = np.array([3.0, -2.0])
    opt = Adam(p, lr=0.1)
    for _ in range(500):
        opt.step(2 * p)
    assert np.all(np.abs(p) < 1e-2)
