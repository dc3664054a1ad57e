import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from conftest import DT
from hypermesh import manifold as mf
from hypermesh.autodiff import Tape, backward
from hypermesh.optim import AdamState, Optimizer, adam_step, riemannian_adam_step, riemannian_grad


def t(*xs):
    return torch.tensor(xs, dtype=DT)


def test_first_adam_step_is_minus_lr_sign():
    x = t(1.0)
    state = AdamState.zeros_like(x, lr=0.1)
    x1 = adam_step(x, 2 * x, state)
    assert abs(float(x1) - 0.9) < 1e-8
    # the exact value carries eps: 1 - 0.1 * g / (|g| + eps)
    assert abs(float(x1) - (1 - 0.1 * 2 / (2 + 1e-8))) < 1e-15


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(20, 4))
    p = torch.zeros(4, dtype=DT)
    state = AdamState.zeros_like(p, lr=0.01)
    ref, m, v = np.zeros(4), np.zeros(4), np.zeros(4)
    for i, g in enumerate(grads, 1):
        p = adam_step(p, torch.as_tensor(g, dtype=DT), state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** i)) / (np.sqrt(v / (1 - 0.999 ** i)) + 1e-8)
    np.testing.assert_allclose(p.numpy(), ref, rtol=1e-13, atol=1e-16)


def test_zero_grad_keeps_param_and_decays_moments():
    x = t(0.5, -0.5)
    state = AdamState.zeros_like(x, lr=0.1)
    x = adam_step(x, t(1.0, 1.0), state)
    m0, v0 = state.m.clone(), state.v.clone()
    x2 = adam_step(x, t(0.0, 0.0), state)
    assert torch.allclose(state.m, 0.9 * m0, rtol=1e-15) and torch.allclose(state.v, 0.999 * v0, rtol=1e-15)
    # a zero gradient still moves the parameter through the momentum; from fresh moments it does not
    fresh = AdamState.zeros_like(x, lr=0.1)
    assert torch.equal(adam_step(x, t(0.0, 0.0), fresh), x)
    assert x2.shape == x.shape


def test_nonfinite_gradient_aborts():
    x = t(0.1)
    with pytest.raises(FloatingPointError):
        adam_step(x, t(float("nan")), AdamState.zeros_like(x))
    with pytest.raises(FloatingPointError):
        riemannian_adam_step(x, t(float("inf")), AdamState.zeros_like(x))


def test_riemannian_rescale_at_origin_is_a_quarter():
    g = t(0.3, -1.2)
    assert torch.equal(riemannian_grad(torch.zeros(2, dtype=DT), g), g / 4)
    b = t(0.5, 0.0)
    assert torch.allclose(riemannian_grad(b, g), g * 0.75 ** 2 / 4, rtol=1e-15)


def test_riemannian_zero_grad_keeps_point():
    b = t(0.2, 0.3)
    assert torch.equal(riemannian_adam_step(b, t(0.0, 0.0), AdamState.zeros_like(b)), b)


def test_riemannian_adam_converges_to_target():
    target = t(0.5)
    b = t(0.0)
    state = AdamState.zeros_like(b, lr=1e-2)
    for _ in range(500):
        tape = Tape()
        x = tape.watch("b", b)
        g = backward(tape, mf.geodesic_distance(x, target) ** 2)["b"]
        b = riemannian_adam_step(b, g, state)
    assert abs(float(b) - 0.5) < 1e-3


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(1e-3, 1.0))
def test_riemannian_step_stays_in_ball(g1, g2, lr):
    b = t(0.95, 0.2) * 0.99 / float(t(0.95, 0.2).norm())
    state = AdamState.zeros_like(b, lr=lr)
    for _ in range(3):
        b = riemannian_adam_step(b, t(g1, g2), state)
        assert float(b.norm()) <= 1 - mf.BALL_EPS + 1e-15


def test_identical_runs_are_bitwise_identical():
    def run():
        rng = np.random.default_rng(5)
        params = {"w": torch.as_tensor(rng.normal(size=(3, 2)), dtype=DT), "b": t(0.1, 0.2)}
        opt = Optimizer(params, ball={"b"}, lr=0.05)
        for _ in range(10):
            grads = {k: torch.as_tensor(rng.normal(size=v.shape), dtype=DT) for k, v in params.items()}
            params = opt.step(params, grads)
        return params

    a, b = run(), run()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_optimizer_routes_ball_params_and_tracks_state():
    params = {"w": t(1.0, 1.0), "b": t(0.1, 0.1)}
    opt = Optimizer(params, ball={"b"}, lr=0.1)
    grads = {"w": t(1.0, 1.0), "b": t(1.0, 1.0)}
    out = opt.step(params, grads)
    assert torch.allclose(out["w"], t(0.9, 0.9), atol=1e-8)
    ref = riemannian_adam_step(t(0.1, 0.1), t(1.0, 1.0), AdamState.zeros_like(t(0.0, 0.0), lr=0.1))
    assert torch.equal(out["b"], ref)
    assert opt.step_count == 1
    opt.lr = 0.01
    assert opt.lr == 0.01
    state = opt.state_tensors()
    other = Optimizer(params, ball={"b"})
    other.load_state_tensors(state)
    assert other.step_count == 1 and torch.equal(other.states["w"].m, opt.states["w"].m)
    with pytest.raises(FloatingPointError, match="w"):
        opt.step(params, {"w": t(float("nan"), 0.0), "b": t(0.0, 0.0)})
