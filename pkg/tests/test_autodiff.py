"""Semantics of the reverse-mode engine: seeding, accumulation, op gradients."""

import numpy as np
import pytest

from dircn.autodiff import Module, Parameter, Tensor, functional as F
from dircn.autodiff import grad_check, directional_grad_check, sampled_grad_check
from dircn.autodiff.gradcheck import CHECKS


def test_tensor_rejects_complex_data():
    with pytest.raises(ValueError, match="size-2 channel"):
        Tensor(np.array([1 + 2j]))


def test_tensor_casts_to_float64():
    t = Tensor(np.arange(4, dtype=np.int32))
    assert t.data.dtype == np.float64


def test_backward_without_seed_needs_scalar():
    t = Tensor(np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        (t * 2.0).backward()


def test_scalar_chain_gradient():
    x = Tensor(3.0)
    y = (x * x + 2.0 * x + 1.0).sum()
    y.backward()
    assert x.grad == pytest.approx(8.0, abs=1e-12)


def test_repeated_backward_doubles_gradient_exactly():
    x = Tensor(np.linspace(-1.0, 2.0, 6).reshape(2, 3))
    loss = (x * x).sum()
    loss.backward()
    once = x.grad.copy()
    loss.backward()
    assert np.array_equal(x.grad, 2.0 * once)


def test_gradients_accumulate_across_graphs():
    x = Tensor(np.ones(4))
    (x * 3.0).sum().backward()
    (x * 5.0).sum().backward()
    assert np.array_equal(x.grad, np.full(4, 8.0))
    x.zero_grad()
    assert np.array_equal(x.grad, np.zeros(4))


def test_broadcast_gradients_are_unbroadcast():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones(3))
    c = Tensor(2.0)
    ((a + b) * c).sum().backward()
    assert np.array_equal(a.grad, np.full((2, 3), 2.0))
    assert np.array_equal(b.grad, np.full(3, 4.0))
    assert c.grad == pytest.approx(12.0)


def test_diamond_reuse_sums_both_paths():
    x = Tensor(2.0)
    y = x * x + x * 3.0
    y.sum().backward()
    assert x.grad == pytest.approx(7.0, abs=1e-12)


def test_detach_blocks_gradient_flow():
    x = Tensor(np.ones(3))
    y = x.detach() * 4.0
    (y + x).sum().backward()
    assert np.array_equal(x.grad, np.ones(3))


def test_slice_gradient_scatters():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    x[0, 1:].sum().backward()
    expected = np.zeros((2, 3))
    expected[0, 1:] = 1.0
    assert np.array_equal(x.grad, expected)


def test_matmul_requires_2d():
    a = Tensor(np.ones((2, 2, 2)))
    with pytest.raises(ValueError):
        a @ a


def test_sqrt_rejects_negative_input():
    with pytest.raises(ValueError):
        Tensor(np.array([-1.0])).sqrt()


def test_abs_subgradient_zero_at_zero():
    x = Tensor(np.array([-2.0, 0.0, 3.0]))
    x.abs().sum().backward()
    assert np.array_equal(x.grad, np.array([-1.0, 0.0, 1.0]))


def test_softplus_is_stable_at_extremes():
    x = Tensor(np.array([-800.0, 0.0, 800.0]))
    with np.errstate(over="raise"):
        out = x.softplus()
    assert out.data[0] == 0.0
    assert out.data[1] == pytest.approx(np.log(2.0))
    assert out.data[2] == pytest.approx(800.0)


def test_sigmoid_and_silu_values():
    x = Tensor(np.array([0.0]))
    assert x.sigmoid().data[0] == pytest.approx(0.5)
    assert x.silu().data[0] == pytest.approx(0.0)


def test_mean_matches_sum_over_count():
    x = Tensor(np.arange(12.0).reshape(3, 4))
    m = x.mean(axis=0)
    assert np.allclose(m.data, x.data.mean(axis=0))
    m.sum().backward()
    assert np.allclose(x.grad, np.full((3, 4), 1.0 / 3.0))


def test_composite_chain_gradcheck():
    rng = np.random.default_rng(3)

    def fn(a, b):
        h = F.instance_norm(F.conv2d(a, b, stride=1, padding=1))
        return (h.silu() * h.sigmoid()).mean()

    a = Tensor(rng.standard_normal((1, 2, 6, 6)))
    b = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.4)
    assert grad_check(fn, [a, b]) < 1e-5


def test_gradcheck_rejects_out_of_range_step():
    x = Tensor(np.ones(2))
    with pytest.raises(ValueError):
        grad_check(lambda t: t.sum(), [x], step=1e-2)


def test_gradcheck_detects_corrupted_derivative(monkeypatch):
    # a wrong backward rule must push the measured error above tolerance
    monkeypatch.setattr("dircn.autodiff.tensor._silu_grad", lambda x: np.ones_like(x))
    x = Tensor(np.linspace(-2.0, 2.0, 7))
    err = grad_check(lambda t: t.silu().sum(), [x])
    assert err > 1e-2


def test_directional_check_restores_parameters():
    rng = np.random.default_rng(0)
    p = Parameter(rng.standard_normal((3, 3)))
    before = p.data.copy()
    err = directional_grad_check(lambda: (p * p).sum(), [p], rng, directions=3)
    assert err < 1e-6
    assert np.array_equal(p.data, before)


def test_sampled_check_on_quadratic():
    rng = np.random.default_rng(1)
    p = Parameter(rng.standard_normal(40))
    q = Parameter(rng.standard_normal(7))
    err = sampled_grad_check(lambda: ((p * p).sum() + (q * 3.0).sum()), [p, q],
                             rng, samples=20)
    assert err < 1e-6


def test_registry_covers_all_functional_ops():
    registered = {name for name, _ in CHECKS}
    for op in ("conv2d", "conv_transpose2d", "linear", "instance_norm",
               "fft2c", "ifft2c", "complex_mul", "complex_abs", "rss",
               "pad_reflect", "pad_zero", "concat", "matmul", "silu",
               "softplus", "global_avg_pool"):
        assert op in registered


class _TwoLayer(Module):
    def __init__(self):
        rng = np.random.default_rng(4)
        self.w1 = Parameter(rng.standard_normal((3, 5)))
        self.w2 = Parameter(rng.standard_normal((5, 2)))
        self.stack = [Parameter(np.zeros(1)), Parameter(np.ones(2))]


def test_named_parameters_walks_nested_containers():
    m = _TwoLayer()
    names = [n for n, _ in m.named_parameters()]
    assert names == ["w1", "w2", "stack.0", "stack.1"]
    assert m.parameter_count() == 15 + 10 + 1 + 2


def test_state_dict_round_trip_and_strictness():
    m = _TwoLayer()
    state = m.state_dict()
    m2 = _TwoLayer()
    m2.load_state_dict(state)
    assert np.array_equal(m2.w1.data, m.w1.data)

    missing = dict(state)
    del missing["w2"]
    with pytest.raises(ValueError, match="missing"):
        _TwoLayer().load_state_dict(missing)

    extra = dict(state, bogus=np.zeros(1))
    with pytest.raises(ValueError, match="unexpected"):
        _TwoLayer().load_state_dict(extra)

    bad_shape = dict(state, w1=np.zeros((2, 2)))
    with pytest.raises(ValueError, match="shape"):
        _TwoLayer().load_state_dict(bad_shape)


def test_state_dict_copies_are_independent():
    m = _TwoLayer()
    state = m.state_dict()
    state["w1"][:] = 99.0
    assert not np.array_equal(m.w1.data, state["w1"])
