import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tvnerf import autodiff as ad
from tvnerf.errors import ConfigError, NumericError, StateError


def test_product_forward_and_backward():
    t = ad.Tape()
    a, b = t.input("a", 2.0), t.input("b", 3.0)
    c = a * b
    assert float(c.value) == 6.0
    g = t.backward(c)
    assert float(g["a"]) == 3.0 and float(g["b"]) == 2.0


def test_exp_of_zero():
    t = ad.Tape()
    assert float(ad.exp(t.input("x", 0.0)).value) == 1.0


def test_stop_gradient_blocks_only_wrapped_factor():
    t = ad.Tape()
    x = t.input("x", 2.0)
    y = ad.stop_gradient(x) * x
    assert float(t.backward(y)["x"]) == 2.0


def test_stop_gradient_adjoint_is_exactly_zero_for_any_seed():
    rng = np.random.default_rng(3)
    for _ in range(20):
        t = ad.Tape()
        x = t.input("x", rng.normal(size=4))
        y = ad.exp(ad.stop_gradient(x)) * 3.0
        g = t.backward(y, seed=rng.normal(size=4) * 1e3)
        assert np.all(g["x"] == 0.0)


def test_forward_eval_replays_bit_identically():
    t = ad.Tape()
    x = t.input("x")
    w = t.param("w", np.array([0.3, -1.2, 2.0]))
    y = ad.sum(ad.softplus(x * w) / (1.0 + ad.sigmoid(x)))
    v1 = t.forward_eval({"x": np.array([0.1, 0.2, 0.3])}, [y])[0]
    v2 = t.forward_eval({"x": np.array([0.1, 0.2, 0.3])}, [y])[0]
    assert v1.tobytes() == v2.tobytes()
    v3 = t.forward_eval({"x": np.array([1.0, 0.2, 0.3])}, [y])[0]
    assert v3 != v1


def test_forward_eval_errors():
    with pytest.raises(ConfigError):
        ad.Tape().forward_eval({})
    t = ad.Tape()
    x = t.input("x")
    ad.exp(x)
    with pytest.raises(ConfigError):
        t.forward_eval({})
    with pytest.raises(ConfigError):
        t.forward_eval({"x": 1.0, "nope": 2.0})


def test_non_finite_intermediate_reports_node():
    t = ad.Tape()
    x = t.input("x", 0.0)
    with pytest.raises(NumericError) as info:
        ad.log(x)
    assert info.value.where == 1


def test_backward_before_forward_is_a_state_error():
    t = ad.Tape()
    y = ad.exp(t.input("x"))
    with pytest.raises(StateError):
        t.backward(y)


def test_backward_rejects_non_finite_seed():
    t = ad.Tape()
    y = ad.exp(t.input("x", 1.0))
    with pytest.raises(NumericError):
        t.backward(y, seed=np.nan)


def test_gradients_are_deterministic():
    rng = np.random.default_rng(0)
    x0, w0 = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))

    def run():
        t = ad.Tape()
        y = ad.mean(ad.relu(t.input("x", x0) @ t.input("w", w0)) ** 2)
        g = t.backward(y)
        return g["x"].tobytes() + g["w"].tobytes()

    assert run() == run()


# one builder per differentiable primitive; inputs kept away from kinks
UNARY = {
    "exp": lambda x: ad.exp(x),
    "log": lambda x: ad.log(x * x + 0.5),
    "sigmoid": ad.sigmoid,
    "softplus": ad.softplus,
    "relu": lambda x: ad.relu(x),
    "neg": lambda x: -x,
    "pow": lambda x: (x * x + 1.0) ** 1.5,
    "clamp": lambda x: ad.clamp(x, -0.5, 0.5),
    "sum": lambda x: ad.sum(x, axis=0) * ad.sum(x),
    "mean": lambda x: ad.mean(x, axis=1, keepdims=True) * x,
    "cumsum": lambda x: ad.cumsum(x, axis=1, exclusive=True) * x,
    "reshape": lambda x: ad.reshape(x, (-1,)) * ad.reshape(x, (-1,)),
    "getitem": lambda x: x[1:, ::2] * 3.0,
    "concat": lambda x: ad.concat([x, x * x], axis=0),
}
BINARY = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 0.5),
    "maximum": ad.maximum,
    "minimum": ad.minimum,
    "matmul": lambda a, b: a @ ad.reshape(b, (3, 2)),
}


def _scalarize(out, weights):
    return ad.sum(out * weights[: out.value.size].reshape(out.value.shape))


def _away_from_kinks(x, margin=1e-3):
    x = x.copy()
    for kink in (0.0, -0.5, 0.5):
        near = np.abs(x - kink) < margin
        x[near] = kink + 2 * margin
    return x


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_matches_central_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    weights = rng.normal(size=64)
    worst = 0.0
    for _ in range(100):
        x = _away_from_kinks(rng.normal(size=(2, 3)))
        rep = ad.grad_check(lambda t, v: _scalarize(UNARY[name](v), weights), x, h=1e-5)
        worst = max(worst, rep.max_rel_error)
    assert worst <= 1e-6, worst


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_primitive_matches_central_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    weights = rng.normal(size=64)
    worst = 0.0
    for _ in range(100):
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(2, 3))
        if name in ("maximum", "minimum"):
            b = np.where(np.abs(a - b) < 1e-3, b + 0.01, b)
        x = np.stack([a, b])
        rep = ad.grad_check(lambda t, v: _scalarize(BINARY[name](v[0], v[1]), weights), x)
        worst = max(worst, rep.max_rel_error)
    assert worst <= 1e-6, worst


def test_gather_and_interp_match_finite_differences_and_each_other():
    rng = np.random.default_rng(7)
    table = rng.normal(size=(10, 2))
    index = rng.integers(0, 10, size=(6, 3, 8))
    weights = rng.uniform(size=(6, 3, 8))
    proj = rng.normal(size=(6, 3, 2))

    def fused(t, v):
        return ad.sum(ad.interp(v, index, weights) * proj)

    def unfused(t, v):
        return ad.sum(ad.sum(ad.gather(v, index) * weights[..., None], axis=2) * proj)

    for fn in (fused, unfused):
        assert ad.grad_check(fn, table).max_rel_error <= 1e-6
    t1, t2 = ad.Tape(), ad.Tape()
    g1 = t1.backward(fused(t1, t1.input("x", table)))["x"]
    g2 = t2.backward(unfused(t2, t2.input("x", table)))["x"]
    np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-14)


def test_less_carries_no_gradient():
    t = ad.Tape()
    x = t.input("x", np.array([0.1, 2.0]))
    y = ad.sum(ad.less(x, 1.0) * 5.0 + x)
    assert np.all(t.backward(y)["x"] == 1.0)


def test_clamp_gradient_is_one_inside_zero_outside():
    t = ad.Tape()
    x = t.input("x", np.array([-2.0, 0.0, 0.5, 1.0, 3.0]))
    g = t.backward(ad.sum(ad.clamp(x, 0.0, 1.0)))["x"]
    assert g.tolist() == [0.0, 1.0, 1.0, 1.0, 0.0]


def test_grad_check_quadratic_is_exact():
    rng = np.random.default_rng(1)
    rep = ad.grad_check(lambda t, v: ad.sum(v * v), rng.normal(size=7) * 5)
    assert rep.passed and rep.max_rel_error < 1e-9


def test_grad_check_flags_the_kink_of_abs():
    rep = ad.grad_check(lambda t, v: ad.sum(ad.maximum(v, -v)), np.array([0.0]))
    assert not rep.passed
    assert rep.worst_coordinate == 0


def test_frozen_detached_values_match_backward():
    # backward sees 2v / sg(v) = 2; the live function equals v and has slope 1
    fn = lambda t, v: ad.sum(v * v / ad.stop_gradient(v))
    x = np.array([0.7, -2.0, 3.0])
    assert not ad.grad_check(fn, x).passed
    rep = ad.grad_check(fn, x, freeze_detached=True)
    assert rep.passed and rep.max_rel_error < 1e-9
    np.testing.assert_allclose(rep.analytic, 2.0)


def test_replay_rejects_a_different_graph():
    t = ad.Tape()
    ad.stop_gradient(t.input("x", np.ones(2)))
    other = ad.Tape(replay=t.detached)
    with pytest.raises(ConfigError):
        ad.stop_gradient(other.input("x", np.ones(3)))


# ---------------------------------------------------------------------------
# parameters and Adam

def _store(theta):
    return ad.ParameterStore({"theta": np.array([theta])}, dtype=np.float64)


def test_adam_first_step_moves_by_learning_rate():
    s = _store(1.0)
    s.grad[...] = 0.37
    ad.adam_step(s, 1e-2)
    assert s.params[0] == pytest.approx(1.0 - 1e-2, abs=1e-9)
    assert s.step == 1 and np.all(s.grad == 0)


def test_adam_zero_gradient_leaves_parameters():
    s = _store(1.5)
    ad.adam_step(s, 1e-2)
    assert s.params[0] == 1.5 and s.step == 1


def test_adam_refuses_non_finite_gradient():
    s = _store(1.5)
    s.grad[...] = np.inf
    with pytest.raises(NumericError):
        ad.adam_step(s, 1e-2)
    assert s.params[0] == 1.5 and s.step == 0


def test_adam_converges_on_scalar_quadratic():
    s = _store(0.0)
    for _ in range(200):
        t = ad.Tape()
        theta = s.attach(t)["theta"]
        t.backward(ad.sum((theta - 3.0) ** 2))
        ad.adam_step(s, 0.1)
    assert abs(s.params[0] - 3.0) < 0.1


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=4))
def test_store_vectors_stay_aligned(sizes):
    arrays = {f"p{i}": np.ones(n) * i for i, n in enumerate(sizes)}
    s = ad.ParameterStore(arrays, dtype=np.float64)
    assert len(s.params) == len(s.grad) == len(s.m) == len(s.v) == sum(sizes)
    for i, n in enumerate(sizes):
        assert np.all(s[f"p{i}"] == i)
    parts = s.split(s.params)
    assert all(np.array_equal(parts[k], s[k]) for k in arrays)


def test_group_mask_selects_group_blocks():
    s = ad.ParameterStore({"a": np.zeros(3), "b": np.zeros(2)}, groups={"a": "grid"})
    assert s.group_mask("grid").tolist() == [True, True, True, False, False]
