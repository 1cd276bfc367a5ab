import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neoact import nn
from neoact import tensor as ops
from neoact.gradcheck import DeterminismError, grad_check
from neoact.tensor import DimensionError, GradTape, NumericError, Tensor, parameter

from oracles import naive_mhsa


def _check(loss_fn, params, tol=1e-4):
    rep = grad_check(loss_fn, params)
    assert rep.max_rel_error <= tol, rep.worst
    return rep


# -- primitive gradients -------------------------------------------------------

UNARY = {
    "exp": lambda x: ops.exp(x),
    "log": lambda x: ops.log(ops.exp(x) + 1.0),
    "tanh": ops.tanh,
    "sigmoid": ops.sigmoid,
    "gelu": ops.gelu,
    "power": lambda x: ops.power(x * x + 1.0, 1.5),
    "neg": lambda x: -x,
    "mean": lambda x: ops.mean(x, axis=-1, keepdims=True),
    "transpose": lambda x: ops.swap_last(x),
    "reshape": lambda x: x.reshape(-1),
    "index": lambda x: x[..., 1:],
    "fancy_index": lambda x: x[np.array([0, 0, 1])],
    "clip": lambda x: ops.clip(x, -0.5, 0.5),
    "softmax": lambda x: ops.softmax(x, axis=-1),
    "masked_softmax": lambda x: ops.softmax(x, axis=-1, mask=np.tril(np.ones((x.shape[-2], x.shape[-1]), bool))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 10_000), rows=st.integers(2, 4), cols=st.integers(2, 5))
def test_unary_gradients(name, seed, rows, cols):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(rows, cols))
    if name == "clip":
        data = np.where(np.abs(np.abs(data) - 0.5) < 1e-3, 0.1, data)
    x = parameter(data)
    w = rng.normal(size=UNARY[name](Tensor(data)).shape)
    _check(lambda: (UNARY[name](x) * w).sum(), {"x": x})


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 4), k=st.integers(1, 4), m=st.integers(1, 4))
def test_binary_gradients(seed, n, k, m):
    rng = np.random.default_rng(seed)
    a = parameter(rng.normal(size=(2, n, k)))
    b = parameter(rng.normal(size=(k, m)))
    c = parameter(rng.normal(size=(m,)))
    d = parameter(rng.normal(size=(2, n, m)) + 3.0)
    w = rng.normal(size=(2, n, m))
    _check(lambda: (((a @ b) + c) * d / (d * d) * w).sum(), {"a": a, "b": b, "c": c, "d": d})
    e = parameter(rng.normal(size=(2, m, k)))
    _check(lambda: ((a @ ops.swap_last(e)) * w).sum(), {"a": a, "e": e})
    _check(lambda: (ops.concat([a, a * 2.0], axis=-1) ** 2).sum() + (ops.broadcast_to(c, (3, m)) * 1.5).sum(),
           {"a": a, "c": c})


def test_layer_norm_gradient():
    rng = np.random.default_rng(3)
    x = parameter(rng.normal(size=(3, 6)))
    g = parameter(rng.normal(size=6))
    b = parameter(rng.normal(size=6))
    w = rng.normal(size=(3, 6))
    _check(lambda: (ops.layer_norm(x, g, b) * w).sum(), {"x": x, "g": g, "b": b})


# -- sigmoid and softmax ----------------------------------------------------------

def test_sigmoid_examples():
    assert ops.sigmoid(Tensor(0.0)).item() == 0.5
    with np.errstate(over="raise"):
        big = ops.sigmoid(Tensor(np.array([50.0, 800.0, -800.0]))).data
    assert abs(big[0] - 1.0) <= 1e-15 and big[1] == 1.0 and 0.0 <= big[2] < 1e-300
    assert abs(ops.sigmoid(Tensor(-1.0986)).item() - 0.25) <= 1e-4
    v = ops.sigmoid(Tensor(np.linspace(-30, 30, 101))).data
    assert np.all((v > 0) & (v < 1)) and np.all(np.isfinite(v))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 500.0))
def test_softmax_rows_sum_to_one(seed, scale):
    x = np.random.default_rng(seed).normal(size=(4, 7)) * scale
    s = ops.softmax(Tensor(x), axis=-1).data
    assert np.all(np.abs(s.sum(axis=-1) - 1.0) <= 1e-12)
    mask = np.tril(np.ones((4, 7), bool))
    sm = ops.softmax(Tensor(x), axis=-1, mask=mask).data
    assert np.all(sm[~mask] == 0.0)
    assert np.all(np.abs(sm.sum(axis=-1) - 1.0) <= 1e-12)


# -- attention ------------------------------------------------------------------------

def _attn_params(rng, d):
    return nn.init_attention(rng, "a", d)


def test_mhsa_matches_naive_oracle():
    rng = np.random.default_rng(0)
    p = {k: v for k, v in nn.sub_params(_attn_params(rng, 8), "a").items()}
    for t in p.values():
        t.data[...] = rng.normal(size=t.shape) * 0.5
    x = rng.normal(size=(4, 8))
    got = nn.mhsa(Tensor(x), p, 2).data
    want = naive_mhsa(x, {k: v.data for k, v in p.items()}, 2)
    assert np.max(np.abs(got - want)) <= 1e-10


def test_mhsa_single_token_and_symmetry():
    rng = np.random.default_rng(1)
    d = 4
    p = nn.sub_params(_attn_params(rng, d), "a")
    p["q.w"].data[...] = 0.0
    p["k.w"].data[...] = 0.0
    p["v.w"].data[...] = np.eye(d)
    p["o.w"].data[...] = np.eye(d)
    x = rng.normal(size=(1, d))
    h = ops.layer_norm(Tensor(x), p["ln.g"], p["ln.b"]).data
    out = nn.mhsa(Tensor(x), p, 2).data
    assert np.allclose(out, x + h, atol=1e-12)

    two = np.repeat(rng.normal(size=(1, d)), 2, axis=0)
    o = nn.mhsa(Tensor(two), nn.sub_params(_attn_params(rng, d), "a"), 2).data
    assert np.array_equal(o[0], o[1])
    assert o.shape == two.shape


def test_mhsa_errors():
    rng = np.random.default_rng(2)
    p = nn.sub_params(_attn_params(rng, 6), "a")
    with pytest.raises(DimensionError):
        nn.mhsa(Tensor(np.zeros((3, 6))), p, 4)
    with pytest.raises(DimensionError):
        nn.mhsa(Tensor(np.zeros((3, 8))), p, 2)
    bad = np.zeros((3, 6))
    bad[1, 2] = np.nan
    with pytest.raises(NumericError):
        nn.mhsa(Tensor(bad), p, 2)


def test_mhsa_gradient():
    rng = np.random.default_rng(4)
    params = _attn_params(rng, 4)
    x = parameter(rng.normal(size=(3, 4)))
    w = rng.normal(size=(3, 4))
    _check(lambda: (nn.mhsa(x, nn.sub_params(params, "a"), 2) * w).sum(), {"x": x, **params})


# -- tape and grad_check contract -----------------------------------------------------------

def test_tape_gives_every_parameter_a_gradient_of_its_shape():
    rng = np.random.default_rng(5)
    a = parameter(rng.normal(size=(3, 2)))
    b = parameter(rng.normal(size=(2,)))
    unused_const = Tensor(rng.normal(size=(3, 2)))
    loss = ((a * unused_const + b) ** 2).sum()
    tape = GradTape.from_root(loss)
    assert tape.ops
    tape.backward()
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    assert unused_const.grad is None


def test_grad_check_quadratic_and_frozen_exclusion():
    rng = np.random.default_rng(6)
    p = parameter(rng.normal(size=(5,)))
    frozen = Tensor(rng.normal(size=(3,)))
    rep = grad_check(lambda: (p * p).sum() + (frozen * frozen).sum(), {"p": p, "frozen": frozen})
    assert rep.max_rel_error <= 1e-8
    assert set(rep.per_param) == {"p"} and rep.n_checked == 5


def test_grad_check_rejects_nondeterminism_and_bad_epsilon():
    p = parameter(np.ones(2))
    rng = np.random.default_rng(0)
    with pytest.raises(DeterminismError):
        grad_check(lambda: (p * rng.normal()).sum(), {"p": p})
    with pytest.raises(ValueError):
        grad_check(lambda: p.sum(), {"p": p}, epsilon=1e-2)


def test_forward_is_bit_identical():
    rng = np.random.default_rng(7)
    params = _attn_params(rng, 8)
    x = rng.normal(size=(2, 5, 8))
    a = nn.mhsa(Tensor(x), nn.sub_params(params, "a"), 2).data
    b = nn.mhsa(Tensor(x), nn.sub_params(params, "a"), 2).data
    assert a.tobytes() == b.tobytes()


def test_no_grad_builds_no_graph():
    p = parameter(np.ones(3))
    with ops.no_grad():
        y = (p * 2.0).sum()
    assert not y.requires_grad
