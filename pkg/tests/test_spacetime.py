import numpy as np
import pytest

from neoact import nn
from neoact.gradcheck import grad_check
from neoact.spacetime import (PatchConfig, SpaceTimeConfig, SpaceTimeModel, add_positional, divided_block,
                              expected_param_count, extract_patches, init_head_bias, patch_embed)
from neoact.tensor import DimensionError, Tensor, parameter
from neoact.training import wbce_loss

from oracles import naive_divided_block

TINY = SpaceTimeConfig(PatchConfig(P=8, d=8, H=16, W=16, T=2), depth=1, n_heads=2)


def _randomize(params, rng, scale=0.3):
    for t in params.values():
        t.data[...] = rng.normal(size=t.shape) * scale


# -- patch embedding and positional encodings ---------------------------------------

def test_patch_counts_and_zero_embedding():
    cfg = PatchConfig()
    assert cfg.n_patches == 16
    z = patch_embed(np.random.default_rng(0).random((8, 32, 32, 3)), cfg, Tensor(np.zeros((cfg.d, cfg.patch_dim))))
    assert z.shape == (8, 16, 64) and not z.data.any()


def test_single_pixel_hits_one_patch():
    cfg = PatchConfig(P=8, d=5, H=16, W=16, T=1)
    e = np.random.default_rng(1).normal(size=(cfg.d, cfg.patch_dim))
    frames = np.zeros((1, 16, 16, 3))
    frames[0, 9, 3, 2] = 0.7                         # patch row 1, col 0 -> index 2
    z = patch_embed(frames, cfg, Tensor(e)).data[0]
    nonzero = np.flatnonzero(np.abs(z).sum(axis=1))
    assert list(nonzero) == [2]
    col = (9 % 8) * 8 * 3 + 3 * 3 + 2
    assert np.allclose(z[2], 0.7 * e[:, col], atol=0, rtol=1e-15)


def test_resolution_mismatch():
    with pytest.raises(DimensionError):
        extract_patches(np.zeros((2, 24, 32, 3)), PatchConfig())
    with pytest.raises(DimensionError):
        PatchConfig(P=7)


def test_add_positional_matches_loop():
    rng = np.random.default_rng(2)
    z, ps, pt = rng.normal(size=(3, 4, 5)), rng.normal(size=(4, 5)), rng.normal(size=(3, 5))
    got = add_positional(Tensor(z), Tensor(ps), Tensor(pt)).data
    want = np.empty_like(z)
    for t in range(3):
        for j in range(4):
            want[t, j] = z[t, j] + ps[j] + pt[t]
    assert np.array_equal(got, want)
    assert np.array_equal(add_positional(Tensor(np.zeros_like(z)), Tensor(ps), Tensor(pt)).data,
                          ps[None] + pt[:, None])
    assert np.array_equal(add_positional(Tensor(z), Tensor(0 * ps), Tensor(0 * pt)).data, z)


# -- divided attention -----------------------------------------------------------------

def _block_params(rng, d):
    p = {}
    p.update(nn.init_attention(rng, "space", d))
    p.update(nn.init_attention(rng, "time", d))
    p.update(nn.init_ffn(rng, "ffn", d))
    _randomize(p, rng)
    return p


@pytest.mark.parametrize("T,n_p", [(2, 2), (1, 3), (3, 1)])
def test_divided_block_matches_naive_oracle(T, n_p):
    rng = np.random.default_rng(T * 10 + n_p)
    d = 4
    p = _block_params(rng, d)
    x = rng.normal(size=(T * n_p, d))
    got, _ = divided_block(Tensor(x), p, T, n_p, 2)
    want = naive_divided_block(x, {k: v.data for k, v in p.items()}, T, n_p, 2)
    assert np.max(np.abs(got.data - want)) <= 1e-10


def test_divided_block_token_count_error():
    p = _block_params(np.random.default_rng(0), 4)
    with pytest.raises(DimensionError):
        divided_block(Tensor(np.zeros((5, 4))), p, 2, 2, 2)


def test_batch_order_invariance():
    model = SpaceTimeModel(TINY, seed=3)
    _randomize(model.params, np.random.default_rng(3), 0.1)
    x = np.random.default_rng(4).random((3, 2, 16, 16, 3))
    a = model.predict(x)
    b = model.predict(x[::-1])[::-1]
    assert np.allclose(a, b, atol=1e-12)
    assert np.allclose(a[1], model.predict(x[1:2])[0], atol=1e-12)


# -- head ---------------------------------------------------------------------------------

def test_init_head_bias_examples():
    assert init_head_bias([0.5])[0] == 0.0
    assert abs(init_head_bias([0.25])[0] + 1.0986) < 1e-4
    b = init_head_bias([0.75, 0.25])
    assert b[0] == -b[1]
    for bad in ([0.0], [1.0], [0.2, 1.2]):
        with pytest.raises(ValueError):
            init_head_bias(bad)


@pytest.mark.parametrize("priors", [(0.1, 0.2, 0.3, 0.4), (0.5, 0.5, 0.5, 0.5)])
def test_prior_bias_reproduces_priors(priors):
    model = SpaceTimeModel(TINY, seed=0, priors=priors, zero_head=True)
    rng = np.random.default_rng(5)
    for scale in (0.0, 1.0, 50.0):
        out = model.predict(rng.normal(size=(4, 2, 16, 16, 3)) * scale)
        assert np.max(np.abs(out - np.array(priors))) <= 1e-9


def test_outputs_in_open_unit_interval():
    model = SpaceTimeModel(TINY, seed=1)
    _randomize(model.params, np.random.default_rng(1), 1.0)
    out = model.predict(np.random.default_rng(2).normal(size=(6, 2, 16, 16, 3)) * 10)
    assert np.all((out > 0) & (out < 1))


# -- counting, gradients, persistence ------------------------------------------------------

def test_param_count_matches_enumeration():
    for cfg in (SpaceTimeConfig(), TINY, SpaceTimeConfig(PatchConfig(P=4, d=16, H=16, W=8, T=3), depth=3)):
        model = SpaceTimeModel(cfg)
        assert model.n_params == expected_param_count(cfg) == sum(t.size for t in model.params.values())
    assert SpaceTimeModel().n_params == 147780
    assert len({id(t) for t in SpaceTimeModel(TINY).params.values()}) == len(SpaceTimeModel(TINY).params)


def test_end_to_end_gradient_tiny_config():
    model = SpaceTimeModel(TINY, seed=7)
    rng = np.random.default_rng(7)
    _randomize(model.params, rng, 0.2)
    clip = rng.random((2, 16, 16, 3))
    y = np.array([[1.0, 0.0, 0.0, 1.0]])
    rep = grad_check(lambda: wbce_loss(model(clip[None]), y, [2.0, 1.0, 3.0, 1.0]), model.trainable())
    assert rep.n_checked == model.n_params
    assert rep.max_rel_error <= 1e-4, rep.worst


def test_frame_order_matters():
    model = SpaceTimeModel(TINY, seed=8)
    _randomize(model.params, np.random.default_rng(8), 0.3)
    x = np.random.default_rng(9).random((1, 2, 16, 16, 3))
    assert not np.allclose(model.predict(x), model.predict(x[:, ::-1]))


def test_checkpoint_round_trip(tmp_path):
    model = SpaceTimeModel(TINY, seed=4, priors=(0.1, 0.2, 0.3, 0.4))
    model.save(tmp_path / "m.ckpt")
    back = SpaceTimeModel.load(tmp_path / "m.ckpt")
    assert back.cfg == model.cfg
    for k, v in model.params.items():
        assert back.params[k].data.tobytes() == v.data.tobytes()
    x = np.random.default_rng(0).random((2, 2, 16, 16, 3))
    assert model.predict(x).tobytes() == back.predict(x).tobytes()
