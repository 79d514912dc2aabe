"""Tests for the autodiff core: op semantics, gradient checks, the check
harness itself, checkpoints and optimizers."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spatialdiar.nn import (
    Adam,
    ConformerBlock,
    Dropout,
    Film,
    LayerNorm,
    Linear,
    Module,
    NumericError,
    Parameter,
    SelfAttention,
    Sgd,
    Tac,
    Tensor,
    WeightedLayerSum,
    analytic_gradients,
    cross_entropy,
    grad_check,
    load_checkpoint,
    max_relative_error,
    numeric_gradients,
    save_checkpoint,
)
from spatialdiar.nn import tensor as T


def mixdown(x, seed=99):
    """Random linear functional so the gradcheck target is a scalar."""
    w = Tensor(np.random.default_rng(seed).normal(size=x.shape))
    return T.tsum(T.mul(x, w))


# ----------------------------------------------------------------------
# linear

def test_linear_identity():
    lin = Linear(3, 3)
    lin.initialize(0)
    lin.w.data = np.eye(3)
    x = Tensor(np.array([[1.0, 2.0, 3.0]]))
    np.testing.assert_allclose(lin(x).data, x.data)


def test_linear_hand_arithmetic():
    lin = Linear(2, 2)
    lin.initialize(0)
    lin.w.data = np.eye(2)
    lin.b.data = np.array([3.0, 4.0])
    out = lin(Tensor(np.array([[1.0, 2.0]])))
    np.testing.assert_allclose(out.data, [[4.0, 6.0]])


def test_linear_gradcheck():
    rng = np.random.default_rng(0)
    lin = Linear(4, 5)
    lin.initialize(3)
    x = Tensor(rng.normal(size=(3, 4)))
    err = grad_check(lambda: T.tsum(lin(x)), [x, lin.w, lin.b])
    assert err < 1e-6


def test_linear_shape_mismatch():
    lin = Linear(4, 2)
    lin.initialize(0)
    with pytest.raises(ValueError):
        lin(Tensor(np.zeros((2, 3))))


# ----------------------------------------------------------------------
# layer norm

def test_layer_norm_constant_rows():
    ln = LayerNorm(6)
    ln.initialize(0)
    out = ln(Tensor(np.full((4, 6), 3.5)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_layer_norm_statistics():
    rng = np.random.default_rng(1)
    ln = LayerNorm(64)
    ln.initialize(0)
    out = ln(Tensor(rng.normal(2.0, 3.0, size=(10, 64)))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-3)


def test_layer_norm_gradcheck():
    rng = np.random.default_rng(2)
    ln = LayerNorm(5)
    ln.initialize(0)
    ln.gain.data = rng.normal(size=5) * 0.1
    ln.bias.data = rng.normal(size=5) * 0.1
    x = Tensor(rng.normal(size=(3, 5)))
    err = grad_check(lambda: mixdown(ln(x)), [x, ln.gain, ln.bias])
    assert err < 1e-4


# ----------------------------------------------------------------------
# attention

def test_attention_single_frame_is_value_path():
    rng = np.random.default_rng(3)
    att = SelfAttention(4, 2)
    att.initialize(1)
    x = Tensor(rng.normal(size=(1, 4)))
    expected = att.wo(att.wv(x))
    np.testing.assert_allclose(att(x).data, expected.data, atol=1e-12)


def test_attention_identical_frames_identical_outputs():
    att = SelfAttention(6, 2)
    att.initialize(2)
    row = np.random.default_rng(4).normal(size=6)
    out = att(Tensor(np.tile(row, (5, 1)))).data
    for t in range(1, 5):
        np.testing.assert_allclose(out[t], out[0], atol=1e-12)


def test_attention_gradcheck():
    rng = np.random.default_rng(5)
    att = SelfAttention(4, 2)
    att.initialize(3)
    x = Tensor(rng.normal(size=(3, 4)))
    err = grad_check(lambda: mixdown(att(x)), [x] + att.parameters())
    assert err < 1e-4


def test_attention_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        SelfAttention(5, 2)


# ----------------------------------------------------------------------
# FiLM

def test_film_identity_at_zero_init():
    film = Film(4, 3)
    film.initialize(0)
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(size=(5, 4)))
    cond = Tensor(rng.normal(size=(5, 3)))
    np.testing.assert_array_equal(film(x, cond).data, x.data)


def test_film_zero_cond_closed_form():
    film = Film(3, 2)
    film.initialize(0)
    bg = np.array([0.5, -0.25, 0.0])
    bb = np.array([1.0, 2.0, 3.0])
    film.gamma.b.data = bg
    film.beta.b.data = bb
    x = np.random.default_rng(7).normal(size=(4, 3))
    out = film(Tensor(x), Tensor(np.zeros((4, 2))))
    np.testing.assert_allclose(out.data, (1.0 + bg) * x + bb, atol=1e-12)


def test_film_gradcheck():
    rng = np.random.default_rng(8)
    film = Film(4, 2)
    film.initialize(0)
    for p in film.parameters():
        p.data = rng.normal(size=p.data.shape) * 0.3
    x = Tensor(rng.normal(size=(3, 4)))
    cond = Tensor(rng.normal(size=(3, 2)))
    err = grad_check(lambda: mixdown(film(x, cond)), [x, cond] + film.parameters())
    assert err < 1e-4


def test_film_time_mismatch():
    film = Film(4, 2)
    film.initialize(0)
    with pytest.raises(ValueError):
        film(Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 2))))


# ----------------------------------------------------------------------
# TAC

def test_tac_single_stream_shape_preserving():
    tac = Tac(4)
    tac.initialize(0)
    x = Tensor(np.random.default_rng(9).normal(size=(1, 6, 4)))
    assert tac(x).shape == (1, 6, 4)


def test_tac_permutation_equivariance():
    tac = Tac(5)
    tac.initialize(1)
    rng = np.random.default_rng(10)
    x = rng.normal(size=(4, 3, 5))
    perm = [2, 0, 3, 1]
    out = tac(Tensor(x)).data
    out_perm = tac(Tensor(x[perm])).data
    np.testing.assert_allclose(out_perm, out[perm], atol=1e-6)


def test_tac_gradcheck():
    rng = np.random.default_rng(11)
    tac = Tac(4)
    tac.initialize(2)
    x = Tensor(rng.normal(size=(3, 2, 4)))
    err = grad_check(lambda: mixdown(tac(x)), [x] + tac.parameters())
    assert err < 1e-4


def test_tac_rejects_empty():
    tac = Tac(4)
    tac.initialize(0)
    with pytest.raises(ValueError):
        tac(Tensor(np.zeros((4, 4))))


# ----------------------------------------------------------------------
# conformer block

def test_conformer_runs_on_single_frame():
    blk = ConformerBlock(6, 2, ff_mult=2)
    blk.initialize(0)
    out = blk(Tensor(np.random.default_rng(12).normal(size=(1, 6))))
    assert out.shape == (1, 6)


@pytest.mark.parametrize("shape", [(5, 8), (20, 16)])
def test_conformer_preserves_shape(shape):
    blk = ConformerBlock(shape[1], 2, ff_mult=2)
    blk.initialize(1)
    out = blk(Tensor(np.random.default_rng(13).normal(size=shape)))
    assert out.shape == shape


def test_conformer_gradcheck():
    rng = np.random.default_rng(14)
    blk = ConformerBlock(4, 2, ff_mult=2, kernel=3)
    blk.initialize(2)
    x = Tensor(rng.normal(size=(4, 4)))
    err = grad_check(lambda: mixdown(blk(x)), [x] + blk.parameters())
    assert err < 1e-4


# ----------------------------------------------------------------------
# weighted layer sum

def test_weighted_sum_single_layer():
    wls = WeightedLayerSum(1)
    wls.initialize(0)
    wls.logits.data = np.array([3.21])
    x = Tensor(np.random.default_rng(15).normal(size=(3, 4)))
    np.testing.assert_allclose(wls([x]).data, x.data, atol=1e-12)


def test_weighted_sum_uniform_logits():
    wls = WeightedLayerSum(2)
    wls.initialize(0)
    a = Tensor(np.full((2, 3), 1.0))
    b = Tensor(np.full((2, 3), 3.0))
    np.testing.assert_allclose(wls([a, b]).data, 2.0, atol=1e-12)


def test_weighted_sum_gradcheck():
    rng = np.random.default_rng(16)
    wls = WeightedLayerSum(3)
    wls.initialize(0)
    wls.logits.data = rng.normal(size=3)
    layers = [Tensor(rng.normal(size=(2, 3))) for _ in range(3)]
    err = grad_check(lambda: mixdown(wls(layers)), layers + [wls.logits])
    assert err < 1e-4


def test_weighted_sum_convex_hull():
    rng = np.random.default_rng(17)
    wls = WeightedLayerSum(3)
    wls.initialize(0)
    wls.logits.data = rng.normal(size=3)
    layers = [rng.normal(size=(4, 2)) for _ in range(3)]
    out = wls([Tensor(a) for a in layers]).data
    stacked = np.stack(layers)
    assert np.all(out <= stacked.max(axis=0) + 1e-12)
    assert np.all(out >= stacked.min(axis=0) - 1e-12)


# ----------------------------------------------------------------------
# cross entropy

def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((6, 4)))
    loss = cross_entropy(logits, np.zeros(6, dtype=int))
    assert float(loss.data) == pytest.approx(np.log(4.0), rel=1e-9)


def test_cross_entropy_large_margin_goes_to_zero():
    logits = np.full((5, 3), -100.0)
    logits[np.arange(5), [0, 1, 2, 1, 0]] = 100.0
    loss = cross_entropy(Tensor(logits), np.array([0, 1, 2, 1, 0]))
    assert float(loss.data) < 1e-8


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(18)
    logits = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    targets = np.array([0, 2, 1, 1])
    loss = cross_entropy(logits, targets)
    loss.backward()
    probs = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    onehot = np.zeros((4, 3))
    onehot[np.arange(4), targets] = 1.0
    np.testing.assert_allclose(logits.grad, (probs - onehot) / 4.0, atol=1e-10)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(19)
    out = T.softmax(Tensor(rng.normal(scale=8.0, size=(20, 7)))).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


# ----------------------------------------------------------------------
# gradcheck harness

def test_gradcheck_constant_function_zero_error():
    x = Tensor(np.ones((2, 2)))
    err = grad_check(lambda: T.tsum(T.mul(x, 0.0)), [x])
    assert err == 0.0


def test_gradcheck_detects_corrupted_gradient():
    rng = np.random.default_rng(20)
    lin = Linear(3, 3)
    lin.initialize(5)
    x = Tensor(rng.normal(size=(2, 3)))
    fn = lambda: T.tsum(lin(x))
    analytic = analytic_gradients(fn, [x])
    numeric = numeric_gradients(fn, [x])
    assert max_relative_error(analytic, numeric) < 1e-4
    corrupted = [g.copy() for g in analytic]
    corrupted[0].flat[0] *= 1.10
    assert max_relative_error(corrupted, numeric) > 1e-4


def test_gradcheck_nonfinite_raises():
    x = Tensor(np.array([[0.0]]))
    with np.errstate(divide="ignore"):
        with pytest.raises(NumericError):
            grad_check(lambda: T.tsum(T.log(x)), [x])


# ----------------------------------------------------------------------
# checkpoints

class TwoLayer(Module):
    def __init__(self):
        self.a = Linear(3, 4)
        self.b = Linear(4, 2)


def test_checkpoint_bit_exact_round_trip(tmp_path):
    m = TwoLayer()
    m.initialize(7, dtype=np.float32)
    save_checkpoint(m, tmp_path / "m.ckpt")
    first = (tmp_path / "m.ckpt").read_bytes()
    m2 = TwoLayer()
    m2.initialize(99, dtype=np.float32)
    load_checkpoint(m2, tmp_path / "m.ckpt")
    for (_, p1), (_, p2) in zip(m.named_parameters(), m2.named_parameters()):
        assert np.array_equal(p1.data, p2.data)
    save_checkpoint(m2, tmp_path / "m2.ckpt")
    assert (tmp_path / "m2.ckpt").read_bytes() == first


def test_checkpoint_shape_mismatch(tmp_path):
    m = TwoLayer()
    m.initialize(0)
    save_checkpoint(m, tmp_path / "m.ckpt")

    class Other(Module):
        def __init__(self):
            self.a = Linear(3, 5)
            self.b = Linear(5, 2)

    other = Other()
    other.initialize(0)
    with pytest.raises(ValueError):
        load_checkpoint(other, tmp_path / "m.ckpt")


# ----------------------------------------------------------------------
# optimizers and freezing

def test_sgd_step_and_zero_lr():
    m = TwoLayer()
    m.initialize(1)
    before = [p.data.copy() for p in m.parameters()]
    for p in m.parameters():
        p.grad = np.ones_like(p.data)
    Sgd(m.parameters(), lr=0.0).step()
    for p, b in zip(m.parameters(), before):
        assert np.array_equal(p.data, b)
    Sgd(m.parameters(), lr=0.1).step()
    for p, b in zip(m.parameters(), before):
        assert not np.array_equal(p.data, b)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_optimizers_respect_random_freeze_masks(seed):
    rng = np.random.default_rng(seed)
    m = TwoLayer()
    m.initialize(seed)
    params = m.parameters()
    mask = rng.random(len(params)) < 0.5
    for p, frozen in zip(params, mask):
        p.frozen = bool(frozen)
    before = [p.data.copy() for p in params]
    opt = Adam(params, lr=0.05) if seed % 2 else Sgd(params, lr=0.05)
    for _ in range(3):
        for p in params:
            p.grad = rng.normal(size=p.data.shape)
        opt.step()
    for p, frozen, b in zip(params, mask, before):
        if frozen:
            assert np.array_equal(p.data, b)
        else:
            assert not np.array_equal(p.data, b)


def test_dropout_deterministic_under_seed():
    d1 = Dropout(0.4)
    d1.training = True
    d1.rng = np.random.default_rng(5)
    d2 = Dropout(0.4)
    d2.training = True
    d2.rng = np.random.default_rng(5)
    x = Tensor(np.ones((8, 8)))
    np.testing.assert_array_equal(d1(x).data, d2(x).data)
    assert not np.array_equal(d1(x).data, x.data)


def test_parameter_name_uniqueness_enforced():
    class Clash(Module):
        def __init__(self):
            self.p = Parameter((2,))
            self.sub = self  # cycle would duplicate names

    c = Clash()
    with pytest.raises((ValueError, RecursionError)):
        c.initialize(0)
