import numpy as np
import pytest

from conftest import central_difference, rel_err, triple_loop_matmul
from fedlora.adapters import LoraAdapter, StrategyKind, init_adapter
from fedlora.layers import (
    DropoutMask,
    LinearLayer,
    keep_all,
    linear_forward,
    lora_backward,
    lora_forward,
    make_dropout_mask,
    sequence_cross_entropy,
    softmax_cross_entropy,
    softmax_cross_entropy_rows,
)
from fedlora.linalg import RngStream, ShapeError


def _adapter(A, B, alpha, strategy=StrategyKind.PLORA, dropout=0.0):
    return LoraAdapter(A=np.asarray(A, float), B=np.asarray(B, float), rank=len(A), alpha=alpha, dropout=dropout, strategy=strategy)


def _random_setup(g, m=5, n=7, r=2):
    w0 = LinearLayer(g.standard_normal((m, n)), g.standard_normal(m))
    ad = _adapter(g.standard_normal((r, n)), g.standard_normal((m, r)), alpha=3.0)
    return w0, ad


# --- linear ----------------------------------------------------------------------

def test_linear_identity():
    layer = LinearLayer(np.eye(2), np.zeros(2))
    assert np.array_equal(linear_forward(layer, [5.0, 7.0]), [5.0, 7.0])


def test_linear_zero_weight():
    assert not linear_forward(LinearLayer(np.zeros((3, 2))), [1.0, 2.0]).any()


def test_linear_matches_dense_oracle(rng):
    g = rng.generator()
    w, x = g.standard_normal((4, 3)), g.standard_normal(3)
    assert np.array_equal(linear_forward(LinearLayer(w), x), triple_loop_matmul(w, x[:, None])[:, 0])


def test_linear_dimension_mismatch():
    with pytest.raises(ShapeError):
        linear_forward(LinearLayer(np.zeros((3, 2))), [1.0, 2.0, 3.0])


def test_batched_rows_equal_single_vectors(rng):
    g = rng.generator()
    w0, ad = _random_setup(g)
    xs = g.standard_normal((6, 7))
    batched = lora_forward(w0, ad, xs)
    for i in range(6):
        assert np.array_equal(batched[i], lora_forward(w0, ad, xs[i]))


# --- lora forward ----------------------------------------------------------------

def test_zero_b_is_frozen_forward(rng):
    g = rng.generator()
    w0 = LinearLayer(g.standard_normal((4, 6)), g.standard_normal(4))
    ad = _adapter(g.standard_normal((2, 6)), np.zeros((4, 2)), alpha=8.0)
    x = g.standard_normal(6)
    assert np.array_equal(lora_forward(w0, ad, x), linear_forward(w0, x))


def test_worked_example():
    w0 = LinearLayer(np.eye(2))
    ad = _adapter([[1.0, 1.0]], [[1.0], [0.0]], alpha=2.0)
    h = lora_forward(w0, ad, [1.0, 2.0])
    # oracle: W0 x + (alpha / r) B A x evaluated densely
    oracle = triple_loop_matmul(np.eye(2), np.array([[1.0], [2.0]]))[:, 0] + 2.0 * triple_loop_matmul(
        triple_loop_matmul(np.array([[1.0], [0.0]]), np.array([[1.0, 1.0]])), np.array([[1.0], [2.0]])
    )[:, 0]
    assert np.array_equal(h, oracle)
    assert h.tolist() == [7.0, 2.0]


def test_alpha_equal_rank_is_unscaled(rng):
    g = rng.generator()
    w0 = LinearLayer(g.standard_normal((4, 5)))
    A, B = g.standard_normal((3, 5)), g.standard_normal((4, 3))
    ad = _adapter(A, B, alpha=3.0)
    x = g.standard_normal(5)
    assert ad.scale == 1.0
    np.testing.assert_allclose(lora_forward(w0, ad, x), w0.weight @ x + B @ (A @ x), rtol=1e-13)


class _FakeAdapter:
    def __init__(self, A, B, r):
        self.A, self.B, self.rank, self.scale = A, B, r, 1.0


def test_rank_not_low_rejected():
    w0 = LinearLayer(np.eye(2))
    with pytest.raises(ShapeError, match="low-rank"):
        lora_forward(w0, _FakeAdapter(np.ones((2, 2)), np.ones((2, 2)), 2), [1.0, 1.0])


def test_lora_shape_mismatch():
    w0 = LinearLayer(np.zeros((4, 6)))
    ad = _adapter(np.zeros((2, 5)), np.zeros((4, 2)), 1.0)
    with pytest.raises(ShapeError):
        lora_forward(w0, ad, np.zeros(6))


def test_dropout_touches_adapter_path_only(rng):
    g = rng.generator()
    w0, ad = _random_setup(g)
    ad = ad.with_matrices(B=np.zeros_like(ad.B))
    x = g.standard_normal(7)
    mask = make_dropout_mask(7, 0.5, RngStream(3))
    assert np.array_equal(lora_forward(w0, ad, x, mask), linear_forward(w0, x))


# --- lora backward ---------------------------------------------------------------

def test_backward_zero_b_gives_zero_da(rng):
    g = rng.generator()
    w0 = LinearLayer(g.standard_normal((4, 6)))
    ad = _adapter(g.standard_normal((2, 6)), np.zeros((4, 2)), 8.0)
    grads = lora_backward(w0, ad, g.standard_normal(6), None, g.standard_normal(4))
    assert not grads.dA.any()
    assert grads.dB.any()


def test_backward_worked_example():
    w0 = LinearLayer(np.eye(2))
    ad = _adapter([[1.0, 1.0]], [[1.0], [0.0]], alpha=2.0)
    grads = lora_backward(w0, ad, [1.0, 2.0], None, [1.0, 1.0])
    assert grads.dB.tolist() == [[6.0], [6.0]]
    assert grads.dA.tolist() == [[2.0, 4.0]]
    # cross-check by finite differences of sum(h)
    fdB = central_difference(lambda B: lora_forward(w0, ad.with_matrices(B=B), [1.0, 2.0]).sum(), ad.B)
    fdA = central_difference(lambda A: lora_forward(w0, ad.with_matrices(A=A), [1.0, 2.0]).sum(), ad.A)
    np.testing.assert_allclose(fdB, grads.dB, rtol=1e-8)
    np.testing.assert_allclose(fdA, grads.dA, rtol=1e-8)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("rate", [0.0, 0.3])
def test_backward_matches_finite_differences(seed, rate):
    g = RngStream(seed).generator()
    w0, ad = _random_setup(g, m=6, n=9, r=3)
    x = g.standard_normal(9)
    mask = make_dropout_mask(9, rate, RngStream(seed, (1,)))
    grads = lora_backward(w0, ad, x, mask, np.ones(6))
    fdA = central_difference(lambda A: lora_forward(w0, ad.with_matrices(A=A), x, mask).sum(), ad.A)
    fdB = central_difference(lambda B: lora_forward(w0, ad.with_matrices(B=B), x, mask).sum(), ad.B)
    assert rel_err(grads.dA, fdA) < 1e-6
    assert rel_err(grads.dB, fdB) < 1e-6


def test_backward_batch_is_sum_of_rows(rng):
    g = rng.generator()
    w0, ad = _random_setup(g)
    xs, ups = g.standard_normal((4, 7)), g.standard_normal((4, 5))
    total = lora_backward(w0, ad, xs, None, ups)
    parts = [lora_backward(w0, ad, xs[i], None, ups[i]) for i in range(4)]
    np.testing.assert_allclose(total.dA, sum(p.dA for p in parts), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(total.dB, sum(p.dB for p in parts), rtol=1e-12, atol=1e-14)


def test_backward_upstream_shape_checked(rng):
    g = rng.generator()
    w0, ad = _random_setup(g)
    with pytest.raises(ShapeError):
        lora_backward(w0, ad, g.standard_normal(7), None, np.ones(4))


# --- cross entropy ---------------------------------------------------------------

def test_uniform_logits_loss_is_log_k():
    loss, _ = softmax_cross_entropy(np.zeros(4), 2)
    assert loss == pytest.approx(np.log(4), abs=1e-12)
    assert loss == pytest.approx(1.386294, abs=1e-6)


def test_saturated_logit():
    logits = np.zeros(5)
    logits[3] = 50.0
    loss, _ = softmax_cross_entropy(logits, 3)
    assert loss < 1e-9


def test_large_logits_stay_finite():
    loss, grad = softmax_cross_entropy(np.array([1000.0, -1000.0, 0.0]), 1)
    assert np.isfinite(loss) and np.all(np.isfinite(grad))


@pytest.mark.parametrize("seed", range(3))
def test_ce_gradient_finite_differences(seed):
    g = RngStream(seed).generator()
    logits = g.standard_normal(6) * 3
    _, grad = softmax_cross_entropy(logits, 4)
    fd = central_difference(lambda z: softmax_cross_entropy(z, 4)[0], logits)
    np.testing.assert_allclose(grad, fd, atol=1e-7)


def test_ce_target_out_of_range():
    with pytest.raises(IndexError):
        softmax_cross_entropy(np.zeros(3), 3)
    with pytest.raises(IndexError):
        softmax_cross_entropy(np.zeros(3), -1)


def test_rows_match_single(rng):
    g = rng.generator()
    logits, t = g.standard_normal((5, 4)), np.array([0, 3, 1, 1, 2])
    losses, grads = softmax_cross_entropy_rows(logits, t)
    for i in range(5):
        l, gr = softmax_cross_entropy(logits[i], t[i])
        assert losses[i] == pytest.approx(l, rel=1e-15, abs=1e-15)
        np.testing.assert_allclose(grads[i], gr, rtol=1e-14, atol=1e-16)


def test_sequence_length_one_reduces_to_single():
    z = np.array([0.3, -1.2, 2.0])
    loss, grads = sequence_cross_entropy([z], [2])
    single = softmax_cross_entropy(z, 2)
    assert loss == single[0]
    assert np.array_equal(grads[0], single[1])


def test_sequence_additive_uniform():
    loss, _ = sequence_cross_entropy([np.zeros(4), np.zeros(4)], [0, 3])
    assert loss == pytest.approx(2 * np.log(4), abs=1e-12)


def test_sequence_equals_sum_of_steps(rng):
    g = rng.generator()
    steps = [g.standard_normal(5) for _ in range(3)]
    targets = [1, 4, 0]
    loss, grads = sequence_cross_entropy(steps, targets)
    oracle = [softmax_cross_entropy(z, t) for z, t in zip(steps, targets)]
    assert loss == oracle[0][0] + oracle[1][0] + oracle[2][0]
    for g_, (_, og) in zip(grads, oracle):
        assert np.array_equal(g_, og)


def test_sequence_errors():
    with pytest.raises(ValueError):
        sequence_cross_entropy([], [])
    with pytest.raises(ShapeError):
        sequence_cross_entropy([np.zeros(3)], [0, 1])


# --- dropout ---------------------------------------------------------------------

def test_dropout_rate_zero_keeps_all():
    m = make_dropout_mask(10, 0.0, RngStream(1))
    assert m.keep.all() and m.scale == 1.0


def test_dropout_deterministic():
    a = make_dropout_mask(50, 0.3, RngStream(1, (2,)))
    b = make_dropout_mask(50, 0.3, RngStream(1, (2,)))
    assert np.array_equal(a.keep, b.keep)


def test_dropout_keep_fraction():
    m = make_dropout_mask(100_000, 0.1, RngStream(11))
    assert abs(m.keep.mean() - 0.9) < 0.005
    assert m.scale == pytest.approx(1 / 0.9)


def test_dropout_rate_one_rejected():
    with pytest.raises(ValueError):
        make_dropout_mask(4, 1.0, RngStream(1))


def test_eval_mask_is_identity():
    m = keep_all(5)
    x = np.arange(5.0)
    assert isinstance(m, DropoutMask) and np.array_equal(m.apply(x), x)


def test_inverted_dropout_expectation():
    x = np.linspace(0.5, 2.0, 8)
    root = RngStream(21)
    acc = np.zeros_like(x)
    trials = 10_000
    masks = make_dropout_mask(8, 0.1, root, batch=trials)
    acc = masks.apply(np.tile(x, (trials, 1))).mean(axis=0)
    assert np.all(np.abs(acc - x) <= 0.02 * x)


def test_init_adapter_integration_with_forward(rng):
    ad = init_adapter(4, 6, 2, 8.0, 0.1, "plora", rng)
    w0 = LinearLayer(np.ones((4, 6)))
    assert np.array_equal(lora_forward(w0, ad, np.ones(6)), np.full(4, 6.0))
