import math

import numpy as np
import pytest

from actionprop import autodiff as ad
from actionprop.errors import ContractError, DomainError, NumericError, ShapeError


def finite_difference(fn, arrays, eps=1e-5):
    """Central finite differences of a scalar-valued fn over in-place arrays."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn()
            flat[i] = orig - eps
            lo = fn()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric):
    # relative above magnitude 1, absolute below: robust to FD noise near zero
    err = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        err = max(err, float(np.max(np.abs(a - n) / denom)))
    return err


def run_grad_check(build, seed, eps=1e-5):
    """build(rng) -> (arrays, forward) where forward(tensors) returns a scalar Tensor."""
    rng = np.random.default_rng(seed)
    arrays, forward = build(rng)

    def value():
        tensors = [ad.Tensor(a) for a in arrays]
        return forward(tensors).item()

    numeric = finite_difference(value, arrays, eps)

    tape = ad.Tape()
    tensors = [ad.Tensor(a, tape) for a in tensors_copy(arrays, tape)]
    loss = forward(tensors)
    ad.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    return max_rel_error(analytic, numeric)


def tensors_copy(arrays, tape):
    return [a.copy() for a in arrays]


def nudge_from(x, kinks, margin=1e-3):
    """Push values away from non-smooth points so FD stays valid."""
    for k in kinks:
        close = np.abs(x - k) < margin
        x[close] = k + margin * 10
    return x


def weighted_sum(out, rng_seed=123):
    w = np.random.default_rng(rng_seed).normal(size=out.data.shape)
    return ad.tsum(ad.mul(out, w))


# ---------------------------------------------------------------- primitives


class TestMatmul:
    def test_identity(self):
        a = ad.Tensor(np.eye(2))
        b = ad.Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(ad.matmul(a, b).data, [[1.0, 2.0], [3.0, 4.0]])

    def test_hand_arithmetic(self):
        out = ad.matmul(ad.Tensor([[1.0, 2.0]]), ad.Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((2, 3))))


class TestConv1d:
    def test_identity_kernel_bit_exact(self):
        x = ad.Tensor([[1.0, 2.0, 3.0]])
        w = ad.Tensor([[[1.0]]])
        b = ad.Tensor([0.0])
        out = ad.conv1d(x, w, b, stride=1, padding=0)
        assert np.array_equal(out.data, x.data)

    def test_box_kernel_hand_convolution(self):
        x = ad.Tensor([[1.0, 2.0, 3.0]])
        w = ad.Tensor([[[1.0, 1.0, 1.0]]])
        b = ad.Tensor([0.0])
        out = ad.conv1d(x, w, b, stride=1, padding=1)
        assert out.data.tolist() == [[3.0, 6.0, 5.0]]

    def test_kernel_wider_than_input(self):
        with pytest.raises(ShapeError):
            ad.conv1d(
                ad.Tensor(np.zeros((1, 2))),
                ad.Tensor(np.zeros((1, 1, 3))),
                ad.Tensor(np.zeros(1)),
            )

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (3, 2)])
    def test_output_length(self, stride, padding):
        t, k = 12, 3
        out = ad.conv1d(
            ad.Tensor(np.arange(2.0 * t).reshape(2, t)),
            ad.Tensor(np.ones((4, 2, k))),
            ad.Tensor(np.zeros(4)),
            stride=stride,
            padding=padding,
        )
        assert out.shape == (4, (t + 2 * padding - k) // stride + 1)


class TestSelfAttention:
    def test_single_position_identity_projections(self):
        x = np.array([[0.3, -1.2, 0.7]])
        eye = np.eye(3)
        out = ad.self_attention(*(ad.Tensor(v) for v in (x, eye, eye, eye, eye)))
        np.testing.assert_allclose(out.data, 2.0 * x, rtol=0, atol=1e-15)

    def test_two_zero_positions_give_uniform_attention(self):
        scores = ad.softmax_rows(ad.Tensor(np.zeros((2, 2))))
        np.testing.assert_allclose(scores.data, np.full((2, 2), 0.5), atol=1e-15)

    def test_matches_straight_line_reimplementation(self):
        rng = np.random.default_rng(0)
        x, wq, wk, wv, wo = (rng.normal(size=(3, 2)) if i == 0 else rng.normal(size=(2, 2)) for i in range(5))

        def reference(x, wq, wk, wv, wo):
            q, k, v = x @ wq, x @ wk, x @ wv
            s = q @ k.T / np.sqrt(x.shape[1])
            e = np.exp(s - s.max(axis=1, keepdims=True))
            a = e / e.sum(axis=1, keepdims=True)
            return a @ v @ wo + x

        out = ad.self_attention(*(ad.Tensor(v) for v in (x, wq, wk, wv, wo)))
        np.testing.assert_allclose(out.data, reference(x, wq, wk, wv, wo), atol=1e-10)

    @pytest.mark.parametrize("seed", range(3))
    def test_attention_rows_are_probability_vectors(self, seed):
        rng = np.random.default_rng(seed)
        x = ad.Tensor(rng.normal(size=(5, 4)))
        q = ad.matmul(x, ad.Tensor(rng.normal(size=(4, 4))))
        k = ad.matmul(x, ad.Tensor(rng.normal(size=(4, 4))))
        attn = ad.softmax_rows(ad.scale(ad.matmul(q, ad.transpose(k)), 0.5))
        assert np.all(attn.data >= 0)
        np.testing.assert_allclose(attn.data.sum(axis=1), 1.0, rtol=0, atol=1e-12)


class TestBceWithLogits:
    def test_logit_zero_target_one(self):
        out = ad.bce_with_logits(ad.Tensor(0.0), 1.0)
        assert abs(out.item() - math.log(2.0)) < 1e-15

    def test_saturated_correct_prediction(self):
        assert ad.bce_with_logits(ad.Tensor(50.0), 1.0).item() < 1e-20

    def test_target_half_symmetry(self):
        assert abs(ad.bce_with_logits(ad.Tensor(0.0), 0.5).item() - math.log(2.0)) < 1e-15

    def test_target_domain(self):
        with pytest.raises(DomainError):
            ad.bce_with_logits(ad.Tensor(0.0), 1.5)

    def test_stable_at_large_magnitude(self):
        assert np.isfinite(ad.bce_with_logits(ad.Tensor(-800.0), 0.0).item())


class TestSmoothL1:
    @pytest.mark.parametrize("d,expected", [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)])
    def test_values(self, d, expected):
        assert ad.smooth_l1(ad.Tensor(d), 0.0).item() == pytest.approx(expected, abs=1e-15)


class TestBackward:
    def test_sum_of_leaf_gives_ones(self):
        tape = ad.Tape()
        p = ad.Tensor(np.arange(6.0).reshape(2, 3), tape)
        ad.backward(ad.tsum(p))
        assert np.array_equal(p.grad, np.ones((2, 3)))

    def test_two_backward_calls_accumulate(self):
        tape = ad.Tape()
        p = ad.Tensor(np.ones(4), tape)
        loss = ad.tsum(ad.mul(p, p))
        ad.backward(loss)
        first = p.grad.copy()
        ad.backward(loss)
        assert np.array_equal(p.grad, 2.0 * first)

    def test_non_scalar_rejected(self):
        tape = ad.Tape()
        p = ad.Tensor(np.ones(3), tape)
        with pytest.raises(ContractError):
            ad.backward(ad.mul(p, 2.0))

    def test_unreachable_parameter_gets_zero(self):
        tape = ad.Tape()
        used = ad.Parameter("used", [1.0, 2.0])
        unused = ad.Parameter("unused", [3.0])
        x = ad.Tensor([1.0, 1.0], tape)
        loss = ad.tsum(ad.mul(x, used))
        tape.backward(loss, params=[used, unused])
        assert np.array_equal(used.grad, [1.0, 1.0])
        assert np.array_equal(unused.grad, [0.0])

    def test_mixing_tapes_rejected(self):
        a = ad.Tensor([1.0], ad.Tape())
        b = ad.Tensor([1.0], ad.Tape())
        with pytest.raises(ContractError):
            ad.add(a, b)


def test_non_finite_is_a_hard_error():
    with pytest.raises(NumericError):
        ad.exp(ad.Tensor(1000.0))
    with pytest.raises(NumericError):
        ad.Tensor(np.array([1.0, np.nan]))


def test_forward_determinism():
    def run():
        rng = np.random.default_rng(7)
        tape = ad.Tape()
        x = ad.Tensor(rng.normal(size=(4, 3)), tape)
        w = ad.Tensor(rng.normal(size=(3, 3)), tape)
        out = ad.self_attention(x[:, :], w, w, w, w)
        loss = ad.tsum(ad.sigmoid(out))
        ad.backward(loss)
        return out.data.copy(), x.grad.copy(), w.grad.copy()

    first, second = run(), run()
    for a, b in zip(first, second):
        assert np.array_equal(a, b)


# ------------------------------------------------------- gradient fidelity


def _build_add(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    return [a, b], lambda ts: weighted_sum(ad.add(ts[0], ts[1]))


def _build_sub_const(rng):
    a = rng.normal(size=(5,))
    return [a], lambda ts: weighted_sum(ad.sub(1.0, ts[0]))


def _build_mul(rng):
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(2, 3))
    return [a, b], lambda ts: weighted_sum(ad.mul(ts[0], ts[1]))


def _build_div(rng):
    a = rng.normal(size=(6,))
    b = rng.normal(size=(6,)) + np.sign(rng.normal(size=(6,))) * 2.0
    return [a, b], lambda ts: weighted_sum(ad.div(ts[0], ts[1]))


def _build_matmul(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    return [a, b], lambda ts: weighted_sum(ad.matmul(ts[0], ts[1]))


def _build_transpose(rng):
    a = rng.normal(size=(3, 4))
    return [a], lambda ts: weighted_sum(ad.transpose(ts[0]))


def _build_relu(rng):
    a = nudge_from(rng.normal(size=(4, 4)), [0.0])
    return [a], lambda ts: weighted_sum(ad.relu(ts[0]))


def _build_sigmoid(rng):
    a = rng.normal(size=(7,)) * 2.0
    return [a], lambda ts: weighted_sum(ad.sigmoid(ts[0]))


def _build_exp(rng):
    a = rng.normal(size=(5,))
    return [a], lambda ts: weighted_sum(ad.exp(ts[0]))


def _build_log(rng):
    a = np.abs(rng.normal(size=(5,))) + 0.5
    return [a], lambda ts: weighted_sum(ad.log(ts[0]))


def _build_clip(rng):
    a = nudge_from(rng.normal(size=(8,)) * 2.0, [-1.0, 1.0])
    return [a], lambda ts: weighted_sum(ad.clip(ts[0], -1.0, 1.0))


def _build_maximum(rng):
    a = rng.normal(size=(6,))
    b = rng.normal(size=(6,))
    gap = np.abs(a - b) < 1e-3
    b[gap] += 0.05
    return [a, b], lambda ts: weighted_sum(ad.maximum(ts[0], ts[1]))


def _build_minimum(rng):
    a = rng.normal(size=(6,))
    b = rng.normal(size=(6,))
    gap = np.abs(a - b) < 1e-3
    b[gap] += 0.05
    return [a, b], lambda ts: weighted_sum(ad.minimum(ts[0], ts[1]))


def _build_take_with_duplicates(rng):
    a = rng.normal(size=(3, 5))
    rows = np.array([0, 0, 2, 1])
    cols = np.array([1, 1, 4, 0])
    return [a], lambda ts: weighted_sum(ad.take(ts[0], (rows, cols)))


def _build_take_slice(rng):
    a = rng.normal(size=(4, 6))
    return [a], lambda ts: weighted_sum(ts[0][1:3])


def _build_repeat2(rng):
    a = rng.normal(size=(2, 5))
    return [a], lambda ts: weighted_sum(ad.repeat2(ts[0]))


def _build_softmax(rng):
    a = rng.normal(size=(3, 4))
    return [a], lambda ts: weighted_sum(ad.softmax_rows(ts[0]))


def _build_conv1d(rng):
    x = rng.normal(size=(3, 10))
    w = rng.normal(size=(2, 3, 3))
    b = rng.normal(size=(2,))
    return [x, w, b], lambda ts: weighted_sum(ad.conv1d(ts[0], ts[1], ts[2], stride=2, padding=1))


def _build_attention(rng):
    x = rng.normal(size=(4, 3))
    mats = [rng.normal(size=(3, 3)) * 0.5 for _ in range(4)]
    return [x] + mats, lambda ts: weighted_sum(ad.self_attention(*ts))


def _build_bce(rng):
    a = rng.normal(size=(6,)) * 2.0
    t = rng.uniform(size=(6,))
    return [a], lambda ts: weighted_sum(ad.bce_with_logits(ts[0], t))


def _build_smooth_l1(rng):
    a = rng.normal(size=(8,)) * 2.0
    t = np.zeros(8)
    nudge_from(a, [-1.0, 1.0])
    return [a], lambda ts: weighted_sum(ad.smooth_l1(ts[0], t))


ALL_BUILDERS = [
    _build_add, _build_sub_const, _build_mul, _build_div, _build_matmul,
    _build_transpose, _build_relu, _build_sigmoid, _build_exp, _build_log,
    _build_clip, _build_maximum, _build_minimum, _build_take_with_duplicates,
    _build_take_slice, _build_repeat2, _build_softmax, _build_conv1d,
    _build_attention, _build_bce, _build_smooth_l1,
]


@pytest.mark.parametrize("build", ALL_BUILDERS, ids=lambda b: b.__name__[7:])
@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(build, seed):
    assert run_grad_check(build, seed) <= 1e-6
