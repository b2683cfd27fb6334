"""Kernel tests against independent float64 oracles.

The oracles at the top are written directly from the definitions (naive
loops, explicit formulas) and never call into the package, so a kernel
bug cannot hide in both places.
"""

import math

import numpy as np
import pytest

import skiff.kernels as K
from skiff.errors import ConfigError, NumericError, ShapeError
from skiff.kernels import GradTape, Tensor, grad_check


# ----------------------------------------------------------------- oracles

def oracle_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Left-to-right float64 summation, rounded once to float32."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out.astype(np.float32)


def oracle_softmax(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def oracle_log_softmax(x: np.ndarray) -> np.ndarray:
    return np.log(oracle_softmax(x))


def oracle_layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
                      eps: float = 1e-5) -> np.ndarray:
    x = x.astype(np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def oracle_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Single-head softmax(Q K^T / sqrt(d)) V in float64."""
    q, k, v = (a.astype(np.float64) for a in (q, k, v))
    scores = q @ k.T / math.sqrt(q.shape[-1])
    return oracle_softmax(scores) @ v


# ------------------------------------------------------------------ matmul

class TestMatmul:
    def test_matches_loop_oracle_exactly(self):
        # Float64 accumulation makes the order of partial sums irrelevant
        # after the final rounding, so the naive loop reproduces it bit
        # for bit.
        rng = np.random.default_rng(13)
        for _ in range(20):
            m, k, n = rng.integers(1, 9, size=3)
            a = rng.normal(size=(m, k)).astype(np.float32)
            b = rng.normal(size=(k, n)).astype(np.float32)
            got = K.matmul(Tensor(a), Tensor(b)).data
            want = oracle_matmul(a, b)
            assert got.dtype == np.float32
            assert np.array_equal(got, want)

    def test_batched_broadcast(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(3, 2, 4)).astype(np.float32)
        b = rng.normal(size=(4, 5)).astype(np.float32)
        got = K.matmul(Tensor(a), Tensor(b)).data
        for i in range(3):
            assert np.array_equal(got[i], oracle_matmul(a[i], b))

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            K.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
        with pytest.raises(ShapeError):
            K.matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))


# ----------------------------------------------------------- softmax + norm

class TestSoftmax:
    def test_extreme_logits_do_not_overflow(self):
        out = K.softmax(Tensor(np.array([[1000.0, 0.0]], dtype=np.float32))).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-6)

    def test_matches_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            x = rng.normal(scale=3.0, size=(4, 7)).astype(np.float32)
            got = K.softmax(Tensor(x)).data
            np.testing.assert_allclose(got, oracle_softmax(x), rtol=1e-6, atol=1e-6)
            np.testing.assert_allclose(got.sum(axis=-1), 1.0, rtol=1e-6)

    def test_log_softmax_matches_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.normal(scale=2.0, size=(5, 9)).astype(np.float32)
        got = K.log_softmax(Tensor(x)).data
        np.testing.assert_allclose(got, oracle_log_softmax(x), rtol=1e-5, atol=1e-6)

    def test_neg_inf_mask_yields_exact_zero_weight(self):
        x = np.array([[0.5, 0.2, 0.9]], dtype=np.float32)
        masked = x + np.array([[0.0, K.NEG_INF, 0.0]], dtype=np.float32)
        out = K.softmax(Tensor(masked)).data
        assert out[0, 1] == 0.0
        np.testing.assert_allclose(out.sum(), 1.0, rtol=1e-6)


class TestLayerNorm:
    def test_two_point_row(self):
        out = K.layer_norm(Tensor(np.array([[1.0, -1.0]], dtype=np.float32)),
                           Tensor(np.ones(2, dtype=np.float32)),
                           Tensor(np.zeros(2, dtype=np.float32))).data
        np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-4)

    def test_matches_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 4, 6)).astype(np.float32)
        gain = rng.normal(size=6).astype(np.float32)
        bias = rng.normal(size=6).astype(np.float32)
        got = K.layer_norm(Tensor(x), Tensor(gain), Tensor(bias)).data
        np.testing.assert_allclose(got, oracle_layer_norm(x, gain, bias),
                                   rtol=1e-5, atol=1e-5)

    def test_constant_row_stays_finite(self):
        out = K.layer_norm(Tensor(np.full((1, 4), 3.0, dtype=np.float32)),
                           Tensor(np.ones(4, dtype=np.float32)),
                           Tensor(np.zeros(4, dtype=np.float32))).data
        assert np.isfinite(out).all()

    def test_bad_gain_shape(self):
        with pytest.raises(ShapeError):
            K.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(4)))


# --------------------------------------------------------------- attention

def _identity_weights(d: int) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    eye = np.eye(d, dtype=np.float32)
    return Tensor(eye), Tensor(eye), Tensor(eye), Tensor(eye)


class TestMultiHeadAttention:
    def test_single_position_returns_value_row(self):
        rng = np.random.default_rng(11)
        d = 4
        q = rng.normal(size=(1, d)).astype(np.float32)
        v = rng.normal(size=(1, d)).astype(np.float32)
        out = K.multi_head_attention(Tensor(q), Tensor(q), Tensor(v), 1,
                                     *_identity_weights(d)).data
        np.testing.assert_allclose(out, v, rtol=1e-6)

    def test_matches_formula_oracle(self):
        rng = np.random.default_rng(12)
        d = 4
        q = rng.normal(size=(3, d)).astype(np.float32)
        k = rng.normal(size=(3, d)).astype(np.float32)
        v = rng.normal(size=(3, d)).astype(np.float32)
        out = K.multi_head_attention(Tensor(q), Tensor(k), Tensor(v), 1,
                                     *_identity_weights(d)).data
        np.testing.assert_allclose(out, oracle_attention(q, k, v), rtol=1e-5, atol=1e-5)

    def test_causal_mask_blocks_future(self):
        rng = np.random.default_rng(14)
        d, n = 4, 5
        base = rng.normal(size=(n, d)).astype(np.float32)
        bumped = base.copy()
        bumped[3:] += 10.0
        weights = _identity_weights(d)
        a = K.multi_head_attention(Tensor(base), Tensor(base), Tensor(base), 2,
                                   *weights, mask="causal").data
        b = K.multi_head_attention(Tensor(bumped), Tensor(bumped), Tensor(bumped), 2,
                                   *weights, mask="causal").data
        # Positions before the perturbation never attend to it.
        np.testing.assert_array_equal(a[:3], b[:3])

    def test_head_split_requires_divisibility(self):
        x = Tensor(np.zeros((2, 6), dtype=np.float32))
        with pytest.raises(ConfigError):
            K.multi_head_attention(x, x, x, 4, *_identity_weights(6))


# ----------------------------------------------------------- forward sweep

class TestForwardFiniteness:
    def test_random_small_inputs_stay_finite(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            n, d = rng.integers(1, 9, size=2)
            x = Tensor(rng.normal(scale=5.0, size=(n, d)).astype(np.float32))
            gain = Tensor(np.ones(d, dtype=np.float32))
            bias = Tensor(np.zeros(d, dtype=np.float32))
            for out in (K.softmax(x), K.log_softmax(x), K.relu(x), K.sigmoid(x),
                        K.layer_norm(x, gain, bias), K.reduce_mean(x),
                        K.matmul(x, K.transpose(x))):
                assert np.isfinite(out.data).all()


# ------------------------------------------------------------- tape basics

class TestGradTape:
    def test_no_tape_records_nothing(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        y = K.mul(x, x)
        assert y.requires_grad
        assert x.grad is None

    def test_constant_inputs_record_nothing(self):
        with GradTape() as tape:
            K.mul(Tensor(np.ones(3)), Tensor(np.ones(3)))
        assert len(tape) == 0

    def test_reused_tensor_accumulates(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with GradTape() as tape:
            loss = K.reduce_sum(K.add(x, x))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with GradTape() as tape:
            y = K.mul(x, 2.0)
        with pytest.raises(ShapeError):
            tape.backward(y)

    def test_backward_runs_once(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with GradTape() as tape:
            loss = K.reduce_sum(x)
        tape.backward(loss)
        with pytest.raises(Exception):
            tape.backward(loss)

    def test_backward_ops_counts_executed_records(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with GradTape() as tape:
            K.mul(x, 3.0)  # dead branch: never reaches the loss
            loss = K.reduce_sum(K.mul(x, 2.0))
        tape.backward(loss)
        assert len(tape) == 3
        assert tape.backward_ops == 2

    def test_frozen_branch_skipped(self):
        frozen = Tensor(np.ones((2, 2)), requires_grad=False)
        live = Tensor(np.ones((2, 2)), requires_grad=True)
        with GradTape() as tape:
            a = K.matmul(frozen, frozen)  # depends on nothing trainable
            loss = K.reduce_sum(K.add(K.matmul(live, live), a))
        tape.backward(loss)
        assert frozen.grad is None
        assert live.grad is not None


# -------------------------------------------------------------- grad_check

class TestGradCheck:
    def test_linear_function_is_exact(self):
        # Integer points and a power-of-two epsilon make the central
        # difference of a sum exact in float64: relative error is 0.
        point = Tensor(np.array([1.0, 2.0, -3.0, 5.0]))
        err = grad_check(lambda x: K.reduce_sum(x), point, epsilon=2.0 ** -13)
        assert err == 0.0

    def test_quadratic_function(self):
        point = Tensor(np.array([1.0, 2.0]))
        err = grad_check(lambda x: K.reduce_sum(K.mul(x, x)), point, epsilon=2.0 ** -13)
        assert err < 1e-6

    def test_epsilon_bounds(self):
        point = Tensor(np.ones(2))
        with pytest.raises(ConfigError):
            grad_check(lambda x: K.reduce_sum(x), point, epsilon=1e-6)
        with pytest.raises(ConfigError):
            grad_check(lambda x: K.reduce_sum(x), point, epsilon=1e-2)

    def test_non_finite_value_raises(self):
        point = Tensor(np.ones(2))
        with pytest.raises(NumericError):
            grad_check(lambda x: K.mul(K.reduce_sum(x), float("inf")), point)

    def test_non_scalar_function_rejected(self):
        with pytest.raises(ShapeError):
            grad_check(lambda x: x, Tensor(np.ones(3)))


def _spread_values(rng: np.random.Generator, shape) -> np.ndarray:
    """Values with pairwise gaps well above the probe step, so kinked ops
    (relu, max) stay differentiable at the sample point."""
    n = int(np.prod(shape))
    base = (np.arange(n) + 1) * 0.37 - 0.5 * n * 0.37
    base[np.abs(base) < 0.05] += 0.11
    return rng.permutation(base).reshape(shape)


GRAD_CASES = [
    ("matmul", lambda x: K.reduce_sum(K.matmul(x, K.transpose(x))), (3, 4)),
    ("add", lambda x: K.reduce_sum(K.add(x, 1.5)), (2, 3)),
    ("sub", lambda x: K.reduce_sum(K.sub(1.0, x)), (2, 3)),
    ("mul", lambda x: K.reduce_sum(K.mul(x, x)), (2, 3)),
    ("neg", lambda x: K.reduce_sum(K.neg(x)), (4,)),
    ("relu", lambda x: K.reduce_sum(K.relu(x)), (3, 3)),
    ("sigmoid", lambda x: K.reduce_sum(K.sigmoid(x)), (3, 3)),
    ("softmax", lambda x: K.reduce_sum(K.mul(K.softmax(x), K.softmax(x))), (2, 5)),
    ("log_softmax", lambda x: K.reduce_sum(K.mul(K.log_softmax(x), 0.1)), (2, 5)),
    ("layer_norm", lambda x: K.reduce_sum(K.layer_norm(
        x, Tensor(np.full(4, 1.3)), Tensor(np.full(4, -0.2)))), (3, 4)),
    ("embedding", lambda x: K.reduce_sum(K.embedding(x, np.array([0, 2, 2]))), (3, 4)),
    ("concat", lambda x: K.reduce_sum(K.concat([x, K.mul(x, 2.0)], axis=-1)), (2, 3)),
    ("reshape", lambda x: K.reduce_sum(K.mul(K.reshape(x, (6,)), 3.0)), (2, 3)),
    ("transpose", lambda x: K.reduce_sum(K.matmul(K.transpose(x), x)), (2, 3)),
    ("slice_axis", lambda x: K.reduce_sum(K.slice_axis(x, 1, 1, 3)), (2, 4)),
    ("reduce_mean", lambda x: K.reduce_sum(K.mul(K.reduce_mean(x, axis=1), 2.0)), (3, 4)),
    ("gather_last", lambda x: K.reduce_sum(K.gather_last(x, np.array([1, 0, 2]))), (3, 4)),
    ("masked_max", lambda x: K.reduce_sum(K.masked_max(
        x, np.array([[True, True, False, True]] * 3), axis=1)), (3, 4)),
    ("bce", lambda x: K.bce_with_logits(x, np.array([[1.0, 0.0, 1.0]])), (1, 3)),
    ("mha", lambda x: K.reduce_sum(K.multi_head_attention(
        x, x, x, 2, Tensor(np.eye(4) * 0.7), Tensor(np.eye(4) * 1.1),
        Tensor(np.eye(4) * 0.9), Tensor(np.eye(4) * 0.8), mask="causal")), (3, 4)),
]


class TestBackwardSweep:
    @pytest.mark.parametrize("name,f,shape", GRAD_CASES, ids=[c[0] for c in GRAD_CASES])
    def test_gradients_match_central_differences(self, name, f, shape):
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            point = Tensor(_spread_values(rng, shape))
            assert grad_check(f, point) < 1e-4, f"{name} seed {seed}"


# ------------------------------------------------------------ odds and ends

class TestSmallOps:
    def test_embedding_rejects_out_of_range_ids(self):
        table = Tensor(np.zeros((4, 2)))
        with pytest.raises(ShapeError):
            K.embedding(table, np.array([0, 4]))

    def test_slice_axis_bounds(self):
        with pytest.raises(ShapeError):
            K.slice_axis(Tensor(np.zeros((2, 3))), 1, 2, 5)

    def test_gather_last_picks_entries(self):
        x = Tensor(np.arange(12, dtype=np.float32).reshape(3, 4))
        out = K.gather_last(x, np.array([0, 1, 3]))
        np.testing.assert_array_equal(out.data, [0.0, 5.0, 11.0])

    def test_masked_max_ignores_masked_positions(self):
        x = Tensor(np.array([[1.0, 9.0, 2.0]], dtype=np.float32))
        keep = np.array([[True, False, True]])
        out = K.masked_max(x, keep, axis=1)
        assert out.data[0] == 2.0

    def test_masked_max_needs_one_live_position(self):
        with pytest.raises(ShapeError):
            K.masked_max(Tensor(np.ones((1, 2))), np.array([[False, False]]), axis=1)

    def test_bce_matches_manual_value(self):
        z = np.array([[0.0, 2.0]], dtype=np.float32)
        t = np.array([[1.0, 0.0]])
        got = K.bce_with_logits(Tensor(z), t).item()
        want = np.mean([-math.log(0.5), -math.log(1.0 - 1.0 / (1.0 + math.exp(-2.0)))])
        assert abs(got - want) < 1e-6

    def test_causal_mask_layout(self):
        m = K.causal_mask(3)
        assert m[0, 1] == K.NEG_INF and m[1, 0] == 0.0 and m[2, 2] == 0.0
