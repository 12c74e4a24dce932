import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vinil import tensor as T
from vinil.losses import (HyperParams, barlow_twins, batch_normalize, combined_objective,
                          cross_correlation, cross_entropy)
from vinil.tensor import ShapeError, Tensor

# orthogonal +-1 columns over a batch of 4: normalized cross-correlation is the identity
HADAMARD = np.array([[1, 1, 1], [1, -1, 1], [-1, 1, 1], [-1, -1, -1]], dtype=float)
HADAMARD[:, 2] = [1, -1, -1, 1]


def _bt_oracle(z, zp, w_b):
    """Direct loop over the formula with population std."""
    b, d = z.shape
    zn = (z - z.mean(0)) / z.std(0)
    zpn = (zp - zp.mean(0)) / zp.std(0)
    total = 0.0
    for i in range(d):
        for j in range(d):
            c = sum(zn[k, i] * zpn[k, j] for k in range(b)) / b
            total += (1 - c) ** 2 if i == j else w_b * c * c
    return total


def _well_spread(rng, b, d):
    return rng.normal(size=(b, d)) * rng.uniform(0.5, 3, size=d) + rng.normal(size=d)


class TestCrossEntropy:
    def test_uniform(self):
        assert cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), rel=1e-15)

    def test_saturated(self):
        assert cross_entropy(Tensor([[10.0, -10.0]]), [0]).item() < 1e-4

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            logits = rng.normal(size=(4, 3)) * 3
            labels = rng.integers(0, 3, size=4)
            p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
            expected = -np.mean(np.log(p[np.arange(4), labels]))
            assert cross_entropy(Tensor(logits), labels).item() == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("labels", [[0, 3], [-1, 0]])
    def test_out_of_range(self, labels):
        with pytest.raises(ValueError, match="labels"):
            cross_entropy(Tensor(np.zeros((2, 3))), labels)

    def test_label_shape(self):
        with pytest.raises(ShapeError):
            cross_entropy(Tensor(np.zeros((2, 3))), [0])

    def test_gradcheck(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            labels = rng.integers(0, 4, size=5)
            T.gradcheck(lambda a: cross_entropy(a, labels), [rng.normal(size=(5, 4))])

    @given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)))
    def test_nonnegative(self, logits):
        assert cross_entropy(Tensor(logits), [0, 1, 3]).item() >= 0


class TestBatchNormalize:
    def test_symmetric_column(self):
        np.testing.assert_array_equal(batch_normalize(Tensor([[1.0], [-1.0]])).values, [[1.0], [-1.0]])

    def test_shifted_column(self):
        np.testing.assert_array_equal(batch_normalize(Tensor([[0.0], [2.0]])).values, [[-1.0], [1.0]])

    def test_constant_column(self):
        out = batch_normalize(Tensor([[5.0, 1.0], [5.0, 2.0], [5.0, 4.0]])).values
        assert (out[:, 0] == 0).all()
        assert out[:, 1].std() == pytest.approx(1.0, rel=1e-12)

    def test_single_row(self):
        with pytest.raises(ValueError, match="2 rows"):
            batch_normalize(Tensor([[1.0, 2.0]]))

    def test_constant_column_no_gradient(self):
        z = Tensor(np.column_stack([np.full(4, 2.0), np.arange(4.0)]), requires_grad=True)
        with T.Tape():
            T.backward(T.sum(T.mul(batch_normalize(z), np.arange(8.0).reshape(4, 2))))
        assert not z.grad[:, 0].any()


class TestCrossCorrelation:
    def test_hand_example(self):
        z = np.array([[1.0, -1.0], [-1.0, 1.0]])
        np.testing.assert_array_equal(cross_correlation(z, z).values, [[1, -1], [-1, 1]])

    def test_orthogonal_columns(self):
        c = cross_correlation(HADAMARD, HADAMARD).values
        np.testing.assert_allclose(c, np.eye(3), atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError, match="cross_correlation"):
            cross_correlation(np.ones((3, 2)), np.ones((3, 4)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 12), st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_bounded(self, b, d, seed):
        rng = np.random.default_rng(seed)
        c = cross_correlation(rng.normal(size=(b, d)), rng.normal(size=(b, d))).values
        assert np.abs(c).max() <= 1 + 1e-12


class TestBarlowTwins:
    def test_identity_is_zero(self):
        assert barlow_twins(HADAMARD, HADAMARD, 0.03).item() < 1e-9

    def test_hand_example(self):
        z = np.array([[1.0, -1.0], [-1.0, 1.0]])
        assert barlow_twins(z, z, 0.03).item() == pytest.approx(0.06, abs=1e-15)

    def test_zero_correlation_gives_width(self):
        # orthogonal columns across views: every C entry vanishes
        z = HADAMARD[:, :1]
        zp = HADAMARD[:, 1:2]
        assert barlow_twins(z, zp, 0.03).item() == pytest.approx(1.0, abs=1e-15)
        z2 = HADAMARD[:, [0, 1]]
        zp2 = np.column_stack([HADAMARD[:, 2], HADAMARD[:, 2]])
        assert cross_correlation(z2, zp2).values == pytest.approx(np.zeros((2, 2)), abs=1e-15)
        assert barlow_twins(z2, zp2, 0.03).item() == pytest.approx(2.0, abs=1e-15)

    def test_matches_loop_oracle(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            z, zp = _well_spread(rng, 6, 4), _well_spread(rng, 6, 4)
            assert barlow_twins(z, zp, 0.03).item() == pytest.approx(_bt_oracle(z, zp, 0.03), rel=1e-12)

    def test_gradcheck_end_to_end(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            T.gradcheck(lambda a, b: barlow_twins(a, b, 0.03), [_well_spread(rng, 6, 3), _well_spread(rng, 6, 3)])

    def test_gradcheck_through_projection(self):
        for seed in range(10):
            rng = np.random.default_rng(100 + seed)
            x, xp = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
            T.gradcheck(lambda w: barlow_twins(T.matmul(x, w), T.matmul(xp, w), 0.03), [rng.normal(size=(4, 3))])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(3, 10), st.integers(1, 5), st.integers(0, 2**31 - 1))
    def test_nonnegative(self, b, d, seed):
        rng = np.random.default_rng(seed)
        assert barlow_twins(rng.normal(size=(b, d)), rng.normal(size=(b, d))).item() >= 0

    @settings(max_examples=60, deadline=None)
    @given(st.integers(3, 10), st.integers(1, 5), st.integers(0, 2**31 - 1), st.booleans())
    def test_affine_invariance(self, b, d, seed, second):
        rng = np.random.default_rng(seed)
        z, zp = _well_spread(rng, b, d), _well_spread(rng, b, d)
        scale = np.exp(rng.uniform(-3, 3, size=d))
        shift = rng.normal(size=d) * 10
        base = barlow_twins(z, zp).item()
        c0 = cross_correlation(z, zp).values
        if second:
            zp = zp * scale + shift
        else:
            z = z * scale + shift
        assert abs(barlow_twins(z, zp).item() - base) < 1e-9
        np.testing.assert_allclose(cross_correlation(z, zp).values, c0, atol=1e-9, rtol=0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(3, 10), st.integers(1, 5), st.integers(0, 2**31 - 1))
    def test_batch_permutation_invariance(self, b, d, seed):
        rng = np.random.default_rng(seed)
        z, zp = _well_spread(rng, b, d), _well_spread(rng, b, d)
        perm = rng.permutation(b)
        assert barlow_twins(z[perm], zp[perm]).item() == pytest.approx(barlow_twins(z, zp).item(), abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(3, 10), st.integers(1, 5), st.integers(0, 2**31 - 1))
    def test_zero_iff_identity(self, b, d, seed):
        rng = np.random.default_rng(seed)
        z, zp = _well_spread(rng, b, d), _well_spread(rng, b, d)
        c = cross_correlation(z, zp).values
        loss = barlow_twins(z, zp).item()
        assume(not np.allclose(c, np.eye(d), atol=1e-6))
        assert loss > 0


class TestCombined:
    def test_fine_tuning_case(self):
        assert combined_objective(2.5, 99.0, 1.0) == 2.5

    def test_returns_same_tensor_at_one(self):
        t = Tensor(2.5)
        assert combined_objective(t, Tensor(99.0), 1.0) is t

    def test_equal_inputs(self):
        assert combined_objective(1.0, 1.0, 0.7) == pytest.approx(1.0, abs=1e-15)

    def test_mix(self):
        assert combined_objective(2.0, 1.0, 0.7) == pytest.approx(1.7, abs=1e-15)
        assert combined_objective(Tensor(2.0), Tensor(1.0), 0.7).item() == pytest.approx(1.7, abs=1e-15)

    @pytest.mark.parametrize("w", [-0.1, 1.5])
    def test_out_of_range(self, w):
        with pytest.raises(ValueError):
            combined_objective(1.0, 1.0, w)


class TestHyperParams:
    def test_defaults(self):
        h = HyperParams()
        assert (h.w_c, h.w_b, h.momentum, h.base_lr) == (0.7, 0.03, 0.9, 0.001)
        assert (h.batch_size, h.epochs_per_session) == (64, 20)

    @pytest.mark.parametrize("kwargs", [dict(w_c=1.2), dict(w_b=0.0), dict(batch_size=0),
                                        dict(epochs_per_session=-1)])
    def test_rejects(self, kwargs):
        with pytest.raises(ValueError):
            HyperParams(**kwargs)
