import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protoprop import numgrad as ng
from protoprop.errors import ContractError, ShapeError
from protoprop.numgrad import Tape, Tensor, backward, fd_check
from protoprop.protolayer import (
    FeatureExtractor,
    PrototypeSet,
    average_pool,
    ce_loss,
    cluster_cost,
    compat_scores,
    extract_features,
    separation_cost,
    similarity_map,
    softmax_pool,
)


def protos(arr, kind="attribute"):
    return PrototypeSet(Tensor(np.asarray(arr, dtype=float), requires_grad=True), kind)


def one_hot_map():
    # 2 x 2 map, C = 2: patch (0, 0) is e1, patch (1, 1) is e2
    fm = np.zeros((2, 2, 2))
    fm[0, 0] = [1, 0]
    fm[1, 1] = [0, 1]
    return fm


class TestExtractor:
    def test_shapes(self):
        fe = FeatureExtractor.init(np.random.default_rng(0))
        out = fe(np.zeros((2, 32, 32, 3)))
        assert out.shape == (2, 4, 4, 64)
        assert extract_features(np.zeros((32, 32, 3)), fe).shape == (4, 4, 64)

    def test_zero_image_zero_map(self):
        fe = FeatureExtractor.init(np.random.default_rng(1))
        assert np.all(fe(np.zeros((1, 32, 32, 3))).data == 0)

    def test_kernel_five(self):
        fe = FeatureExtractor.init(np.random.default_rng(0), kernel=5)
        assert fe.padding == 2 and fe(np.ones((1, 32, 32, 3))).shape == (1, 4, 4, 64)

    def test_even_kernel(self):
        with pytest.raises(ContractError):
            FeatureExtractor.init(np.random.default_rng(0), kernel=4)

    def test_parameters(self):
        fe = FeatureExtractor.init(np.random.default_rng(0))
        assert len(fe.parameters()) == 6 and fe.out_channels == 64


class TestSimilarity:
    def test_identity_prototypes(self):
        sm = similarity_map(one_hot_map(), protos(np.eye(2))).data
        np.testing.assert_array_equal(sm[..., 0], [[1, 0], [0, 0]])
        np.testing.assert_array_equal(sm[..., 1], [[0, 0], [0, 1]])

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            similarity_map(np.zeros((2, 2, 3)), protos(np.eye(2)))

    def test_compat_is_max(self):
        rng = np.random.default_rng(2)
        sm = rng.normal(size=(3, 4, 4, 5))
        np.testing.assert_array_equal(compat_scores(sm).data, sm.reshape(3, 16, 5).max(axis=1))

    def test_compat_tie_gradient_first_patch(self):
        sm = Tensor(np.ones((2, 2, 1)), requires_grad=True)
        with Tape() as tape:
            out = compat_scores(sm).sum()
        g = backward(tape, out, [sm])[sm]
        assert g[0, 0, 0] == 1 and g.sum() == 1


class TestCrossEntropy:
    def test_uniform(self):
        assert ce_loss(np.zeros(3), 1).item() == pytest.approx(math.log(3), abs=1e-15)

    def test_oracle(self):
        s = np.array([1.0, 2.0, 0.5])
        oracle = -math.log(math.exp(2) / (math.exp(1) + math.exp(2) + math.exp(0.5)))
        assert ce_loss(s, 1).item() == pytest.approx(oracle, abs=1e-12)

    def test_bad_label(self):
        with pytest.raises(ContractError):
            ce_loss(np.zeros(3), 3)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(2, 6), st.integers(0, 2**31 - 1))
    def test_nonnegative_batch_mean(self, b, k, seed):
        rng = np.random.default_rng(seed)
        s = rng.normal(scale=5, size=(b, k))
        y = rng.integers(0, k, size=b)
        rows = [ce_loss(s[i], y[i]).item() for i in range(b)]
        total = ce_loss(s, y).item()
        assert total >= 0 and total == pytest.approx(np.mean(rows), rel=1e-12)


class TestClusterSeparation:
    def test_hand_oracle(self):
        fm = one_hot_map()
        ps = protos([[1, 0], [0, 1], [1, 1]])
        # class 0: nearest patch is e1 exactly
        assert cluster_cost(fm, ps, 0).item() == 0.0
        # class 2 prototype (1, 1): nearest patch e1 or e2 at squared distance 1
        assert cluster_cost(fm, ps, 2).item() == 1.0
        # wrong classes for label 0 are (0,1) and (1,1); e2 hits (0,1) at 0
        assert separation_cost(fm, ps, 0).item() == 0.0
        # label 1: wrong are (1,0) [dist 0 via e1]
        assert separation_cost(fm, ps, 1).item() == 0.0

    def test_separation_oracle(self):
        rng = np.random.default_rng(3)
        fm = rng.normal(size=(2, 3, 3, 4))
        p = rng.normal(size=(5, 4))
        y = np.array([1, 4])
        want = []
        for b in range(2):
            x = fm[b].reshape(9, 4)
            d = ((x[:, None] - p[None]) ** 2).sum(-1)
            want.append(np.delete(d, y[b], axis=1).min())
        assert separation_cost(fm, protos(p), y).item() == pytest.approx(-np.mean(want), rel=1e-12)

    def test_single_prototype(self):
        with pytest.raises(ContractError):
            separation_cost(one_hot_map(), protos([[1, 0]]), 0)

    def test_gradients(self):
        rng = np.random.default_rng(4)
        fm = Tensor(rng.normal(size=(2, 2, 2, 3)), requires_grad=True)
        ps = protos(rng.normal(size=(4, 3)))
        y = [0, 3]
        assert fd_check(lambda: cluster_cost(fm, ps, y), [fm, ps.prototypes]) < 1e-6
        assert fd_check(lambda: separation_cost(fm, ps, y), [fm, ps.prototypes]) < 1e-6


class TestSoftmaxPool:
    def test_identical_patches(self):
        v = np.array([0.3, -1.2, 2.0])
        fm = np.tile(v, (3, 3, 1))
        sm = np.random.default_rng(0).normal(size=(3, 3, 2))
        np.testing.assert_allclose(softmax_pool(sm, fm, 1).data, v, atol=1e-14)

    def test_sharp_limit(self):
        fm = one_hot_map()
        sm = np.zeros((2, 2, 1))
        sm[1, 1, 0] = 800.0
        np.testing.assert_allclose(softmax_pool(sm, fm, 0).data, [0, 1], atol=1e-12)

    def test_batched_per_item_index(self):
        rng = np.random.default_rng(5)
        fm = rng.normal(size=(3, 2, 2, 4))
        sm = rng.normal(size=(3, 2, 2, 5))
        j = [0, 4, 2]
        batch = softmax_pool(sm, fm, j).data
        for b in range(3):
            np.testing.assert_allclose(batch[b], softmax_pool(sm[b], fm[b], j[b]).data, atol=1e-14)

    def test_gradient(self):
        rng = np.random.default_rng(6)
        fm = Tensor(rng.normal(size=(2, 2, 2, 3)), requires_grad=True)
        ps = protos(rng.normal(size=(2, 3)))
        assert fd_check(lambda: (softmax_pool(similarity_map(fm, ps), fm, [0, 1]) ** 2).sum(), [fm, ps.prototypes]) < 1e-6

    def test_average_pool(self):
        fm = np.arange(16.0).reshape(1, 2, 2, 4)
        np.testing.assert_array_equal(average_pool(fm).data, fm.reshape(4, 4).mean(0, keepdims=True))
