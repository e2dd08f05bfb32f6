import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corrpm.supervision import (
    Keypoint,
    LossWeights,
    MetricsReport,
    cross_entropy,
    derive_edges,
    evaluate,
    heatmap_sigma,
    mse_heatmap,
    render_heatmaps,
    total_loss,
)
from corrpm.tensor import ParamStore, Tensor, backward
from oracles import edges_oracle, metrics_oracle


class TestDeriveEdges:
    def test_uniform(self):
        assert not derive_edges(np.full((5, 7), 3)).any()

    def test_vertical_seam(self):
        mask = np.ones((6, 6), dtype=int)
        mask[:, 3:] = 2
        edges = derive_edges(mask)
        expected = np.zeros((6, 6), dtype=np.uint8)
        expected[:, 2:4] = 1
        assert np.array_equal(edges, expected)

    def test_checkerboard(self):
        assert derive_edges(np.array([[0, 1], [2, 3]])).all()

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31), h=st.integers(1, 12), w=st.integers(1, 12), q=st.integers(1, 5))
    def test_matches_neighbor_scan(self, seed, h, w, q):
        mask = np.random.default_rng(seed).integers(0, q, (h, w))
        assert np.array_equal(derive_edges(mask), edges_oracle(mask))


class TestHeatmaps:
    def test_peak_and_sigma_distance(self):
        hm = render_heatmaps([Keypoint(5.0, 4.0)], 10, 12, sigma=2.0)
        assert hm[0, 4, 5] == 1.0
        assert math.isclose(hm[0, 4, 7], math.exp(-0.5), rel_tol=1e-15)
        assert math.isclose(math.exp(-0.5), 0.60653, rel_tol=1e-5)

    def test_invisible_zero(self):
        hm = render_heatmaps([Keypoint(3.0, 3.0, visible=False), Keypoint(1.0, 1.0)], 6, 6, 1.5)
        assert not hm[0].any() and hm[1].max() == 1.0

    def test_sigma_rescaling(self):
        assert heatmap_sigma(96) == 7.0
        assert math.isclose(heatmap_sigma(16), 7.0 / 6.0)

    @settings(max_examples=40, deadline=None)
    @given(x=st.floats(-2, 14), y=st.floats(-2, 10), sigma=st.floats(0.3, 5))
    def test_range_and_argmax(self, x, y, sigma):
        hm = render_heatmaps([Keypoint(x, y)], 9, 13, sigma)[0]
        assert hm.min() >= 0.0 and hm.max() <= 1.0
        r, c = np.unravel_index(hm.argmax(), hm.shape)
        nearest = (min(max(round(y), 0), 8), min(max(round(x), 0), 12))
        d_best = (c - x) ** 2 + (r - y) ** 2
        d_near = (nearest[1] - x) ** 2 + (nearest[0] - y) ** 2
        assert math.isclose(d_best, d_near, rel_tol=1e-9, abs_tol=1e-9)

    def test_rejects_bad_sigma(self):
        with pytest.raises(ValueError):
            render_heatmaps([Keypoint(0, 0)], 2, 2, 0.0)


class TestCrossEntropy:
    def test_confident_correct(self):
        target = np.random.default_rng(0).integers(0, 4, (5, 5))
        logits = np.zeros((4, 5, 5))
        np.put_along_axis(logits, target[None], 40.0, axis=0)
        assert cross_entropy(Tensor(logits), target).item() < 1e-3

    def test_uniform_is_log_q(self):
        target = np.random.default_rng(0).integers(0, 20, (6, 7))
        loss = cross_entropy(Tensor(np.full((20, 6, 7), 0.37)), target).item()
        assert abs(loss - math.log(20)) < 1e-12
        assert math.isclose(math.log(20), 2.9957, rel_tol=1e-4)

    def test_pixel_permutation_invariant(self):
        rng = np.random.default_rng(1)
        logits, target = rng.standard_normal((3, 4, 4)), rng.integers(0, 3, (4, 4))
        perm = rng.permutation(16)
        lp = logits.reshape(3, 16)[:, perm].reshape(3, 4, 4)
        tp = target.reshape(16)[perm].reshape(4, 4)
        assert math.isclose(cross_entropy(Tensor(logits), target).item(), cross_entropy(Tensor(lp), tp).item(), rel_tol=1e-14)

    def test_gradient_sums_to_zero_over_classes(self):
        rng = np.random.default_rng(2)
        params = ParamStore()
        params.add("z", rng.standard_normal((2, 5, 3, 4)))
        backward(cross_entropy(params["z"], rng.integers(0, 5, (2, 3, 4))), params)
        np.testing.assert_allclose(params.grad("z").sum(axis=1), 0.0, atol=1e-9)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.zeros((3, 2, 2))), np.full((2, 2), 3))

    def test_target_downscaled_nearest(self):
        target = np.zeros((8, 8), dtype=int)
        target[:, 4:] = 1
        logits = np.zeros((2, 4, 4))
        logits[1, :, 2:] = 50.0
        logits[0, :, :2] = 50.0
        assert cross_entropy(Tensor(logits), target).item() < 1e-10


class TestMSE:
    def test_zero_and_offset(self):
        t = np.random.default_rng(0).random((3, 4, 4))
        assert mse_heatmap(Tensor(t), t).item() == 0.0
        assert mse_heatmap(Tensor(t + 1.0), t).item() == pytest.approx(1.0, abs=1e-15)

    def test_loop_oracle(self):
        rng = np.random.default_rng(4)
        a, b = rng.standard_normal((2, 3, 5)), rng.standard_normal((2, 3, 5))
        acc = 0.0
        for idx in np.ndindex(a.shape):
            acc += (a[idx] - b[idx]) ** 2
        assert math.isclose(mse_heatmap(Tensor(a), b).item(), acc / a.size, rel_tol=1e-13)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse_heatmap(Tensor(np.zeros((1, 2, 2))), np.zeros((1, 2, 3)))


class TestTotalLoss:
    def test_table_weights(self):
        assert total_loss(1, 1, 1, 1, LossWeights(2, 70)) == 74

    def test_baseline_weights(self):
        assert total_loss(0.3, 0.5, 9.0, 9.0, LossWeights(0, 0)) == 0.8

    def test_zero(self):
        assert total_loss(0, 0, 0, 0) == 0

    def test_linear_in_edge_term(self):
        w = LossWeights()
        base = total_loss(0.7, 0.4, 0.25, 0.01, w)
        assert total_loss(0.7, 0.4, 0.5, 0.01, w) - base == pytest.approx(w.alpha * 0.25, abs=1e-15)

    def test_gradient_reaches_all_terms(self):
        params = ParamStore()
        for name in ("a", "b", "c", "d"):
            params.add(name, np.array(1.0))
        backward(total_loss(*(params[n] for n in "abcd"), LossWeights(2, 70)), params)
        assert [float(params.grad(n)) for n in "abcd"] == [1.0, 1.0, 2.0, 70.0]

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(-1, 0)


class TestEvaluate:
    def test_perfect(self):
        m = np.random.default_rng(0).integers(0, 4, (8, 8))
        r = evaluate(m, m, 4)
        assert r.pixel_accuracy == r.mean_accuracy == r.mean_iou == r.precision == r.recall == r.f1 == 1.0

    def test_disjoint_classes(self):
        r = evaluate(np.full((4, 4), 1), np.full((4, 4), 2), 4)
        assert r.per_class_iou[1] == 0.0 and r.per_class_iou[2] == 0.0 and r.mean_iou == 0.0
        assert math.isnan(r.per_class_iou[0]) and math.isnan(r.per_class_iou[3])

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        pred, truth = rng.integers(0, 4, (8, 8)), rng.integers(0, 4, (8, 8))
        got = evaluate(pred, truth, 4).to_dict()
        want = metrics_oracle(pred, truth, 4)
        for key in ("pixel_accuracy", "mean_accuracy", "mean_iou", "precision", "recall", "f1"):
            assert got[key] == pytest.approx(want[key], abs=1e-15)
        for g, w in zip(got["per_class_iou"], want["per_class_iou"]):
            assert (g is None and math.isnan(w)) or g == pytest.approx(w, abs=1e-15)

    def test_permutation_equivariant(self):
        rng = np.random.default_rng(3)
        pred, truth = rng.integers(0, 5, (10, 10)), rng.integers(0, 4, (10, 10))
        perm = rng.permutation(5)
        a = evaluate(pred, truth, 5).per_class_iou
        b = evaluate(perm[pred], perm[truth], 5).per_class_iou
        for c in range(5):
            assert (math.isnan(a[c]) and math.isnan(b[perm[c]])) or a[c] == b[perm[c]]

    def test_json_keys(self):
        r = evaluate(np.zeros((2, 2), int), np.zeros((2, 2), int), 3)
        d = json.loads(r.to_json())
        assert set(d) == {"pixel_accuracy", "mean_accuracy", "mean_iou", "per_class_iou", "precision", "recall", "f1"}
        assert d["per_class_iou"] == [1.0, None, None]
        assert MetricsReport.from_dict(d).mean_iou == 1.0

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            evaluate(np.full((2, 2), 3), np.zeros((2, 2), int), 3)
