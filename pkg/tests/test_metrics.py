import numpy as np
import pytest

from morphfit.metrics import (
    NORMALIZER_BBOX,
    NORMALIZER_INTEROCULAR,
    DegenerateInputError,
    EvalReport,
    landmark_bbox_size,
    nme_dense,
    nme_sparse,
    stability,
)
from morphfit.morphable import VertexSet, project_2d


def grid_landmarks(n=68, width=100.0):
    """Landmarks spanning a width x width box."""
    pts = np.zeros((n, 2))
    side = int(np.ceil(np.sqrt(n)))
    for i in range(n):
        pts[i] = [(i % side) / (side - 1) * width, (i // side) / (side - 1) * width]
    pts[0] = [0.0, 0.0]
    pts[1] = [width, width]
    return pts.reshape(-1)


class TestNmeSparse:
    def test_zero_at_truth(self):
        gt = grid_landmarks()
        assert nme_sparse(gt, gt) == 0.0

    def test_uniform_three_four_offset(self):
        # Every landmark off by (3, 4) px in a 100 x 100 box: 5 / 100 * 100 = 5%.
        gt = grid_landmarks(width=100.0)
        pred = gt.copy()
        pred[0::2] += 3.0
        pred[1::2] += 4.0
        assert np.isclose(nme_sparse(pred, gt, NORMALIZER_BBOX), 5.0, rtol=1e-12)

    def test_single_landmark_explicit_interocular(self):
        gt = np.array([10.0, 20.0])
        pred = np.array([13.0, 24.0])  # distance 5
        got = nme_sparse(pred, gt, NORMALIZER_INTEROCULAR, normalizer=50.0)
        assert np.isclose(got, 5.0 / 50.0 * 100.0, rtol=1e-12)

    def test_unit_normalizer_reduces_to_distance(self):
        gt = np.array([0.0, 0.0])
        pred = np.array([0.3, 0.4])
        assert np.isclose(nme_sparse(pred, gt, NORMALIZER_BBOX, normalizer=1.0), 50.0)

    def test_interocular_from_landmarks(self):
        gt = grid_landmarks()
        pred = gt.copy()
        pred[0::2] += 1.0
        pairs = gt.reshape(-1, 2)
        expected_norm = np.linalg.norm(pairs[36] - pairs[45])
        got = nme_sparse(pred, gt, NORMALIZER_INTEROCULAR)
        assert np.isclose(got, 1.0 / expected_norm * 100.0, rtol=1e-12)

    def test_translation_invariance_of_pair(self):
        rng = np.random.default_rng(1)
        gt = grid_landmarks()
        pred = gt + rng.standard_normal(gt.size)
        shift = np.tile([17.0, -4.0], gt.size // 2)
        assert np.isclose(
            nme_sparse(pred + shift, gt + shift), nme_sparse(pred, gt), rtol=1e-9
        )

    def test_degenerate_bbox_rejected(self):
        flat = np.tile([5.0, 5.0], 68)
        with pytest.raises(DegenerateInputError):
            nme_sparse(flat, flat)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            nme_sparse(np.zeros(10), np.zeros(8))

    def test_unknown_kind(self):
        gt = grid_landmarks()
        with pytest.raises(ValueError):
            nme_sparse(gt, gt, "nonsense")


class TestNmeDense:
    def test_identical_sets(self):
        rng = np.random.default_rng(2)
        coords = rng.standard_normal((3, 50))
        v = VertexSet(coords3d=coords)
        assert nme_dense(v, v, normalizer=10.0) == 0.0

    def test_uniform_offset_equals_hundred_percent(self):
        rng = np.random.default_rng(3)
        coords = rng.standard_normal((3, 50))
        d = 2.5
        offset = np.zeros((3, 1))
        offset[0] = d
        a = VertexSet(coords3d=coords + offset)
        b = VertexSet(coords3d=coords)
        assert np.isclose(nme_dense(a, b, normalizer=d), 100.0, rtol=1e-12)

    def test_matches_per_vertex_loop(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((3, 30))
        b = rng.standard_normal((3, 30))
        got = nme_dense(VertexSet(coords3d=a), VertexSet(coords3d=b), normalizer=7.0)
        acc = 0.0
        for k in range(30):
            acc += np.sqrt(sum((a[r, k] - b[r, k]) ** 2 for r in range(3)))
        assert np.isclose(got, acc / 30 / 7.0 * 100.0, rtol=1e-12)

    def test_2d_mode(self):
        rng = np.random.default_rng(5)
        a = project_2d(VertexSet(coords3d=rng.standard_normal((3, 20))))
        b = project_2d(VertexSet(coords3d=rng.standard_normal((3, 20))))
        got = nme_dense(a, b, normalizer=3.0, use_3d=False)
        dist = np.linalg.norm(a.coords2d - b.coords2d, axis=0).mean()
        assert np.isclose(got, dist / 3.0 * 100.0, rtol=1e-12)

    def test_size_mismatch(self):
        a = VertexSet(coords3d=np.zeros((3, 5)))
        b = VertexSet(coords3d=np.zeros((3, 6)))
        with pytest.raises(ValueError):
            nme_dense(a, b, normalizer=1.0)


class TestStability:
    def test_zero_at_truth(self):
        gt = np.stack([grid_landmarks() + i for i in range(4)])
        assert stability(gt, gt) == 0.0

    def test_constant_bias_cancels(self):
        gt = np.stack([grid_landmarks() + 2.0 * i for i in range(5)])
        pred = gt + 7.5  # constant per-sequence offset
        assert stability(pred, gt) == 0.0

    def test_alternating_pixel_jitter(self):
        # Static ground truth, predictions alternating +-(1, 0) px in a
        # 100 x 100 box: each pair offset difference is 2 px -> 2.0%.
        gt = np.stack([grid_landmarks(width=100.0)] * 4)
        jitter = np.tile([1.0, 0.0], 68)
        pred = np.stack([gt[0] + jitter * (1 if t % 2 == 0 else -1) for t in range(4)])
        assert np.isclose(stability(pred, gt), 2.0, rtol=1e-12)

    def test_explicit_normalizers(self):
        gt = np.stack([grid_landmarks()] * 3)
        jitter = np.tile([1.0, 0.0], 68)
        pred = gt.copy()
        pred[1] += jitter
        got = stability(pred, gt, normalizers=np.array([4.0, 4.0]))
        # Pair 1 offset diff 1 px, pair 2 offset diff 1 px, both / 4 * 100.
        assert np.isclose(got, 25.0, rtol=1e-12)

    def test_too_few_frames(self):
        with pytest.raises(ValueError):
            stability(grid_landmarks()[None], grid_landmarks()[None])

    def test_shape_mismatch(self):
        gt = np.stack([grid_landmarks()] * 3)
        with pytest.raises(ValueError):
            stability(gt[:, :10], gt)


class TestEvalReport:
    def test_mean_consistency(self):
        per = np.array([1.0, 2.0, 3.0])
        report = EvalReport(
            nme_mean=float(per.mean()), per_sample_nme=per, normalizer_kind=NORMALIZER_BBOX
        )
        assert report.nme_mean == np.mean(report.per_sample_nme)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            EvalReport(nme_mean=0.0, per_sample_nme=np.zeros(1), normalizer_kind="bogus")


class TestBboxSize:
    def test_known_box(self):
        lmk = np.array([0.0, 0.0, 4.0, 9.0])
        assert np.isclose(landmark_bbox_size(lmk), 6.0)

    def test_zero_area_rejected(self):
        with pytest.raises(DegenerateInputError):
            landmark_bbox_size(np.array([1.0, 2.0, 1.0, 5.0]))  # zero width
