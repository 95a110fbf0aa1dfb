"""Alignment-error metrics: normalized mean error and adjacent-frame stability.

NME is the mean landmark (or vertex) distance divided by a normalizer, in
percent. The default normalizer is the square root of the ground-truth
landmark bounding-box area; the alternative is the outer interocular
distance. Stability compares predicted and ground-truth frame-to-frame
landmark offsets, so any constant per-sequence bias cancels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .morphable import VertexSet

NORMALIZER_BBOX = "bbox_sqrt_area"
NORMALIZER_INTEROCULAR = "outer_interocular"
NORMALIZER_KINDS = (NORMALIZER_BBOX, NORMALIZER_INTEROCULAR)

# Outer eye corners in the 68-landmark layout.
OUTER_EYE_INDICES = (36, 45)


class DegenerateInputError(ValueError):
    """The normalizer cannot be computed from the given input."""


@dataclass(frozen=True)
class EvalReport:
    """Aggregate NME (percent) with the per-sample values that produced it."""

    nme_mean: float
    per_sample_nme: np.ndarray
    normalizer_kind: str
    stability: float | None = None

    def __post_init__(self):
        if self.normalizer_kind not in NORMALIZER_KINDS:
            raise ValueError(f"unknown normalizer kind {self.normalizer_kind!r}")
        per = np.asarray(self.per_sample_nme, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "per_sample_nme", per)


def _pairs(lmk: np.ndarray) -> np.ndarray:
    v = np.asarray(lmk, dtype=np.float64).reshape(-1)
    if v.size % 2:
        raise ValueError("landmark vector length must be even")
    return v.reshape(-1, 2)


def landmark_bbox_size(lmk: np.ndarray) -> float:
    """sqrt(width * height) of the tight landmark bounding box."""
    pts = _pairs(lmk)
    w = float(pts[:, 0].max() - pts[:, 0].min())
    h = float(pts[:, 1].max() - pts[:, 1].min())
    if w * h == 0.0:
        raise DegenerateInputError("landmark bounding box has zero area")
    return float(np.sqrt(w * h))


def nme_sparse(
    pred_lmk: np.ndarray,
    gt_lmk: np.ndarray,
    normalizer_kind: str = NORMALIZER_BBOX,
    normalizer: float | None = None,
) -> float:
    """Mean landmark distance over the normalizer, in percent.

    The normalizer derives from the ground truth (bbox size or outer
    interocular distance) unless an explicit value is supplied.
    """
    pred = _pairs(pred_lmk)
    gt = _pairs(gt_lmk)
    if pred.shape != gt.shape:
        raise ValueError("landmark vectors must have equal length")
    if normalizer_kind not in NORMALIZER_KINDS:
        raise ValueError(f"unknown normalizer kind {normalizer_kind!r}")
    if normalizer is None:
        if normalizer_kind == NORMALIZER_BBOX:
            normalizer = landmark_bbox_size(gt_lmk)
        else:
            i, j = OUTER_EYE_INDICES
            if gt.shape[0] <= max(i, j):
                raise DegenerateInputError(
                    "too few landmarks for the interocular normalizer"
                )
            normalizer = float(np.linalg.norm(gt[i] - gt[j]))
            if normalizer == 0.0:
                raise DegenerateInputError("outer interocular distance is zero")
    dist = np.linalg.norm(pred - gt, axis=1)
    return float(dist.mean() / normalizer * 100.0)


def nme_dense(
    pred_vertices: VertexSet,
    gt_vertices: VertexSet,
    normalizer: float,
    use_3d: bool = True,
) -> float:
    """Mean per-vertex distance over an explicit normalizer, in percent."""
    if pred_vertices.n_vertices != gt_vertices.n_vertices:
        raise ValueError("vertex sets differ in size")
    if normalizer <= 0.0:
        raise ValueError("normalizer must be positive")
    if use_3d:
        diff = pred_vertices.coords3d - gt_vertices.coords3d
    else:
        if pred_vertices.coords2d is None or gt_vertices.coords2d is None:
            raise ValueError("2D distances need projected coordinates on both sets")
        diff = pred_vertices.coords2d - gt_vertices.coords2d
    dist = np.linalg.norm(diff, axis=0)
    return float(dist.mean() / normalizer * 100.0)


def stability(
    pred_seq: np.ndarray,
    gt_seq: np.ndarray,
    normalizers: np.ndarray | None = None,
) -> float:
    """Adjacent-frame offset error, in percent.

    For every frame pair, the predicted offset is compared with the ground
    truth offset; the landmark-mean norm of the difference is divided by the
    per-pair normalizer (the frame-t ground-truth bbox size unless given) and
    the result is averaged over pairs.
    """
    pred = np.atleast_2d(np.asarray(pred_seq, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt_seq, dtype=np.float64))
    if pred.shape != gt.shape:
        raise ValueError("sequences must have equal shape")
    n_frames = pred.shape[0]
    if n_frames < 2:
        raise ValueError("stability needs at least two frames")
    if normalizers is not None:
        normalizers = np.asarray(normalizers, dtype=np.float64).reshape(-1)
        if normalizers.shape[0] != n_frames - 1:
            raise ValueError("need one normalizer per frame pair")
        if np.any(normalizers <= 0.0):
            raise ValueError("normalizers must be positive")

    errors = []
    for t in range(1, n_frames):
        d_gt = _pairs(gt[t] - gt[t - 1])
        d_pred = _pairs(pred[t] - pred[t - 1])
        mean_offset_err = float(np.linalg.norm(d_pred - d_gt, axis=1).mean())
        norm = (
            normalizers[t - 1] if normalizers is not None else landmark_bbox_size(gt[t])
        )
        errors.append(mean_offset_err / norm * 100.0)
    return float(np.mean(errors))
