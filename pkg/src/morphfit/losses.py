"""Loss family for parameter regression, with analytic gradients.

Four losses over a predicted/ground-truth parameter pair:

* vertex distance (``vdc``): squared distance between the two reconstructed
  vertex sets,
* weighted parameter distance, brute force (``wpdc_naive``): per-parameter
  weights measured by reconstructing once per parameter,
* weighted parameter distance, fast (``fwpdc``): the same weights from a
  single reconstruction via row/column norm factorization,
* landmark regression (``landmark_regression_loss``): mean squared error on
  the flattened landmark vector,

plus ``vanilla_joint``, a fixed blend of the fast weighted loss and a
magnitude-matched vertex loss.

Gradients are taken with respect to the flat denormalized parameter vector
(transform row-major, then coefficients). The parameter-distance weights are
treated as constants when differentiating, so those losses are exactly
quadratic around the evaluation point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .morphable import (
    TRANSFORM_PARAMS,
    BasisSet,
    ParamVec,
    StateError,
    blend_shape,
)


@dataclass(frozen=True)
class LossOutput:
    """Scalar loss value and its gradient in the flat parameter layout."""

    value: float
    grad: np.ndarray


@dataclass(frozen=True)
class JointConfig:
    """Blend weight for the joint loss and a guard for magnitude-ratio division."""

    beta: float = 0.5
    epsilon_ratio: float = 1e-12

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.epsilon_ratio <= 0.0:
            raise ValueError("epsilon_ratio must be positive")


def _check_pair(basis: BasisSet, p: ParamVec, p_gt: ParamVec):
    if p.normalized or p_gt.normalized:
        raise StateError("losses operate on denormalized parameters")
    if p.n_dims != basis.n_dims or p_gt.n_dims != basis.n_dims:
        raise ValueError(
            f"parameter dims ({p.n_dims}, {p_gt.n_dims}) do not match basis ({basis.n_dims})"
        )


def scale_factor(transform: np.ndarray) -> float:
    """Scale of a similarity-style transform: mean norm of the three 3x3 rows."""
    return float(np.mean(np.linalg.norm(transform[:, :3], axis=1)))


def _vertices(basis: BasisSet, p: ParamVec) -> tuple[np.ndarray, np.ndarray]:
    shape = blend_shape(basis, p.alpha)
    return shape, p.transform[:, :3] @ shape + p.transform[:, 3:4]


def vdc(basis: BasisSet, p: ParamVec, p_gt: ParamVec) -> LossOutput:
    """Vertex distance: sum of squared coordinate differences over all vertices."""
    _check_pair(basis, p, p_gt)
    shape_pred, v_pred = _vertices(basis, p)
    _, v_gt = _vertices(basis, p_gt)
    dv = v_pred - v_gt
    value = float(np.sum(dv * dv))

    g = 2.0 * dv
    grad_t = np.empty((3, 4))
    grad_t[:, :3] = g @ shape_pred.T
    grad_t[:, 3] = g.sum(axis=1)
    # Coefficient gradient routes through the predicted 3x3 block.
    grad_a = basis.basis.T @ (p.transform[:, :3].T @ g).reshape(-1)
    return LossOutput(value=value, grad=np.concatenate([grad_t.ravel(), grad_a]))


def weighted_param_loss(weights: np.ndarray, p: ParamVec, p_gt: ParamVec) -> LossOutput:
    """Quadratic parameter distance under fixed per-parameter weights."""
    dp = p.to_vector() - p_gt.to_vector()
    if weights.shape != dp.shape:
        raise ValueError("weight vector length does not match parameter count")
    wdp = weights * dp
    return LossOutput(value=float(wdp @ wdp), grad=2.0 * weights * wdp)


def wpdc_weights_naive(basis: BasisSet, p: ParamVec, p_gt: ParamVec) -> np.ndarray:
    """Brute-force importance weights: one full reconstruction per parameter.

    The weight of parameter i is the vertex displacement caused by replacing
    ground truth element i with the prediction, normalized by the largest
    displacement. All weights are zero when the parameters agree exactly.
    """
    _check_pair(basis, p, p_gt)
    n = basis.n_vertices
    d = basis.n_dims
    vec_p = p.to_vector()
    vec_gt = p_gt.to_vector()
    if np.array_equal(vec_p, vec_gt):
        return np.zeros(vec_p.size)
    _, v_gt = _vertices(basis, p_gt)

    raw = np.empty(TRANSFORM_PARAMS + d)

    # Transform-degraded reconstructions: twelve full T_de * [shape; 1] products.
    shapes_t = basis.mean_shape[None] + (
        basis.basis @ np.tile(p_gt.alpha[:, None], (1, TRANSFORM_PARAMS))
    ).T.reshape(TRANSFORM_PARAMS, 3, n)
    for i in range(TRANSFORM_PARAMS):
        t_de = p_gt.transform.copy()
        t_de.flat[i] = vec_p[i]
        v_de = t_de[:, :3] @ shapes_t[i] + t_de[:, 3:4]
        raw[i] = np.linalg.norm(v_de - v_gt)

    # Coefficient-degraded reconstructions: D full blends, stacked as one product.
    if d:
        alphas = np.tile(p_gt.alpha[:, None], (1, d))
        alphas[np.arange(d), np.arange(d)] = p.alpha
        shapes_a = basis.mean_shape[None] + (basis.basis @ alphas).T.reshape(d, 3, n)
        v_de = (
            np.einsum("rc,dcn->drn", p_gt.transform[:, :3], shapes_a)
            + p_gt.transform[:, 3][None, :, None]
        )
        raw[TRANSFORM_PARAMS:] = np.linalg.norm(
            (v_de - v_gt[None]).reshape(d, -1), axis=1
        )

    peak = raw.max()
    if peak == 0.0:
        return np.zeros_like(raw)
    return raw / peak


def wpdc_naive(basis: BasisSet, p: ParamVec, p_gt: ParamVec) -> LossOutput:
    """Weighted parameter distance with brute-force weights (reference path)."""
    return weighted_param_loss(wpdc_weights_naive(basis, p, p_gt), p, p_gt)


def fwpdc_weights(basis: BasisSet, p: ParamVec, p_gt: ParamVec) -> np.ndarray:
    """Importance weights from a single reconstruction.

    Perturbing one transform entry displaces vertices by the norm of the
    matching row of the blended ground-truth shape (sqrt(N) for translation
    entries); perturbing coefficient j displaces them by the ground-truth
    scale times the norm of basis column j. Both match the brute-force
    per-element weights exactly when the ground-truth transform is a
    similarity, which is how targets are parameterized.
    """
    _check_pair(basis, p, p_gt)
    shape_gt = blend_shape(basis, p_gt.alpha)
    row_norms = np.concatenate(
        [np.linalg.norm(shape_gt, axis=1), [np.sqrt(basis.n_vertices)]]
    )
    w_t = np.abs(p.transform - p_gt.transform) * row_norms
    w_a = (
        scale_factor(p_gt.transform)
        * np.abs(p.alpha - p_gt.alpha)
        * basis.basis_col_norms
    )
    raw = np.concatenate([w_t.ravel(), w_a])
    peak = raw.max()
    if peak == 0.0:
        return np.zeros_like(raw)
    return raw / peak


def fwpdc(basis: BasisSet, p: ParamVec, p_gt: ParamVec) -> LossOutput:
    """Weighted parameter distance with single-reconstruction weights."""
    return weighted_param_loss(fwpdc_weights(basis, p, p_gt), p, p_gt)


def landmark_regression_loss(pred_lmk: np.ndarray, gt_lmk: np.ndarray) -> LossOutput:
    """Mean squared difference over the flattened landmark vector."""
    pred = np.asarray(pred_lmk, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt_lmk, dtype=np.float64).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError("landmark vectors must have equal length")
    d = pred - gt
    n = d.shape[0]
    return LossOutput(value=float(d @ d) / n, grad=(2.0 / n) * d)


def vanilla_joint(
    basis: BasisSet, p: ParamVec, p_gt: ParamVec, cfg: JointConfig
) -> LossOutput:
    """Fixed blend: beta * fast weighted loss + (1 - beta) * scaled vertex loss.

    The vertex term is rescaled by the detached magnitude ratio of the two
    losses so the blend is balanced; the ratio is held constant in the
    gradient.
    """
    fast = fwpdc(basis, p, p_gt)
    vertex = vdc(basis, p, p_gt)
    ratio = abs(fast.value) / max(abs(vertex.value), cfg.epsilon_ratio)
    value = cfg.beta * fast.value + (1.0 - cfg.beta) * ratio * vertex.value
    grad = cfg.beta * fast.grad + (1.0 - cfg.beta) * ratio * vertex.grad
    return LossOutput(value=value, grad=grad)


# ---------------------------------------------------------------------------
# Batched array-level paths used by the training loop and the benchmark. They
# compute the same per-sample values/gradients as the functions above.
# ---------------------------------------------------------------------------


def reconstruct_batch(
    basis: BasisSet, transforms: np.ndarray, alphas: np.ndarray
) -> np.ndarray:
    """Vertices for a batch: transforms (B, 3, 4), alphas (B, D) -> (B, 3, N)."""
    b = transforms.shape[0]
    shapes = basis.mean_shape[None] + (basis.basis @ alphas.T).T.reshape(
        b, 3, basis.n_vertices
    )
    return (
        np.einsum("brc,bcn->brn", transforms[:, :, :3], shapes)
        + transforms[:, :, 3][:, :, None]
    )


def vdc_batch(
    basis: BasisSet,
    transforms: np.ndarray,
    alphas: np.ndarray,
    v_gt: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample vertex-distance values and gradients.

    transforms (B, 3, 4), alphas (B, D), v_gt (B, 3, N) -> values (B,),
    grads (B, 12 + D).
    """
    b = transforms.shape[0]
    n = basis.n_vertices
    shapes = basis.mean_shape[None] + (basis.basis @ alphas.T).T.reshape(b, 3, n)
    v = (
        np.einsum("brc,bcn->brn", transforms[:, :, :3], shapes)
        + transforms[:, :, 3][:, :, None]
    )
    dv = v - v_gt
    values = np.einsum("brn,brn->b", dv, dv)

    g = 2.0 * dv
    grad_t = np.empty((b, 3, 4))
    grad_t[:, :, :3] = np.einsum("brn,bcn->brc", g, shapes)
    grad_t[:, :, 3] = g.sum(axis=2)
    routed = np.einsum("brc,brn->bcn", transforms[:, :, :3], g).reshape(b, 3 * n)
    grad_a = routed @ basis.basis
    return values, np.concatenate([grad_t.reshape(b, -1), grad_a], axis=1)


def fwpdc_batch(
    basis: BasisSet,
    params: np.ndarray,
    params_gt: np.ndarray,
    row_norms_gt: np.ndarray | None = None,
    scales_gt: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample fast weighted-parameter values and gradients.

    params / params_gt are (B, 12 + D) flat vectors. Ground-truth shape row
    norms (B, 3) and scales (B,) can be supplied when precomputed for a pool;
    otherwise they are derived here with one batched reconstruction.
    """
    b, n_par = params.shape
    d = n_par - TRANSFORM_PARAMS
    n = basis.n_vertices
    alphas_gt = params_gt[:, TRANSFORM_PARAMS:]
    t_gt = params_gt[:, :TRANSFORM_PARAMS].reshape(b, 3, 4)

    if row_norms_gt is None:
        shapes = basis.mean_shape[None] + (basis.basis @ alphas_gt.T).T.reshape(b, 3, n)
        row_norms_gt = np.linalg.norm(shapes, axis=2)
    if scales_gt is None:
        scales_gt = np.linalg.norm(t_gt[:, :, :3], axis=2).mean(axis=1)

    dp = params - params_gt
    raw = np.empty((b, n_par))
    row_fac = np.concatenate(
        [row_norms_gt, np.full((b, 1), np.sqrt(n))], axis=1
    )  # (B, 4)
    raw[:, :TRANSFORM_PARAMS] = (
        np.abs(dp[:, :TRANSFORM_PARAMS].reshape(b, 3, 4)) * row_fac[:, None, :]
    ).reshape(b, TRANSFORM_PARAMS)
    if d:
        raw[:, TRANSFORM_PARAMS:] = (
            scales_gt[:, None]
            * np.abs(dp[:, TRANSFORM_PARAMS:])
            * basis.basis_col_norms[None, :]
        )
    peak = raw.max(axis=1)
    safe = np.where(peak == 0.0, 1.0, peak)
    w = raw / safe[:, None]
    w[peak == 0.0] = 0.0
    wdp = w * dp
    return np.einsum("bi,bi->b", wdp, wdp), 2.0 * w * wdp
