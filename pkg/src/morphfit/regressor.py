"""Tiny two-head regressor with hand-derived backpropagation and momentum SGD.

One hidden rectifier layer feeds two affine heads: a parameter head that
predicts the Z-scored flat parameter vector and an auxiliary landmark head
that predicts the flattened 2D landmarks. The landmark head exists only to
regularize training; parameter predictions never depend on it, so it can be
dropped at inference for free.

Training is deterministic under a seed. Losses see denormalized parameters;
the chain rule back to the normalized head output multiplies by sigma.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses
from .morphable import (
    TRANSFORM_PARAMS,
    BasisSet,
    NormStats,
    ParamVec,
    StateError,
    blend_shape,
    project_2d,
    reconstruct_vertices,
    sample_landmarks,
)
from .synthesis import PerturbRanges, render_frame, synthesize_clip

LOSS_MODES = (
    "vdc",
    "fwpdc",
    "vdc_from_fwpdc",
    "vanilla_joint",
    "meta_joint",
    "meta_joint_lrr",
)

_ARRAY_FIELDS = ("w_hidden", "b_hidden", "w_param", "b_param", "w_lmk", "b_lmk")


@dataclass(frozen=True)
class RegressorWeights:
    """All network parameters; shapes fix the layer sizes."""

    w_hidden: np.ndarray
    b_hidden: np.ndarray
    w_param: np.ndarray
    b_param: np.ndarray
    w_lmk: np.ndarray
    b_lmk: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        h, i = self.w_hidden.shape
        if self.b_hidden.shape != (h,):
            raise ValueError("b_hidden shape mismatch")
        if self.w_param.shape[1] != h or self.w_lmk.shape[1] != h:
            raise ValueError("head width must match hidden width")
        if self.b_param.shape != (self.w_param.shape[0],):
            raise ValueError("b_param shape mismatch")
        if self.b_lmk.shape != (self.w_lmk.shape[0],):
            raise ValueError("b_lmk shape mismatch")
        for name in _ARRAY_FIELDS:
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")

    @property
    def input_dim(self) -> int:
        return self.w_hidden.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w_hidden.shape[0]

    @property
    def n_params(self) -> int:
        return self.w_param.shape[0]

    @property
    def n_lmk(self) -> int:
        return self.w_lmk.shape[0]


@dataclass(frozen=True)
class WeightArrays:
    """Array bundle shaped like RegressorWeights (gradients, momentum buffers)."""

    w_hidden: np.ndarray
    b_hidden: np.ndarray
    w_param: np.ndarray
    b_param: np.ndarray
    w_lmk: np.ndarray
    b_lmk: np.ndarray

    @classmethod
    def zeros_like(cls, w: RegressorWeights) -> "WeightArrays":
        return cls(*(np.zeros_like(getattr(w, f)) for f in _ARRAY_FIELDS))


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 128

    def __post_init__(self):
        if self.learning_rate < 0.0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


def init_weights(
    input_dim: int,
    hidden_dim: int,
    n_params: int,
    n_lmk: int,
    rng: np.random.Generator,
) -> RegressorWeights:
    """He-scaled hidden layer, 1/sqrt(H)-scaled heads, zero biases."""
    return RegressorWeights(
        w_hidden=rng.standard_normal((hidden_dim, input_dim)) * np.sqrt(2.0 / input_dim),
        b_hidden=np.zeros(hidden_dim),
        w_param=rng.standard_normal((n_params, hidden_dim)) / np.sqrt(hidden_dim),
        b_param=np.zeros(n_params),
        w_lmk=rng.standard_normal((n_lmk, hidden_dim)) / np.sqrt(hidden_dim),
        b_lmk=np.zeros(n_lmk),
    )


@dataclass(frozen=True)
class ForwardCache:
    """Activations retained for backward; tied to the weights that produced them."""

    weights: RegressorWeights
    x: np.ndarray
    z_hidden: np.ndarray
    hidden: np.ndarray


def forward(w: RegressorWeights, image: np.ndarray):
    """Single-sample forward pass: returns (param head, landmark head, cache)."""
    x = np.asarray(image, dtype=np.float64).reshape(-1)
    if x.shape[0] != w.input_dim:
        raise ValueError(f"input length {x.shape[0]} != expected {w.input_dim}")
    z = w.w_hidden @ x + w.b_hidden
    h = np.maximum(z, 0.0)
    p_norm = w.w_param @ h + w.b_param
    lmk = w.w_lmk @ h + w.b_lmk
    return p_norm, lmk, ForwardCache(weights=w, x=x, z_hidden=z, hidden=h)


def predict_params(w: RegressorWeights, image: np.ndarray) -> np.ndarray:
    """Parameter head only; the landmark head never enters this path."""
    x = np.asarray(image, dtype=np.float64).reshape(-1)
    if x.shape[0] != w.input_dim:
        raise ValueError(f"input length {x.shape[0]} != expected {w.input_dim}")
    h = np.maximum(w.w_hidden @ x + w.b_hidden, 0.0)
    return w.w_param @ h + w.b_param


def backward(
    w: RegressorWeights,
    cache: ForwardCache,
    grad_p_norm: np.ndarray,
    grad_lmk: np.ndarray,
) -> WeightArrays:
    """Exact gradients of the scalar whose output-gradients are supplied."""
    if cache.weights is not w:
        raise StateError("cache does not belong to these weights")
    gp = np.asarray(grad_p_norm, dtype=np.float64).reshape(-1)
    gl = np.asarray(grad_lmk, dtype=np.float64).reshape(-1)
    d_hidden = w.w_param.T @ gp + w.w_lmk.T @ gl
    d_z = d_hidden * (cache.z_hidden > 0.0)
    return WeightArrays(
        w_hidden=np.outer(d_z, cache.x),
        b_hidden=d_z,
        w_param=np.outer(gp, cache.hidden),
        b_param=gp,
        w_lmk=np.outer(gl, cache.hidden),
        b_lmk=gl,
    )


def forward_batch(w: RegressorWeights, images: np.ndarray):
    """Batch forward: images (B, I) -> (p_norm (B, P), lmk (B, L), cache)."""
    x = np.asarray(images, dtype=np.float64)
    z = x @ w.w_hidden.T + w.b_hidden
    h = np.maximum(z, 0.0)
    return (
        h @ w.w_param.T + w.b_param,
        h @ w.w_lmk.T + w.b_lmk,
        ForwardCache(weights=w, x=x, z_hidden=z, hidden=h),
    )


def backward_batch(
    w: RegressorWeights,
    cache: ForwardCache,
    grad_p_norm: np.ndarray,
    grad_lmk: np.ndarray,
) -> WeightArrays:
    """Batch backward; output-gradients are summed over the batch axis."""
    if cache.weights is not w:
        raise StateError("cache does not belong to these weights")
    d_hidden = grad_p_norm @ w.w_param + grad_lmk @ w.w_lmk
    d_z = d_hidden * (cache.z_hidden > 0.0)
    return WeightArrays(
        w_hidden=d_z.T @ cache.x,
        b_hidden=d_z.sum(axis=0),
        w_param=grad_p_norm.T @ cache.hidden,
        b_param=grad_p_norm.sum(axis=0),
        w_lmk=grad_lmk.T @ cache.hidden,
        b_lmk=grad_lmk.sum(axis=0),
    )


def sgd_step(
    w: RegressorWeights,
    grads: WeightArrays,
    cfg: SgdConfig,
    state: WeightArrays,
) -> tuple[RegressorWeights, WeightArrays]:
    """Classical momentum step; L2 decay is added to the gradient before the buffer."""
    new_w = {}
    new_v = {}
    for name in _ARRAY_FIELDS:
        g = getattr(grads, name) + cfg.weight_decay * getattr(w, name)
        v = cfg.momentum * getattr(state, name) + g
        new_v[name] = v
        new_w[name] = getattr(w, name) - cfg.learning_rate * v
    return RegressorWeights(**new_w, activation=w.activation), WeightArrays(**new_v)


def clone_state(state: WeightArrays) -> WeightArrays:
    return WeightArrays(*(getattr(state, f).copy() for f in _ARRAY_FIELDS))


# ---------------------------------------------------------------------------
# Training pool and loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    """One training sample with everything the losses need precomputed."""

    image: np.ndarray        # flattened render, values in [0, 1]
    param_vec: np.ndarray    # flat denormalized ground truth (12 + D,)
    v_gt: np.ndarray         # reconstructed ground-truth vertices (3, N)
    lmk_gt: np.ndarray       # flattened 2D landmarks (136,)
    row_norms: np.ndarray    # per-row norms of the blended ground-truth shape (3,)
    scale_gt: float          # similarity scale of the ground-truth transform


def build_sample(basis: BasisSet, p: ParamVec, frame_size: int = 32) -> Sample:
    image, lmk = render_frame(basis, p, width=frame_size, height=frame_size)
    return _sample_from_render(basis, p, image, lmk)


def _sample_from_render(basis, p, image, lmk) -> Sample:
    shape_gt = blend_shape(basis, p.alpha)
    return Sample(
        image=image.reshape(-1),
        param_vec=p.to_vector(),
        v_gt=reconstruct_vertices(basis, p).coords3d,
        lmk_gt=lmk,
        row_norms=np.linalg.norm(shape_gt, axis=1),
        scale_gt=losses.scale_factor(p.transform),
    )


@dataclass(frozen=True)
class TrainingPool:
    """Immutable dataset view used by the training loops."""

    basis: BasisSet
    stats: NormStats
    samples: tuple[Sample, ...]
    frame_size: int = 32

    def __len__(self):
        return len(self.samples)


def prepare_pool(
    basis: BasisSet,
    params: list[ParamVec] | tuple[ParamVec, ...],
    stats: NormStats,
    frame_size: int = 32,
) -> TrainingPool:
    samples = tuple(build_sample(basis, p, frame_size) for p in params)
    return TrainingPool(basis=basis, stats=stats, samples=samples, frame_size=frame_size)


@dataclass(frozen=True)
class TrainConfig:
    sgd: SgdConfig = SgdConfig()
    iterations: int = 2000
    eval_every: int = 100
    eval_samples: int = 256
    hidden_dim: int = 64
    joint: losses.JointConfig = losses.JointConfig()
    meta_k: int = 10
    meta_batch_size: int | None = None  # look-ahead batch size; None = sgd.batch_size
    svs_ranges: PerturbRanges | None = None
    switch_fraction: float = 0.6  # fwpdc-to-vdc handover point for vdc_from_fwpdc
    vdc_step_gain: float = 1.0    # multiplies the per-coordinate vertex-loss step scale


@dataclass(frozen=True)
class TrainResult:
    weights: RegressorWeights
    error_curve: np.ndarray  # rows of (iteration, mean vertex error)
    selector_trace: tuple | None = None


def _stack_batch(samples: list[Sample]):
    return (
        np.stack([s.image for s in samples]),
        np.stack([s.param_vec for s in samples]),
        np.stack([s.v_gt for s in samples]),
        np.stack([s.lmk_gt for s in samples]),
        np.stack([s.row_norms for s in samples]),
        np.array([s.scale_gt for s in samples]),
    )


def expand_stills_to_clips(
    pool: TrainingPool,
    still_indices: np.ndarray,
    ranges: PerturbRanges,
    rng: np.random.Generator,
) -> list[Sample]:
    """Synthesize one clip per still; the batch keeps frames of a clip contiguous."""
    out = []
    for idx in still_indices:
        p = ParamVec.from_vector(pool.samples[idx].param_vec)
        clip = synthesize_clip(
            pool.basis,
            p,
            ranges,
            rng,
            width=pool.frame_size,
            height=pool.frame_size,
            source_id=str(idx),
        )
        for frame in clip.frames:
            out.append(
                _sample_from_render(pool.basis, frame.params, frame.image, frame.landmarks)
            )
    return out


def draw_batch(
    pool: TrainingPool,
    batch_size: int,
    rng: np.random.Generator,
    svs_ranges: PerturbRanges | None = None,
) -> list[Sample]:
    """With-replacement batch; with synthesis on, stills expand into whole clips."""
    if svs_ranges is None:
        idx = rng.integers(0, len(pool), size=batch_size)
        return [pool.samples[i] for i in idx]
    n = svs_ranges.n_frames
    if batch_size % n:
        raise ValueError(f"batch size {batch_size} is not a multiple of n_frames {n}")
    stills = rng.integers(0, len(pool), size=batch_size // n)
    return expand_stills_to_clips(pool, stills, svs_ranges, rng)


def vdc_step_scale(basis: BasisSet) -> float:
    """Per-coordinate normalization of the vertex loss inside training steps.

    The raw vertex loss sums over all 3N coordinates, which makes its
    curvature a few thousand times stiffer than the max-normalized weighted
    parameter loss; no single step size serves both. Dividing the training
    objective by 3N is a constant rescaling (the minimizer and the meta-test
    ranking are untouched) that puts the two losses on comparable step
    scales. Loss ops, oracles, and metrics stay unscaled.
    """
    return 1.0 / (3.0 * basis.n_vertices)


def batch_param_grads(
    mode: str,
    basis: BasisSet,
    t_pred: np.ndarray,
    a_pred: np.ndarray,
    params_pred: np.ndarray,
    params_gt: np.ndarray,
    v_gt: np.ndarray,
    row_norms: np.ndarray,
    scales: np.ndarray,
    joint: losses.JointConfig,
    step_gain: float = 1.0,
):
    """Per-sample parameter-loss values and gradients for one batch."""
    if mode == "vdc":
        values, grads = losses.vdc_batch(basis, t_pred, a_pred, v_gt)
        s = step_gain * vdc_step_scale(basis)
        return s * values, s * grads
    if mode == "fwpdc":
        return losses.fwpdc_batch(basis, params_pred, params_gt, row_norms, scales)
    if mode == "vanilla_joint":
        vf, gf = losses.fwpdc_batch(basis, params_pred, params_gt, row_norms, scales)
        vv, gv = losses.vdc_batch(basis, t_pred, a_pred, v_gt)
        ratio = np.abs(vf) / np.maximum(np.abs(vv), joint.epsilon_ratio)
        beta = joint.beta
        values = beta * vf + (1.0 - beta) * ratio * vv
        grads = beta * gf + ((1.0 - beta) * ratio)[:, None] * gv
        return values, grads
    raise ValueError(f"unknown parameter loss {mode!r}")


def training_step(
    weights: RegressorWeights,
    state: WeightArrays,
    batch: list[Sample],
    pool: TrainingPool,
    mode: str,
    cfg: TrainConfig,
    lrr: bool,
) -> tuple[RegressorWeights, WeightArrays, float]:
    """One SGD update on a batch; returns the batch-mean main loss."""
    images, params_gt, v_gt, lmk_gt, row_norms, scales = _stack_batch(batch)
    b = images.shape[0]
    sigma = pool.stats.sigma
    with np.errstate(over="ignore", invalid="ignore"):
        p_norm, lmk_pred, cache = forward_batch(weights, images)
        params_pred = p_norm * sigma + pool.stats.mu
        t_pred = params_pred[:, :TRANSFORM_PARAMS].reshape(b, 3, 4)
        a_pred = params_pred[:, TRANSFORM_PARAMS:]

        values, grads_p = batch_param_grads(
            mode, pool.basis, t_pred, a_pred, params_pred, params_gt,
            v_gt, row_norms, scales, cfg.joint, cfg.vdc_step_gain,
        )
        mean_main = float(values.mean())
        # d(mean loss)/d(normalized head) = (1/B) * per-sample grad * sigma.
        grad_p_norm = grads_p * sigma[None, :] / b

        if lrr:
            diff = lmk_pred - lmk_gt
            n_l = diff.shape[1]
            lrr_values = np.einsum("bi,bi->b", diff, diff) / n_l
            ratio = abs(mean_main) / max(
                abs(float(lrr_values.mean())), cfg.joint.epsilon_ratio
            )
            grad_lmk = ratio * (2.0 / n_l) * diff / b
        else:
            grad_lmk = np.zeros_like(lmk_pred)

        grads = backward_batch(weights, cache, grad_p_norm, grad_lmk)
    if not all(np.all(np.isfinite(getattr(grads, f))) for f in _ARRAY_FIELDS):
        # Divergence guard: drop the step and the runaway velocity instead of
        # poisoning the weights; training continues from the last finite state.
        return weights, WeightArrays.zeros_like(weights), mean_main
    new_weights, new_state = sgd_step(weights, grads, cfg.sgd, state)
    return new_weights, new_state, mean_main


def predict_landmarks(
    basis: BasisSet, weights: RegressorWeights, stats: NormStats, image: np.ndarray
) -> np.ndarray:
    """Flattened 2D landmarks sampled from the reconstruction of the predicted
    parameters (the landmark head plays no part in this)."""
    vec = predict_params(weights, image) * stats.sigma + stats.mu
    v = reconstruct_vertices(basis, ParamVec.from_vector(vec))
    return sample_landmarks(project_2d(v), basis)


def mean_vertex_error(
    weights: RegressorWeights, pool: TrainingPool, sample_indices: np.ndarray
) -> float:
    """Mean over samples of the RMS per-vertex distance to the ground truth.

    A diverged model reports inf rather than raising, so error curves stay
    comparable across runs.
    """
    samples = [pool.samples[i] for i in sample_indices]
    images, _, v_gt, _, _, _ = _stack_batch(samples)
    with np.errstate(over="ignore", invalid="ignore"):
        p_norm = np.maximum(
            images @ weights.w_hidden.T + weights.b_hidden, 0.0
        ) @ weights.w_param.T + weights.b_param
        params = p_norm * pool.stats.sigma + pool.stats.mu
        b = params.shape[0]
        t = params[:, :TRANSFORM_PARAMS].reshape(b, 3, 4)
        a = params[:, TRANSFORM_PARAMS:]
        values, _ = losses.vdc_batch(pool.basis, t, a, v_gt)
        err = float(np.mean(np.sqrt(values / pool.basis.n_vertices)))
    return err if np.isfinite(err) else float("inf")


def _eval_indices(pool: TrainingPool, cfg: TrainConfig, seed_seq: np.random.SeedSequence):
    rng = np.random.default_rng(seed_seq)
    n = len(pool)
    return rng.choice(n, size=min(cfg.eval_samples, n), replace=False)


def train_supervised(
    pool: TrainingPool, loss_mode: str, cfg: TrainConfig, seed: int = 0
) -> TrainResult:
    """Seeded deterministic training; `loss_mode` picks the supervision recipe."""
    if loss_mode not in LOSS_MODES:
        raise ValueError(f"unknown loss_mode {loss_mode!r}; expected one of {LOSS_MODES}")
    if not len(pool):
        raise ValueError("training pool is empty")
    if loss_mode in ("meta_joint", "meta_joint_lrr"):
        from .lookahead import train_meta_joint

        return train_meta_joint(pool, cfg, seed, lrr=loss_mode.endswith("_lrr"))

    seq = np.random.SeedSequence(seed)
    init_seq, batch_seq, eval_seq = seq.spawn(3)
    rng = np.random.default_rng(batch_seq)
    weights = init_weights(
        pool.frame_size * pool.frame_size,
        cfg.hidden_dim,
        pool.basis.n_params,
        2 * pool.basis.landmark_indices.shape[0],
        np.random.default_rng(init_seq),
    )
    state = WeightArrays.zeros_like(weights)
    eval_idx = _eval_indices(pool, cfg, eval_seq)
    switch_at = int(cfg.switch_fraction * cfg.iterations)

    curve = []
    for it in range(1, cfg.iterations + 1):
        if loss_mode == "vdc_from_fwpdc":
            mode = "fwpdc" if it <= switch_at else "vdc"
        else:
            mode = loss_mode
        batch = draw_batch(pool, cfg.sgd.batch_size, rng, cfg.svs_ranges)
        weights, state, _ = training_step(weights, state, batch, pool, mode, cfg, lrr=False)
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            curve.append((it, mean_vertex_error(weights, pool, eval_idx)))
    return TrainResult(weights=weights, error_curve=np.array(curve))
