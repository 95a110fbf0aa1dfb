"""k-step look-ahead selection between the two main losses.

Each outer iteration draws k meta-train batches plus one disjoint meta-test
batch, rolls the current weights forward k SGD steps under the fast weighted
parameter loss and, independently, under the vertex loss, then keeps
whichever clone reaches the lower vertex loss on the meta-test batch. The
losing rollout is discarded entirely (weights and momentum buffer).

Ties select the weighted-parameter branch. The per-iteration choice is
recorded in a selector trace for later analysis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import losses
from .morphable import TRANSFORM_PARAMS
from .regressor import (
    Sample,
    TrainConfig,
    TrainingPool,
    TrainResult,
    WeightArrays,
    RegressorWeights,
    _eval_indices,
    _stack_batch,
    clone_state,
    expand_stills_to_clips,
    init_weights,
    mean_vertex_error,
    training_step,
)

BRANCH_FAST = "fwpdc"
BRANCH_VERTEX = "vdc"

TRACE_HEADER = "outer_iteration,chosen,meta_test_error_f,meta_test_error_v"


class StreamExhausted(Exception):
    """The batch stream ended before a full outer iteration could be drawn."""


@dataclass(frozen=True)
class MetaConfig:
    k: int = 10
    batch_size: int = 128
    lrr_enabled: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass(frozen=True)
class SelectorRecord:
    outer_iteration: int
    chosen: str
    meta_test_error_f: float
    meta_test_error_v: float

    def __post_init__(self):
        if self.chosen not in (BRANCH_FAST, BRANCH_VERTEX):
            raise ValueError(f"chosen must be {BRANCH_FAST!r} or {BRANCH_VERTEX!r}")


def epoch_batches(
    pool: TrainingPool,
    batch_size: int,
    rng: np.random.Generator,
    svs_ranges=None,
) -> Iterator[list[Sample]]:
    """Disjoint batches covering one shuffled pass over the pool; the partial
    tail is dropped. With synthesis on, each batch expands whole stills into
    contiguous clips, so batches stay disjoint in their source stills."""
    if svs_ranges is not None:
        n = svs_ranges.n_frames
        if batch_size % n:
            raise ValueError(f"batch size {batch_size} is not a multiple of n_frames {n}")
        stills_per_batch = batch_size // n
        perm = rng.permutation(len(pool))
        for start in range(0, len(perm) - stills_per_batch + 1, stills_per_batch):
            yield expand_stills_to_clips(
                pool, perm[start : start + stills_per_batch], svs_ranges, rng
            )
        return
    perm = rng.permutation(len(pool))
    for start in range(0, len(perm) - batch_size + 1, batch_size):
        yield [pool.samples[i] for i in perm[start : start + batch_size]]


def meta_test_vertex_loss(
    weights: RegressorWeights, batch: list[Sample], pool: TrainingPool
) -> float:
    """Batch-mean vertex loss of the parameter head on a held-out batch.

    A diverged clone evaluates to inf, which the selector treats as a loss.
    """
    images, _, v_gt, _, _, _ = _stack_batch(batch)
    with np.errstate(over="ignore", invalid="ignore"):
        hidden = np.maximum(images @ weights.w_hidden.T + weights.b_hidden, 0.0)
        params = (
            hidden @ weights.w_param.T + weights.b_param
        ) * pool.stats.sigma + pool.stats.mu
        b = params.shape[0]
        values, _ = losses.vdc_batch(
            pool.basis,
            params[:, :TRANSFORM_PARAMS].reshape(b, 3, 4),
            params[:, TRANSFORM_PARAMS:],
            v_gt,
        )
        err = float(values.mean())
    return err if np.isfinite(err) else float("inf")


def meta_joint_step(
    weights: RegressorWeights,
    state: WeightArrays,
    batch_iter: Iterator[list[Sample]],
    pool: TrainingPool,
    cfg: TrainConfig,
    meta: MetaConfig,
    outer_iteration: int,
) -> tuple[RegressorWeights, WeightArrays, SelectorRecord]:
    """One outer iteration: draw k+1 batches, roll out both branches, keep the
    winner. Raises StreamExhausted (discarding the partial draw) when the
    stream ends early."""
    batches = []
    for _ in range(meta.k + 1):
        try:
            batches.append(next(batch_iter))
        except StopIteration:
            raise StreamExhausted(
                f"stream ended after {len(batches)} of {meta.k + 1} batches"
            ) from None
    train_batches, test_batch = batches[: meta.k], batches[meta.k]

    w_fast, s_fast = weights, clone_state(state)
    for batch in train_batches:
        w_fast, s_fast, _ = training_step(
            w_fast, s_fast, batch, pool, BRANCH_FAST, cfg, lrr=meta.lrr_enabled
        )
    w_vert, s_vert = weights, clone_state(state)
    for batch in train_batches:
        w_vert, s_vert, _ = training_step(
            w_vert, s_vert, batch, pool, BRANCH_VERTEX, cfg, lrr=meta.lrr_enabled
        )

    err_f = meta_test_vertex_loss(w_fast, test_batch, pool)
    err_v = meta_test_vertex_loss(w_vert, test_batch, pool)
    if err_v < err_f:
        chosen, w_out, s_out = BRANCH_VERTEX, w_vert, s_vert
    else:
        chosen, w_out, s_out = BRANCH_FAST, w_fast, s_fast
    record = SelectorRecord(
        outer_iteration=outer_iteration,
        chosen=chosen,
        meta_test_error_f=err_f,
        meta_test_error_v=err_v,
    )
    return w_out, s_out, record


def train_meta_joint(
    pool: TrainingPool, cfg: TrainConfig, seed: int = 0, lrr: bool = False
) -> TrainResult:
    """Look-ahead training loop; iteration budget counts selected inner steps."""
    meta = MetaConfig(
        k=cfg.meta_k,
        batch_size=cfg.meta_batch_size or cfg.sgd.batch_size,
        lrr_enabled=lrr,
    )
    seq = np.random.SeedSequence(seed)
    init_seq, stream_seq, eval_seq = seq.spawn(3)
    stream_rng = np.random.default_rng(stream_seq)
    weights = init_weights(
        pool.frame_size * pool.frame_size,
        cfg.hidden_dim,
        pool.basis.n_params,
        2 * pool.basis.landmark_indices.shape[0],
        np.random.default_rng(init_seq),
    )
    state = WeightArrays.zeros_like(weights)
    eval_idx = _eval_indices(pool, cfg, eval_seq)

    outer_total = max(1, math.ceil(cfg.iterations / meta.k))
    eval_stride = max(1, round(cfg.eval_every / meta.k))
    batch_iter = epoch_batches(pool, meta.batch_size, stream_rng, cfg.svs_ranges)
    records = []
    curve = []
    outer = 0
    while outer < outer_total:
        try:
            weights, state, record = meta_joint_step(
                weights, state, batch_iter, pool, cfg, meta, outer
            )
        except StreamExhausted:
            batch_iter = epoch_batches(pool, meta.batch_size, stream_rng, cfg.svs_ranges)
            continue
        records.append(record)
        outer += 1
        if outer % eval_stride == 0 or outer == outer_total:
            curve.append((outer * meta.k, mean_vertex_error(weights, pool, eval_idx)))
    return TrainResult(
        weights=weights, error_curve=np.array(curve), selector_trace=tuple(records)
    )


def export_trace(trace) -> str:
    """Selector trace as delimiter-separated rows (header always present)."""
    lines = [TRACE_HEADER]
    for rec in trace:
        lines.append(
            f"{rec.outer_iteration},{rec.chosen},"
            f"{rec.meta_test_error_f:.17g},{rec.meta_test_error_v:.17g}"
        )
    return "\n".join(lines) + "\n"


def parse_trace(text: str) -> tuple[SelectorRecord, ...]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != TRACE_HEADER:
        raise ValueError("selector trace header missing or malformed")
    records = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 4:
            raise ValueError(f"malformed trace row: {ln!r}")
        records.append(
            SelectorRecord(
                outer_iteration=int(parts[0]),
                chosen=parts[1],
                meta_test_error_f=float(parts[2]),
                meta_test_error_v=float(parts[3]),
            )
        )
    return tuple(records)
