"""Persistence formats, synthetic dataset generation, and Z-score fitting.

Binary layouts are little-endian with fixed magics; basis payloads are 32-bit
floats on disk (the in-memory dtype is float64 everywhere), while network
checkpoints and clip labels keep full 64-bit precision so round-trips are
bit-exact. Text formats write floats with 17 significant digits, which
round-trips float64 exactly.

Every parser raises ParseError -- carrying the offending field name and byte
offset (line number for text formats) -- on any malformed input; no input
bytes can crash a parser with anything else.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .lookahead import SelectorRecord, export_trace, parse_trace
from .metrics import NORMALIZER_KINDS, EvalReport
from .morphable import (
    N_LANDMARKS,
    BasisSet,
    NormStats,
    ParamVec,
    random_rotation,
)
from .regressor import RegressorWeights
from .synthesis import ClipFrame, PerturbRanges, SyntheticClip

BASIS_MAGIC = b"M3DM"
CHECKPOINT_MAGIC = b"M3DW"
CLIPS_MAGIC = b"M3DV"
FORMAT_VERSION = 1

_F = "%.17g"


class ParseError(ValueError):
    """Malformed serialized input; names the field and offset that failed."""

    def __init__(self, message: str, field: str, offset: int):
        super().__init__(f"{message} (field={field!r}, offset={offset})")
        self.field = field
        self.offset = offset


class _Cursor:
    """Byte reader that turns every out-of-bounds access into a ParseError."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, field: str) -> bytes:
        if n < 0 or self.offset + n > len(self.data):
            raise ParseError("truncated input", field, self.offset)
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u16(self, field: str) -> int:
        return struct.unpack("<H", self.take(2, field))[0]

    def u32(self, field: str) -> int:
        return struct.unpack("<I", self.take(4, field))[0]

    def u8(self, field: str) -> int:
        return self.take(1, field)[0]

    def array(self, count: int, dtype, field: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        arr = np.frombuffer(self.take(count * itemsize, field), dtype=dtype).copy()
        with np.errstate(invalid="ignore"):  # signaling NaNs flag on cast
            out = arr.astype(np.float64)
        if count and not np.all(np.isfinite(out)):
            raise ParseError("non-finite value", field, self.offset)
        return out

    def expect_end(self):
        if self.offset != len(self.data):
            raise ParseError("trailing bytes after payload", "payload", self.offset)


# ---------------------------------------------------------------------------
# Basis container
# ---------------------------------------------------------------------------


def serialize_basis(basis: BasisSet) -> bytes:
    parts = [
        BASIS_MAGIC,
        struct.pack("<H", FORMAT_VERSION),
        struct.pack("<I", basis.n_vertices),
        struct.pack("<HH", basis.d_id, basis.d_exp),
        basis.landmark_indices.astype("<u4").tobytes(),
        basis.mean_shape.astype("<f4").tobytes(),
        basis.basis_id.astype("<f4").ravel(order="F").tobytes(),
        basis.basis_exp.astype("<f4").ravel(order="F").tobytes(),
    ]
    return b"".join(parts)


def parse_basis(data: bytes) -> BasisSet:
    cur = _Cursor(data)
    if cur.take(4, "magic") != BASIS_MAGIC:
        raise ParseError("bad magic", "magic", 0)
    if cur.u16("version") != FORMAT_VERSION:
        raise ParseError("unsupported version", "version", 4)
    n = cur.u32("n_vertices")
    d_id = cur.u16("d_id")
    d_exp = cur.u16("d_exp")
    idx_off = cur.offset
    idx = np.frombuffer(
        cur.take(4 * N_LANDMARKS, "landmark_indices"), dtype="<u4"
    ).astype(np.int64)
    if n == 0 or idx.max(initial=0) >= n:
        raise ParseError("landmark index out of range", "landmark_indices", idx_off)
    mean = cur.array(3 * n, "<f4", "mean_shape").reshape(3, n)
    bid = cur.array(3 * n * d_id, "<f4", "basis_id").reshape(3 * n, d_id, order="F")
    bexp = cur.array(3 * n * d_exp, "<f4", "basis_exp").reshape(3 * n, d_exp, order="F")
    for field, arr in (("basis_id", bid), ("basis_exp", bexp)):
        if arr.shape[1] and np.any(np.linalg.norm(arr, axis=0) == 0.0):
            raise ParseError("zero basis column", field, cur.offset)
    cur.expect_end()
    return BasisSet(
        mean_shape=mean, basis_id=bid, basis_exp=bexp, landmark_indices=idx
    )


# ---------------------------------------------------------------------------
# Regressor checkpoint
# ---------------------------------------------------------------------------


def serialize_checkpoint(w: RegressorWeights, stats: NormStats) -> bytes:
    """Weights plus the Z-score stats they were trained with (a checkpoint is
    unusable without them, so they travel together)."""
    if stats.mu.shape[0] != w.n_params:
        raise ValueError("stats length does not match the parameter head")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<H", FORMAT_VERSION),
        struct.pack("<B", 0),  # activation code, 0 = rectifier
        struct.pack("<IIII", w.input_dim, w.hidden_dim, w.n_params, w.n_lmk),
        stats.mu.astype("<f8").tobytes(),
        stats.sigma.astype("<f8").tobytes(),
    ]
    for name in ("w_hidden", "b_hidden", "w_param", "b_param", "w_lmk", "b_lmk"):
        parts.append(getattr(w, name).astype("<f8").tobytes())
    return b"".join(parts)


def parse_checkpoint(data: bytes) -> tuple[RegressorWeights, NormStats]:
    cur = _Cursor(data)
    if cur.take(4, "magic") != CHECKPOINT_MAGIC:
        raise ParseError("bad magic", "magic", 0)
    if cur.u16("version") != FORMAT_VERSION:
        raise ParseError("unsupported version", "version", 4)
    if cur.u8("activation") != 0:
        raise ParseError("unknown activation code", "activation", 6)
    dim_in, dim_h, n_par, n_lmk = struct.unpack("<IIII", cur.take(16, "dims"))
    mu = cur.array(n_par, "<f8", "stats_mu")
    sigma = cur.array(n_par, "<f8", "stats_sigma")
    if np.any(sigma <= 0.0):
        raise ParseError("sigma must be positive", "stats_sigma", cur.offset)
    w = RegressorWeights(
        w_hidden=cur.array(dim_h * dim_in, "<f8", "w_hidden").reshape(dim_h, dim_in),
        b_hidden=cur.array(dim_h, "<f8", "b_hidden"),
        w_param=cur.array(n_par * dim_h, "<f8", "w_param").reshape(n_par, dim_h),
        b_param=cur.array(n_par, "<f8", "b_param"),
        w_lmk=cur.array(n_lmk * dim_h, "<f8", "w_lmk").reshape(n_lmk, dim_h),
        b_lmk=cur.array(n_lmk, "<f8", "b_lmk"),
    )
    cur.expect_end()
    return w, NormStats(mu=mu, sigma=sigma)


# ---------------------------------------------------------------------------
# Clip container (one file holds a set of clips)
# ---------------------------------------------------------------------------


def serialize_clips(clips) -> bytes:
    parts = [CLIPS_MAGIC, struct.pack("<H", FORMAT_VERSION), struct.pack("<I", len(clips))]
    for clip in clips:
        first = clip.frames[0]
        h, w = first.image.shape
        n_par = first.params.n_params
        n_lmk = first.landmarks.shape[0]
        src = clip.source_id.encode("utf-8")
        parts.append(
            struct.pack("<HHHHH", len(clip.frames), h, w, n_par, n_lmk)
        )
        parts.append(struct.pack("<I", len(src)))
        parts.append(src)
        for frame in clip.frames:
            parts.append(frame.image.astype("<f4").tobytes())
            parts.append(frame.params.to_vector().astype("<f8").tobytes())
            parts.append(frame.landmarks.astype("<f8").tobytes())
    return b"".join(parts)


def parse_clips(data: bytes) -> tuple[SyntheticClip, ...]:
    cur = _Cursor(data)
    if cur.take(4, "magic") != CLIPS_MAGIC:
        raise ParseError("bad magic", "magic", 0)
    if cur.u16("version") != FORMAT_VERSION:
        raise ParseError("unsupported version", "version", 4)
    n_clips = cur.u32("clip_count")
    clips = []
    for _ in range(n_clips):
        n_frames = cur.u16("n_frames")
        if n_frames == 0:
            raise ParseError("empty clip", "n_frames", cur.offset)
        h = cur.u16("height")
        w = cur.u16("width")
        n_par = cur.u16("n_params")
        n_lmk = cur.u16("n_lmk")
        src_len = cur.u32("source_id_len")
        try:
            source_id = cur.take(src_len, "source_id").decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError("invalid utf-8", "source_id", cur.offset) from None
        frames = []
        for _ in range(n_frames):
            image = cur.array(h * w, "<f4", "frame_image").reshape(h, w)
            params = cur.array(n_par, "<f8", "frame_params")
            lmk = cur.array(n_lmk, "<f8", "frame_landmarks")
            try:
                pvec = ParamVec.from_vector(params)
            except ValueError as exc:
                raise ParseError(str(exc), "frame_params", cur.offset) from None
            frames.append(ClipFrame(image=image, params=pvec, landmarks=lmk))
        clips.append(SyntheticClip(frames=tuple(frames), source_id=source_id))
    cur.expect_end()
    return tuple(clips)


# ---------------------------------------------------------------------------
# Evaluation report (structured text)
# ---------------------------------------------------------------------------


def serialize_report(report: EvalReport) -> str:
    lines = [
        "format: eval-report v1",
        f"normalizer: {report.normalizer_kind}",
        f"nme_mean: {_F % report.nme_mean}",
        "stability: " + (_F % report.stability if report.stability is not None else "none"),
        "per_sample_nme: " + ",".join(_F % v for v in report.per_sample_nme),
    ]
    return "\n".join(lines) + "\n"


def _text_field(lines, i, key):
    if i >= len(lines):
        raise ParseError("missing line", key, i)
    prefix = key + ":"
    if not lines[i].startswith(prefix):
        raise ParseError(f"expected {key!r} line", key, i)
    return lines[i][len(prefix) :].strip()


def _parse_float(token, field, line):
    try:
        return float(token)
    except ValueError:
        raise ParseError(f"bad float {token!r}", field, line) from None


def parse_report(text: str) -> EvalReport:
    lines = text.splitlines()
    if _text_field(lines, 0, "format") != "eval-report v1":
        raise ParseError("unsupported format", "format", 0)
    kind = _text_field(lines, 1, "normalizer")
    if kind not in NORMALIZER_KINDS:
        raise ParseError(f"unknown normalizer {kind!r}", "normalizer", 1)
    nme_mean = _parse_float(_text_field(lines, 2, "nme_mean"), "nme_mean", 2)
    stab_txt = _text_field(lines, 3, "stability")
    stab = None if stab_txt == "none" else _parse_float(stab_txt, "stability", 3)
    per_txt = _text_field(lines, 4, "per_sample_nme")
    per = (
        np.array([_parse_float(t, "per_sample_nme", 4) for t in per_txt.split(",")])
        if per_txt
        else np.empty(0)
    )
    return EvalReport(
        nme_mean=nme_mean, per_sample_nme=per, normalizer_kind=kind, stability=stab
    )


# ---------------------------------------------------------------------------
# Dataset manifest (structured text with embedded parameter records)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetManifest:
    """Seeded synthetic dataset: generation settings, Z-score stats, parameters."""

    seed: int
    frame_size: int
    ranges: PerturbRanges
    stats: NormStats
    params: tuple[ParamVec, ...]

    def __post_init__(self):
        if not self.params:
            raise ValueError("dataset must contain at least one sample")
        if np.any(self.stats.sigma <= 0.0):
            raise ValueError("stats sigma must be positive")

    @property
    def count(self) -> int:
        return len(self.params)


def _fmt_vec(vec) -> str:
    return " ".join(_F % v for v in vec)


def serialize_manifest(m: DatasetManifest) -> str:
    r = m.ranges
    lines = [
        "format: dataset v1",
        f"seed: {m.seed}",
        f"count: {m.count}",
        f"frame_size: {m.frame_size}",
        f"scale_range: {_fmt_vec(r.scale)}",
        f"rot_inplane_deg: {_fmt_vec(r.rot_inplane_deg)}",
        f"trans_px: {_fmt_vec(r.trans_px)}",
        f"yaw_deg: {_fmt_vec(r.yaw_deg)}",
        f"pitch_deg: {_fmt_vec(r.pitch_deg)}",
        f"noise_sigma: {_F % r.noise_sigma}",
        f"blur_len: {r.blur_len}",
        f"n_frames: {r.n_frames}",
        f"mu: {_fmt_vec(m.stats.mu)}",
        f"sigma: {_fmt_vec(m.stats.sigma)}",
        "samples:",
    ]
    for i, p in enumerate(m.params):
        lines.append(f"{i} {_fmt_vec(p.to_vector())}")
    return "\n".join(lines) + "\n"


def _parse_interval(text, field, line):
    parts = text.split()
    if len(parts) != 2:
        raise ParseError("interval needs two values", field, line)
    return (_parse_float(parts[0], field, line), _parse_float(parts[1], field, line))


def _parse_int(token, field, line):
    try:
        return int(token)
    except ValueError:
        raise ParseError(f"bad integer {token!r}", field, line) from None


def parse_manifest(text: str) -> DatasetManifest:
    lines = text.splitlines()
    if _text_field(lines, 0, "format") != "dataset v1":
        raise ParseError("unsupported format", "format", 0)
    seed = _parse_int(_text_field(lines, 1, "seed"), "seed", 1)
    count = _parse_int(_text_field(lines, 2, "count"), "count", 2)
    frame_size = _parse_int(_text_field(lines, 3, "frame_size"), "frame_size", 3)
    try:
        ranges = PerturbRanges(
            scale=_parse_interval(_text_field(lines, 4, "scale_range"), "scale_range", 4),
            rot_inplane_deg=_parse_interval(
                _text_field(lines, 5, "rot_inplane_deg"), "rot_inplane_deg", 5
            ),
            trans_px=_parse_interval(_text_field(lines, 6, "trans_px"), "trans_px", 6),
            yaw_deg=_parse_interval(_text_field(lines, 7, "yaw_deg"), "yaw_deg", 7),
            pitch_deg=_parse_interval(_text_field(lines, 8, "pitch_deg"), "pitch_deg", 8),
            noise_sigma=_parse_float(_text_field(lines, 9, "noise_sigma"), "noise_sigma", 9),
            blur_len=_parse_int(_text_field(lines, 10, "blur_len"), "blur_len", 10),
            n_frames=_parse_int(_text_field(lines, 11, "n_frames"), "n_frames", 11),
        )
    except ValueError as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(str(exc), "ranges", 4) from None
    mu = np.array(
        [_parse_float(t, "mu", 12) for t in _text_field(lines, 12, "mu").split()]
    )
    sigma = np.array(
        [_parse_float(t, "sigma", 13) for t in _text_field(lines, 13, "sigma").split()]
    )
    try:
        stats = NormStats(mu=mu, sigma=sigma)
    except ValueError as exc:
        raise ParseError(str(exc), "sigma", 13) from None
    if lines[14:15] != ["samples:"]:
        raise ParseError("expected 'samples:' line", "samples", 14)
    rows = [ln for ln in lines[15:] if ln.strip()]
    if len(rows) != count:
        raise ParseError(
            f"declared {count} samples, found {len(rows)}", "count", 15
        )
    params = []
    for j, row in enumerate(rows):
        tokens = row.split()
        if len(tokens) != 1 + mu.shape[0]:
            raise ParseError("sample row length mismatch", "samples", 15 + j)
        if _parse_int(tokens[0], "samples", 15 + j) != j:
            raise ParseError("sample ids must be consecutive", "samples", 15 + j)
        vec = np.array([_parse_float(t, "samples", 15 + j) for t in tokens[1:]])
        try:
            params.append(ParamVec.from_vector(vec))
        except ValueError as exc:
            raise ParseError(str(exc), "samples", 15 + j) from None
    try:
        return DatasetManifest(
            seed=seed, frame_size=frame_size, ranges=ranges, stats=stats,
            params=tuple(params),
        )
    except ValueError as exc:
        raise ParseError(str(exc), "samples", 15) from None


# ---------------------------------------------------------------------------
# Error curve (delimiter-separated rows)
# ---------------------------------------------------------------------------

CURVE_HEADER = "iteration,vertex_error"


def serialize_curve(curve: np.ndarray) -> str:
    lines = [CURVE_HEADER]
    for it, err in np.atleast_2d(curve) if np.size(curve) else []:
        lines.append(f"{int(it)},{_F % err}")
    return "\n".join(lines) + "\n"


def parse_curve(text: str) -> np.ndarray:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != CURVE_HEADER:
        raise ParseError("curve header missing", "header", 0)
    rows = []
    for i, ln in enumerate(lines[1:], start=1):
        parts = ln.split(",")
        if len(parts) != 2:
            raise ParseError("malformed curve row", "row", i)
        rows.append((_parse_int(parts[0], "iteration", i), _parse_float(parts[1], "vertex_error", i)))
    return np.array(rows).reshape(-1, 2)


# ---------------------------------------------------------------------------
# Z-score fitting and dataset generation
# ---------------------------------------------------------------------------


def fit_norm_stats(params) -> NormStats:
    """Per-parameter population mean/std over a pool; tiny stds are clamped."""
    if len(params) < 2:
        raise ValueError("need at least two parameter vectors to fit stats")
    mat = np.stack([p.to_vector() for p in params])
    return NormStats(
        mu=mat.mean(axis=0), sigma=np.maximum(mat.std(axis=0), 1e-8)
    )


@dataclass(frozen=True)
class ParamPrior:
    """Sampling ranges for ground-truth parameters of synthetic datasets.

    Coefficients are zero-mean Gaussian with per-dimension spread equal to the
    basis column norms (the basis spectrum) unless an explicit spectrum is
    given. Transforms are uniform random rotations with a uniform scale, and
    translations that center the mean shape in the frame up to a small jitter.
    """

    scale_range: tuple[float, float] = (0.8, 1.2)
    frame_size: int = 32
    center_jitter: float = 2.0
    alpha_spectrum: np.ndarray | None = None


def sample_params(basis: BasisSet, prior: ParamPrior, rng: np.random.Generator) -> ParamVec:
    spectrum = (
        prior.alpha_spectrum if prior.alpha_spectrum is not None else basis.basis_col_norms
    )
    alpha = rng.standard_normal(basis.n_dims) * spectrum
    rot = random_rotation(rng)
    scale = rng.uniform(*prior.scale_range)
    t33 = scale * rot
    center = (prior.frame_size - 1) / 2.0
    centroid = basis.mean_shape.mean(axis=1)
    t_xy = center - (t33 @ centroid)[:2] + rng.uniform(
        -prior.center_jitter, prior.center_jitter, 2
    )
    transform = np.column_stack([t33, np.array([t_xy[0], t_xy[1], 0.0])])
    return ParamVec(transform=transform, alpha=alpha)


def generate_dataset(
    basis: BasisSet,
    count: int,
    prior: ParamPrior = ParamPrior(),
    seed: int = 0,
    ranges: PerturbRanges = PerturbRanges(),
) -> DatasetManifest:
    """Seeded ground-truth parameter pool with Z-score stats fitted on it."""
    if count < 1:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(seed)
    params = tuple(sample_params(basis, prior, rng) for _ in range(count))
    if count >= 2:
        stats = fit_norm_stats(params)
    else:
        vec = params[0].to_vector()
        stats = NormStats(mu=vec, sigma=np.full(vec.shape, 1e-8))
    return DatasetManifest(
        seed=seed, frame_size=prior.frame_size, ranges=ranges, stats=stats, params=params
    )


# ---------------------------------------------------------------------------
# File helpers
# ---------------------------------------------------------------------------


def save_bytes(path, data: bytes):
    with open(path, "wb") as fh:
        fh.write(data)


def load_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def save_text(path, text: str):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def load_text(path) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def save_basis(path, basis: BasisSet):
    save_bytes(path, serialize_basis(basis))


def load_basis(path) -> BasisSet:
    return parse_basis(load_bytes(path))


def save_checkpoint(path, weights: RegressorWeights, stats: NormStats):
    save_bytes(path, serialize_checkpoint(weights, stats))


def load_checkpoint(path) -> tuple[RegressorWeights, NormStats]:
    return parse_checkpoint(load_bytes(path))


def save_clips(path, clips):
    save_bytes(path, serialize_clips(clips))


def load_clips(path) -> tuple[SyntheticClip, ...]:
    return parse_clips(load_bytes(path))


def save_manifest(path, manifest: DatasetManifest):
    save_text(path, serialize_manifest(manifest))


def load_manifest(path) -> DatasetManifest:
    return parse_manifest(load_text(path))


def save_report(path, report: EvalReport):
    save_text(path, serialize_report(report))


def load_report(path) -> EvalReport:
    return parse_report(load_text(path))


def save_trace(path, trace):
    save_text(path, export_trace(trace))


def load_trace(path) -> tuple[SelectorRecord, ...]:
    text = load_text(path)
    try:
        return parse_trace(text)
    except ValueError as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(str(exc), "trace", 0) from None


def save_curve(path, curve: np.ndarray):
    save_text(path, serialize_curve(curve))


def load_curve(path) -> np.ndarray:
    return parse_curve(load_text(path))
