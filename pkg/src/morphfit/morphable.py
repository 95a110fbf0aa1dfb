"""PCA morphable-model engine: reconstruction, projection, parameter plumbing.

A shape is a mean plus a linear blend of identity and expression basis
directions; a 3x4 transform places it in image space, and orthographic
projection drops the depth row. Parameters travel as one flat vector --
transform first in row-major order, then the blend coefficients -- so the
normalization, loss, and file layers all agree on ordering.

The 3N axis of the basis matrices flattens the (3, N) coordinate layout in
row-major order: all x values first, then all y, then all z.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

N_LANDMARKS = 68
TRANSFORM_PARAMS = 12


class StateError(RuntimeError):
    """An operation was applied to a value in the wrong state."""


def _finite_array(a, name, dtype=np.float64):
    arr = np.ascontiguousarray(a, dtype=dtype)
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class BasisSet:
    """Mean shape plus identity/expression PCA bases.

    mean_shape       : (3, N) vertex coordinates, one column per vertex
    basis_id         : (3N, D_id) identity directions, leading columns dominant
    basis_exp        : (3N, D_exp) expression directions
    landmark_indices : 68 vertex indices used for sparse landmark sampling
    """

    mean_shape: np.ndarray
    basis_id: np.ndarray
    basis_exp: np.ndarray
    landmark_indices: np.ndarray

    def __post_init__(self):
        mean = _finite_array(self.mean_shape, "mean_shape")
        if mean.ndim != 2 or mean.shape[0] != 3:
            raise ValueError(f"mean_shape must be (3, N), got {mean.shape}")
        n3 = 3 * mean.shape[1]
        bid = _finite_array(self.basis_id, "basis_id").reshape(n3, -1)
        bexp = _finite_array(self.basis_exp, "basis_exp").reshape(n3, -1)
        if bid.shape[0] != n3 or bexp.shape[0] != n3:
            raise ValueError("basis row count must equal 3 * n_vertices")
        for name, b in (("basis_id", bid), ("basis_exp", bexp)):
            if b.shape[1] and np.any(np.linalg.norm(b, axis=0) == 0.0):
                raise ValueError(f"{name} contains a zero column")
        idx = np.ascontiguousarray(self.landmark_indices, dtype=np.int64)
        if idx.shape != (N_LANDMARKS,):
            raise ValueError(f"landmark_indices must have length {N_LANDMARKS}")
        if idx.size and (idx.min() < 0 or idx.max() >= mean.shape[1]):
            raise ValueError("landmark index out of range")
        object.__setattr__(self, "mean_shape", mean)
        object.__setattr__(self, "basis_id", bid)
        object.__setattr__(self, "basis_exp", bexp)
        object.__setattr__(self, "landmark_indices", idx)

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.shape[1]

    @property
    def d_id(self) -> int:
        return self.basis_id.shape[1]

    @property
    def d_exp(self) -> int:
        return self.basis_exp.shape[1]

    @property
    def n_dims(self) -> int:
        return self.d_id + self.d_exp

    @property
    def n_params(self) -> int:
        return TRANSFORM_PARAMS + self.n_dims

    @cached_property
    def basis(self) -> np.ndarray:
        """Concatenated (3N, D_id + D_exp) basis."""
        return np.hstack([self.basis_id, self.basis_exp])

    @cached_property
    def basis_col_norms(self) -> np.ndarray:
        """Euclidean norm of every basis column; doubles as the coefficient prior spread."""
        return np.linalg.norm(self.basis, axis=0)


@dataclass(frozen=True)
class ParamVec:
    """Regression target: a 3x4 transform plus blend coefficients.

    The flat layout is the 12 transform entries in row-major order followed
    by the coefficients; `normalized` records whether Z-score scaling has
    been applied (a normalized vector is not geometrically meaningful).
    """

    transform: np.ndarray
    alpha: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        t = _finite_array(self.transform, "transform")
        if t.shape != (3, 4):
            raise ValueError(f"transform must be (3, 4), got {t.shape}")
        a = _finite_array(self.alpha, "alpha").reshape(-1)
        object.__setattr__(self, "transform", t)
        object.__setattr__(self, "alpha", a)

    @property
    def n_dims(self) -> int:
        return self.alpha.shape[0]

    @property
    def n_params(self) -> int:
        return TRANSFORM_PARAMS + self.n_dims

    def to_vector(self) -> np.ndarray:
        """Flatten to the canonical (12 + D,) layout."""
        return np.concatenate([self.transform.ravel(), self.alpha])

    @classmethod
    def from_vector(cls, vec, normalized: bool = False) -> "ParamVec":
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.shape[0] < TRANSFORM_PARAMS:
            raise ValueError("parameter vector needs at least 12 entries")
        return cls(
            transform=vec[:TRANSFORM_PARAMS].reshape(3, 4),
            alpha=vec[TRANSFORM_PARAMS:],
            normalized=normalized,
        )


@dataclass(frozen=True)
class NormStats:
    """Per-parameter Z-score statistics (mean and strictly positive spread)."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = _finite_array(self.mu, "mu").reshape(-1)
        sigma = _finite_array(self.sigma, "sigma").reshape(-1)
        if mu.shape != sigma.shape:
            raise ValueError("mu and sigma must have equal length")
        if np.any(sigma <= 0.0):
            raise ValueError("sigma entries must be strictly positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)


@dataclass(frozen=True)
class VertexSet:
    """Dense 3D vertices and, once projected, their 2D image positions."""

    coords3d: np.ndarray
    coords2d: np.ndarray | None = None

    def __post_init__(self):
        c3 = _finite_array(self.coords3d, "coords3d")
        if c3.ndim != 2 or c3.shape[0] != 3:
            raise ValueError(f"coords3d must be (3, N), got {c3.shape}")
        object.__setattr__(self, "coords3d", c3)
        if self.coords2d is not None:
            c2 = _finite_array(self.coords2d, "coords2d")
            if c2.shape != (2, c3.shape[1]):
                raise ValueError("coords2d must be (2, N) matching coords3d")
            object.__setattr__(self, "coords2d", c2)

    @property
    def n_vertices(self) -> int:
        return self.coords3d.shape[1]


def _check_denormalized(p: ParamVec, what: str = "operation"):
    if p.normalized:
        raise StateError(f"{what} requires denormalized parameters")


def blend_shape(basis: BasisSet, alpha: np.ndarray) -> np.ndarray:
    """Mean shape plus basis blend, as a (3, N) array (no transform applied)."""
    offset = (basis.basis @ alpha).reshape(3, basis.n_vertices)
    return basis.mean_shape + offset


def reconstruct_vertices(basis: BasisSet, p: ParamVec) -> VertexSet:
    """Apply the 3x4 transform to the blended shape in homogeneous form."""
    _check_denormalized(p, "reconstruct_vertices")
    if p.n_dims != basis.n_dims:
        raise ValueError(
            f"parameter has {p.n_dims} coefficients, basis expects {basis.n_dims}"
        )
    shape = blend_shape(basis, p.alpha)
    coords = p.transform[:, :3] @ shape + p.transform[:, 3:4]
    return VertexSet(coords3d=coords)


def project_2d(v: VertexSet) -> VertexSet:
    """Orthographic projection: keep the x and y rows, retain the 3D coords."""
    return VertexSet(coords3d=v.coords3d, coords2d=v.coords3d[:2].copy())


def normalize_params(p: ParamVec, stats: NormStats) -> ParamVec:
    """Z-score the flat parameter vector; inverse of denormalize_params."""
    if p.normalized:
        raise StateError("parameters are already normalized")
    vec = p.to_vector()
    if vec.shape != stats.mu.shape:
        raise ValueError("stats length does not match parameter count")
    return ParamVec.from_vector((vec - stats.mu) / stats.sigma, normalized=True)


def denormalize_params(p: ParamVec, stats: NormStats) -> ParamVec:
    if not p.normalized:
        raise StateError("parameters are not normalized")
    vec = p.to_vector()
    if vec.shape != stats.mu.shape:
        raise ValueError("stats length does not match parameter count")
    return ParamVec.from_vector(vec * stats.sigma + stats.mu, normalized=False)


def truncate_basis(basis: BasisSet, d_id: int, d_exp: int) -> BasisSet:
    """Keep the leading d_id identity and d_exp expression columns."""
    if not (0 <= d_id <= basis.d_id) or not (0 <= d_exp <= basis.d_exp):
        raise ValueError(
            f"cannot truncate ({basis.d_id}, {basis.d_exp}) basis to ({d_id}, {d_exp})"
        )
    return replace(
        basis,
        basis_id=basis.basis_id[:, :d_id].copy(),
        basis_exp=basis.basis_exp[:, :d_exp].copy(),
    )


def sample_landmarks(v: VertexSet, basis: BasisSet) -> np.ndarray:
    """Gather the 68 landmark columns of coords2d, interleaved (x1, y1, ..., x68, y68)."""
    if v.coords2d is None:
        raise StateError("sample_landmarks requires projected coordinates")
    return v.coords2d[:, basis.landmark_indices].T.reshape(-1).copy()


def render_pointsplat(v: VertexSet, width: int = 32, height: int = 32) -> np.ndarray:
    """Splat projected vertices onto a count image, scaled to [0, 1] by the max count.

    A vertex lands on the pixel (floor(y + 0.5), floor(x + 0.5)); out-of-bounds
    vertices are dropped. An image with no hits is all zeros.
    """
    if v.coords2d is None:
        raise StateError("render_pointsplat requires projected coordinates")
    if width <= 0 or height <= 0:
        raise ValueError("width and height must be positive")
    cols = np.floor(v.coords2d[0] + 0.5).astype(np.int64)
    rows = np.floor(v.coords2d[1] + 0.5).astype(np.int64)
    ok = (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
    image = np.zeros((height, width), dtype=np.float64)
    np.add.at(image, (rows[ok], cols[ok]), 1.0)
    peak = image.max()
    if peak > 0.0:
        image /= peak
    return image


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation matrix from a normalized quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def synthetic_basis(
    n_vertices: int,
    d_id: int = 40,
    d_exp: int = 10,
    seed: int = 0,
    shape_scale: float = 1.0,
) -> BasisSet:
    """Seeded stand-in basis: ellipsoid mean shape, orthonormal random directions
    scaled by a 1/(1+j) spectrum per block so leading columns dominate.

    All values are rounded to float32 precision so the on-disk container format
    round-trips bit-exactly; the in-memory dtype stays float64.
    """
    if n_vertices < 1:
        raise ValueError("n_vertices must be positive")
    d_total = d_id + d_exp
    if d_total > 3 * n_vertices:
        raise ValueError("basis dimensionality cannot exceed 3 * n_vertices")
    rng = np.random.default_rng(seed)

    # Ellipsoid surface, slightly anisotropic so rows of the shape differ.
    lon = rng.uniform(0.0, 2.0 * np.pi, n_vertices)
    lat = np.arccos(rng.uniform(-1.0, 1.0, n_vertices))
    semi = (10.0, 12.0, 8.0)
    mean = np.stack(
        [
            semi[0] * np.sin(lat) * np.cos(lon),
            semi[1] * np.sin(lat) * np.sin(lon),
            semi[2] * np.cos(lat),
        ]
    )

    base = shape_scale * float(n_vertices) ** 0.25
    if d_total:
        q, _ = np.linalg.qr(rng.standard_normal((3 * n_vertices, d_total)))
        spectrum_id = base / (1.0 + np.arange(d_id))
        spectrum_exp = 0.5 * base / (1.0 + np.arange(d_exp))
        bid = q[:, :d_id] * spectrum_id
        bexp = q[:, d_id:] * spectrum_exp
    else:
        bid = np.zeros((3 * n_vertices, 0))
        bexp = np.zeros((3 * n_vertices, 0))

    if n_vertices >= N_LANDMARKS:
        idx = np.round(np.linspace(0, n_vertices - 1, N_LANDMARKS)).astype(np.int64)
    else:
        idx = np.arange(N_LANDMARKS, dtype=np.int64) % n_vertices

    to_f32 = lambda a: a.astype(np.float32).astype(np.float64)
    return BasisSet(
        mean_shape=to_f32(mean),
        basis_id=to_f32(bid),
        basis_exp=to_f32(bexp),
        landmark_indices=idx,
    )
