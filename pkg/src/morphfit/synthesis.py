"""Short-video synthesis: expand one still sample into n adjacent frames.

Each step applies a small out-of-plane rotation followed by an in-plane
similarity to the previous frame's parameters (a bounded random walk), so the
geometry drifts slightly and smoothly. The frame image is re-rendered from the
drifted parameters, then degraded photometrically with Gaussian noise and a
linear motion-blur kernel. Labels track the geometric transforms only --
noise and blur never touch them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .morphable import (
    BasisSet,
    ParamVec,
    StateError,
    project_2d,
    reconstruct_vertices,
    render_pointsplat,
    sample_landmarks,
)


def _check_interval(iv, name):
    lo, hi = float(iv[0]), float(iv[1])
    if not lo <= hi:
        raise ValueError(f"{name} interval is not well ordered")
    return (lo, hi)


@dataclass(frozen=True)
class PerturbRanges:
    """Per-frame perturbation intervals and photometric settings.

    Geometric deltas are drawn uniformly from the intervals at every step;
    angles are degrees, translations are pixels. ``blur_len`` is the motion
    kernel length in pixels and ``n_frames`` the clip length.
    """

    scale: tuple[float, float] = (0.95, 1.05)
    rot_inplane_deg: tuple[float, float] = (-3.0, 3.0)
    trans_px: tuple[float, float] = (-5.0, 5.0)
    yaw_deg: tuple[float, float] = (-5.0, 5.0)
    pitch_deg: tuple[float, float] = (-5.0, 5.0)
    noise_sigma: float = 0.02
    blur_len: int = 3
    n_frames: int = 8

    def __post_init__(self):
        for name in ("scale", "rot_inplane_deg", "trans_px", "yaw_deg", "pitch_deg"):
            object.__setattr__(self, name, _check_interval(getattr(self, name), name))
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.blur_len < 1:
            raise ValueError("blur_len must be at least 1")
        if self.n_frames < 1:
            raise ValueError("n_frames must be at least 1")


@dataclass(frozen=True)
class ClipFrame:
    image: np.ndarray
    params: ParamVec
    landmarks: np.ndarray


@dataclass(frozen=True)
class SyntheticClip:
    """An n-frame sequence of (image, parameters, landmarks) from one still."""

    frames: tuple[ClipFrame, ...]
    source_id: str = ""

    def __len__(self):
        return len(self.frames)


def apply_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add elementwise Gaussian noise, clamped back to [0, 1]."""
    if sigma == 0.0:
        return image.copy()
    return np.clip(image + rng.normal(0.0, sigma, image.shape), 0.0, 1.0)


def motion_blur_kernel(angle_deg: float, length: int) -> np.ndarray:
    """One-pixel-wide linear segment of the given length and angle, summing to 1.

    Sample points are spread along the segment and binned with round-half-up,
    so a horizontal kernel is exactly `length` adjacent equal taps.
    """
    if length < 1:
        raise ValueError("kernel length must be at least 1")
    if length == 1:
        return np.ones((1, 1))
    theta = math.radians(angle_deg)
    offsets = np.linspace(-(length - 1) / 2.0, (length - 1) / 2.0, length)
    cols = np.floor(offsets * math.cos(theta) + 0.5).astype(int)
    rows = np.floor(offsets * math.sin(theta) + 0.5).astype(int)
    half = (length - 1) // 2 + 1
    size = 2 * half + 1
    kernel = np.zeros((size, size))
    np.add.at(kernel, (rows + half, cols + half), 1.0)
    return kernel / kernel.sum()


def apply_motion_blur(image: np.ndarray, angle_deg: float, length: int) -> np.ndarray:
    """Convolve with a normalized linear-motion kernel; borders replicate edges."""
    kernel = motion_blur_kernel(angle_deg, length)
    if kernel.shape == (1, 1):
        return image.copy()
    kh, kw = kernel.shape
    pad_r, pad_c = kh // 2, kw // 2
    padded = np.pad(image, ((pad_r, pad_r), (pad_c, pad_c)), mode="edge")
    out = np.zeros_like(image, dtype=np.float64)
    h, w = image.shape
    for r, c in zip(*np.nonzero(kernel)):
        # Convolution flips the kernel relative to correlation.
        out += kernel[r, c] * padded[kh - 1 - r : kh - 1 - r + h, kw - 1 - c : kw - 1 - c + w]
    return out


def _rot_z(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_y(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_x(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def inplane_transform(
    p: ParamVec, scale: float = 1.0, rot_deg: float = 0.0, tx: float = 0.0, ty: float = 0.0
) -> ParamVec:
    """Compose a 2D similarity (scale, image-plane rotation, translation) onto
    the transform; projected positions change by exactly that similarity."""
    if p.normalized:
        raise StateError("inplane_transform requires denormalized parameters")
    m = scale * _rot_z(rot_deg)
    t = m @ p.transform
    t[0, 3] += tx
    t[1, 3] += ty
    return ParamVec(transform=t, alpha=p.alpha, normalized=False)


def outofplane_transform(p: ParamVec, yaw_deg: float = 0.0, pitch_deg: float = 0.0) -> ParamVec:
    """Rigidly rotate the whole transform (rotation and translation) out of plane."""
    if p.normalized:
        raise StateError("outofplane_transform requires denormalized parameters")
    r = _rot_y(yaw_deg) @ _rot_x(pitch_deg)
    return ParamVec(transform=r @ p.transform, alpha=p.alpha, normalized=False)


def render_frame(
    basis: BasisSet, p: ParamVec, width: int = 32, height: int = 32
) -> tuple[np.ndarray, np.ndarray]:
    """Render a parameter vector to (image, flattened landmarks)."""
    projected = project_2d(reconstruct_vertices(basis, p))
    return (
        render_pointsplat(projected, width=width, height=height),
        sample_landmarks(projected, basis),
    )


def synthesize_clip(
    basis: BasisSet,
    still: ParamVec,
    ranges: PerturbRanges,
    rng: np.random.Generator,
    width: int = 32,
    height: int = 32,
    source_id: str = "",
) -> SyntheticClip:
    """Build an n-frame clip from one still parameter vector.

    Frame 0 is the still rendered untouched. Every later frame draws fresh
    deltas, applies the out-of-plane rotation then the in-plane similarity to
    the previous frame's parameters, renders, and finally degrades the image
    with noise then motion blur (labels stay geometric).
    """
    image0, lmk0 = render_frame(basis, still, width, height)
    frames = [ClipFrame(image=image0, params=still, landmarks=lmk0)]
    p = still
    for _ in range(ranges.n_frames - 1):
        yaw = rng.uniform(*ranges.yaw_deg)
        pitch = rng.uniform(*ranges.pitch_deg)
        p = outofplane_transform(p, yaw_deg=yaw, pitch_deg=pitch)
        ds = rng.uniform(*ranges.scale)
        dth = rng.uniform(*ranges.rot_inplane_deg)
        dtx = rng.uniform(*ranges.trans_px)
        dty = rng.uniform(*ranges.trans_px)
        p = inplane_transform(p, scale=ds, rot_deg=dth, tx=dtx, ty=dty)

        image, lmk = render_frame(basis, p, width, height)
        image = apply_noise(image, ranges.noise_sigma, rng)
        image = apply_motion_blur(image, angle_deg=rng.uniform(0.0, 180.0), length=ranges.blur_len)
        frames.append(ClipFrame(image=image, params=p, landmarks=lmk))
    return SyntheticClip(frames=tuple(frames), source_id=source_id)
