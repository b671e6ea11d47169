"""Deterministic stimulus generators and image-sequence I/O.

Coordinates: ``x`` runs along columns (rightward), ``y`` along rows
(downward).  Velocities are ``(vx, vy)`` in pixels/frame with the same axes,
and an orientation ``theta`` is the direction of a grating's normal, so a
grating drifts along ``(cos theta, sin theta)``.  Every generator returns a
``(T, H, W)`` float64 array clipped to [0, 1].
"""
from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

__all__ = [
    "MotionSpec",
    "drifting_grating",
    "drifting_gabor",
    "plaid",
    "plaid_specs",
    "ioc_velocity",
    "missing_fundamental",
    "barber_pole",
    "global_gabor_array",
    "translate_texture",
    "random_texture",
    "load_sequence",
    "save_sequence",
    "SequenceFormatError",
]


class SequenceFormatError(ValueError):
    """Frames on disk are unreadable or inconsistent."""


@dataclass(frozen=True)
class MotionSpec:
    velocity: tuple[float, float] = (1.0, 0.0)
    orientation: float = 0.0
    spatial_frequency: float = 0.1
    contrast: float = 1.0
    phase: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.spatial_frequency < 0.5:
            raise ValueError(f"spatial_frequency {self.spatial_frequency} must lie in [0, 0.5)")
        if not 0.0 <= self.contrast <= 1.0:
            raise ValueError(f"contrast {self.contrast} must lie in [0, 1]")

    @property
    def normal(self) -> np.ndarray:
        return np.array([np.cos(self.orientation), np.sin(self.orientation)])

    @property
    def normal_speed(self) -> float:
        """Drift speed of the carrier: projection of the velocity on the normal."""
        return float(np.dot(self.velocity, self.normal))

    @property
    def temporal_frequency(self) -> float:
        return self.spatial_frequency * self.normal_speed


def _grid(h, w):
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    return x, y


def _square(phase):
    return np.where(np.sin(phase) >= 0, 1.0, -1.0)


def _carrier(spec: MotionSpec, T, H, W, waveform="sine"):
    """Zero-mean carrier in [-1, 1], shape (T, H, W)."""
    x, y = _grid(H, W)
    t = np.arange(T, dtype=np.float64)[:, None, None]
    c, s = np.cos(spec.orientation), np.sin(spec.orientation)
    ph = 2 * np.pi * spec.spatial_frequency * (x * c + y * s) - 2 * np.pi * spec.temporal_frequency * t + spec.phase
    if waveform == "sine":
        return np.sin(ph)
    if waveform == "square":
        return _square(ph)
    raise ValueError(f"unknown waveform {waveform!r}")


def _finish(signal):
    return np.clip(0.5 + signal, 0.0, 1.0)


def drifting_grating(spec: MotionSpec, T: int, H: int, W: int, waveform: str = "sine") -> np.ndarray:
    """Full-field grating drifting along its normal at ``spec.normal_speed``."""
    return _finish(0.5 * spec.contrast * _carrier(spec, T, H, W, waveform))


def _envelope(sigma, center, H, W):
    if np.isinf(sigma):
        return np.ones((H, W))
    x, y = _grid(H, W)
    cx, cy = center
    return np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sigma ** 2))


def drifting_gabor(spec: MotionSpec, envelope_sigma: float, center, T: int, H: int, W: int) -> np.ndarray:
    """Drifting grating windowed by a static Gaussian centred at ``center=(x, y)``."""
    env = _envelope(envelope_sigma, center, H, W)
    return _finish(0.5 * spec.contrast * _carrier(spec, T, H, W) * env)


def plaid(spec_a: MotionSpec, spec_b: MotionSpec, T: int, H: int, W: int,
          envelope_sigma: float = np.inf, center=None) -> np.ndarray:
    """Two superimposed gratings (Gabors when ``envelope_sigma`` is finite)."""
    center = ((W - 1) / 2, (H - 1) / 2) if center is None else center
    env = _envelope(envelope_sigma, center, H, W)
    sig = 0.5 * spec_a.contrast * _carrier(spec_a, T, H, W) + 0.5 * spec_b.contrast * _carrier(spec_b, T, H, W)
    return _finish(sig * env)


def plaid_specs(direction: float, speed: float, half_angle: float = np.pi / 3,
                spatial_frequency: float = 0.1, contrast: float = 0.5) -> tuple[MotionSpec, MotionSpec]:
    """Component specs of a plaid whose coherent motion is ``speed`` along ``direction``.

    Both components carry the full pattern velocity, so each drifts at the
    normal projection of it and the intersection of constraints recovers it.
    """
    v = (speed * np.cos(direction), speed * np.sin(direction))
    a = MotionSpec(velocity=v, orientation=direction + half_angle,
                   spatial_frequency=spatial_frequency, contrast=contrast)
    b = replace(a, orientation=direction - half_angle)
    return a, b


def ioc_velocity(spec_a: MotionSpec, spec_b: MotionSpec) -> np.ndarray:
    """Intersection-of-constraints velocity of two 1D motions."""
    n = np.stack([spec_a.normal, spec_b.normal])
    s = np.array([spec_a.normal_speed, spec_b.normal_speed])
    return np.linalg.solve(n, s)


def missing_fundamental(spec: MotionSpec, T: int, H: int, W: int, step: str = "quarter_cycle",
                        harmonics=range(3, 17, 2)) -> np.ndarray:
    """Square-wave grating without its fundamental, stepping 1/4 period per frame.

    Built from the Fourier series of the square wave (odd harmonics 3..15).
    The displacement direction is the sign of ``spec.velocity`` projected on
    the grating normal; the velocity magnitude is ignored.
    """
    if step != "quarter_cycle":
        raise ValueError("only quarter_cycle stepping is supported")
    direction = 1.0 if spec.normal_speed >= 0 else -1.0
    x, y = _grid(H, W)
    t = np.arange(T, dtype=np.float64)[:, None, None]
    c, s = np.cos(spec.orientation), np.sin(spec.orientation)
    ph = 2 * np.pi * spec.spatial_frequency * (x * c + y * s) - direction * (np.pi / 2) * t + spec.phase
    sig = sum(np.sin(k * ph) / k for k in harmonics) * (4 / np.pi)
    return _finish(0.5 * spec.contrast * sig)


def barber_pole(spec: MotionSpec, aperture_h: int, aperture_w: int, T: int, H: int, W: int) -> np.ndarray:
    """Drifting grating seen through a centred axis-aligned rectangle; grey elsewhere."""
    if not (1 <= aperture_h <= H and 1 <= aperture_w <= W):
        raise ValueError("aperture must fit inside the frame")
    frames = drifting_grating(spec, T, H, W)
    y0 = (H - aperture_h) // 2
    x0 = (W - aperture_w) // 2
    mask = np.zeros((H, W), dtype=bool)
    mask[y0:y0 + aperture_h, x0:x0 + aperture_w] = True
    return np.where(mask, frames, 0.5)


def global_gabor_array(n_patches: int, global_velocity, T: int, H: int, W: int, seed: int = 0,
                       spatial_frequency: float = 0.125, sigma: float = 2.5,
                       contrast: float = 0.8) -> np.ndarray:
    """Gabor patches at random positions/orientations, all consistent with one 2D velocity.

    Each carrier drifts at the projection of ``global_velocity`` on its normal.
    Patches are cut at 3 sigma and blended additively as zero-mean signals.
    """
    rng = np.random.default_rng(seed)
    x, y = _grid(H, W)
    t = np.arange(T, dtype=np.float64)[:, None, None]
    gv = np.asarray(global_velocity, dtype=np.float64)
    sig = np.zeros((T, H, W))
    for _ in range(n_patches):
        cx, cy = rng.uniform(0, W - 1), rng.uniform(0, H - 1)
        theta = rng.uniform(0, 2 * np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        n = np.array([np.cos(theta), np.sin(theta)])
        speed = float(gv @ n)
        r2 = (x - cx) ** 2 + (y - cy) ** 2
        env = np.exp(-r2 / (2 * sigma ** 2)) * (r2 <= (3 * sigma) ** 2)
        ph = 2 * np.pi * spatial_frequency * ((x - cx) * n[0] + (y - cy) * n[1] - speed * t) + phase
        sig += 0.5 * contrast * np.sin(ph) * env
    return _finish(sig)


def random_texture(H: int, W: int, seed: int = 0, smooth: float = 1.0) -> np.ndarray:
    """Band-limited noise texture in [0, 1] for translation stimuli."""
    rng = np.random.default_rng(seed)
    img = ndimage.gaussian_filter(rng.standard_normal((H, W)), smooth, mode="wrap")
    img = (img - img.mean()) / (img.std() + 1e-12)
    return np.clip(0.5 + 0.2 * img, 0.0, 1.0)


def translate_texture(image, velocity, T: int, polarity_flip: bool = False) -> np.ndarray:
    """Rigid translation of ``image`` by ``t * velocity`` (bilinear, replicate border).

    With ``polarity_flip`` the contrast inverts about 0.5 on every odd frame
    (reverse-phi stimulus).
    """
    img = np.asarray(image, dtype=np.float64)
    if T < 2:
        raise ValueError("need at least 2 frames")
    vx, vy = velocity
    frames = np.empty((T,) + img.shape)
    for t in range(T):
        # shift expects (row, col) offsets
        frames[t] = ndimage.shift(img, (vy * t, vx * t), order=1, mode="nearest")
        if polarity_flip and t % 2 == 1:
            frames[t] = 1.0 - frames[t]
    return np.clip(frames, 0.0, 1.0)


_LUMA = np.array([0.299, 0.587, 0.114])
_EXTS = {".png", ".pgm"}


def _read_gray(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            # Pillow widens 16-bit PNGs to mode "I"
            return arr / 65535.0
        if im.mode == "L":
            return np.asarray(im, dtype=np.float64) / 255.0
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        return rgb @ _LUMA


def load_sequence(directory_path) -> np.ndarray:
    """Load lexicographically ordered PNG/PGM frames as a (T, H, W) array in [0, 1]."""
    d = Path(directory_path)
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in _EXTS)
    if len(files) < 2:
        raise ValueError(f"{d} holds {len(files)} frames; at least 2 are required")
    frames = [_read_gray(p) for p in files]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise SequenceFormatError(f"frames in {d} have mixed sizes: {sorted(shapes)}")
    return np.clip(np.stack(frames), 0.0, 1.0)


def save_sequence(frames, directory_path, prefix: str = "frame", bit_depth: int = 8) -> list[Path]:
    """Write frames as grayscale PNGs named ``{prefix}_{index:04d}.png``."""
    d = Path(directory_path)
    os.makedirs(d, exist_ok=True)
    frames = np.clip(np.asarray(frames, dtype=np.float64), 0.0, 1.0)
    paths = []
    for i, f in enumerate(frames):
        p = d / f"{prefix}_{i:04d}.png"
        if bit_depth == 8:
            Image.fromarray(np.round(f * 255).astype(np.uint8), mode="L").save(p)
        elif bit_depth == 16:
            Image.fromarray(np.round(f * 65535).astype(np.uint16)).save(p)
        else:
            raise ValueError("bit_depth must be 8 or 16")
        paths.append(p)
    return paths
