"""Dense-array substrate shared by both model stages.

All routines are implemented with torch so that the model stages can
differentiate through them. Each public function accepts numpy arrays or
torch tensors and returns the same kind it was given.

Conventions (fixed project-wide):

* spatial filtering is *correlation* (the kernel is not flipped) with
  replicate padding at the frame border;
* temporal filtering is causal convolution with zero pre-roll before the
  first frame;
* resizing is bilinear with the align-corners-false convention, i.e. output
  pixel ``i`` samples the input at ``(i + 0.5) * n_in / n_out - 0.5``.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "conv2d_masked",
    "conv1d_causal",
    "bilinear_resize",
    "build_pyramid",
    "pyramid_scales",
    "pyramid_shapes",
    "circular_mask",
    "correlate_bank",
    "causal_filter_bank",
    "resize_stack",
]


def _to_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, False
    arr = np.asarray(x)
    if not np.iscomplexobj(arr):
        arr = arr.astype(np.float64, copy=False)
    return torch.from_numpy(np.ascontiguousarray(arr)), True


def _back(t: torch.Tensor, as_numpy: bool):
    return t.detach().cpu().numpy() if as_numpy else t


def circular_mask(radius: int) -> np.ndarray:
    """Boolean (2r+1)x(2r+1) mask of integer offsets with x^2 + y^2 <= r^2."""
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius ** 2


# ---------------------------------------------------------------------------
# batched torch kernels (used directly by the model stages)
# ---------------------------------------------------------------------------

def correlate_bank(images: torch.Tensor, kernels: torch.Tensor) -> torch.Tensor:
    """Correlate every image with every real kernel, replicate padding.

    images: (N, H, W); kernels: (C, K, K) with K odd.  Returns (N, C, H, W).
    """
    k = kernels.shape[-1]
    pad = k // 2
    x = images.unsqueeze(1)
    x = F.pad(x, (pad, pad, pad, pad), mode="replicate")
    return F.conv2d(x, kernels.unsqueeze(1).to(x.dtype))


def causal_filter_bank(seq: torch.Tensor, kernels: torch.Tensor, last_only: bool = False) -> torch.Tensor:
    """Causal temporal convolution along dim 0, one kernel per channel.

    seq: (T, C, ...); kernels: (C, Tw).  out[t, c] = sum_k seq[t-k, c] * kernels[c, k]
    with zero pre-roll.  ``last_only`` returns just the final time slice (1, C, ...).
    """
    T = seq.shape[0]
    tw = kernels.shape[1]
    extra = (1,) * (seq.dim() - 2)
    ts = [T - 1] if last_only else range(T)
    out = []
    for t in ts:
        acc = None
        for k in range(min(tw, t + 1)):
            term = seq[t - k] * kernels[:, k].reshape(-1, *extra)
            acc = term if acc is None else acc + term
        out.append(acc)
    return torch.stack(out, 0)


def resize_stack(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear resize of the last two dims of an (N, C, H, W) tensor."""
    if x.shape[-2:] == (out_h, out_w):
        return x
    return F.interpolate(x, size=(out_h, out_w), mode="bilinear", align_corners=False, antialias=False)


# ---------------------------------------------------------------------------
# single-grid operations
# ---------------------------------------------------------------------------

def conv2d_masked(image, kernel, radius: int):
    """Correlate a 2D image with a complex kernel supported on a disc.

    The kernel must be (2*radius+1)^2 and exactly zero outside the inscribed
    circle.  Output has the input's H x W; borders are replicate-padded.
    """
    img, as_np = _to_tensor(image)
    ker, _ = _to_tensor(kernel)
    if ker.dim() != 2 or ker.shape[0] != ker.shape[1] or ker.shape[0] % 2 == 0:
        raise ValueError(f"kernel must be square and odd-sized, got {tuple(ker.shape)}")
    if ker.shape[0] != 2 * radius + 1:
        raise ValueError(f"kernel size {ker.shape[0]} does not match radius {radius}")
    outside = torch.from_numpy(~circular_mask(radius))
    if torch.any(ker[outside] != 0):
        raise ValueError("kernel has non-zero entries outside the circular support")
    if img.dim() != 2:
        raise ValueError("image must be 2D")
    if ker.is_complex():
        parts = torch.stack([ker.real, ker.imag]).to(torch.float64)
    else:
        parts = ker.to(torch.float64).unsqueeze(0)
    out = correlate_bank(img.to(torch.float64).unsqueeze(0), parts)[0]
    res = torch.complex(out[0], out[1]) if ker.is_complex() else out[0]
    return _back(res, as_np)


def conv1d_causal(seq, kernel):
    """Causal convolution along the time axis of a (T, H, W) grid.

    ``out[t] = sum_k seq[t-k] * kernel[k]`` with ``seq[t-k] = 0`` for ``t-k < 0``.
    """
    s, as_np = _to_tensor(seq)
    k, _ = _to_tensor(kernel)
    k = k.reshape(-1)
    if k.numel() == 0:
        raise ValueError("temporal kernel is empty")
    if s.shape[0] < 1:
        raise ValueError("sequence must have at least one frame")
    if k.is_complex() and not s.is_complex():
        s = s.to(torch.complex128)
    elif s.is_complex() and not k.is_complex():
        k = k.to(torch.complex128)
    res = causal_filter_bank(s.unsqueeze(1), k.unsqueeze(0).to(s.dtype))[:, 0]
    return _back(res, as_np)


def bilinear_resize(grid, out_h: int, out_w: int):
    """Resize a 2D grid (or a stack of them, leading dims) with bilinear sampling."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got {(out_h, out_w)}")
    g, as_np = _to_tensor(grid)
    lead = g.shape[:-2]
    x = g.reshape(1, -1, *g.shape[-2:])
    out = resize_stack(x, out_h, out_w).reshape(*lead, out_h, out_w)
    return _back(out, as_np)


def pyramid_scales(levels: int) -> np.ndarray:
    """Side-length scale factors, linear from 1.0 down to 0.25."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if levels == 1:
        return np.array([1.0])
    return np.linspace(1.0, 0.25, levels)


def pyramid_shapes(h: int, w: int, levels: int) -> list[tuple[int, int]]:
    shapes = []
    for s in pyramid_scales(levels):
        hk, wk = int(round(h * s)), int(round(w * s))
        if hk < 1 or wk < 1:
            raise ValueError(f"pyramid level of {h}x{w} at scale {s:.3f} is empty")
        shapes.append((hk, wk))
    return shapes


def build_pyramid(frames, levels: int):
    """Multi-scale pyramid of a (T, H, W) sequence, finest level first."""
    f, as_np = _to_tensor(frames)
    if f.dim() != 3:
        raise ValueError("frames must be (T, H, W)")
    h, w = f.shape[-2:]
    out = []
    for hk, wk in pyramid_shapes(h, w, levels):
        out.append(_back(resize_stack(f.unsqueeze(0), hk, wk)[0], as_np))
    return out
