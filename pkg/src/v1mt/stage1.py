"""Local motion energy: a bank of trainable spatiotemporal Gabor energy units.

Each unit pairs a complex 2D Gabor (spatial) with a damped complex
exponential (temporal).  The two real quadrature responses are

    even = (S * Re G) * Re T - (S * Im G) * Im T
    odd  = (S * Im G) * Re T + (S * Re G) * Im T

i.e. the real and imaginary parts of the complex response, so that
``odd**2 + even**2`` is phase invariant.  With correlation in space and causal
convolution in time a unit prefers motion along ``(cos theta, sin theta)``
at ``f_t / f_s`` pixels/frame of its own pyramid level.

The input is mean-subtracted before filtering so that a uniform field
produces no linear response (the complex Gabor carries a DC component).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import numgrid
from .numgrid import causal_filter_bank, correlate_bank, pyramid_scales, pyramid_shapes, resize_stack

__all__ = [
    "ParameterError",
    "GaborUnit",
    "EnergyBank",
    "spatial_kernel",
    "temporal_kernel",
    "quadrature_responses",
    "motion_energy",
    "normalize_across_units",
    "stage1_forward",
    "N_UNITS",
    "N_LEVELS",
    "BANK_FORMAT_VERSION",
]

N_UNITS = 256
N_LEVELS = 8
RADIUS = 7
T_WINDOW = 8
F_LO, F_HI = 0.001, 0.249
SIGMA_MIN, GAMMA_MIN, TAU_MIN = 0.5, 0.1, 0.25
BANK_FORMAT_VERSION = 1


class ParameterError(ValueError):
    """A unit or bank parameter violates its declared range."""


@dataclass(frozen=True)
class GaborUnit:
    f_s: float
    f_t: float
    theta: float
    sigma: float
    gamma: float
    tau: float
    alpha1: float = 0.0
    scale_level: int = 0

    def __post_init__(self):
        if not 0.0 <= self.theta < 2 * math.pi:
            raise ParameterError(f"theta={self.theta} outside [0, 2pi)")
        for name in ("f_s", "f_t"):
            v = getattr(self, name)
            if not 0.0 < v < 0.25:
                raise ParameterError(f"{name}={v} outside (0, 0.25)")
        for name in ("sigma", "gamma", "tau"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        if not 0 <= self.scale_level < N_LEVELS:
            raise ParameterError(f"scale_level={self.scale_level} outside [0, {N_LEVELS})")

    @property
    def level_scale(self) -> float:
        return float(pyramid_scales(N_LEVELS)[self.scale_level])

    @property
    def preferred_speed(self) -> float:
        """Preferred speed in native (full-resolution) pixels/frame."""
        return self.f_t / self.f_s / self.level_scale

    @property
    def native_spatial_frequency(self) -> float:
        return self.f_s * self.level_scale


# ---------------------------------------------------------------------------
# kernels (vectorised, differentiable)
# ---------------------------------------------------------------------------

def _spatial_kernels(f_s, theta, sigma, gamma, radius=RADIUS):
    """Re/Im parts of a batch of masked Gabor kernels, each (N, 2r+1, 2r+1)."""
    dtype = f_s.dtype
    r = torch.arange(-radius, radius + 1, dtype=dtype)
    y, x = torch.meshgrid(r, r, indexing="ij")
    mask = torch.from_numpy(numgrid.circular_mask(radius)).to(dtype)
    c = torch.cos(theta)[:, None, None]
    s = torch.sin(theta)[:, None, None]
    xp = x * c + y * s
    yp = -x * s + y * c
    env = torch.exp(-(xp ** 2 + (gamma[:, None, None] * yp) ** 2) / (2 * sigma[:, None, None] ** 2)) * mask
    arg = 2 * math.pi * f_s[:, None, None] * xp
    return env * torch.cos(arg), env * torch.sin(arg)


def _temporal_kernels(f_t, tau, t_window=T_WINDOW):
    t = torch.arange(t_window, dtype=f_t.dtype)
    decay = torch.exp(-t[None, :] / tau[:, None])
    arg = 2 * math.pi * f_t[:, None] * t[None, :]
    return decay * torch.cos(arg), decay * torch.sin(arg)


def _unit_tensors(unit: GaborUnit):
    f = lambda v: torch.tensor([float(v)], dtype=torch.float64)
    return f(unit.f_s), f(unit.f_t), f(unit.theta), f(unit.sigma), f(unit.gamma), f(unit.tau)


def spatial_kernel(unit: GaborUnit, radius: int = RADIUS) -> np.ndarray:
    """Complex (2r+1)x(2r+1) Gabor kernel of one unit, zero outside the disc."""
    fs, _, th, sg, gm, _ = _unit_tensors(unit)
    re, im = _spatial_kernels(fs, th, sg, gm, radius)
    return (re[0] + 1j * im[0]).numpy()


def temporal_kernel(unit: GaborUnit, t_window: int = T_WINDOW) -> np.ndarray:
    """Complex temporal impulse response for lags 0..t_window-1."""
    _, ft, _, _, _, tau = _unit_tensors(unit)
    re, im = _temporal_kernels(ft, tau, t_window)
    return (re[0] + 1j * im[0]).numpy()


def quadrature_responses(seq, unit: GaborUnit, t_window: int = T_WINDOW):
    """Odd and even linear responses (plus ``alpha1``) over a (T, H, W) level sequence."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 3 or seq.shape[0] < 2:
        raise ValueError("sequence must be (T, H, W) with T >= 2")
    g = spatial_kernel(unit)
    tk = temporal_kernel(unit, t_window)
    s_re = np.stack([numgrid.conv2d_masked(f, g.real, RADIUS) for f in seq])
    s_im = np.stack([numgrid.conv2d_masked(f, g.imag, RADIUS) for f in seq])
    even = numgrid.conv1d_causal(s_re, tk.real) - numgrid.conv1d_causal(s_im, tk.imag)
    odd = numgrid.conv1d_causal(s_im, tk.real) + numgrid.conv1d_causal(s_re, tk.imag)
    return odd + unit.alpha1, even + unit.alpha1


def motion_energy(odd, even):
    return odd ** 2 + even ** 2


def normalize_across_units(energies, K1: float, sigma1: float, axis: int = -1):
    """Divisive normalisation ``K1 * L_n / (sum_i L_i + sigma1)`` along ``axis``."""
    if isinstance(energies, torch.Tensor):
        return K1 * energies / (energies.sum(dim=axis, keepdim=True) + sigma1)
    e = np.asarray(energies, dtype=np.float64)
    return K1 * e / (e.sum(axis=axis, keepdims=True) + sigma1)


# ---------------------------------------------------------------------------
# the bank
# ---------------------------------------------------------------------------

def _logit(p):
    return np.log(p) - np.log1p(-p)


def _softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 30, y, np.log(np.expm1(np.minimum(y, 30))))


class EnergyBank(nn.Module):
    """256 motion-energy units, 32 per pyramid level, with Eq.-5 style normalisation.

    Parameters are stored unconstrained; the physical values are exposed as
    properties and always satisfy their range constraints:
    ``theta = raw mod 2pi``, ``f = 0.001 + 0.248 * sigmoid(raw)``,
    ``sigma/gamma/tau = floor + softplus(raw)`` and ``K1, sigma1 = exp(raw)``.
    """

    param_names = ("theta", "f_s", "f_t", "sigma", "gamma", "tau", "alpha1")

    def __init__(self, raw: dict, n_levels: int = N_LEVELS, radius: int = RADIUS, t_window: int = T_WINDOW):
        super().__init__()
        n = len(raw["theta"])
        if n != N_UNITS:
            raise ParameterError(f"bank needs exactly {N_UNITS} units, got {n}")
        if N_UNITS % n_levels:
            raise ParameterError("units must split evenly across levels")
        if t_window < 2:
            raise ParameterError("t_window must be >= 2")
        self.n_levels = n_levels
        self.radius = radius
        self.t_window = t_window
        self.per_level = N_UNITS // n_levels
        for name in self.param_names + ("K1", "sigma1"):
            value = torch.as_tensor(np.asarray(raw[name], dtype=np.float64))
            setattr(self, f"{name}_raw", nn.Parameter(value.clone()))
        self.register_buffer("levels", torch.arange(N_UNITS) // self.per_level)

    # -- constrained views ------------------------------------------------
    @property
    def theta(self):
        th = torch.remainder(self.theta_raw, 2 * math.pi)
        return torch.where(th >= 2 * math.pi, torch.zeros_like(th), th)  # tiny negatives round up to 2pi

    @property
    def f_s(self):
        return F_LO + (F_HI - F_LO) * torch.sigmoid(self.f_s_raw)

    @property
    def f_t(self):
        return F_LO + (F_HI - F_LO) * torch.sigmoid(self.f_t_raw)

    @property
    def sigma(self):
        return SIGMA_MIN + nn.functional.softplus(self.sigma_raw)

    @property
    def gamma(self):
        return GAMMA_MIN + nn.functional.softplus(self.gamma_raw)

    @property
    def tau(self):
        return TAU_MIN + nn.functional.softplus(self.tau_raw)

    @property
    def alpha1(self):
        return self.alpha1_raw

    @property
    def K1(self):
        return torch.exp(self.K1_raw)

    @property
    def sigma1(self):
        return torch.exp(self.sigma1_raw)

    # -- construction -----------------------------------------------------
    @staticmethod
    def raw_from_values(theta, f_s, f_t, sigma, gamma, tau, alpha1, K1, sigma1) -> dict:
        f_s, f_t = np.asarray(f_s, float), np.asarray(f_t, float)
        if np.any((f_s <= F_LO) | (f_s >= F_HI) | (f_t <= F_LO) | (f_t >= F_HI)):
            raise ParameterError(f"frequencies must lie strictly inside ({F_LO}, {F_HI})")
        if K1 <= 0 or sigma1 <= 0:
            raise ParameterError("K1 and sigma1 must be positive")
        return {
            "theta": np.asarray(theta, float) % (2 * math.pi),
            "f_s": _logit((f_s - F_LO) / (F_HI - F_LO)),
            "f_t": _logit((f_t - F_LO) / (F_HI - F_LO)),
            "sigma": _softplus_inv(np.asarray(sigma, float) - SIGMA_MIN),
            "gamma": _softplus_inv(np.asarray(gamma, float) - GAMMA_MIN),
            "tau": _softplus_inv(np.asarray(tau, float) - TAU_MIN),
            "alpha1": np.asarray(alpha1, float),
            "K1": np.log(K1),
            "sigma1": np.log(sigma1),
        }

    @classmethod
    def default(cls, seed: int = 0, K1: float = 16.0, sigma1: float = 1.0, tau_range=(1.0, 8.0 / 3.0),
                t_window: int = T_WINDOW) -> "EnergyBank":
        """Untrained bank with randomly drawn tunings (the fixed-filter baseline)."""
        rng = np.random.default_rng(seed)
        n = N_UNITS
        vals = dict(
            f_s=np.exp(rng.uniform(np.log(0.02), np.log(0.24), n)),
            f_t=np.exp(rng.uniform(np.log(0.02), np.log(0.24), n)),
            theta=rng.uniform(0, 2 * math.pi, n),
            sigma=rng.uniform(2.0, 5.0, n),
            gamma=rng.uniform(0.5, 1.5, n),
            tau=rng.uniform(*tau_range, n),
            alpha1=np.zeros(n),
        )
        return cls(cls.raw_from_values(K1=K1, sigma1=sigma1, **vals), t_window=t_window)

    @classmethod
    def from_units(cls, units, K1: float = 16.0, sigma1: float = 1.0, t_window: int = T_WINDOW) -> "EnergyBank":
        units = list(units)
        per_level = N_UNITS // N_LEVELS
        for i, u in enumerate(units):
            if u.scale_level != i // per_level:
                raise ParameterError(f"unit {i} must sit on level {i // per_level}, not {u.scale_level}")
        vals = {k: [getattr(u, k) for u in units] for k in cls.param_names}
        return cls(cls.raw_from_values(K1=K1, sigma1=sigma1, **vals), t_window=t_window)

    def unit(self, i: int) -> GaborUnit:
        with torch.no_grad():
            return GaborUnit(
                f_s=float(self.f_s[i]), f_t=float(self.f_t[i]), theta=float(self.theta[i]),
                sigma=float(self.sigma[i]), gamma=float(self.gamma[i]), tau=float(self.tau[i]),
                alpha1=float(self.alpha1[i]), scale_level=int(self.levels[i]),
            )

    def units(self) -> list[GaborUnit]:
        return [self.unit(i) for i in range(N_UNITS)]

    def preferred_velocities(self) -> np.ndarray:
        """(256, 2) preferred velocities in native pixels/frame."""
        with torch.no_grad():
            scale = torch.as_tensor(pyramid_scales(self.n_levels))[self.levels]
            speed = (self.f_t / self.f_s / scale).numpy()
            th = self.theta.numpy()
        return np.stack([speed * np.cos(th), speed * np.sin(th)], axis=1)

    # -- serialisation ----------------------------------------------------
    def to_dict(self) -> dict:
        with torch.no_grad():
            raw = {k: getattr(self, f"{k}_raw").detach().numpy().tolist() for k in self.param_names}
            raw["K1"] = float(self.K1_raw)
            raw["sigma1"] = float(self.sigma1_raw)
        return {
            "format": "v1mt.EnergyBank",
            "version": BANK_FORMAT_VERSION,
            "n_levels": self.n_levels,
            "radius": self.radius,
            "t_window": self.t_window,
            "K1": float(self.K1.detach()),
            "sigma1": float(self.sigma1.detach()),
            "units": [asdict(u) for u in self.units()],
            "raw": raw,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnergyBank":
        if d.get("format") != "v1mt.EnergyBank":
            raise ValueError("not an EnergyBank parameter file")
        if d.get("version") != BANK_FORMAT_VERSION:
            raise ValueError(f"unsupported bank version {d.get('version')}")
        return cls(d["raw"], n_levels=d["n_levels"], radius=d["radius"], t_window=d["t_window"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "EnergyBank":
        return cls.from_dict(json.loads(Path(path).read_text()))

    # -- forward passes ---------------------------------------------------
    def kernels(self):
        s_re, s_im = _spatial_kernels(self.f_s, self.theta, self.sigma, self.gamma, self.radius)
        t_re, t_im = _temporal_kernels(self.f_t, self.tau, self.t_window)
        return s_re, s_im, t_re, t_im

    @staticmethod
    def _prepare(frames) -> torch.Tensor:
        x = torch.as_tensor(frames)
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.dim() != 4 or x.shape[1] < 2:
            raise ValueError("frames must be (B, T, H, W) or (T, H, W) with T >= 2")
        x = x.to(torch.float64)
        return x - x.mean(dim=(1, 2, 3), keepdim=True)

    def _quadrature(self, s_re, s_im, t_re, t_im, idx, last_only):
        # s_re/s_im: (T, C, ...) spatial responses for the units in idx
        even = causal_filter_bank(s_re, t_re[idx], last_only) - causal_filter_bank(s_im, t_im[idx], last_only)
        odd = causal_filter_bank(s_im, t_re[idx], last_only) + causal_filter_bank(s_re, t_im[idx], last_only)
        a = self.alpha1[idx].reshape(1, -1, *([1] * (s_re.dim() - 2)))
        return odd + a, even + a

    def level_energies(self, frames, last_only: bool = False) -> list[torch.Tensor]:
        """Raw complex-cell energies per pyramid level, each (T', B, 32, h_k, w_k)."""
        x = self._prepare(frames)
        B, T, H, W = x.shape
        if last_only:
            if T < self.t_window:
                raise ValueError(f"need at least t_window={self.t_window} frames, got {T}")
            x = x[:, T - self.t_window:]
            T = self.t_window
        s_re, s_im, t_re, t_im = self.kernels()
        flat = x.reshape(1, B * T, H, W)
        out = []
        for lvl, (hk, wk) in enumerate(pyramid_shapes(H, W, self.n_levels)):
            idx = slice(lvl * self.per_level, (lvl + 1) * self.per_level)
            img = resize_stack(flat, hk, wk)[0]
            ker = torch.cat([s_re[idx], s_im[idx]])
            r = correlate_bank(img, ker).reshape(B, T, 2, self.per_level, hk, wk)
            r = r.permute(2, 1, 3, 0, 4, 5)  # (2, T, C, B, h, w)
            odd, even = self._quadrature(r[0], r[1], t_re, t_im, idx, last_only)
            out.append(motion_energy(odd, even).transpose(1, 2))
        return out

    def forward(self, frames) -> torch.Tensor:
        """Normalised energy map (B, 256, H/8, W/8) read out at the final frame."""
        x = torch.as_tensor(frames)
        H, W = x.shape[-2:]
        if H % 8 or W % 8:
            raise ValueError(f"frame size {H}x{W} must be divisible by 8")
        h, w = H // 8, W // 8
        maps = [resize_stack(e[-1], h, w) for e in self.level_energies(frames, last_only=True)]
        energy = torch.cat(maps, dim=1)
        return normalize_across_units(energy, self.K1, self.sigma1, axis=1)

    def center_energies(self, frames, normalize: bool = False) -> torch.Tensor:
        """Energy time series of every unit at the centre of its own level, (B, T, 256).

        Cheap probe used by the neurophysiology analyses: only the centre
        receptive field of each level is filtered.  With ``normalize`` the
        population normalisation is applied across the 256 centre responses.
        """
        x = self._prepare(frames)
        B, T, H, W = x.shape
        s_re, s_im, t_re, t_im = self.kernels()
        r = self.radius
        flat = x.reshape(1, B * T, H, W)
        out = []
        for lvl, (hk, wk) in enumerate(pyramid_shapes(H, W, self.n_levels)):
            idx = slice(lvl * self.per_level, (lvl + 1) * self.per_level)
            img = resize_stack(flat, hk, wk)
            img = nn.functional.pad(img, (r, r, r, r), mode="replicate")[0]
            cy, cx = hk // 2 + r, wk // 2 + r
            patch = img[:, cy - r:cy + r + 1, cx - r:cx + r + 1]
            sr = torch.einsum("nij,cij->nc", patch, s_re[idx]).reshape(B, T, -1).transpose(0, 1)
            si = torch.einsum("nij,cij->nc", patch, s_im[idx]).reshape(B, T, -1).transpose(0, 1)
            odd, even = self._quadrature(sr.transpose(1, 2), si.transpose(1, 2), t_re, t_im, idx, False)
            out.append(motion_energy(odd, even).permute(2, 0, 1))  # (B, T, C)
        e = torch.cat(out, dim=2)
        if normalize:
            e = normalize_across_units(e, self.K1, self.sigma1, axis=2)
        return e


def stage1_forward(seq, bank: EnergyBank) -> np.ndarray:
    """Energy map of a single (T, H, W) sequence as an (H/8, W/8, 256) array."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 3:
        raise ValueError("seq must be (T, H, W)")
    with torch.no_grad():
        e = bank(torch.from_numpy(seq))[0]
    return e.permute(1, 2, 0).numpy()
