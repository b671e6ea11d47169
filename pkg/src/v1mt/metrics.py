"""Flow comparison statistics, ``.flo`` I/O and colour rendering.

Flows here are numpy arrays shaped (H, W, 2) holding (u, v) with u rightward
and v downward.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb

__all__ = [
    "FlowStats",
    "ComparisonReport",
    "DegenerateCorrelationError",
    "FlowFormatError",
    "flow_components",
    "epe",
    "pearson",
    "partial_correlation",
    "compare_flows",
    "write_flo",
    "read_flo",
    "flow_to_color",
]

SPEED_EPS = 1e-6
FLO_MAGIC = b"PIEH"


class DegenerateCorrelationError(ValueError):
    """Correlation undefined: zero variance, or a control correlation of +-1."""


class FlowFormatError(ValueError):
    pass


@dataclass
class FlowStats:
    u: np.ndarray
    v: np.ndarray
    dir: np.ndarray
    spd: np.ndarray
    valid: np.ndarray  # where the direction is defined


def flow_components(flow) -> FlowStats:
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[..., 0], flow[..., 1]
    spd = np.hypot(u, v)
    valid = spd >= SPEED_EPS
    d = np.where(valid, np.arctan2(v, u), np.nan)
    return FlowStats(u=u, v=v, dir=d, spd=spd, valid=valid)


def epe(flow_a, flow_b, valid=None):
    """Mean and per-pixel end-point error between two flows."""
    a = np.asarray(flow_a, dtype=np.float64)
    b = np.asarray(flow_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"flow shapes differ: {a.shape} vs {b.shape}")
    emap = np.sqrt(((a - b) ** 2).sum(axis=-1))
    if valid is None:
        valid = np.isfinite(emap)
    return float(emap[valid].mean()), emap


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size or a.size < 2:
        raise ValueError("pearson needs two vectors of equal length >= 2")
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.sqrt(da @ da), np.sqrt(db @ db)
    if na == 0 or nb == 0:
        raise DegenerateCorrelationError("zero variance; correlation undefined")
    return float(np.clip((da @ db) / (na * nb), -1.0, 1.0))


def partial_correlation(r_rm: float, r_rg: float, r_mg: float) -> float:
    """Correlation of response and model with the control's linear influence removed.

    ``(r_rm - r_rg r_mg) / (sqrt(1 - r_rg^2) sqrt(1 - r_mg^2))``
    """
    for r in (r_rm, r_rg, r_mg):
        if abs(r) > 1.0:
            raise ValueError(f"correlation {r} outside [-1, 1]")
    den = np.sqrt(1.0 - r_rg ** 2) * np.sqrt(1.0 - r_mg ** 2)
    if den == 0:
        raise DegenerateCorrelationError("control correlation of +-1 leaves nothing to partial out")
    return float((r_rm - r_rg * r_mg) / den)


def _dir_corr(da, db):
    # circular data: correlate the cos and sin embeddings separately, then average
    return 0.5 * (pearson(np.cos(da), np.cos(db)) + pearson(np.sin(da), np.sin(db)))


@dataclass
class ComparisonReport:
    r_uv: float
    r_dir: float
    r_spd: float
    epe: float
    r_uv_control: float | None = None
    r_dir_control: float | None = None
    r_spd_control: float | None = None
    epe_control: float | None = None
    rho_uv: float | None = None
    rho_dir: float | None = None
    rho_spd: float | None = None
    n_pixels: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def _stats_pair(a: FlowStats, b: FlowStats, keep):
    uv = pearson(np.concatenate([a.u[keep], a.v[keep]]), np.concatenate([b.u[keep], b.v[keep]]))
    dmask = keep & a.valid & b.valid
    rd = _dir_corr(a.dir[dmask], b.dir[dmask])
    rs = pearson(a.spd[keep], b.spd[keep])
    return uv, rd, rs


def compare_flows(model, reference, control=None) -> ComparisonReport:
    """Pearson r and EPE of ``model`` against ``reference``; with a ``control``
    flow (e.g. ground truth) also the partial correlations controlling for it.

    Pixels that are non-finite in any input are dropped from every statistic;
    direction statistics additionally drop pixels whose speed is ~0 in either
    field of the pair.
    """
    flows = [np.asarray(f, dtype=np.float64) for f in (model, reference, control) if f is not None]
    keep = np.ones(flows[0].shape[:-1], dtype=bool)
    for f in flows:
        keep &= np.isfinite(f).all(axis=-1)
    sm, sr = flow_components(flows[0]), flow_components(flows[1])
    r_uv, r_dir, r_spd = _stats_pair(sm, sr, keep)
    rep = ComparisonReport(r_uv=r_uv, r_dir=r_dir, r_spd=r_spd,
                           epe=epe(flows[0], flows[1], keep)[0], n_pixels=int(keep.sum()))
    if control is not None:
        sg = flow_components(flows[2])
        # model vs control and reference vs control
        m_uv, m_dir, m_spd = _stats_pair(sm, sg, keep)
        g_uv, g_dir, g_spd = _stats_pair(sr, sg, keep)
        rep.r_uv_control, rep.r_dir_control, rep.r_spd_control = m_uv, m_dir, m_spd
        rep.epe_control = epe(flows[0], flows[2], keep)[0]
        rep.rho_uv = partial_correlation(r_uv, g_uv, m_uv)
        rep.rho_dir = partial_correlation(r_dir, g_dir, m_dir)
        rep.rho_spd = partial_correlation(r_spd, g_spd, m_spd)
    return rep


# ---------------------------------------------------------------------------
# .flo files (Middlebury layout, little-endian)
# ---------------------------------------------------------------------------

def write_flo(flow, path) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError("flow must be (H, W, 2)")
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(struct.pack("<ii", w, h))
        fh.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_flo(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != FLO_MAGIC:
        raise FlowFormatError(f"{path}: bad magic, not a .flo file")
    w, h = struct.unpack("<ii", data[4:12])
    if w < 0 or h < 0:
        raise FlowFormatError(f"{path}: negative dimensions")
    expected = 12 + 8 * w * h
    if len(data) != expected:
        raise FlowFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2).copy()


def flow_to_color(flow, max_magnitude="auto") -> np.ndarray:
    """RGB rendering: hue encodes direction, saturation encodes magnitude.

    Hue is ``atan2(v, u) / 2pi`` (rightward = red), zero motion is white.
    Returns float RGB in [0, 1], shape (H, W, 3).
    """
    s = flow_components(flow)
    if max_magnitude == "auto":
        m = float(np.nanmax(s.spd)) if s.spd.size else 0.0
    else:
        m = float(max_magnitude)
    sat = np.clip(s.spd / m, 0.0, 1.0) if m > 0 else np.zeros_like(s.spd)
    hue = np.mod(np.arctan2(s.v, s.u), 2 * np.pi) / (2 * np.pi)
    hsv = np.stack([hue, sat, np.ones_like(hue)], axis=-1)
    return hsv_to_rgb(hsv)
