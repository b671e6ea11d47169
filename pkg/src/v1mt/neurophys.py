"""In-silico neurophysiology: direction tuning, component/pattern classification,
spectral receptive fields and speed tuning.

Stage-I probes read a unit's complex-cell energy at the centre of its own
pyramid level (population-normalised across the 256 centre responses by
default) and average the last ``t_window // 2`` frames.  Stage-II probes
read one channel of the renormalised energy at the centre node of the graph
after a chosen iteration.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import least_squares

from . import stimuli
from .metrics import DegenerateCorrelationError, partial_correlation, pearson
from .stage1 import EnergyBank
from .stage2 import Stage2

__all__ = [
    "TuningCurve",
    "SpectralRF",
    "CellClassification",
    "OrientedGaussianFit",
    "Stage1Probe",
    "Stage2Probe",
    "direction_tuning",
    "component_pattern_predictions",
    "classify_unit",
    "spectral_rf",
    "fit_oriented_gaussian",
    "oriented_gaussian",
    "speed_tuning_partial_corr",
    "stage1_census",
    "stage2_census",
    "census_summary",
    "parameter_table",
    "write_tuning_csv",
    "write_classification_csv",
    "write_rf_csv",
    "write_fits_csv",
    "Z_THRESHOLD",
]

Z_THRESHOLD = 1.28


@dataclass
class TuningCurve:
    directions: np.ndarray  # degrees
    responses: np.ndarray

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=np.float64)
        self.responses = np.asarray(self.responses, dtype=np.float64)
        if self.directions.shape != self.responses.shape:
            raise ValueError("directions and responses must align")
        if not np.all(np.isfinite(self.responses)):
            raise ValueError("tuning responses must be finite")

    @property
    def preferred(self) -> float:
        return float(self.directions[np.argmax(self.responses)])


@dataclass
class SpectralRF:
    sf: np.ndarray  # cycles/pixel, log2-spaced
    tf: np.ndarray  # cycles/frame, log2-spaced
    responses: np.ndarray  # (len(sf), len(tf))

    @property
    def peak(self) -> tuple[float, float]:
        i, j = np.unravel_index(np.argmax(self.responses), self.responses.shape)
        return float(self.sf[i]), float(self.tf[j])


@dataclass
class CellClassification:
    Z_c: float
    Z_p: float
    label: str
    R_c: float = float("nan")
    R_p: float = float("nan")
    diagnostic: str = ""


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------

@dataclass
class Stage1Probe:
    """One Stage-I unit probed with stimuli matched to its own tuning."""

    bank: EnergyBank
    unit: int
    size: int = 64
    normalize: bool = True
    frames: int | None = None

    def __post_init__(self):
        self.frames = 2 * self.bank.t_window if self.frames is None else self.frames

    @property
    def spatial_frequency(self) -> float:
        return self.bank.unit(self.unit).native_spatial_frequency

    @property
    def speed(self) -> float:
        return self.bank.unit(self.unit).preferred_speed

    @property
    def direction(self) -> float:
        return math.degrees(self.bank.unit(self.unit).theta)

    def respond_all(self, frames: np.ndarray) -> np.ndarray:
        """Window-averaged responses of all 256 units, (B, 256)."""
        with torch.no_grad():
            e = self.bank.center_energies(torch.from_numpy(np.asarray(frames)), normalize=self.normalize)
        return e[:, -(self.bank.t_window // 2):].mean(dim=1).numpy()

    def respond(self, frames: np.ndarray) -> np.ndarray:
        return self.respond_all(frames)[:, self.unit]


@dataclass
class Stage2Probe:
    """One channel of the Stage-II renormalised energy at the centre node."""

    bank: EnergyBank
    model: Stage2
    channel: int
    iteration: int = -1
    size: int = 32
    frames: int | None = None
    spatial_frequency: float = 0.1
    speed: float = 1.0
    direction: float = 0.0

    def __post_init__(self):
        self.frames = self.bank.t_window if self.frames is None else self.frames

    def respond_all(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames)
        with torch.no_grad():
            E0 = self.bank(torch.from_numpy(frames)).to(self.model.W1.dtype)
            it = self.model.iterations if self.iteration == -1 else self.iteration + 1
            _, trace = self.model(E0, iterations=it, record=True)
            e_hat = trace["E_hat"][self.iteration if self.iteration >= 0 else -1]
        h, w = e_hat.shape[-2:]
        return e_hat[:, :, h // 2, w // 2].double().numpy()

    def respond(self, frames: np.ndarray) -> np.ndarray:
        return self.respond_all(frames)[:, self.channel]


def _grating_stack(directions_deg, sf, speed, size, frames, contrast=0.5, envelope_sigma=None):
    seqs = []
    for d in directions_deg:
        th = math.radians(d)
        spec = stimuli.MotionSpec(velocity=(speed * math.cos(th), speed * math.sin(th)), orientation=th % (2 * math.pi),
                                  spatial_frequency=sf, contrast=contrast)
        if envelope_sigma is None:
            seqs.append(stimuli.drifting_grating(spec, frames, size, size))
        else:
            c = ((size - 1) / 2, (size - 1) / 2)
            seqs.append(stimuli.drifting_gabor(spec, envelope_sigma, c, frames, size, size))
    return np.stack(seqs)


def _plaid_stack(directions_deg, sf, component_speed, half_angle_deg, size, frames, contrast=0.5):
    pattern_speed = component_speed / math.cos(math.radians(half_angle_deg))
    seqs = []
    for d in directions_deg:
        a, b = stimuli.plaid_specs(math.radians(d), pattern_speed, math.radians(half_angle_deg), sf, contrast)
        seqs.append(stimuli.plaid(a, b, frames, size, size))
    return np.stack(seqs)


def _directions(k_dirs):
    if k_dirs < 8:
        raise ValueError("need at least 8 directions")
    return np.arange(k_dirs) * 360.0 / k_dirs


def direction_tuning(probe, stimulus: str = "gabor", k_dirs: int = 24, directions=None,
                     half_angle: float = 60.0, contrast: float = 0.5, envelope_sigma=None) -> TuningCurve:
    """Tuning curve of a probed unit to gratings ("gabor") or plaids ("plaid").

    Gratings drift at the probe's preferred speed and spatial frequency; each
    plaid component has that same normal speed, so the pattern moves at
    ``speed / cos(half_angle)``.  Plaid directions refer to the pattern motion.
    """
    dirs = _directions(k_dirs) if directions is None else np.asarray(directions, dtype=np.float64)
    sf, speed = probe.spatial_frequency, probe.speed
    if stimulus == "gabor":
        frames = _grating_stack(dirs, sf, speed, probe.size, probe.frames, contrast, envelope_sigma)
    elif stimulus == "plaid":
        frames = _plaid_stack(dirs, sf, speed, half_angle, probe.size, probe.frames, contrast)
    else:
        raise ValueError(f"unknown stimulus {stimulus!r}")
    return TuningCurve(dirs, probe.respond(frames))


def _circular_shift(curve: TuningCurve, shift_deg: float) -> np.ndarray:
    """Responses of ``curve`` displaced by ``shift_deg``: out(d) = curve(d - shift)."""
    return np.interp((curve.directions - shift_deg) % 360.0, curve.directions, curve.responses, period=360.0)


def component_pattern_predictions(gabor_curve: TuningCurve, plaid_half_angle: float = 60.0):
    """Classic predictions for plaid tuning from grating tuning.

    The pattern prediction is the grating curve itself; the component
    prediction averages the grating curve displaced by +-half angle.
    """
    patt = TuningCurve(gabor_curve.directions, gabor_curve.responses.copy())
    comp = 0.5 * (_circular_shift(gabor_curve, plaid_half_angle) + _circular_shift(gabor_curve, -plaid_half_angle))
    return TuningCurve(gabor_curve.directions, comp), patt


def _clip_r(r, lim=1 - 1e-12):
    return float(np.clip(r, -lim, lim))


def classify_unit(actual: TuningCurve, comp_pred: TuningCurve, patt_pred: TuningCurve,
                  threshold: float = Z_THRESHOLD) -> CellClassification:
    """Partial-correlation classification into component / pattern / unclassified."""
    n = len(actual.responses)
    try:
        r_c = _clip_r(pearson(actual.responses, comp_pred.responses))
        r_p = _clip_r(pearson(actual.responses, patt_pred.responses))
        r_cp = _clip_r(pearson(comp_pred.responses, patt_pred.responses))
    except DegenerateCorrelationError as exc:
        return CellClassification(0.0, 0.0, "unclassified", diagnostic=f"degenerate curve: {exc}")
    R_c = _clip_r((r_c - r_p * r_cp) / math.sqrt((1 - r_p ** 2) * (1 - r_cp ** 2)))
    R_p = _clip_r((r_p - r_c * r_cp) / math.sqrt((1 - r_c ** 2) * (1 - r_cp ** 2)))
    scale = math.sqrt(max(n - 3, 1))
    Z_c, Z_p = math.atanh(R_c) * scale, math.atanh(R_p) * scale
    if Z_p - max(Z_c, 0.0) > threshold:
        label = "pattern"
    elif Z_c - max(Z_p, 0.0) > threshold:
        label = "component"
    else:
        label = "unclassified"
    return CellClassification(Z_c, Z_p, label, R_c, R_p)


# ---------------------------------------------------------------------------
# spectral receptive fields
# ---------------------------------------------------------------------------

def default_grids(n_sf: int = 9, n_tf: int = 9):
    return np.logspace(-6, -1.5, n_sf, base=2.0), np.logspace(-6, -2.1, n_tf, base=2.0)


def spectral_rf(probe, sf_grid=None, tf_grid=None, contrast: float = 0.5) -> SpectralRF:
    """Response over a spatial x temporal frequency grid at the probe's preferred direction."""
    if sf_grid is None or tf_grid is None:
        d_sf, d_tf = default_grids()
        sf_grid = d_sf if sf_grid is None else sf_grid
        tf_grid = d_tf if tf_grid is None else tf_grid
    sf_grid = np.asarray(sf_grid, dtype=np.float64)
    tf_grid = np.asarray(tf_grid, dtype=np.float64)
    out = np.empty((len(sf_grid), len(tf_grid)))
    for i, sf in enumerate(sf_grid):
        frames = np.stack([_grating_stack([probe.direction], sf, tf / sf, probe.size, probe.frames, contrast)[0]
                           for tf in tf_grid])
        out[i] = probe.respond(frames)
    return SpectralRF(sf_grid, tf_grid, out)


@dataclass
class OrientedGaussianFit:
    amplitude: float
    center_sf: float
    center_tf: float
    tilt: float  # degrees of the major axis in (log2 sf, log2 tf) space, in [0, 180); nan if isotropic
    widths: tuple[float, float]  # (major, minor) in octaves
    residual: float
    converged: bool = True
    isotropic: bool = False
    message: str = ""


def oriented_gaussian(params, X, Y):
    A, x0, y0, a, b, phi = params
    c, s = np.cos(phi), np.sin(phi)
    u = (X - x0) * c + (Y - y0) * s
    v = -(X - x0) * s + (Y - y0) * c
    return A * np.exp(-0.5 * ((u / a) ** 2 + (v / b) ** 2))


def _log_grid(rf: SpectralRF):
    X, Y = np.meshgrid(np.log2(rf.sf), np.log2(rf.tf), indexing="ij")
    return X, Y


def _fit(rf: SpectralRF, fixed_tilt=None, starts=(0.0, 45.0, 90.0, 135.0), max_nfev: int = 2000):
    X, Y = _log_grid(rf)
    z = rf.responses
    i, j = np.unravel_index(np.argmax(z), z.shape)
    spread = max(np.ptp(X), np.ptp(Y), 1.0) / 4
    best = None
    converged_any = False
    for phi0 in ([fixed_tilt] if fixed_tilt is not None else starts):
        phi0 = math.radians(phi0)
        p0 = np.array([z.max() if z.max() != 0 else 1.0, X[i, j], Y[i, j], spread * 1.5, spread, phi0])
        if fixed_tilt is None:
            fun = lambda p: (oriented_gaussian(p, X, Y) - z).ravel()
            x0 = p0
        else:
            fun = lambda p: (oriented_gaussian(np.append(p, phi0), X, Y) - z).ravel()
            x0 = p0[:5]
        try:
            res = least_squares(fun, x0, method="lm", max_nfev=max_nfev, xtol=1e-12, ftol=1e-12, gtol=1e-12)
        except ValueError:
            continue
        p = res.x if fixed_tilt is None else np.append(res.x, phi0)
        cost = float(np.sum(res.fun ** 2))
        converged_any |= res.status > 0
        if best is None or cost < best[1]:
            best = (p, cost, res.status > 0)
    # a nearly flat Gaussian at the mean approximates the mean-only model
    flat = np.array([z.mean(), X.mean(), Y.mean(), 1e6, 1e6, 0.0 if fixed_tilt is None else math.radians(fixed_tilt)])
    flat_cost = float(np.sum((oriented_gaussian(flat, X, Y) - z) ** 2))
    if best is None or flat_cost < best[1]:
        best = (flat, flat_cost, False)
    return best[0], best[1], converged_any


def _canonical(p):
    A, x0, y0, a, b, phi = p
    a, b = abs(a), abs(b)
    if b > a:
        a, b = b, a
        phi += math.pi / 2
    return A, x0, y0, a, b, math.degrees(phi) % 180.0


def fit_oriented_gaussian(rf: SpectralRF, iso_tol: float = 1e-2) -> OrientedGaussianFit:
    """Least-squares (Levenberg-Marquardt) oriented Gaussian in log2-frequency space.

    Four tilt initialisations are tried and the lowest residual kept.
    """
    p, cost, ok = _fit(rf)
    A, x0, y0, a, b, tilt = _canonical(p)
    iso = abs(a - b) <= iso_tol * max(a, b)
    msg = "" if ok else "least squares did not report convergence; best-so-far returned"
    with np.errstate(over="ignore"):
        c_sf, c_tf = float(np.exp2(x0)), float(np.exp2(y0))
    return OrientedGaussianFit(amplitude=float(A), center_sf=c_sf, center_tf=c_tf,
                               tilt=float("nan") if iso else float(tilt), widths=(float(a), float(b)),
                               residual=cost, converged=ok, isotropic=bool(iso), message=msg)


def speed_tuning_partial_corr(rf: SpectralRF, degenerate_tol: float = 1e-6) -> tuple[float, float]:
    """Partial correlations of the RF with its speed-tuned and separable predictions.

    The speed prediction is the best oriented Gaussian whose major axis lies
    on a constant-speed diagonal (45 degrees in log2 space); the independent
    prediction is the best axis-aligned (separable) one.  When the two
    predictions are indistinguishable both values are 0.
    """
    X, Y = _log_grid(rf)
    ps, _, _ = _fit(rf, fixed_tilt=45.0)
    pi, _, _ = _fit(rf, fixed_tilt=0.0)
    speed_pred = oriented_gaussian(ps, X, Y).ravel()
    indep_pred = oriented_gaussian(pi, X, Y).ravel()
    actual = rf.responses.ravel()
    try:
        r_s = pearson(actual, speed_pred)
        r_i = pearson(actual, indep_pred)
        r_si = pearson(speed_pred, indep_pred)
    except DegenerateCorrelationError:
        return 0.0, 0.0
    if 1.0 - abs(r_si) < degenerate_tol:
        return 0.0, 0.0
    # an exact fit leaves nothing for the other prediction to explain
    if 1.0 - r_s < degenerate_tol:
        return 1.0, 0.0
    if 1.0 - r_i < degenerate_tol:
        return 0.0, 1.0
    return partial_correlation(r_s, r_i, r_si), partial_correlation(r_i, r_s, r_si)


# ---------------------------------------------------------------------------
# populations
# ---------------------------------------------------------------------------

@dataclass
class UnitReport:
    unit: int
    gabor: TuningCurve
    plaid: TuningCurve
    classification: CellClassification
    meta: dict = field(default_factory=dict)


def stage1_census(bank: EnergyBank, units=None, k_dirs: int = 24, half_angle: float = 60.0,
                  size: int = 64, normalize: bool = True) -> list[UnitReport]:
    """Classify Stage-I units, each probed at its own preferred SF and speed."""
    units = range(len(bank.levels)) if units is None else units
    reports = []
    for u in units:
        probe = Stage1Probe(bank, u, size=size, normalize=normalize)
        if probe.spatial_frequency >= 0.5:
            reports.append(UnitReport(u, TuningCurve([], []), TuningCurve([], []),
                                      CellClassification(0, 0, "unclassified", diagnostic="aliased preferred SF")))
            continue
        g = direction_tuning(probe, "gabor", k_dirs)
        p = direction_tuning(probe, "plaid", k_dirs, half_angle=half_angle)
        comp, patt = component_pattern_predictions(g, half_angle)
        reports.append(UnitReport(u, g, p, classify_unit(p, comp, patt),
                                  {"sf": probe.spatial_frequency, "speed": probe.speed}))
    return reports


def stage2_census(bank: EnergyBank, model: Stage2, iteration: int = -1, k_dirs: int = 24, half_angle: float = 60.0,
                  size: int = 32, spatial_frequency: float = 0.1, speed: float = 1.0) -> list[UnitReport]:
    """Classify all Stage-II channels from one shared grating set and one plaid set."""
    probe = Stage2Probe(bank, model, 0, iteration=iteration, size=size, spatial_frequency=spatial_frequency,
                        speed=speed)
    dirs = _directions(k_dirs)
    g_all = probe.respond_all(_grating_stack(dirs, spatial_frequency, speed, size, probe.frames))
    p_all = probe.respond_all(_plaid_stack(dirs, spatial_frequency, speed, half_angle, size, probe.frames))
    reports = []
    for c in range(g_all.shape[1]):
        g, p = TuningCurve(dirs, g_all[:, c]), TuningCurve(dirs, p_all[:, c])
        comp, patt = component_pattern_predictions(g, half_angle)
        reports.append(UnitReport(c, g, p, classify_unit(p, comp, patt)))
    return reports


def census_summary(reports, meta: dict | None = None) -> dict:
    labels = [r.classification.label for r in reports]
    n = len(labels)
    out = {k: labels.count(k) / n if n else 0.0 for k in ("component", "pattern", "unclassified")}
    out["n_units"] = n
    out["meta"] = meta or {}
    return out


def parameter_table(bank: EnergyBank) -> list[dict]:
    """Per-unit tuning parameters with native preferred speed and direction."""
    rows = []
    for i, u in enumerate(bank.units()):
        d = asdict(u)
        d.update(unit=i, preferred_speed=u.preferred_speed, preferred_direction_deg=math.degrees(u.theta),
                 native_sf=u.native_spatial_frequency)
        rows.append(d)
    return rows


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_tuning_csv(path, reports) -> None:
    rows = []
    for r in reports:
        for d, g, p in zip(r.gabor.directions, r.gabor.responses, r.plaid.responses):
            rows.append([r.unit, repr(float(d)), repr(float(g)), repr(float(p))])
    _write_rows(path, ["unit", "direction_deg", "gabor", "plaid"], rows)


def write_classification_csv(path, reports) -> None:
    rows = [[r.unit, repr(r.classification.Z_c), repr(r.classification.Z_p), r.classification.label,
             r.classification.diagnostic] for r in reports]
    _write_rows(path, ["unit", "Z_c", "Z_p", "label", "diagnostic"], rows)


def write_rf_csv(path, rfs: dict) -> None:
    rows = []
    for unit, rf in rfs.items():
        for i, sf in enumerate(rf.sf):
            for j, tf in enumerate(rf.tf):
                rows.append([unit, repr(float(sf)), repr(float(tf)), repr(float(rf.responses[i, j]))])
    _write_rows(path, ["unit", "sf", "tf", "response"], rows)


def write_fits_csv(path, fits: dict, speed: dict | None = None) -> None:
    rows = []
    for unit, f in fits.items():
        rs, ri = speed.get(unit, (float("nan"),) * 2) if speed else (float("nan"),) * 2
        rows.append([unit, f.amplitude, f.center_sf, f.center_tf, f.tilt, f.widths[0], f.widths[1], f.residual,
                     f.isotropic, f.converged, rs, ri])
    _write_rows(path, ["unit", "amplitude", "center_sf", "center_tf", "tilt_deg", "width_major", "width_minor",
                       "residual", "isotropic", "converged", "rho_speed", "rho_independent"], rows)
