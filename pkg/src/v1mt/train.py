"""Desk-scale supervised fitting on synthetic stimuli, plus gradient checking.

Gradients come from torch autograd; :func:`finite_difference_check` compares
them against central differences on random parameter subsets.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import stimuli
from .stage1 import EnergyBank
from .stage2 import Stage2

__all__ = [
    "TrainConfig",
    "GradientError",
    "sequence_loss",
    "gradients",
    "finite_difference_check",
    "fit_stage1",
    "fit_stage2",
    "Stage1Fit",
    "Stage2Fit",
    "SampleSet",
    "make_samples",
    "save_checkpoint",
    "load_checkpoint",
    "write_log",
    "CHECKPOINT_VERSION",
]

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class GradientError(FloatingPointError):
    pass


OPTIMIZERS = {"sgd": "SGD with momentum", "adam": "Adam"}


@dataclass
class TrainConfig:
    steps: int = 200
    step_size: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    loss_decay: float = 0.8
    batch_size: int = 4
    size: int = 32
    frames: int = 8
    clip_norm: float | None = 1.0
    iterations: int | None = None
    # stage-II curriculum: fraction of steps spent on plain translations
    warmup_fraction: float = 0.3
    pool_size: int = 96
    # "sgd" (with momentum) or "adam"
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {sorted(OPTIMIZERS)}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size < 0:
            raise ValueError("step_size must be >= 0")
        if self.batch_size < 1 or self.pool_size < self.batch_size:
            raise ValueError("need 1 <= batch_size <= pool_size")
        if not 0 < self.loss_decay <= 1:
            raise ValueError("loss_decay must lie in (0, 1]")


def sequence_loss(pred_flows, gt, w: float = 0.8):
    """``sum_k w^(K-k) * mean|pred_k - gt|`` over the K iteration outputs."""
    if not 0 < w <= 1:
        raise ValueError("w must lie in (0, 1]")
    K = len(pred_flows)
    total = 0.0
    for k, pred in enumerate(pred_flows, start=1):
        total = total + w ** (K - k) * (pred - gt).abs().mean()
    return total


def gradients(loss: torch.Tensor, params: dict) -> dict:
    """Gradients of ``loss`` w.r.t. a name -> tensor mapping; unused tensors get zeros.

    Raises :class:`GradientError` naming the first block with a non-finite gradient.
    """
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True, retain_graph=True)
    out = {}
    for n, g in zip(names, grads):
        g = torch.zeros_like(params[n]) if g is None else g
        if not torch.isfinite(g).all():
            raise GradientError(f"non-finite gradient in block {n!r}")
        out[n] = g
    return out


def finite_difference_check(fn, params: list[torch.Tensor], n_check: int = 64, eps: float = 1e-4,
                            seed: int = 0, floor: float = 1e-8) -> float:
    """Max relative error between autograd and central differences.

    ``fn()`` must return a scalar built from ``params`` (float64 leaf tensors
    with ``requires_grad``).  ``n_check`` entries are sampled across all
    parameters; the relative error is ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, floor)``.
    """
    grads = torch.autograd.grad(fn(), params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_check, total), replace=False)
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            i = int(np.searchsorted(offsets, flat, side="right") - 1)
            j = int(flat - offsets[i])
            p = params[i].view(-1)
            orig = p[j].item()
            p[j] = orig + eps
            up = fn().item()
            p[j] = orig - eps
            down = fn().item()
            p[j] = orig
            fd = (up - down) / (2 * eps)
            ad = grads[i].view(-1)[j].item()
            rel = abs(ad - fd) / max(abs(ad), abs(fd), floor)
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# synthetic samples
# ---------------------------------------------------------------------------

@dataclass
class SampleSet:
    frames: np.ndarray  # (N, T, H, W)
    velocity: np.ndarray  # (N, 2) ground-truth (perceived) velocity, constant over the frame
    kind: list = field(default_factory=list)


def _random_velocity(rng, max_speed):
    speed = rng.uniform(0.25, max_speed)
    ang = rng.uniform(0, 2 * math.pi)
    return speed * math.cos(ang), speed * math.sin(ang)


def make_samples(kinds, n: int, size: int = 32, frames: int = 8, seed: int = 0, max_speed: float = 1.5) -> SampleSet:
    """Draw ``n`` stimuli cycling through ``kinds`` (translation, grating, plaid, gabor_array)."""
    rng = np.random.default_rng(seed)
    out, vel, kind = [], [], []
    for i in range(n):
        k = kinds[i % len(kinds)]
        v = _random_velocity(rng, max_speed)
        if k == "translation":
            tex = stimuli.random_texture(size, size, seed=int(rng.integers(1 << 31)), smooth=rng.uniform(0.7, 2.0))
            seq = stimuli.translate_texture(tex, v, frames)
        elif k == "grating":
            ang = math.atan2(v[1], v[0])
            spec = stimuli.MotionSpec(velocity=v, orientation=ang, spatial_frequency=rng.uniform(0.05, 0.2),
                                      contrast=rng.uniform(0.5, 1.0), phase=rng.uniform(0, 2 * math.pi))
            seq = stimuli.drifting_grating(spec, frames, size, size)
        elif k == "plaid":
            direction = math.atan2(v[1], v[0])
            a, b = stimuli.plaid_specs(direction, math.hypot(*v), half_angle=rng.uniform(math.pi / 6, math.pi / 2.4),
                                       spatial_frequency=rng.uniform(0.06, 0.16), contrast=0.5)
            a = stimuli.MotionSpec(**{**asdict(a), "phase": rng.uniform(0, 2 * math.pi)})
            b = stimuli.MotionSpec(**{**asdict(b), "phase": rng.uniform(0, 2 * math.pi)})
            seq = stimuli.plaid(a, b, frames, size, size)
            v = tuple(stimuli.ioc_velocity(a, b))
        elif k == "gabor_array":
            seq = stimuli.global_gabor_array(int(rng.integers(6, 12)), v, frames, size, size,
                                             seed=int(rng.integers(1 << 31)))
        else:
            raise ValueError(f"unknown sample kind {k!r}")
        out.append(seq)
        vel.append(v)
        kind.append(k)
    return SampleSet(frames=np.stack(out), velocity=np.asarray(vel, dtype=np.float64), kind=kind)


def _dense_gt(velocity, h, w, dtype=torch.float64):
    v = torch.as_tensor(velocity, dtype=dtype)
    return v[:, :, None, None].expand(-1, 2, h, w)


def _optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.step_size)
    return torch.optim.SGD(params, lr=cfg.step_size, momentum=cfg.momentum)


def _clip(params, cfg):
    if cfg.clip_norm is not None:
        torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm)


# ---------------------------------------------------------------------------
# stage I
# ---------------------------------------------------------------------------

@dataclass
class Stage1Fit:
    bank: EnergyBank
    readout: nn.Module
    losses: list


def _readout(seed):
    gen = torch.Generator().manual_seed(seed)
    conv = nn.Conv2d(256, 2, 1).double()
    with torch.no_grad():
        bound = 1 / 16
        conv.weight.copy_(torch.rand(conv.weight.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
        conv.bias.zero_()
    return conv


def fit_stage1(bank: EnergyBank, config: TrainConfig, kinds=("grating",), readout: nn.Module | None = None,
               max_speed: float = 1.0, axis_aligned: bool = True) -> Stage1Fit:
    """Fit the bank's tuning parameters together with a linear 1x1 flow readout.

    Batches are drawn fresh each step from the seeded generator; with
    ``axis_aligned`` the velocities are the four +-``max_speed`` axis motions.
    """
    torch.manual_seed(config.seed)
    bank = copy.deepcopy(bank).double()
    readout = _readout(config.seed) if readout is None else copy.deepcopy(readout).double()
    params = list(bank.parameters()) + list(readout.parameters())
    opt = _optimizer(params, config)
    rng = np.random.default_rng(config.seed)
    axes = np.array([[1, 0], [-1, 0], [0, 1], [0, -1]], dtype=np.float64) * max_speed
    losses = []
    for step in range(config.steps):
        if axis_aligned:
            vel = axes[rng.integers(0, 4, config.batch_size)]
            seqs = []
            for v in vel:
                spec = stimuli.MotionSpec(velocity=tuple(v), orientation=math.atan2(v[1], v[0]),
                                          spatial_frequency=rng.uniform(0.06, 0.2), contrast=1.0,
                                          phase=rng.uniform(0, 2 * math.pi))
                seqs.append(stimuli.drifting_grating(spec, config.frames, config.size, config.size))
            batch = SampleSet(np.stack(seqs), vel)
        else:
            batch = make_samples(list(kinds), config.batch_size, config.size, config.frames,
                                 seed=int(rng.integers(1 << 31)), max_speed=max_speed)
        E0 = bank(torch.from_numpy(batch.frames))
        pred = readout(E0)
        loss = sequence_loss([pred], _dense_gt(batch.velocity, *pred.shape[-2:]), 1.0)
        opt.zero_grad()
        loss.backward()
        for name, p in bank.named_parameters():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise GradientError(f"non-finite gradient in stage-I block {name!r}")
        _clip(params, config)
        opt.step()
        losses.append(loss.item())
        log.debug("stage1 step %d loss %.5f", step, losses[-1])
    return Stage1Fit(bank=bank, readout=readout, losses=losses)


# ---------------------------------------------------------------------------
# stage II
# ---------------------------------------------------------------------------

@dataclass
class Stage2Fit:
    params: Stage2
    losses: list
    phases: list


def encode(bank: EnergyBank, frames: np.ndarray, chunk: int = 16) -> torch.Tensor:
    """Stage-I energy maps for a stack of sequences, computed without gradients."""
    out = []
    with torch.no_grad():
        for i in range(0, len(frames), chunk):
            out.append(bank(torch.from_numpy(np.asarray(frames[i:i + chunk]))))
    return torch.cat(out)


def fit_stage2(params: Stage2, bank: EnergyBank, config: TrainConfig,
               curriculum=(("translation",), ("translation", "plaid", "gabor_array"))) -> Stage2Fit:
    """Fit Stage-II weights with Stage I frozen.

    The first ``warmup_fraction`` of the steps uses the first curriculum phase,
    the rest the second.  Each phase draws a seeded pool of ``pool_size``
    stimuli whose Stage-I maps are computed once; minibatches are sampled from it.
    """
    torch.manual_seed(config.seed)
    model = copy.deepcopy(params)
    rng = np.random.default_rng(config.seed)
    dtype = model.W1.dtype
    pools = []
    for i, kinds in enumerate(curriculum):
        s = make_samples(list(kinds), config.pool_size, config.size, config.frames,
                         seed=config.seed * 1000 + i)
        pools.append((encode(bank, s.frames).to(dtype), torch.as_tensor(s.velocity, dtype=dtype)))
    opt = _optimizer(list(model.parameters()), config)
    n_warm = int(round(config.warmup_fraction * config.steps)) if len(pools) > 1 else config.steps
    losses, phases = [], []
    for step in range(config.steps):
        phase = 0 if step < n_warm else len(pools) - 1
        E0, vel = pools[phase]
        idx = torch.as_tensor(rng.choice(len(E0), config.batch_size, replace=False))
        flows = model(E0[idx], iterations=config.iterations)
        gt = _dense_gt(vel[idx], *flows[0].shape[-2:], dtype=dtype)
        loss = sequence_loss(flows, gt, config.loss_decay)
        opt.zero_grad()
        loss.backward()
        for name, p in model.named_parameters():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise GradientError(f"non-finite gradient in stage-II block {name!r}")
        _clip(list(model.parameters()), config)
        opt.step()
        losses.append(loss.item())
        phases.append(phase)
        log.debug("stage2 step %d phase %d loss %.5f", step, phase, losses[-1])
    return Stage2Fit(params=model, losses=losses, phases=phases)


def toy_stage2_recipe(seed: int = 0) -> tuple[Stage2, TrainConfig]:
    """The seeded desk-scale Stage-II run behind the behavioural regression lock.

    Roughly seven minutes on one CPU core.  ``sigma2 = 4`` keeps the energy
    renormalisation out of saturation; see ``fit_stage2`` for the curriculum.
    """
    model = Stage2(iterations=6, K2=64.0, sigma2=4.0, seed=seed)
    config = TrainConfig(steps=600, step_size=1e-3, momentum=0.9, optimizer="sgd", seed=seed, size=32, frames=8,
                         batch_size=4, pool_size=256, iterations=6, warmup_fraction=0.3, loss_decay=0.8)
    return model, config


# ---------------------------------------------------------------------------
# checkpoints and logs
# ---------------------------------------------------------------------------

def save_checkpoint(path, bank: EnergyBank, params: Stage2, config: TrainConfig | None = None,
                    optimizer_state: dict | None = None) -> None:
    """Directory checkpoint: bank.json, stage2.npz, meta.json (+ optimizer.pt)."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    bank.save(d / "bank.json")
    params.save(d / "stage2.npz")
    meta = {"format": "v1mt.Checkpoint", "version": CHECKPOINT_VERSION,
            "config": asdict(config) if config is not None else None,
            "conventions": {"loss": "sequence L1, exponential iteration weighting",
                            "optimizer": OPTIMIZERS[config.optimizer if config else "sgd"],
                            "grad_clip": config.clip_norm if config else None}}
    (d / "meta.json").write_text(json.dumps(meta, indent=2))
    if optimizer_state is not None:
        torch.save(optimizer_state, d / "optimizer.pt")


def load_checkpoint(path):
    d = Path(path)
    meta = json.loads((d / "meta.json").read_text())
    if meta.get("format") != "v1mt.Checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{d} is not a supported checkpoint")
    return EnergyBank.load(d / "bank.json"), Stage2.load(d / "stage2.npz"), meta


def write_log(path, losses, phases=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"] + (["phase"] if phases is not None else []))
        for i, l in enumerate(losses):
            w.writerow([i, repr(l)] + ([phases[i]] if phases is not None else []))
