"""Global motion integration on an attention graph, with per-iteration flow decoding.

Two streams leave Stage I: ``E`` (motion energy, updated in the loop) and
``F`` (features that define the graph).  Each iteration

1. embeds ``F`` per location, ``phi(F) = GELU(F W1) W2``;
2. builds ``A = D^-1/2 exp(s cos(phi_i, phi_j)) D^-1/2``;
3. propagates both streams through ``A`` and updates each with its own
   separable ConvGRU (1x5 then 5x1);
4. squares and renormalises ``E`` per channel, decodes a coarse flow with
   1x1 residual blocks and upsamples it 8x by convex combination.

Tensors are channel-first: ``(B, C, h, w)``; flows are ``(B, 2, H, W)``
with ``u`` rightward and ``v`` downward in pixels/frame.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "CapacityError",
    "Graph",
    "Stage2",
    "embed",
    "build_adjacency",
    "propagate",
    "gru_update",
    "renormalize_energy",
    "convex_upsample",
    "ConvGRU",
    "SepConvGRU",
    "FlowDecoder",
    "PARAMS_FORMAT_VERSION",
]

PARAMS_FORMAT_VERSION = 1
UPSAMPLE = 8
S_MAX = 10.0


class CapacityError(RuntimeError):
    """The graph would exceed the node budget; process a downsampled input instead."""


@dataclass
class Graph:
    A: torch.Tensor
    degree: torch.Tensor

    @property
    def D(self) -> torch.Tensor:
        return torch.diag_embed(self.degree)


def embed(F_flat: torch.Tensor, W1: torch.Tensor, W2: torch.Tensor) -> torch.Tensor:
    """Per-node embedding ``GELU(F W1) W2`` with the exact (erf) GELU; F is (..., n, C)."""
    return F.gelu(F_flat @ W1) @ W2


def build_adjacency(embedded: torch.Tensor, s) -> Graph:
    """Exponentially scaled cosine affinities with symmetric degree normalisation.

    Rows with zero norm get cosine 0 against every node, themselves included.
    """
    norms = embedded.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        warnings.warn("zero-norm embedding rows; their cosine similarities are set to 0", RuntimeWarning,
                      stacklevel=2)
    unit = embedded / norms.clamp_min(torch.finfo(embedded.dtype).tiny)
    cos = unit @ unit.transpose(-1, -2)
    M = torch.exp(s * cos)
    degree = M.sum(dim=-1)
    inv = degree.rsqrt()
    A = inv.unsqueeze(-1) * M * inv.unsqueeze(-2)
    return Graph(A=A, degree=degree)


def propagate(graph, E_flat: torch.Tensor) -> torch.Tensor:
    A = graph.A if isinstance(graph, Graph) else graph
    return A @ E_flat


def gru_update(hidden, inp, convz, convr, convq):
    """One gated-recurrent update; the conv modules see ``cat(hidden, inp)``."""
    hx = torch.cat([hidden, inp], dim=1)
    z = torch.sigmoid(convz(hx))
    r = torch.sigmoid(convr(hx))
    q = torch.tanh(convq(torch.cat([r * hidden, inp], dim=1)))
    return (1 - z) * hidden + z * q


class ConvGRU(nn.Module):
    """Convolutional GRU with a single (kh, kw) kernel shape and no biases.

    Without biases a zero state with zero input is a fixed point.
    """

    def __init__(self, hidden: int = 256, inp: int = 256, kernel=(1, 5)):
        super().__init__()
        pad = (kernel[0] // 2, kernel[1] // 2)
        self.convz = nn.Conv2d(hidden + inp, hidden, kernel, padding=pad, bias=False)
        self.convr = nn.Conv2d(hidden + inp, hidden, kernel, padding=pad, bias=False)
        self.convq = nn.Conv2d(hidden + inp, hidden, kernel, padding=pad, bias=False)

    def identity_init(self, gain: float = 2.0) -> None:
        """Add ``gain`` to the centre tap of the hidden -> candidate weights.

        With the reset gate near 0.5 this makes ``q ~ tanh(h)``, so small
        states persist across iterations instead of decaying geometrically.
        """
        w = self.convq.weight
        hidden = w.shape[0]
        ch, cw = w.shape[2] // 2, w.shape[3] // 2
        with torch.no_grad():
            idx = torch.arange(hidden)
            w[idx, idx, ch, cw] += gain

    def forward(self, h, x):
        return gru_update(h, x, self.convz, self.convr, self.convq)


class SepConvGRU(nn.Module):
    def __init__(self, hidden: int = 256, inp: int = 256):
        super().__init__()
        self.horizontal = ConvGRU(hidden, inp, (1, 5))
        self.vertical = ConvGRU(hidden, inp, (5, 1))

    def forward(self, h, x):
        return self.vertical(self.horizontal(h, x), x)


def renormalize_energy(E: torch.Tensor, K2, sigma2) -> torch.Tensor:
    """``K2 E^2 / (sum_locations E^2 + sigma2^2)``, summed per channel over (h, w)."""
    sq = E * E
    return K2 * sq / (sq.sum(dim=(-2, -1), keepdim=True) + sigma2 ** 2)


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 1)
        self.conv2 = nn.Conv2d(width, width, 1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class FlowDecoder(nn.Module):
    """Pointwise 256 -> 2 map: residual 1x1 blocks then a linear head."""

    def __init__(self, width: int = 256, blocks: int = 4):
        super().__init__()
        self.blocks = nn.Sequential(*[ResidualBlock(width) for _ in range(blocks)])
        self.head = nn.Conv2d(width, 2, 1)

    def forward(self, x):
        return self.head(self.blocks(x))


class MaskHead(nn.Module):
    def __init__(self, width: int = 256, factor: int = UPSAMPLE):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, factor * factor * 9, 1)

    def forward(self, x):
        return self.conv2(F.relu(self.conv1(x)))


def convex_upsample(coarse: torch.Tensor, mask_logits: torch.Tensor, factor: int = UPSAMPLE) -> torch.Tensor:
    """Upsample (B, 2, h, w) flow by ``factor`` using softmax weights over 3x3 neighbourhoods.

    Flow values are scaled by ``factor``; the neighbourhood is replicate-padded.
    The combination is evaluated as ``centre + sum_i w_i (c_i - centre)``,
    equal to ``sum_i w_i c_i`` when the weights sum to one, so constant
    fields are reproduced exactly despite rounding in the softmax.
    """
    B, C, h, w = coarse.shape
    mask = mask_logits.view(B, 1, 9, factor, factor, h, w).softmax(dim=2)
    scaled = factor * coarse
    up = F.unfold(F.pad(scaled, (1, 1, 1, 1), mode="replicate"), 3)
    up = up.view(B, C, 9, 1, 1, h, w) - scaled.view(B, C, 1, 1, 1, h, w)
    out = (mask * up).sum(dim=2) + scaled.view(B, C, 1, 1, h, w)  # (B, C, f, f, h, w)
    return out.permute(0, 1, 4, 2, 5, 3).reshape(B, C, factor * h, factor * w)


def _init_uniform_fan_in(module: nn.Module, gen: torch.Generator) -> None:
    def fill(p, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound).to(p.dtype))

    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                fill(m.weight, fan_in)
                if m.bias is not None:
                    fill(m.bias, fan_in)
        for p in (module.W1, module.W2):
            fill(p, p.shape[0])
        for m in module.modules():
            if isinstance(m, ConvGRU):
                m.identity_init()


class Stage2(nn.Module):
    """Recurrent graph-attention integration network.

    ``K2`` and ``sigma2`` are fixed renormalisation constants; ``s`` is
    learned through ``s = 10 * sigmoid(s_raw)`` so it stays in (0, 10).
    """

    def __init__(self, channels: int = 256, iterations: int = 12, K2: float = 16.0, sigma2: float = 1.0,
                 node_budget: int = 4096, seed: int = 0, decoder_blocks: int = 4):
        super().__init__()
        if iterations < 1:
            raise ValueError("iterations must be >= 1")
        if K2 <= 0 or sigma2 <= 0:
            raise ValueError("K2 and sigma2 must be positive")
        self.channels = channels
        self.iterations = iterations
        self.node_budget = node_budget
        self.decoder_blocks = decoder_blocks
        self.seed = seed
        self.register_buffer("K2", torch.tensor(float(K2)))
        self.register_buffer("sigma2", torch.tensor(float(sigma2)))
        self.W1 = nn.Parameter(torch.empty(channels, channels))
        self.W2 = nn.Parameter(torch.empty(channels, channels))
        self.s_raw = nn.Parameter(torch.tensor(float(np.log(1.0 / (S_MAX - 1.0)))))  # s = 1
        self.gru_E = SepConvGRU(channels, channels)
        self.gru_F = SepConvGRU(channels, channels)
        self.decoder = FlowDecoder(channels, decoder_blocks)
        self.mask_head = MaskHead(channels)
        gen = torch.Generator().manual_seed(seed)
        _init_uniform_fan_in(self, gen)

    @property
    def s(self):
        p = torch.sigmoid(self.s_raw)
        eps = torch.finfo(p.dtype).eps  # sigmoid saturates to exactly 0 or 1 in floating point
        return S_MAX * p.clamp(eps, 1 - eps)

    def config(self) -> dict:
        return {"channels": self.channels, "iterations": self.iterations, "K2": float(self.K2),
                "sigma2": float(self.sigma2), "node_budget": self.node_budget, "seed": self.seed,
                "decoder_blocks": self.decoder_blocks}

    def graph(self, Fmap: torch.Tensor) -> Graph:
        B, C, h, w = Fmap.shape
        flat = Fmap.flatten(2).transpose(1, 2)
        return build_adjacency(embed(flat, self.W1, self.W2), self.s)

    def decode(self, E: torch.Tensor):
        """Coarse flow (B, 2, h, w) and upsampled flow (B, 2, 8h, 8w) from the energy stream."""
        E_hat = renormalize_energy(E, self.K2, self.sigma2)
        coarse = self.decoder(E_hat)
        return E_hat, coarse, convex_upsample(coarse, self.mask_head(E))

    def forward(self, E0: torch.Tensor, iterations: int | None = None, record: bool = False):
        """Run the loop from a (B, 256, h, w) energy map; returns one flow per iteration.

        With ``record`` a second value holds per-iteration ``E_hat``, coarse
        flows and adjacency matrices.
        """
        iterations = self.iterations if iterations is None else iterations
        if iterations < 1:
            raise ValueError("iterations must be >= 1")
        if E0.dim() == 3:
            E0 = E0.unsqueeze(0)
        B, C, h, w = E0.shape
        n = h * w
        if n > self.node_budget:
            raise CapacityError(f"{h}x{w} = {n} graph nodes exceed the budget of {self.node_budget}; "
                                f"downsample the input")
        dtype = self.W1.dtype
        E = E0.to(dtype)
        Fm = E
        flows = []
        trace = {"E_hat": [], "coarse": [], "A": []}
        for _ in range(iterations):
            g = self.graph(Fm)
            E_in = propagate(g, E.flatten(2).transpose(1, 2)).transpose(1, 2).reshape(B, C, h, w)
            F_in = propagate(g, Fm.flatten(2).transpose(1, 2)).transpose(1, 2).reshape(B, C, h, w)
            E = self.gru_E(E, E_in)
            Fm = self.gru_F(Fm, F_in)
            E_hat, coarse, flow = self.decode(E)
            flows.append(flow)
            if record:
                trace["E_hat"].append(E_hat)
                trace["coarse"].append(coarse)
                trace["A"].append(g.A)
        return (flows, trace) if record else flows

    # -- serialisation ----------------------------------------------------
    def save(self, path) -> None:
        arrays = {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        meta = {"format": "v1mt.Stage2Params", "version": PARAMS_FORMAT_VERSION, "config": self.config(),
                "dtype": str(self.W1.dtype).replace("torch.", "")}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path) -> "Stage2":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            if meta.get("format") != "v1mt.Stage2Params":
                raise ValueError("not a Stage2 parameter file")
            if meta.get("version") != PARAMS_FORMAT_VERSION:
                raise ValueError(f"unsupported Stage2 parameter version {meta.get('version')}")
            model = cls(**meta["config"]).to(getattr(torch, meta["dtype"]))
            state = {k: torch.from_numpy(z[k].copy()) for k in z.files if k != "__meta__"}
        model.load_state_dict(state)
        return model
