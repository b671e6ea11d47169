"""Small float64 subproblems, one per differentiable block, for gradient checks."""
import torch

from v1mt.stage1 import EnergyBank
from v1mt.stage2 import (ConvGRU, FlowDecoder, MaskHead, SepConvGRU, Stage2, build_adjacency, convex_upsample,
                         embed, propagate, renormalize_energy)
from v1mt.train import sequence_loss

D = torch.float64


def _leaf(shape, g, scale=1.0):
    return (torch.randn(shape, generator=g, dtype=D) * scale).requires_grad_()


def _weights(like, g):
    return torch.randn(like.shape, generator=g, dtype=D)


def _module_params(m):
    return [p for p in m.parameters()]


def stage1_block(g):
    bank = EnergyBank.default(3)
    x = torch.rand(1, 8, 16, 16, generator=g, dtype=D)
    R = torch.randn(1, 256, 2, 2, generator=g, dtype=D)
    return (lambda: (bank(x) * R).sum()), _module_params(bank)


def embed_block(g):
    F = torch.randn(6, 16, generator=g, dtype=D)
    W1, W2 = _leaf((16, 16), g, 0.3), _leaf((16, 16), g, 0.3)
    R = torch.randn(6, 16, generator=g, dtype=D)
    return (lambda: (embed(F, W1, W2) * R).sum()), [W1, W2]


def adjacency_block(g):
    emb = _leaf((12, 8), g)
    s = torch.tensor(2.0, dtype=D, requires_grad=True)
    R = torch.randn(12, 12, generator=g, dtype=D)
    return (lambda: (build_adjacency(emb, s).A * R).sum()), [emb, s]


def propagate_block(g):
    A, E = _leaf((9, 9), g), _leaf((9, 8), g)
    R = torch.randn(9, 8, generator=g, dtype=D)
    return (lambda: (propagate(A, E) * R).sum()), [A, E]


def gru_block(g):
    m = SepConvGRU(4, 4).double()
    for p in m.parameters():
        p.data = torch.randn(p.shape, generator=g, dtype=D) * 0.3
    h = torch.rand(1, 4, 5, 5, generator=g, dtype=D) * 2 - 1
    x = torch.randn(1, 4, 5, 5, generator=g, dtype=D)
    R = torch.randn(1, 4, 5, 5, generator=g, dtype=D)
    return (lambda: (m(h, x) * R).sum()), _module_params(m)


def renorm_block(g):
    E = _leaf((1, 8, 3, 3), g)
    R = torch.randn(1, 8, 3, 3, generator=g, dtype=D)
    return (lambda: (renormalize_energy(E, 16.0, 1.0) * R).sum()), [E]


def decoder_block(g):
    m = FlowDecoder(16, 2).double()
    x = torch.randn(1, 16, 3, 3, generator=g, dtype=D)
    R = torch.randn(1, 2, 3, 3, generator=g, dtype=D)
    return (lambda: (m(x) * R).sum()), _module_params(m)


def upsample_block(g):
    head = MaskHead(8).double()
    feat = torch.randn(1, 8, 2, 2, generator=g, dtype=D)
    coarse = _leaf((1, 2, 2, 2), g)
    R = torch.randn(1, 2, 16, 16, generator=g, dtype=D)
    return (lambda: (convex_upsample(coarse, head(feat)) * R).sum()), [coarse] + _module_params(head)


def loss_block(g):
    preds = [_leaf((2, 2, 4, 4), g) for _ in range(3)]
    gt = torch.randn(2, 2, 4, 4, generator=g, dtype=D)
    return (lambda: sequence_loss(preds, gt, 0.8)), preds


def stage2_block(g):
    m = Stage2(channels=16, iterations=2, seed=4, decoder_blocks=1).double()
    E0 = torch.rand(1, 16, 2, 2, generator=g, dtype=D)
    gt = torch.randn(1, 2, 16, 16, generator=g, dtype=D)
    return (lambda: sequence_loss(m(E0), gt, 0.8)), _module_params(m)


BLOCKS = {
    "stage1.EnergyBank": stage1_block,
    "stage2.embed": embed_block,
    "stage2.build_adjacency": adjacency_block,
    "stage2.propagate": propagate_block,
    "stage2.SepConvGRU": gru_block,
    "stage2.renormalize_energy": renorm_block,
    "stage2.FlowDecoder": decoder_block,
    "stage2.MaskHead+convex_upsample": upsample_block,
    "train.sequence_loss": loss_block,
    "stage2.Stage2": stage2_block,
}


def make(name, seed=0):
    torch.manual_seed(seed)  # default module initialisers draw from the global generator
    g = torch.Generator().manual_seed(seed)
    fn, params = BLOCKS[name](g)
    return fn, params


def n_params(params):
    return sum(p.numel() for p in params)
