import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from torch import nn

from v1mt.stage2 import (CapacityError, ConvGRU, FlowDecoder, Graph, SepConvGRU, Stage2, build_adjacency,
                         convex_upsample, embed, gru_update, propagate, renormalize_energy)

D = torch.float64


def t(x):
    return torch.as_tensor(x, dtype=D)


def random_graph(seed, n=16, c=8, s=None):
    g = torch.Generator().manual_seed(seed)
    emb = torch.randn(n, c, generator=g, dtype=D)
    s = torch.rand((), generator=g, dtype=D) * 10 if s is None else s
    return build_adjacency(emb, s)


class TestEmbed:
    def test_identity_large_positive(self):
        F = torch.full((3, 256), 20.0, dtype=D) + torch.rand(3, 256, dtype=D)
        I = torch.eye(256, dtype=D)
        torch.testing.assert_close(embed(F, I, I), F, atol=1e-12, rtol=0)

    def test_zero(self):
        W = torch.randn(256, 256, dtype=D)
        assert torch.all(embed(torch.zeros(4, 256, dtype=D), W, W) == 0)

    def test_oracle(self, rng):
        F, W1, W2 = rng.standard_normal((4, 256)), rng.standard_normal((256, 256)), rng.standard_normal((256, 256))
        from scipy.special import erf
        h = F @ W1
        ref = (0.5 * h * (1 + erf(h / math.sqrt(2)))) @ W2
        np.testing.assert_allclose(embed(t(F), t(W1), t(W2)).numpy(), ref, atol=1e-10)


class TestAdjacency:
    def test_identical_rows(self):
        n = 7
        g = build_adjacency(torch.ones(n, 5, dtype=D), t(3.0))
        torch.testing.assert_close(g.A, torch.full((n, n), 1 / n, dtype=D), atol=1e-15, rtol=0)

    def test_single_node(self):
        g = build_adjacency(torch.randn(1, 4, dtype=D), t(2.0))
        torch.testing.assert_close(g.A, torch.ones(1, 1, dtype=D))

    def test_formula(self, rng):
        emb = rng.standard_normal((6, 5))
        s = 2.5
        u = emb / np.linalg.norm(emb, axis=1, keepdims=True)
        M = np.exp(s * u @ u.T)
        d = M.sum(1)
        ref = M / np.sqrt(np.outer(d, d))
        g = build_adjacency(t(emb), t(s))
        np.testing.assert_allclose(g.A.numpy(), ref, atol=1e-14)
        np.testing.assert_allclose(np.diag(g.D.numpy()), d)

    @given(st.integers(0, 2 ** 20))
    def test_properties(self, seed):
        g = random_graph(seed)
        A = g.A
        assert (A - A.T).abs().max() <= 1e-12
        assert torch.all(A > 0) and torch.all(torch.isfinite(A))
        assert torch.linalg.eigvalsh(A).abs().max() <= 1 + 1e-9

    def test_zero_row_guard(self):
        emb = torch.randn(4, 3, dtype=D)
        emb[2] = 0
        with pytest.warns(RuntimeWarning):
            g = build_adjacency(emb, t(4.0))
        assert torch.all(torch.isfinite(g.A))
        # the zero row sees cosine 0 everywhere, so its raw affinities are all exp(0) = 1
        M = g.A * torch.sqrt(torch.outer(g.degree, g.degree))
        torch.testing.assert_close(M[2], torch.ones(4, dtype=D))


class TestPropagate:
    def test_identity(self, rng):
        E = t(rng.standard_normal((5, 3)))
        torch.testing.assert_close(propagate(torch.eye(5, dtype=D), E), E)

    def test_averaging(self, rng):
        E = t(rng.standard_normal((5, 3)))
        out = propagate(torch.full((5, 5), 0.2, dtype=D), E)
        torch.testing.assert_close(out, E.mean(0, keepdim=True).expand(5, 3))

    def test_oracle(self, rng):
        A, E = rng.standard_normal((6, 6)), rng.standard_normal((6, 4))
        np.testing.assert_allclose(propagate(Graph(t(A), t(A.sum(1))), t(E)).numpy(), A @ E, atol=1e-10)

    @given(st.integers(0, 2 ** 20))
    def test_permutation_equivariance(self, seed):
        g = torch.Generator().manual_seed(seed)
        emb = torch.randn(9, 6, generator=g, dtype=D)
        E = torch.randn(9, 4, generator=g, dtype=D)
        perm = torch.randperm(9, generator=g)
        out = propagate(build_adjacency(emb, t(2.0)), E)
        out_p = propagate(build_adjacency(emb[perm], t(2.0)), E[perm])
        torch.testing.assert_close(out_p, out[perm], atol=1e-12, rtol=0)


def zero_gru(h=4, kernel=(1, 5)):
    m = ConvGRU(h, h, kernel).double()
    for p in m.parameters():
        nn.init.zeros_(p)
    return m


class TestGRU:
    def test_zero_weights_half(self, rng):
        h = t(rng.uniform(-1, 1, (1, 4, 3, 5)))
        x = t(rng.standard_normal((1, 4, 3, 5)))
        m = zero_gru()
        torch.testing.assert_close(gru_update(h, x, m.convz, m.convr, m.convq), 0.5 * h)

    def test_separable_pair_applies_twice(self, rng):
        sep = SepConvGRU(4, 4).double()
        for p in sep.parameters():
            nn.init.zeros_(p)
        h = t(rng.uniform(-1, 1, (1, 4, 5, 5)))
        torch.testing.assert_close(sep(h, torch.zeros_like(h)), 0.25 * h)

    @given(st.integers(0, 2 ** 20))
    def test_bounded(self, seed):
        g = torch.Generator().manual_seed(seed)
        m = ConvGRU(3, 3, (5, 1)).double()
        for p in m.parameters():
            p.data = torch.randn(p.shape, generator=g, dtype=D) * 0.5
        h = torch.rand(1, 3, 6, 4, generator=g, dtype=D) * 2 - 1
        x = torch.randn(1, 3, 6, 4, generator=g, dtype=D) * 2
        out = m(h, x)
        assert torch.all(out.abs() < 1)

    def test_unrolled_oracle(self, rng):
        m = ConvGRU(2, 2, (1, 3)).double()
        for p in m.parameters():
            p.data = t(rng.standard_normal(p.shape))
        h = t(rng.uniform(-1, 1, (1, 2, 1, 4)))
        x = t(rng.standard_normal((1, 2, 1, 4)))
        out = m(h, x).detach().numpy()

        def conv(w, inp):  # inp (C, W) row, kernel (O, C, 1, 3), zero padding 1
            pad = np.pad(inp, ((0, 0), (1, 1)))
            return np.array([[sum(w[o, c, 0, k] * pad[c, j + k] for c in range(inp.shape[0]) for k in range(3))
                              for j in range(inp.shape[1])] for o in range(w.shape[0])])

        sig = lambda a: 1 / (1 + np.exp(-a))
        hh, xx = h.numpy()[0, :, 0], x.numpy()[0, :, 0]
        hx = np.r_[hh, xx]
        z = sig(conv(m.convz.weight.detach().numpy(), hx))
        r = sig(conv(m.convr.weight.detach().numpy(), hx))
        q = np.tanh(conv(m.convq.weight.detach().numpy(), np.r_[r * hh, xx]))
        np.testing.assert_allclose(out[0, :, 0], (1 - z) * hh + z * q, atol=1e-10)


class TestRenormalise:
    def test_zero(self):
        assert torch.all(renormalize_energy(torch.zeros(1, 3, 2, 2, dtype=D), 16.0, 1.0) == 0)

    def test_single_location(self):
        E = torch.zeros(1, 1, 3, 3, dtype=D)
        E[0, 0, 1, 2] = 0.7
        out = renormalize_energy(E, 5.0, 0.3)
        assert out[0, 0, 1, 2].item() == pytest.approx(5.0 * 0.49 / (0.49 + 0.09))

    @given(st.integers(0, 2 ** 20), st.floats(0.1, 50), st.floats(1e-3, 10))
    def test_bounds(self, seed, K2, s2):
        g = torch.Generator().manual_seed(seed)
        E = torch.randn(2, 5, 3, 4, generator=g, dtype=D) * 3
        out = renormalize_energy(E, K2, s2)
        assert torch.all(out >= 0)
        assert torch.all(out.sum(dim=(-2, -1)) < K2)


class TestDecoder:
    def test_constant_in_constant_out(self):
        dec = FlowDecoder(8, 2).double()
        x = torch.randn(1, 8, 1, 1, dtype=D).expand(1, 8, 3, 5)
        out = dec(x)
        assert torch.all(out == out[:, :, :1, :1])

    def test_zero_head(self, rng):
        dec = FlowDecoder(8, 2).double()
        nn.init.zeros_(dec.head.weight)
        nn.init.zeros_(dec.head.bias)
        assert torch.all(dec(t(rng.standard_normal((1, 8, 4, 4)))) == 0)

    def test_weight_sharing(self, rng):
        dec = FlowDecoder(8, 2).double()
        x = t(rng.standard_normal((1, 8, 4, 4)))
        x[..., 3, 1] = x[..., 0, 2]
        out = dec(x)
        torch.testing.assert_close(out[..., 3, 1], out[..., 0, 2])


class TestConvexUpsample:
    def test_constant(self, rng):
        c = torch.tensor([1.25, -0.5], dtype=D)[None, :, None, None].expand(2, 2, 3, 4)
        out = convex_upsample(c, t(rng.standard_normal((2, 576, 3, 4)) * 5))
        assert out.shape == (2, 2, 24, 32)
        assert torch.all(out[:, 0] == 10.0) and torch.all(out[:, 1] == -4.0)

    def test_one_hot_is_nearest(self, rng):
        coarse = t(rng.standard_normal((1, 2, 3, 4)))
        logits = torch.full((1, 9, 8, 8, 3, 4), -1e4, dtype=D)
        logits[:, 4] = 1e4
        out = convex_upsample(coarse, logits.reshape(1, 576, 3, 4))
        ref = 8 * coarse.repeat_interleave(8, -2).repeat_interleave(8, -1)
        torch.testing.assert_close(out, ref)

    @given(st.integers(0, 2 ** 20))
    def test_bounds(self, seed):
        g = torch.Generator().manual_seed(seed)
        coarse = torch.randn(1, 2, 3, 3, generator=g, dtype=D)
        out = convex_upsample(coarse, torch.randn(1, 576, 3, 3, generator=g, dtype=D) * 4)
        lo = 8 * coarse.amin(dim=(-2, -1))
        hi = 8 * coarse.amax(dim=(-2, -1))
        assert torch.all(out.amin(dim=(-2, -1)) >= lo - 1e-12)
        assert torch.all(out.amax(dim=(-2, -1)) <= hi + 1e-12)


@pytest.fixture(scope="module")
def model():
    return Stage2(iterations=3, seed=1).double()


class TestStage2:
    def test_lengths_and_shapes(self, model, rng):
        E0 = t(rng.random((2, 256, 3, 4)) * 0.1)
        flows = model(E0, iterations=1)
        assert len(flows) == 1 and flows[0].shape == (2, 2, 24, 32)
        assert len(model(E0)) == 3

    def test_zero_input_fixed_point(self, model):
        with pytest.warns(RuntimeWarning, match="zero-norm"):
            flows = model(torch.zeros(1, 256, 2, 2, dtype=D), iterations=4)
        for f in flows[1:]:
            assert torch.equal(f, flows[0])

    def test_prefix_property(self, model, rng):
        E0 = t(rng.random((1, 256, 3, 3)) * 0.1)
        short = model(E0, iterations=2)
        long = model(E0, iterations=4)
        for a, b in zip(short, long):
            assert torch.equal(a, b)

    def test_deterministic(self, rng):
        E0 = t(rng.random((1, 256, 2, 3)) * 0.1)
        a = Stage2(iterations=2, seed=5).double()(E0)
        b = Stage2(iterations=2, seed=5).double()(E0)
        assert all(torch.equal(x, y) for x, y in zip(a, b))

    def test_capacity(self):
        m = Stage2(iterations=1, node_budget=16)
        with pytest.raises(CapacityError, match="downsample"):
            m(torch.zeros(1, 256, 5, 4))

    def test_s_range(self, model):
        assert model.s.item() == pytest.approx(1.0)
        m = Stage2(iterations=1)
        with torch.no_grad():
            m.s_raw.fill_(1e4)
        assert 0 < m.s.item() <= 10.0
        with torch.no_grad():
            m.s_raw.fill_(-50)
        assert 0 < m.s.item() < 10.0

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            Stage2(iterations=0)
        with pytest.raises(ValueError):
            Stage2(K2=-1)

    def test_round_trip(self, model, tmp_path, rng):
        model.save(tmp_path / "p.npz")
        m2 = Stage2.load(tmp_path / "p.npz")
        for (k1, v1), (k2, v2) in zip(model.state_dict().items(), m2.state_dict().items()):
            assert k1 == k2 and torch.equal(v1, v2)
        E0 = t(rng.random((1, 256, 2, 2)))
        assert all(torch.equal(a, b) for a, b in zip(model(E0), m2(E0)))

    def test_record_trace(self, model, rng):
        flows, tr = model(t(rng.random((1, 256, 2, 2))), iterations=2, record=True)
        assert len(tr["E_hat"]) == 2 and tr["A"][0].shape == (1, 4, 4)
