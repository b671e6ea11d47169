import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from matplotlib.colors import rgb_to_hsv

from v1mt import metrics
from v1mt.metrics import DegenerateCorrelationError, FlowFormatError


def residual_partial(r, m, g):
    """Correlation of the residuals of r and m after regressing each on g."""
    G = np.c_[np.ones_like(g), g]
    rr = r - G @ np.linalg.lstsq(G, r, rcond=None)[0]
    rm = m - G @ np.linalg.lstsq(G, m, rcond=None)[0]
    return np.corrcoef(rr, rm)[0, 1]


class TestComponents:
    def test_345(self):
        s = metrics.flow_components(np.array([[[3.0, 4.0]]]))
        assert s.spd[0, 0] == 5 and s.dir[0, 0] == math.atan2(4, 3)

    def test_zero_masked(self):
        s = metrics.flow_components(np.zeros((1, 1, 2)))
        assert s.spd[0, 0] == 0 and not s.valid[0, 0] and np.isnan(s.dir[0, 0])

    def test_round_trip(self, rng):
        f = rng.standard_normal((7, 9, 2))
        s = metrics.flow_components(f)
        np.testing.assert_allclose((s.spd * np.cos(s.dir))[s.valid], f[..., 0][s.valid], atol=1e-12)
        np.testing.assert_allclose((s.spd * np.sin(s.dir))[s.valid], f[..., 1][s.valid], atol=1e-12)


class TestEPE:
    def test_identical(self, rng):
        f = rng.standard_normal((4, 4, 2))
        assert metrics.epe(f, f)[0] == 0

    def test_offset(self, rng):
        f = rng.standard_normal((4, 5, 2))
        assert metrics.epe(f, f + [3.0, 4.0])[0] == pytest.approx(5.0)

    def test_brute_force(self, rng):
        a, b = rng.standard_normal((2, 6, 5, 2))
        ref = np.array([[math.hypot(*(a[i, j] - b[i, j])) for j in range(5)] for i in range(6)])
        mean, m = metrics.epe(a, b)
        np.testing.assert_allclose(m, ref, atol=1e-12)
        assert mean == pytest.approx(ref.mean(), abs=1e-12)

    @given(st.integers(0, 2 ** 16))
    def test_symmetry_triangle(self, seed):
        a, b, c = np.random.default_rng(seed).standard_normal((3, 4, 4, 2))
        assert metrics.epe(a, b)[0] == metrics.epe(b, a)[0]
        assert np.all(metrics.epe(a, c)[1] <= metrics.epe(a, b)[1] + metrics.epe(b, c)[1] + 1e-12)


class TestPearson:
    def test_affine(self, rng):
        a = rng.standard_normal(20)
        assert metrics.pearson(a, 2 * a + 1) == pytest.approx(1.0, abs=1e-15)
        assert metrics.pearson(a, -a) == pytest.approx(-1.0, abs=1e-15)

    def test_covariance_oracle(self, rng):
        a, b = rng.standard_normal((2, 50))
        ref = np.cov(a, b)[0, 1] / (np.std(a, ddof=1) * np.std(b, ddof=1))
        assert metrics.pearson(a, b) == pytest.approx(ref, abs=1e-12)

    def test_zero_variance(self):
        with pytest.raises(DegenerateCorrelationError):
            metrics.pearson(np.ones(5), np.arange(5))

    @given(st.integers(0, 2 ** 16), st.floats(0.01, 100), st.floats(-100, 100))
    def test_affine_invariance(self, seed, s, c):
        a, b = np.random.default_rng(seed).standard_normal((2, 30))
        assert abs(metrics.pearson(s * a + c, b) - metrics.pearson(a, b)) < 1e-12


class TestPartial:
    def test_cancellation(self):
        assert metrics.partial_correlation(0.3 * 0.5, 0.3, 0.5) == 0

    def test_worked_example(self):
        assert metrics.partial_correlation(0.9, 0.8, 0.7) == pytest.approx(0.34 / (0.6 * math.sqrt(0.51)), abs=1e-12)
        assert metrics.partial_correlation(0.9, 0.8, 0.7) == pytest.approx(0.7934, abs=1e-4)

    def test_degenerate_control(self):
        with pytest.raises(DegenerateCorrelationError):
            metrics.partial_correlation(0.5, 1.0, 0.2)
        with pytest.raises(ValueError):
            metrics.partial_correlation(1.2, 0.1, 0.2)

    def test_residual_oracle(self, rng):
        for _ in range(20):
            g = rng.standard_normal(40)
            r = g + rng.standard_normal(40)
            m = 0.5 * g + r * 0.3 + rng.standard_normal(40)
            p = metrics.partial_correlation(metrics.pearson(r, m), metrics.pearson(r, g), metrics.pearson(m, g))
            assert p == pytest.approx(residual_partial(r, m, g), abs=1e-10)

    def test_control_roles_by_recomputation(self):
        a = metrics.partial_correlation(0.6, 0.2, 0.5)
        b = metrics.partial_correlation(0.6, 0.5, 0.2)
        assert a == pytest.approx((0.6 - 0.1) / (math.sqrt(1 - 0.04) * math.sqrt(1 - 0.25)))
        assert a == pytest.approx(b)


class TestCompare:
    def test_identical_flows(self, rng):
        f = rng.standard_normal((8, 8, 2))
        rep = metrics.compare_flows(f, f)
        assert rep.epe == 0 and rep.r_uv == pytest.approx(1) and rep.r_dir == pytest.approx(1)
        assert rep.r_spd == pytest.approx(1)

    def test_control_partials(self, rng):
        gt = rng.standard_normal((10, 10, 2))
        ref = gt + 0.5 * rng.standard_normal(gt.shape)
        model = gt + 0.5 * rng.standard_normal(gt.shape) + 0.3 * (ref - gt)
        rep = metrics.compare_flows(model, ref, gt)
        r = np.r_[ref[..., 0].ravel(), ref[..., 1].ravel()]
        m = np.r_[model[..., 0].ravel(), model[..., 1].ravel()]
        g = np.r_[gt[..., 0].ravel(), gt[..., 1].ravel()]
        assert rep.rho_uv == pytest.approx(residual_partial(r, m, g), abs=1e-10)
        assert rep.rho_uv > 0
        assert "rho_dir" in rep.to_json()

    def test_nonfinite_pixels_dropped(self, rng):
        a = rng.standard_normal((4, 4, 2))
        b = a.copy()
        b[0, 0] = np.nan
        rep = metrics.compare_flows(a, b)
        assert rep.n_pixels == 15 and rep.epe == 0


class TestFlo:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        f = rng.standard_normal((5, 7, 2)).astype(np.float32)
        metrics.write_flo(f, tmp_path / "a.flo")
        g = metrics.read_flo(tmp_path / "a.flo")
        assert g.dtype == np.float32 and g.tobytes() == f.tobytes()

    def test_size_and_layout(self, tmp_path):
        metrics.write_flo(np.array([[[1.5, -2.0]]]), tmp_path / "a.flo")
        data = (tmp_path / "a.flo").read_bytes()
        assert len(data) == 20
        assert data[:4] == b"PIEH" and data[4:12] == (1).to_bytes(4, "little") * 2
        assert np.frombuffer(data[12:], "<f4").tolist() == [1.5, -2.0]

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.flo").write_bytes(b"XXXX" + bytes(16))
        with pytest.raises(FlowFormatError):
            metrics.read_flo(tmp_path / "x.flo")

    def test_truncated(self, tmp_path, rng):
        metrics.write_flo(rng.standard_normal((3, 3, 2)), tmp_path / "a.flo")
        data = (tmp_path / "a.flo").read_bytes()
        (tmp_path / "b.flo").write_bytes(data[:-4])
        with pytest.raises(FlowFormatError):
            metrics.read_flo(tmp_path / "b.flo")


class TestColor:
    def test_zero_is_white(self):
        assert np.all(metrics.flow_to_color(np.zeros((3, 3, 2))) == 1.0)

    def test_rightward_is_red_and_deterministic(self):
        f = np.zeros((2, 2, 2))
        f[..., 0] = 2.0
        a, b = metrics.flow_to_color(f, 2.0), metrics.flow_to_color(f, 2.0)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(a[0, 0], [1.0, 0.0, 0.0])

    def test_rotation_shifts_hue(self, rng):
        f = rng.standard_normal((6, 6, 2))
        rot = np.stack([-f[..., 1], f[..., 0]], axis=-1)  # +90 degrees
        h0 = rgb_to_hsv(metrics.flow_to_color(f))[..., 0]
        h1 = rgb_to_hsv(metrics.flow_to_color(rot))[..., 0]
        d = (h1 - h0 - 0.25 + 0.5) % 1.0 - 0.5
        np.testing.assert_allclose(d, 0.0, atol=1e-9)
