import math

import numpy as np
import pytest

from ytmt.errors import DimensionError
from ytmt.metrics import PSNR_CAP, MetricsReport, evaluate_pairs, gaussian_window, psnr, ssim


def psnr_oracle(x, y):
    total = 0.0
    for a, b in zip(x.ravel().tolist(), y.ravel().tolist()):
        total += (a - b) ** 2
    return 10 * math.log10(1.0 / (total / x.size))


def ssim_oracle(x, y, size=11, sigma=1.5):
    """Windowed SSIM computed one window at a time."""
    a, b = x.mean(axis=0), y.mean(axis=0)
    r = [k - (size - 1) / 2 for k in range(size)]
    g = [math.exp(-v * v / (2 * sigma * sigma)) for v in r]
    s = sum(g)
    w = [[gi * gj / (s * s) for gj in g] for gi in g]
    c1, c2 = 0.01**2, 0.03**2
    H, W = a.shape
    values = []
    for i in range(H - size + 1):
        for j in range(W - size + 1):
            ma = mb = saa = sbb = sab = 0.0
            for di in range(size):
                for dj in range(size):
                    p, q, k = a[i + di, j + dj], b[i + di, j + dj], w[di][dj]
                    ma += k * p
                    mb += k * q
                    saa += k * p * p
                    sbb += k * q * q
                    sab += k * p * q
            va, vb, cov = saa - ma * ma, sbb - mb * mb, sab - ma * mb
            values.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(values) / len(values)


def image(seed, shape=(3, 16, 16)):
    return np.random.default_rng(seed).uniform(0, 1, shape)


class TestPsnr:
    def test_identical_is_capped(self):
        x = image(0)
        assert psnr(x, x) == PSNR_CAP == 100.0

    def test_twenty_db(self):
        x = np.zeros((3, 4, 4))
        assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-12)

    def test_matches_loop_oracle(self):
        x, y = image(1), image(2)
        assert abs(psnr(x, y) - psnr_oracle(x, y)) < 1e-9

    def test_symmetric_and_flip_invariant(self):
        x, y = image(3), image(4)
        assert psnr(x, y) == psnr(y, x)
        assert psnr(x[:, ::-1], y[:, ::-1]) == pytest.approx(psnr(x, y), abs=1e-12)

    def test_decreases_with_noise(self):
        x = image(5) * 0.5 + 0.25
        noise = np.random.default_rng(6).standard_normal(x.shape)
        values = [psnr(x, x + a * noise) for a in (0.01, 0.02, 0.05, 0.1, 0.2)]
        assert all(p > q for p, q in zip(values, values[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))

    def test_peak_must_be_positive(self):
        with pytest.raises(ValueError):
            psnr(np.zeros(3), np.ones(3), peak=0)


class TestSsim:
    def test_identity(self):
        x = image(7, (3, 20, 20))
        assert abs(ssim(x, x) - 1.0) < 1e-9

    def test_matches_window_oracle(self):
        x, y = image(8, (3, 14, 15)), image(9, (3, 14, 15))
        assert abs(ssim(x, y) - ssim_oracle(x, y)) < 1e-9

    def test_binary_complement_low(self):
        x = (np.random.default_rng(10).random((1, 24, 24)) > 0.5).astype(np.float64)
        x = np.repeat(x, 3, axis=0)
        assert ssim(x, 1 - x) < 0.5

    def test_constant_plus_tiny_noise_high(self):
        x = np.full((3, 24, 24), 0.5)
        y = x + 1e-3 * np.random.default_rng(11).standard_normal(x.shape)
        assert ssim(x, y) > 0.99

    def test_symmetric_and_flip_invariant(self):
        x, y = image(12, (3, 20, 20)), image(13, (3, 20, 20))
        assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-12)
        assert ssim(x[:, ::-1, ::-1], y[:, ::-1, ::-1]) == pytest.approx(ssim(x, y), abs=1e-12)

    def test_batched_is_mean(self):
        xs, ys = image(14, (2, 3, 12, 12)), image(15, (2, 3, 12, 12))
        assert ssim(xs, ys) == pytest.approx((ssim(xs[0], ys[0]) + ssim(xs[1], ys[1])) / 2, abs=1e-12)

    def test_too_small(self):
        with pytest.raises(DimensionError):
            ssim(np.zeros((3, 10, 30)), np.zeros((3, 10, 30)))

    def test_window_normalised(self):
        assert gaussian_window().sum() == pytest.approx(1.0, abs=1e-12)


class TestReport:
    def test_mean_is_arithmetic_and_csv_round_trip(self, tmp_path):
        rep = MetricsReport()
        rep.add("a", 10.0, 0.5, 20.0, 0.25)
        rep.add("b", 30.0, 0.7, 10.0, 0.75)
        assert rep.summary() == {"psnr_T": 20.0, "ssim_T": 0.6, "psnr_R": 15.0, "ssim_R": 0.5}
        rep.write_csv(tmp_path / "m.csv")
        assert (tmp_path / "m.csv").read_text().splitlines()[0] == "image_id,psnr_T,ssim_T,psnr_R,ssim_R"
        assert MetricsReport.read_csv(tmp_path / "m.csv").rows == rep.rows

    def test_reflection_fallback_uses_residual(self):
        rng = np.random.default_rng(16)
        t, r = rng.uniform(0, 0.5, (1, 3, 12, 12)), rng.uniform(0, 0.5, (1, 3, 12, 12))
        rep = evaluate_pairs(t + r, t, r, t)
        assert rep.rows[0][3] == PSNR_CAP and rep.rows[0][1] == PSNR_CAP

    def test_predictions_clipped(self):
        t = np.full((1, 3, 12, 12), 1.0)
        rep = evaluate_pairs(t, t, np.zeros_like(t), t + 0.5, np.zeros_like(t) - 0.5)
        assert rep.rows[0][1] == PSNR_CAP and rep.rows[0][3] == PSNR_CAP
