import math

import numpy as np
import pytest

from oracles import conv_same, forward_diffs, halve, mean
from ytmt.errors import DimensionError
from ytmt.gradcheck import run_suite
from ytmt.losses import (Discriminator, FeatureExtractor, LossReport, LossWeights, adversarial_losses,
                         exclusion_loss, grad_xy, perceptual_loss, reconstruction_loss, total_loss)
from ytmt.tensor import Tensor


def rand(shape, seed, dtype=np.float64):
    return np.random.default_rng(seed).uniform(0, 1, shape).astype(dtype)


def layers(n=2, size=16, seed=0):
    rng = np.random.default_rng(seed)
    t, r = rng.uniform(0, 0.6, (n, 3, size, size)), rng.uniform(0, 0.4, (n, 3, size, size))
    return t, r, t + r


class TestGradXY:
    def test_constant_is_zero(self):
        dx, dy = grad_xy(Tensor(np.full((1, 2, 4, 5), 0.3)))
        assert dx.shape == (1, 2, 4, 4) and dy.shape == (1, 2, 3, 5)
        assert not dx.data.any() and not dy.data.any()

    def test_width_ramp(self):
        x = np.broadcast_to(np.arange(6.0), (1, 1, 4, 6)).copy()
        dx, dy = grad_xy(Tensor(x))
        np.testing.assert_array_equal(dx.data, 1.0)
        np.testing.assert_array_equal(dy.data, 0.0)

    def test_degenerate_extent(self):
        with pytest.raises(DimensionError):
            grad_xy(Tensor(np.zeros((1, 1, 1, 4))))


def reconstruction_oracle(th, rh, t, r, i, w):
    n, c, h, wd = t.shape
    mse_t = mse_r = mix = 0.0
    grads = []
    for b in range(n):
        for ch in range(c):
            for y in range(h):
                for x in range(wd):
                    mse_t += (th[b, ch, y, x] - t[b, ch, y, x]) ** 2
                    mse_r += (rh[b, ch, y, x] - r[b, ch, y, x]) ** 2
                    mix += abs(th[b, ch, y, x] + rh[b, ch, y, x] - i[b, ch, y, x])
        pdx, pdy = forward_diffs(th[b])
        tdx, tdy = forward_diffs(t[b])
        grads += [abs(p - q) for p, q in zip(pdx + pdy, tdx + tdy)]
    size = t.size
    return w.a * mse_t / size + w.b * mse_r / size + w.c * mean(grads) + w.d * mix / size


class TestReconstruction:
    def test_perfect_prediction_is_zero(self):
        t, r, i = layers()
        assert float(reconstruction_loss(Tensor(t), Tensor(r), Tensor(t), Tensor(r), Tensor(i)).data) == 0.0

    def test_constant_offset(self):
        t, r, i = layers()
        loss = reconstruction_loss(Tensor(t + 1.0), Tensor(r), Tensor(t), Tensor(r), Tensor(i))
        assert float(loss.data) == pytest.approx(0.5, abs=1e-12)

    def test_matches_loop_oracle(self):
        t, r, i = layers(seed=1)
        th, rh = rand(t.shape, 2), rand(t.shape, 3)
        w = LossWeights()
        got = float(reconstruction_loss(Tensor(th), Tensor(rh), Tensor(t), Tensor(r), Tensor(i), w).data)
        assert abs(got - reconstruction_oracle(th, rh, t, r, i, w)) < 1e-6

    def test_shape_mismatch(self):
        a = Tensor(np.zeros((1, 3, 4, 4)))
        with pytest.raises(DimensionError):
            reconstruction_loss(a, a, a, a, Tensor(np.zeros((1, 3, 4, 5))))


def small_extractor():
    return FeatureExtractor(widths=(2, 3, 2, 2, 2), seed=5, dtype=np.float64)


def perceptual_oracle(th, rh, t, r, ext, omega):
    convs = [(c.weight.data, c.bias.data) for c in ext.convs]

    def taps(img):
        out, h = [], img
        for j, (w, b) in enumerate(convs):
            if j:
                h = halve(h)
            h = np.maximum(conv_same(h, w, b), 0.0)
            out.append(h)
        return out

    total = 0.0
    for pred, target in ((th, t), (rh, r)):
        diffs = [[] for _ in omega]
        for b in range(pred.shape[0]):
            for j, (fp, ft) in enumerate(zip(taps(pred[b]), taps(target[b]))):
                diffs[j] += [abs(p - q) for p, q in zip(fp.ravel(), ft.ravel())]
        total += sum(wj * mean(d) for wj, d in zip(omega, diffs))
    return total


class TestPerceptual:
    def test_identical_is_zero(self):
        t, r, _ = layers()
        assert float(perceptual_loss(Tensor(t), Tensor(r), Tensor(t), Tensor(r), small_extractor()).data) == 0.0

    def test_linear_in_omega(self):
        t, r, _ = layers(seed=2)
        th, rh = Tensor(rand(t.shape, 4)), Tensor(rand(t.shape, 5))
        ext = small_extractor()
        omega = LossWeights().omega
        base = float(perceptual_loss(th, rh, Tensor(t), Tensor(r), ext, omega).data)
        scaled = float(perceptual_loss(th, rh, Tensor(t), Tensor(r), ext, tuple(3.5 * w for w in omega)).data)
        assert scaled == pytest.approx(3.5 * base, rel=1e-12)

    def test_matches_loop_oracle(self):
        t, r, _ = layers(n=1, size=10, seed=3)
        th, rh = rand(t.shape, 6), rand(t.shape, 7)
        ext = small_extractor()
        omega = LossWeights().omega
        got = float(perceptual_loss(Tensor(th), Tensor(rh), Tensor(t), Tensor(r), ext, omega).data)
        assert abs(got - perceptual_oracle(th, rh, t, r, ext, omega)) < 1e-6

    def test_weight_count_must_match_taps(self):
        t, r, _ = layers()
        with pytest.raises(DimensionError):
            perceptual_loss(Tensor(t), Tensor(r), Tensor(t), Tensor(r), small_extractor(), (1.0, 1.0))

    def test_extractor_frozen_and_deterministic(self):
        a, b = FeatureExtractor(seed=9), FeatureExtractor(seed=9)
        assert a.trainable_parameters() == []
        for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            assert p.data.tobytes() == q.data.tobytes()


def exclusion_oracle(th, rh, levels, eps=1e-6):
    t_imgs, r_imgs = list(th), list(rh)
    total = 0.0
    for n in range(levels):
        if n:
            t_imgs, r_imgs = [halve(x) for x in t_imgs], [halve(x) for x in r_imgs]
        sq = []
        for direction in (0, 1):
            tg = [g for x in t_imgs for g in forward_diffs(x)[direction]]
            rg = [g for x in r_imgs for g in forward_diffs(x)[direction]]
            lam = math.sqrt((mean([abs(g) for g in rg]) + eps) / (mean([abs(g) for g in tg]) + eps))
            sq += [(math.tanh(lam * abs(a)) * math.tanh(abs(b) / lam)) ** 2 for a, b in zip(tg, rg)]
        total += mean(sq)
    return total / levels


class TestExclusion:
    def test_constant_transmission_is_zero(self):
        r = rand((2, 3, 16, 16), 0)
        assert float(exclusion_loss(Tensor(np.full_like(r, 0.4)), Tensor(r)).data) == 0.0

    def test_disjoint_edges_zero(self):
        rows = np.random.default_rng(1).uniform(0, 1, 16)
        cols = np.random.default_rng(2).uniform(0, 1, 16)
        t = np.broadcast_to(rows[:, None], (1, 3, 16, 16)).copy()  # edges between rows only
        r = np.broadcast_to(cols[None, :], (1, 3, 16, 16)).copy()  # edges between columns only
        assert float(exclusion_loss(Tensor(t), Tensor(r)).data) == 0.0

    def test_matches_loop_oracle(self):
        th, rh = rand((2, 3, 12, 12), 3), rand((2, 3, 12, 12), 4)
        got = float(exclusion_loss(Tensor(th), Tensor(rh), levels=3).data)
        assert abs(got - exclusion_oracle(th, rh, 3)) < 1e-6

    def test_odd_sizes_match_loop_oracle(self):
        th, rh = rand((1, 3, 9, 11), 5), rand((1, 3, 9, 11), 6)
        got = float(exclusion_loss(Tensor(th), Tensor(rh), levels=2).data)
        assert abs(got - exclusion_oracle(th, rh, 2)) < 1e-6

    def test_decreases_along_scaling_path(self):
        base, rh = rand((1, 3, 16, 16), 7), Tensor(rand((1, 3, 16, 16), 8))
        values = [float(exclusion_loss(Tensor(s * base), rh).data) for s in (1.0, 0.5, 0.1, 1e-2, 1e-4, 0.0)]
        assert all(a > b for a, b in zip(values, values[1:]))
        assert values[-1] == 0.0

    def test_too_small_rejected(self):
        x = Tensor(np.zeros((1, 3, 7, 16)))
        with pytest.raises(DimensionError):
            exclusion_loss(x, x, levels=3)


def neutral_discriminator():
    d = Discriminator(rng=np.random.default_rng(0), dtype=np.float64)
    d.head.weight.data[:] = 0
    d.head.bias.data[:] = 0
    return d


class TestAdversarial:
    def test_half_probability_gives_two_ln2(self):
        t, th = Tensor(rand((2, 3, 8, 8), 0)), Tensor(rand((2, 3, 8, 8), 1))
        gen, disc = adversarial_losses(t, th, neutral_discriminator())
        assert float(gen.data) == pytest.approx(2 * math.log(2), abs=1e-12)
        assert float(disc.data) == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_swap_exchanges_roles(self):
        d = Discriminator(rng=np.random.default_rng(1), dtype=np.float64)
        a, b = Tensor(rand((2, 3, 8, 8), 2)), Tensor(rand((2, 3, 8, 8), 3))
        gen_ab, disc_ab = adversarial_losses(a, b, d)
        gen_ba, disc_ba = adversarial_losses(b, a, d)
        assert float(gen_ab.data) == pytest.approx(float(disc_ba.data), rel=1e-12)
        assert float(gen_ab.data + disc_ab.data) == pytest.approx(float(gen_ba.data + disc_ba.data), rel=1e-12)

    def test_nonnegative_and_finite_when_saturated(self):
        d = neutral_discriminator()
        d.head.bias.data[:] = 1e4
        gen, disc = adversarial_losses(Tensor(rand((1, 3, 8, 8), 4)), Tensor(rand((1, 3, 8, 8), 5)), d)
        assert 0 <= float(gen.data) < 40 and 0 <= float(disc.data) < 40

    def test_gradient_reaches_prediction_not_target(self):
        d = Discriminator(rng=np.random.default_rng(2), dtype=np.float64)
        t = Tensor(rand((1, 3, 8, 8), 6))
        th = Tensor(rand((1, 3, 8, 8), 7), requires_grad=True)
        gen, _ = adversarial_losses(t, th, d)
        gen.backward()
        assert np.any(th.grad)
        assert t.grad is None


class TestTotal:
    def test_perfect_prediction_is_zero(self):
        # exclusion is zero at the truth only when the true layers share no edges
        rows = np.random.default_rng(0).uniform(0, 0.5, 16)
        cols = np.random.default_rng(1).uniform(0, 0.5, 16)
        t = Tensor(np.broadcast_to(rows[:, None], (2, 3, 16, 16)).copy())
        r = Tensor(np.broadcast_to(cols[None, :], (2, 3, 16, 16)).copy())
        i = t + r
        total, report = total_loss(t, r, t, r, i, extractor=small_extractor())
        assert float(total.data) == 0.0 and report.total == 0.0

    def test_zero_lambdas_reduce_to_reconstruction(self):
        t, r, i = layers(seed=4)
        th, rh = Tensor(rand(t.shape, 8)), Tensor(rand(t.shape, 9))
        w = LossWeights(lambda_per=0, lambda_exc=0, lambda_adv=0)
        total, _ = total_loss(th, rh, Tensor(t), Tensor(r), Tensor(i), w, small_extractor(),
                              neutral_discriminator(), enable_adv=True)
        rec = reconstruction_loss(th, rh, Tensor(t), Tensor(r), Tensor(i), w)
        assert float(total.data) == float(rec.data)

    def test_report_resums_to_total(self):
        t, r, i = layers(seed=5)
        th, rh = Tensor(rand(t.shape, 10)), Tensor(rand(t.shape, 11))
        w = LossWeights()
        d = Discriminator(rng=np.random.default_rng(3), dtype=np.float64)
        total, rep = total_loss(th, rh, Tensor(t), Tensor(r), Tensor(i), w, small_extractor(), d, enable_adv=True)
        resum = rep.rec + w.lambda_per * rep.per + w.lambda_exc * rep.exc + w.lambda_adv * rep.adv_g
        assert abs(resum - float(total.data)) < 1e-6
        assert rep.adv_d > 0 and rep.total == float(total.data)

    def test_adversarial_needs_discriminator(self):
        t, r, i = (Tensor(a) for a in layers())
        with pytest.raises(ValueError):
            total_loss(t, r, t, r, i, enable_adv=True)

    def test_report_columns(self):
        assert LossReport(rec=1.0, total=2.0).as_row() == [1.0, 0.0, 0.0, 0.0, 0.0, 2.0]

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(c=-0.1)


@pytest.mark.parametrize("name", ["loss_reconstruction", "loss_perceptual", "loss_exclusion",
                                  "loss_adversarial_gen", "loss_adversarial_disc"])
def test_loss_gradcheck(name):
    [(report, ok)] = run_suite(names=[name])
    assert ok, report
