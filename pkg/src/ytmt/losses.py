"""Training objectives: reconstruction, perceptual, exclusion and adversarial.

All norms are element means, so the weights do not depend on resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import DimensionError, NumericError
from .layers import Conv2d, Module, downsample_bilinear, global_avg_pool
from .tensor import Tensor, no_grad

LOGIT_CLAMP = 15.0


@dataclass
class LossWeights:
    a: float = 0.3
    b: float = 0.9
    c: float = 0.6
    d: float = 0.2
    lambda_per: float = 0.1
    lambda_exc: float = 1.0
    lambda_adv: float = 0.01
    omega: tuple = (0.38, 0.21, 0.27, 0.18, 6.67)
    exclusion_levels: int = 3

    def __post_init__(self):
        self.omega = tuple(float(w) for w in self.omega)
        values = [self.a, self.b, self.c, self.d, self.lambda_per, self.lambda_exc, self.lambda_adv, *self.omega]
        if any(v < 0 for v in values):
            raise ValueError("loss weights must be nonnegative")
        if self.exclusion_levels < 1:
            raise ValueError("exclusion_levels must be >= 1")


@dataclass
class LossReport:
    rec: float = 0.0
    per: float = 0.0
    exc: float = 0.0
    adv_g: float = 0.0
    adv_d: float = 0.0
    total: float = 0.0

    columns = ("rec", "per", "exc", "adv_g", "adv_d", "total")

    def as_row(self) -> list:
        return [getattr(self, c) for c in self.columns]


def _same_shape(*tensors: Tensor) -> None:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != ref:
            raise DimensionError(f"loss inputs must share a shape: {ref} vs {t.shape}")


def grad_xy(x: Tensor) -> tuple:
    """Forward differences ``(d/dwidth, d/dheight)`` of a 4-D tensor.

    Shapes are (N, C, H, W-1) and (N, C, H-1, W).
    """
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise DimensionError(f"grad_xy needs spatial extents >= 2, got {x.shape}")
    all_ = slice(None)
    dx = T.getitem(x, (all_, all_, all_, slice(1, None))) - T.getitem(x, (all_, all_, all_, slice(None, -1)))
    dy = T.getitem(x, (all_, all_, slice(1, None), all_)) - T.getitem(x, (all_, all_, slice(None, -1), all_))
    return dx, dy


def _field_mean(fx: Tensor, fy: Tensor) -> Tensor:
    # element mean over the whole gradient field (both directions pooled)
    return (T.sum_(fx) + T.sum_(fy)) * (1.0 / (fx.size + fy.size))


def reconstruction_loss(That: Tensor, Rhat: Tensor, Tgt: Tensor, Rgt: Tensor, I: Tensor,
                        w: Optional[LossWeights] = None) -> Tensor:
    """a*MSE(T) + b*MSE(R) + c*L1(grad T) + d*L1(T_hat + R_hat - I)."""
    w = w or LossWeights()
    _same_shape(That, Rhat, Tgt, Rgt, I)
    mse_t = T.mean(T.square(That - Tgt))
    mse_r = T.mean(T.square(Rhat - Rgt))
    px, py = grad_xy(That)
    tx, ty = grad_xy(Tgt)
    grad_l1 = _field_mean(T.abs_(px - tx), T.abs_(py - ty))
    mix_l1 = T.mean(T.abs_(That + Rhat - I))
    return w.a * mse_t + w.b * mse_r + w.c * grad_l1 + w.d * mix_l1


class FeatureExtractor(Module):
    """Frozen random conv pyramid exposing one feature map per depth.

    Tap ``j`` is the ReLU output of the j-th 3x3 conv; every tap after the
    first is preceded by a bilinear halving.  Any extractor with the same
    ``__call__ -> list[Tensor]`` contract can replace it.
    """

    def __init__(self, in_channels: int = 3, widths=(8, 16, 32, 32, 32), seed: int = 1234,
                 dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.convs = []
        cin = in_channels
        for width in widths:
            self.convs.append(Conv2d(cin, width, 3, rng, dtype))
            cin = width
        self.freeze()

    def forward(self, x: Tensor) -> list:
        taps = []
        h = x
        for j, conv in enumerate(self.convs):
            if j:
                h = downsample_bilinear(h)
            h = T.relu(conv(h))
            taps.append(h)
        return taps


def perceptual_loss(That: Tensor, Rhat: Tensor, Tgt: Tensor, Rgt: Tensor,
                    extractor: Module, omega=LossWeights.omega) -> Tensor:
    _same_shape(That, Rhat, Tgt, Rgt)
    with no_grad():
        feats_t = extractor(Tgt)
        feats_r = extractor(Rgt)
    if len(omega) != len(feats_t):
        raise DimensionError(f"{len(omega)} layer weights for {len(feats_t)} extractor taps")
    total = None
    for pred, feats in ((That, feats_t), (Rhat, feats_r)):
        for wj, fp, ft in zip(omega, extractor(pred), feats):
            term = wj * T.mean(T.abs_(fp - ft))
            total = term if total is None else total + term
    return total


def _normalised_pair(a: Tensor, b: Tensor, eps: float) -> tuple:
    abs_a, abs_b = T.abs_(a), T.abs_(b)
    lam_a = T.sqrt((T.mean(abs_b) + eps) / (T.mean(abs_a) + eps))
    psi = T.tanh(lam_a * abs_a) * T.tanh(abs_b / lam_a)
    return psi


def exclusion_loss(That: Tensor, Rhat: Tensor, levels: int = 3, eps: float = 1e-6) -> Tensor:
    """Mean over ``levels`` scales of the squared tanh-gradient product.

    At scale ``n`` both layers are bilinearly halved ``n`` times.  The
    normalisers are lambda_T = sqrt(mean|grad R| / mean|grad T|) and
    lambda_R = 1 / lambda_T, computed per direction and scale.
    """
    _same_shape(That, Rhat)
    if That.ndim != 4 or min(That.shape[2:]) < 2 ** levels:
        raise DimensionError(
            f"exclusion loss with {levels} levels needs spatial extents >= {2 ** levels}, got {That.shape}"
        )
    t, r = That, Rhat
    total = None
    for n in range(levels):
        if n:
            t, r = downsample_bilinear(t), downsample_bilinear(r)
        tx, ty = grad_xy(t)
        rx, ry = grad_xy(r)
        psi_x = _normalised_pair(tx, rx, eps)
        psi_y = _normalised_pair(ty, ry, eps)
        level = _field_mean(T.square(psi_x), T.square(psi_y))
        total = level if total is None else total + level
    return total * (1.0 / levels)


class Discriminator(Module):
    """Joint-input critic: D(a, b) is the probability that ``b`` is the real image.

    concat(a, b) -> 3x3 conv+ReLU -> halve -> 3x3 conv+ReLU -> halve -> global mean
    -> 1x1 conv -> one logit per image.
    """

    def __init__(self, in_channels: int = 3, width: int = 16, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.conv1 = Conv2d(2 * in_channels, width, 3, rng, dtype)
        self.conv2 = Conv2d(width, 2 * width, 3, rng, dtype)
        self.head = Conv2d(2 * width, 1, 1, rng, dtype)

    def logits(self, a: Tensor, b: Tensor) -> Tensor:
        h = T.relu(self.conv1(T.concat_channels(a, b)))
        h = T.relu(self.conv2(downsample_bilinear(h)))
        h = global_avg_pool(downsample_bilinear(h))
        z = self.head(h)
        return T.reshape(z, (z.shape[0],))

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        return T.sigmoid(T.clamp(self.logits(a, b), -LOGIT_CLAMP, LOGIT_CLAMP))


def _neg_log_sigmoid(z: Tensor) -> Tensor:
    # -log(sigmoid(z)) = log(1 + exp(-z)), finite for |z| <= LOGIT_CLAMP
    return T.log(1.0 + T.exp(-z))


def adversarial_losses(Tgt: Tensor, That: Tensor, D: Discriminator) -> tuple:
    """Relativistic generator and discriminator losses.

    gen  = -log D(T, T_hat) - log(1 - D(T_hat, T))
    disc = -log(1 - D(T, T_hat)) - log D(T_hat, T)
    """
    _same_shape(Tgt, That)
    z_fake = T.clamp(D.logits(Tgt, That), -LOGIT_CLAMP, LOGIT_CLAMP)
    z_real = T.clamp(D.logits(That, Tgt), -LOGIT_CLAMP, LOGIT_CLAMP)
    gen = T.mean(_neg_log_sigmoid(z_fake) + _neg_log_sigmoid(-z_real))
    disc = T.mean(_neg_log_sigmoid(-z_fake) + _neg_log_sigmoid(z_real))
    if not (np.isfinite(gen.data).all() and np.isfinite(disc.data).all()):
        raise NumericError("adversarial loss is not finite")
    return gen, disc


def total_loss(That: Tensor, Rhat: Tensor, Tgt: Tensor, Rgt: Tensor, I: Tensor,
               w: Optional[LossWeights] = None, extractor: Optional[Module] = None,
               discriminator: Optional[Discriminator] = None, enable_adv: bool = False) -> tuple:
    """Weighted objective and a per-term :class:`LossReport`.

    The perceptual term is skipped (reported as 0) when no extractor is
    given.  The discriminator loss is reported but is not part of the total.
    """
    w = w or LossWeights()
    rec = reconstruction_loss(That, Rhat, Tgt, Rgt, I, w)
    report = LossReport(rec=float(rec.data))
    total = rec
    if extractor is not None:
        per = perceptual_loss(That, Rhat, Tgt, Rgt, extractor, w.omega)
        report.per = float(per.data)
        total = total + w.lambda_per * per
    exc = exclusion_loss(That, Rhat, w.exclusion_levels)
    report.exc = float(exc.data)
    total = total + w.lambda_exc * exc
    if enable_adv:
        if discriminator is None:
            raise ValueError("adversarial term enabled without a discriminator")
        gen, disc = adversarial_losses(Tgt, That, discriminator)
        report.adv_g, report.adv_d = float(gen.data), float(disc.data)
        total = total + w.lambda_adv * gen
    report.total = float(total.data)
    return total, report
