"""Dual-stream plain and U-shaped networks and the two-stage cascade."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .exchange import ExchangeMode, FusionMode, YtmtBlock
from .layers import Conv2d, Module, downsample_bilinear, downsample_max, upsample_to
from .tensor import Tensor, no_grad


class Augmenter(str, Enum):
    RAW = "raw"
    PYRAMID = "pyramid"


@dataclass
class NetConfig:
    architecture: str = "ushaped"  # or "plain"
    depth: int = 3
    base_channels: int = 32
    plain_blocks: int = 6
    fusion: FusionMode = FusionMode.CONCAT
    exchange: ExchangeMode = ExchangeMode.YTMT
    augmenter: Augmenter = Augmenter.RAW
    reduction: int = 8
    in_channels: int = 3
    out_channels: int = 3

    def __post_init__(self):
        self.fusion = FusionMode(self.fusion)
        self.exchange = ExchangeMode(self.exchange)
        self.augmenter = Augmenter(self.augmenter)

    def validate(self) -> None:
        if self.architecture not in ("ushaped", "plain"):
            raise ContractError(f"unknown architecture {self.architecture!r}")
        if self.depth < 1:
            raise ContractError(f"depth must be >= 1, got {self.depth}")
        if self.plain_blocks < 1:
            raise ContractError(f"plain_blocks must be >= 1, got {self.plain_blocks}")
        for name in ("base_channels", "reduction", "in_channels", "out_channels"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def interacting(self) -> bool:
        return self.exchange is not ExchangeMode.NONE


class RawIdentity(Module):
    """Passes the image channels through unchanged."""

    def __init__(self, in_channels: int):
        self.in_channels = in_channels
        self.out_channels = in_channels

    def forward(self, x: Tensor) -> Tensor:
        return x


class FixedRandomPyramid(Module):
    """Frozen random multi-scale features concatenated with the image.

    Three frozen 3x3 conv+ReLU stages at full, 1/2 and 1/4 resolution; the
    coarse maps are upsampled back and stacked after the image channels.
    Stand-in for a pretrained hypercolumn.
    """

    widths = (8, 16, 16)

    def __init__(self, in_channels: int, rng: np.random.Generator, dtype=np.float32):
        self.in_channels = in_channels
        w1, w2, w3 = self.widths
        self.conv1 = Conv2d(in_channels, w1, 3, rng, dtype)
        self.conv2 = Conv2d(w1, w2, 3, rng, dtype)
        self.conv3 = Conv2d(w2, w3, 3, rng, dtype)
        self.out_channels = in_channels + w1 + w2 + w3
        self.freeze()

    def forward(self, x: Tensor) -> Tensor:
        H, W = x.shape[2], x.shape[3]
        f1 = T.relu(self.conv1(x))
        f2 = T.relu(self.conv2(downsample_bilinear(f1)))
        f3 = T.relu(self.conv3(downsample_bilinear(f2)))
        h2, w2 = f2.shape[2], f2.shape[3]
        up3 = upsample_to(upsample_to(f3, h2, w2), H, W)
        return T.concat([x, f1, upsample_to(f2, H, W), up3], axis=1)


def make_augmenter(kind: Augmenter, in_channels: int, rng, dtype=np.float32) -> Module:
    if Augmenter(kind) is Augmenter.RAW:
        return RawIdentity(in_channels)
    return FixedRandomPyramid(in_channels, rng, dtype)


class _Pair(Module):
    def __init__(self, a: Module, b: Module):
        self.streams = [a, b]


class DualStreamNet(Module):
    """Common front end and output heads of both architectures.

    The augmented input is mapped to ``base_channels`` by a shared 1x1 conv
    and fed to both streams; two 3x3 heads turn the final stream features
    into the transmission and reflection estimates.  No output clamping.
    """

    def __init__(self, cfg: NetConfig, rng: Optional[np.random.Generator] = None, dtype=np.float32):
        cfg.validate()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.augmenter = make_augmenter(cfg.augmenter, cfg.in_channels, rng, dtype)
        self.inc = Conv2d(self.augmenter.out_channels, cfg.base_channels, 1, rng, dtype)

    def _block(self, cin: int, cout: int, rng, dtype) -> YtmtBlock:
        c = self.cfg
        return YtmtBlock(cin, cout, c.exchange, c.fusion, c.reduction, rng, dtype)

    def _make_heads(self, channels: int, rng, dtype) -> None:
        self.heads = [Conv2d(channels, self.cfg.out_channels, 3, rng, dtype) for _ in range(2)]

    def _stem(self, image: Tensor) -> Tensor:
        if image.ndim != 4 or image.shape[1] != self.cfg.in_channels:
            raise DimensionError(
                f"network expects (N, {self.cfg.in_channels}, H, W) input, got {image.shape}"
            )
        return self.inc(self.augmenter(image))

    def forward(self, image: Tensor) -> tuple:
        return self.trace(image)[0]

    def trace(self, image: Tensor) -> tuple:
        """Return ``((T_hat, R_hat), per_block_stream_pairs)``."""
        raise NotImplementedError

    def tie_streams(self) -> None:
        """Copy every stream-0 parameter onto its stream-1 counterpart."""
        params = dict(self.named_parameters())
        for name, p in params.items():
            twin = _twin_name(name)
            if twin is not None:
                params[twin].data = p.data.copy()


def _twin_name(name: str) -> Optional[str]:
    for token in ("streams.0.", "heads.0."):
        if token in name:
            return name.replace(token, token.replace("0", "1"), 1)
    return None


class UShapedNet(DualStreamNet):
    """Encoder / bottleneck / decoder of YTMT blocks.

    Level ``l`` runs at 1/2**l resolution with ``base * 2**l`` channels.
    Before every decoder block the up-sampled features are concatenated with
    the same-stream encoder skip and (when streams interact) the other
    stream's encoder skip, then fused back to the level width by a 1x1 conv.
    """

    def __init__(self, cfg: NetConfig, rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__(cfg, rng, dtype)
        rng = rng if rng is not None else np.random.default_rng(0)
        widths = [cfg.base_channels * 2 ** level for level in range(cfg.depth)]
        self.widths = widths
        cin = cfg.base_channels
        self.encoder = []
        for w in widths:
            self.encoder.append(self._block(cin, w, rng, dtype))
            cin = w
        self.bottleneck = self._block(cin, cin, rng, dtype)
        self.dec_fuse = []
        self.decoder = []
        up = cin
        skip_copies = 2 if cfg.interacting else 1
        for w in reversed(widths):
            fuse_in = skip_copies * w + up
            self.dec_fuse.append(_Pair(Conv2d(fuse_in, w, 1, rng, dtype), Conv2d(fuse_in, w, 1, rng, dtype)))
            self.decoder.append(self._block(w, w, rng, dtype))
            up = w
        self._make_heads(widths[0], rng, dtype)

    def trace(self, image: Tensor) -> tuple:
        x = self._stem(image)
        x1 = x2 = x
        pairs = []
        skips = []
        for level, block in enumerate(self.encoder):
            if level:
                x1, x2 = downsample_max(x1), downsample_max(x2)
            x1, x2 = block(x1, x2)
            pairs.append((x1, x2))
            skips.append((x1, x2))
        x1, x2 = self.bottleneck(downsample_max(x1), downsample_max(x2))
        pairs.append((x1, x2))
        for fuse, block, (e1, e2) in zip(self.dec_fuse, self.decoder, reversed(skips)):
            h, w = e1.shape[2], e1.shape[3]
            u1, u2 = upsample_to(x1, h, w), upsample_to(x2, h, w)
            if self.cfg.interacting:
                f1, f2 = T.concat([e1, e2, u1], axis=1), T.concat([e2, e1, u2], axis=1)
            else:
                f1, f2 = T.concat([e1, u1], axis=1), T.concat([e2, u2], axis=1)
            c1, c2 = fuse.streams
            x1, x2 = block(c1(f1), c2(f2))
            pairs.append((x1, x2))
        h1, h2 = self.heads
        return (h1(x1), h2(x2)), pairs


class PlainNet(DualStreamNet):
    """Fixed-resolution chain of ``plain_blocks`` YTMT blocks."""

    def __init__(self, cfg: NetConfig, rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__(cfg, rng, dtype)
        rng = rng if rng is not None else np.random.default_rng(0)
        c = cfg.base_channels
        self.blocks = [self._block(c, c, rng, dtype) for _ in range(cfg.plain_blocks)]
        self._make_heads(c, rng, dtype)

    def trace(self, image: Tensor) -> tuple:
        x = self._stem(image)
        x1 = x2 = x
        pairs = []
        for block in self.blocks:
            x1, x2 = block(x1, x2)
            pairs.append((x1, x2))
        h1, h2 = self.heads
        return (h1(x1), h2(x2)), pairs


def build_ushaped(cfg: NetConfig, rng: Optional[np.random.Generator] = None, dtype=np.float32) -> UShapedNet:
    return UShapedNet(cfg, rng, dtype)


def build_plain(cfg: NetConfig, rng: Optional[np.random.Generator] = None, dtype=np.float32) -> PlainNet:
    return PlainNet(cfg, rng, dtype)


def build_network(cfg: NetConfig, rng: Optional[np.random.Generator] = None, dtype=np.float32) -> DualStreamNet:
    if cfg.architecture == "plain":
        return build_plain(cfg, rng, dtype)
    return build_ushaped(cfg, rng, dtype)


# -- two-stage cascade ------------------------------------------------------
@dataclass
class StagePlan:
    stages: int = 1
    stage2_with_input: bool = False

    def __post_init__(self):
        if self.stages not in (1, 2):
            raise ContractError(f"stage count must be 1 or 2, got {self.stages}")

    def stage2_channels(self, image_channels: int = 3) -> int:
        return image_channels * (3 if self.stage2_with_input else 2)


def _expand_input_weight(old: np.ndarray, new_shape: tuple, n_old: int, n_new: int) -> np.ndarray:
    # image slots [0, n_old) are duplicated over the (T_hat, R_hat) slots so the
    # stage-2 layer applied to concat(T_hat, R_hat) equals the stage-1 layer on their sum
    new = np.zeros(new_shape, dtype=old.dtype)
    new[:, :n_old] = old[:, :n_old]
    new[:, n_old : 2 * n_old] = old[:, :n_old]
    new[:, n_new:] = old[:, n_old:]
    return new


def init_from_stage1(stage2: DualStreamNet, stage1: DualStreamNet) -> list:
    """Copy stage-1 parameters into stage 2; returns the names that were adapted.

    Parameters with identical shapes are copied verbatim.  Layers reading the
    raw image channels (augmenter input conv, stem 1x1 conv) get their image
    columns duplicated across the T_hat and R_hat slots; extra input slots
    start at zero.
    """
    n_old, n_new = stage1.cfg.in_channels, stage2.cfg.in_channels
    src = dict(stage1.named_parameters())
    adapted = []
    for name, p in stage2.named_parameters():
        q = src.get(name)
        if q is None:
            continue
        if q.shape == p.shape:
            p.data = q.data.copy()
        elif q.ndim == 4 and q.shape[0] == p.shape[0] and p.shape[1] - q.shape[1] == n_new - n_old:
            p.data = _expand_input_weight(q.data, p.shape, n_old, n_new)
            adapted.append(name)
    return adapted


class TwoStageNet(Module):
    """Frozen stage 1 followed by a trainable stage 2 fed with its outputs."""

    def __init__(self, stage1: DualStreamNet, stage2: DualStreamNet, plan: Optional[StagePlan] = None):
        self.plan = plan or StagePlan(stages=2)
        expected = self.plan.stage2_channels(stage1.cfg.in_channels)
        if stage2.cfg.in_channels != expected:
            raise DimensionError(f"stage 2 must accept {expected} channels, has {stage2.cfg.in_channels}")
        self.stage1 = stage1
        self.stage2 = stage2
        self.cfg = stage2.cfg

    def check_frozen(self) -> None:
        live = [n for n, p in self.stage1.named_parameters() if p.requires_grad]
        if live:
            raise ContractError(f"stage 1 must be frozen during stage-2 training; trainable: {live[:3]}")

    def stage2_input(self, image: Tensor) -> Tensor:
        with no_grad():
            t1, r1 = self.stage1(image)
        parts = [t1, r1] + ([image] if self.plan.stage2_with_input else [])
        return T.concat([p.detach() for p in parts], axis=1)

    def forward(self, image: Tensor) -> tuple:
        return self.stage2(self.stage2_input(image))

    def trace(self, image: Tensor) -> tuple:
        return self.stage2.trace(self.stage2_input(image))

    def tie_streams(self) -> None:
        self.stage1.tie_streams()
        self.stage2.tie_streams()


def cascade_forward(stage1: DualStreamNet, stage2: DualStreamNet, image: Tensor,
                    plan: Optional[StagePlan] = None) -> tuple:
    net = TwoStageNet(stage1, stage2, plan)
    net.check_frozen()
    return net(image)


def build_two_stage(stage1: DualStreamNet, rng: Optional[np.random.Generator] = None,
                    plan: Optional[StagePlan] = None, dtype=np.float32) -> TwoStageNet:
    """Freeze ``stage1`` and build a stage 2 initialised from it."""
    plan = plan or StagePlan(stages=2)
    cfg = NetConfig(**{**vars(stage1.cfg), "in_channels": plan.stage2_channels(stage1.cfg.in_channels)})
    stage2 = build_network(cfg, rng, dtype)
    init_from_stage1(stage2, stage1)
    stage1.freeze()
    return TwoStageNet(stage1, stage2, plan)
