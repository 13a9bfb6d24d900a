"""Cross-stream feature exchange and the dual-stream YTMT block.

Each stream keeps what its ReLU activates and hands what the ReLU would
discard to the other stream, so the pair of outputs carries exactly the
information of the pair of inputs.
"""

from __future__ import annotations

from enum import Enum
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .layers import AttentionUnit, Conv2d, Module
from .tensor import Tensor

negative_relu = T.negative_relu


class FusionMode(str, Enum):
    CONCAT = "concat"
    ADD = "add"


class ExchangeMode(str, Enum):
    YTMT = "ytmt"
    RELU_ONLY = "relu_only"
    NONE = "none"


def _merge(normal: Tensor, incoming: Tensor, fusion: FusionMode) -> Tensor:
    if fusion is FusionMode.ADD:
        return normal + incoming
    return T.concat_channels(normal, incoming)


def ytmt_exchange(x1t: Tensor, x2t: Tensor, mode: ExchangeMode = ExchangeMode.YTMT,
                  fusion: FusionMode = FusionMode.ADD) -> tuple:
    """Rectify both streams and route the rectifier leftovers across.

    With ``ExchangeMode.YTMT`` stream 1 receives ``relu(x1t) (+) negative_relu(x2t)``
    and stream 2 the mirror image.  In concat fusion the normal connection
    occupies the leading channels.  ``RELU_ONLY`` sends ``relu`` of the other
    stream instead, and ``NONE`` returns the two rectified streams untouched.
    """
    mode, fusion = ExchangeMode(mode), FusionMode(fusion)
    if x1t.shape != x2t.shape:
        raise DimensionError(f"exchange needs equal stream shapes, got {x1t.shape} and {x2t.shape}")
    p1, p2 = T.relu(x1t), T.relu(x2t)
    if mode is ExchangeMode.NONE:
        return p1, p2
    if mode is ExchangeMode.YTMT:
        return _merge(p1, negative_relu(x2t), fusion), _merge(p2, negative_relu(x1t), fusion)
    return _merge(p1, p2, fusion), _merge(p2, p1, fusion)


class _StreamLayers(Module):
    def __init__(self, cin: int, cout: int, fused: bool, reduction: int, rng, dtype):
        self.conv_a = Conv2d(cin, cout, 3, rng, dtype)
        self.conv_b = Conv2d(cout, cout, 3, rng, dtype)
        if fused:
            self.fuse_a = Conv2d(2 * cout, cout, 1, rng, dtype)
            self.fuse_b = Conv2d(2 * cout, cout, 1, rng, dtype)
        self.att = AttentionUnit(cout, reduction, rng, dtype)


class YtmtBlock(Module):
    """Two 3x3 convolutions per stream, each followed by an exchange.

    Per stream: conv -> exchange -> [1x1 fuse] -> conv -> exchange -> [1x1 fuse]
    -> attention.  The 1x1 fusions exist only for concat fusion with a mode
    that actually concatenates (i.e. not ``ExchangeMode.NONE``).
    """

    def __init__(self, in_channels: int, out_channels: int,
                 exchange: ExchangeMode = ExchangeMode.YTMT,
                 fusion: FusionMode = FusionMode.CONCAT, reduction: int = 8,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.exchange = ExchangeMode(exchange)
        self.fusion = FusionMode(fusion)
        self.fused = self.fusion is FusionMode.CONCAT and self.exchange is not ExchangeMode.NONE
        self.streams = [
            _StreamLayers(in_channels, out_channels, self.fused, reduction, rng, dtype) for _ in range(2)
        ]

    def _exchange(self, t1: Tensor, t2: Tensor, stage: str) -> tuple:
        y1, y2 = ytmt_exchange(t1, t2, self.exchange, self.fusion)
        if self.fused:
            s1, s2 = self.streams
            y1, y2 = getattr(s1, f"fuse_{stage}")(y1), getattr(s2, f"fuse_{stage}")(y2)
        return y1, y2

    def forward(self, x1: Tensor, x2: Tensor) -> tuple:
        if x1.shape != x2.shape:
            raise DimensionError(f"YtmtBlock streams differ in shape: {x1.shape} vs {x2.shape}")
        s1, s2 = self.streams
        y1, y2 = self._exchange(s1.conv_a(x1), s2.conv_a(x2), "a")
        y1, y2 = self._exchange(s1.conv_b(y1), s2.conv_b(y2), "b")
        return s1.att(y1), s2.att(y2)
