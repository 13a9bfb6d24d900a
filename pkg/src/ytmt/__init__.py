"""Dual-stream layer separation with rectifier-leftover exchange, on a small numpy autodiff core."""

from .config import Config
from .errors import (ConfigError, ContractError, DimensionError, IngestionError, NumericError, ParameterError,
                     YtmtError)
from .exchange import ExchangeMode, FusionMode, YtmtBlock, negative_relu, ytmt_exchange
from .losses import LossWeights, total_loss
from .metrics import psnr, ssim
from .networks import NetConfig, StagePlan, build_network, build_two_stage
from .tensor import Parameter, Tensor, no_grad

__all__ = [
    "Config", "ConfigError", "ContractError", "DimensionError", "ExchangeMode", "FusionMode", "IngestionError",
    "LossWeights", "NetConfig", "NumericError", "Parameter", "ParameterError", "StagePlan", "Tensor",
    "YtmtBlock", "YtmtError", "build_network", "build_two_stage", "negative_relu", "no_grad", "psnr", "ssim",
    "total_loss", "ytmt_exchange",
]
