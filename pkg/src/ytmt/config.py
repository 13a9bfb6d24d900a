"""Run configuration: four YAML sections (run, model, data, loss).

Every field has a default, unknown keys raise :class:`ConfigError`, and
``Config.from_text(cfg.to_text())`` reproduces ``cfg``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .data import DatasetSpec
from .errors import ConfigError
from .exchange import ExchangeMode, FusionMode
from .losses import LossWeights
from .networks import Augmenter, NetConfig, StagePlan

# variant -> (architecture, fusion, exchange, stages)
VARIANTS = {
    "UCS": ("ushaped", FusionMode.CONCAT, ExchangeMode.YTMT, 1),
    "UCT": ("ushaped", FusionMode.CONCAT, ExchangeMode.YTMT, 2),
    "UAS": ("ushaped", FusionMode.ADD, ExchangeMode.YTMT, 1),
    "UAT": ("ushaped", FusionMode.ADD, ExchangeMode.YTMT, 2),
    "plain-CS": ("plain", FusionMode.CONCAT, ExchangeMode.YTMT, 1),
    "plain-AS": ("plain", FusionMode.ADD, ExchangeMode.YTMT, 1),
    "w/o-FI": ("ushaped", FusionMode.CONCAT, ExchangeMode.NONE, 1),
    "ReLU-only": ("ushaped", FusionMode.CONCAT, ExchangeMode.RELU_ONLY, 1),
}
_ALIASES = {"wo-fi": "w/o-FI", "w/o-fi": "w/o-FI", "relu-only": "ReLU-only", "relu_only": "ReLU-only"}


def canonical_variant(name: str) -> str:
    if name in VARIANTS:
        return name
    key = name.lower()
    for known in VARIANTS:
        if known.lower() == key:
            return known
    if key in _ALIASES:
        return _ALIASES[key]
    raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")


def single_stage_counterpart(variant: str) -> str:
    """The single-stage variant sharing stage 1 with ``variant``."""
    variant = canonical_variant(variant)
    return variant[:-1] + "S" if VARIANTS[variant][3] == 2 else variant


@dataclass
class RunSection:
    variant: str = "UCS"
    batch_size: int = 8
    iterations: int = 2000
    stage2_iterations: Optional[int] = None  # None: same budget as stage 1
    seed: int = 0
    adversarial: bool = False
    out_dir: str = "runs/default"
    checkpoint_every: int = 500
    lr: float = 1e-4
    milestones: tuple = (0.5, 0.67, 0.83)
    grad_clip: Optional[float] = None
    stage2_with_input: bool = False
    plateau_window: float = 0.2
    plateau_tol: float = 0.01
    perceptual: bool = True
    eval_batch: int = 50

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)
        self.milestones = tuple(float(m) for m in self.milestones)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.iterations < 0 or (self.stage2_iterations is not None and self.stage2_iterations < 0):
            raise ConfigError("iteration budgets must be >= 0")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if any(not 0.0 < m < 1.0 for m in self.milestones):
            raise ConfigError("milestones are fractions in (0, 1)")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or null")


@dataclass
class ModelSection:
    depth: int = 3
    base_channels: int = 32
    plain_blocks: int = 6
    augmenter: str = "raw"
    reduction: int = 8

    def __post_init__(self):
        try:
            Augmenter(self.augmenter)
        except ValueError as exc:
            raise ConfigError(f"unknown augmenter {self.augmenter!r}") from exc


@dataclass
class DataSection:
    source: str = "procedural"
    path: Optional[str] = None
    crop: int = 32
    train_count: int = 2000
    test_count: int = 200
    seed: int = 0
    mode: str = "exact"
    alpha_range: tuple = (0.2, 0.45)
    sigma_range: tuple = (1.0, 3.0)
    test_path: Optional[str] = None

    def __post_init__(self):
        self.alpha_range = tuple(float(v) for v in self.alpha_range)
        self.sigma_range = tuple(float(v) for v in self.sigma_range)
        if self.train_count < 0 or self.test_count < 0:
            raise ConfigError("sample counts must be >= 0")
        try:
            self.dataset_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def dataset_spec(self, count: Optional[int] = None, path: Optional[str] = None) -> DatasetSpec:
        return DatasetSpec(
            source=self.source, path=path or self.path, crop=self.crop,
            count=self.train_count if count is None else count, seed=self.seed, mode=self.mode,
            alpha_range=self.alpha_range, sigma_range=self.sigma_range,
        )


@dataclass
class Config:
    run: RunSection = field(default_factory=RunSection)
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    loss: LossWeights = field(default_factory=LossWeights)

    # -- derived views ------------------------------------------------------
    def net_config(self) -> NetConfig:
        arch, fusion, exchange, _ = VARIANTS[self.run.variant]
        cfg = NetConfig(
            architecture=arch, depth=self.model.depth, base_channels=self.model.base_channels,
            plain_blocks=self.model.plain_blocks, fusion=fusion, exchange=exchange,
            augmenter=self.model.augmenter, reduction=self.model.reduction,
        )
        cfg.validate()
        return cfg

    def stage_plan(self) -> StagePlan:
        return StagePlan(stages=VARIANTS[self.run.variant][3], stage2_with_input=self.run.stage2_with_input)

    # -- (de)serialisation --------------------------------------------------
    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            out[f.name] = {k: _plain(v) for k, v in dataclasses.asdict(section).items()}
        return out

    @classmethod
    def from_dict(cls, raw: Optional[dict]) -> "Config":
        raw = raw or {}
        if not isinstance(raw, dict):
            raise ConfigError("config document must be a mapping")
        sections = {f.name: f.default_factory for f in dataclasses.fields(cls)}
        unknown = set(raw) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        built = {}
        for name, factory in sections.items():
            body = raw.get(name) or {}
            if not isinstance(body, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            allowed = {f.name for f in dataclasses.fields(factory)}
            bad = set(body) - allowed
            if bad:
                raise ConfigError(f"unknown key(s) in section {name!r}: {sorted(bad)}")
            try:
                built[name] = factory(**body)
            except (TypeError, ValueError) as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"section {name!r}: {exc}") from exc
        return cls(**built)

    def to_text(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    @classmethod
    def from_text(cls, text: str) -> "Config":
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "Config":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def override(self, section: str, **values) -> "Config":
        """Return a copy with non-None ``values`` replacing fields of ``section``."""
        raw = self.to_dict()
        raw[section].update({k: v for k, v in values.items() if v is not None})
        return Config.from_dict(raw)


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if hasattr(value, "value") and not isinstance(value, (int, float, str)):
        return value.value
    return value
