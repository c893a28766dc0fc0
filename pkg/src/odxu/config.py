"""Run configuration: one JSON document with a block per stage."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .gbdt import BoostParams
from .nn import AutoencoderSpec, TrainConfig
from .stopping import EarlyStop


@dataclass
class SplitConfig:
    dec_test: float = 0.5  # DEC-Train / DEC-Test
    valid: float = 0.25  # held-out share of DEC-Train for stopping
    xgb_test: float = 0.5  # DEC-Test -> XGB-Train / XGB-Test


@dataclass
class AeConfig:
    hidden: tuple = (512, 64)
    latent: int = 12
    corruption_rate: float = 0.1
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 50
    eta: int = 20
    delta: float = 5e-4

    def spec(self, input_dim: int) -> AutoencoderSpec:
        return AutoencoderSpec(input_dim, tuple(self.hidden), self.latent, self.corruption_rate)

    def train(self, seed: int) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size, max_epochs=self.max_epochs, seed=seed)

    def stop(self) -> EarlyStop:
        return EarlyStop(self.eta, self.delta)


@dataclass
class DecConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 50
    eta: int = 20
    delta: float = 5e-3

    def train(self, seed: int) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size, max_epochs=self.max_epochs, seed=seed)

    def stop(self) -> EarlyStop:
        return EarlyStop(self.eta, self.delta)


@dataclass
class BoostConfig:
    lam: float = 1.0
    gamma: float = 0.0
    learning_rate: float = 0.3
    max_depth: int = 6
    rounds: int = 50
    min_child_hessian: float = 1.0

    def params(self, seed: int) -> BoostParams:
        return BoostParams(**asdict(self), seed=seed)


@dataclass
class MetaConfig:
    ratio: float = 5.0  # right:wrong rows kept
    test_fraction: float = 0.2
    background: int = 32
    boost: BoostConfig = field(default_factory=BoostConfig)


@dataclass
class FcnnConfig:
    hidden: tuple = (1024, 512, 68)
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 20

    def train(self, seed: int) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size, max_epochs=self.max_epochs, seed=seed)


@dataclass
class TransferConfig:
    portions: tuple = (0.10, 0.25, 0.50, 0.75)
    fine_tune_lr_factor: float = 0.1
    # target class name -> source class name, for classifier fine-tuning across label spaces
    label_map: dict | None = None


@dataclass
class RunConfig:
    seed: int = 0
    benign: str = "Benign"
    split: SplitConfig = field(default_factory=SplitConfig)
    ae: AeConfig = field(default_factory=AeConfig)
    dec: DecConfig = field(default_factory=DecConfig)
    clf: BoostConfig = field(default_factory=BoostConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    fcnn: FcnnConfig = field(default_factory=FcnnConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        return _build(cls, obj, "config")

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _build(cls, obj, where: str):
    if not isinstance(obj, dict):
        raise ValueError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    extra = set(obj) - set(known)
    if extra:
        raise ValueError(f"{where}: unknown keys {sorted(extra)}")
    kw = {}
    defaults = cls()
    for name, value in obj.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kw[name] = _build(type(current), value, f"{where}.{name}")
        elif isinstance(current, tuple):
            kw[name] = tuple(value)
        else:
            kw[name] = value
    return cls(**kw)
