"""Run configuration: one flat JSON object with a strict key set."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from fvlm.encoders import ModelConfig
from fvlm.training import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    # model
    volume: tuple[int, int, int] = (32, 64, 64)
    patch: tuple[int, int, int] = (8, 8, 8)
    crop: tuple[int, int, int] = (16, 48, 48)
    width: int = 64
    embed_dim: int = 32
    vision_layers: int = 2
    text_layers: int = 2
    max_text_len: int = 128
    tau_init: float = 1.0 / 14.3
    tau_min: float = 0.01
    # data
    anatomy_table: str | None = None
    lexicon: str | None = None
    # optimisation
    epochs: int = 30
    batch_size: int = 8
    peak_lr: float = 3e-3
    final_lr: float = 3e-5
    warmup_epochs: int = 1
    text_lr_scale: float = 0.1
    alpha: float = 0.5
    burn_in_epochs: int = 5
    flip_prob: float = 0.5
    noise_std: float = 0.02
    seed: int = 0
    # ablations
    fga: bool = True
    fncn: bool = True
    coteach: bool = True
    baseline: str = "fvlm"  # or "global_clip"
    baseline_text_len: int = 384

    def __post_init__(self) -> None:
        if self.baseline not in ("fvlm", "global_clip"):
            raise ValueError(f"baseline must be 'fvlm' or 'global_clip', got {self.baseline!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("need epochs >= 1 and batch_size >= 2")

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def override(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def global_mode(self) -> bool:
        return self.baseline == "global_clip" or not self.fga

    def model_config(self, n_anatomies: int) -> ModelConfig:
        return ModelConfig(
            volume=self.volume,
            patch=self.patch,
            width=self.width,
            embed_dim=self.embed_dim,
            vision_layers=self.vision_layers,
            text_layers=self.text_layers,
            max_text_len=self.baseline_text_len if self.global_mode else self.max_text_len,
            n_anatomies=n_anatomies,
            tau_init=self.tau_init,
            tau_min=self.tau_min,
            kind="global_clip" if self.global_mode else "fvlm",
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            peak_lr=self.peak_lr,
            final_lr=self.final_lr,
            warmup_epochs=self.warmup_epochs,
            text_lr_scale=self.text_lr_scale,
            alpha=self.alpha,
            burn_in_epochs=self.burn_in_epochs,
            fncn=self.fncn and not self.global_mode,
            coteach=self.coteach and not self.global_mode,
            crop=self.crop,
            flip_prob=self.flip_prob,
            noise_std=self.noise_std,
            seed=self.seed,
        )
