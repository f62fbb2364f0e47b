"""Run configuration: dataclass tree, JSON files, dot-path overrides.

A run is configured from (in order of precedence) built-in defaults, an
optional JSON config file, then repeated ``--set path.to.field=value``
overrides.  Filesystem locations are deliberately *not* part of the
config: they arrive as CLI arguments, so checkpoints embedding the
config stay byte-identical across working directories.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import DataConfig
from .encoders import EncoderConfig
from .errors import ConfigError


@dataclass
class StageConfig:
    frames: int
    epochs: int
    batch_size: int
    lr: float
    mask_strategy: str
    mask_ratio: float


def default_stages() -> list[StageConfig]:
    # single-frame warm curriculum stage, then the multi-frame stage; the
    # corpus is tiny, so the second stage runs long enough for motion words
    # to bind (retrieval quality still climbs past epoch 150 here)
    return [
        StageConfig(frames=1, epochs=10, batch_size=32, lr=2e-3,
                    mask_strategy="random_per_frame", mask_ratio=0.75),
        StageConfig(frames=4, epochs=220, batch_size=32, lr=1e-3,
                    mask_strategy="block_tube", mask_ratio=0.75),
    ]


@dataclass
class TrainConfig:
    stages: list[StageConfig] = field(default_factory=default_stages)
    seed: int = 0
    tau: float = 0.05
    momentum: float = 0.996
    warmup_epochs: int = 1
    snapshot_mode: str = "prev_epoch_momentum"
    recon_target: str = "aligned_features"   # aligned_features | pixels | none
    mvm_weight: float = 1.0
    mvm_squared: bool = False
    contrastive_reduction: str = "sum"
    grad_clip: float = 1.0


@dataclass
class FinetuneConfig:
    frames: int = 4
    epochs: int = 4
    batch_size: int = 16
    lr: float = 2e-4
    mask_strategy: str = "block_tube"
    mask_ratio: float = 0.75


@dataclass
class EvalConfig:
    split: str = "test"
    recall_at: tuple[int, ...] = (1, 5, 10, 50)
    batch_size: int = 32
    concat_captions: bool = False


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.data.validate(patch_size=self.encoder.patch_size)
        self.encoder.validate()
        grid = self.data.resolution // self.encoder.patch_size
        if grid * grid != self.encoder.patches_per_frame:
            raise ConfigError(
                f"resolution {self.data.resolution} with patch {self.encoder.patch_size} "
                f"gives {grid * grid} patches per frame, config says "
                f"{self.encoder.patches_per_frame}"
            )
        if not self.train.stages:
            raise ConfigError("training needs at least one stage")
        last = 0
        for i, st in enumerate(self.train.stages):
            if st.frames < last:
                raise ConfigError("stage frame counts must be non-decreasing")
            last = st.frames
            if st.frames > self.encoder.max_frames:
                raise ConfigError(
                    f"stage {i} uses {st.frames} frames, encoder max_frames is "
                    f"{self.encoder.max_frames}"
                )
            if st.frames > self.data.frames:
                raise ConfigError(
                    f"stage {i} samples {st.frames} frames but clips store {self.data.frames}"
                )
            if not 0.0 < st.mask_ratio < 1.0:
                raise ConfigError(f"stage {i} mask ratio {st.mask_ratio} outside (0, 1)")
            if st.epochs < 0 or st.batch_size < 1 or st.lr <= 0:
                raise ConfigError(f"stage {i} has invalid epochs/batch/lr")
        if self.train.recon_target not in ("aligned_features", "pixels", "none"):
            raise ConfigError(f"unknown recon_target '{self.train.recon_target}'")
        if self.train.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")


def to_dict(cfg: Any) -> Any:
    if dataclasses.is_dataclass(cfg) and not isinstance(cfg, type):
        return {f.name: to_dict(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}
    if isinstance(cfg, (list, tuple)):
        return [to_dict(v) for v in cfg]
    if isinstance(cfg, Path):
        return str(cfg)
    return cfg


def _from_dict(cls: type, payload: dict) -> Any:
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in payload.items():
        if key not in known:
            raise ConfigError(f"unknown config field '{key}' for {cls.__name__}")
        kwargs[key] = _coerce_field(cls, key, value)
    return cls(**kwargs)


def _coerce_field(cls: type, key: str, value: Any) -> Any:
    if cls is RunConfig:
        nested = {"data": DataConfig, "encoder": EncoderConfig, "train": TrainConfig,
                  "finetune": FinetuneConfig, "eval": EvalConfig}
        if key in nested:
            if not isinstance(value, dict):
                raise ConfigError(f"config section '{key}' must be an object")
            return _from_dict(nested[key], value)
    if cls is TrainConfig and key == "stages":
        if not isinstance(value, list):
            raise ConfigError("train.stages must be a list")
        return [_from_dict(StageConfig, v) for v in value]
    if cls is EvalConfig and key == "recall_at":
        return tuple(int(v) for v in value)
    return value


def load_config(path: Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError("config file must contain a JSON object")
    return _from_dict(RunConfig, payload)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``a.b.c=value`` strings; values parse as JSON, else raw strings."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' must look like path.to.field=value")
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_path(cfg, dotted.split("."), value, item)
    cfg.validate()
    return cfg


def _set_path(node: Any, parts: list[str], value: Any, origin: str) -> None:
    head, rest = parts[0], parts[1:]
    if isinstance(node, list):
        try:
            index = int(head)
            target = node[index]
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"bad list index '{head}' in override '{origin}'") from exc
        if not rest:
            raise ConfigError(f"cannot replace whole list entry in override '{origin}'")
        _set_path(target, rest, value, origin)
        return
    if not dataclasses.is_dataclass(node) or not hasattr(node, head):
        raise ConfigError(f"unknown config path in override '{origin}'")
    if rest:
        _set_path(getattr(node, head), rest, value, origin)
        return
    current = getattr(node, head)
    if isinstance(current, bool) and not isinstance(value, bool):
        raise ConfigError(f"override '{origin}' must be true/false")
    if isinstance(current, (int, float)) and not isinstance(current, bool):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"override '{origin}' must be numeric")
        value = type(current)(value)
    if isinstance(current, tuple):
        value = tuple(value)
    setattr(node, head, value)


def config_from_dict(payload: dict) -> RunConfig:
    return _from_dict(RunConfig, payload)
