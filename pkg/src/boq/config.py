"""Flat key=value run configuration.

One text file drives the whole pipeline: synthetic data generation, model
shape, batch construction, loss constants, optimizer schedule, and
evaluation. Unknown keys are rejected; every key has a default; the
effective configuration (defaults merged with the file) is echoed into each
command's output directory for reproducibility.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Union

from .data import SyntheticPlaceConfig
from .errors import ConfigError
from .model import ModelConfig
from .training import BatchSpec, LRSchedule, MSLossParams


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: '{raw}'")


def _parse_int_tuple(raw: str) -> tuple[int, ...]:
    return tuple(int(p) for p in raw.split(",") if p.strip())


@dataclass
class RunConfig:
    """Every tunable in one flat namespace. See README for key meanings."""

    seed: int = 0

    # synthetic dataset
    num_places: int = 20
    views_per_place: int = 10
    query_views: int = 2
    ref_views: int = 2
    image_size: int = 64
    crop_shift_px: int = 6
    brightness_min: float = 0.6
    brightness_max: float = 1.4
    noise_sigma: float = 0.06
    place_spacing_m: float = 100.0
    view_jitter_m: float = 10.0
    gt_kind: str = "xy"
    frame_threshold: int = 10
    match_threshold_m: float = 25.0

    # model
    input_mode: str = "image"
    stem_channels: tuple[int, ...] = (8, 16, 32)
    feature_dim: int = 0
    model_dim: int = 64
    num_heads: int = 4
    num_blocks: int = 2
    queries_per_block: int = 16
    channel_proj: int = 64
    row_proj: int = 8
    query_self_attention: bool = True
    concat_norm: bool = True

    # batches
    places_per_batch: int = 16
    images_per_place: int = 4

    # loss
    ms_alpha: float = 1.0
    ms_beta: float = 50.0
    ms_threshold: float = 0.5
    ms_margin: float = 0.1

    # optimizer / schedule
    base_lr: float = 0.0002
    warmup_epochs: int = 3
    decay_factor: float = 0.3
    decay_interval_epochs: int = 5
    max_epochs: int = 40
    weight_decay: float = 0.001

    # training loop
    augment: bool = True
    freeze_stem: bool = False
    steps_per_epoch: int = 8

    # evaluation
    eval_ks: tuple[int, ...] = (1, 5, 10)

    # ------------------------------------------------------------------
    def model_config(self) -> ModelConfig:
        return ModelConfig(
            num_blocks=self.num_blocks,
            queries_per_block=self.queries_per_block,
            model_dim=self.model_dim,
            num_heads=self.num_heads,
            channel_proj=self.channel_proj,
            row_proj=self.row_proj,
            input_mode=self.input_mode,
            stem_channels=tuple(self.stem_channels),
            feature_dim=self.feature_dim,
            query_self_attention=self.query_self_attention,
            concat_norm=self.concat_norm,
        )

    def synthetic_config(self) -> SyntheticPlaceConfig:
        return SyntheticPlaceConfig(
            num_places=self.num_places,
            views_per_place=self.views_per_place,
            query_views=self.query_views,
            ref_views=self.ref_views,
            image_size=self.image_size,
            crop_shift_px=self.crop_shift_px,
            brightness_range=(self.brightness_min, self.brightness_max),
            noise_sigma=self.noise_sigma,
            place_spacing_m=self.place_spacing_m,
            view_jitter_m=self.view_jitter_m,
            gt_kind=self.gt_kind,
            frame_threshold=self.frame_threshold,
            match_threshold_m=self.match_threshold_m,
            seed=self.seed,
        )

    def batch_spec(self) -> BatchSpec:
        return BatchSpec(
            places_per_batch=self.places_per_batch,
            images_per_place=self.images_per_place,
            seed=self.seed,
        )

    def loss_params(self) -> MSLossParams:
        return MSLossParams(
            alpha=self.ms_alpha,
            beta=self.ms_beta,
            threshold=self.ms_threshold,
            margin=self.ms_margin,
        )

    def schedule(self) -> LRSchedule:
        return LRSchedule(
            base_lr=self.base_lr,
            warmup_epochs=self.warmup_epochs,
            decay_factor=self.decay_factor,
            decay_interval_epochs=self.decay_interval_epochs,
            max_epochs=self.max_epochs,
        )

    def eval_threshold(self) -> float:
        """Match threshold in the unit of the manifest's ground-truth kind."""
        if self.gt_kind == "frame":
            return float(self.frame_threshold)
        return self.match_threshold_m

    # ------------------------------------------------------------------
    def to_text(self) -> str:
        """Render the effective configuration as a key=value file."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                rendered = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                rendered = "true" if value else "false"
            else:
                rendered = str(value)
            lines.append(f"{f.name}={rendered}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str) -> object:
    ftype = _FIELD_TYPES[key]
    try:
        if ftype == "bool":
            return _parse_bool(raw)
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype.startswith("tuple"):
            return _parse_int_tuple(raw)
        return raw.strip()
    except ValueError as e:
        raise ConfigError(f"bad value for '{key}': {e}") from e


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[dict[str, str]] = None,
) -> RunConfig:
    """Parse a key=value file on top of defaults; reject unknown keys.

    Lines starting with '#' and blank lines are ignored. ``overrides``
    (e.g. a --seed flag) are applied last.
    """
    values: dict[str, object] = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got '{stripped}'")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
            if key in values:
                raise ConfigError(f"{path}:{lineno}: duplicate key '{key}'")
            values[key] = _convert(key, raw)
    for key, raw in (overrides or {}).items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key '{key}'")
        values[key] = _convert(key, str(raw))
    cfg = RunConfig(**values)
    cfg.model_config().validate()
    return cfg
