"""Flat key=value experiment configuration.

The config file is line-oriented: one ``key = value`` per line, ``#``
comments and blank lines ignored.  Unknown keys are rejected so typos fail
loudly.  `ExperimentConfig.to_lines` and `parse_config` round-trip exactly,
which the run manifest relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .optimize import AdamConfig
from .synthetic import SyntheticDriftSpec
from .trainer import ALL_VARIANTS, TrainerConfig

_DECAYS = ("linear_decay", "uniform", "last_only")


@dataclass
class ExperimentConfig:
    # data preparation
    data_path: str = ""
    data_scheme: str = "calendar_day"  # or equal_count
    data_periods: int = 31  # equal_count period count
    data_negatives: str = "sample"  # or explicit
    data_seed: int = 0
    # period split (counts of update periods; one extra shard is eval-only)
    split_pretrain: int = 10
    split_train: int = 10
    split_val: int = 3
    split_test: int = 7
    # base model
    model_embed_dim: int = 4
    model_hidden: tuple[int, ...] = (16, 8)
    model_activation: str = "relu"
    model_pooling: str = "mean"
    base_lr: float = 1e-3
    base_epochs: int = 1
    base_pretrain_epochs: int = 2
    base_batch_size: int = 256
    # meta generator
    meta_lr: float = 1e-2
    meta_epochs: int = 5
    meta_batch_size: int = 256
    meta_hidden: int = 4
    meta_k: int = 3
    meta_decay: str = ""  # empty = variant default
    meta_residual_readout: bool = False
    meta_advance_with: str = "final"
    meta_early_window: str = "protocol"
    # runs
    run_variants: tuple[str, ...] = ("iu", "bu3", "gru_single", "gru_multi")
    run_count: int = 5
    run_seed_base: int = 0
    dataset_name: str = "synthetic"
    # synthetic generator
    synth_users: int = 10_000
    synth_items: int = 1_000
    synth_periods: int = 31
    synth_events: int = 2_500
    synth_rotation: float = 0.03
    synth_drift: float = 0.05
    synth_noise: float = 1.0
    synth_skew: float = 1.2
    synth_affinity: float = 1.5
    synth_clusters: int = 8
    synth_seed: int = 0

    # ------------------------------------------------------------------

    def validate(self) -> None:
        if self.data_scheme not in ("calendar_day", "equal_count"):
            raise ConfigError(f"data.scheme must be calendar_day or equal_count")
        if self.data_negatives not in ("sample", "explicit"):
            raise ConfigError(f"data.negatives must be sample or explicit")
        for name in ("split_pretrain", "split_train", "split_val", "split_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{_KEY_OF[name]} must be >= 1")
        if self.meta_decay and self.meta_decay not in _DECAYS:
            raise ConfigError(f"meta.decay must be one of {_DECAYS}")
        if self.run_count < 1:
            raise ConfigError("run.count must be >= 1")
        for v in self.run_variants:
            parse_variant(v)

    @property
    def n_update_periods(self) -> int:
        return self.split_train + self.split_val + self.split_test

    @property
    def required_periods(self) -> int:
        # the final shard is an evaluation target only, never trained on
        return self.split_pretrain + self.n_update_periods + 1

    def trainer_config(self, variant: str, seed: int) -> TrainerConfig:
        kind, bu_window = parse_variant(variant)
        return TrainerConfig(
            variant=kind,
            k=self.meta_k,
            warmup_periods=self.split_train,
            decay_mode=self.meta_decay or None,
            meta_epochs=self.meta_epochs,
            meta_batch_size=self.meta_batch_size,
            meta_adam=AdamConfig(lr=self.meta_lr),
            meta_hidden=self.meta_hidden,
            residual_readout=self.meta_residual_readout,
            advance_with=self.meta_advance_with,
            early_window=self.meta_early_window,
            bu_window=bu_window,
            seed=seed,
        )

    def synthetic_spec(self) -> SyntheticDriftSpec:
        return SyntheticDriftSpec(
            n_users=self.synth_users,
            n_items=self.synth_items,
            n_periods=self.synth_periods,
            events_per_period=self.synth_events,
            rotation=self.synth_rotation,
            drift=self.synth_drift,
            noise=self.synth_noise,
            popularity_skew=self.synth_skew,
            affinity_scale=self.synth_affinity,
            n_clusters=self.synth_clusters,
            seed=self.synth_seed,
        )

    def to_lines(self) -> list[str]:
        lines = []
        for f in fields(self):
            key = _KEY_OF[f.name]
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return lines


def parse_variant(name: str) -> tuple[str, int]:
    """'bu3'/'bu-3' -> ('bu', 3); other names map to themselves."""
    name = name.strip().lower().replace("-", "_")
    if name.startswith("bu"):
        digits = name[2:].lstrip("_")
        if digits == "":
            return "bu", 1
        if not digits.isdigit():
            raise ConfigError(f"cannot parse batch-update window from variant {name!r}")
        return "bu", int(digits)
    if name not in ALL_VARIANTS:
        raise ConfigError(f"unknown variant {name!r}")
    return name, 1


def variant_label(kind: str, bu_window: int) -> str:
    return f"bu{bu_window}" if kind == "bu" else kind


# key names as they appear in config files, per dataclass field
_KEY_OF = {
    "data_path": "data.path",
    "data_scheme": "data.scheme",
    "data_periods": "data.periods",
    "data_negatives": "data.negatives",
    "data_seed": "data.seed",
    "split_pretrain": "split.pretrain",
    "split_train": "split.train",
    "split_val": "split.val",
    "split_test": "split.test",
    "model_embed_dim": "model.embed_dim",
    "model_hidden": "model.hidden",
    "model_activation": "model.activation",
    "model_pooling": "model.pooling",
    "base_lr": "base.lr",
    "base_epochs": "base.epochs",
    "base_pretrain_epochs": "base.pretrain_epochs",
    "base_batch_size": "base.batch_size",
    "meta_lr": "meta.lr",
    "meta_epochs": "meta.epochs",
    "meta_batch_size": "meta.batch_size",
    "meta_hidden": "meta.hidden",
    "meta_k": "meta.k",
    "meta_decay": "meta.decay",
    "meta_residual_readout": "meta.residual_readout",
    "meta_advance_with": "meta.advance_with",
    "meta_early_window": "meta.early_window",
    "run_variants": "run.variants",
    "run_count": "run.count",
    "run_seed_base": "run.seed_base",
    "dataset_name": "dataset.name",
    "synth_users": "synth.users",
    "synth_items": "synth.items",
    "synth_periods": "synth.periods",
    "synth_events": "synth.events",
    "synth_rotation": "synth.rotation",
    "synth_drift": "synth.drift",
    "synth_noise": "synth.noise",
    "synth_skew": "synth.skew",
    "synth_affinity": "synth.affinity",
    "synth_clusters": "synth.clusters",
    "synth_seed": "synth.seed",
}
_FIELD_OF = {key: name for name, key in _KEY_OF.items()}


def _parse_value(field_name: str, raw: str, template: ExperimentConfig):
    current = getattr(template, field_name)
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{_KEY_OF[field_name]}: expected a boolean, got {raw!r}")
    if isinstance(current, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{_KEY_OF[field_name]}: expected an integer, got {raw!r}") from None
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{_KEY_OF[field_name]}: expected a number, got {raw!r}") from None
    if isinstance(current, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if field_name == "model_hidden":
            try:
                return tuple(int(p) for p in parts)
            except ValueError:
                raise ConfigError(f"model.hidden: expected integers, got {raw!r}") from None
        return tuple(parts)
    return raw


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cfg = ExperimentConfig()
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        field_name = _FIELD_OF.get(key)
        if field_name is None:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        setattr(cfg, field_name, _parse_value(field_name, raw, cfg))
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), source=str(path))
