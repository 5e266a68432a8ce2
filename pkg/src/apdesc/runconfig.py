"""Flat key = value run configuration shared by the command line tools.

A config file holds dotted keys, one per line; unknown keys are
rejected by name so typos fail fast. Every key has a default, and the
full resolved mapping is echoed into training artifacts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .aploss import BinningConfig, EUCLIDEAN, HAMMING
from .data import (
    PatchDataset,
    SyntheticConfig,
    generate_synthetic,
    load_dataset,
    load_hpatches,
    load_ubc,
    split_by_sequence,
)
from .errors import ConfigError
from .mining import MiningConfig
from .models import DescriptorModel, ModelConfig, TANH_HEAD
from .stn import STConfig, SpatialTransformerModel
from .train import BatchSpec, LinearToZero, SGDConfig, StepDecay


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_lr(s: str) -> float | None:
    return None if s.lower() == "auto" else float(s)


_SCHEMA: dict[str, tuple[object, callable]] = {
    "data.source": ("synthetic", str),
    "data.path": ("", str),
    "data.val_sequences": (1, int),
    "data.split_seed": (0, int),
    "synthetic.sequences": (4, int),
    "synthetic.groups_per_sequence": (16, int),
    "synthetic.group_size": (4, int),
    "synthetic.patch_size": (32, int),
    "synthetic.warp": (0.03, float),
    "synthetic.lighting": (0.35, float),
    "synthetic.sequence_similarity": (0.5, float),
    "synthetic.seed": (0, int),
    "model.arch": ("linear", str),
    "model.dim": (16, int),
    "model.head": ("unit", str),
    "model.hidden": (128, int),
    "model.seed": (0, int),
    "st.enabled": (False, _parse_bool),
    "st.input_size": (42, int),
    "st.theta_lr_scale": (0.01, float),
    "loss.bins": (25, int),
    "batch.mode": ("uniform", str),
    "batch.size": (64, int),
    "batch.per_epoch": (1000, int),
    "sgd.lr0": (None, _parse_lr),
    "sgd.schedule": ("linear", str),
    "sgd.epochs": (30, int),
    "sgd.step_every": (10, int),
    "sgd.step_divide": (10.0, float),
    "sgd.momentum": (0.9, float),
    "sgd.weight_decay": (1e-4, float),
    "sgd.seed": (0, int),
    "augment.enabled": (True, _parse_bool),
    "mining.enabled": (False, _parse_bool),
    "mining.clusters": (100, int),
    "mining.percentile": (20.0, float),
    "mining.seed": (0, int),
    "eval.distractors": ("all", str),
    "eval.pairs_per_class": (500, int),
    "eval.seed": (0, int),
}


@dataclass
class RunConfig:
    """Resolved configuration: every schema key has a value."""

    values: dict = field(default_factory=dict)

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({k: v for k, (v, _) in _SCHEMA.items()})

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        cfg = cls.defaults()
        for ln, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"line {ln}: expected 'key = value', got {raw!r}")
            key = key.strip()
            value = value.strip()
            if key not in _SCHEMA:
                raise ConfigError(f"line {ln}: unknown key {key!r}")
            _, convert = _SCHEMA[key]
            try:
                cfg.values[key] = convert(value)
            except ValueError as exc:
                raise ConfigError(f"line {ln}: bad value for {key}: {exc}") from exc
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        return cls.parse(p.read_text())

    def __getitem__(self, key: str):
        return self.values[key]

    def echo(self) -> dict:
        """All keys with their resolved values, for artifact headers."""
        out = {}
        for key in sorted(self.values):
            v = self.values[key]
            out[key] = "auto" if v is None else v
        return out


def build_datasets(cfg: RunConfig) -> tuple[PatchDataset, PatchDataset | None]:
    """The training and held-out datasets the config describes."""
    source = cfg["data.source"]
    if source == "synthetic":
        full = generate_synthetic(
            SyntheticConfig(
                sequences=cfg["synthetic.sequences"],
                groups_per_sequence=cfg["synthetic.groups_per_sequence"],
                group_size=cfg["synthetic.group_size"],
                patch_size=cfg["synthetic.patch_size"],
                warp=cfg["synthetic.warp"],
                lighting=cfg["synthetic.lighting"],
                sequence_similarity=cfg["synthetic.sequence_similarity"],
                seed=cfg["synthetic.seed"],
            )
        )
    elif source == "ubc":
        full = load_ubc(cfg["data.path"])
    elif source == "hpatches":
        full = load_hpatches(cfg["data.path"])
    elif source == "container":
        full = load_dataset(cfg["data.path"])
    else:
        raise ConfigError(f"unknown data.source {source!r}")
    n_val = cfg["data.val_sequences"]
    n_seq = len(set(full.sequence_ids.tolist()))
    if n_val <= 0 or n_seq < 2:
        return full, None
    if n_val >= n_seq:
        raise ConfigError("data.val_sequences must leave at least one training sequence")
    return split_by_sequence(full, n_val, cfg["data.split_seed"])


def build_model(cfg: RunConfig):
    try:
        desc = ModelConfig(
            arch=cfg["model.arch"],
            dim=cfg["model.dim"],
            head=cfg["model.head"],
            input_size=32,
            hidden=cfg["model.hidden"],
            seed=cfg["model.seed"],
        )
        if cfg["st.enabled"]:
            st = STConfig(
                input_size=cfg["st.input_size"],
                output_size=32,
                theta_lr_scale=cfg["st.theta_lr_scale"],
            )
            return SpatialTransformerModel.create(desc, st)
        return DescriptorModel.create(desc)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_bins(cfg: RunConfig) -> BinningConfig:
    head = cfg["model.head"]
    if head == TANH_HEAD:
        return BinningConfig(bins=cfg["model.dim"], kind=HAMMING, code_length=cfg["model.dim"])
    try:
        return BinningConfig(bins=cfg["loss.bins"], kind=EUCLIDEAN)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_sgd(cfg: RunConfig) -> SGDConfig:
    name = cfg["sgd.schedule"]
    if name == "linear":
        schedule = LinearToZero(cfg["sgd.epochs"])
    elif name == "step":
        schedule = StepDecay(
            divide_by=cfg["sgd.step_divide"],
            every=cfg["sgd.step_every"],
            total_epochs=cfg["sgd.epochs"],
        )
    else:
        raise ConfigError(f"unknown sgd.schedule {name!r}")
    return SGDConfig(
        schedule=schedule,
        lr0=cfg["sgd.lr0"],
        momentum=cfg["sgd.momentum"],
        weight_decay=cfg["sgd.weight_decay"],
        seed=cfg["sgd.seed"],
    )


def build_batch_spec(cfg: RunConfig) -> BatchSpec:
    return BatchSpec(
        mode=cfg["batch.mode"],
        size=cfg["batch.size"],
        batches_per_epoch=cfg["batch.per_epoch"],
    )


def build_mining(cfg: RunConfig) -> MiningConfig:
    try:
        return MiningConfig(
            clusters=cfg["mining.clusters"],
            percentile=cfg["mining.percentile"],
            seed=cfg["mining.seed"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
