"""Experiment configuration: YAML files, named presets and stable hashing.

Resolution order: built-in defaults, then the config file, then the preset
(file ``preset:`` key or ``--preset``), then explicit overrides such as grid
axis values.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .data import FormatDescriptor
from .losses import LossConfig
from .model import ArchConfig
from .negatives import SamplerConfig
from .objectives import ObjectiveConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    path: str = "interactions.csv"
    user_col: str = "user_id"
    item_col: str = "item_id"
    timestamp_col: str = "timestamp"
    timestamp_format: str = "unix_seconds"
    delimiter: str = ","

    def descriptor(self) -> FormatDescriptor:
        return FormatDescriptor(self.user_col, self.item_col, self.timestamp_col,
                                self.timestamp_format, self.delimiter)

    def resolved_path(self, base: Path | None = None) -> Path:
        p = Path(self.path)
        if p.is_absolute():
            return p
        root = os.environ.get("SEQREC_DATA_DIR")
        if root:
            return Path(root) / p
        return (base or Path.cwd()) / p


@dataclass
class SplitConfig:
    user_core: int = 2
    item_core: int = 5
    window_options: list[int] = field(default_factory=lambda: [14, 30, 60])
    target_fraction: float = 0.05
    window_days: int | None = None  # fixed window, skips selection


@dataclass
class EvalConfig:
    k: list[int] = field(default_factory=lambda: [10])
    recall_capped: bool = False
    popular: bool = False
    popular_window_days: int = 7


# Config-file key -> dataclass field name, where they differ.
_RENAMES = {"negatives": {"k": "n_negatives"}, "model": {}, "objective": {}}

_SECTIONS = {
    "dataset": DatasetConfig,
    "split": SplitConfig,
    "model": ArchConfig,
    "objective": ObjectiveConfig,
    "negatives": SamplerConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}

PRESETS: dict[str, dict] = {
    "sasrec_vanilla": {"objective.kind": "shifted_sequence", "model.block_style": "postln_sasrec",
                       "loss.kind": "bce", "negatives.kind": "uniform", "negatives.k": 1,
                       "negatives.logq": False},
    "sasrec_ss": {"objective.kind": "shifted_sequence", "model.block_style": "postln_sasrec",
                  "loss.kind": "sampled_softmax", "negatives.kind": "uniform",
                  "negatives.k": 256, "negatives.logq": False},
    "esasrec": {"objective.kind": "shifted_sequence", "model.block_style": "ligr",
                "loss.kind": "sampled_softmax", "negatives.kind": "uniform",
                "negatives.k": 256, "negatives.logq": False},
    "sasrec_ligr_gbce075": {"objective.kind": "shifted_sequence", "model.block_style": "ligr",
                            "loss.kind": "gbce", "loss.gbce_t": 0.75,
                            "negatives.kind": "uniform", "negatives.k": 256,
                            "negatives.logq": False},
    "esasrec_mixed06": {"objective.kind": "shifted_sequence", "model.block_style": "ligr",
                        "loss.kind": "sampled_softmax", "negatives.kind": "mixed",
                        "negatives.ratio": 0.6, "negatives.k": 256, "negatives.logq": False},
    "esasrec_mixed06_logq": {"objective.kind": "shifted_sequence", "model.block_style": "ligr",
                             "loss.kind": "sampled_softmax", "negatives.kind": "mixed",
                             "negatives.ratio": 0.6, "negatives.k": 256,
                             "negatives.logq": True},
    "esasrec_inbatch": {"objective.kind": "shifted_sequence", "model.block_style": "ligr",
                        "loss.kind": "sampled_softmax", "negatives.kind": "in_batch",
                        "negatives.k": 256, "negatives.logq": False},
    "denseaa_ligr_ss": {"objective.kind": "dense_all_action", "model.block_style": "ligr",
                        "loss.kind": "sampled_softmax", "negatives.kind": "uniform",
                        "negatives.k": 256, "negatives.logq": False},
    "allaction_causal_ligr_ss": {"objective.kind": "all_action", "model.block_style": "ligr",
                                 "loss.kind": "sampled_softmax", "negatives.kind": "uniform",
                                 "negatives.k": 256, "negatives.logq": False},
    "nextaction_causal_ligr_ss": {"objective.kind": "next_action", "model.block_style": "ligr",
                                  "loss.kind": "sampled_softmax", "negatives.kind": "uniform",
                                  "negatives.k": 256, "negatives.logq": False},
    "bert4rec_ligr_ss": {"objective.kind": "mlm", "model.block_style": "ligr",
                         "loss.kind": "sampled_softmax", "negatives.kind": "uniform",
                         "negatives.k": 256, "negatives.logq": False},
    "denseaa_ligr_gbce075": {"objective.kind": "dense_all_action", "model.block_style": "ligr",
                             "loss.kind": "gbce", "loss.gbce_t": 0.75,
                             "negatives.kind": "uniform", "negatives.k": 256,
                             "negatives.logq": False},
}

PRESET_LABELS = {
    "sasrec_vanilla": "SASRec Vanilla, BCE 1 neg",
    "sasrec_ss": "SASRec+SS",
    "esasrec": "SASRec+LiGR+SS (eSASRec)",
    "sasrec_ligr_gbce075": "SASRec+LiGR+gBCE-0.75",
    "esasrec_mixed06": "SASRec+LiGR+SS+Mixed-0.6",
    "esasrec_mixed06_logq": "SASRec+LiGR+SS+Mixed-0.6-LogQ",
    "esasrec_inbatch": "SASRec+LiGR+SS+InBatch",
    "denseaa_ligr_ss": "DenseAA+LiGR+SS",
    "allaction_causal_ligr_ss": "AllAction-Causal+LiGR+SS",
    "nextaction_causal_ligr_ss": "NextAction-Causal+LiGR+SS",
    "bert4rec_ligr_ss": "BERT4Rec+LiGR+SS",
    "denseaa_ligr_gbce075": "DenseAA+LiGR+gBCE-0.75",
}


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig
    split: SplitConfig
    model: ArchConfig
    objective: ObjectiveConfig
    negatives: SamplerConfig
    loss: LossConfig
    train: TrainConfig
    eval: EvalConfig
    preset: str | None = None
    grid: dict[str, list] = field(default_factory=dict)
    base_dir: str | None = None

    def to_dict(self) -> dict:
        """Nested plain dict using config-file key names."""
        out = {}
        for name in _SECTIONS:
            section = asdict(getattr(self, name))
            inverse = {v: k for k, v in _RENAMES.get(name, {}).items()}
            out[name] = {inverse.get(k, k): v for k, v in section.items()}
        out["preset"] = self.preset
        return out

    def hash(self) -> str:
        return stable_hash(self.to_dict())

    def split_hash(self, data_digest: str = "") -> str:
        d = self.to_dict()
        return stable_hash({"dataset": d["dataset"], "split": d["split"], "data": data_digest})

    def label(self) -> str:
        return PRESET_LABELS.get(self.preset or "", self.preset or "custom")


def stable_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _set_dotted(raw: dict, key: str, value) -> None:
    section, _, name = key.partition(".")
    if not name:
        raise ConfigError(f"override key {key!r} must look like 'section.field'")
    raw.setdefault(section, {})
    if raw[section] is None:
        raw[section] = {}
    raw[section][name] = value


def _build_section(name: str, values: dict):
    cls = _SECTIONS[name]
    renames = _RENAMES.get(name, {})
    inverse = {v: k for k, v in renames.items()}
    valid = sorted(inverse.get(f.name, f.name) for f in fields(cls))
    kwargs = {}
    for key, value in (values or {}).items():
        if key not in valid:
            raise ConfigError(f"unknown key {name}.{key} (valid: {', '.join(valid)})")
        kwargs[renames.get(key, key)] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} section: {exc}") from None


def resolve(raw: dict | None = None, preset: str | None = None,
            overrides: dict | None = None, base_dir=None) -> ExperimentConfig:
    raw = copy.deepcopy(raw or {})
    unknown = set(raw) - set(_SECTIONS) - {"preset", "grid"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    preset = preset or raw.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; available: {', '.join(PRESETS)}")
        for key, value in PRESETS[preset].items():
            _set_dotted(raw, key, value)
    for key, value in (overrides or {}).items():
        _set_dotted(raw, key, value)
    objective = _build_section("objective", raw.get("objective"))
    model_raw = dict(raw.get("model") or {})
    model_raw.setdefault("attention_mode", objective.attention_mode)
    if model_raw["attention_mode"] != objective.attention_mode:
        raise ConfigError(f"objective {objective.kind} requires {objective.attention_mode} "
                          f"attention, model sets {model_raw['attention_mode']}")
    grid = raw.get("grid") or {}
    if not isinstance(grid, dict):
        raise ConfigError("grid must map 'section.field' keys to value lists")
    cfg = ExperimentConfig(
        dataset=_build_section("dataset", raw.get("dataset")),
        split=_build_section("split", raw.get("split")),
        model=_build_section("model", model_raw),
        objective=objective,
        negatives=_build_section("negatives", raw.get("negatives")),
        loss=_build_section("loss", raw.get("loss")),
        train=_build_section("train", raw.get("train")),
        eval=_build_section("eval", raw.get("eval")),
        preset=preset,
        grid={k: list(v) for k, v in grid.items()},
        base_dir=str(base_dir) if base_dir is not None else None,
    )
    if cfg.negatives.logq and cfg.loss.kind != "sampled_softmax":
        raise ConfigError("negatives.logq requires loss.kind = sampled_softmax")
    return cfg


def load_raw(path) -> dict:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return raw


def load_config(path, preset: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    return resolve(load_raw(path), preset, overrides, base_dir=Path(path).resolve().parent)
