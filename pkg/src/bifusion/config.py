"""Configuration types and the INI experiment-file loader.

Defaults follow the reference training recipe: 8 attention heads, 5 glimpses,
Adamax at lr 5e-4, batch 32, 40 epochs, orthogonality weight ramping linearly
to 0.5.  Config files are flat INI with one level of sectioning; unknown keys
are rejected so experiment provenance stays reviewable.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

ARCHITECTURES = ("omniban", "coattention", "concat")


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass
class FusionConfig:
    """Architectural hyperparameters shared by all model kinds."""

    arch: str = "omniban"
    d_v: int = 512            # image feature width after projection
    d_q: int = 768            # question token width
    d_m: int = 256            # shared bilinear attention space
    d_hid: int = 512          # raw image feature width fed to the projection
    d_joint: int = 2304       # joint representation width (3x d_q, low-rank pooling style)
    heads: int = 8
    glimpses: int = 5
    coattention_layers: int = 5
    ffn_expansion: int = 4
    classifier_hidden: Optional[int] = None   # None -> 2x classifier input width
    dropout: float = 0.0
    use_intra_attention: bool = True
    answers: int = 8

    def validate(self) -> "FusionConfig":
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown arch {self.arch!r}; expected one of {ARCHITECTURES}")
        for name in ("d_v", "d_q", "d_m", "d_hid", "d_joint", "heads", "glimpses",
                     "ffn_expansion", "answers"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.coattention_layers < 0:
            raise ConfigError("coattention_layers must be >= 0")
        if self.d_v % self.heads or self.d_q % self.heads:
            raise ConfigError(
                f"heads={self.heads} must divide d_v={self.d_v} and d_q={self.d_q}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must be in [0, 1)")
        if self.classifier_hidden is not None and self.classifier_hidden <= 0:
            raise ConfigError("classifier_hidden must be positive")
        return self


@dataclass
class TrainConfig:
    learning_rate: float = 0.0005
    batch_size: int = 32
    epochs: int = 40
    alpha_max: float = 0.5    # orthogonality weight at the final step
    val_fraction: float = 0.1
    checkpoint_every: int = 0  # 0 -> keep only the best-validation checkpoint
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be > 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.alpha_max < 0:
            raise ConfigError("alpha_max must be >= 0")
        if not (0.0 < self.val_fraction < 1.0):
            raise ConfigError("val_fraction must be in (0, 1)")
        return self


@dataclass
class SyntheticTaskSpec:
    """Planted-pair task: the answer is a joint function of one image concept
    and one question concept, so only cross-modal fusion can solve it."""

    image_concepts: int = 4
    question_concepts: int = 4
    answers: int = 8
    noise_sigma: float = 0.1
    image_dim: int = 512
    question_dim: int = 768
    max_question_tokens: int = 20
    min_question_tokens: int = 5
    distractor_pool: int = 32
    n_train: int = 2000
    n_test: int = 500
    seed: int = 0
    rule: Optional[list] = None   # answers[image_concept][question_concept]; None -> generated

    def validate(self) -> "SyntheticTaskSpec":
        for name in ("image_concepts", "question_concepts", "answers", "image_dim",
                     "question_dim", "max_question_tokens", "min_question_tokens",
                     "distractor_pool", "n_train", "n_test"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.min_question_tokens > self.max_question_tokens:
            raise ConfigError("min_question_tokens > max_question_tokens")
        return self


@dataclass
class ExperimentConfig:
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    model: FusionConfig = field(default_factory=FusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: list = field(default_factory=lambda: [0])
    out_dir: str = "runs/out"
    data_dir: str = ""

    def validate(self) -> "ExperimentConfig":
        self.task.validate()
        self.model.validate()
        self.train.validate()
        if not self.seeds:
            raise ConfigError("at least one seed required")
        return self


_SECTIONS = {
    "task": SyntheticTaskSpec,
    "model": FusionConfig,
    "train": TrainConfig,
}

_EXPERIMENT_KEYS = ("seeds", "out_dir", "data_dir")


def _coerce(raw: str, target_type, key: str):
    raw = raw.strip()
    if target_type is bool or target_type == Optional[bool]:
        if raw.lower() in ("true", "yes", "1", "on"):
            return True
        if raw.lower() in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if raw == "" or raw.lower() == "none":
        return None
    try:
        if target_type is int or target_type == Optional[int]:
            return int(raw)
        if target_type is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}")
    return raw


def load_config(path: str) -> ExperimentConfig:
    """Parse an INI experiment file, rejecting unknown sections and keys."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section == "experiment":
            for key, raw in parser.items(section):
                if key not in _EXPERIMENT_KEYS:
                    raise ConfigError(f"unknown key [experiment] {key}")
                if key == "seeds":
                    try:
                        cfg.seeds = [int(s) for s in raw.replace(",", " ").split()]
                    except ValueError:
                        raise ConfigError(f"seeds: cannot parse {raw!r}")
                else:
                    setattr(cfg, key, raw.strip())
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        target = getattr(cfg, section)
        for key, raw in parser.items(section):
            if key not in _FIELD_TYPES[section]:
                raise ConfigError(f"unknown key [{section}] {key}")
            value = _coerce(raw, _FIELD_TYPES[section][key], f"[{section}] {key}")
            if value is None and not _allows_none(section, key):
                raise ConfigError(f"[{section}] {key}: empty value not allowed")
            setattr(target, key, value)
    return cfg.validate()


# dataclass field types are stored as strings under `from __future__
# annotations`; the loader needs concrete types for coercion.
_FIELD_TYPES = {
    "task": {
        "image_concepts": int, "question_concepts": int, "answers": int,
        "noise_sigma": float, "image_dim": int, "question_dim": int,
        "max_question_tokens": int, "min_question_tokens": int,
        "distractor_pool": int, "n_train": int, "n_test": int, "seed": int,
    },
    "model": {
        "arch": str, "d_v": int, "d_q": int, "d_m": int, "d_hid": int,
        "d_joint": int, "heads": int, "glimpses": int,
        "coattention_layers": int, "ffn_expansion": int,
        "classifier_hidden": Optional[int], "dropout": float,
        "use_intra_attention": bool, "answers": int,
    },
    "train": {
        "learning_rate": float, "batch_size": int, "epochs": int,
        "alpha_max": float, "val_fraction": float, "checkpoint_every": int,
        "seed": int,
    },
}


def _allows_none(section: str, key: str) -> bool:
    return (section, key) == ("model", "classifier_hidden")


def config_hash(obj) -> str:
    """Stable short hash of a dataclass (for checkpoint/manifest stamping)."""
    blob = json.dumps(dataclasses.asdict(obj), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def reference_cost_config() -> tuple:
    """The documented configuration used for cost comparisons.

    The published budgets omit the question length, bilinear space width,
    FFN width and answer-vocabulary size; the assumptions filled in here are
    N_q=20 tokens, d_m=256, FFN expansion 4, a 458-answer vocabulary, and a
    768-wide raw image feature ahead of the 512 projection.
    """
    model = FusionConfig(d_hid=768, answers=458).validate()
    return model, 1, 20   # (config, N_v, N_q)
