"""Run configuration: schema, presets, flat key/value file format and hashing.

Config files hold one ``key = value`` pair per line. Values are JSON
literals (numbers, ``true``/``false``, lists, quoted strings); bare words are
read as strings. ``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .datasets import ClassSplit, LabeledDataset, SyntheticSpec, generate_gaussian_mixture, load_delimited, split_classes


class ConfigError(ValueError):
    """Invalid configuration key or value."""


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "fewshot"
    # data
    data_path: str = ""
    delimiter: str = ","
    n_classes: int = 40
    dim: int = 8
    samples_per_class: int = 100
    center_scale: float = 1.0
    within_std: float = 0.5
    data_seed: int = 0
    split: tuple = (0.5, 0.1, 0.4)
    split_seed: int = 0
    allow_empty_split: bool = False
    # episodes
    way: int = 5
    shot: int = 1
    query_per_class: int = 15
    open_way: int = 5
    open_query_per_class: int = 15
    batch_per_class: int = 8
    holdout_fraction: float = 0.2
    # model
    head: str = "mahalanobis"
    hidden: tuple = (64, 64)
    embed_dim: int = 16
    # objective and optimizer
    lam: float = 0.5
    reduction: str = "mean"
    base_lr: float = 1e-3
    lr_factor: float = 0.1
    milestones: tuple = (1000, 1500)
    total_episodes: int = 2000
    grad_clip: float = 0.0
    # evaluation (None: same as training)
    eval_episodes: int = 600
    eval_way: int | None = None
    eval_shot: int | None = None
    eval_open_way: int | None = None
    eval_open_query_per_class: int | None = None
    # run
    base_seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 1000
    out_dir: str = ""

    def __post_init__(self):
        for name in ("split", "hidden", "milestones"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.mode not in ("fewshot", "largescale"):
            raise ConfigError(f"mode: expected fewshot or largescale, got {self.mode!r}")
        if self.head not in ("euclidean", "mahalanobis"):
            raise ConfigError(f"head: expected euclidean or mahalanobis, got {self.head!r}")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError(f"reduction: expected mean or sum, got {self.reduction!r}")
        if len(self.split) != 3:
            raise ConfigError("split: expected three fractions (train, val, test)")
        if self.lam < 0:
            raise ConfigError("lam: must be >= 0")
        if self.way < 2 or self.shot < 1 or self.query_per_class < 1 or self.open_way < 0:
            raise ConfigError("episode sizes: need way >= 2, shot >= 1, query_per_class >= 1, open_way >= 0")
        if self.mode == "largescale" and self.open_way < 1:
            raise ConfigError("open_way: large-scale mode needs at least one unseen class per episode")
        if self.total_episodes < 0 or self.eval_episodes < 1:
            raise ConfigError("total_episodes must be >= 0 and eval_episodes >= 1")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError("milestones: must be strictly increasing")
        if not 0 < self.lr_factor < 1:
            raise ConfigError("lr_factor: must lie in (0, 1)")
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigError("holdout_fraction: must lie in [0, 1)")

    # evaluation episode shape with fallbacks to the training shape
    @property
    def resolved_eval(self) -> dict:
        return {
            "way": self.eval_way if self.eval_way is not None else self.way,
            "shot": self.eval_shot if self.eval_shot is not None else self.shot,
            "query_per_class": self.query_per_class,
            "open_way": self.eval_open_way if self.eval_open_way is not None else self.open_way,
            "open_query_per_class": (
                self.eval_open_query_per_class
                if self.eval_open_query_per_class is not None
                else self.open_query_per_class
            ),
        }

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def replace(self, **changes) -> "TrainConfig":
        unknown = set(changes) - FIELD_NAMES
        if unknown:
            raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
        return dataclasses.replace(self, **changes)

    def training_dict(self) -> dict:
        """Fields that influence the trained model (evaluation-only keys dropped)."""
        d = self.to_dict()
        for k in list(d):
            if k.startswith("eval_") or k in ("out_dir", "log_every", "checkpoint_every"):
                del d[k]
        return d

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def training_hash(self) -> str:
        blob = json.dumps(self.training_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


FIELD_NAMES = frozenset(f.name for f in fields(TrainConfig))

PRESETS: dict[str, dict] = {
    "desk": {},
    "paper-fewshot": {
        "mode": "fewshot",
        "way": 5,
        "shot": 1,
        "open_way": 5,
        "lam": 0.5,
        "base_lr": 1e-3,
        "lr_factor": 0.1,
        "milestones": (10000, 20000),
        "total_episodes": 30000,
        "eval_episodes": 600,
        "checkpoint_every": 5000,
    },
    "paper-largescale": {
        "mode": "largescale",
        "n_classes": 10,
        "split": (0.6, 0.0, 0.4),
        "allow_empty_split": True,
        "open_way": 2,
        "eval_open_way": 4,
        "lam": 0.5,
        "base_lr": 1e-3,
        "lr_factor": 0.1,
        "milestones": (6000, 8000),
        "total_episodes": 10000,
        "checkpoint_every": 2000,
    },
}


def from_preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    values = {**PRESETS[name], **overrides}
    unknown = set(values) - FIELD_NAMES
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
    try:
        return TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _parse_value(raw: str):
    raw = raw.strip()
    if raw in ("null", "none", "None", ""):
        return None
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in FIELD_NAMES and key != "preset":
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _parse_value(raw)
    return values


def _coerce(values: dict) -> dict:
    types = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    for k, v in values.items():
        if k not in types:
            raise ConfigError(f"unknown config key {k!r}")
        t = str(types[k])
        if v is None or "None" in t:
            out[k] = v
        elif t == "int" and isinstance(v, (int, float)) and not isinstance(v, bool) and float(v).is_integer():
            out[k] = int(v)
        elif t == "float" and isinstance(v, (int, float)) and not isinstance(v, bool):
            out[k] = float(v)
        elif t == "bool" and isinstance(v, bool):
            out[k] = v
        elif t == "str":
            out[k] = str(v)
        elif t == "tuple" and isinstance(v, list):
            out[k] = tuple(v)
        else:
            raise ConfigError(f"{k}: value {v!r} does not match type {t}")
    return out


def load_config(path: str | Path | None = None, preset: str | None = None, **overrides) -> TrainConfig:
    """Resolve preset, then file values, then explicit overrides."""
    values = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    name = preset or values.pop("preset", None) or "desk"
    values.pop("preset", None)
    merged = _coerce({**values, **{k: v for k, v in overrides.items() if v is not None}})
    return from_preset(name, **merged)


def dump_config(config: TrainConfig) -> str:
    lines = [f"# config hash {config.content_hash()}"]
    for k, v in config.to_dict().items():
        lines.append(f"{k} = {json.dumps(v)}")
    return "\n".join(lines) + "\n"


def build_dataset(config: TrainConfig) -> LabeledDataset:
    if config.data_path:
        delim = "\t" if config.delimiter in ("tab", "\\t") else config.delimiter
        return load_delimited(config.data_path, delim)
    return generate_gaussian_mixture(
        SyntheticSpec(
            n_classes=config.n_classes,
            dim=config.dim,
            samples_per_class=config.samples_per_class,
            center_scale=config.center_scale,
            within_std=config.within_std,
            seed=config.data_seed,
        )
    )


def build_split(config: TrainConfig, dataset: LabeledDataset) -> ClassSplit:
    return split_classes(dataset, config.split, config.split_seed, allow_empty=config.allow_empty_split)
