"""Training configuration and the flat key=value config file format.

Config files are plain text: one ``key = value`` pair per line, ``#`` starts
a comment, blank lines ignored. Values are coerced to the declared field
type; unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .data import DatasetConfig
from .errors import ConfigError


@dataclass
class TrainConfig:
    dataset_path: str = ""
    checkpoint_path: str = "model.ckpt"
    log_path: str = ""            # default: checkpoint_path + ".log.jsonl"
    epochs: int = 15
    batch_size: int = 32
    learning_rate: float = 1e-3
    lr_schedule: str = "constant"   # "constant" | "cosine" (decay to 10%)
    weight_decay: float = 0.02
    seed: int = 0
    # loss hyper-parameters
    alpha1: float = 0.5
    alpha2: float = 0.25
    alpha3: float = 0.5
    eta: float = 1.0
    k_fraction: float = 0.1
    tau: float = 0.07
    lam: float = 0.1
    # architecture
    d: int = 32
    d_r: int = 16
    heads: int = 4
    n_pre: int = 1
    # per-term weights on the total objective
    w_fs: float = 1.0
    w_ss: float = 1.0
    w_ci: float = 1.0
    w_bic: float = 1.0
    w_mlc: float = 1.0
    w_bbox: float = 1.0
    w_tok: float = 1.0
    # ablation/diagnostic switches
    double_residual: bool = False
    uniform_masks: bool = False

    def validate(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(
                f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not 0 < self.k_fraction <= 1:
            raise ConfigError("k_fraction must be in (0, 1]")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        for field in ("d", "d_r", "heads", "n_pre"):
            if getattr(self, field) < 0 or (field != "n_pre" and getattr(self, field) < 1):
                raise ConfigError(f"{field} must be positive")
        if self.d % self.heads != 0:
            raise ConfigError("d must be divisible by heads")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()


def _coerce(name, text, typ):
    text = text.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return text
    except ValueError as e:
        raise ConfigError(f"bad value for '{name}': {e}") from e


def parse_kv_file(path):
    """Read a flat key=value file into a {str: str} dict."""
    pairs = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key in pairs:
                raise ConfigError(f"{path}:{lineno}: duplicate key '{key}'")
            pairs[key] = value.strip()
    return pairs


def _build(cls, pairs, validate):
    fields = {f.name: f.type for f in dataclasses.fields(cls)}
    # dataclass field types may be strings under `from __future__ import annotations`
    type_map = {"int": int, "float": float, "bool": bool, "str": str}
    out = {}
    for key, text in pairs.items():
        if key not in fields:
            raise ConfigError(f"unknown config key '{key}' for {cls.__name__}")
        typ = fields[key]
        if isinstance(typ, str):
            typ = type_map.get(typ, str)
        out[key] = _coerce(key, text, typ)
    cfg = cls(**out)
    if validate:
        cfg.validate()
    return cfg


def load_train_config(path):
    return _build(TrainConfig, parse_kv_file(path), validate=True)


def load_dataset_config(path):
    cfg = _build(DatasetConfig, parse_kv_file(path), validate=False)
    cfg.validate()
    return cfg
