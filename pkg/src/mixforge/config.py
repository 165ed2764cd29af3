"""Plain-text ``key=value`` configuration with command-line overrides.

Recognised keys::

    seed, lr, weight_decay, batch_size, epochs, betas, eps, task,
    pos_weight, recrop_each_epoch                  -> TrainConfig
    model.<field>                                  -> ModelConfig
    mix_ratio, snr_set, workers                    -> mixing
    corpus.<split>.<fg_real|fg_fake|bg_real|bg_fake> -> toy corpus sizes
    ablation.seeds, split                          -> ablation / eval
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .mix_engine import SNR_SET
from .model import ModelConfig
from .training import TrainConfig

SPLITS = ("train", "dev", "eval")
CORPUS_KEYS = ("fg_real", "fg_fake", "bg_real", "bg_fake")
DEFAULT_CORPUS = {
    "train": {"fg_real": 50, "fg_fake": 50, "bg_real": 10, "bg_fake": 10},
    "dev": {"fg_real": 12, "fg_fake": 12, "bg_real": 6, "bg_fake": 6},
    "eval": {"fg_real": 25, "fg_fake": 25, "bg_real": 10, "bg_fake": 10},
}


class ConfigError(ValueError):
    pass


@dataclass
class Settings:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    mix_ratio: int = 4
    snr_set: tuple = SNR_SET
    workers: int = 1
    corpus: dict = field(default_factory=lambda: {s: dict(v) for s, v in DEFAULT_CORPUS.items()})
    ablation_seeds: tuple = (0, 1, 2)
    split: str = "eval"
    seed: int = 0


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def parse_overrides(pairs) -> dict:
    out = {}
    for p in pairs or ():
        if "=" not in p:
            raise ConfigError(f"override must be key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce(value, like, key):
    if isinstance(value, str):
        text = value.strip()
    else:
        return value
    try:
        if isinstance(like, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float) or like is None:
            if like is None and text.lower() in ("", "none", "null"):
                return None
            return float(text)
        if isinstance(like, tuple):
            items = [s.strip() for s in text.replace(";", ",").split(",") if s.strip()]
            if like and isinstance(like[0], str):
                return tuple(items)
            if like and isinstance(like[0], float):
                return tuple(float(s) for s in items)
            return tuple(int(s) for s in items)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def build_settings(values: dict) -> Settings:
    """Turn a flat ``key -> str`` mapping into :class:`Settings`; unknown keys raise."""
    s = Settings()
    train_fields = {f.name: getattr(s.train, f.name) for f in fields(TrainConfig)}
    train_fields["pos_weight"] = None
    model_fields = {f.name: getattr(s.model, f.name) for f in fields(ModelConfig)}
    train_kw, model_kw = {}, {}
    seed_given = "seed" in values
    for key, raw in values.items():
        if key == "seed":
            s.seed = _coerce(raw, 0, key)
        elif key in train_fields:
            train_kw[key] = _coerce(raw, train_fields[key], key)
        elif key.startswith("model."):
            name = key[6:]
            if name not in model_fields:
                raise ConfigError(f"unknown config key {key!r}")
            model_kw[name] = _coerce(raw, model_fields[name], key)
        elif key in ("mix_ratio", "workers"):
            setattr(s, key, _coerce(raw, 0, key))
        elif key == "snr_set":
            s.snr_set = _coerce(raw, SNR_SET, key)
        elif key == "split":
            if raw not in SPLITS:
                raise ConfigError(f"split must be one of {SPLITS}")
            s.split = raw
        elif key == "ablation.seeds":
            s.ablation_seeds = _coerce(raw, (0,), key)
        elif key.startswith("corpus."):
            parts = key.split(".")
            if len(parts) != 3 or parts[1] not in SPLITS or parts[2] not in CORPUS_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            s.corpus[parts[1]][parts[2]] = _coerce(raw, 0, key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if seed_given:
        train_kw.setdefault("seed", s.seed)
        model_kw.setdefault("seed", s.seed)
    try:
        s.train = replace(s.train, **train_kw)
        s.model = replace(s.model, **model_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if s.mix_ratio < 1:
        raise ConfigError("mix_ratio must be >= 1")
    return s


def load_settings(config_path=None, overrides=None) -> Settings:
    values = read_config_file(config_path) if config_path else {}
    values.update(overrides or {})
    return build_settings(values)
