"""Run configuration: dotted-key text files, CLI overrides, and snapshots.

The on-disk format is one `key = value` pair per line with nesting through
dotted keys (train.weights.lambda2 = 0.1). It is intentionally diff-friendly:
a snapshot written next to each run re-executes to identical results in
deterministic mode.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError
from .losses import LossWeights
from .training import LossToggles, TrainConfig


@dataclass
class CorpusParams:
    seed: int = 0
    n_source_ids: int = 200
    n_target_train_ids: int = 40
    n_target_test_ids: int = 20
    photos_per_source_id: int = 4
    photos_per_target_id: int = 2
    sketches_per_target_id: int = 1
    image_size: int = 32


@dataclass
class RunConfig:
    corpus: CorpusParams = field(default_factory=CorpusParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    rows: tuple = (1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13)
    seeds: tuple = (0, 1, 2, 3, 4)
    grid: tuple = (0.001, 0.01, 0.1, 1.0, 10.0)
    k_values: tuple = (1, 2, 3, 4, 5, 6, 7, 8)
    repeats: int = 10
    deterministic: bool = True


_NESTED = {CorpusParams, TrainConfig, LossWeights, LossToggles}


def _walk_fields(cls, prefix=""):
    for f in fields(cls):
        if f.type in ("LossWeights", "LossToggles", "TrainConfig", "CorpusParams") or \
                (isinstance(f.type, type) and f.type in _NESTED):
            sub = {"LossWeights": LossWeights, "LossToggles": LossToggles,
                   "TrainConfig": TrainConfig, "CorpusParams": CorpusParams}.get(
                       f.type if isinstance(f.type, str) else f.type.__name__)
            yield from _walk_fields(sub, prefix + f.name + ".")
        else:
            yield prefix + f.name, f


def valid_keys() -> list[str]:
    return sorted(k for k, _ in _walk_fields(RunConfig))


def _coerce(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigurationError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple) or default is None or isinstance(default, (list,)):
        if raw.lower() in ("none", ""):
            return None
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        vals = []
        for p in parts:
            try:
                vals.append(int(p))
            except ValueError:
                vals.append(float(p))
        return tuple(vals)
    return raw


def _get_holder(cfg: RunConfig, dotted: str):
    parts = dotted.split(".")
    obj = cfg
    for p in parts[:-1]:
        obj = getattr(obj, p)
    return obj, parts[-1]


def apply_setting(cfg: RunConfig, key: str, raw_value: str) -> None:
    known = dict(_walk_fields(RunConfig))
    if key not in known:
        raise ConfigurationError(
            f"unknown config key {key!r}; valid keys: {', '.join(valid_keys())}")
    holder, attr = _get_holder(cfg, key)
    current = getattr(holder, attr)
    setattr(holder, attr, _coerce(raw_value, current))


def parse_config_text(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        apply_setting(cfg, key.strip(), value)
    return cfg


def load_config(path=None, overrides=()) -> RunConfig:
    """Config file (optional) overridden by 'key=value' strings."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"config file not found: {p}")
        parse_config_text(p.read_text(encoding="utf-8"), cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        key, _, value = item.partition("=")
        apply_setting(cfg, key.strip(), value)
    return cfg


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def snapshot_config(cfg: RunConfig) -> str:
    lines = []
    for key, _ in sorted(_walk_fields(RunConfig)):
        holder, attr = _get_holder(cfg, key)
        lines.append(f"{key} = {_format_value(getattr(holder, attr))}")
    return "\n".join(lines) + "\n"


def save_snapshot(cfg: RunConfig, path) -> None:
    Path(path).write_text(snapshot_config(cfg), encoding="utf-8")


def configs_equal(a: RunConfig, b: RunConfig) -> bool:
    return dataclasses.asdict(a) == dataclasses.asdict(b)
