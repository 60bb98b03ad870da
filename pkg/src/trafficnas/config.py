"""INI run configuration: ``[section]`` headers with ``key = value`` lines.

Every key is optional; defaults mirror the module defaults. Unknown sections
or keys are rejected. A single ``[run] seed`` feeds the data split, the
search's genome sampling and, through per-candidate derivation, training.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .cost import BASELINE_MINIMA, Thresholds
from .nn import TrainConfig
from .search import SearchConfig
from .space import SpaceBounds


class ConfigError(ValueError):
    pass


def _ints(s):
    return tuple(int(x) for x in s.replace(",", " ").split())


def _floats(s):
    return tuple(float(x) for x in s.replace(",", " ").split())


def _words(s):
    return tuple(s.replace(",", " ").split())


def _opt_int(s):
    return None if s.strip().lower() in ("none", "") else int(s.replace("_", ""))


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


SCHEMA = {
    "run": {"seed": int},
    "paths": {"labelmap": str, "out_dir": str},
    "preprocess": {"keep_ipv6": _bool},
    "split": {"test_frac": float, "val_frac": float},
    "space": {
        "filters": _ints, "kernels": _ints, "strides": _ints, "paddings": _words,
        "pools": _words, "pool_sizes": _ints, "dropouts": _floats, "max_blocks": int,
        "dense_units": _ints, "head_pools": _words, "num_classes": int,
    },
    "thresholds": {"d_th": _opt_int, "r_th": _opt_int, "flops_th": _opt_int},
    "train": {
        "max_epochs": int, "lr0": float, "batch_size": int, "plateau_factor": float,
        "plateau_patience": int, "min_lr": float, "early_stop_patience": int,
        "min_delta": float, "multi_start": int,
    },
    "search": {"generations": int, "population": int, "candidate_retry_cap": int,
               "init_retry_cap": int, "jobs": int},
}

_SPACE_FIELDS = {
    "filters": "filters_choices", "kernels": "kernel_choices", "strides": "stride_choices",
    "paddings": "padding_choices", "pools": "pool_choices", "pool_sizes": "pool_size_choices",
    "dropouts": "dropout_choices", "max_blocks": "max_blocks", "dense_units": "dense_units_choices",
    "head_pools": "head_pool_choices", "num_classes": "num_classes",
}


@dataclass
class RunConfig:
    seed: int = 0
    labelmap: Optional[str] = None
    out_dir: str = "."
    keep_ipv6: bool = True
    test_frac: float = 0.2
    val_frac: float = 0.2
    bounds: SpaceBounds = field(default_factory=SpaceBounds)
    thresholds: Thresholds = BASELINE_MINIMA
    train: TrainConfig = field(default_factory=TrainConfig)
    search: dict = field(default_factory=dict)

    def search_config(self, num_classes: Optional[int] = None) -> SearchConfig:
        bounds = self.bounds if num_classes is None else replace(self.bounds, num_classes=num_classes)
        return SearchConfig(bounds=bounds, thresholds=self.thresholds,
                            train_cfg=replace(self.train, seed=self.seed), seed=self.seed, **self.search)


def parse_config(text: str = "", overrides: Optional[list[str]] = None) -> RunConfig:
    """Build a :class:`RunConfig` from INI text plus ``section.key=value`` overrides."""
    cp = configparser.ConfigParser(delimiters=("=",), inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    for item in overrides or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, name, value.strip())

    values: dict[str, dict] = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp[section].items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                values.setdefault(section, {})[key] = SCHEMA[section][key](raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from None

    cfg = RunConfig()
    try:
        run, paths = values.get("run", {}), values.get("paths", {})
        cfg.seed = run.get("seed", cfg.seed)
        cfg.labelmap = paths.get("labelmap")
        cfg.out_dir = paths.get("out_dir", cfg.out_dir)
        cfg.keep_ipv6 = values.get("preprocess", {}).get("keep_ipv6", True)
        split = values.get("split", {})
        cfg.test_frac = split.get("test_frac", cfg.test_frac)
        cfg.val_frac = split.get("val_frac", cfg.val_frac)
        space = values.get("space", {})
        cfg.bounds = SpaceBounds(**{_SPACE_FIELDS[k]: v for k, v in space.items()})
        if "thresholds" in values:
            base = {"d_th": BASELINE_MINIMA.d_th, "r_th": BASELINE_MINIMA.r_th,
                    "flops_th": BASELINE_MINIMA.flops_th}
            base.update(values["thresholds"])
            cfg.thresholds = Thresholds(**base)
        cfg.train = TrainConfig(**values.get("train", {}))
        cfg.search = dict(values.get("search", {}))
        cfg.search_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path=None, overrides: Optional[list[str]] = None) -> RunConfig:
    text = Path(path).read_text() if path else ""
    return parse_config(text, overrides)
