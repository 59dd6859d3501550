"""Run configuration: INI sections, canonical serialization, content hashing.

A config file is flat key-value text with [data], [train] and [run]
sections.  Parsing normalizes every value (fractions like 8/255 become
decimals) and re-serializes the result in a canonical order; the sha256 of
that canonical text stamps every artifact the run produces, so artifacts
with equal hashes came from identical configs.
"""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, field, fields

from .data import ToySpec
from .training import ALL_VARIANTS, TrainConfig

ENV_DATA_ROOT = "ADVSYNTH_DATA_ROOT"

DATASET_KINDS = ("toy", "cifar10", "cifar100", "file")


class ConfigError(ValueError):
    """Invalid configuration; `problems` lists field-level diagnostics."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


def data_root() -> str:
    return os.environ.get(ENV_DATA_ROOT, ".")


def resolve_data_path(path: str) -> str:
    """Absolute paths pass through; relative ones resolve under the data root."""
    if os.path.isabs(path):
        return path
    return os.path.join(data_root(), path)


def parse_fraction(text: str) -> float:
    """Accepts '8/255' or a plain decimal; returns the float value."""
    s = text.strip()
    if "/" in s:
        num, den = s.split("/", 1)
        d = float(den)
        if d == 0:
            raise ValueError(f"zero denominator in {text!r}")
        return float(num) / d
    return float(s)


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    toy: ToySpec = field(default_factory=ToySpec)
    dataset: str = "toy"
    dataset_path: str = ""  # cifar/file datasets, relative to the data root
    out_dir: str = "runs/default"
    checkpoint_interval: int = 500
    log_interval: int = 10


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _parse_value(raw: str, kind, problems: list[str], where: str):
    try:
        if kind is bool:
            key = raw.strip().lower()
            if key not in _BOOL:
                raise ValueError(f"not a boolean: {raw!r}")
            return _BOOL[key]
        if kind is int:
            return int(raw)
        if kind is float:
            return parse_fraction(raw)
        return raw.strip()
    except ValueError as e:
        problems.append(f"{where}: {e}")
        return None


# section -> (target dataclass attribute on RunConfig or None for top level)
_SECTIONS = {"train": "train", "data": "toy", "run": None}

_RUN_KEYS = {
    "dataset": str,
    "dataset_path": str,
    "out_dir": str,
    "checkpoint_interval": int,
    "log_interval": int,
}


_SCALARS = {"int": int, "float": float, "bool": bool, "str": str}


def _field_types(dc) -> dict:
    # annotations are strings under future-annotations; anything that is not
    # a plain scalar (tuples, optionals) is not settable from a config file
    return {f.name: _SCALARS.get(f.type if isinstance(f.type, str) else f.type.__name__) for f in fields(dc)}


def load_config(path) -> RunConfig:
    """Parses and validates a config file; all problems reported at once."""
    if not os.path.exists(path):
        raise ConfigError([f"config file not found: {path}"])
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read(path)
    except configparser.Error as e:
        raise ConfigError([f"parse error: {e}"])

    problems: list[str] = []
    train_kw = {}
    toy_kw = {}
    run_kw = {}
    train_types = _field_types(TrainConfig)
    toy_types = _field_types(ToySpec)
    for section in cp.sections():
        if section not in _SECTIONS:
            problems.append(f"[{section}]: unknown section (expected {sorted(_SECTIONS)})")
            continue
        for key, raw in cp.items(section):
            where = f"{section}.{key}"
            if section == "train":
                if key not in train_types or train_types[key] is None:
                    problems.append(f"{where}: unknown key")
                    continue
                val = _parse_value(raw, train_types[key], problems, where)
                if val is not None:
                    train_kw[key] = val
            elif section == "data":
                if key not in toy_types or toy_types[key] is None:
                    problems.append(f"{where}: unknown key")
                    continue
                val = _parse_value(raw, toy_types[key], problems, where)
                if val is not None:
                    toy_kw[key] = val
            else:
                if key not in _RUN_KEYS:
                    problems.append(f"{where}: unknown key")
                    continue
                val = _parse_value(raw, _RUN_KEYS[key], problems, where)
                if val is not None:
                    run_kw[key] = val

    if problems:
        raise ConfigError(problems)
    try:
        train = TrainConfig(**train_kw)
    except ValueError as e:
        problems.append(f"train: {e}")
        train = TrainConfig()
    try:
        toy = ToySpec(**toy_kw)
    except ValueError as e:
        problems.append(f"data: {e}")
        toy = ToySpec()
    rc = RunConfig(train=train, toy=toy, **run_kw)
    if rc.dataset not in DATASET_KINDS:
        problems.append(f"run.dataset: must be one of {DATASET_KINDS}, got {rc.dataset!r}")
    if rc.dataset != "toy" and not rc.dataset_path:
        problems.append("run.dataset_path: required for non-toy datasets")
    if rc.checkpoint_interval < 0:
        problems.append("run.checkpoint_interval: must be >= 0")
    if rc.log_interval < 1:
        problems.append("run.log_interval: must be >= 1")
    if rc.train.variant not in ALL_VARIANTS:
        problems.append(f"train.variant: must be one of {ALL_VARIANTS}")
    if problems:
        raise ConfigError(problems)
    return rc


def canonical_text(rc: RunConfig) -> str:
    """Deterministic full serialization; the hashing and diffing form."""
    lines = []
    lines.append("[data]")
    for f in sorted(fields(ToySpec), key=lambda f: f.name):
        lines.append(f"{f.name} = {getattr(rc.toy, f.name)!r}")
    lines.append("[run]")
    for key in sorted(_RUN_KEYS):
        lines.append(f"{key} = {getattr(rc, key)!r}")
    lines.append("[train]")
    skip = {"lr_transitions"}  # resolved at train time from the step count
    for f in sorted(fields(TrainConfig), key=lambda f: f.name):
        if f.name in skip and getattr(rc.train, f.name) is None:
            continue
        lines.append(f"{f.name} = {getattr(rc.train, f.name)!r}")
    return "\n".join(lines) + "\n"


def config_hash(rc: RunConfig) -> str:
    return hashlib.sha256(canonical_text(rc).encode()).hexdigest()[:16]


def write_template(path) -> None:
    """Starter config with every supported key at its default."""
    rc = RunConfig()
    with open(path, "w") as f:
        f.write("# toy dataset parameters\n[data]\n")
        for fl in fields(ToySpec):
            f.write(f"{fl.name} = {getattr(rc.toy, fl.name)}\n")
        f.write("\n# run plumbing; epsilon-style values accept fractions like 8/255\n[run]\n")
        for key in _RUN_KEYS:
            f.write(f"{key} = {getattr(rc, key)}\n")
        f.write("\n[train]\n")
        for fl in fields(TrainConfig):
            if fl.name == "lr_transitions":
                continue
            f.write(f"{fl.name} = {getattr(rc.train, fl.name)}\n")
