"""Flat ``key = value`` configuration files and command-line overrides.

Every key belongs to exactly one section (training, synthetic data, model
switches or run settings). Unknown keys are rejected. Type and range errors
name the offending key and, for file entries, the line number.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .episodes import SPLITS, SynthSpec
from .errors import ConfigError
from .model import AUX_MODES, AblationMode
from .trainer import TrainConfig

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


@dataclass
class RunSettings:
    """Settings that are neither model, training nor synthetic-data fields."""

    data_seed: int = 0
    features_path: str = ""
    attributes_path: str = ""
    params_path: str = ""
    split: str = "test"
    shots: tuple = (1, 5)

    def validate(self):
        if self.data_seed < 0:
            raise ConfigError("must be >= 0", key="data_seed")
        if self.split not in SPLITS:
            raise ConfigError(f"must be one of {SPLITS}", key="split")
        if not self.shots or any(k < 1 for k in self.shots):
            raise ConfigError("must be a non-empty list of positive ints", key="shots")
        if bool(self.features_path) != bool(self.attributes_path):
            raise ConfigError("features_path and attributes_path go together",
                              key="features_path")
        return self


@dataclass
class ResolvedConfig:
    train: TrainConfig
    synth: SynthSpec
    mode: AblationMode
    run: RunSettings = field(default_factory=RunSettings)

    def to_dict(self) -> dict:
        return {
            "train": self.train.to_dict(),
            "synth": dataclasses.asdict(self.synth),
            "run": {**dataclasses.asdict(self.run), "shots": list(self.run.shots)},
        }


_MODE_KEYS = {"vp": bool, "sp": bool, "rg": bool, "aux": str}


def _schema() -> dict:
    out = {}
    for f in fields(TrainConfig):
        if f.name != "mode":
            out[f.name] = ("train", type(getattr(TrainConfig(), f.name)))
    for f in fields(SynthSpec):
        out[f.name] = ("synth", type(getattr(SynthSpec(), f.name)))
    for k, t in _MODE_KEYS.items():
        out[k] = ("mode", t)
    for f in fields(RunSettings):
        out[f.name] = ("run", type(getattr(RunSettings(), f.name)))
    return out


SCHEMA = _schema()


def _convert(key: str, raw: str, line):
    kind = SCHEMA[key][1]
    text = raw.strip()
    if kind is bool:
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"expected a boolean, got '{text}'", key, line)
    if kind is int:
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"expected an integer, got '{text}'", key, line) from None
    if kind is float:
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"expected a number, got '{text}'", key, line) from None
    if kind is tuple:
        try:
            return tuple(int(v) for v in text.split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"expected comma-separated integers, got '{text}'",
                              key, line) from None
    return text


def _read_file(path) -> list[tuple[str, str, int]]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    entries = []
    for n, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got '{body}'", line=n)
        key, value = (s.strip() for s in body.split("=", 1))
        entries.append((key, value, n))
    return entries


def _parse_override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"override '{text}' is not key=value")
    key, value = (s.strip() for s in text.split("=", 1))
    return key, value


def resolve_config(path=None, overrides=()) -> ResolvedConfig:
    """Merge defaults, file entries and overrides (later wins)."""
    entries = _read_file(path) if path else []
    entries += [(*_parse_override(o), None) for o in overrides]
    values: dict[str, dict] = {"train": {}, "synth": {}, "mode": {}, "run": {}}
    where: dict[str, int | None] = {}
    for key, raw, line in entries:
        if key not in SCHEMA:
            raise ConfigError("unknown key", key, line)
        values[SCHEMA[key][0]][key] = _convert(key, raw, line)
        where[key] = line

    def checked(build):
        try:
            return build()
        except ConfigError as exc:
            if exc.key is not None and exc.line is None and where.get(exc.key):
                raise ConfigError(str(exc).split(": ", 1)[-1], exc.key,
                                  where[exc.key]) from None
            raise

    aux = values["mode"].get("aux", "none")
    if aux not in AUX_MODES:
        raise ConfigError(f"must be one of {AUX_MODES}", "aux", where.get("aux"))
    mode = checked(lambda: AblationMode(**values["mode"]))
    train = checked(lambda: replace(TrainConfig(), mode=mode, **values["train"]).validate())
    synth = replace(SynthSpec(), **values["synth"])
    checked(synth.validate)
    run = checked(lambda: RunSettings(**values["run"]).validate())
    return ResolvedConfig(train, synth, mode, run)


def parse_config(path=None, overrides=()):
    """Return ``(TrainConfig, SynthSpec, AblationMode)``."""
    r = resolve_config(path, overrides)
    return r.train, r.synth, r.mode
