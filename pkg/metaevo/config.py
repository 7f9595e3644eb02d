"""Guard configuration and its flat key=value file format."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Dict, Union

__all__ = ["ConfigError", "GuardConfig"]


class ConfigError(RuntimeError):
    """Exception raised for malformed or invalid configuration."""

    pass


def _to_float(text: str) -> float:
    # Accepts fractions such as 1/59.
    return float(Fraction(text))


def _to_int(text: str) -> int:
    value = float(text)
    if value != int(value):
        raise ValueError(f"{text!r} is not an integer")
    return int(value)


def _to_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{text!r} is not a boolean")


_PARSERS: Dict[str, Callable[[str], Any]] = {
    "int": _to_int,
    "float": _to_float,
    "bool": _to_bool,
}

_PROBABILITIES = ("overflow_kill_fraction", "clone_check_probability", "sample_fraction")


def _check(name: str, kind: str, value: Any) -> None:
    if name in _PROBABILITIES:
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {value}")
    elif kind != "bool" and value <= 0:
        raise ValueError(f"{name} must be positive, got {value}")


@dataclass(frozen=True)
class GuardConfig:
    """Selection policy and scheduling parameters of a world.

    Ages and intervals are virtual seconds; budgets and quanta count charged
    micro-ops.
    """

    max_processes: int = 350
    overflow_kill_fraction: float = 0.75
    clone_check_probability: float = 1 / 59
    corpse_age_limit: float = 30.0
    process_age_limit: float = 100.0
    instruction_budget: int = 5_000_000
    quantum: int = 1000
    ms_per_tick: int = 1
    keep_last_process: bool = True
    viability_budget: int = 50_000
    sample_interval: float = 180.0
    sample_fraction: float = 0.1

    def __post_init__(self) -> None:
        types = {f.name: str(f.type) for f in fields(self)}
        for name, kind in types.items():
            try:
                _check(name, kind, getattr(self, name))
            except ValueError as err:
                raise ConfigError(str(err)) from None

    def with_overrides(self, **changes: Any) -> GuardConfig:
        return replace(self, **changes)

    @classmethod
    def from_text(cls, text: str) -> GuardConfig:
        """Parse `key = value` lines; `#` starts a comment.

        Raises
        ------
            ConfigError : on an unknown key, malformed line or invalid value.

        """
        types = {f.name: f.type for f in fields(cls)}
        values: Dict[str, Any] = {}
        for number, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if not sep or not key or not raw:
                raise ConfigError(f"line {number}: expected key = value")
            if key not in types:
                raise ConfigError(f"line {number}: unknown key {key!r}")
            try:
                values[key] = _PARSERS[str(types[key])](raw)
                _check(key, str(types[key]), values[key])
            except (ValueError, ZeroDivisionError) as err:
                raise ConfigError(f"line {number}: {key}: {err}") from None
        return cls(**values)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> GuardConfig:
        try:
            text = Path(path).read_text()
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
        return cls.from_text(text)

    def to_text(self) -> str:
        """Serialise in the format `from_text` reads."""
        return "".join(f"{key} = {value!r}\n" for key, value in asdict(self).items())
