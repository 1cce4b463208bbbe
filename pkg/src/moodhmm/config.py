"""Run configuration with a flat ``key = value`` file form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .ingest import DEFAULT_EPOCH_MINUTES, DEFAULT_MISSING_THRESHOLD, InputValidationError
from .regress import DEFAULT_GRID_SIZE, DEFAULT_MIN_RATIO
from .tvhmm import N_STATES


@dataclass(frozen=True)
class RunConfig:
    epoch_minutes: int = DEFAULT_EPOCH_MINUTES
    missing_threshold: float = DEFAULT_MISSING_THRESHOLD
    states: int = N_STATES
    max_iter: int = 100
    tol: float = 1e-6
    restarts: int = 3
    lambda_grid_size: int = DEFAULT_GRID_SIZE
    lambda_min_ratio: float = DEFAULT_MIN_RATIO
    seed: int = 0
    tz_offset_minutes: int = 0
    jobs: int = 1
    mode: str = "loo"
    accel: str = ""
    labels: str = ""
    weeks: str = ""
    models: str = ""
    features: str = ""
    spec: str = ""
    out: str = ""

    def __post_init__(self):
        problems = []
        if self.epoch_minutes <= 0 or 60 % self.epoch_minutes:
            problems.append("epoch_minutes must divide 60")
        if not 0 < self.missing_threshold <= 1:
            problems.append("missing_threshold must lie in (0, 1]")
        if self.states != N_STATES:
            problems.append(f"states is reserved and must be {N_STATES}")
        if self.max_iter < 1:
            problems.append("max_iter must be >= 1")
        if self.tol <= 0:
            problems.append("tol must be > 0")
        if self.restarts < 1:
            problems.append("restarts must be >= 1")
        if self.lambda_grid_size < 1:
            problems.append("lambda_grid_size must be >= 1")
        if not 0 < self.lambda_min_ratio <= 1:
            problems.append("lambda_min_ratio must lie in (0, 1]")
        if self.jobs < 1:
            problems.append("jobs must be >= 1")
        if self.mode not in ("loo", "prospective"):
            problems.append("mode must be 'loo' or 'prospective'")
        if problems:
            raise InputValidationError("invalid config: " + "; ".join(problems))

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        return cls(**parse_text(text, source))

    def updated(self, **overrides) -> "RunConfig":
        return dataclasses.replace(self, **{k: v for k, v in overrides.items() if v is not None})


def _format(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep:
            raise InputValidationError(f"{source}: line {lineno}: expected 'key = value'")
        if key not in _TYPES:
            raise InputValidationError(f"{source}: line {lineno}: unknown key {key!r}")
        kind = _TYPES[key]
        try:
            out[key] = int(value) if kind == "int" else float(value) if kind == "float" else value
        except ValueError:
            raise InputValidationError(f"{source}: line {lineno}: {key} expects {kind}, got {value!r}") from None
    return out


def load_config(path: str | None, **overrides) -> RunConfig:
    """Defaults, then the file, then explicit (non-None) overrides."""
    base = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise InputValidationError(f"config file {path} not found")
        base = parse_text(p.read_text(), str(p))
    base.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**base)
