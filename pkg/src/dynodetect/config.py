"""Flat ``key = value`` configuration parsing and the CLI run configuration.

Config files use one assignment per line; ``#`` starts a comment. CLI flags
override file values, and the effective configuration is echoed into
reports so runs stay reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .core import Params
from .errors import ConfigError

__all__ = ["parse_kv_text", "parse_kv_file", "RunConfig"]


def parse_kv_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ConfigError(f"line {lineno}: empty key or value in {raw!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_kv_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_kv_text(path.read_text(encoding="utf-8"))


_BOOL_TRUE = ("1", "true", "yes", "on")
_BOOL_FALSE = ("0", "false", "no", "off")


@dataclass
class RunConfig:
    """Everything a CLI subcommand needs: detector params plus plumbing."""

    input: str | None = None
    output: str | None = None
    poses: str | None = None
    scene: str | None = None
    N: int = 10
    radius: float = 0.3
    thr: float = 0.25
    voxel: float | None = None
    auto_voxel_divisor: float | None = None
    min_neighbors: int = 5
    min_distinct_frames: int = 2
    time_scale: float = 1.0
    upsample_radius: float = 0.5
    range_limit: float | None = None
    rate: float = 10.0
    seed: int | None = None
    format: str | None = None
    follow: bool = False
    follow_idle_timeout: float = 10.0
    repetitions: int = 1
    per_frame_stamp: bool = False

    @classmethod
    def load(cls, config_path=None, overrides: dict | None = None) -> "RunConfig":
        """Build a config from an optional file plus CLI overrides."""
        cfg = cls()
        if config_path is not None:
            for key, value in parse_kv_file(config_path).items():
                cfg._assign(key, value)
        for key, value in (overrides or {}).items():
            if value is not None:
                setattr(cfg, key, value)
        cfg.validate()
        return cfg

    def _assign(self, key: str, raw: str):
        names = {f.name: f for f in fields(self)}
        if key not in names:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(type(self)(), key)
        try:
            if key in ("follow", "per_frame_stamp"):
                low = raw.lower()
                if low in _BOOL_TRUE:
                    value = True
                elif low in _BOOL_FALSE:
                    value = False
                else:
                    raise ValueError(f"not a boolean: {raw!r}")
            elif key in ("N", "min_neighbors", "min_distinct_frames", "seed",
                         "repetitions"):
                value = int(raw)
            elif key in ("input", "output", "poses", "scene", "format"):
                value = raw
            else:
                value = float(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from exc
        setattr(self, key, value)

    def validate(self):
        if self.voxel is not None and self.auto_voxel_divisor is not None:
            raise ConfigError("set either voxel or auto_voxel_divisor, not both")
        if self.rate <= 0:
            raise ConfigError(f"rate must be > 0, got {self.rate}")
        if self.upsample_radius <= 0:
            raise ConfigError(f"upsample_radius must be > 0, got {self.upsample_radius}")
        if self.range_limit is not None and self.range_limit <= 0:
            raise ConfigError(f"range_limit must be > 0, got {self.range_limit}")
        if self.repetitions < 1:
            raise ConfigError(f"repetitions must be >= 1, got {self.repetitions}")
        try:
            self.params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def params(self) -> Params:
        divisor = self.auto_voxel_divisor
        if self.voxel is None and divisor is None:
            divisor = 600.0
        return Params(
            radius=self.radius,
            threshold=self.thr,
            half_window=self.N,
            voxel_size=self.voxel,
            voxel_divisor=divisor,
            min_neighbors=self.min_neighbors,
            min_distinct_frames=self.min_distinct_frames,
            time_scale=self.time_scale,
        )

    def echo(self) -> dict[str, str]:
        """Effective configuration as strings, for report reproducibility."""
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if value is not None:
                out[f.name] = str(value)
        if self.voxel is None and self.auto_voxel_divisor is None:
            out["auto_voxel_divisor"] = "600.0"
        return out
