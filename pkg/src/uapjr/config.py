"""Experiment configuration: flat ``key = value`` files, canonical hashing."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import __version__


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def _parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_kv(path) -> dict:
    """Parse ``key = value`` lines; values are JSON when they parse as JSON, else strings."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = _parse_value(value)
    return out


def write_kv(path, values: dict):
    lines = [f"{k} = {json.dumps(v)}" for k, v in sorted(values.items())]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class ExperimentConfig:
    """Every subcommand parameter, mirrored into one document."""

    command: str = ""
    dataset: str = "mnist"
    data_dir: str | None = None
    checkpoint: str | None = None
    lambda_jr: float = 0.0
    jr_mode: str = "proj"
    n_proj: int = 1
    uat_eps: float | None = None
    epochs: int = 20
    batch_size: int | None = None
    lr: float = 1e-3
    optimizer: str = "adam"
    eps: float = 0.2
    eps_grid: list[float] = field(default_factory=lambda: [0.10, 0.15, 0.20, 0.25, 0.30])
    lambda_grid: list[float] = field(default_factory=lambda: [0.0, 0.01, 0.05, 0.1, 0.5, 1.0])
    iters: int = 100
    step_size: float | None = None
    target: int | None = None
    attack: str = "sgd"
    metric: str = "uer"
    craft_split: str = "train"
    clamp: bool = True
    n_samples: int = 128
    per_class: int = 100
    pair_mode: str = "ordered"
    bin_width: float = 0.02
    seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0])
    threads: int = 1
    out: str | None = None
    runs_dir: str = "runs"
    json: bool = False
    checkpoint_sha256: str | None = None

    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    @classmethod
    def merge(cls, defaults: dict, file_values: dict, cli_values: dict) -> "ExperimentConfig":
        """CLI values (non-None) beat file values, which beat defaults."""
        unknown = set(file_values) - cls.keys()
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        merged = dict(defaults)
        merged.update(file_values)
        merged.update({k: v for k, v in cli_values.items() if v is not None and k in cls.keys()})
        return cls(**merged)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def hash(self) -> str:
        d = self.to_dict()
        # where the run reads and writes does not change its results; a loaded
        # model enters through checkpoint_sha256 instead of its path
        for k in ("out", "threads", "json", "data_dir", "checkpoint", "runs_dir"):
            d.pop(k)
        return config_hash(d)

    def provenance(self) -> dict:
        return {"config_hash": self.hash, "tool_version": __version__}
