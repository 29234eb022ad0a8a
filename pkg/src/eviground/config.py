"""Top-level run configuration: nested per-module configs with JSON
round-trip and partial-override merging."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .cohort import CohortConfig
from .distill import DistillConfig
from .errors import ValidationError
from .grounding import GrounderConfig
from .policy import RftConfig
from .pretrain import PretrainConfig


@dataclass
class RunConfig:
    seed: int = 0
    cohort: CohortConfig = field(default_factory=CohortConfig)
    grounder: GrounderConfig = field(default_factory=GrounderConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    rft: RftConfig = field(default_factory=RftConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    def to_json(self) -> dict:
        d = asdict(self)
        d["cohort"] = self.cohort.to_json()
        return d

    @classmethod
    def from_json(cls, overrides: dict) -> "RunConfig":
        """Build from a possibly partial dict; unknown keys are rejected."""
        cfg = cls()
        sections = {
            "cohort": CohortConfig,
            "grounder": GrounderConfig,
            "distill": DistillConfig,
            "rft": RftConfig,
            "pretrain": PretrainConfig,
        }
        for key, value in overrides.items():
            if key == "seed":
                cfg.seed = int(value)
            elif key in sections:
                base = asdict(getattr(cfg, key))
                unknown = set(value) - set(base)
                if unknown:
                    raise ValidationError(f"unknown keys in {key}: {sorted(unknown)}")
                base.update(value)
                try:
                    setattr(cfg, key, sections[key](**base))
                except TypeError as exc:
                    raise ValidationError(f"bad {key} config: {exc}") from exc
            else:
                raise ValidationError(f"unknown config section {key!r}")
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ValidationError(f"{path}: top level must be an object")
        return cls.from_json(data)
