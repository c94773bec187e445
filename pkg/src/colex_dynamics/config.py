from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, Union


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 3
    n_iterations: int = 4000
    warmup_fraction: float = 0.5
    target_accept: float = 0.8
    max_tree_depth: int = 10
    max_energy: float = 1000.0
    seed: int = 0
    trees: Optional[tuple[int, ...]] = None
    jobs: int = 1

    def __post_init__(self) -> None:
        if self.n_chains < 1:
            raise ValueError("n_chains must be at least 1")
        if self.n_iterations < 2 or self.n_iterations % 2:
            raise ValueError("n_iterations must be a positive even number")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_tree_depth < 1:
            raise ValueError("max_tree_depth must be at least 1")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")

    @property
    def n_warmup(self) -> int:
        return int(self.n_iterations * self.warmup_fraction)

    @property
    def n_retained(self) -> int:
        return self.n_iterations - self.n_warmup


@dataclass(frozen=True)
class IngestSettings:
    min_colex: int = 5
    min_attested: int = 30
    min_complete: int = 0
    blocklist: Optional[str] = None

    def __post_init__(self) -> None:
        if min(self.min_colex, self.min_attested, self.min_complete) < 0:
            raise ValueError("Ingest thresholds must be non-negative")


DEFAULT_SAMPLER = SamplerConfig()
DESK_SAMPLER = SamplerConfig(n_iterations=1000)
FULL_SCALE = SamplerConfig(n_chains=3, n_iterations=4000)
DEFAULT_INGEST = IngestSettings()


@dataclass(frozen=True)
class RunConfig:
    """Flat run description; every key may come from the JSON file or a CLI flag."""

    command: str = ""
    output: str = "results"
    seed: Optional[int] = None
    jobs: Optional[int] = None
    # fit
    trees: Optional[str] = None
    traits: Optional[str] = None
    predictors: Optional[str] = None
    variant: str = "full"
    standardize: bool = False
    n_chains: int = DESK_SAMPLER.n_chains
    n_iterations: int = DESK_SAMPLER.n_iterations
    warmup_fraction: float = DESK_SAMPLER.warmup_fraction
    target_accept: float = DESK_SAMPLER.target_accept
    max_tree_depth: int = DESK_SAMPLER.max_tree_depth
    tree_indices: Optional[tuple[int, ...]] = None
    # ingest
    wordlist: Optional[str] = None
    associations: Optional[str] = None
    concept_forms: Optional[str] = None
    frequencies: Optional[str] = None
    borrowability: Optional[str] = None
    blocklist: Optional[str] = None
    min_colex: int = DEFAULT_INGEST.min_colex
    min_attested: int = DEFAULT_INGEST.min_attested
    min_complete: int = DEFAULT_INGEST.min_complete
    # compare
    pointwise: tuple[str, ...] = ()
    names: tuple[str, ...] = ()
    # validate
    sizes: tuple[str, ...] = ("SMALL",)
    n_seeds: int = 10
    # negbin
    intercept_only: bool = False
    # summary
    draws: Optional[str] = None
    extra: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "RunConfig":
        with Path(path).open(encoding="utf-8") as handle:
            data = json.load(handle)
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        values = {}
        extra = {}
        for key, value in data.items():
            if key not in known:
                extra[key] = value
            elif isinstance(value, list):
                values[key] = tuple(value)
            else:
                values[key] = value
        return cls(**values, extra=extra)

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        known = {f.name for f in fields(self)}
        chosen = {k: (tuple(v) if isinstance(v, list) else v) for k, v in overrides.items() if k in known and v is not None}
        return replace(self, **chosen)

    @property
    def workers(self) -> int:
        return self.jobs or os.cpu_count() or 1

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(
            n_chains=self.n_chains,
            n_iterations=self.n_iterations,
            warmup_fraction=self.warmup_fraction,
            target_accept=self.target_accept,
            max_tree_depth=self.max_tree_depth,
            seed=self.seed if self.seed is not None else 0,
            trees=self.tree_indices,
            jobs=self.workers,
        )

    def ingest_settings(self) -> IngestSettings:
        return IngestSettings(
            min_colex=self.min_colex,
            min_attested=self.min_attested,
            min_complete=self.min_complete,
            blocklist=self.blocklist,
        )

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data.pop("extra")
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in data.items()}
