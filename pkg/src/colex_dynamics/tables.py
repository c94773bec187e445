"""Trait matrices and predictor tables with their CSV formats."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

MISSING = -1
DEFAULT_PREDICTORS = ("assoc", "freq", "borrow")

PathLike = Union[str, Path]


class TableError(ValueError):
    pass


@dataclass(frozen=True)
class TraitMatrix:
    """Taxa x characters, cells coded 0, 1 or -1 (missing).

    ``concept_attestation`` counts, per concept, the taxa with at least one
    form for it. Only matrices built from a wordlist carry it.
    """

    taxa: tuple[str, ...]
    characters: tuple[str, ...]
    values: np.ndarray
    concept_attestation: Optional[Mapping[str, int]] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.int8)
        if values.shape != (len(self.taxa), len(self.characters)):
            raise TableError(
                f"Trait values have shape {values.shape}, expected {(len(self.taxa), len(self.characters))}"
            )
        if not np.isin(values, (0, 1, MISSING)).all():
            raise TableError("Trait cells must be 0, 1 or missing")
        if len(set(self.taxa)) != len(self.taxa):
            raise TableError("Duplicate taxon in trait matrix")
        if len(set(self.characters)) != len(self.characters):
            raise TableError("Duplicate character in trait matrix")
        object.__setattr__(self, "values", values)

    @property
    def n_taxa(self) -> int:
        return len(self.taxa)

    @property
    def n_characters(self) -> int:
        return len(self.characters)

    def column(self, character: str) -> np.ndarray:
        return self.values[:, self.characters.index(character)]

    def rows(self) -> dict[str, np.ndarray]:
        return {taxon: self.values[i] for i, taxon in enumerate(self.taxa)}

    def colexified_counts(self) -> np.ndarray:
        return (self.values == 1).sum(axis=0)

    def attested_counts(self) -> np.ndarray:
        return (self.values != MISSING).sum(axis=0)

    def select_characters(self, characters: Sequence[str]) -> "TraitMatrix":
        index = {c: i for i, c in enumerate(self.characters)}
        missing = [c for c in characters if c not in index]
        if missing:
            raise TableError(f"Unknown characters: {', '.join(missing[:5])}")
        cols = [index[c] for c in characters]
        return TraitMatrix(self.taxa, tuple(characters), self.values[:, cols], self.concept_attestation)

    def select_taxa(self, taxa: Sequence[str]) -> "TraitMatrix":
        index = {t: i for i, t in enumerate(self.taxa)}
        rows = [index[t] for t in taxa]
        # Per-concept counts no longer hold once taxa are dropped.
        return TraitMatrix(tuple(taxa), self.characters, self.values[rows, :])

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values.astype(object), columns=list(self.characters))
        frame = frame.where(frame != MISSING, "NA")
        frame.insert(0, "taxon", list(self.taxa))
        return frame

    def to_csv(self, path: PathLike) -> None:
        self.to_frame().to_csv(path, index=False)


@dataclass(frozen=True)
class Standardization:
    means: tuple[float, ...]
    scales: tuple[float, ...]

    def to_dict(self, names: Sequence[str]) -> dict:
        return {name: {"mean": m, "sd": s} for name, m, s in zip(names, self.means, self.scales)}


@dataclass(frozen=True)
class PredictorTable:
    characters: tuple[str, ...]
    names: tuple[str, ...]
    values: np.ndarray
    standardization: Optional[Standardization] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape != (len(self.characters), len(self.names)):
            raise TableError(
                f"Predictor values have shape {values.shape}, expected {(len(self.characters), len(self.names))}"
            )
        if not np.isfinite(values).all():
            raise TableError("Predictor table contains missing or non-finite cells")
        object.__setattr__(self, "values", values)

    @property
    def n_characters(self) -> int:
        return len(self.characters)

    @property
    def n_predictors(self) -> int:
        return len(self.names)

    def row(self, character: str) -> np.ndarray:
        return self.values[self.characters.index(character)]

    def select(self, characters: Sequence[str]) -> "PredictorTable":
        index = {c: i for i, c in enumerate(self.characters)}
        rows = [index[c] for c in characters]
        return PredictorTable(tuple(characters), self.names, self.values[rows], self.standardization)

    def standardized(self) -> "PredictorTable":
        means = self.values.mean(axis=0)
        scales = self.values.std(axis=0, ddof=1) if self.n_characters > 1 else np.ones(self.n_predictors)
        scales = np.where(scales > 0, scales, 1.0)
        transform = Standardization(tuple(float(m) for m in means), tuple(float(s) for s in scales))
        return PredictorTable(self.characters, self.names, (self.values - means) / scales, transform)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=list(self.names))
        frame.insert(0, "pair_id", list(self.characters))
        return frame

    def to_csv(self, path: PathLike) -> None:
        self.to_frame().to_csv(path, index=False)


def read_trait_matrix(path: PathLike) -> TraitMatrix:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if frame.columns[0] != "taxon":
        raise TableError(f"{path}: first column must be 'taxon'")
    cells = frame.iloc[:, 1:].apply(lambda col: col.str.strip())
    bad = ~cells.isin(["0", "1", "NA", ""])
    if bad.any().any():
        raise TableError(f"{path}: trait cells must be 0, 1 or NA")
    values = cells.replace({"NA": str(MISSING), "": str(MISSING)}).astype(int).to_numpy()
    logger.debug("Read trait matrix %s with shape %s", path, values.shape)
    return TraitMatrix(tuple(frame["taxon"]), tuple(frame.columns[1:]), values)


def read_predictors(path: PathLike, names: Optional[Iterable[str]] = None) -> PredictorTable:
    frame = pd.read_csv(path)
    if frame.columns[0] != "pair_id":
        raise TableError(f"{path}: first column must be 'pair_id'")
    wanted = list(names) if names is not None else [c for c in frame.columns[1:] if c != "count"]
    unknown = [c for c in wanted if c not in frame.columns]
    if unknown:
        raise TableError(f"{path}: missing predictor columns {unknown}")
    if frame[wanted].isna().any().any():
        raise TableError(f"{path}: predictor table has missing cells")
    return PredictorTable(tuple(frame["pair_id"].astype(str)), tuple(wanted), frame[wanted].to_numpy(float))
