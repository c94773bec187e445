"""Analysis-ready datasets from wordlists and the predictor resources.

A concept pair is colexified in a language when one form is listed under
both concepts. Cells are missing when either concept is unattested.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from importlib import resources
from itertools import combinations
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .config import DEFAULT_INGEST, IngestSettings
from .tables import MISSING, PredictorTable, TraitMatrix

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
Pair = tuple[str, str]

PAIR_SEPARATOR = "::"


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class WordlistRecord:
    glottocode: str
    variety: str
    concept_id: str
    form: str

    def __post_init__(self) -> None:
        if not (self.glottocode and self.variety and self.concept_id):
            raise IngestError(f"Wordlist record with an empty id: {self}")


@dataclass(frozen=True)
class AssociativityInput:
    """Association scores between forms of one resource language."""

    resource_lang: str
    scores: Mapping[tuple[str, str], float]
    concept_forms: Mapping[str, tuple[str, ...]]

    def score(self, form_a: str, form_b: str) -> float:
        found = [self.scores[key] for key in ((form_a, form_b), (form_b, form_a)) if key in self.scores]
        return float(np.mean(found)) if found else 0.0


@dataclass(frozen=True)
class FrequencyInput:
    resource_lang: str
    counts: Mapping[str, float]
    corpus_size: float
    concept_forms: Mapping[str, tuple[str, ...]]

    def __post_init__(self) -> None:
        if not self.corpus_size > 0:
            raise IngestError(f"{self.resource_lang}: corpus size must be positive")


def pair_id(a: str, b: str) -> str:
    first, second = sorted((a, b))
    return f"{first}{PAIR_SEPARATOR}{second}"


def split_pair_id(value: str) -> Pair:
    parts = value.split(PAIR_SEPARATOR)
    if len(parts) != 2:
        raise IngestError(f"Malformed pair id '{value}'")
    return parts[0], parts[1]


def _require_columns(frame: pd.DataFrame, columns: Sequence[str], path: PathLike) -> None:
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise IngestError(f"{path}: missing columns {missing}")


def read_wordlist(path: PathLike) -> list[WordlistRecord]:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    _require_columns(frame, ("glottocode", "variety", "concept_id", "form"), path)
    frame = frame.apply(lambda col: col.str.strip())
    frame = frame[frame["form"] != ""]
    return [
        WordlistRecord(row.glottocode, row.variety, row.concept_id, row.form)
        for row in frame.itertuples(index=False)
    ]


def read_concept_forms(path: PathLike) -> dict[str, dict[str, tuple[str, ...]]]:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    _require_columns(frame, ("resource_lang", "concept_id", "form"), path)
    forms: dict[str, dict[str, list[str]]] = defaultdict(lambda: defaultdict(list))
    for row in frame.itertuples(index=False):
        bucket = forms[row.resource_lang][row.concept_id]
        if row.form not in bucket:
            bucket.append(row.form)
    return {lang: {c: tuple(f) for c, f in concepts.items()} for lang, concepts in forms.items()}


def read_associations(path: PathLike, concept_forms: Mapping[str, Mapping[str, tuple[str, ...]]]) -> dict[str, AssociativityInput]:
    frame = pd.read_csv(path, dtype={"resource_lang": str, "form_a": str, "form_b": str})
    _require_columns(frame, ("resource_lang", "form_a", "form_b", "score"), path)
    if not np.isfinite(frame["score"]).all() or (frame["score"] < 0).any():
        raise IngestError(f"{path}: association scores must be finite and non-negative")
    out = {}
    for lang, group in frame.groupby("resource_lang", sort=True):
        scores = {(a, b): float(s) for a, b, s in zip(group["form_a"], group["form_b"], group["score"])}
        out[lang] = AssociativityInput(lang, scores, dict(concept_forms.get(lang, {})))
    return out


def read_frequencies(path: PathLike, concept_forms: Mapping[str, Mapping[str, tuple[str, ...]]]) -> dict[str, FrequencyInput]:
    frame = pd.read_csv(path, dtype={"resource_lang": str, "form": str})
    _require_columns(frame, ("resource_lang", "form", "count", "corpus_size"), path)
    if (frame["count"] < 0).any():
        raise IngestError(f"{path}: frequency counts must be non-negative")
    out = {}
    for lang, group in frame.groupby("resource_lang", sort=True):
        sizes = group["corpus_size"].unique()
        if len(sizes) != 1:
            raise IngestError(f"{path}: {lang} lists more than one corpus size")
        counts = group.groupby("form")["count"].sum().to_dict()
        out[lang] = FrequencyInput(lang, counts, float(sizes[0]), dict(concept_forms.get(lang, {})))
    return out


def read_borrowability(path: PathLike) -> dict[str, Optional[float]]:
    frame = pd.read_csv(path, dtype={"concept_id": str})
    _require_columns(frame, ("concept_id", "score"), path)
    scores = {}
    for concept, value in zip(frame["concept_id"], frame["score"]):
        if pd.isna(value):
            scores[concept] = None
            continue
        if not 0.0 <= value <= 1.0:
            raise IngestError(f"{path}: borrowability of {concept} outside [0, 1]")
        scores[concept] = float(value)
    return scores


def _parse_blocklist(text: str) -> frozenset[str]:
    lines = (line.split("#", 1)[0].strip() for line in text.splitlines())
    return frozenset(line.upper() for line in lines if line)


def read_blocklist(path: PathLike) -> frozenset[str]:
    return _parse_blocklist(Path(path).read_text(encoding="utf-8"))


def default_blocklist() -> frozenset[str]:
    text = resources.files("colex_dynamics.assets").joinpath("grammatical_concepts.txt").read_text(encoding="utf-8")
    return _parse_blocklist(text)


class _FormIndex:
    """Forms per (language, variety, concept)."""

    def __init__(self, records: Iterable[WordlistRecord]) -> None:
        self.forms: dict[str, dict[str, dict[str, set[str]]]] = defaultdict(lambda: defaultdict(lambda: defaultdict(set)))
        for rec in records:
            self.forms[rec.glottocode][rec.variety][rec.concept_id].add(rec.form)
        if not self.forms:
            raise IngestError("Empty wordlist")

    @property
    def languages(self) -> list[str]:
        return sorted(self.forms)

    @property
    def concepts(self) -> set[str]:
        return {c for varieties in self.forms.values() for concepts in varieties.values() for c in concepts}

    def attestation(self) -> dict[str, int]:
        """Languages with a form for each concept, in any of their varieties."""
        counts: dict[str, int] = defaultdict(int)
        for varieties in self.forms.values():
            for concept in {c for concepts in varieties.values() for c in concepts}:
                counts[concept] += 1
        return dict(counts)

    def varieties(self) -> Iterable[dict[str, set[str]]]:
        for varieties in self.forms.values():
            yield from varieties.values()


def _cell(concepts: Mapping[str, set[str]], a: str, b: str) -> int:
    if a not in concepts or b not in concepts:
        return MISSING
    return 1 if concepts[a] & concepts[b] else 0


def candidate_pairs(records: Iterable[WordlistRecord], co_attested: bool = False) -> list[Pair]:
    """Concept pairs colexified somewhere, or all co-attested pairs with ``co_attested``."""
    index = records if isinstance(records, _FormIndex) else _FormIndex(records)
    pairs: set[Pair] = set()
    for concepts in index.varieties():
        if co_attested:
            pairs.update(combinations(sorted(concepts), 2))
            continue
        by_form: dict[str, set[str]] = defaultdict(set)
        for concept, forms in concepts.items():
            for form in forms:
                by_form[form].add(concept)
        for shared in by_form.values():
            if len(shared) > 1:
                pairs.update(combinations(sorted(shared), 2))
    return sorted(pairs)


def build_colex_matrix(records: Iterable[WordlistRecord], pairs: Sequence[Pair]) -> TraitMatrix:
    """Languages x concept pairs: 1 when some form is shared, 0 when both
    concepts are attested without a shared form, missing otherwise.

    Varieties of one language are merged, the variety with more attested
    pairs first; later varieties only fill cells that are still missing.
    """
    index = records if isinstance(records, _FormIndex) else _FormIndex(records)
    known = index.concepts
    ordered = sorted({tuple(sorted(p)) for p in pairs})
    unknown = sorted({c for p in ordered for c in p if c not in known})
    if unknown:
        raise IngestError(f"Pairs reference concepts absent from the wordlist: {', '.join(unknown[:5])}")

    rows = []
    for language in index.languages:
        varieties = index.forms[language]
        cells = {
            variety: np.array([_cell(concepts, a, b) for a, b in ordered], dtype=np.int8)
            for variety, concepts in varieties.items()
        }
        # Most complete variety first; its gaps are filled from the others.
        ranked = sorted(cells, key=lambda v: (-int(np.sum(cells[v] != MISSING)), v))
        merged = cells[ranked[0]].copy()
        for variety in ranked[1:]:
            gap = merged == MISSING
            merged[gap] = cells[variety][gap]
        if len(ranked) > 1:
            logger.debug("Merged %d varieties of %s into %s", len(ranked), language, ranked[0])
        rows.append(merged)
    values = np.vstack(rows) if ordered else np.empty((len(rows), 0), dtype=np.int8)
    return TraitMatrix(
        tuple(index.languages), tuple(pair_id(a, b) for a, b in ordered), values, index.attestation()
    )


def filter_pairs(
    matrix: TraitMatrix,
    min_colex: int = DEFAULT_INGEST.min_colex,
    min_attested: int = DEFAULT_INGEST.min_attested,
    blocklist: Iterable[str] = (),
) -> TraitMatrix:
    """Keep pairs colexified in at least ``min_colex`` languages whose concepts are
    each attested in at least ``min_attested`` languages.

    A matrix without per-concept counts (read back from CSV) falls back to the
    languages where the pair cell itself is known.
    """
    if min_colex < 0 or min_attested < 0:
        raise IngestError("Thresholds must be non-negative")
    blocked = {c.upper() for c in blocklist}
    colex = matrix.colexified_counts()
    per_concept = matrix.concept_attestation
    cells = matrix.attested_counts()
    keep = []
    for j, character in enumerate(matrix.characters):
        a, b = split_pair_id(character)
        if per_concept is None:
            attested = int(cells[j])
        else:
            attested = min(per_concept.get(a, 0), per_concept.get(b, 0))
        if colex[j] < min_colex or attested < min_attested:
            continue
        if a.upper() in blocked or b.upper() in blocked:
            continue
        keep.append(character)
    logger.info("Kept %d of %d concept pairs", len(keep), matrix.n_characters)
    return matrix.select_characters(keep)


def filter_languages(matrix: TraitMatrix, min_complete: int) -> TraitMatrix:
    """Drop languages with fewer than ``min_complete`` non-missing pairs."""
    complete = (matrix.values != MISSING).sum(axis=1)
    keep = [taxon for taxon, n in zip(matrix.taxa, complete) if n >= min_complete]
    if len(keep) < matrix.n_taxa:
        logger.info("Dropped %d languages with fewer than %d complete pairs", matrix.n_taxa - len(keep), min_complete)
    return matrix.select_taxa(keep)


def associativity_score(pair: Pair, inputs: Iterable[AssociativityInput]) -> Optional[float]:
    a, b = pair
    means = []
    for resource in inputs:
        forms_a = resource.concept_forms.get(a, ())
        forms_b = resource.concept_forms.get(b, ())
        if not forms_a or not forms_b:
            continue
        means.append(np.mean([resource.score(fa, fb) for fa in forms_a for fb in forms_b]))
    return float(np.mean(means)) if means else None


def zipf(count: float, corpus_size: float) -> float:
    per_million = count * 1e6 / corpus_size
    return math.log10(per_million) + 3.0


def zipf_score(pair: Pair, inputs: Iterable[FrequencyInput]) -> Optional[float]:
    a, b = pair
    scores = []
    for resource in inputs:
        forms = set(resource.concept_forms.get(a, ())) | set(resource.concept_forms.get(b, ()))
        if not forms:
            continue
        total = sum(resource.counts.get(form, 0.0) for form in forms)
        if total <= 0:
            total = 1.0
        scores.append(zipf(total, resource.corpus_size))
    return float(np.mean(scores)) if scores else None


def borrowability_score(pair: Pair, scores: Mapping[str, Optional[float]]) -> Optional[float]:
    present = [scores[c] for c in pair if scores.get(c) is not None]
    return float(np.mean(present)) if present else None


def build_predictors(
    pairs: Sequence[str],
    associations: Optional[Sequence[AssociativityInput]] = None,
    frequencies: Optional[Sequence[FrequencyInput]] = None,
    borrowability: Optional[Mapping[str, Optional[float]]] = None,
) -> tuple[PredictorTable, list[str]]:
    """Predictor rows for pairs with every available score; returns the dropped pair ids too."""
    scorers = []
    if associations is not None:
        scorers.append(("assoc", lambda p: associativity_score(p, associations)))
    if frequencies is not None:
        scorers.append(("freq", lambda p: zipf_score(p, frequencies)))
    if borrowability is not None:
        scorers.append(("borrow", lambda p: borrowability_score(p, borrowability)))
    names = tuple(name for name, _ in scorers)
    kept, rows, dropped = [], [], []
    for pid in pairs:
        pair = split_pair_id(pid)
        values = [fn(pair) for _, fn in scorers]
        if any(v is None for v in values):
            dropped.append(pid)
            continue
        kept.append(pid)
        rows.append(values)
    table = PredictorTable(tuple(kept), names, np.asarray(rows, dtype=float).reshape(len(kept), len(names)))
    if dropped:
        logger.info("Dropped %d pairs lacking a predictor score", len(dropped))
    return table, dropped


@dataclass
class IngestResult:
    traits: TraitMatrix
    predictors: PredictorTable
    manifest: dict = field(default_factory=dict)


def run_pipeline(
    wordlist: PathLike,
    settings: IngestSettings = DEFAULT_INGEST,
    associations: Optional[PathLike] = None,
    concept_forms: Optional[PathLike] = None,
    frequencies: Optional[PathLike] = None,
    borrowability: Optional[PathLike] = None,
) -> IngestResult:
    for path in (wordlist, associations, concept_forms, frequencies, borrowability):
        if path is not None and not Path(path).exists():
            raise FileNotFoundError(path)
    if (associations or frequencies) and concept_forms is None:
        raise IngestError("Association and frequency inputs need a concept-form map")

    blocklist = read_blocklist(settings.blocklist) if settings.blocklist else default_blocklist()
    index = _FormIndex(read_wordlist(wordlist))
    # With min_colex >= 1 only pairs colexified somewhere can survive.
    pairs = candidate_pairs(index, co_attested=settings.min_colex == 0)
    matrix = build_colex_matrix(index, pairs)
    filtered = filter_pairs(matrix, settings.min_colex, settings.min_attested, blocklist)

    forms = read_concept_forms(concept_forms) if concept_forms else {}
    assoc = list(read_associations(associations, forms).values()) if associations else None
    freq = list(read_frequencies(frequencies, forms).values()) if frequencies else None
    borrow = read_borrowability(borrowability) if borrowability else None
    predictors, dropped = build_predictors(filtered.characters, assoc, freq, borrow)

    traits = filter_languages(filtered.select_characters(predictors.characters), settings.min_complete)
    manifest = {
        "thresholds": {
            "min_colex": settings.min_colex,
            "min_attested": settings.min_attested,
            "min_complete": settings.min_complete,
        },
        "blocklist": sorted(blocklist),
        "predictors": list(predictors.names),
        "counts": {
            "languages": matrix.n_taxa,
            "languages_kept": traits.n_taxa,
            "candidate_pairs": matrix.n_characters,
            "pairs_after_filter": filtered.n_characters,
            "pairs_missing_predictors": len(dropped),
            "pairs": traits.n_characters,
        },
    }
    return IngestResult(traits, predictors, manifest)

