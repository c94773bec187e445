"""
Shared fixtures and independent oracles.

Reference trees
---------------
  three_taxa     ((A:1,B:1):0.5,C:1.5);   ultrametric, height 1.5
  four_taxa      ((A:1,B:2):0.5,(C:1,D:1):1);
"""

from __future__ import annotations

import numpy as np
import pytest

from colex_dynamics.tables import PredictorTable, TraitMatrix
from colex_dynamics.trees import PhyloTree, parse_newick, simulate_coalescent

THREE_TAXA = "((A:1,B:1):0.5,C:1.5);"
FOUR_TAXA = "((A:1,B:2):0.5,(C:1,D:1):1);"


def expm_taylor(Q: np.ndarray, t: float, terms: int = 30) -> np.ndarray:
    """Matrix exponential of ``Q t`` by Taylor series with scaling and squaring."""
    A = np.asarray(Q, dtype=float) * t
    norm = np.max(np.sum(np.abs(A), axis=1))
    squarings = max(0, int(np.ceil(np.log2(norm / 0.25)))) if norm > 0 else 0
    A = A / (2.0**squarings)
    result = np.eye(len(A))
    term = np.eye(len(A))
    for k in range(1, terms):
        term = term @ A / k
        result = result + term
    for _ in range(squarings):
        result = result @ result
    return result


def random_tree(rng: np.random.Generator, n_tips: int, min_length: float = 0.01, max_length: float = 2.0) -> PhyloTree:
    """Random binary topology with independent uniform branch lengths."""
    parents = [-1] * n_tips
    labels = [f"x{i}" for i in range(n_tips)]
    lineages = list(range(n_tips))
    while len(lineages) > 1:
        i, j = sorted(rng.choice(len(lineages), size=2, replace=False), reverse=True)
        a, b = lineages.pop(i), lineages.pop(j)
        node = len(parents)
        parents.append(-1)
        labels.append(None)
        parents[a] = parents[b] = node
        lineages.append(node)
    lengths = [0.0 if p == -1 else float(rng.uniform(min_length, max_length)) for p in parents]
    return PhyloTree(parents, lengths, labels)


def scaled(tree: PhyloTree, factor: float) -> PhyloTree:
    parents, lengths, labels = tree.arrays()
    return PhyloTree(parents, [x * factor for x in lengths], labels)


def random_family(rng: np.random.Generator, n_tips: int, n_chars: int, n_predictors: int = 3, missing: float = 0.1):
    """Tree, trait matrix with some missing cells, and a predictor table."""
    tree = random_tree(rng, n_tips, 0.05, 1.0)
    values = rng.integers(0, 2, size=(n_tips, n_chars))
    values[rng.random((n_tips, n_chars)) < missing] = -1
    characters = tuple(f"c{j}" for j in range(n_chars))
    traits = TraitMatrix(tree.tip_labels, characters, values)
    names = ("assoc", "freq", "borrow")[:n_predictors]
    predictors = PredictorTable(characters, names, rng.standard_normal((n_chars, n_predictors)))
    return tree, traits, predictors


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240601)


@pytest.fixture
def three_taxa() -> PhyloTree:
    return parse_newick(THREE_TAXA)


@pytest.fixture
def four_taxa() -> PhyloTree:
    return parse_newick(FOUR_TAXA)


@pytest.fixture
def coalescent_tree() -> PhyloTree:
    return simulate_coalescent(12, seed=7)


def wordlist_fixture(seed: int = 0, n_languages: int = 40, n_pairs: int = 400):
    """Synthetic wordlist where each concept of pair j is attested in a[j] languages
    and the pair is colexified in c[j].

    The first concept covers languages [0, a), the second [shift, shift + a), so
    the two overlap in only a - shift languages. Every form is private to its
    pair, so no other pair is ever colexified. Pair 0 uses the blocklisted
    concept THEY; pair 1 is guaranteed to pass the default thresholds.
    Returns (rows, concepts per pair, a, c).
    """
    rng = np.random.default_rng(seed)
    attested = rng.integers(20, 41, size=n_pairs)
    shift = np.array([rng.integers(0, n_languages - a + 1) for a in attested])
    colexified = np.array([rng.integers(0, min(a - d, 10) + 1) for a, d in zip(attested, shift)])
    attested[0], shift[0], colexified[0] = 35, 0, 8
    attested[1], shift[1], colexified[1] = 40, 0, 10
    concepts = [(f"C{j:03d}A", f"C{j:03d}B") for j in range(n_pairs)]
    concepts[0] = ("THEY", "C000B")
    rows = []
    for lang in range(n_languages):
        code = f"lang{lang:02d}"
        for j, (a, b) in enumerate(concepts):
            start = shift[j]
            if start <= lang < start + colexified[j]:
                rows += [(code, code, a, f"w{j}s"), (code, code, b, f"w{j}s")]
                continue
            if lang < attested[j]:
                rows.append((code, code, a, f"w{j}a"))
            if start <= lang < start + attested[j]:
                rows.append((code, code, b, f"w{j}b"))
    return rows, concepts, attested, colexified


def write_wordlist(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("glottocode,variety,concept_id,form\n")
        for row in rows:
            handle.write(",".join(row) + "\n")


@pytest.fixture
def fixture_wordlist(tmp_path):
    rows, concepts, attested, colexified = wordlist_fixture()
    path = tmp_path / "wordlist.csv"
    write_wordlist(path, rows)
    return path, concepts, attested, colexified
