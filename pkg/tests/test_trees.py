from __future__ import annotations

import numpy as np
import pytest

from colex_dynamics.trees import (
    NewickError,
    TreeError,
    TreeSample,
    equivalent,
    graft_beside_clade,
    graft_taxon,
    parse_newick,
    prune_to_taxa,
    read_tree_sample,
    sample_split_fraction,
    simulate_coalescent,
    to_newick,
    write_tree_sample,
)

from conftest import FOUR_TAXA, THREE_TAXA


def test_parse_basic_structure(three_taxa):
    assert three_taxa.n_tips == 3
    assert three_taxa.n_nodes == 5
    assert sorted(three_taxa.tip_labels) == ["A", "B", "C"]
    assert three_taxa.is_ultrametric()
    assert three_taxa.height() == pytest.approx(1.5)
    assert three_taxa.path_length("A", "C") == pytest.approx(3.0)


def test_tip_depths(four_taxa):
    assert four_taxa.tip_depths() == pytest.approx({"A": 1.5, "B": 2.5, "C": 2.0, "D": 2.0})
    assert not four_taxa.is_ultrametric()


def test_quoted_labels_and_comments():
    tree = parse_newick("(('Old Norse':1,B[&rate=2]:1)90:0.5,'it''s':1.5);")
    assert set(tree.tip_labels) == {"Old Norse", "B", "it's"}
    reparsed = parse_newick(to_newick(tree))
    assert equivalent(tree, reparsed)


@pytest.mark.parametrize(
    "text",
    [
        "((A:1,B:1):0.5,C:1.5)",
        "((A:1,B:1):0.5,C:1.5;",
        "((A:1,B:-1):0.5,C:1.5);",
        "((A:1,B):0.5,C:1.5);",
        "((A:1,:1):0.5,C:1.5);",
    ],
)
def test_malformed_newick(text):
    with pytest.raises(NewickError):
        parse_newick(text)


def test_duplicate_tip_label():
    with pytest.raises(TreeError):
        parse_newick("((A:1,A:1):0.5,C:1.5);")


def test_equivalent_ignores_child_order():
    a = parse_newick("((A:1,B:2):0.5,(C:1,D:1):1);")
    b = parse_newick("((D:1,C:1):1,(B:2,A:1):0.5);")
    c = parse_newick("((A:1,C:2):0.5,(B:1,D:1):1);")
    assert equivalent(a, b)
    assert not equivalent(a, c)


def test_prune_preserves_path_lengths(four_taxa):
    pruned = prune_to_taxa(four_taxa, ["A", "C", "D"])
    assert sorted(pruned.tip_labels) == ["A", "C", "D"]
    for x, y in [("A", "C"), ("A", "D"), ("C", "D")]:
        assert pruned.path_length(x, y) == pytest.approx(four_taxa.path_length(x, y))
    assert all(len(pruned.children(n)) != 1 for n in pruned.preorder())


def test_prune_errors(four_taxa):
    with pytest.raises(TreeError):
        prune_to_taxa(four_taxa, ["A", "Z"])
    with pytest.raises(TreeError):
        prune_to_taxa(four_taxa, ["A"])


def test_graft_taxon_beside_sibling():
    tree = parse_newick("((A:1,B:1):1,C:2);")
    grafted = graft_taxon(tree, "X", "A", 0.5)
    assert grafted.n_tips == 4
    assert grafted.path_length("X", "A") == pytest.approx(1.0)
    assert grafted.path_length("A", "B") == pytest.approx(2.0)
    assert grafted.is_ultrametric()


def test_graft_beside_clade():
    tree = parse_newick("((A:1,B:1):1,C:2);")
    grafted = graft_beside_clade(tree, "X", ["A", "B"], 0.25)
    assert grafted.path_length("X", "A") == pytest.approx(3.5)
    assert grafted.path_length("X", "C") == pytest.approx(4.0)
    assert grafted.mrca(["A", "B", "X"]) != grafted.mrca(["A", "B"])
    assert grafted.is_ultrametric()


def test_graft_errors(three_taxa):
    with pytest.raises(TreeError):
        graft_taxon(three_taxa, "A", "B")
    with pytest.raises(TreeError):
        graft_taxon(three_taxa, "X", "B", 1.5)
    with pytest.raises(TreeError):
        graft_taxon(three_taxa, "X", "B", 0.0)
    with pytest.raises(TreeError):
        graft_taxon(three_taxa, "X", "B", 1.0)
    with pytest.raises(TreeError):
        graft_beside_clade(three_taxa, "X", ["A", "C"])


def test_sample_split_fraction_in_bounds(rng):
    values = [sample_split_fraction(rng, 0.2, 0.4) for _ in range(100)]
    assert min(values) >= 0.2 and max(values) <= 0.4
    with pytest.raises(TreeError):
        sample_split_fraction(rng, 0.5, 0.2)
    with pytest.raises(TreeError):
        sample_split_fraction(rng, 0.3, 0.3)
    assert all(0.0 < sample_split_fraction(rng) < 1.0 for _ in range(100))


def test_coalescent_shape_and_determinism():
    tree = simulate_coalescent(10, seed=3)
    assert tree.n_tips == 10
    assert set(tree.tip_labels) == {f"t{i}" for i in range(1, 11)}
    assert tree.is_ultrametric()
    assert equivalent(tree, simulate_coalescent(10, seed=3))


def test_coalescent_mean_height():
    rng = np.random.default_rng(11)
    heights = [simulate_coalescent(10, rng=rng).height() for _ in range(400)]
    # Expected time to the most recent common ancestor is 2 (1 - 1/n).
    assert np.mean(heights) == pytest.approx(1.8, abs=0.25)


def test_newick_round_trip_on_coalescent_trees():
    rng = np.random.default_rng(31)
    for _ in range(60):
        tree = simulate_coalescent(int(rng.integers(2, 30)), rng=rng)
        assert equivalent(parse_newick(to_newick(tree)), tree, tol=0.0)


def test_graft_then_prune_restores_tree():
    rng = np.random.default_rng(32)
    for _ in range(60):
        tree = simulate_coalescent(int(rng.integers(3, 20)), rng=rng)
        labels = tree.tip_labels
        sibling = labels[int(rng.integers(len(labels)))]
        grafted = graft_taxon(tree, "new", sibling, sample_split_fraction(rng))
        assert grafted.n_tips == tree.n_tips + 1
        for i, a in enumerate(labels):
            for b in labels[i + 1:]:
                assert grafted.path_length(a, b) == pytest.approx(tree.path_length(a, b), abs=1e-12)
        assert equivalent(prune_to_taxa(grafted, labels), tree, tol=1e-12)


def test_two_taxon_coalescent_height_is_unit_exponential():
    heights = [simulate_coalescent(2, seed=seed).height() for seed in range(1000)]
    assert np.mean(heights) == pytest.approx(1.0, abs=0.1)
    tree = simulate_coalescent(2, seed=0)
    first, second = tree.tips
    assert tree.length(first) == tree.length(second)


def test_sample_io_and_restriction(tmp_path):
    path = tmp_path / "trees.nwk"
    trees = [parse_newick(FOUR_TAXA), parse_newick("((A:2,C:1):0.5,(B:1,D:1):1);")]
    write_tree_sample(trees, path)
    sample = read_tree_sample(path)
    assert len(sample) == 2
    assert sample.taxa == ("A", "B", "C", "D")
    assert equivalent(sample[0], trees[0])

    restricted = sample.restricted_to(["A", "B", "C", "Z"])
    assert restricted.taxa == ("A", "B", "C")
    assert restricted[0].path_length("A", "B") == pytest.approx(3.0)


def test_sample_rejects_mismatched_taxa():
    with pytest.raises(TreeError):
        TreeSample((parse_newick(THREE_TAXA), parse_newick(FOUR_TAXA)))
