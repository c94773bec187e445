"""Rooted phylogenetic trees: Newick I/O, grafting, pruning and coalescent simulation."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

_NUMBER = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_PLAIN_LABEL = re.compile(r"^[^\s(),:;\[\]']+$")
_LABEL_STOP = set("(),:;[") | {" ", "\t", "\n", "\r"}


class TreeError(ValueError):
    pass


class NewickError(TreeError):
    def __init__(self, message: str, position: int) -> None:
        super().__init__(f"{message} at position {position}")
        self.position = position


class PhyloTree:
    """Immutable rooted tree stored as parent links over integer node ids.

    Tips are the nodes without children and must carry unique labels.
    Internal nodes may be labelled (support values, clade names) or not.
    """

    __slots__ = ("_parents", "_lengths", "_labels", "_children", "_root", "_preorder", "_tips")

    def __init__(
        self,
        parents: Sequence[int],
        lengths: Sequence[float],
        labels: Sequence[Optional[str]],
    ) -> None:
        n = len(parents)
        if n == 0:
            raise TreeError("Tree has no nodes")
        if len(lengths) != n or len(labels) != n:
            raise TreeError("parents, lengths and labels differ in size")
        self._parents = tuple(int(p) for p in parents)
        self._lengths = tuple(float(x) for x in lengths)
        self._labels = tuple(label if label else None for label in labels)

        roots = [i for i, p in enumerate(self._parents) if p == -1]
        if len(roots) != 1:
            raise TreeError(f"Tree needs exactly one root, found {len(roots)}")
        self._root = roots[0]

        children: list[list[int]] = [[] for _ in range(n)]
        for node, parent in enumerate(self._parents):
            if parent == -1:
                continue
            if not 0 <= parent < n or parent == node:
                raise TreeError(f"Node {node} has an invalid parent {parent}")
            children[parent].append(node)
        self._children = tuple(tuple(kids) for kids in children)

        for node, length in enumerate(self._lengths):
            if not math.isfinite(length) or length < 0:
                raise TreeError(f"Negative or non-finite branch length {length} on node {node}")

        preorder: list[int] = []
        stack = [self._root]
        while stack:
            node = stack.pop()
            preorder.append(node)
            stack.extend(reversed(self._children[node]))
        if len(preorder) != n:
            raise TreeError("Tree contains a cycle or unreachable nodes")
        self._preorder = tuple(preorder)

        tips = tuple(i for i in self._preorder if not self._children[i])
        seen: set[str] = set()
        for tip in tips:
            label = self._labels[tip]
            if label is None:
                raise TreeError(f"Tip node {tip} has no label")
            if label in seen:
                raise TreeError(f"Duplicate tip label '{label}'")
            seen.add(label)
        self._tips = tips

    @property
    def n_nodes(self) -> int:
        return len(self._parents)

    @property
    def root(self) -> int:
        return self._root

    @property
    def tips(self) -> tuple[int, ...]:
        return self._tips

    @property
    def tip_labels(self) -> tuple[str, ...]:
        return tuple(self._labels[i] for i in self._tips)  # type: ignore[misc]

    @property
    def n_tips(self) -> int:
        return len(self._tips)

    def parent(self, node: int) -> int:
        return self._parents[node]

    def children(self, node: int) -> tuple[int, ...]:
        return self._children[node]

    def length(self, node: int) -> float:
        return self._lengths[node]

    def label(self, node: int) -> Optional[str]:
        return self._labels[node]

    def is_tip(self, node: int) -> bool:
        return not self._children[node]

    def arrays(self) -> tuple[list[int], list[float], list[Optional[str]]]:
        return list(self._parents), list(self._lengths), list(self._labels)

    def preorder(self) -> tuple[int, ...]:
        return self._preorder

    def postorder(self) -> tuple[int, ...]:
        # Reversed preorder visits every child before its parent.
        return self._preorder[::-1]

    def find(self, label: str) -> int:
        for tip in self._tips:
            if self._labels[tip] == label:
                return tip
        raise TreeError(f"Unknown taxon '{label}'")

    def depths(self) -> list[float]:
        depth = [0.0] * self.n_nodes
        for node in self._preorder:
            parent = self._parents[node]
            if parent != -1:
                depth[node] = depth[parent] + self._lengths[node]
        return depth

    def tip_depths(self) -> dict[str, float]:
        depth = self.depths()
        return {self._labels[t]: depth[t] for t in self._tips}  # type: ignore[misc]

    def height(self) -> float:
        return max(self.tip_depths().values())

    def is_ultrametric(self, tol: float = 1e-9) -> bool:
        values = list(self.tip_depths().values())
        return max(values) - min(values) < tol

    def ancestors(self, node: int) -> Iterator[int]:
        while node != -1:
            yield node
            node = self._parents[node]

    def mrca(self, labels: Iterable[str]) -> int:
        nodes = [self.find(label) for label in labels]
        if not nodes:
            raise TreeError("mrca needs at least one taxon")
        common = list(self.ancestors(nodes[0]))
        shared = set(common)
        for node in nodes[1:]:
            shared &= set(self.ancestors(node))
        for node in common:
            if node in shared:
                return node
        return self._root

    def path_length(self, a: str, b: str) -> float:
        depth = self.depths()
        na, nb = self.find(a), self.find(b)
        join = self.mrca([a, b])
        return depth[na] + depth[nb] - 2.0 * depth[join]

    def descendant_tips(self, node: int) -> list[int]:
        found: list[int] = []
        stack = [node]
        while stack:
            current = stack.pop()
            if self._children[current]:
                stack.extend(self._children[current])
            else:
                found.append(current)
        return found

    def __repr__(self) -> str:
        return f"PhyloTree(n_tips={self.n_tips}, n_nodes={self.n_nodes})"


@dataclass(frozen=True)
class TreeSample:
    trees: tuple[PhyloTree, ...]
    source: str = ""

    def __post_init__(self) -> None:
        if not self.trees:
            raise TreeError("Tree sample is empty")
        reference = set(self.trees[0].tip_labels)
        for index, tree in enumerate(self.trees[1:], start=1):
            if set(tree.tip_labels) != reference:
                raise TreeError(f"Tree {index} in {self.source or 'sample'} has a different taxon set")

    @property
    def taxa(self) -> tuple[str, ...]:
        return tuple(sorted(self.trees[0].tip_labels))

    def __len__(self) -> int:
        return len(self.trees)

    def __iter__(self) -> Iterator[PhyloTree]:
        return iter(self.trees)

    def __getitem__(self, index: int) -> PhyloTree:
        return self.trees[index]

    def restricted_to(self, taxa: Iterable[str]) -> "TreeSample":
        keep = set(taxa) & set(self.taxa)
        return TreeSample(tuple(prune_to_taxa(tree, keep) for tree in self.trees), self.source)


class _NewickParser:
    def __init__(self, text: str) -> None:
        self.text = text
        self.pos = 0
        self.parents: list[int] = []
        self.lengths: list[float] = []
        self.labels: list[Optional[str]] = []
        self.has_length: list[bool] = []

    def parse(self) -> PhyloTree:
        text = self.text
        stack: list[int] = []
        root: Optional[int] = None
        expect_node = True
        while True:
            self._skip()
            if self.pos >= len(text):
                raise NewickError("Missing terminating ';'", self.pos)
            char = text[self.pos]
            if char == "(":
                if not expect_node:
                    raise NewickError("Unexpected '('", self.pos)
                if not stack and root is not None:
                    raise NewickError("Several top-level trees", self.pos)
                node = self._new(stack[-1] if stack else -1)
                if not stack:
                    root = node
                stack.append(node)
                self.pos += 1
            elif char == ",":
                if expect_node or not stack:
                    raise NewickError("Unexpected ','", self.pos)
                self.pos += 1
                expect_node = True
            elif char == ")":
                if expect_node or not stack:
                    raise NewickError("Unexpected ')'", self.pos)
                self.pos += 1
                self._label_and_length(stack.pop())
                expect_node = False
            elif char == ";":
                if expect_node or stack:
                    raise NewickError("Unbalanced parentheses before ';'", self.pos)
                self.pos += 1
                break
            else:
                if not expect_node:
                    raise NewickError(f"Unexpected character {char!r}", self.pos)
                if not stack and root is not None:
                    raise NewickError("Several top-level trees", self.pos)
                node = self._new(stack[-1] if stack else -1)
                if not stack:
                    root = node
                start = self.pos
                self._label_and_length(node)
                if self.labels[node] is None:
                    raise NewickError("Tip without a label", start)
                expect_node = False
        self._skip()
        if self.pos != len(text):
            raise NewickError("Trailing characters after ';'", self.pos)
        for node, parent in enumerate(self.parents):
            if parent != -1 and not self.has_length[node]:
                raise NewickError(f"Missing branch length for node '{self.labels[node] or node}'", len(text))
        return PhyloTree(self.parents, self.lengths, self.labels)

    def _new(self, parent: int) -> int:
        self.parents.append(parent)
        self.lengths.append(0.0)
        self.labels.append(None)
        self.has_length.append(False)
        return len(self.parents) - 1

    def _skip(self) -> None:
        text = self.text
        while self.pos < len(text):
            if text[self.pos].isspace():
                self.pos += 1
            elif text[self.pos] == "[":
                end = text.find("]", self.pos)
                if end < 0:
                    raise NewickError("Unclosed comment", self.pos)
                self.pos = end + 1
            else:
                break

    def _label_and_length(self, node: int) -> None:
        self._skip()
        self.labels[node] = self._read_label()
        self._skip()
        if self.pos < len(self.text) and self.text[self.pos] == ":":
            self.pos += 1
            self._skip()
            match = _NUMBER.match(self.text, self.pos)
            if match is None:
                raise NewickError("Malformed branch length", self.pos)
            value = float(match.group())
            if value < 0:
                raise NewickError(f"Negative branch length {value}", self.pos)
            self.lengths[node] = value
            self.has_length[node] = True
            self.pos = match.end()

    def _read_label(self) -> Optional[str]:
        text = self.text
        if self.pos < len(text) and text[self.pos] == "'":
            start = self.pos
            self.pos += 1
            chunks: list[str] = []
            while True:
                end = text.find("'", self.pos)
                if end < 0:
                    raise NewickError("Unclosed quoted label", start)
                chunks.append(text[self.pos:end])
                if end + 1 < len(text) and text[end + 1] == "'":
                    chunks.append("'")
                    self.pos = end + 2
                    continue
                self.pos = end + 1
                return "".join(chunks) or None
        start = self.pos
        while self.pos < len(text) and text[self.pos] not in _LABEL_STOP:
            self.pos += 1
        return text[start:self.pos] or None


def parse_newick(text: str) -> PhyloTree:
    """Parse one Newick tree; quoted labels and ``[...]`` comments are allowed."""
    return _NewickParser(text).parse()


def _format_label(label: Optional[str]) -> str:
    if label is None:
        return ""
    if _PLAIN_LABEL.match(label):
        return label
    return "'" + label.replace("'", "''") + "'"


def to_newick(tree: PhyloTree) -> str:
    rendered: dict[int, str] = {}
    for node in tree.postorder():
        kids = tree.children(node)
        text = _format_label(tree.label(node))
        if kids:
            text = "(" + ",".join(rendered.pop(child) for child in kids) + ")" + text
        if node != tree.root:
            text += ":" + repr(tree.length(node))
        elif tree.length(node) > 0:
            text += ":" + repr(tree.length(node))
        rendered[node] = text
    return rendered[tree.root] + ";"


def read_tree_sample(path: Union[str, Path]) -> TreeSample:
    path = Path(path)
    trees = []
    with path.open(encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            trees.append(parse_newick(line))
    logger.info("Read %d trees from %s", len(trees), path)
    return TreeSample(tuple(trees), source=str(path))


def write_tree_sample(sample: Iterable[PhyloTree], path: Union[str, Path]) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for tree in sample:
            handle.write(to_newick(tree) + "\n")


def clades(tree: PhyloTree) -> dict[frozenset, list[float]]:
    members: dict[int, frozenset] = {}
    found: dict[frozenset, list[float]] = {}
    for node in tree.postorder():
        kids = tree.children(node)
        if kids:
            clade = frozenset().union(*(members[c] for c in kids))
        else:
            clade = frozenset([tree.label(node)])
        members[node] = clade
        found.setdefault(clade, []).append(tree.length(node))
    return found


def equivalent(a: PhyloTree, b: PhyloTree, tol: float = 1e-12) -> bool:
    """Same clades with the same branch lengths, ignoring child order and internal names."""
    ca, cb = clades(a), clades(b)
    if ca.keys() != cb.keys():
        return False
    for clade, lengths in ca.items():
        other = cb[clade]
        if len(lengths) != len(other):
            return False
        if any(abs(x - y) > tol for x, y in zip(sorted(lengths), sorted(other))):
            return False
    return True


def _graft_on_stem(tree: PhyloTree, target: int, new_taxon: str, split_fraction: float) -> PhyloTree:
    if not 0.0 < split_fraction < 1.0:
        raise TreeError(f"split_fraction must lie in (0, 1), got {split_fraction}")
    if new_taxon in tree.tip_labels:
        raise TreeError(f"Taxon '{new_taxon}' already in tree")
    if target == tree.root:
        raise TreeError("Cannot graft above the root")
    parents, lengths, labels = tree.arrays()
    depth = tree.depths()
    stem = lengths[target]
    junction = len(parents)
    parents.append(parents[target])
    lengths.append(stem * split_fraction)
    labels.append(None)
    parents[target] = junction
    lengths[target] = stem - lengths[junction]
    tip_depth = max(depth[t] for t in tree.descendant_tips(target))
    junction_depth = depth[parents[junction]] + lengths[junction]
    parents.append(junction)
    lengths.append(max(0.0, tip_depth - junction_depth))
    labels.append(new_taxon)
    return PhyloTree(parents, lengths, labels)


def graft_taxon(tree: PhyloTree, new_taxon: str, sibling: str, split_fraction: float = 0.5) -> PhyloTree:
    """Split the sibling's branch at ``split_fraction`` of its length from the parent
    and hang ``new_taxon`` from the new node, level with the sibling."""
    return _graft_on_stem(tree, tree.find(sibling), new_taxon, split_fraction)


def graft_beside_clade(
    tree: PhyloTree,
    new_taxon: str,
    relatives: Iterable[str],
    split_fraction: float = 0.5,
) -> PhyloTree:
    return _graft_on_stem(tree, tree.mrca(relatives), new_taxon, split_fraction)


def sample_split_fraction(rng: np.random.Generator, low: float = 0.0, high: float = 1.0) -> float:
    if not 0.0 <= low < high <= 1.0:
        raise TreeError("Split fraction bounds must satisfy 0 <= low < high <= 1")
    value = float(rng.uniform(low, high))
    # uniform() can return its lower bound, which graft_taxon rejects.
    return value if value > 0.0 else 0.5 * high


def prune_to_taxa(tree: PhyloTree, keep: Iterable[str]) -> PhyloTree:
    keep = set(keep)
    unknown = keep - set(tree.tip_labels)
    if unknown:
        raise TreeError(f"Unknown taxa: {', '.join(sorted(unknown))}")
    if len(keep) < 2:
        raise TreeError("Pruning needs at least 2 surviving taxa")

    alive = [False] * tree.n_nodes
    for node in tree.postorder():
        kids = tree.children(node)
        alive[node] = any(alive[c] for c in kids) if kids else tree.label(node) in keep

    parents: list[int] = []
    lengths: list[float] = []
    labels: list[Optional[str]] = []
    # (old node, new parent, branch length carried down from suppressed nodes)
    stack: list[tuple[int, int, float]] = [(tree.root, -1, 0.0)]
    while stack:
        node, new_parent, carry = stack.pop()
        kids = [c for c in tree.children(node) if alive[c]]
        if len(kids) == 1:
            # Unary node: merge its branch into the single surviving child.
            passed = 0.0 if new_parent == -1 else carry + tree.length(node)
            stack.append((kids[0], new_parent, passed))
            continue
        index = len(parents)
        parents.append(new_parent)
        if new_parent == -1:
            lengths.append(tree.length(node) if node == tree.root else 0.0)
        else:
            lengths.append(carry + tree.length(node))
        labels.append(tree.label(node))
        for child in reversed(kids):
            stack.append((child, index, 0.0))
    return PhyloTree(parents, lengths, labels)


def simulate_coalescent(
    n_taxa: int,
    seed: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> PhyloTree:
    """Kingman coalescent with unit population size; tips are named t1..tn."""
    if n_taxa < 2:
        raise TreeError("Coalescent needs at least 2 taxa")
    rng = rng or np.random.default_rng(seed)
    parents = [-1] * n_taxa
    times = [0.0] * n_taxa
    labels: list[Optional[str]] = [f"t{i + 1}" for i in range(n_taxa)]
    lineages = list(range(n_taxa))
    now = 0.0
    while len(lineages) > 1:
        k = len(lineages)
        now += rng.exponential(2.0 / (k * (k - 1)))
        first, second = sorted(rng.choice(k, size=2, replace=False), reverse=True)
        a, b = lineages.pop(first), lineages.pop(second)
        node = len(parents)
        parents.append(-1)
        times.append(now)
        labels.append(None)
        parents[a] = node
        parents[b] = node
        lineages.append(node)
    lengths = [0.0 if parents[i] == -1 else times[parents[i]] - times[i] for i in range(len(parents))]
    return PhyloTree(parents, lengths, labels)
