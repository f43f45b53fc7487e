"""Newick phylogenies, level discretization and ground-truth distances."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class NewickError(ValueError):
    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} (at position {position})")


class TreeError(ValueError):
    pass


@dataclass
class Node:
    id: int
    label: str | None = None
    parent: int | None = None
    branch_length: float | None = None
    children: list = field(default_factory=list)


class PhyloTree:
    """Rooted tree with non-negative branch lengths; node 0 is the root."""

    def __init__(self, nodes: list):
        self.nodes = nodes
        roots = [n for n in nodes if n.parent is None]
        if len(roots) != 1:
            raise TreeError(f"expected exactly one root, found {len(roots)}")
        self.root = roots[0].id
        self._depth = None
        labels = self.leaf_labels()
        if len(set(labels)) != len(labels):
            dup = sorted({x for x in labels if labels.count(x) > 1})
            raise TreeError(f"duplicate leaf labels: {dup}")
        self._leaf_by_label = {self.nodes[i].label: i for i in self.leaves()}

    # structure --------------------------------------------------------------
    def leaves(self) -> list:
        """Leaf node ids in left-to-right order."""
        out, stack = [], [self.root]
        while stack:
            n = self.nodes[stack.pop()]
            if not n.children:
                out.append(n.id)
            stack.extend(reversed(n.children))
        return out

    def leaf_labels(self) -> list:
        return [self.nodes[i].label for i in self.leaves()]

    def leaf(self, label: str) -> int:
        try:
            return self._leaf_by_label[label]
        except KeyError:
            raise TreeError(f"unknown species {label!r}") from None

    def depths(self) -> np.ndarray:
        """Root-to-node path length for every node id."""
        if self._depth is None:
            d = np.zeros(len(self.nodes))
            stack = [self.root]
            while stack:
                n = self.nodes[stack.pop()]
                for c in n.children:
                    d[c] = d[n.id] + self.nodes[c].branch_length
                    stack.append(c)
            self._depth = d
        return self._depth

    def ancestors(self, node: int) -> list:
        """Path from ``node`` up to and including the root."""
        path = [node]
        while self.nodes[path[-1]].parent is not None:
            path.append(self.nodes[path[-1]].parent)
        return path

    def lca(self, a: int, b: int) -> int:
        up = set(self.ancestors(a))
        for n in self.ancestors(b):
            if n in up:
                return n
        raise TreeError("nodes are not in the same tree")

    def path_length(self, a: int, b: int) -> float:
        d = self.depths()
        return float(d[a] + d[b] - 2.0 * d[self.lca(a, b)])

    def leaf_depth_spread(self) -> tuple:
        d = self.depths()[self.leaves()]
        return float(d.min()), float(d.max())

    def is_ultrametric(self, tol: float = 1e-6) -> bool:
        lo, hi = self.leaf_depth_spread()
        return hi - lo <= tol * max(hi, 1e-300)

    def scaled(self, factor: float) -> "PhyloTree":
        nodes = [Node(n.id, n.label, n.parent,
                      None if n.branch_length is None else n.branch_length * factor,
                      list(n.children)) for n in self.nodes]
        return PhyloTree(nodes)

    def to_newick(self) -> str:
        def fmt(i):
            n = self.nodes[i]
            s = "(" + ",".join(fmt(c) for c in n.children) + ")" if n.children else ""
            if n.label is not None:
                s += _quote(n.label)
            if n.branch_length is not None:
                s += ":" + repr(float(n.branch_length))
            return s
        return fmt(self.root) + ";"


def _quote(label: str) -> str:
    if any(ch in label for ch in "(),:;[] '\t\n"):
        return "'" + label.replace("'", "''") + "'"
    return label


# parsing --------------------------------------------------------------------------

def parse_newick(text: str) -> PhyloTree:
    """Parse a Newick string; every non-root node must carry a branch length."""
    p = _NewickParser(text)
    nodes = p.parse()
    return PhyloTree(nodes)


def read_newick(path) -> PhyloTree:
    return parse_newick(Path(path).read_text())


class _NewickParser:
    def __init__(self, text: str):
        self.s = text
        self.i = 0
        self.nodes: list = []
        self.pos: dict = {}

    def _skip(self):
        while self.i < len(self.s):
            c = self.s[self.i]
            if c.isspace():
                self.i += 1
            elif c == "[":  # comment
                j = self.s.find("]", self.i)
                if j < 0:
                    raise NewickError("unterminated comment", self.i)
                self.i = j + 1
            else:
                break

    def _peek(self):
        self._skip()
        return self.s[self.i] if self.i < len(self.s) else ""

    def parse(self):
        root = self._subtree(None)
        if self._peek() != ";":
            raise NewickError("expected ';'" if self._peek() != ")" else "unbalanced ')'", self.i)
        self.i += 1
        if self._peek():
            raise NewickError("trailing characters after ';'", self.i)
        seen = {}
        for n in self.nodes:
            if not n.children:
                if not n.label:
                    raise NewickError("leaf without a label", self.pos[n.id])
                if n.label in seen:
                    raise NewickError(f"duplicate leaf label {n.label!r}", self.pos[n.id])
                seen[n.label] = n
        assert root == 0
        return self.nodes

    def _subtree(self, parent):
        node = Node(len(self.nodes), parent=parent)
        self.nodes.append(node)
        if self._peek() == "(":
            self.i += 1
            while True:
                node.children.append(self._subtree(node.id))
                c = self._peek()
                if c == ",":
                    self.i += 1
                    continue
                if c == ")":
                    self.i += 1
                    break
                raise NewickError("unbalanced '(' (expected ',' or ')')", self.i)
        self._skip()
        self.pos[node.id] = self.i
        node.label = self._label()
        if self._peek() == ":":
            self.i += 1
            node.branch_length = self._number()
        elif parent is not None:
            raise NewickError(f"missing branch length for {node.label or 'internal node'}", self.i)
        return node.id

    def _label(self):
        self._skip()
        if self.i < len(self.s) and self.s[self.i] == "'":
            j = self.i + 1
            out = []
            while True:
                if j >= len(self.s):
                    raise NewickError("unterminated quoted label", self.i)
                if self.s[j] == "'":
                    if j + 1 < len(self.s) and self.s[j + 1] == "'":
                        out.append("'")
                        j += 2
                        continue
                    break
                out.append(self.s[j])
                j += 1
            self.i = j + 1
            return "".join(out)
        j = self.i
        while j < len(self.s) and self.s[j] not in "(),:;[" and not self.s[j].isspace():
            j += 1
        label = self.s[self.i:j]
        self.i = j
        return label or None

    def _number(self):
        self._skip()
        j = self.i
        while j < len(self.s) and self.s[j] not in "(),:;[" and not self.s[j].isspace():
            j += 1
        tok = self.s[self.i:j]
        try:
            v = float(tok)
        except ValueError:
            raise NewickError(f"invalid branch length {tok!r}", self.i) from None
        if not np.isfinite(v) or v < 0:
            raise NewickError(f"branch length must be finite and non-negative, got {tok}", self.i)
        self.i = j
        return v


# discretization ---------------------------------------------------------------

@dataclass
class LevelMap:
    """Per-level ancestor class of each species.

    ``classes[i][s]`` is the class index of species ``s`` at level ``i + 1``;
    ``nodes[i][k]`` is the tree node whose incoming edge the level cut crosses
    for class ``k``; ``cut_depths[i]`` is the depth of that cut.
    """
    n_l: int
    species: list
    classes: list
    nodes: list
    cut_depths: list

    @property
    def counts(self) -> list:
        return [len(n) for n in self.nodes]

    def labels(self, species: str) -> list:
        """Class indices of ``species`` for levels 1..n_l."""
        s = self.species_index(species)
        return [lvl[s] for lvl in self.classes]

    def species_index(self, species: str) -> int:
        try:
            return self.species.index(species)
        except ValueError:
            raise TreeError(f"species {species!r} not in level map") from None

    def label_matrix(self, species_list) -> np.ndarray:
        """[n, n_l] integer labels for a list of species names."""
        idx = {s: k for k, s in enumerate(self.species)}
        missing = sorted({s for s in species_list if s not in idx})
        if missing:
            raise TreeError(f"species not in level map: {missing}")
        cls = np.asarray(self.classes, dtype=np.int64)
        return cls[:, [idx[s] for s in species_list]].T.copy()

    def members(self, level: int, cls: int) -> list:
        return [s for s, c in zip(self.species, self.classes[level - 1]) if c == cls]

    def to_dict(self) -> dict:
        return {"n_l": self.n_l, "species": list(self.species),
                "classes": [list(map(int, c)) for c in self.classes],
                "nodes": [list(map(int, n)) for n in self.nodes],
                "cut_depths": [float(c) for c in self.cut_depths]}

    @classmethod
    def from_dict(cls, d: dict) -> "LevelMap":
        return cls(d["n_l"], list(d["species"]), [list(c) for c in d["classes"]],
                   [list(n) for n in d["nodes"]], list(d["cut_depths"]))


def discretize(tree: PhyloTree, n_l: int, tol: float = 1e-6) -> LevelMap:
    """Cut the tree at ``n_l - 1`` evenly spaced depths to form ancestry levels.

    A cut at depth c assigns each species to the node on its root path whose
    incoming edge spans c (parent depth < c <= node depth); a cut landing
    exactly on a node resolves to that node. Level ``n_l`` is the species.
    """
    if n_l < 2:
        raise TreeError(f"n_l must be >= 2, got {n_l}")
    if not tree.is_ultrametric(tol):
        lo, hi = tree.leaf_depth_spread()
        raise TreeError(f"tree is not ultrametric (leaf depths span {lo:g}..{hi:g}); "
                        "normalize root-to-tip depths before discretizing")
    depth = tree.depths()
    leaves = tree.leaves()
    total = float(depth[leaves].max())
    eps = 1e-9 * total
    species = [tree.nodes[i].label for i in leaves]
    classes, class_nodes, cuts = [], [], []
    for lvl in range(1, n_l):
        cut = total * lvl / n_l
        order, assign = {}, []
        for leaf in leaves:
            path = tree.ancestors(leaf)  # leaf .. root
            hit = leaf
            for node in path[:-1]:
                par = tree.nodes[node].parent
                if depth[par] < cut - eps and depth[node] >= cut - eps:
                    hit = node
                    break
            if hit not in order:
                order[hit] = len(order)
            assign.append(order[hit])
        classes.append(assign)
        class_nodes.append(list(order))
        cuts.append(cut)
    classes.append(list(range(len(leaves))))
    class_nodes.append(list(leaves))
    cuts.append(total)
    return LevelMap(n_l, species, classes, class_nodes, cuts)


# distances -----------------------------------------------------------------------

@dataclass
class DistanceMatrix:
    labels: list
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n = len(self.labels)
        if self.values.shape != (n, n):
            raise ValueError(f"distance matrix shape {self.values.shape} != ({n}, {n})")

    def upper(self) -> np.ndarray:
        """Strictly-upper-triangle entries, row-major."""
        return self.values[np.triu_indices(len(self.labels), k=1)]

    def reorder(self, labels) -> "DistanceMatrix":
        idx = [self.labels.index(x) for x in labels]
        return DistanceMatrix(list(labels), self.values[np.ix_(idx, idx)])

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label"] + list(self.labels))
        for lab, row in zip(self.labels, self.values):
            w.writerow([lab] + [repr(float(v)) for v in row])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, text_or_path) -> "DistanceMatrix":
        p = Path(text_or_path) if not str(text_or_path).startswith("label") else None
        text = p.read_text() if p is not None else str(text_or_path)
        rows = list(csv.reader(io.StringIO(text)))
        labels = rows[0][1:]
        vals = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        return cls(labels, vals)


def min_max_scale(values: np.ndarray) -> np.ndarray:
    """Scale off-diagonal entries to [0, 1]; all-equal entries map to 0."""
    v = np.array(values, dtype=np.float64)
    n = v.shape[0]
    if n < 2:
        return np.zeros_like(v)
    off = ~np.eye(n, dtype=bool)
    lo, hi = v[off].min(), v[off].max()
    v[off] = 0.0 if hi == lo else (v[off] - lo) / (hi - lo)
    np.fill_diagonal(v, 0.0)
    return v


def raw_distance_matrix(tree: PhyloTree, species) -> DistanceMatrix:
    ids = [tree.leaf(s) for s in species]
    n = len(ids)
    m = np.zeros((n, n))
    for a in range(n):
        for b in range(a + 1, n):
            m[a, b] = m[b, a] = tree.path_length(ids[a], ids[b])
    return DistanceMatrix(list(species), m)


def gt_distance_matrix(tree: PhyloTree, species) -> DistanceMatrix:
    """Min-max scaled path-length distances between species leaves."""
    raw = raw_distance_matrix(tree, species)
    return DistanceMatrix(raw.labels, min_max_scale(raw.values))


def ancestor_distance_matrix(tree: PhyloTree, levelmap: LevelMap, level: int) -> DistanceMatrix:
    """Min-max scaled distances between the level's cut-crossing points.

    Classes are labelled by index (``"0"``, ``"1"``, ...) except at the species
    level, which uses species names so it coincides with ``gt_distance_matrix``.
    """
    if not 1 <= level <= levelmap.n_l:
        raise TreeError(f"level must be in 1..{levelmap.n_l}, got {level}")
    if level == levelmap.n_l:
        return gt_distance_matrix(tree, levelmap.species)
    nodes = levelmap.nodes[level - 1]
    cut = levelmap.cut_depths[level - 1]
    depth = tree.depths()
    k = len(nodes)
    m = np.zeros((k, k))
    for a in range(k):
        for b in range(a + 1, k):
            below = (depth[nodes[a]] - cut) + (depth[nodes[b]] - cut)
            m[a, b] = m[b, a] = tree.path_length(nodes[a], nodes[b]) - below
    return DistanceMatrix([str(i) for i in range(k)], min_max_scale(m))
