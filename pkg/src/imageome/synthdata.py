"""Synthetic specimens with planted, phylogeny-aligned traits.

Each node of the tree carries a trait pattern that drifts along branches
like Brownian motion (variance proportional to branch length). A specimen of
species s paints, for every level i, the pattern of its level-i ancestor
class into region i of the feature map, then adds a per-specimen brightness
offset and pixel noise. Regions are the image quadrants for n_l <= 4 and
horizontal bands otherwise. This is a deliberately easy regime: level
information is spatially separable.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import ptn
from .phylogeny import LevelMap, PhyloTree, discretize
from .trainer import Dataset


@dataclass
class SynthSpec:
    tree: PhyloTree
    n_l: int
    H: int = 8
    W: int = 8
    C_in: int = 4
    specimens_per_species: int = 50
    trait_scale: float = 1.0
    brightness: float = 0.5
    noise: float = 0.2
    seed: int = 0
    levelmap: LevelMap = field(init=False, repr=False)
    class_traits: list = field(init=False, repr=False)

    def __post_init__(self):
        self.levelmap = discretize(self.tree, self.n_l)
        self.regions = _regions(self.H, self.W, self.n_l)
        self.class_traits = self._draw_traits()

    def _draw_traits(self) -> list:
        """Pattern of every level class, interpolated at its cut along the crossed edge."""
        tree = self.tree
        depth = tree.depths()
        total = float(depth[tree.leaves()].max())
        sizes = {(r.stop - r.start, c.stop - c.start) for r, c in self.regions}
        if len(sizes) != 1:
            raise ValueError("regions must share one shape")
        rh, rw = sizes.pop()
        dim = rh * rw * self.C_in
        rng = np.random.default_rng(self.seed)
        node_trait = np.zeros((len(tree.nodes), dim))
        # unit total variance at the tips regardless of tree height
        sigma = self.trait_scale / np.sqrt(total)
        stack = [tree.root]
        order = []
        while stack:
            n = stack.pop()
            order.append(n)
            stack.extend(reversed(tree.nodes[n].children))
        for n in order:
            node = tree.nodes[n]
            if node.parent is not None:
                node_trait[n] = node_trait[node.parent] + rng.normal(
                    0.0, sigma * np.sqrt(node.branch_length), size=dim)
        traits = []
        for lvl, nodes in enumerate(self.levelmap.nodes):
            cut = self.levelmap.cut_depths[lvl]
            per_class = []
            for v in nodes:
                par = tree.nodes[v].parent
                bl = tree.nodes[v].branch_length or 0.0
                if par is None or bl == 0.0:
                    t = node_trait[v]
                else:
                    frac = min(1.0, max(0.0, (cut - depth[par]) / bl))
                    t = node_trait[par] + frac * (node_trait[v] - node_trait[par])
                per_class.append(t.reshape(rh, rw, self.C_in))
            traits.append(per_class)
        return traits

    @property
    def species(self) -> list:
        return list(self.levelmap.species)


def _regions(H: int, W: int, n_l: int) -> list:
    if n_l <= 4:
        if H % 2 or W % 2:
            raise ValueError("H and W must be even for quadrant painting")
        h, w = H // 2, W // 2
        quads = [(slice(0, h), slice(0, w)), (slice(0, h), slice(w, W)),
                 (slice(h, H), slice(0, w)), (slice(h, H), slice(w, W))]
        return quads[:n_l]
    if H % n_l:
        raise ValueError(f"H must be divisible by n_l={n_l} for band painting")
    b = H // n_l
    return [(slice(i * b, (i + 1) * b), slice(0, W)) for i in range(n_l)]


def clean_render(spec: SynthSpec, species: str) -> np.ndarray:
    """Noise-free, offset-free feature map of a species."""
    labels = spec.levelmap.labels(species)
    x = np.zeros((spec.H, spec.W, spec.C_in))
    for lvl, (rows, cols) in enumerate(spec.regions):
        x[rows, cols, :] = spec.class_traits[lvl][labels[lvl]]
    return x


def render_specimen(spec: SynthSpec, species: str, instance_seed: int):
    """Feature map ``[H, W, C_in]`` and per-level labels of one specimen."""
    if species not in spec.levelmap.species:
        raise ValueError(f"unknown species {species!r}")
    x = clean_render(spec, species)
    rng = np.random.default_rng([spec.seed, instance_seed])
    offset = rng.uniform(-spec.brightness, spec.brightness)
    noise = rng.normal(0.0, 1.0, size=x.shape) * spec.noise
    return x + offset + noise, spec.levelmap.labels(species)


def make_dataset(spec: SynthSpec, split_seed: int, holdout_species=()):
    """(train, test, unseen) datasets; 80/20 per-species split of non-holdout species."""
    holdout = list(holdout_species)
    unknown = sorted(set(holdout) - set(spec.species))
    if unknown:
        raise ValueError(f"holdout species not in tree: {unknown}")
    seen = [s for s in spec.species if s not in holdout]
    if not seen:
        raise ValueError("holdout covers every species")
    rng = np.random.default_rng(split_seed)
    n = spec.specimens_per_species
    n_test = int(round(0.2 * n))
    ids, species, xs, split = [], [], [], []
    for si, s in enumerate(spec.species):
        if s in holdout:
            tags = ["unseen"] * n
        else:
            tags = ["train"] * n
            for k in rng.permutation(n)[:n_test]:
                tags[k] = "test"
        for k in range(n):
            x, _ = render_specimen(spec, s, si * 1_000_003 + k)
            ids.append(f"{_slug(s)}-{k:04d}")
            species.append(s)
            xs.append(x)
            split.append(tags[k])
    x = np.stack(xs) if xs else np.zeros((0, spec.H, spec.W, spec.C_in))
    full = Dataset(ids, species, x, split)
    return full.where("train"), full.where("test"), full.where("unseen")


def _slug(s: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in s)


# manifests ------------------------------------------------------------------------

MANIFEST_COLUMNS = ("id", "species", "tensor_path", "split")


def write_manifest(datasets, out_dir, name: str = "manifest.csv") -> Path:
    """Write tensors as PTN1 under ``out_dir/tensors`` and a CSV manifest."""
    out = Path(out_dir)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    path = out / name
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for ds in datasets:
            for i, sid in enumerate(ds.ids):
                rel = f"tensors/{sid}.ptn"
                ptn.save(out / rel, ds.x[i])
                w.writerow([sid, ds.species[i], rel, ds.split[i]])
    return path


def read_manifest(path, splits=None) -> Dataset:
    """Load a manifest (optionally filtered to ``splits``) into memory."""
    path = Path(path)
    ids, species, xs, split = [], [], [], []
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for row in rows:
        if splits is not None and row["split"] not in splits:
            continue
        ids.append(row["id"])
        species.append(row["species"])
        split.append(row["split"])
        tp = Path(row["tensor_path"])
        xs.append(ptn.load(tp if tp.is_absolute() else path.parent / tp))
    x = np.stack(xs) if xs else np.zeros((0, 0, 0, 0))
    return Dataset(ids, species, x, split)
