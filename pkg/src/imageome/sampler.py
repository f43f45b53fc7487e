"""Class-conditional Imageome generation with smoothed first-order Markov tables.

A stand-in for a learned autoregressive model: position 0 has a marginal over
codes, every later position ``t`` a table ``P(code_t | code_{t-1})``. Any
object with ``sample(n, seed)`` returning Imageomes can replace it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import Imageome

SCHEMA = 1


@dataclass
class ClassSampler:
    class_id: str
    n_q: int
    layout: tuple          # (n_l, n_p, n_np)
    alpha: float
    initial: np.ndarray    # [n_q]
    transitions: np.ndarray  # [L-1, n_q, n_q]; row = previous code

    @property
    def length(self) -> int:
        return 1 + self.transitions.shape[0]

    def marginals(self) -> np.ndarray:
        """Exact per-position code marginals implied by the tables, [L, n_q]."""
        out = [self.initial]
        for t in self.transitions:
            out.append(out[-1] @ t)
        return np.stack(out)

    def sample(self, n: int, seed) -> list:
        """``n`` Imageomes by ancestral sampling; deterministic per seed."""
        if n < 0:
            raise ValueError("n must be non-negative")
        if n == 0:
            return []
        rng = np.random.default_rng(seed)
        seqs = np.empty((n, self.length), dtype=np.int64)
        seqs[:, 0] = _draw(rng, np.broadcast_to(self.initial, (n, self.n_q)))
        for t, table in enumerate(self.transitions, start=1):
            seqs[:, t] = _draw(rng, table[seqs[:, t - 1]])
        return [Imageome.from_flat(s, *self.layout) for s in seqs]

    def to_dict(self) -> dict:
        return {"schema": SCHEMA, "class_id": self.class_id, "n_q": self.n_q,
                "layout": list(self.layout), "alpha": self.alpha,
                "initial": self.initial.tolist(), "transitions": self.transitions.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassSampler":
        if d.get("schema") != SCHEMA:
            raise ValueError(f"unsupported sampler schema {d.get('schema')!r}")
        s = cls(str(d["class_id"]), int(d["n_q"]), tuple(d["layout"]), float(d["alpha"]),
                np.asarray(d["initial"], dtype=np.float64),
                np.asarray(d["transitions"], dtype=np.float64).reshape(-1, d["n_q"], d["n_q"]))
        _check_rows(s)
        return s


def _draw(rng, probs: np.ndarray) -> np.ndarray:
    """One categorical draw per row via inverse CDF."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(probs)) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def _normalise(counts: np.ndarray, alpha: float) -> np.ndarray:
    """Rows of ``counts + alpha`` normalised; an all-zero row becomes uniform."""
    c = counts + alpha
    tot = c.sum(axis=-1, keepdims=True)
    uniform = np.full_like(c, 1.0 / c.shape[-1])
    return np.where(tot > 0, c / np.where(tot > 0, tot, 1.0), uniform)


def _check_rows(s: ClassSampler):
    rows = np.concatenate([s.initial[None], s.transitions.reshape(-1, s.n_q)])
    if rows.min() < 0 or not np.allclose(rows.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError(f"sampler {s.class_id!r}: table rows must be distributions")


def fit_class(class_id, imageomes, n_q: int, alpha: float = 0.1) -> ClassSampler:
    imageomes = list(imageomes)
    if not imageomes:
        raise ValueError(f"class {class_id!r} has no training sequences")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    layouts = {im.layout() for im in imageomes}
    if len(layouts) != 1:
        raise ValueError(f"class {class_id!r} mixes Imageome layouts {sorted(layouts)}")
    seqs = np.stack([im.flat() for im in imageomes])
    if seqs.min() < 0 or seqs.max() >= n_q:
        raise ValueError(f"class {class_id!r}: code outside [0, {n_q})")
    L = seqs.shape[1]
    init_counts = np.bincount(seqs[:, 0], minlength=n_q).astype(np.float64)
    trans_counts = np.zeros((max(L - 1, 0), n_q, n_q))
    for t in range(1, L):
        np.add.at(trans_counts[t - 1], (seqs[:, t - 1], seqs[:, t]), 1.0)
    return ClassSampler(str(class_id), n_q, layouts.pop(), float(alpha),
                        _normalise(init_counts, alpha), _normalise(trans_counts, alpha))


def fit_sampler(imageomes_by_class: dict, n_q: int, alpha: float = 0.1) -> dict:
    """One sampler per class id (mapping class id -> list of Imageomes)."""
    return {c: fit_class(c, ims, n_q, alpha) for c, ims in sorted(imageomes_by_class.items())}


def sample(samplers: dict, class_id, n: int, seed) -> list:
    if class_id not in samplers:
        raise KeyError(f"no sampler for class {class_id!r}; known: {sorted(samplers)}")
    return samplers[class_id].sample(n, seed)


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def empirical_marginals(imageomes, n_q: int) -> np.ndarray:
    seqs = np.stack([im.flat() for im in imageomes])
    return np.stack([np.bincount(col, minlength=n_q) for col in seqs.T]) / len(seqs)


def save_samplers(samplers: dict, path):
    data = {"schema": SCHEMA, "samplers": [s.to_dict() for _, s in sorted(samplers.items())]}
    Path(path).write_text(json.dumps(data, sort_keys=True) + "\n")


def load_samplers(path) -> dict:
    data = json.loads(Path(path).read_text())
    if data.get("schema") != SCHEMA:
        raise ValueError(f"unsupported sampler file schema {data.get('schema')!r}")
    out = {}
    for d in data["samplers"]:
        s = ClassSampler.from_dict(d)
        out[s.class_id] = s
    return out
