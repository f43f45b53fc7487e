"""Evaluation of Imageome embeddings.

Code histograms and their entropies, Jensen-Shannon species distances,
rank correlation against tree distances, code-swapping translation traces,
unseen-species placement, disentanglement probes and embedding export.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .codec import Imageome
from .phylogeny import DistanceMatrix

SCHEMA = 1


# histograms ------------------------------------------------------------------------

@dataclass
class CodeHistograms:
    class_id: str
    H_p: np.ndarray    # [n_l, n_p, n_q]
    H_np: np.ndarray   # [n_np, n_q]
    count: int

    @property
    def n_q(self) -> int:
        return self.H_p.shape[-1]

    def locations(self, segment) -> np.ndarray:
        """Selected location distributions, ``[n_locations, n_q]``."""
        seg = Segment.parse(segment)
        if seg.kind == "nonphylo":
            return self.H_np
        flat = self.H_p.reshape(-1, self.n_q)
        if seg.kind == "phylo":
            return flat
        n_l, n_p = self.H_p.shape[:2]
        if not 1 <= seg.level <= n_l:
            raise ValueError(f"descriptor level must be in 1..{n_l}, got {seg.level}")
        return flat[:seg.level * n_p]

    def to_dict(self) -> dict:
        return {"schema": SCHEMA, "class_id": self.class_id, "count": self.count,
                "H_p": self.H_p.tolist(), "H_np": self.H_np.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CodeHistograms":
        return cls(d["class_id"], np.asarray(d["H_p"], float), np.asarray(d["H_np"], float), d["count"])


@dataclass(frozen=True)
class Segment:
    kind: str          # "phylo" | "level" | "nonphylo"
    level: int = 0

    @classmethod
    def parse(cls, s) -> "Segment":
        if isinstance(s, Segment):
            return s
        s = str(s)
        if s in ("phylo", "nonphylo"):
            return cls(s)
        if s.startswith("level:"):
            try:
                return cls("level", int(s.split(":", 1)[1]))
            except ValueError:
                pass
        raise ValueError(f"segment must be 'phylo', 'nonphylo' or 'level:i', got {s!r}")

    def __str__(self):
        return f"level:{self.level}" if self.kind == "level" else self.kind


def class_histograms(groups: dict, n_q: int) -> dict:
    """Per-location empirical code frequencies for each class of Imageomes."""
    out = {}
    for cls_id, ims in groups.items():
        ims = list(ims)
        if not ims:
            raise ValueError(f"class {cls_id!r} has no specimens")
        layout = ims[0].layout()
        if any(im.layout() != layout for im in ims):
            raise ValueError(f"class {cls_id!r} mixes Imageome layouts")
        P = np.stack([im.phylo for im in ims])
        Q = np.stack([im.nonphylo for im in ims])
        if P.max(initial=0) >= n_q or Q.max(initial=0) >= n_q:
            raise ValueError(f"code index >= n_q={n_q} in class {cls_id!r}")
        out[cls_id] = CodeHistograms(str(cls_id), _freq(P, n_q), _freq(Q, n_q), len(ims))
    return out


def _freq(idx: np.ndarray, n_q: int) -> np.ndarray:
    n = idx.shape[0]
    flat = idx.reshape(n, -1)
    counts = np.zeros((flat.shape[1], n_q))
    for loc in range(flat.shape[1]):
        counts[loc] = np.bincount(flat[:, loc], minlength=n_q)
    return (counts / n).reshape(idx.shape[1:] + (n_q,))


def group_by(ims, keys) -> dict:
    groups: dict = {}
    for im, k in zip(ims, keys):
        groups.setdefault(k, []).append(im)
    return groups


# information measures ------------------------------------------------------------

def entropy_bits(p, axis=-1) -> np.ndarray:
    """Shannon entropy in bits with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=axis)


def location_entropy(h: CodeHistograms):
    """Entropy (bits) of every sequence location: (``[n_l, n_p]``, ``[n_np]``)."""
    return entropy_bits(h.H_p), entropy_bits(h.H_np)


def _check_dist(p, name, atol=1e-6):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < -atol) or np.any(np.abs(p.sum(axis=-1) - 1.0) > atol):
        raise ValueError(f"{name} is not a probability distribution (sum={p.sum(axis=-1)})")
    return np.clip(p, 0.0, None)


def js_divergence(p, q) -> np.ndarray:
    """Jensen-Shannon divergence in bits, ``H(m) - (H(p) + H(q)) / 2``.

    Works row-wise on stacked distributions; bounded in [0, 1].
    """
    p, q = _check_dist(p, "p"), _check_dist(q, "q")
    if p.shape != q.shape:
        raise ValueError(f"support mismatch {p.shape} vs {q.shape}")
    js = entropy_bits(0.5 * (p + q)) - 0.5 * (entropy_bits(p) + entropy_bits(q))
    return np.clip(js, 0.0, 1.0)


# distances ---------------------------------------------------------------------------

def embedding_distance_matrix(hists: dict, segment, labels=None) -> DistanceMatrix:
    """Mean per-location JS divergence between every pair of classes."""
    labels = list(hists) if labels is None else list(labels)
    missing = [x for x in labels if x not in hists]
    if missing:
        raise ValueError(f"no histograms for {missing}")
    locs = [hists[x].locations(segment) for x in labels]
    if len({l.shape for l in locs}) > 1:
        raise ValueError("histograms come from mismatched configurations")
    n = len(labels)
    m = np.zeros((n, n))
    for a in range(n):
        for b in range(a + 1, n):
            m[a, b] = m[b, a] = float(js_divergence(locs[a], locs[b]).mean())
    return DistanceMatrix(labels, m)


def cosine_distance_matrix(vectors: dict, labels=None) -> DistanceMatrix:
    """1 - cosine similarity between per-class mean vectors."""
    labels = list(vectors) if labels is None else list(labels)
    V = np.stack([np.asarray(vectors[x], dtype=np.float64).ravel() for x in labels])
    norms = np.linalg.norm(V, axis=1)
    if np.any(norms == 0):
        bad = [x for x, nv in zip(labels, norms) if nv == 0]
        raise ValueError(f"zero mean vector for {bad}")
    U = V / norms[:, None]
    m = 1.0 - np.clip(U @ U.T, -1.0, 1.0)
    np.fill_diagonal(m, 0.0)
    return DistanceMatrix(labels, (m + m.T) / 2)


def rankdata(a) -> np.ndarray:
    """1-based ranks with ties given their average rank."""
    a = np.asarray(a, dtype=np.float64)
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(len(a))
    sa = a[order]
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and sa[j + 1] == sa[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(a: DistanceMatrix, b: DistanceMatrix) -> float:
    """Spearman rho over strictly-upper-triangle entries (diagonal excluded)."""
    if list(a.labels) != list(b.labels):
        raise ValueError("distance matrices must share the same label order")
    x, y = a.upper(), b.upper()
    if x.size < 3:
        raise ValueError(f"need at least 3 pairs for a rank correlation, got {x.size}")
    rx, ry = rankdata(x), rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0:
        return float("nan")
    return float(np.clip((rx * ry).sum() / denom, -1.0, 1.0))


# translation --------------------------------------------------------------------------

@dataclass
class TranslationTrace:
    snapshots: list      # [source, after-nonphylo, after-level-1, ..., after-level-n_l]
    steps: list          # segment name replaced to reach each snapshot after the first

    def changed_locations(self) -> list:
        """Flat (canonical order) locations changed at each step."""
        flats = [s.flat() for s in self.snapshots]
        return [np.flatnonzero(flats[k] != flats[k + 1]) for k in range(len(flats) - 1)]

    def hamming_to_target(self) -> list:
        tgt = self.snapshots[-1].flat()
        return [int((s.flat() != tgt).sum()) for s in self.snapshots]

    def to_jsonl(self, src_id=None, tgt_id=None) -> str:
        lines = []
        for k, snap in enumerate(self.snapshots):
            rec = {"schema": SCHEMA, "step": k, "replaced": self.steps[k - 1] if k else "source",
                   "src": src_id, "tgt": tgt_id,
                   "phylo": snap.phylo.tolist(), "nonphylo": snap.nonphylo.tolist()}
            lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines) + "\n"


def translate(src: Imageome, tgt: Imageome) -> TranslationTrace:
    """Swap target codes into the source: non-phylo part first, then levels root to species."""
    if src.layout() != tgt.layout():
        raise ValueError(f"layout mismatch {src.layout()} vs {tgt.layout()}")
    cur = src.copy()
    snaps, steps = [cur.copy()], []
    cur.nonphylo[:] = tgt.nonphylo
    snaps.append(cur.copy())
    steps.append("nonphylo")
    for lvl in range(src.n_l):
        cur.phylo[lvl] = tgt.phylo[lvl]
        snaps.append(cur.copy())
        steps.append(f"level:{lvl + 1}")
    return TranslationTrace(snaps, steps)


def segment_slices(n_l: int, n_p: int, n_np: int) -> dict:
    """Flat-index ranges of each translation step's segment."""
    L = n_l * n_p
    out = {"nonphylo": np.arange(L, L + n_np)}
    for lvl in range(n_l):
        out[f"level:{lvl + 1}"] = np.arange(lvl * n_p, (lvl + 1) * n_p)
    return out


# unseen species -------------------------------------------------------------------

def place_unseen(unseen: CodeHistograms, seen: dict, segment) -> list:
    """Seen classes ranked by ascending mean JS distance to the unseen class."""
    if not seen:
        raise ValueError("no seen species to place against")
    u = unseen.locations(segment)
    scored = []
    for name, h in seen.items():
        s = h.locations(segment)
        if s.shape != u.shape:
            raise ValueError("histograms come from mismatched configurations")
        scored.append((name, float(js_divergence(u, s).mean())))
    return sorted(scored, key=lambda t: (t[1], str(t[0])))


# probes ---------------------------------------------------------------------------

def probe_accuracy(train_x, train_y, test_x, test_y, n_classes: int, hidden: int = 64,
                   epochs: int = 200, lr: float = 1e-2, seed: int = 0, batch_size: int = 32) -> float:
    """Test accuracy of a freshly trained two-layer MLP probe on frozen features."""
    rng = np.random.default_rng(seed)
    Xtr = np.asarray(train_x, dtype=np.float64).reshape(len(train_x), -1)
    Xte = np.asarray(test_x, dtype=np.float64).reshape(len(test_x), -1)
    mu, sd = Xtr.mean(axis=0), Xtr.std(axis=0) + 1e-8
    Xtr, Xte = (Xtr - mu) / sd, (Xte - mu) / sd
    ytr = np.asarray(train_y, dtype=np.int64)
    f = Xtr.shape[1]
    w1 = nx.Tensor(rng.normal(0, 1 / np.sqrt(f), (f, hidden)), requires_grad=True)
    b1 = nx.Tensor(np.zeros(hidden), requires_grad=True)
    w2 = nx.Tensor(rng.normal(0, 1 / np.sqrt(hidden), (hidden, n_classes)), requires_grad=True)
    b2 = nx.Tensor(np.zeros(n_classes), requires_grad=True)
    params = [w1, b1, w2, b2]
    opt = nx.Adam(params, lr=lr)

    def logits(X):
        return nx.linear(nx.leaky_relu(nx.linear(X, w1, b1)), w2, b2)

    for _ in range(epochs):
        order = rng.permutation(len(Xtr))
        for s in range(0, len(order), batch_size):
            b = order[s:s + batch_size]
            loss = nx.cross_entropy(logits(Xtr[b]), ytr[b])
            opt.step(nx.grad(loss, params))
    pred = logits(Xte).data.argmax(axis=1)
    return float(np.mean(pred == np.asarray(test_y)))


# export ---------------------------------------------------------------------------

def export_embeddings(ids, species, level_labels, embeddings, path=None) -> str:
    """CSV: id, species, level_1..level_n, e0..e{D-1}; one row per specimen."""
    n = len(ids)
    if not (len(species) == n and len(level_labels) == n and len(embeddings) == n):
        raise ValueError(f"length mismatch: ids={n}, species={len(species)}, "
                         f"labels={len(level_labels)}, embeddings={len(embeddings)}")
    E = [np.asarray(e).ravel() for e in embeddings]
    n_l = len(level_labels[0]) if n else 0
    dim = len(E[0]) if n else 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "species"] + [f"level_{i + 1}" for i in range(n_l)] + [f"e{j}" for j in range(dim)])
    for i in range(n):
        vals = [int(v) if np.issubdtype(E[i].dtype, np.integer) else repr(float(v)) for v in E[i]]
        w.writerow([ids[i], species[i]] + [int(c) for c in level_labels[i]] + vals)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_embeddings(text_or_path):
    p = Path(text_or_path) if "\n" not in str(text_or_path) else None
    text = p.read_text() if p is not None else str(text_or_path)
    rows = list(csv.reader(io.StringIO(text)))
    header = rows[0]
    n_l = sum(h.startswith("level_") for h in header)
    ids = [r[0] for r in rows[1:]]
    species = [r[1] for r in rows[1:]]
    labels = np.array([[int(v) for v in r[2:2 + n_l]] for r in rows[1:]], dtype=np.int64)
    emb = np.array([[float(v) for v in r[2 + n_l:]] for r in rows[1:]])
    return ids, species, labels, emb


def correlations_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["schema", "segment", "level", "gt", "n_pairs", "spearman"])
    for r in rows:
        rho = r["spearman"]
        w.writerow([SCHEMA, r["segment"], r["level"], r["gt"], r["n_pairs"],
                    "" if rho is None or np.isnan(rho) else repr(round(float(rho), 12))])
    return buf.getvalue()
