"""Shared codebook and nearest-neighbour vector quantization."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import backend, ptn


@dataclass
class Codebook:
    codes: nx.Tensor
    seed: int | None = None

    @property
    def n_q(self) -> int:
        return self.codes.shape[0]

    @property
    def d(self) -> int:
        return self.codes.shape[1]

    def lookup(self, indices) -> np.ndarray:
        return self.codes.data[np.asarray(indices, dtype=np.int64)]

    def save(self, path):
        """Write ``<path>.ptn`` plus ``<path>.json`` sidecar."""
        path = Path(path)
        ptn.save(path.with_suffix(".ptn"), self.codes.data)
        path.with_suffix(".json").write_text(
            json.dumps({"n_q": self.n_q, "d": self.d, "seed": self.seed}, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Codebook":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        codes = ptn.load(path.with_suffix(".ptn"))
        if codes.shape != (meta["n_q"], meta["d"]):
            raise ValueError(f"codebook tensor {codes.shape} disagrees with sidecar {meta}")
        return cls(nx.Tensor(codes, requires_grad=True, name="codebook"), meta.get("seed"))


def init_codebook(n_q: int, d: int, seed: int) -> Codebook:
    """Uniform entries in [-1/n_q, 1/n_q], deterministic per seed."""
    if n_q < 1 or d < 1:
        raise ValueError(f"n_q and d must be >= 1, got {n_q}, {d}")
    rng = np.random.default_rng(seed)
    codes = rng.uniform(-1.0 / n_q, 1.0 / n_q, size=(n_q, d))
    return Codebook(nx.Tensor(codes, requires_grad=True, name="codebook"), seed)


@dataclass
class QuantizeResult:
    zq: nx.Tensor           # straight-through: value = codes[indices], gradient -> z
    indices: np.ndarray
    loss_q: nx.Tensor
    codebook_loss: nx.Tensor
    commitment_loss: nx.Tensor


def nearest(z: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Lowest-index nearest code (Euclidean) for each row of ``z``."""
    idx, _ = backend.kernels.nearest_codes(np.ascontiguousarray(z, dtype=np.float64),
                                           np.ascontiguousarray(codes, dtype=np.float64))
    return idx


def _distance(a, b, kind):
    if kind == "l1":
        return nx.mean_abs_error(a, b)
    if kind == "l2":
        return nx.mean(nx.square(nx.sub(a, b)))
    raise ValueError(f"unknown quantization distance {kind!r}")


def quantize(z, cb: Codebook, commitment: float = 0.25, distance: str = "l1") -> QuantizeResult:
    """Replace each row of ``z`` [m, d] by its nearest codebook row.

    ``loss_q = mean|sg(z) - e| + commitment * mean|z - sg(e)|``; the first
    term moves codes, the second binds the encoder output to its code.
    """
    z = nx.as_tensor(z)
    if z.ndim != 2 or z.shape[1] != cb.d:
        raise nx.ShapeError("quantize", z.shape, cb.codes.shape)
    idx = nx.discrete_choice(nearest(z.data, cb.codes.data))
    e = nx.index(cb.codes, idx)
    codebook_loss = _distance(nx.stop_gradient(z), e, distance)
    commitment_loss = _distance(z, nx.stop_gradient(e), distance)
    loss_q = codebook_loss + commitment_loss * commitment
    zq = nx.straight_through(z, e)
    return QuantizeResult(zq, idx, loss_q, codebook_loss, commitment_loss)


def usage_counts(indices, n_q: int) -> np.ndarray:
    return np.bincount(np.asarray(indices).ravel(), minlength=n_q)


def dead_codes(indices, n_q: int) -> int:
    """Number of codes never selected; logged, never reset."""
    return int((usage_counts(indices, n_q) == 0).sum())
