"""Phylo-Encoder / Phylo-Decoder blocks and their training losses.

Tensors are batched: feature maps are ``[N, H, W, C_in]`` and quantized
sequences ``[N, L, d]``. Single-specimen helpers accept ``[H, W, C_in]``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import ptn
from .quantizer import Codebook, init_codebook, quantize


@dataclass
class CodecConfig:
    H: int
    W: int
    C_in: int
    C_p: int
    n_l: int
    n_p: int
    n_np: int
    d: int
    n_q: int
    class_counts: list
    kernel_size: int = 3
    mlp_hidden: int = 64
    head_hidden: int | None = None  # defaults to 4 * d
    beta: list | None = None        # defaults to 1 per level
    w_rec: float = 1.0
    w_q: float = 1.0
    w_p: float = 1.0
    w_adv: float = 0.1
    w_o: float = 0.01
    commitment: float = 0.25
    quant_distance: str = "l1"
    leaky_slope: float = 0.01
    share_heads: bool = True

    def __post_init__(self):
        self.class_counts = [int(k) for k in self.class_counts]
        if self.head_hidden is None:
            self.head_hidden = 4 * self.d
        if self.beta is None:
            self.beta = [1.0] * self.n_l
        self.beta = [float(b) for b in self.beta]
        problems = []
        if not 1 <= self.C_p < self.C_in:
            problems.append(f"need 1 <= C_p < C_in, got C_p={self.C_p}, C_in={self.C_in}")
        if self.n_l * self.n_p < 1 or self.n_np < 1:
            problems.append("need n_l*n_p >= 1 and n_np >= 1")
        if len(self.class_counts) != self.n_l:
            problems.append(f"class_counts has {len(self.class_counts)} levels, n_l={self.n_l}")
        if len(self.beta) != self.n_l:
            problems.append(f"beta has {len(self.beta)} entries, n_l={self.n_l}")
        if min([self.w_rec, self.w_q, self.w_p, self.w_adv, self.w_o, self.commitment] + self.beta) < 0:
            problems.append("loss weights must be >= 0")
        if self.kernel_size % 2 != 1:
            problems.append("kernel_size must be odd")
        if problems:
            raise ValueError("invalid CodecConfig: " + "; ".join(problems))

    @property
    def L_p(self) -> int:
        return self.n_l * self.n_p

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        return cls(**d)


@dataclass
class Imageome:
    """Quantized code sequence of one specimen; level 1 is the root-most segment."""
    phylo: np.ndarray      # [n_l, n_p] int
    nonphylo: np.ndarray   # [n_np] int
    zq_p: np.ndarray | None = field(default=None, repr=False, compare=False)
    zq_np: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.phylo = np.asarray(self.phylo, dtype=np.int64)
        self.nonphylo = np.asarray(self.nonphylo, dtype=np.int64)

    def __eq__(self, other):
        return (isinstance(other, Imageome) and np.array_equal(self.phylo, other.phylo)
                and np.array_equal(self.nonphylo, other.nonphylo))

    @property
    def n_l(self) -> int:
        return self.phylo.shape[0]

    @property
    def n_p(self) -> int:
        return self.phylo.shape[1]

    @property
    def n_np(self) -> int:
        return self.nonphylo.shape[0]

    def layout(self) -> tuple:
        return (self.n_l, self.n_p, self.n_np)

    def flat(self) -> np.ndarray:
        """Canonical order: phylo levels 1..n_l, then the non-phylo segment."""
        return np.concatenate([self.phylo.ravel(), self.nonphylo])

    @classmethod
    def from_flat(cls, seq, n_l: int, n_p: int, n_np: int) -> "Imageome":
        seq = np.asarray(seq, dtype=np.int64)
        if seq.shape != (n_l * n_p + n_np,):
            raise ValueError(f"sequence length {seq.shape} does not match layout {(n_l, n_p, n_np)}")
        return cls(seq[:n_l * n_p].reshape(n_l, n_p).copy(), seq[n_l * n_p:].copy())

    def copy(self) -> "Imageome":
        return Imageome(self.phylo.copy(), self.nonphylo.copy())

    def to_record(self, id, species, **extra) -> dict:
        rec = {"id": id, "species": species, "phylo": self.phylo.tolist(),
               "nonphylo": self.nonphylo.tolist()}
        rec.update(extra)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Imageome":
        return cls(np.array(rec["phylo"]).reshape(len(rec["phylo"]), -1), rec["nonphylo"])


@dataclass
class Descriptor:
    level: int
    vectors: np.ndarray  # [level * n_p, d]


@dataclass
class EncoderOutput:
    z_p: nx.Tensor
    z_np: nx.Tensor
    zq_p: nx.Tensor          # straight-through quantized, [N, n_l*n_p, d]
    zq_np: nx.Tensor         # [N, n_np, d]
    idx_p: np.ndarray        # [N, n_l, n_p]
    idx_np: np.ndarray       # [N, n_np]
    loss_q: nx.Tensor
    conv_out: nx.Tensor

    def imageomes(self) -> list:
        return [Imageome(p, q, zp, zn) for p, q, zp, zn in
                zip(self.idx_p, self.idx_np, self.zq_p.data, self.zq_np.data)]


# parameters -----------------------------------------------------------------------

ADV_PREFIX = "adv."


def _dense(rng, fan_in, fan_out):
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)), np.zeros(fan_out)


def init_params(cfg: CodecConfig, seed: int) -> dict:
    """Fresh parameter tensors keyed by name; ``adv.*`` belong to the adversary."""
    rng = np.random.default_rng(seed)
    k, H, W = cfg.kernel_size, cfg.H, cfg.W
    shapes = {}

    def conv(name, cin, cout):
        shapes[name + ".w"] = rng.normal(0.0, 1.0 / np.sqrt(k * k * cin), size=(k, k, cin, cout))
        shapes[name + ".b"] = np.zeros(cout)

    def mlp(name, fan_in, hidden, fan_out):
        shapes[name + ".w1"], shapes[name + ".b1"] = _dense(rng, fan_in, hidden)
        shapes[name + ".w2"], shapes[name + ".b2"] = _dense(rng, hidden, fan_out)

    conv("pe.conv", cfg.C_in, cfg.C_in)
    mlp("pe.p", H * W * cfg.C_p, cfg.mlp_hidden, cfg.L_p * cfg.d)
    mlp("pe.np", H * W * (cfg.C_in - cfg.C_p), cfg.mlp_hidden, cfg.n_np * cfg.d)
    for i in range(1, cfg.n_l + 1):
        mlp(f"head.{i}", i * cfg.n_p * cfg.d, cfg.head_hidden, cfg.class_counts[i - 1])
    mlp("adv.map", cfg.n_np * cfg.d, cfg.mlp_hidden, cfg.L_p * cfg.d)
    if not cfg.share_heads:
        for i in range(1, cfg.n_l + 1):
            mlp(f"adv.head.{i}", i * cfg.n_p * cfg.d, cfg.head_hidden, cfg.class_counts[i - 1])
    mlp("pd.p", cfg.L_p * cfg.d, cfg.mlp_hidden, H * W * cfg.C_p)
    mlp("pd.np", cfg.n_np * cfg.d, cfg.mlp_hidden, H * W * (cfg.C_in - cfg.C_p))
    conv("pd.conv", cfg.C_in, cfg.C_in)
    return {name: nx.Tensor(v, requires_grad=True, name=name) for name, v in shapes.items()}


def _mlp(params, name, x, slope):
    h = nx.leaky_relu(nx.linear(x, params[name + ".w1"], params[name + ".b1"]), slope)
    return nx.linear(h, params[name + ".w2"], params[name + ".b2"])


def _batch(x, cfg: CodecConfig) -> nx.Tensor:
    x = nx.as_tensor(x)
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4 or x.shape[1:] != (cfg.H, cfg.W, cfg.C_in):
        raise nx.ShapeError("pe_forward", x.shape, (cfg.H, cfg.W, cfg.C_in))
    return x


# forward blocks ---------------------------------------------------------------------

def encode(x, cfg: CodecConfig, params: dict, cb: Codebook) -> EncoderOutput:
    """Batched Phylo-Encoder: conv, channel split, two MLPs, shared quantizer."""
    x = _batch(x, cfg)
    n = x.shape[0]
    h = nx.add(nx.conv2d(x, params["pe.conv.w"]), params["pe.conv.b"])
    hp = h[:, :, :, :cfg.C_p].reshape(n, -1)
    hnp = h[:, :, :, cfg.C_p:].reshape(n, -1)
    z_p = _mlp(params, "pe.p", hp, cfg.leaky_slope).reshape(n * cfg.L_p, cfg.d)
    z_np = _mlp(params, "pe.np", hnp, cfg.leaky_slope).reshape(n * cfg.n_np, cfg.d)
    # one quantizer call over both segments keeps the loss a mean over all vectors
    q = quantize(nx.concat([z_p, z_np], axis=0), cb, cfg.commitment, cfg.quant_distance)
    m = n * cfg.L_p
    zq_p = q.zq[:m].reshape(n, cfg.L_p, cfg.d)
    zq_np = q.zq[m:].reshape(n, cfg.n_np, cfg.d)
    return EncoderOutput(
        z_p=z_p.reshape(n, cfg.L_p, cfg.d), z_np=z_np.reshape(n, cfg.n_np, cfg.d),
        zq_p=zq_p, zq_np=zq_np,
        idx_p=q.indices[:m].reshape(n, cfg.n_l, cfg.n_p),
        idx_np=q.indices[m:].reshape(n, cfg.n_np),
        loss_q=q.loss_q, conv_out=h)


def pe_forward(x, cfg: CodecConfig, params: dict, cb: Codebook):
    """Encode one feature map ``[H, W, C_in]`` -> (Imageome, loss_q, (z_p, z_np))."""
    out = encode(x, cfg, params, cb)
    if out.idx_p.shape[0] != 1:
        raise nx.ShapeError("pe_forward (single specimen)", nx.as_tensor(x).shape)
    im = out.imageomes()[0]
    return im, out.loss_q, (out.z_p.data[0], out.z_np.data[0])


def build_descriptor(im: Imageome, cb: Codebook, i: int) -> Descriptor:
    """Concatenated code vectors of phylo segments 1..i."""
    if not 1 <= i <= im.n_l:
        raise ValueError(f"descriptor level must be in 1..{im.n_l}, got {i}")
    return Descriptor(i, cb.lookup(im.phylo[:i].ravel()))


def imageome_vectors(ims, cb: Codebook):
    """Stack code vectors of Imageomes -> ([N, n_l*n_p, d], [N, n_np, d]) arrays."""
    zp = np.stack([cb.lookup(im.phylo.ravel()) for im in ims])
    znp = np.stack([cb.lookup(im.nonphylo) for im in ims])
    return zp, znp


def _levels_logits(params, prefix, zq_flat, cfg: CodecConfig):
    """Logits of every level head applied to the level's descriptor prefix."""
    out = []
    for i in range(1, cfg.n_l + 1):
        out.append(_mlp(params, f"{prefix}{i}", zq_flat[:, :i * cfg.n_p * cfg.d], cfg.leaky_slope))
    return out


def head_logits(zq_p, cfg: CodecConfig, params: dict) -> list:
    zq_p = nx.as_tensor(zq_p)
    return _levels_logits(params, "head.", zq_p.reshape(zq_p.shape[0], -1), cfg)


def _check_labels(labels, cfg: CodecConfig) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim == 1:
        labels = labels[None, :]
    if labels.shape[1] != cfg.n_l:
        raise ValueError(f"labels need {cfg.n_l} levels, got shape {labels.shape}")
    for i, k in enumerate(cfg.class_counts):
        col = labels[:, i]
        if col.size and (col.min() < 0 or col.max() >= k):
            raise ValueError(f"level {i + 1} label out of range [0, {k})")
    return labels


def _weighted_ce(logits, labels, beta):
    total = None
    for i, lg in enumerate(logits):
        if beta[i] == 0:
            continue
        term = nx.cross_entropy(lg, labels[:, i]) * beta[i]
        total = term if total is None else total + term
    return total if total is not None else nx.Tensor(0.0)


def phylo_loss(zq_p, labels, cfg: CodecConfig, params: dict) -> nx.Tensor:
    """Sum over levels of beta_i * CE(head_i(D_i), c_i)."""
    labels = _check_labels(labels, cfg)
    return _weighted_ce(head_logits(zq_p, cfg, params), labels, cfg.beta)


def adversary_logits(zq_np, cfg: CodecConfig, params: dict) -> list:
    zq_np = nx.as_tensor(zq_np)
    fake = _mlp(params, "adv.map", zq_np.reshape(zq_np.shape[0], -1), cfg.leaky_slope)
    prefix = "head." if cfg.share_heads else "adv.head."
    return _levels_logits(params, prefix, fake, cfg)


def adv_loss(zq_np, labels, cfg: CodecConfig, params: dict) -> nx.Tensor:
    """Sum over levels of beta_i * CE(head_i(MLP_adv(z_np^Q)), c_i)."""
    labels = _check_labels(labels, cfg)
    return _weighted_ce(adversary_logits(zq_np, cfg, params), labels, cfg.beta)


def ortho_loss(kernel) -> nx.Tensor:
    """||G - I||_F^2 for the Gram matrix G of unit-normalized flattened kernels.

    ``kernel`` is ``[k, k, C_in, C_out]``; each output channel is one row.
    """
    kernel = nx.as_tensor(kernel)
    k1, k2, cin, cout = kernel.shape
    rows = nx.transpose(kernel.reshape(k1 * k2 * cin, cout))
    norms = nx.sqrt(nx.tsum(nx.square(rows), axis=1, keepdims=True) + 1e-12)
    unit = rows / norms
    gram = nx.matmul(unit, nx.transpose(unit))
    return nx.tsum(nx.square(gram - np.eye(cout)))


def decode(zq_p, zq_np, cfg: CodecConfig, params: dict) -> nx.Tensor:
    """Batched Phylo-Decoder -> x_hat ``[N, H, W, C_in]``."""
    zq_p, zq_np = nx.as_tensor(zq_p), nx.as_tensor(zq_np)
    if zq_p.ndim == 2:
        zq_p, zq_np = zq_p.reshape(1, *zq_p.shape), zq_np.reshape(1, *zq_np.shape)
    if zq_p.shape[1:] != (cfg.L_p, cfg.d) or zq_np.shape[1:] != (cfg.n_np, cfg.d):
        raise nx.ShapeError("pd_forward", zq_p.shape, zq_np.shape)
    n = zq_p.shape[0]
    hp = _mlp(params, "pd.p", zq_p.reshape(n, -1), cfg.leaky_slope).reshape(n, cfg.H, cfg.W, cfg.C_p)
    hnp = _mlp(params, "pd.np", zq_np.reshape(n, -1), cfg.leaky_slope)
    hnp = hnp.reshape(n, cfg.H, cfg.W, cfg.C_in - cfg.C_p)
    h = nx.concat([hp, hnp], axis=3)
    return nx.add(nx.conv2d(h, params["pd.conv.w"]), params["pd.conv.b"])


def pd_forward(im: Imageome, cfg: CodecConfig, params: dict, cb: Codebook) -> np.ndarray:
    """Decode one Imageome to a feature map ``[H, W, C_in]``."""
    if im.layout() != (cfg.n_l, cfg.n_p, cfg.n_np):
        raise nx.ShapeError("pd_forward", im.layout(), (cfg.n_l, cfg.n_p, cfg.n_np))
    zp, znp = imageome_vectors([im], cb)
    return decode(zp, znp, cfg, params).data[0]


# objective ------------------------------------------------------------------------

LOSS_TERMS = ("rec", "q", "p", "o", "adv")


def loss_terms(x, labels, cfg: CodecConfig, params: dict, cb: Codebook, enc: EncoderOutput = None):
    """Unweighted loss tensors keyed by term name, plus the encoder output."""
    x = _batch(x, cfg)
    enc = enc or encode(x, cfg, params, cb)
    xhat = decode(enc.zq_p, enc.zq_np, cfg, params)
    terms = {
        "rec": nx.mean_abs_error(xhat, x),
        "q": enc.loss_q,
        "p": phylo_loss(enc.zq_p, labels, cfg, params),
        "o": ortho_loss(params["pe.conv.w"]),
        "adv": adv_loss(enc.zq_np, labels, cfg, params),
    }
    return terms, enc


def total_loss(x, labels, cfg: CodecConfig, params: dict, cb: Codebook):
    """Main-player objective and its signed per-term breakdown.

    ``total = w_rec*rec + w_q*q + w_p*p + w_o*o - w_adv*adv``. The adversary's
    own objective is ``+w_adv*adv`` (see :func:`adversary_objective`).
    """
    terms, _ = loss_terms(x, labels, cfg, params, cb)
    return combine(terms, cfg)


def combine(terms: dict, cfg: CodecConfig):
    weights = {"rec": cfg.w_rec, "q": cfg.w_q, "p": cfg.w_p, "o": cfg.w_o, "adv": -cfg.w_adv}
    total = None
    breakdown = {}
    for name in LOSS_TERMS:
        part = terms[name] * weights[name]
        breakdown[name] = float(part.data)
        total = part if total is None else total + part
    breakdown["total"] = float(total.data)
    return total, breakdown


def adversary_objective(zq_np, labels, cfg: CodecConfig, params: dict) -> nx.Tensor:
    return adv_loss(zq_np, labels, cfg, params) * cfg.w_adv


# model bundle / checkpoints --------------------------------------------------------

class PhyloCodec:
    """Config + parameters + codebook, with checkpoint IO."""

    def __init__(self, cfg: CodecConfig, params: dict, codebook: Codebook, extra: dict | None = None):
        self.cfg = cfg
        self.params = params
        self.codebook = codebook
        self.extra = extra or {}

    @classmethod
    def create(cls, cfg: CodecConfig, seed: int, extra=None) -> "PhyloCodec":
        return cls(cfg, init_params(cfg, seed), init_codebook(cfg.n_q, cfg.d, seed + 1), extra)

    def adversary_params(self) -> list:
        return [p for n, p in self.params.items() if n.startswith(ADV_PREFIX)]

    def main_params(self) -> list:
        return [p for n, p in self.params.items() if not n.startswith(ADV_PREFIX)] + [self.codebook.codes]

    def encode(self, x, batch_size: int = 256) -> list:
        """Imageomes (with code vectors attached) for a stack of feature maps."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        out = []
        for s in range(0, x.shape[0], batch_size):
            out.extend(encode(x[s:s + batch_size], self.cfg, self.params, self.codebook).imageomes())
        return out

    def decode(self, ims) -> np.ndarray:
        zp, znp = imageome_vectors(ims, self.codebook)
        return decode(zp, znp, self.cfg, self.params).data

    def predict_levels(self, x, batch_size: int = 256) -> np.ndarray:
        """Argmax class of each descriptor head, ``[N, n_l]``."""
        x = np.asarray(x, dtype=np.float64)
        preds = []
        for s in range(0, x.shape[0], batch_size):
            enc = encode(x[s:s + batch_size], self.cfg, self.params, self.codebook)
            logits = head_logits(enc.zq_p.data, self.cfg, self.params)
            preds.append(np.stack([lg.data.argmax(axis=1) for lg in logits], axis=1))
        return np.concatenate(preds) if preds else np.zeros((0, self.cfg.n_l), dtype=np.int64)

    def state(self) -> dict:
        s = {n: p.data.copy() for n, p in self.params.items()}
        s["codebook"] = self.codebook.codes.data.copy()
        return s

    def save(self, directory):
        d = Path(directory)
        (d / "params").mkdir(parents=True, exist_ok=True)
        for name, p in self.params.items():
            ptn.save(d / "params" / f"{name}.ptn", p.data)
        self.codebook.save(d / "codebook")
        manifest = {"schema": 1, "codec": self.cfg.to_dict(), "params": sorted(self.params),
                    "codebook": {"n_q": self.codebook.n_q, "d": self.codebook.d,
                                 "seed": self.codebook.seed}}
        manifest.update(self.extra)
        (d / "model.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "PhyloCodec":
        d = Path(directory)
        manifest = json.loads((d / "model.json").read_text())
        cfg = CodecConfig.from_dict(manifest["codec"])
        params = {n: nx.Tensor(ptn.load(d / "params" / f"{n}.ptn"), requires_grad=True, name=n)
                  for n in manifest["params"]}
        extra = {k: v for k, v in manifest.items() if k not in ("schema", "codec", "params", "codebook")}
        return cls(cfg, params, Codebook.load(d / "codebook"), extra)
