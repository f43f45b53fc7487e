"""Alternating adversarial training loop for the phylo codec."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .codec import CodecConfig, PhyloCodec, adversary_objective, combine, encode, loss_terms
from .phylogeny import LevelMap
from .quantizer import dead_codes

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, breakdown: dict, step: int):
        self.breakdown = breakdown
        self.step = step
        terms = ", ".join(f"{k}={v!r}" for k, v in breakdown.items())
        super().__init__(f"non-finite loss at step {step}: {terms}")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    adversary_learning_rate: float = 1e-3
    adversary_steps_per_main_step: int = 1
    seed: int = 0
    checkpoint_interval: int = 0   # epochs between snapshots; 0 keeps only the final one
    use_adversary: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0 or self.adversary_learning_rate < 0:
            raise ValueError("learning rates must be non-negative")
        if self.epochs < 0 or self.adversary_steps_per_main_step < 0:
            raise ValueError("epochs and adversary steps must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    """In-memory specimens: feature maps ``x`` [N, H, W, C], ids, species, split tags."""
    ids: list
    species: list
    x: np.ndarray
    split: list | None = None

    def __len__(self):
        return len(self.ids)

    def subset(self, mask) -> "Dataset":
        idx = np.flatnonzero(np.asarray(mask))
        split = None if self.split is None else [self.split[i] for i in idx]
        return Dataset([self.ids[i] for i in idx], [self.species[i] for i in idx],
                       self.x[idx], split)

    def where(self, split: str) -> "Dataset":
        return self.subset([s == split for s in self.split])


class Trainer:
    def __init__(self, model: PhyloCodec, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.opt_main = nx.Adam(model.main_params(), lr=cfg.learning_rate)
        self.opt_adv = nx.Adam(model.adversary_params(), lr=cfg.adversary_learning_rate)
        self.steps = 0

    def train_step(self, x, labels) -> dict:
        """(a) adversary descends w_adv*L_adv on frozen z_np^Q; (b) the rest descends total.

        The encoder does not depend on adversary parameters, so one encoding
        serves both phases.
        """
        if len(x) == 0:
            raise ValueError("empty batch")
        m = self.model
        ccfg = m.cfg
        enc = encode(x, ccfg, m.params, m.codebook)
        metrics = {}
        adversary_on = self.cfg.use_adversary and ccfg.w_adv > 0
        if adversary_on:
            zq_np = nx.Tensor(enc.zq_np.data)
            adv_params = m.adversary_params()
            for _ in range(self.cfg.adversary_steps_per_main_step):
                obj = adversary_objective(zq_np, labels, ccfg, m.params)
                self.opt_adv.step(nx.grad(obj, adv_params))
        terms, enc = loss_terms(x, labels, ccfg, m.params, m.codebook, enc)
        if not self.cfg.use_adversary:
            terms["adv"] = nx.Tensor(0.0)
        total, breakdown = combine(terms, ccfg)
        if not all(math.isfinite(v) for v in breakdown.values()):
            raise TrainingDiverged(breakdown, self.steps)
        self.opt_main.step(nx.grad(total, self.opt_main.params))
        self.steps += 1
        metrics.update(breakdown)
        metrics["dead_codes"] = dead_codes(np.concatenate([enc.idx_p.ravel(), enc.idx_np.ravel()]),
                                           m.codebook.n_q)
        return metrics


def train_step(batch, model: PhyloCodec, opt_state: Trainer):
    """Functional form: ``(x, labels)`` batch -> (model, metrics)."""
    x, labels = batch
    return model, opt_state.train_step(x, labels)


def level_accuracy(model: PhyloCodec, x, labels) -> list:
    """Held-out accuracy of each descriptor head on its own level."""
    if len(x) == 0:
        return [float("nan")] * model.cfg.n_l
    pred = model.predict_levels(x)
    return [float(np.mean(pred[:, i] == labels[:, i])) for i in range(model.cfg.n_l)]


def _check_species(dataset: Dataset, levelmap: LevelMap):
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    missing = sorted(set(dataset.species) - set(levelmap.species))
    if missing:
        raise ValueError(f"dataset species missing from level map: {missing}")


def fit(train: Dataset, levelmap: LevelMap, codec_cfg: CodecConfig, train_cfg: TrainConfig,
        heldout: Dataset | None = None, out_dir=None, extra: dict | None = None,
        model: PhyloCodec | None = None):
    """Train a codec; returns ``(model, log_records)``.

    With ``out_dir`` the final checkpoint goes to ``out_dir/checkpoint`` (and
    periodic ones to ``out_dir/checkpoint-epochNNNN``) and the per-epoch log to
    ``out_dir/train_log.jsonl``.
    """
    _check_species(train, levelmap)
    if heldout is not None and len(heldout):
        _check_species(heldout, levelmap)
    if codec_cfg.class_counts != levelmap.counts:
        raise ValueError(f"codec class_counts {codec_cfg.class_counts} != level map {levelmap.counts}")
    if model is None:
        model = PhyloCodec.create(codec_cfg, train_cfg.seed, extra)
    trainer = Trainer(model, train_cfg)
    rng = np.random.default_rng(train_cfg.seed + 7919)
    y = levelmap.label_matrix(train.species)
    y_held = levelmap.label_matrix(heldout.species) if heldout is not None and len(heldout) else None
    out = Path(out_dir) if out_dir is not None else None
    log_f = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_f = open(out / "train_log.jsonl", "w")
    records = []
    try:
        for epoch in range(1, train_cfg.epochs + 1):
            order = rng.permutation(len(train))
            sums: dict = {}
            nb = 0
            for s in range(0, len(order), train_cfg.batch_size):
                b = order[s:s + train_cfg.batch_size]
                metrics = trainer.train_step(train.x[b], y[b])
                for k, v in metrics.items():
                    sums[k] = sums.get(k, 0.0) + v
                nb += 1
            rec = {"epoch": epoch, **{k: v / nb for k, v in sums.items()}}
            if y_held is not None:
                rec["heldout_accuracy"] = level_accuracy(model, heldout.x, y_held)
            records.append(rec)
            if log_f is not None:
                log_f.write(json.dumps(rec, sort_keys=True) + "\n")
            log.debug("epoch %d %s", epoch, rec)
            if out is not None and train_cfg.checkpoint_interval and epoch % train_cfg.checkpoint_interval == 0:
                model.save(out / f"checkpoint-epoch{epoch:04d}")
    finally:
        if log_f is not None:
            log_f.close()
    if out is not None:
        model.save(out / "checkpoint")
    return model, records
