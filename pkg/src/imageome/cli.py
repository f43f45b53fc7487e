"""Command-line interface: ``imageome <subcommand> [flags]``.

Every subcommand writes its artifacts under ``--out-dir`` together with a
``manifest.json`` (config hash, seed, git describe string, artifact sha256).
Exit codes: 0 success, 1 runtime error, 2 usage error.
"""
import os

# Must run before numpy is imported so BLAS picks the cap up.
_threads = os.environ.get("IMAGEOME_THREADS")
if _threads is not None and _threads.strip().isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _threads.strip()

import argparse  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import subprocess  # noqa: E402
import sys  # noqa: E402
from dataclasses import asdict, dataclass, field, fields  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from . import analysis as an  # noqa: E402
from .codec import CodecConfig, Imageome, PhyloCodec, imageome_vectors  # noqa: E402
from .numerics import ptn  # noqa: E402
from .phylogeny import (LevelMap, ancestor_distance_matrix, discretize,  # noqa: E402
                        gt_distance_matrix, parse_newick, read_newick)
from .sampler import fit_sampler, load_samplers, save_samplers  # noqa: E402
from .synthdata import SynthSpec, make_dataset, read_manifest, write_manifest  # noqa: E402
from .trainer import TrainConfig, fit  # noqa: E402

log = logging.getLogger("imageome")
SCHEMA = 1


class UsageError(Exception):
    pass


# run configuration -------------------------------------------------------------------

CODEC_KEYS = {f.name for f in fields(CodecConfig)} - {"H", "W", "C_in", "n_l", "class_counts"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}
SYNTH_KEYS = {"H", "W", "C_in", "specimens_per_species", "trait_scale", "brightness", "noise",
              "holdout", "split_seed"}


@dataclass
class RunConfig:
    """Everything a run needs; the JSON file form round-trips exactly."""
    seed: int = 0
    n_l: int = 3
    tree: str | None = None
    manifest: str | None = None
    synth: dict = field(default_factory=dict)
    codec: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, allowed in (("synth", SYNTH_KEYS), ("codec", CODEC_KEYS), ("train", TRAIN_KEYS)):
            unknown = sorted(set(getattr(self, name)) - allowed)
            if unknown:
                raise UsageError(f"unknown {name} keys in config: {unknown}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise UsageError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"config {path} is not valid JSON: {e}") from None
        cfg = cls.from_dict(d)
        # paths in a config file are relative to the file
        for key in ("tree", "manifest"):
            v = getattr(cfg, key)
            if v is not None and not Path(v).is_absolute():
                setattr(cfg, key, str((path.parent / v).resolve()))
        return cfg

    def hash(self) -> str:
        return hashlib.sha256(_canonical(self.to_dict()).encode()).hexdigest()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    for key in ("tree", "manifest"):
        v = getattr(args, key, None)
        if v is not None:
            setattr(cfg, key, str(Path(v).resolve()))
    return cfg


# provenance ------------------------------------------------------------------------

def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(out: Path, command: str, cfg: RunConfig, artifacts):
    arts = {}
    for p in sorted({Path(a) for a in artifacts}):
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for q in files:
            arts[str(q.relative_to(out))] = sha256_file(q)
    doc = {"schema": SCHEMA, "command": command, "version": __version__,
           "config_hash": cfg.hash(), "seed": cfg.seed, "git_describe": git_describe(),
           "artifacts": arts}
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# helpers ---------------------------------------------------------------------------

def _need(value, flag):
    if value is None:
        raise UsageError(f"{flag} is required (pass it as a flag or set it in --config)")
    return value


def _out_dir(args) -> Path:
    out = Path(_need(args.out_dir, "--out-dir"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _tree_and_levels(cfg: RunConfig):
    tree = read_newick(_need(cfg.tree, "--tree"))
    return tree, discretize(tree, cfg.n_l)


def _load_model(args) -> PhyloCodec:
    path = Path(_need(args.checkpoint, "--checkpoint"))
    if not (path / "model.json").exists():
        raise FileNotFoundError(f"no checkpoint at {path} (model.json missing)")
    return PhyloCodec.load(path)


def _model_tree(model: PhyloCodec):
    if "tree" not in model.extra or "levelmap" not in model.extra:
        raise ValueError("checkpoint lacks tree/levelmap metadata")
    return parse_newick(model.extra["tree"]), LevelMap.from_dict(model.extra["levelmap"])


def read_imageomes(path):
    recs = []
    with open(path) as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{n}: invalid JSON ({e})") from None
            recs.append(rec)
    return recs


def _records_meta(recs):
    if not recs:
        raise ValueError("imageome file is empty")
    first = recs[0]
    return int(first["n_q"]), Imageome.from_record(first).layout()


def _select(recs, split):
    if split is None or split == "all":
        return recs
    return [r for r in recs if r.get("split") == split]


def _grouped_histograms(recs, key, n_q):
    ims = [Imageome.from_record(r) for r in recs]
    return an.class_histograms(an.group_by(ims, [key(r) for r in recs]), n_q)


# subcommands -----------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig):
    out = _out_dir(args)
    tree, _ = _tree_and_levels(cfg)
    s = dict(cfg.synth)
    holdout = s.pop("holdout", [])
    split_seed = s.pop("split_seed", cfg.seed)
    spec = SynthSpec(tree, cfg.n_l, seed=cfg.seed, **s)
    train, test, unseen = make_dataset(spec, split_seed, holdout)
    manifest = write_manifest([train, test, unseen], out)
    (out / "tree.nwk").write_text(tree.to_newick() + "\n")
    (out / "levelmap.json").write_text(json.dumps(spec.levelmap.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(train)} train, {len(test)} test, {len(unseen)} unseen specimens to {manifest}")
    return [manifest, out / "tensors", out / "tree.nwk", out / "levelmap.json"]


def codec_config(cfg: RunConfig, x_shape, levelmap: LevelMap) -> CodecConfig:
    H, W, C = x_shape
    c = dict(cfg.codec)
    return CodecConfig(H=H, W=W, C_in=C, n_l=cfg.n_l, class_counts=levelmap.counts, **c)


def cmd_train(args, cfg: RunConfig):
    out = _out_dir(args)
    tree, levelmap = _tree_and_levels(cfg)
    data = read_manifest(_need(cfg.manifest, "--manifest"))
    train, held = data.where("train"), data.where("test")
    ccfg = codec_config(cfg, train.x.shape[1:], levelmap)
    tcfg = TrainConfig(seed=cfg.seed, **cfg.train)
    extra = {"tree": tree.to_newick(), "levelmap": levelmap.to_dict(), "seed": cfg.seed,
             "train": tcfg.to_dict()}
    model, records = fit(train, levelmap, ccfg, tcfg, heldout=held, out_dir=out, extra=extra)
    if records:
        print(f"trained {len(records)} epochs; final loss {records[-1]['total']:.4f}; "
              f"held-out accuracy {records[-1].get('heldout_accuracy')}")
    return [out / "checkpoint", out / "train_log.jsonl"]


def cmd_encode(args, cfg: RunConfig):
    out = _out_dir(args)
    model = _load_model(args)
    data = read_manifest(_need(cfg.manifest, "--manifest"))
    ims = model.encode(data.x)
    path = out / "imageomes.jsonl"
    with open(path, "w") as f:
        for i, im in enumerate(ims):
            rec = im.to_record(data.ids[i], data.species[i], split=data.split[i],
                               n_q=model.codebook.n_q, schema=SCHEMA)
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"encoded {len(ims)} specimens to {path}")
    return [path]


def _imageomes_path(args):
    return Path(_need(args.imageomes, "--imageomes"))


def cmd_analyze(args, cfg: RunConfig):
    out = _out_dir(args)
    model = _load_model(args)
    tree, levelmap = _model_tree(model)
    recs = _select(read_imageomes(_imageomes_path(args)), args.split)
    recs = [r for r in recs if r["species"] in levelmap.species]
    if not recs:
        raise ValueError(f"no imageomes in split {args.split!r}")
    n_q = model.codebook.n_q
    n_l = levelmap.n_l
    hists = _grouped_histograms(recs, lambda r: r["species"], n_q)
    species = [s for s in levelmap.species if s in hists]
    gt = gt_distance_matrix(tree, species)
    (out / "distances").mkdir(exist_ok=True)
    gt.to_csv(out / "distances" / "gt.csv")
    artifacts = [out / "distances"]
    rows = []

    def correlate(emb, ref, segment, level, gt_name):
        n_pairs = emb.upper().size
        rho = an.spearman(emb, ref) if n_pairs >= 3 else None
        rows.append({"segment": segment, "level": level, "gt": gt_name, "n_pairs": n_pairs,
                     "spearman": rho})

    for seg in ("phylo", "nonphylo"):
        emb = an.embedding_distance_matrix(hists, seg, species)
        emb.to_csv(out / "distances" / f"{seg}.csv")
        correlate(emb, gt, seg, n_l, "species")
    # level rows: level-i descriptor distances between level-i classes vs ancestor distances
    for lvl in range(1, n_l + 1):
        seg = f"level:{lvl}"
        if lvl == n_l:
            cls_hists, labels, ref = hists, species, gt
        else:
            cls_hists = _grouped_histograms(recs, lambda r: str(levelmap.labels(r["species"])[lvl - 1]), n_q)
            ref_full = ancestor_distance_matrix(tree, levelmap, lvl)
            labels = [c for c in ref_full.labels if c in cls_hists]
            ref = ref_full.reorder(labels)
        emb = an.embedding_distance_matrix(cls_hists, seg, labels)
        emb.to_csv(out / "distances" / f"level_{lvl}.csv")
        correlate(emb, ref, seg, lvl, "ancestor" if lvl < n_l else "species")
    corr = out / "correlations.csv"
    corr.write_text(an.correlations_csv(rows))
    hist_path = out / "histograms.json"
    doc = {"schema": SCHEMA, "split": args.split,
           "species": {s: hists[s].to_dict() for s in species},
           "entropy_bits": {s: {k: v.tolist() for k, v in zip(("phylo", "nonphylo"), an.location_entropy(hists[s]))}
                            for s in species}}
    hist_path.write_text(json.dumps(doc, sort_keys=True) + "\n")
    for r in rows:
        rho = "n/a" if r["spearman"] is None else f"{r['spearman']:.3f}"
        print(f"{r['segment']:>10} vs {r['gt']:<8} pairs={r['n_pairs']:<3} spearman={rho}")
    return artifacts + [corr, hist_path]


def cmd_translate(args, cfg: RunConfig):
    out = _out_dir(args)
    recs = {r["id"]: r for r in read_imageomes(_imageomes_path(args))}
    for sid in (args.src, args.tgt):
        if sid not in recs:
            raise ValueError(f"specimen id {sid!r} not found in imageomes")
    trace = an.translate(Imageome.from_record(recs[args.src]), Imageome.from_record(recs[args.tgt]))
    path = out / "trace.jsonl"
    path.write_text(trace.to_jsonl(args.src, args.tgt))
    artifacts = [path]
    if args.checkpoint:
        model = _load_model(args)
        (out / "trace").mkdir(exist_ok=True)
        for k, x in enumerate(model.decode(trace.snapshots)):
            ptn.save(out / "trace" / f"step{k}.ptn", x)
        artifacts.append(out / "trace")
    print(f"trace with {len(trace.snapshots)} snapshots written to {path}")
    return artifacts


def cmd_place_unseen(args, cfg: RunConfig):
    out = _out_dir(args)
    recs = read_imageomes(_imageomes_path(args))
    n_q, _ = _records_meta(recs)
    unseen_recs = [r for r in recs if r.get("split") == "unseen"]
    if not unseen_recs:
        raise ValueError("no imageomes with split 'unseen'")
    seen_recs = _select([r for r in recs if r.get("split") != "unseen"], args.split)
    unseen = _grouped_histograms(unseen_recs, lambda r: r["species"], n_q)
    seen = _grouped_histograms(seen_recs, lambda r: r["species"], n_q)
    segments = [args.segment] if args.segment else ["phylo", "nonphylo"]
    doc = {"schema": SCHEMA, "split": args.split, "placements": {}}
    for seg in segments:
        an.Segment.parse(seg)
        doc["placements"][seg] = {u: [[s, d] for s, d in an.place_unseen(h, seen, seg)]
                                  for u, h in sorted(unseen.items())}
    path = out / "placements.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    for seg, places in doc["placements"].items():
        for u, ranked in places.items():
            print(f"{seg:>10} {u}: " + ", ".join(f"{s}={d:.3f}" for s, d in ranked[:3]))
    return [path]


def cmd_sample(args, cfg: RunConfig):
    out = _out_dir(args)
    if args.samplers:
        samplers = load_samplers(args.samplers)
        artifacts = []
    else:
        recs = _select(read_imageomes(_imageomes_path(args)), args.split)
        n_q, _ = _records_meta(recs)
        if args.level is None:
            key = lambda r: r["species"]  # noqa: E731
        else:
            model = _load_model(args)
            _, levelmap = _model_tree(model)
            if not 1 <= args.level <= levelmap.n_l:
                raise UsageError(f"--level must be in 1..{levelmap.n_l}")
            key = lambda r: str(levelmap.labels(r["species"])[args.level - 1])  # noqa: E731
        groups: dict = {}
        for r in recs:
            groups.setdefault(key(r), []).append(Imageome.from_record(r))
        samplers = fit_sampler(groups, n_q, alpha=args.alpha)
        spath = out / "samplers.json"
        save_samplers(samplers, spath)
        artifacts = [spath]
    classes = [args.cls] if args.cls is not None else sorted(samplers)
    path = out / "samples.jsonl"
    decoded = []
    with open(path, "w") as f:
        for c in classes:
            if c not in samplers:
                raise ValueError(f"no sampler for class {c!r}; known: {sorted(samplers)}")
            for k, im in enumerate(samplers[c].sample(args.n, [cfg.seed, _stable_int(c)])):
                rec = im.to_record(f"{c}-sample{k:05d}", c, schema=SCHEMA)
                f.write(json.dumps(rec, sort_keys=True) + "\n")
                decoded.append(im)
    artifacts.append(path)
    if args.checkpoint and args.decode and decoded:
        model = _load_model(args)
        x = model.decode(decoded)
        (out / "samples").mkdir(exist_ok=True)
        for k, xi in enumerate(x):
            ptn.save(out / "samples" / f"{k:05d}.ptn", xi)
        artifacts.append(out / "samples")
    print(f"wrote {len(decoded)} samples for {len(classes)} class(es) to {path}")
    return artifacts


def _stable_int(s: str) -> int:
    return int.from_bytes(hashlib.sha256(str(s).encode()).digest()[:4], "little")


def cmd_export_embeddings(args, cfg: RunConfig):
    out = _out_dir(args)
    model = _load_model(args)
    _, levelmap = _model_tree(model)
    data = read_manifest(_need(cfg.manifest, "--manifest"))
    ims = model.encode(data.x)
    if args.kind == "codes":
        emb = [im.flat() for im in ims]
    else:
        zp, znp = imageome_vectors(ims, model.codebook)
        emb = list(np.concatenate([zp.reshape(len(ims), -1), znp.reshape(len(ims), -1)], axis=1))
    labels = [levelmap.labels(s) if s in levelmap.species else [-1] * levelmap.n_l for s in data.species]
    path = out / "embeddings.csv"
    an.export_embeddings(data.ids, data.species, labels, emb, path)
    print(f"wrote {len(ims)} embeddings to {path}")
    return [path]


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "encode": cmd_encode, "analyze": cmd_analyze,
    "translate": cmd_translate, "place-unseen": cmd_place_unseen, "sample": cmd_sample,
    "export-embeddings": cmd_export_embeddings,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out-dir", help="directory for artifacts")
    common.add_argument("--tree", help="Newick tree file")
    common.add_argument("--manifest", help="dataset manifest CSV")
    common.add_argument("--checkpoint", help="trained model directory")
    common.add_argument("--imageomes", help="imageomes JSONL from `encode`")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="imageome", description="Phylogeny-structured quantized embeddings.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    sub.add_parser("train", parents=[common], help="train a codec")
    sub.add_parser("encode", parents=[common], help="dataset -> imageomes JSONL")
    a = sub.add_parser("analyze", parents=[common], help="histograms, distances, correlations")
    a.add_argument("--split", default="test", help="specimen split to analyse (or 'all')")
    t = sub.add_parser("translate", parents=[common], help="code-swap trace between two specimens")
    t.add_argument("--src", required=True)
    t.add_argument("--tgt", required=True)
    u = sub.add_parser("place-unseen", parents=[common], help="rank seen species for each unseen one")
    u.add_argument("--segment", help="phylo | level:i | nonphylo (default: phylo and nonphylo)")
    u.add_argument("--split", default="test", help="split providing the seen-species histograms")
    s = sub.add_parser("sample", parents=[common], help="fit per-class samplers and draw imageomes")
    s.add_argument("--class", dest="cls", help="class to sample (default: every class)")
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--alpha", type=float, default=0.1)
    s.add_argument("--level", type=int, help="group by ancestor class at this level (default: species)")
    s.add_argument("--split", default="train")
    s.add_argument("--samplers", help="previously saved samplers.json")
    s.add_argument("--decode", action="store_true", help="decode samples with --checkpoint")
    e = sub.add_parser("export-embeddings", parents=[common], help="per-specimen embedding CSV")
    e.add_argument("--kind", choices=("codes", "vectors"), default="codes")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if _threads is not None and not (_threads.strip().isdigit() and int(_threads) > 0):
        parser.error(f"IMAGEOME_THREADS must be a positive integer, got {_threads!r}")
    if getattr(args, "n", 0) is not None and getattr(args, "n", 0) < 0:
        parser.error("--n must be non-negative")
    try:
        cfg = resolve_config(args)
        artifacts = COMMANDS[args.command](args, cfg)
        out = Path(args.out_dir)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        write_run_manifest(out, args.command, cfg, list(artifacts) + [out / "config.json"])
    except UsageError as e:
        parser.error(str(e))
    except (OSError, ValueError, KeyError, RuntimeError) as e:
        print(f"imageome {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
