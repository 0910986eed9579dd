"""Command-line surface.

One JSON config plus flag overrides (flags win) drives every stage; all
randomness descends from config.seed through named streams, so rerunning
a command with the same config writes byte-identical artifacts.

Artifact layout under the workdir (SLICESEQ_WORKDIR overrides the config
value, --workdir overrides both):

    raw/            gen-synthetic: slice stacks + manifests + truth.json
    diffusion.ckp   diffusion-train
    emb/            encode: representation stacks + manifests
    book.pbk        cluster
    model.ckp       train (best validation-AUC epoch)
    train_log.csv   train
    metrics_<split>.json    eval
    explain/        heatmap.csv, ranking.csv, representatives.json

Exit codes: 0 success, 2 bad usage/config, 3 data error, 4 numerical
failure.
"""

import argparse
import json
import os
import sys
from dataclasses import fields

import numpy as np

from . import diffusion, formats, fusion, metrics, pipeline, prototypes
from .errors import DataError, NumericalError
from .pipeline import RunConfig

WORKDIR_ENV = "SLICESEQ_WORKDIR"
EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="JSON config file")
    parser.add_argument("--workdir", metavar="DIR", help="artifact root (beats env and config)")
    for f in fields(RunConfig):
        if f.name == "workdir":
            continue
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f.name, type=f.type if f.type in (int, float) else str,
                            default=None, metavar=f.name.upper(),
                            help=f"override config {f.name} (default {f.default})")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="sliceseq",
        description="slice-sequence scoring pipeline: synthesize, encode, cluster, train, explain",
    )
    sub = p.add_subparsers(dest="cmd", required=True)
    specs = {
        "gen-synthetic": "generate a synthetic slice corpus with known lesion prototypes",
        "diffusion-train": "train the denoising autoencoder on the train split",
        "encode": "encode raw slices into representation files with the trained encoder",
        "cluster": "fit spherical k-means prototypes on the train-split representations",
        "train": "train the clustering transformer + fusion head",
        "eval": "evaluate a checkpoint on one split",
        "explain": "export heatmap, cluster ranking, and representative slices",
    }
    for name, help_text in specs.items():
        sp = sub.add_parser(name, help=help_text, description=help_text)
        _add_config_flags(sp)
        if name in ("eval", "explain"):
            sp.add_argument("--split", choices=pipeline.SPLITS, default="test")
        if name == "explain":
            sp.add_argument("--top-n", dest="top_n", type=int, default=3,
                            help="representatives per cluster (default 3)")
    return p


def resolve_config(args) -> RunConfig:
    raw: dict = {}
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"config file not found: {args.config}")
        except json.JSONDecodeError as exc:
            raise DataError(f"{args.config}: invalid JSON: {exc}")
        if not isinstance(raw, dict):
            raise DataError(f"{args.config}: config must be a JSON object")
    for f in fields(RunConfig):
        if f.name == "workdir":
            continue
        value = getattr(args, f.name, None)
        if value is not None:
            raw[f.name] = value
    cfg = RunConfig.from_dict(raw)
    if args.workdir:
        cfg.workdir = args.workdir
    elif os.environ.get(WORKDIR_ENV):
        cfg.workdir = os.environ[WORKDIR_ENV]
    return cfg


class Paths:
    def __init__(self, cfg: RunConfig):
        w = cfg.workdir
        self.raw_dir = os.path.join(w, "raw")
        self.emb_dir = os.path.join(w, "emb")
        self.diffusion_ckpt = os.path.join(w, "diffusion.ckp")
        self.book = os.path.join(w, "book.pbk")
        self.model_ckpt = os.path.join(w, "model.ckp")
        self.train_log = os.path.join(w, "train_log.csv")
        self.explain_dir = os.path.join(w, "explain")

    def metrics_json(self, split: str) -> str:
        return os.path.join(os.path.dirname(self.book), f"metrics_{split}.json")


def _require(path: str, hint: str) -> str:
    if not os.path.exists(path):
        raise DataError(f"missing {path}; run `sliceseq {hint}` first")
    return path


def _load_split_records(data_dir: str, split: str, book=None):
    manifest = pipeline.load_manifest(data_dir, split)
    records = pipeline.load_records(manifest, book=book)
    if not records:
        raise DataError(f"{split} manifest in {data_dir} lists no patients")
    return records


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_synthetic(cfg: RunConfig, args) -> int:
    paths = Paths(cfg)
    truth = pipeline.gen_synthetic(paths.raw_dir, cfg)
    print(
        f"wrote {cfg.patients} patients (dim {truth['dim']}, K_true {truth['K_true']}, "
        f"signal {truth['class_signal']}) to {paths.raw_dir}"
    )
    return EXIT_OK


def cmd_diffusion_train(cfg: RunConfig, args) -> int:
    paths = Paths(cfg)
    _require(pipeline.manifest_path(paths.raw_dir, "train"), "gen-synthetic")
    records = _load_split_records(paths.raw_dir, "train")
    dim = records[0].reps.shape[1]
    if dim != cfg.d_repr:
        raise DataError(f"raw slice dim {dim} != configured d_repr {cfg.d_repr}")
    corpus = np.vstack([r.reps for r in records])
    enc = diffusion.MLPEncoder(cfg.d_repr, cfg.d_repr, width=cfg.diff_width, seed=cfg.seed)
    den = diffusion.ResidualMLPDenoiser(
        cfg.d_repr, cfg.d_repr, width=cfg.diff_width, t_dim=cfg.diff_t_dim, seed=cfg.seed
    )
    sched = diffusion.NoiseSchedule.linear(cfg.T, cfg.beta_start, cfg.beta_end)
    history = diffusion.train_autoencoder(
        corpus, enc, den, sched,
        epochs=cfg.diff_epochs, batch_size=cfg.diff_batch, lr=cfg.diff_lr, seed=cfg.seed,
        log=lambda e, loss: print(f"epoch {e + 1}/{cfg.diff_epochs} loss {loss:.6f}"),
    )
    pipeline.save_diffusion_checkpoint(paths.diffusion_ckpt, enc, den, cfg, epoch=cfg.diff_epochs)
    print(f"loss {history[0]:.6f} -> {history[-1]:.6f}; saved {paths.diffusion_ckpt}")
    return EXIT_OK


def cmd_encode(cfg: RunConfig, args) -> int:
    paths = Paths(cfg)
    _require(paths.diffusion_ckpt, "diffusion-train")
    ck_cfg, enc, _ = pipeline.load_diffusion_checkpoint(paths.diffusion_ckpt)
    os.makedirs(paths.emb_dir, exist_ok=True)
    total = 0
    for split in pipeline.SPLITS:
        manifest = pipeline.load_manifest(paths.raw_dir, split)
        records = pipeline.load_records(manifest)
        reps = diffusion.encode_corpus([r.reps for r in records], enc)
        entries = []
        for rec, rep in zip(records, reps):
            fname = f"{rec.pid}.slq"
            formats.write_slq(os.path.join(paths.emb_dir, fname), rep)
            entries.append({"id": rec.pid, "path": fname, "label": rec.label})
        formats.write_manifest(pipeline.manifest_path(paths.emb_dir, split), entries)
        total += len(records)
    pipeline.write_meta(os.path.join(paths.emb_dir, "encode.meta.json"), ck_cfg)
    print(f"encoded {total} patients into {paths.emb_dir} (d_repr {enc.d_repr})")
    return EXIT_OK


def cmd_cluster(cfg: RunConfig, args) -> int:
    paths = Paths(cfg)
    _require(pipeline.manifest_path(paths.emb_dir, "train"), "encode")
    records = _load_split_records(paths.emb_dir, "train")
    corpus = np.vstack([r.reps for r in records])
    book = prototypes.fit(
        corpus, K=cfg.K, max_iters=cfg.kmeans_max_iters, seed=cfg.seed, n_init=cfg.kmeans_n_init
    )
    prototypes.save_book(paths.book, book)
    pipeline.write_meta(paths.book + ".meta.json", cfg,
                        iterations=book.iterations, objective=book.objective)
    print(
        f"fit K={book.K} prototypes on {corpus.shape[0]} slices in {book.iterations} iterations "
        f"(objective {book.objective:.4f}); saved {paths.book}"
    )
    return EXIT_OK


def _load_book_checked(paths: Paths, cfg: RunConfig) -> prototypes.PrototypeBook:
    _require(paths.book, "cluster")
    book = prototypes.load_book(paths.book)
    if book.K != cfg.K:
        raise DataError(f"book has K={book.K} but config says K={cfg.K}")
    return book


def cmd_train(cfg: RunConfig, args) -> int:
    paths = Paths(cfg)
    book = _load_book_checked(paths, cfg)
    train_records = _load_split_records(paths.emb_dir, "train", book=book)
    val_records = _load_split_records(paths.emb_dir, "val", book=book)

    def log(row: dict) -> None:
        auc_txt = "n/a" if row["val_auc"] is None else f"{row['val_auc']:.4f}"
        print(
            f"epoch {row['epoch']}/{cfg.epochs} train_loss {row['train_loss']:.4f} "
            f"val_loss {row['val_loss']:.4f} val_auc {auc_txt}"
        )

    result = pipeline.train(train_records, val_records, cfg, log=log)
    pipeline.save_checkpoint(paths.model_ckpt, result.best_params, cfg, epoch=result.best_epoch)
    pipeline.write_epoch_log(paths.train_log, result.log_rows)
    pipeline.write_meta(paths.train_log + ".meta.json", cfg, best_epoch=result.best_epoch)
    print(f"best epoch {result.best_epoch}; saved {paths.model_ckpt} and {paths.train_log}")
    return EXIT_OK


def _load_model(paths: Paths, cli_cfg: RunConfig):
    """Architecture comes from the checkpoint config; only reporting knobs
    (threshold) follow the current invocation."""
    _require(paths.model_ckpt, "train")
    cfg, params, epoch = pipeline.load_checkpoint(paths.model_ckpt)
    cfg.workdir = cli_cfg.workdir
    cfg.threshold = cli_cfg.threshold
    book = _load_book_checked(paths, cfg)
    return cfg, params, epoch, book


def cmd_eval(cfg: RunConfig, args) -> int:
    paths = Paths(cfg)
    model_cfg, params, epoch, book = _load_model(paths, cfg)
    records = _load_split_records(paths.emb_dir, args.split, book=book)
    report, rows = pipeline.evaluate_records(records, params, model_cfg)
    payload = {
        "split": args.split,
        "checkpoint_epoch": epoch,
        "config_hash": pipeline.config_hash(model_cfg),
        "metrics": report.to_dict(),
        "patients": rows,
    }
    out = paths.metrics_json(args.split)
    formats.atomic_write_text(out, formats.canonical_json(payload))
    auc_txt = "n/a" if report.auc is None else f"{report.auc:.4f}"
    print(
        f"{args.split}: auc {auc_txt} acc {report.accuracy:.4f} sens {report.sensitivity:.4f} "
        f"spec {report.specificity:.4f} f1 {report.f1:.4f}; wrote {out}"
    )
    return EXIT_OK


def cmd_explain(cfg: RunConfig, args) -> int:
    paths = Paths(cfg)
    model_cfg, params, _, book = _load_model(paths, cfg)
    records = _load_split_records(paths.emb_dir, args.split, book=book)
    os.makedirs(paths.explain_dir, exist_ok=True)

    from . import clustervit

    decomps, pids, classes = [], [], []
    A = params["fusion.A"].data
    for batch in pipeline.pad_and_batch(records, model_cfg.N, model_cfg.batch, model_cfg.K):
        scores = clustervit.encoder_forward(
            batch, params, n_clusters=model_cfg.K, heads=model_cfg.heads, train_mode=False
        )
        for j in range(batch.size):
            dec = fusion.decompose(
                scores.r.data[j], batch.cluster_ids[j], batch.mask[j], A, model_cfg.K
            )
            decomps.append(dec)
            pids.append(batch.patient_ids[j])
            classes.append(1 if fusion.predict(dec.R) >= model_cfg.threshold else 0)

    heatmap_path = os.path.join(paths.explain_dir, "heatmap.csv")
    fusion.heatmap_export(decomps, pids, heatmap_path)
    ranking = fusion.rank_clusters(decomps, np.array(classes))
    ranking_path = os.path.join(paths.explain_dir, "ranking.csv")
    fusion.ranking_export(ranking, ranking_path)

    reps = np.vstack([r.reps for r in records])
    slice_ids = [f"{r.pid}:{i}" for r in records for i in range(r.n_slices)]
    assignments = prototypes.assign_many(book, reps)
    rep_entries = []
    for k in range(book.K):
        if np.any(assignments == k):
            rep_entries.extend(
                fusion.representative_slices(book, reps, slice_ids, k, top_n=args.top_n)
            )
    rep_path = os.path.join(paths.explain_dir, "representatives.json")
    formats.atomic_write_text(
        rep_path,
        formats.canonical_json(
            {"config_hash": pipeline.config_hash(model_cfg), "split": args.split,
             "representatives": rep_entries}
        ),
    )
    pipeline.write_meta(os.path.join(paths.explain_dir, "explain.meta.json"), model_cfg,
                        split=args.split)
    print(f"wrote {heatmap_path}, {ranking_path}, {rep_path}")
    return EXIT_OK


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "diffusion-train": cmd_diffusion_train,
    "encode": cmd_encode,
    "cluster": cmd_cluster,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
    except DataError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.cmd](cfg, args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
