"""End-to-end harness: configuration, synthetic data, batching, training,
evaluation, checkpoints.

The synthetic generator plays the role of a real slice corpus: it draws
K_true unit prototype vectors, then builds each patient as a stack of
noisy prototype copies. A designated subset of prototypes is the "lesion"
pattern; class 1 over-represents those in proportion to class_signal, so
ground truth for explainability checks is known by construction.
class_signal=0 makes the two classes identically distributed.

All randomness is fanned out of one seed through named streams, and all
artifacts are written atomically, so a rerun with the same config is
byte-identical.
"""

import hashlib
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import clustervit, diffusion, formats, fusion, metrics
from . import tensor as T
from .clustervit import SequenceBatch
from .errors import DataError, NumericalError
from .prototypes import PrototypeBook, assign_many
from .rng import named_stream


@dataclass
class RunConfig:
    """One config drives every stage; flags override fields; the seed is
    the root of every named RNG stream."""

    d_repr: int = 512  # representation dim; synthetic slices share it
    M: int = 512
    layers: int = 6
    heads: int = 8
    K: int = 64
    N: int = 64
    dropout: float = 0.1
    lr: float = 1e-4
    batch: int = 4
    epochs: int = 100
    seed: int = 0
    threshold: float = 0.5
    class_weight: str = "none"  # "none" | "balanced"
    # forward-noising schedule
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # denoising autoencoder
    diff_width: int = 64
    diff_t_dim: int = 16
    diff_epochs: int = 20
    diff_lr: float = 1e-3
    diff_batch: int = 64
    # synthetic generator
    patients: int = 200
    K_true: int = 8
    n_lesion: int = 2
    class_signal: float = 1.0
    noise: float = 0.1
    n_min: int = 8
    # clustering
    kmeans_n_init: int = 8
    kmeans_max_iters: int = 200
    # artifact root; SLICESEQ_WORKDIR overrides
    workdir: str = "runs/default"

    def __post_init__(self):
        for name in ("d_repr", "M", "layers", "heads", "K", "N", "batch", "epochs",
                     "T", "patients", "K_true", "n_min", "diff_width", "diff_t_dim",
                     "diff_epochs", "diff_batch", "kmeans_n_init", "kmeans_max_iters"):
            if getattr(self, name) < 1:
                raise DataError(f"config {name} must be positive")
        if self.M % self.heads:
            raise DataError(f"M={self.M} must be divisible by heads={self.heads}")
        if not (0.0 <= self.dropout < 1.0):
            raise DataError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.class_weight not in ("none", "balanced"):
            raise DataError(f"class_weight must be none|balanced, got {self.class_weight!r}")
        if not (0 <= self.n_lesion < self.K_true):
            raise DataError("n_lesion must be in [0, K_true)")
        if self.n_min > self.N:
            raise DataError(f"n_min={self.n_min} exceeds padded length N={self.N}")

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return asdict(self)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(formats.canonical_json(cfg.to_dict()).encode()).hexdigest()[:16]


def write_meta(path: str, cfg: RunConfig, **extra) -> None:
    payload = {"config_hash": config_hash(cfg), **extra}
    formats.atomic_write_text(path, formats.canonical_json(payload))


# ---------------------------------------------------------------------------
# dataset model
# ---------------------------------------------------------------------------

SPLITS = ("train", "val", "test")


@dataclass
class VolumeRecord:
    """One patient scan: ordered slice vectors plus label."""

    pid: str
    label: int
    reps: np.ndarray  # (n_i, dim) float32
    cluster_ids: np.ndarray | None = None  # (n_i,) int64 once assigned

    def __post_init__(self):
        self.reps = np.ascontiguousarray(self.reps, dtype=np.float32)
        if self.reps.ndim != 2 or self.reps.shape[0] < 1:
            raise DataError(f"patient {self.pid}: needs >= 1 slice vectors")
        if self.label not in (0, 1):
            raise DataError(f"patient {self.pid}: label must be 0/1")

    @property
    def n_slices(self) -> int:
        return self.reps.shape[0]


@dataclass
class DatasetManifest:
    split: str
    root: str  # directory the entry paths are relative to
    entries: list = field(default_factory=list)


def manifest_path(data_dir: str, split: str) -> str:
    return os.path.join(data_dir, f"manifest_{split}.json")


def load_manifest(data_dir: str, split: str) -> DatasetManifest:
    path = manifest_path(data_dir, split)
    if not os.path.exists(path):
        raise DataError(f"missing manifest {path}")
    return DatasetManifest(split=split, root=data_dir, entries=formats.read_manifest(path))


def load_records(manifest: DatasetManifest, book: PrototypeBook | None = None) -> list[VolumeRecord]:
    """Materialize records; assigns cluster ids when a book is given."""
    records = []
    dim = None
    for e in manifest.entries:
        reps = formats.read_slq(os.path.join(manifest.root, e["path"]))
        if dim is None:
            dim = reps.shape[1]
        elif reps.shape[1] != dim:
            raise DataError(f"patient {e['id']}: dim {reps.shape[1]} != corpus dim {dim}")
        rec = VolumeRecord(pid=e["id"], label=int(e["label"]), reps=reps)
        if book is not None:
            if book.dim != reps.shape[1]:
                raise DataError(
                    f"patient {e['id']}: representation dim {reps.shape[1]} != book dim {book.dim}"
                )
            rec.cluster_ids = assign_many(book, reps)
        records.append(rec)
    return records


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def gen_synthetic(out_dir: str, cfg: RunConfig) -> dict:
    """Write per-patient SLQ slice stacks, per-split manifests, and a
    ground-truth JSON. Labels alternate with patient index, so every split
    taken as a contiguous range is balanced."""
    if cfg.K_true < 2:
        raise DataError(f"K_true must be >= 2, got {cfg.K_true}")
    if cfg.patients < 5:
        raise DataError(f"need >= 5 patients for a 60/20/20 split, got {cfg.patients}")
    os.makedirs(out_dir, exist_ok=True)
    dim = cfg.d_repr
    proto_rng = named_stream(cfg.seed, "gen-prototypes")
    protos = proto_rng.standard_normal((cfg.K_true, dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    lesion_ids = list(range(cfg.K_true - cfg.n_lesion, cfg.K_true))
    normal_ids = [k for k in range(cfg.K_true) if k not in lesion_ids]

    rng = named_stream(cfg.seed, "gen-patients")
    s = float(cfg.class_signal)
    if not (0.0 <= s <= 1.0):
        raise DataError(f"class_signal must be in [0, 1], got {s}")
    frac = {0: 0.25 * (1.0 - s), 1: 0.25 + 0.35 * s}

    entries = []
    slice_kinds: dict[str, list[int]] = {}
    for i in range(cfg.patients):
        label = i % 2
        n_i = int(rng.integers(cfg.n_min, cfg.N + 1))
        n_les = int(round(frac[label] * n_i)) if cfg.n_lesion else 0
        kinds = np.concatenate([
            rng.choice(lesion_ids, size=n_les) if n_les else np.empty(0, dtype=np.int64),
            rng.choice(normal_ids, size=n_i - n_les),
        ]).astype(np.int64)
        kinds = kinds[rng.permutation(n_i)]
        slices = protos[kinds] + cfg.noise * rng.standard_normal((n_i, dim))
        pid = f"p{i:04d}"
        fname = f"{pid}.slq"
        formats.write_slq(os.path.join(out_dir, fname), slices.astype(np.float32))
        entries.append({"id": pid, "path": fname, "label": label})
        slice_kinds[pid] = [int(k) for k in kinds]

    n_train = int(round(0.6 * cfg.patients))
    n_val = int(round(0.2 * cfg.patients))
    split_entries = {
        "train": entries[:n_train],
        "val": entries[n_train : n_train + n_val],
        "test": entries[n_train + n_val :],
    }
    for split in SPLITS:
        formats.write_manifest(manifest_path(out_dir, split), split_entries[split])
    truth = {
        "dim": dim,
        "K_true": cfg.K_true,
        "class_signal": s,
        "noise": cfg.noise,
        "lesion_prototypes": lesion_ids,
        "prototypes": [[float(v) for v in row] for row in protos],
        "slice_kinds": slice_kinds,  # per patient: generating prototype per slice
    }
    formats.atomic_write_text(os.path.join(out_dir, "truth.json"), formats.canonical_json(truth))
    write_meta(os.path.join(out_dir, "gen.meta.json"), cfg)
    return truth


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def pad_and_batch(
    records: list[VolumeRecord],
    N: int,
    batch_size: int,
    K: int,
    rng: np.random.Generator | None = None,
) -> list[SequenceBatch]:
    """Zero-pad to length N with sentinel cluster id K; optional shuffle.
    Real feature values pass through bit-exactly. Sequences longer than N
    are an error, never truncated."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    for rec in records:
        if rec.n_slices > N:
            raise DataError(
                f"patient {rec.pid} has {rec.n_slices} slices, exceeding padded length N={N}; "
                f"raise N rather than subsampling"
            )
        if rec.cluster_ids is None:
            raise DataError(f"patient {rec.pid} has no cluster ids; fit/apply a book first")
    order = rng.permutation(len(records)) if rng is not None else np.arange(len(records))
    dim = records[0].reps.shape[1]
    batches = []
    for lo in range(0, len(records), batch_size):
        chunk = [records[j] for j in order[lo : lo + batch_size]]
        b = len(chunk)
        feats = np.zeros((b, N, dim), dtype=np.float32)
        cids = np.full((b, N), K, dtype=np.int64)
        mask = np.zeros((b, N), dtype=np.bool_)
        labels = np.empty(b, dtype=np.int64)
        for j, rec in enumerate(chunk):
            n = rec.n_slices
            feats[j, :n] = rec.reps
            cids[j, :n] = rec.cluster_ids
            mask[j, :n] = True
            labels[j] = rec.label
        batches.append(
            SequenceBatch(feats, cids, mask, labels, patient_ids=tuple(r.pid for r in chunk))
        )
    return batches


# ---------------------------------------------------------------------------
# model assembly, checkpoints
# ---------------------------------------------------------------------------


def init_model(cfg: RunConfig) -> dict[str, T.Tensor]:
    params = clustervit.init_params(
        cfg.d_repr, cfg.M, layers=cfg.layers, heads=cfg.heads, seed=cfg.seed
    )
    params["fusion.A"] = fusion.make_global_attention(cfg.K)
    return params


def save_checkpoint(path: str, params: dict, cfg: RunConfig, epoch: int) -> None:
    arrays = {}
    for name, p in params.items():
        data = p.data if isinstance(p, T.Tensor) else np.asarray(p)
        arrays[name] = data.astype(np.float32, copy=False)
    blob = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "epoch": int(epoch),
        "config_hash": config_hash(cfg),
        "kind": "model",
    }
    formats.write_ckp(path, blob, arrays)


def load_checkpoint(path: str) -> tuple[RunConfig, dict[str, T.Tensor], int]:
    blob, arrays = formats.read_ckp(path)
    if blob.get("kind") != "model":
        raise DataError(f"{path}: not a model checkpoint (kind={blob.get('kind')!r})")
    cfg = RunConfig.from_dict(blob["config"])
    params = {name: T.param(arr) for name, arr in arrays.items()}
    _validate_model_shapes(cfg, params, path)
    return cfg, params, int(blob["epoch"])


def _validate_model_shapes(cfg: RunConfig, params: dict, path: str) -> None:
    expect = {
        "proj.w": (cfg.d_repr, cfg.M),
        "risk.w": (cfg.M, 1),
        "fusion.A": (cfg.K,),
    }
    for i in range(cfg.layers):
        expect[f"l{i}.wq"] = (cfg.M, cfg.M)
        expect[f"l{i}.ffn.w1"] = (cfg.M, 4 * cfg.M)
    for name, shape in expect.items():
        if name not in params:
            raise DataError(f"{path}: missing parameter {name!r}")
        got = tuple(params[name].shape)
        if got != shape:
            raise DataError(f"{path}: parameter {name} has shape {got}, config implies {shape}")
    if clustervit.layer_count(params) != cfg.layers:
        raise DataError(
            f"{path}: checkpoint holds {clustervit.layer_count(params)} layers, config says {cfg.layers}"
        )


def save_diffusion_checkpoint(
    path: str, enc: diffusion.MLPEncoder, den: diffusion.ResidualMLPDenoiser, cfg: RunConfig, epoch: int
) -> None:
    arrays = {f"enc.{k}": v.data.astype(np.float32, copy=False) for k, v in enc.params.items()}
    arrays.update({f"den.{k}": v.data.astype(np.float32, copy=False) for k, v in den.params.items()})
    blob = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "epoch": int(epoch),
        "config_hash": config_hash(cfg),
        "kind": "diffusion",
    }
    formats.write_ckp(path, blob, arrays)


def load_diffusion_checkpoint(path: str) -> tuple[RunConfig, diffusion.MLPEncoder, diffusion.ResidualMLPDenoiser]:
    blob, arrays = formats.read_ckp(path)
    if blob.get("kind") != "diffusion":
        raise DataError(f"{path}: not a diffusion checkpoint (kind={blob.get('kind')!r})")
    cfg = RunConfig.from_dict(blob["config"])
    enc = diffusion.MLPEncoder(cfg.d_repr, cfg.d_repr, width=cfg.diff_width, seed=cfg.seed)
    den = diffusion.ResidualMLPDenoiser(
        cfg.d_repr, cfg.d_repr, width=cfg.diff_width, t_dim=cfg.diff_t_dim, seed=cfg.seed
    )
    for prefix, model in (("enc.", enc), ("den.", den)):
        for k, p in model.params.items():
            name = prefix + k
            if name not in arrays:
                raise DataError(f"{path}: missing parameter {name!r}")
            if arrays[name].shape != p.data.shape:
                raise DataError(
                    f"{path}: parameter {name} has shape {arrays[name].shape}, "
                    f"config implies {p.data.shape}"
                )
            p.data = arrays[name]
    return cfg, enc, den


# ---------------------------------------------------------------------------
# training / evaluation
# ---------------------------------------------------------------------------

LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "val_auc", "val_acc", "val_sens", "val_spec", "val_f1")


@dataclass
class TrainResult:
    best_params: dict  # name -> float32 array snapshot at the best epoch
    best_epoch: int
    log_rows: list  # row dicts matching LOG_COLUMNS


def _class_weights(labels: np.ndarray, mode: str) -> np.ndarray | None:
    if mode == "none":
        return None
    n = labels.size
    n_pos = int(labels.sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    w = np.where(labels == 1, n / (2.0 * n_pos), n / (2.0 * n_neg))
    return w.astype(np.float64)


def _forward_logits(batch: SequenceBatch, params: dict, cfg: RunConfig,
                    train_mode: bool = False, rng=None) -> T.Tensor:
    scores = clustervit.encoder_forward(
        batch, params, n_clusters=cfg.K, heads=cfg.heads,
        dropout_rate=cfg.dropout, train_mode=train_mode, rng=rng,
    )
    return fuse_batch_scores(scores, batch, params, cfg)


def fuse_batch_scores(scores, batch: SequenceBatch, params: dict, cfg: RunConfig) -> T.Tensor:
    return fusion.fuse_batch(scores.r, batch.cluster_ids, batch.mask, params["fusion.A"], cfg.K)


def evaluate_records(
    records: list[VolumeRecord], params: dict, cfg: RunConfig
) -> tuple[metrics.MetricsReport, list[dict]]:
    """Deterministic inference pass; per-patient R comes from the float64
    reporting decomposition, so exports cross-check against it exactly."""
    rows: list[dict] = []
    A = params["fusion.A"].data
    for batch in pad_and_batch(records, cfg.N, cfg.batch, cfg.K):
        scores = clustervit.encoder_forward(
            batch, params, n_clusters=cfg.K, heads=cfg.heads, train_mode=False
        )
        for j in range(batch.size):
            dec = fusion.decompose(
                scores.r.data[j], batch.cluster_ids[j], batch.mask[j], A, cfg.K
            )
            rows.append(
                {
                    "id": batch.patient_ids[j],
                    "label": int(batch.labels[j]),
                    "R": dec.R,
                    "p": fusion.predict(dec.R),
                }
            )
    probs = np.array([r["p"] for r in rows])
    labels = np.array([r["label"] for r in rows])
    return metrics.report(probs, labels, threshold=cfg.threshold), rows


def _val_loss(records, params, cfg) -> float:
    total, count = 0.0, 0
    for batch in pad_and_batch(records, cfg.N, cfg.batch, cfg.K):
        logits = _forward_logits(batch, params, cfg, train_mode=False)
        loss = T.bce_with_logits(logits, batch.labels.astype(np.float64))
        total += loss.item() * batch.size
        count += batch.size
    return total / count


def train(
    train_records: list[VolumeRecord],
    val_records: list[VolumeRecord],
    cfg: RunConfig,
    log: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Joint optimization of the transformer, risk head, and A under
    weighted BCE on the fused patient logit. Keeps the parameters of the
    best validation-AUC epoch."""
    params = init_model(cfg)
    opt = T.AdamState(params, lr=cfg.lr)
    shuffle_rng = named_stream(cfg.seed, "train-shuffle")
    drop_rng = named_stream(cfg.seed, "dropout")
    best_auc = -1.0
    best_vloss = math.inf
    best_epoch = 0
    best_params: dict = {}
    log_rows: list[dict] = []

    def snapshot() -> dict:
        return {name: p.data.astype(np.float32, copy=True) for name, p in params.items()}

    for epoch in range(1, cfg.epochs + 1):
        batches = pad_and_batch(train_records, cfg.N, cfg.batch, cfg.K, rng=shuffle_rng)
        total = 0.0
        for bi, batch in enumerate(batches):
            weights = _class_weights(batch.labels, cfg.class_weight)
            with T.Tape() as tape:
                logits = _forward_logits(batch, params, cfg, train_mode=True, rng=drop_rng)
                loss = T.bce_with_logits(logits, batch.labels.astype(np.float64), weights)
                val = loss.item()
                if not math.isfinite(val):
                    raise NumericalError(
                        f"non-finite training loss at epoch {epoch}, batch {bi} "
                        f"(patients {batch.patient_ids})"
                    )
                tape.backward(loss)
            opt.step()
            opt.zero_grads()
            total += val
        train_loss = total / len(batches)
        report, _ = evaluate_records(val_records, params, cfg)
        vloss = _val_loss(val_records, params, cfg)
        row = {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": vloss,
            "val_auc": report.auc,
            "val_acc": report.accuracy,
            "val_sens": report.sensitivity,
            "val_spec": report.specificity,
            "val_f1": report.f1,
        }
        log_rows.append(row)
        if log is not None:
            log(row)
        # best by validation AUC; equal AUC falls back to validation loss
        auc_now = report.auc if report.auc is not None else -1.0
        if not best_params or auc_now > best_auc or (auc_now == best_auc and vloss < best_vloss):
            best_auc = auc_now
            best_vloss = vloss
            best_epoch = epoch
            best_params = snapshot()
    return TrainResult(best_params=best_params, best_epoch=best_epoch, log_rows=log_rows)


def write_epoch_log(path: str, rows: list[dict]) -> None:
    lines = [",".join(LOG_COLUMNS)]
    for row in rows:
        cells = []
        for col in LOG_COLUMNS:
            v = row[col]
            if v is None:
                cells.append("")
            elif col == "epoch":
                cells.append(str(int(v)))
            else:
                cells.append(repr(float(v)))
        lines.append(",".join(cells))
    formats.atomic_write_text(path, "\n".join(lines) + "\n")
