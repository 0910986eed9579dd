"""Per-cluster fusion of slice scores into one patient logit.

R = sum_k A_k * rbar_k * q_k, where rbar_k is the mean slice risk within
cluster k, q_k the fraction of the patient's real slices in cluster k, and
A a learned per-cluster weight shared across patients. A is unconstrained:
heat values A_k * rbar_k are signed, which the exports rely on.

Two paths compute the same quantity: fuse_batch stays on the autodiff tape
for training; decompose is the reporting path, float64, with R defined as
the ascending-k sequential sum of contributions so the decomposition
identity sum_k contribution_k == R holds exactly, not just to rounding.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DataError


def make_global_attention(K: int, dtype=np.float32) -> T.Tensor:
    """Learnable A, initialized to ones so early signal flows through r."""
    return T.param(np.ones(K, dtype=dtype))


def occupancy(cluster_ids: np.ndarray, mask: np.ndarray, K: int) -> np.ndarray:
    """(B, K) fraction of each patient's real slices per cluster."""
    b, _ = mask.shape
    counts = np.zeros((b, K), dtype=np.float64)
    rows, cols = np.nonzero(mask)
    ids = cluster_ids[rows, cols]
    if ids.size and (ids.min() < 0 or ids.max() >= K):
        raise DataError(f"real slice carries cluster id outside [0, {K})")
    np.add.at(counts, (rows, ids), 1.0)
    totals = counts.sum(axis=1)
    if np.any(totals == 0):
        raise DataError("patient with zero real slices")
    return counts / totals[:, None]


def fuse_batch(
    r: T.Tensor, cluster_ids: np.ndarray, mask: np.ndarray, A: T.Tensor, K: int
) -> T.Tensor:
    """(B,) patient logits, differentiable w.r.t. r and A."""
    rbar = T.segment_mean(r, cluster_ids, mask, K)  # (B, K), 0 for absent
    heat = T.mul_rowvec(rbar, A)
    contrib = T.mul(heat, T.Tensor(occupancy(cluster_ids, mask, K).astype(heat.dtype)))
    return T.sum_rows(contrib)


@dataclass
class PatientDecomposition:
    """Cluster-level breakdown of one patient's score."""

    rbar: np.ndarray  # (K,) mean slice risk, 0 for absent clusters
    q: np.ndarray  # (K,) occupancy ratios
    heat: np.ndarray  # (K,) A_k * rbar_k
    contribution: np.ndarray  # (K,) A_k * rbar_k * q_k
    R: float  # ascending-k sequential sum of contributions

    @classmethod
    def from_parts(cls, rbar, q, A) -> "PatientDecomposition":
        rbar = np.asarray(rbar, dtype=np.float64)
        q = np.asarray(q, dtype=np.float64)
        A = np.asarray(A, dtype=np.float64)
        if not (rbar.shape == q.shape == A.shape) or rbar.ndim != 1:
            raise DataError("rbar/q/A must share one (K,) shape")
        heat = A * rbar
        contribution = heat * q
        total = 0.0
        for c in contribution:
            total += float(c)
        return cls(rbar=rbar, q=q, heat=heat, contribution=contribution, R=total)


def decompose(
    r_row: np.ndarray,
    cluster_ids: np.ndarray,
    mask: np.ndarray,
    A: np.ndarray,
    K: int,
) -> PatientDecomposition:
    """Reporting-path fusion for one patient (float64)."""
    r_row = np.asarray(r_row, dtype=np.float64).reshape(-1)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    ids = np.asarray(cluster_ids, dtype=np.int64).reshape(-1)
    if not (r_row.shape == mask.shape == ids.shape):
        raise DataError("r/cluster_ids/mask must share one (N,) shape")
    if not mask.any():
        raise DataError("patient has zero real slices")
    real_ids = ids[mask]
    if real_ids.min() < 0 or real_ids.max() >= K:
        raise DataError(f"real slice carries cluster id outside [0, {K})")
    counts = np.bincount(real_ids, minlength=K).astype(np.float64)
    sums = np.zeros(K, dtype=np.float64)
    np.add.at(sums, real_ids, r_row[mask])
    rbar = np.zeros(K, dtype=np.float64)
    present = counts > 0
    rbar[present] = sums[present] / counts[present]
    q = counts / counts.sum()
    return PatientDecomposition.from_parts(rbar, q, A)


def fuse(scores, cluster_ids, mask, A) -> tuple[float, PatientDecomposition]:
    """Single-patient fusion from slice scores; returns (R, decomposition).
    Accepts a (N,) score row or a SliceScores holding a (1, N) batch."""
    r = scores.r.data[0] if hasattr(scores, "r") else np.asarray(scores)
    A = A.data if isinstance(A, T.Tensor) else np.asarray(A)
    decomp = decompose(r, cluster_ids, mask, A, A.shape[0])
    return decomp.R, decomp


def predict(R: float) -> float:
    """Logistic link; threshold 0.5 downstream."""
    R = float(R)
    if not math.isfinite(R):
        raise DataError(f"non-finite patient score {R}")
    if R >= 0:
        return 1.0 / (1.0 + math.exp(-R))
    e = math.exp(R)
    return e / (1.0 + e)


# ---------------------------------------------------------------------------
# cohort exports
# ---------------------------------------------------------------------------


def _fmt(value: float) -> str:
    return repr(float(value))


def heatmap_rows(
    decomps: list[PatientDecomposition], patient_ids: list[str]
) -> list[list[str]]:
    """CSV cells: header of patient ids ordered by descending R, one row
    per cluster with the cluster index first."""
    if not decomps:
        raise DataError("heatmap needs at least one patient")
    if len(decomps) != len(patient_ids):
        raise DataError("one patient id per decomposition required")
    K = decomps[0].heat.shape[0]
    order = np.argsort(-np.array([d.R for d in decomps]), kind="stable")
    rows = [["cluster_id"] + [str(patient_ids[j]) for j in order]]
    for k in range(K):
        rows.append([str(k)] + [_fmt(decomps[j].heat[k]) for j in order])
    return rows


def heatmap_export(
    decomps: list[PatientDecomposition], patient_ids: list[str], path: str
) -> None:
    from . import formats

    text = "\n".join(",".join(row) for row in heatmap_rows(decomps, patient_ids)) + "\n"
    formats.atomic_write_text(path, text)


@dataclass
class ClusterRanking:
    scores: np.ndarray  # (K,) mean heat in class 1 minus mean heat in class 0
    order: np.ndarray  # cluster ids, descending score, index tie-break


def rank_clusters(
    decomps: list[PatientDecomposition], predicted_classes: np.ndarray
) -> ClusterRanking:
    """Clusters ordered by how much more they heat predicted-positive
    patients than predicted-negative ones."""
    classes = np.asarray(predicted_classes, dtype=np.int64)
    if len(decomps) != classes.shape[0]:
        raise DataError("one predicted class per decomposition required")
    heats = np.stack([d.heat for d in decomps])  # (n, K)
    pos = classes == 1
    neg = classes == 0
    if not pos.any() or not neg.any():
        raise DataError("cluster ranking needs both predicted classes present")
    scores = heats[pos].mean(axis=0) - heats[neg].mean(axis=0)
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    return ClusterRanking(scores=scores, order=order.astype(np.int64))


def ranking_export(ranking: ClusterRanking, path: str) -> None:
    from . import formats

    lines = ["cluster_id,score,rank"]
    for rank, k in enumerate(ranking.order, start=1):
        lines.append(f"{int(k)},{_fmt(ranking.scores[k])},{rank}")
    formats.atomic_write_text(path, "\n".join(lines) + "\n")


def representative_slices(
    book, reps: np.ndarray, slice_ids: list[str], cluster_id: int, top_n: int
) -> list[dict]:
    """Member slices of one cluster closest to its centroid, descending
    cosine similarity, clamped to the member count."""
    from .prototypes import assign_many, normalize_rows

    if top_n < 1:
        raise DataError(f"top_n must be >= 1, got {top_n}")
    reps = np.asarray(reps)
    if reps.shape[0] != len(slice_ids):
        raise DataError("one slice id per representation required")
    ids = assign_many(book, reps)
    members = np.nonzero(ids == cluster_id)[0]
    if members.size == 0:
        raise DataError(f"cluster {cluster_id} has no member slices in this corpus")
    xn = normalize_rows(reps[members])
    sims = xn @ book.centroids[cluster_id]
    order = np.lexsort((members, -sims))[: min(top_n, members.size)]
    return [
        {
            "cluster_id": int(cluster_id),
            "slice_id": str(slice_ids[members[j]]),
            "similarity": float(sims[j]),
        }
        for j in order
    ]
