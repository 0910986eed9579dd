"""Spherical k-means over slice representations.

Vectors are L2-normalized once at this module's boundary; everything
downstream works with cosine similarity, so assign(x) == assign(c*x) for
any c > 0. Lloyd iterations keep the objective sum_i cos(x_i, mu_{c_i})
non-decreasing, including across the empty-cluster repair step: the repair
moves the worst-fitting point (from a cluster that can spare one) onto the
empty centroid, which only raises that point's similarity. Seeding is
k-means++ style on cosine distance with a fixed stream, with n_init
restarts keeping the best objective.
"""

from dataclasses import dataclass, field

import numpy as np

from . import formats
from .errors import DataError, NumericalError
from .kernels import assign_cosine
from .rng import named_stream

MAX_ITERS = 200
OBJECTIVE_TOL = 1e-7
N_INIT = 8


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Rows scaled to unit L2 norm, float64; rejects zero or non-finite rows."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DataError(f"expected vectors or a matrix of vectors, got shape {x.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("non-finite representation vector")
    norms = np.linalg.norm(arr, axis=1)
    if np.any(norms < 1e-12):
        bad = int(np.nonzero(norms < 1e-12)[0][0])
        raise DataError(f"zero-norm representation at row {bad}")
    return arr / norms[:, None]


@dataclass
class PrototypeBook:
    """K unit-norm centroids plus fit metadata."""

    centroids: np.ndarray  # (K, dim) float64, unit rows
    iterations: int = 0
    objective: float = float("nan")
    history: list = field(default_factory=list)  # objective per Lloyd iteration

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _seed_plusplus(xn: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ style seeding with d = 1 - cosine as the distance."""
    n = xn.shape[0]
    chosen = [int(rng.integers(n))]
    d = np.maximum(1.0 - xn @ xn[chosen[0]], 0.0)
    for _ in range(1, k):
        w = d * d
        total = w.sum()
        if total <= 0.0:
            pick = int(rng.integers(n))
        else:
            pick = int(rng.choice(n, p=w / total))
        chosen.append(pick)
        d = np.minimum(d, np.maximum(1.0 - xn @ xn[pick], 0.0))
    return xn[chosen].copy()


def _repair_empty(
    ids: np.ndarray, sims: np.ndarray, centroids: np.ndarray, xn: np.ndarray, k: int
) -> None:
    """Reseed each empty cluster from the worst-fitting point of a cluster
    that has at least two members. In-place on ids/sims/centroids."""
    counts = np.bincount(ids, minlength=k)
    empties = np.nonzero(counts == 0)[0]
    if empties.size == 0:
        return
    order = np.argsort(sims, kind="stable")
    cursor = 0
    for e in empties:
        while cursor < sims.size and counts[ids[order[cursor]]] < 2:
            cursor += 1
        if cursor >= sims.size:
            break  # nothing left to donate; cluster stays empty this round
        w = int(order[cursor])
        cursor += 1
        counts[ids[w]] -= 1
        counts[e] = 1
        ids[w] = e
        centroids[e] = xn[w]
        sims[w] = 1.0


def _lloyd(
    xn: np.ndarray, init: np.ndarray, max_iters: int, tol: float
) -> tuple[np.ndarray, int, float, list]:
    k = init.shape[0]
    centroids = init.copy()
    prev_ids = None
    history: list[float] = []
    iterations = 0
    for it in range(1, max_iters + 1):
        iterations = it
        ids = assign_cosine(xn, centroids)
        sims = np.einsum("ij,ij->i", xn, centroids[ids])
        _repair_empty(ids, sims, centroids, xn, k)
        obj = float(np.sum(sims))
        if history and obj < history[-1] - 1e-9 * max(1.0, abs(history[-1])):
            raise NumericalError(
                f"objective decreased {history[-1]:.12g} -> {obj:.12g} at iteration {it}"
            )
        gained = not history or (obj - history[-1]) >= tol
        history.append(obj)
        # centroid update: normalized member means; near-zero means keep
        # the previous centroid (cannot normalize, and keeping it never
        # lowers the objective)
        sums = np.zeros_like(centroids)
        np.add.at(sums, ids, xn)
        norms = np.linalg.norm(sums, axis=1)
        ok = norms > 1e-12
        centroids[ok] = sums[ok] / norms[ok, None]
        if prev_ids is not None and np.array_equal(ids, prev_ids):
            break
        if not gained:
            break
        prev_ids = ids
    final_ids = assign_cosine(xn, centroids)
    final_obj = float(np.einsum("ij,ij->i", xn, centroids[final_ids]).sum())
    return centroids, iterations, final_obj, history


def fit(
    corpus,
    K: int,
    max_iters: int = MAX_ITERS,
    seed: int = 0,
    n_init: int = N_INIT,
    tol: float = OBJECTIVE_TOL,
    init_book: PrototypeBook | None = None,
) -> PrototypeBook:
    """Cluster the pooled corpus into K prototypes. corpus is an (n, dim)
    array or a sequence of (n_i, dim) stacks. Passing init_book warm-starts
    a single Lloyd run from its centroids (used for resume/idempotence)."""
    if isinstance(corpus, np.ndarray):
        pooled = corpus
    else:
        stacks = [np.asarray(v) for v in corpus]
        if not stacks:
            raise DataError("empty corpus")
        pooled = np.vstack([s if s.ndim == 2 else s[None, :] for s in stacks])
    if K < 1:
        raise DataError(f"K must be >= 1, got {K}")
    xn = normalize_rows(pooled)
    n = xn.shape[0]
    if n < K:
        raise DataError(f"corpus has {n} vectors, fewer than K={K}")

    if init_book is not None:
        if init_book.centroids.shape != (K, xn.shape[1]):
            raise DataError(
                f"init book shape {init_book.centroids.shape} != (K={K}, dim={xn.shape[1]})"
            )
        seeds = [normalize_rows(init_book.centroids)]
    else:
        rng = named_stream(seed, "kmeans-init")
        seeds = [_seed_plusplus(xn, K, rng) for _ in range(max(1, n_init))]

    best = None
    for init in seeds:
        centroids, iters, obj, history = _lloyd(xn, init, max_iters, tol)
        if best is None or obj > best.objective:
            best = PrototypeBook(centroids, iters, obj, history)
    return best


def assign(book: PrototypeBook, x: np.ndarray) -> int:
    """Cluster id for one representation; ties go to the lowest index."""
    xn = normalize_rows(np.asarray(x))
    if xn.shape != (1, book.dim):
        raise DataError(f"expected one vector of dim {book.dim}, got shape {np.asarray(x).shape}")
    return int(assign_cosine(xn, book.centroids)[0])


def assign_many(book: PrototypeBook, x: np.ndarray) -> np.ndarray:
    """Cluster ids for a stack of representations."""
    xn = normalize_rows(np.asarray(x))
    if xn.shape[1] != book.dim:
        raise DataError(f"representation dim {xn.shape[1]} != book dim {book.dim}")
    return assign_cosine(xn, book.centroids)


def quantify(assignments: np.ndarray, K: int) -> np.ndarray:
    """Cluster occupancy ratios q for one patient: counts over real-slice
    count. Sums to 1 by construction."""
    ids = np.asarray(assignments, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise DataError("patient has zero real slices")
    if ids.min() < 0 or ids.max() >= K:
        raise DataError(f"cluster id outside [0, {K})")
    counts = np.bincount(ids, minlength=K)
    return counts / np.float64(ids.size)


def save_book(path: str, book: PrototypeBook) -> None:
    formats.write_pbk(path, book.centroids.astype(np.float32))


def load_book(path: str) -> PrototypeBook:
    centroids = formats.read_pbk(path).astype(np.float64)
    norms = np.linalg.norm(centroids, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-5):
        raise DataError(f"{path}: centroid norms deviate from 1 (max dev {np.abs(norms-1).max():.2e})")
    return PrototypeBook(centroids)
