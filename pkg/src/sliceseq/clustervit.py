"""Transformer encoder over padded slice sequences with cluster-level
attention.

Queries are averaged per cluster before the attention map, so the map
costs O(N*K) instead of O(N*N); the attended output of cluster k is
broadcast back to every member slice. With every real slice in its own
cluster this reduces exactly to standard multi-head self-attention, which
is the main equivalence oracle for the kernel.

Blocks are pre-norm residual: s += Attn(LN(s)), s += FFN(LN(s)), with
dropout after each sublayer and on the input projection while training.
A linear risk head maps each updated slice feature to a scalar score;
scores at padded positions are forced to 0.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DataError
from .rng import named_stream

INIT_STD = 0.02
FFN_MULT = 4


@dataclass
class SequenceBatch:
    """Padded per-patient slice sequences plus frozen cluster labels."""

    features: np.ndarray  # (B, N, d_repr) float
    cluster_ids: np.ndarray  # (B, N) int64; sentinel K at padded positions
    mask: np.ndarray  # (B, N) bool, true = real slice
    labels: np.ndarray  # (B,) int, 0/1
    patient_ids: tuple = ()

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features)
        self.cluster_ids = np.ascontiguousarray(self.cluster_ids, dtype=np.int64)
        self.mask = np.ascontiguousarray(self.mask, dtype=np.bool_)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        b, n = self.mask.shape
        if self.features.shape[:2] != (b, n) or self.cluster_ids.shape != (b, n):
            raise DataError("features/cluster_ids/mask shapes disagree")
        if self.labels.shape != (b,):
            raise DataError("labels must be one per sequence")
        if not self.mask.any(axis=1).all():
            raise DataError("every sequence needs at least one real slice")

    @property
    def size(self) -> int:
        return self.mask.shape[0]

    @property
    def padded_len(self) -> int:
        return self.mask.shape[1]

    def validate_ids(self, K: int) -> None:
        real = self.cluster_ids[self.mask]
        if real.size and (real.min() < 0 or real.max() >= K):
            raise DataError(f"real slice carries cluster id outside [0, {K})")
        pads = self.cluster_ids[~self.mask]
        if pads.size and np.any((pads >= 0) & (pads < K)):
            raise DataError("padded position carries an in-range cluster id")


@dataclass
class SliceScores:
    """Per-slice risk r (0 at pads) and the updated features they came from."""

    r: T.Tensor  # (B, N)
    s_star: T.Tensor  # (B, N, M)


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


def init_params(
    d_repr: int,
    M: int,
    layers: int = 6,
    heads: int = 8,
    seed: int = 0,
    dtype=np.float32,
) -> dict[str, T.Tensor]:
    """Named parameter table: input projection, per-layer attention + FFN
    with two layernorms, and the slice risk head."""
    if M % heads:
        raise DataError(f"M={M} must be divisible by heads={heads}")
    rng = named_stream(seed, "vit-init")

    def w(shape):
        return T.param(_trunc_normal(rng, shape, INIT_STD, dtype))

    def zeros(*shape):
        return T.param(np.zeros(shape, dtype=dtype))

    def ones(*shape):
        return T.param(np.ones(shape, dtype=dtype))

    params: dict[str, T.Tensor] = {"proj.w": w((d_repr, M)), "proj.b": zeros(M)}
    hidden = FFN_MULT * M
    for i in range(layers):
        p = f"l{i}."
        params[p + "ln1.g"] = ones(M)
        params[p + "ln1.s"] = zeros(M)
        params[p + "wq"] = w((M, M))
        params[p + "bq"] = zeros(M)
        params[p + "wk"] = w((M, M))
        params[p + "bk"] = zeros(M)
        params[p + "wv"] = w((M, M))
        params[p + "bv"] = zeros(M)
        params[p + "wo"] = w((M, M))
        params[p + "bo"] = zeros(M)
        params[p + "ln2.g"] = ones(M)
        params[p + "ln2.s"] = zeros(M)
        params[p + "ffn.w1"] = w((M, hidden))
        params[p + "ffn.b1"] = zeros(hidden)
        params[p + "ffn.w2"] = w((hidden, M))
        params[p + "ffn.b2"] = zeros(M)
    params["risk.w"] = w((M, 1))
    params["risk.b"] = zeros(1)
    return params


def layer_count(params: dict) -> int:
    i = 0
    while f"l{i}.wq" in params:
        i += 1
    return i


def _flat(x: T.Tensor) -> T.Tensor:
    b, n, m = x.shape
    return T.reshape(x, (b * n, m))


def _unflat(x: T.Tensor, b: int, n: int) -> T.Tensor:
    return T.reshape(x, (b, n, x.shape[1]))


def _mask_rows(flat: T.Tensor, maskf: T.Tensor) -> T.Tensor:
    return T.mul_colvec(flat, maskf)


def project_in(x: T.Tensor, params: dict, mask: np.ndarray) -> T.Tensor:
    """(B, N, d_repr) -> (B, N, M) affine per slice; padded rows zeroed."""
    b, n, d = x.shape
    if params["proj.w"].shape[0] != d:
        raise DataError(
            f"input dim {d} != projection dim {params['proj.w'].shape[0]}"
        )
    maskf = T.Tensor(mask.reshape(-1).astype(x.dtype))
    out = T.linear(_flat(x), params["proj.w"], params["proj.b"])
    return _unflat(_mask_rows(out, maskf), b, n)


def clustering_attention(
    s: T.Tensor,
    cluster_ids: np.ndarray,
    mask: np.ndarray,
    params: dict,
    prefix: str,
    n_clusters: int,
    heads: int,
) -> T.Tensor:
    """One attention sublayer (no norm, no residual): Q/K/V projections,
    cluster-mean queries attending to real keys, output projection.
    Padded rows come out exactly 0."""
    b, n, m = s.shape
    maskf = T.Tensor(mask.reshape(-1).astype(s.dtype))
    flat = _flat(s)
    q = _unflat(T.linear(flat, params[prefix + "wq"], params[prefix + "bq"]), b, n)
    k = _unflat(T.linear(flat, params[prefix + "wk"], params[prefix + "bk"]), b, n)
    v = _unflat(T.linear(flat, params[prefix + "wv"], params[prefix + "bv"]), b, n)
    att = T.cluster_attention(q, k, v, cluster_ids, mask, n_clusters, heads)
    out = T.linear(_flat(att), params[prefix + "wo"], params[prefix + "bo"])
    return _unflat(_mask_rows(out, maskf), b, n)


def _ffn(flat: T.Tensor, params: dict, prefix: str) -> T.Tensor:
    h = T.gelu(T.linear(flat, params[prefix + "ffn.w1"], params[prefix + "ffn.b1"]))
    return T.linear(h, params[prefix + "ffn.w2"], params[prefix + "ffn.b2"])


def encoder_forward(
    batch: SequenceBatch,
    params: dict,
    n_clusters: int,
    heads: int = 8,
    dropout_rate: float = 0.0,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> SliceScores:
    """Full encoder: input projection, pre-norm residual layers, risk head."""
    batch.validate_ids(n_clusters)
    x = T.Tensor(batch.features)
    b, n = batch.mask.shape

    def drop(t: T.Tensor) -> T.Tensor:
        return T.dropout(t, dropout_rate, rng, train_mode)

    s = drop(project_in(x, params, batch.mask))
    for i in range(layer_count(params)):
        p = f"l{i}."
        flat = _flat(s)
        h = T.layernorm(flat, params[p + "ln1.g"], params[p + "ln1.s"])
        att = clustering_attention(
            _unflat(h, b, n), batch.cluster_ids, batch.mask, params, p, n_clusters, heads
        )
        s = T.add(s, drop(att))
        flat = _flat(s)
        h = T.layernorm(flat, params[p + "ln2.g"], params[p + "ln2.s"])
        s = T.add(s, _unflat(drop(_ffn(h, params, p)), b, n))

    maskf = T.Tensor(batch.mask.reshape(-1).astype(s.dtype))
    s_star = _unflat(_mask_rows(_flat(s), maskf), b, n)
    r_flat = T.add_rowvec(T.matmul(_flat(s_star), params["risk.w"]), params["risk.b"])
    r = T.reshape(T.mul_colvec(r_flat, maskf), (b, n))
    return SliceScores(r=r, s_star=s_star)


def op_count(N: int, K_nonempty: int, M: int, H: int) -> int:
    """Analytic multiply-accumulate count for one attention sublayer:
    Q/K/V/output projections plus the cluster-attention map."""
    if min(N, K_nonempty, M, H) < 1 or M % H:
        raise DataError("op_count needs positive sizes with M divisible by H")
    return 4 * N * M * M + attention_map_macs(N, K_nonempty, M, H)


def attention_map_macs(N: int, K_nonempty: int, M: int, H: int) -> int:
    """The O(N*K) attention-map portion: scores plus value aggregation,
    2 * K * N * d_h per head. At K_nonempty = N this equals the standard
    self-attention map count 2 * N^2 * d_h * H."""
    d_h = M // H
    return 2 * K_nonempty * N * d_h * H
