"""Hot numeric kernels, each with a numba and a pure-numpy implementation.

All kernels accumulate in float64 regardless of storage dtype and cast back
on output. Cluster attention skips padded key positions and empty clusters
entirely, so appending padding never changes results and the instrumented
MAC count reflects executed work only.

Array conventions: q/k/v are (B, N, M) row-major, cluster ids (B, N) int64
with a sentinel >= K at padded positions, mask (B, N) bool with True marking
real slices.
"""

import math

import numpy as np

from . import backend

if backend.NUMBA_AVAILABLE:
    from numba import njit
else:  # pragma: no cover - exercised only without numba

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap if not args else wrap(args[0])


# ---------------------------------------------------------------------------
# cluster attention: per-cluster mean queries attend to all real keys, the
# K updated vectors are broadcast back to member slices
# ---------------------------------------------------------------------------


@njit(cache=True)
def _attn_fwd_nb(q, k, v, cid, mask, n_clusters, heads):
    B, N, M = q.shape
    dh = M // heads
    inv_sqrt = 1.0 / math.sqrt(dh)
    out = np.zeros((B, N, M), dtype=q.dtype)
    attn = np.zeros((B, heads, n_clusters, N), dtype=np.float64)
    qhat = np.zeros((B, heads, n_clusters, dh), dtype=np.float64)
    counts = np.zeros((B, n_clusters), dtype=np.int64)
    macs = np.int64(0)
    for b in range(B):
        for i in range(N):
            if mask[b, i]:
                c = cid[b, i]
                counts[b, c] += 1
                for h in range(heads):
                    base = h * dh
                    for d in range(dh):
                        qhat[b, h, c, d] += np.float64(q[b, i, base + d])
        for c in range(n_clusters):
            n_c = counts[b, c]
            if n_c > 0:
                for h in range(heads):
                    for d in range(dh):
                        qhat[b, h, c, d] /= n_c
        shat = np.zeros((heads, n_clusters, dh), dtype=np.float64)
        scores = np.empty(N, dtype=np.float64)
        for h in range(heads):
            base = h * dh
            for c in range(n_clusters):
                if counts[b, c] == 0:
                    continue
                mx = -np.inf
                for j in range(N):
                    if mask[b, j]:
                        acc = 0.0
                        for d in range(dh):
                            acc += qhat[b, h, c, d] * np.float64(k[b, j, base + d])
                        macs += dh
                        s = acc * inv_sqrt
                        scores[j] = s
                        if s > mx:
                            mx = s
                z = 0.0
                for j in range(N):
                    if mask[b, j]:
                        e = math.exp(scores[j] - mx)
                        attn[b, h, c, j] = e
                        z += e
                for j in range(N):
                    if mask[b, j]:
                        a = attn[b, h, c, j] / z
                        attn[b, h, c, j] = a
                        for d in range(dh):
                            shat[h, c, d] += a * np.float64(v[b, j, base + d])
                        macs += dh
        for i in range(N):
            if mask[b, i]:
                c = cid[b, i]
                for h in range(heads):
                    base = h * dh
                    for d in range(dh):
                        out[b, i, base + d] = shat[h, c, d]
    return out, attn, qhat, counts, macs


@njit(cache=True)
def _attn_bwd_nb(dout, k, v, cid, mask, attn, qhat, counts, heads):
    B, N, M = dout.shape
    dh = M // heads
    n_clusters = counts.shape[1]
    inv_sqrt = 1.0 / math.sqrt(dh)
    dq = np.zeros((B, N, M), dtype=dout.dtype)
    dk = np.zeros((B, N, M), dtype=dout.dtype)
    dv = np.zeros((B, N, M), dtype=dout.dtype)
    for b in range(B):
        dshat = np.zeros((heads, n_clusters, dh), dtype=np.float64)
        for i in range(N):
            if mask[b, i]:
                c = cid[b, i]
                for h in range(heads):
                    base = h * dh
                    for d in range(dh):
                        dshat[h, c, d] += np.float64(dout[b, i, base + d])
        for h in range(heads):
            base = h * dh
            for c in range(n_clusters):
                if counts[b, c] == 0:
                    continue
                # dA then the softmax jacobian, restricted to real keys
                dot = 0.0
                da = np.zeros(N, dtype=np.float64)
                for j in range(N):
                    if mask[b, j]:
                        acc = 0.0
                        for d in range(dh):
                            acc += dshat[h, c, d] * np.float64(v[b, j, base + d])
                        da[j] = acc
                        dot += attn[b, h, c, j] * acc
                dqh = np.zeros(dh, dtype=np.float64)
                for j in range(N):
                    if mask[b, j]:
                        ds = attn[b, h, c, j] * (da[j] - dot) * inv_sqrt
                        for d in range(dh):
                            dqh[d] += ds * np.float64(k[b, j, base + d])
                            dk[b, j, base + d] += ds * qhat[b, h, c, d]
                            dv[b, j, base + d] += attn[b, h, c, j] * dshat[h, c, d]
                n_c = counts[b, c]
                for i in range(N):
                    if mask[b, i] and cid[b, i] == c:
                        for d in range(dh):
                            dq[b, i, base + d] = dqh[d] / n_c
    return dq, dk, dv


def _attn_fwd_np(q, k, v, cid, mask, n_clusters, heads):
    B, N, M = q.shape
    dh = M // heads
    inv_sqrt = 1.0 / math.sqrt(dh)
    out = np.zeros((B, N, M), dtype=q.dtype)
    attn = np.zeros((B, heads, n_clusters, N), dtype=np.float64)
    qhat = np.zeros((B, heads, n_clusters, dh), dtype=np.float64)
    counts = np.zeros((B, n_clusters), dtype=np.int64)
    macs = 0
    for b in range(B):
        real = np.nonzero(mask[b])[0]
        ids = cid[b, real]
        n_r = real.size
        counts[b] = np.bincount(ids, minlength=n_clusters)
        qr = q[b, real].astype(np.float64).reshape(n_r, heads, dh)
        kr = k[b, real].astype(np.float64).reshape(n_r, heads, dh)
        vr = v[b, real].astype(np.float64).reshape(n_r, heads, dh)
        sums = np.zeros((n_clusters, heads, dh), dtype=np.float64)
        np.add.at(sums, ids, qr)
        ne = np.nonzero(counts[b] > 0)[0]
        qh = sums[ne] / counts[b, ne, None, None]
        qhat[b, :, ne, :] = qh
        # (heads, n_ne, n_r)
        scores = np.einsum("khd,jhd->hkj", qh, kr) * inv_sqrt
        scores -= scores.max(axis=2, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=2, keepdims=True)
        attn[b][:, ne[:, None], real[None, :]] = probs
        shat = np.einsum("hkj,jhd->hkd", probs, vr)
        macs += 2 * heads * ne.size * n_r * dh
        pos = np.empty(n_clusters, dtype=np.int64)
        pos[ne] = np.arange(ne.size)
        gathered = shat[:, pos[ids], :]  # (heads, n_r, dh)
        out[b, real] = (
            gathered.transpose(1, 0, 2).reshape(n_r, M).astype(q.dtype)
        )
    return out, attn, qhat, counts, macs


def _attn_bwd_np(dout, k, v, cid, mask, attn, qhat, counts, heads):
    B, N, M = dout.shape
    dh = M // heads
    n_clusters = counts.shape[1]
    inv_sqrt = 1.0 / math.sqrt(dh)
    dq = np.zeros((B, N, M), dtype=dout.dtype)
    dk = np.zeros((B, N, M), dtype=dout.dtype)
    dv = np.zeros((B, N, M), dtype=dout.dtype)
    for b in range(B):
        real = np.nonzero(mask[b])[0]
        ids = cid[b, real]
        n_r = real.size
        ne = np.nonzero(counts[b] > 0)[0]
        kr = k[b, real].astype(np.float64).reshape(n_r, heads, dh)
        vr = v[b, real].astype(np.float64).reshape(n_r, heads, dh)
        dr = dout[b, real].astype(np.float64).reshape(n_r, heads, dh)
        probs = attn[b][:, ne[:, None], real[None, :]]  # (heads, n_ne, n_r)
        qh = qhat[b][:, ne, :]  # (heads, n_ne, dh)
        dsums = np.zeros((n_clusters, heads, dh), dtype=np.float64)
        np.add.at(dsums, ids, dr)
        dshat = dsums[ne].transpose(1, 0, 2)  # (heads, n_ne, dh)
        dvr = np.einsum("hkj,hkd->jhd", probs, dshat)
        da = np.einsum("hkd,jhd->hkj", dshat, vr)
        ds = probs * (da - (probs * da).sum(axis=2, keepdims=True)) * inv_sqrt
        dqh = np.einsum("hkj,jhd->hkd", ds, kr)
        dkr = np.einsum("hkj,hkd->jhd", ds, qh)
        pos = np.empty(n_clusters, dtype=np.int64)
        pos[ne] = np.arange(ne.size)
        dqr = dqh.transpose(1, 0, 2)[pos[ids]] / counts[b, ids, None, None]
        dq[b, real] = dqr.reshape(n_r, M).astype(dout.dtype)
        dk[b, real] = dkr.reshape(n_r, M).astype(dout.dtype)
        dv[b, real] = dvr.reshape(n_r, M).astype(dout.dtype)
    return dq, dk, dv


def cluster_attention_forward(q, k, v, cid, mask, n_clusters, heads):
    """Run the selected backend; returns (out, saved ctx tuple)."""
    fwd = _attn_fwd_nb if backend.use_numba() else _attn_fwd_np
    out, attn, qhat, counts, macs = fwd(q, k, v, cid, mask, n_clusters, heads)
    backend.attention_macs.add(macs)
    return out, (attn, qhat, counts)


def cluster_attention_backward(dout, k, v, cid, mask, saved, heads):
    attn, qhat, counts = saved
    bwd = _attn_bwd_nb if backend.use_numba() else _attn_bwd_np
    return bwd(dout, k, v, cid, mask, attn, qhat, counts, heads)


# ---------------------------------------------------------------------------
# masked segment mean over sequences: per-cluster mean of per-slice values
# ---------------------------------------------------------------------------


@njit(cache=True)
def _segmean_fwd_nb(values, cid, mask, n_clusters):
    B, N = values.shape
    out64 = np.zeros((B, n_clusters), dtype=np.float64)
    counts = np.zeros((B, n_clusters), dtype=np.int64)
    for b in range(B):
        for i in range(N):
            if mask[b, i]:
                c = cid[b, i]
                counts[b, c] += 1
                out64[b, c] += np.float64(values[b, i])
        for c in range(n_clusters):
            if counts[b, c] > 0:
                out64[b, c] /= counts[b, c]
    return out64, counts


@njit(cache=True)
def _segmean_bwd_nb(dout, cid, mask, counts):
    B, n_clusters = dout.shape
    N = cid.shape[1]
    dvals = np.zeros((B, N), dtype=dout.dtype)
    for b in range(B):
        for i in range(N):
            if mask[b, i]:
                c = cid[b, i]
                dvals[b, i] = dout[b, c] / counts[b, c]
    return dvals


def _segmean_fwd_np(values, cid, mask, n_clusters):
    B, N = values.shape
    out64 = np.zeros((B, n_clusters), dtype=np.float64)
    counts = np.zeros((B, n_clusters), dtype=np.int64)
    for b in range(B):
        real = mask[b]
        ids = cid[b, real]
        counts[b] = np.bincount(ids, minlength=n_clusters)
        np.add.at(out64[b], ids, values[b, real].astype(np.float64))
        nz = counts[b] > 0
        out64[b, nz] /= counts[b, nz]
    return out64, counts


def _segmean_bwd_np(dout, cid, mask, counts):
    B, n_clusters = dout.shape
    dvals = np.zeros(cid.shape, dtype=dout.dtype)
    for b in range(B):
        real = mask[b]
        ids = cid[b, real]
        dvals[b, real] = dout[b, ids] / counts[b, ids]
    return dvals


def segment_mean_forward(values, cid, mask, n_clusters):
    fwd = _segmean_fwd_nb if backend.use_numba() else _segmean_fwd_np
    out64, counts = fwd(values, cid, mask, n_clusters)
    return out64.astype(values.dtype), counts


def segment_mean_backward(dout, cid, mask, counts):
    bwd = _segmean_bwd_nb if backend.use_numba() else _segmean_bwd_np
    return bwd(dout, cid, mask, counts)


# ---------------------------------------------------------------------------
# cosine centroid assignment (inputs assumed unit-norm); ties -> lowest index
# ---------------------------------------------------------------------------


@njit(cache=True)
def _assign_nb(x, centroids):
    n, d = x.shape
    n_c = centroids.shape[0]
    ids = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = -np.inf
        arg = 0
        for c in range(n_c):
            acc = 0.0
            for j in range(d):
                acc += np.float64(x[i, j]) * np.float64(centroids[c, j])
            if acc > best:
                best = acc
                arg = c
        ids[i] = arg
    return ids


def _assign_np(x, centroids):
    sims = x.astype(np.float64) @ centroids.astype(np.float64).T
    return np.argmax(sims, axis=1).astype(np.int64)


def assign_cosine(x, centroids):
    fn = _assign_nb if backend.use_numba() else _assign_np
    return fn(np.ascontiguousarray(x), np.ascontiguousarray(centroids))
