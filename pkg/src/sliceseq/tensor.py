"""Dense tensors with a reverse-mode tape.

Storage is float32 by default with float64 accumulation inside every
reduction; gradient checking is normally run on float64 tensors so finite
differences resolve below the 1e-4 tolerance. A Tape records one backward
closure per primitive in execution order and replays them reversed.
Tensors are treated as immutable once created; only the optimizer rebinds
parameter data between tapes.
"""

import math
import threading
from typing import Callable, Iterable

import numpy as np
from scipy.special import erf

from . import kernels
from .errors import NumericalError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

LAYERNORM_EPS = 1e-5
ADAM_EPS = 1e-8


class Tensor:
    """Row-major float array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "needs_grad")

    def __init__(self, data: np.ndarray, needs_grad: bool = False):
        arr = np.ascontiguousarray(data)
        if arr.dtype not in (np.float32, np.float64):
            raise TypeError(f"tensor dtype must be float32/float64, got {arr.dtype}")
        self.data = arr
        self.grad = None
        self.needs_grad = bool(needs_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return self.data.item()

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, needs_grad={self.needs_grad})"


def _coerce(data, dtype) -> np.ndarray:
    if dtype is None:
        arr = np.asarray(data)
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        return arr.astype(dtype, copy=False)
    return np.asarray(data, dtype=dtype)


def tensor(data, dtype=None) -> Tensor:
    """Constant tensor; keeps float32/float64 input dtype, defaults other
    inputs to float32."""
    return Tensor(_coerce(data, dtype))


def param(data, dtype=None) -> Tensor:
    """Trainable tensor; same dtype rule as tensor()."""
    return Tensor(_coerce(data, dtype), needs_grad=True)


def zero_grads(params: Iterable[Tensor] | dict) -> None:
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.zero_grad()


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

_state = threading.local()


def _tape_stack():
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Single-writer record of primitive ops; backward replays in exact
    reverse order of recording."""

    def __init__(self):
        self._steps: list[Callable[[], None]] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._steps)

    def record(self, fn: Callable[[], None]) -> None:
        self._steps.append(fn)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._steps):
            fn()


def _make(out_data: np.ndarray, inputs: tuple[Tensor, ...], bwd_builder) -> Tensor:
    """Wrap a primitive result; record backward when a tape is active and
    some input participates in differentiation."""
    tape = active_tape()
    needs = tape is not None and any(t.needs_grad for t in inputs)
    out = Tensor(out_data, needs_grad=needs)
    if needs:
        tape.record(bwd_builder(out))
    return out


def _check_same_dtype(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise TypeError(f"mixed tensor dtypes: {dt} vs {t.data.dtype}")
    return dt


# ---------------------------------------------------------------------------
# elementwise and shape primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def bwd(out):
        def fn():
            if a.needs_grad:
                a.accumulate(out.grad)
            if b.needs_grad:
                b.accumulate(out.grad)

        return fn

    return _make(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} vs {b.shape}")

    def bwd(out):
        def fn():
            if a.needs_grad:
                a.accumulate(out.grad)
            if b.needs_grad:
                b.accumulate(-out.grad)

        return fn

    return _make(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def bwd(out):
        def fn():
            if a.needs_grad:
                a.accumulate(out.grad * b.data)
            if b.needs_grad:
                b.accumulate(out.grad * a.data)

        return fn

    return _make(a.data * b.data, (a, b), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(out):
        def fn():
            if x.needs_grad:
                x.accumulate(out.grad * c)

        return fn

    return _make(x.data * x.data.dtype.type(c), (x,), bwd)


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """(n, d) + (d,) broadcast over rows."""
    _check_same_dtype(a, v)
    if a.data.ndim != 2 or v.data.shape != (a.data.shape[1],):
        raise ValueError(f"add_rowvec shapes {a.shape} / {v.shape}")

    def bwd(out):
        def fn():
            if a.needs_grad:
                a.accumulate(out.grad)
            if v.needs_grad:
                v.accumulate(np.sum(out.grad, axis=0, dtype=np.float64).astype(v.dtype))

        return fn

    return _make(a.data + v.data[None, :], (a, v), bwd)


def mul_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """(n, d) * (d,) broadcast over rows."""
    _check_same_dtype(a, v)
    if a.data.ndim != 2 or v.data.shape != (a.data.shape[1],):
        raise ValueError(f"mul_rowvec shapes {a.shape} / {v.shape}")

    def bwd(out):
        def fn():
            if a.needs_grad:
                a.accumulate(out.grad * v.data[None, :])
            if v.needs_grad:
                v.accumulate(
                    np.sum(out.grad * a.data, axis=0, dtype=np.float64).astype(v.dtype)
                )

        return fn

    return _make(a.data * v.data[None, :], (a, v), bwd)


def mul_colvec(a: Tensor, v: Tensor) -> Tensor:
    """(n, d) * (n,) broadcast over columns (row scaling / masking)."""
    _check_same_dtype(a, v)
    if a.data.ndim != 2 or v.data.shape != (a.data.shape[0],):
        raise ValueError(f"mul_colvec shapes {a.shape} / {v.shape}")

    def bwd(out):
        def fn():
            if a.needs_grad:
                a.accumulate(out.grad * v.data[:, None])
            if v.needs_grad:
                v.accumulate(
                    np.sum(out.grad * a.data, axis=1, dtype=np.float64).astype(v.dtype)
                )

        return fn

    return _make(a.data * v.data[:, None], (a, v), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(out):
        def fn():
            if x.needs_grad:
                x.accumulate(out.grad.reshape(x.data.shape))

        return fn

    return _make(x.data.reshape(shape), (x,), bwd)


def concat_cols(parts: list[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along columns."""
    _check_same_dtype(*parts)
    n = parts[0].data.shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[0] != n:
            raise ValueError("concat_cols needs 2-D tensors with equal row counts")
    widths = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def bwd(out):
        def fn():
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.needs_grad:
                    p.accumulate(out.grad[:, lo:hi])

        return fn

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bwd)


def abs_val(x: Tensor) -> Tensor:
    sign = np.sign(x.data)

    def bwd(out):
        def fn():
            if x.needs_grad:
                x.accumulate(out.grad * sign)

        return fn

    return _make(np.abs(x.data), (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact erf-based GELU."""
    x64 = x.data.astype(np.float64)
    phi = 0.5 * (1.0 + erf(x64 * _INV_SQRT2))

    def bwd(out):
        def fn():
            if x.needs_grad:
                pdf = np.exp(-0.5 * x64 * x64) * _INV_SQRT2PI
                x.accumulate((out.grad * (phi + x64 * pdf).astype(x.dtype)))

        return fn

    return _make((x64 * phi).astype(x.dtype), (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid64(x.data.astype(np.float64))

    def bwd(out):
        def fn():
            if x.needs_grad:
                x.accumulate(out.grad * (s * (1.0 - s)).astype(x.dtype))

        return fn

    return _make(s.astype(x.dtype), (x,), bwd)


def _sigmoid64(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# reductions (float64 accumulation)
# ---------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    def bwd(out):
        def fn():
            if x.needs_grad:
                x.accumulate(np.full_like(x.data, out.grad.item()))

        return fn

    return _make(
        np.asarray(np.sum(x.data, dtype=np.float64), dtype=x.dtype), (x,), bwd
    )


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def bwd(out):
        def fn():
            if x.needs_grad:
                x.accumulate(np.full_like(x.data, out.grad.item() / n))

        return fn

    return _make(
        np.asarray(np.sum(x.data, dtype=np.float64) / n, dtype=x.dtype), (x,), bwd
    )


def sum_rows(x: Tensor) -> Tensor:
    """(n, d) -> (n,) row sums."""
    if x.data.ndim != 2:
        raise ValueError(f"sum_rows needs a 2-D tensor, got {x.shape}")

    def bwd(out):
        def fn():
            if x.needs_grad:
                x.accumulate(np.repeat(out.grad[:, None], x.data.shape[1], axis=1))

        return fn

    return _make(
        np.sum(x.data, axis=1, dtype=np.float64).astype(x.dtype), (x,), bwd
    )


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation, result in storage dtype."""
    if a.dtype == np.float64:
        return a @ b
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(a.dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul needs 2-D tensors")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul inner extents differ: {a.shape} x {b.shape}")

    def bwd(out):
        def fn():
            g = out.grad
            if a.needs_grad:
                a.accumulate(_mm(g, b.data.T))
            if b.needs_grad:
                b.accumulate(_mm(a.data.T, g))

        return fn

    return _make(_mm(a.data, b.data), (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return add_rowvec(out, b) if b is not None else out


# ---------------------------------------------------------------------------
# softmax / layernorm
# ---------------------------------------------------------------------------


def softmax_rows(x: Tensor, bias: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax. `bias` is a constant additive logit offset (use
    -inf entries to force exact zeros at masked positions)."""
    if x.data.ndim != 2:
        raise ValueError(f"softmax_rows needs a 2-D tensor, got {x.shape}")
    z = x.data.astype(np.float64)
    if bias is not None:
        if bias.shape != x.data.shape:
            raise ValueError(f"bias shape {bias.shape} != input shape {x.data.shape}")
        z = z + bias
    mx = np.max(z, axis=1)
    if np.any(np.isneginf(mx)):
        raise NumericalError("softmax row with every entry masked to -inf")
    e = np.exp(z - mx[:, None])
    s = np.sum(e, axis=1)
    p64 = e / s[:, None]

    def bwd(out):
        def fn():
            if x.needs_grad:
                g = out.grad.astype(np.float64)
                dot = np.sum(p64 * g, axis=1)
                x.accumulate((p64 * (g - dot[:, None])).astype(x.dtype))

        return fn

    return _make(p64.astype(x.dtype), (x,), bwd)


def layernorm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Per-row standardization followed by the elementwise affine map."""
    _check_same_dtype(x, gain, shift)
    if x.data.ndim != 2:
        raise ValueError(f"layernorm needs a 2-D tensor, got {x.shape}")
    d = x.data.shape[1]
    if d < 2:
        raise ValueError("layernorm needs row width >= 2")
    if gain.data.shape != (d,) or shift.data.shape != (d,):
        raise ValueError("layernorm gain/shift must have shape (d,)")
    x64 = x.data.astype(np.float64)
    mu = np.mean(x64, axis=1, keepdims=True)
    var = np.mean((x64 - mu) ** 2, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y64 = (x64 - mu) * inv

    def bwd(out):
        def fn():
            g = out.grad.astype(np.float64)
            if gain.needs_grad:
                gain.accumulate(np.sum(g * y64, axis=0).astype(gain.dtype))
            if shift.needs_grad:
                shift.accumulate(np.sum(g, axis=0).astype(shift.dtype))
            if x.needs_grad:
                dy = g * gain.data.astype(np.float64)
                m1 = np.mean(dy, axis=1, keepdims=True)
                m2 = np.mean(dy * y64, axis=1, keepdims=True)
                x.accumulate((inv * (dy - m1 - y64 * m2)).astype(x.dtype))

        return fn

    return _make((y64 * gain.data + shift.data).astype(x.dtype), (x, gain, shift), bwd)


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs a Generator")
    keep = (rng.random(x.data.shape) >= rate).astype(x.dtype) / x.data.dtype.type(1.0 - rate)

    def bwd(out):
        def fn():
            if x.needs_grad:
                x.accumulate(out.grad * keep)

        return fn

    return _make(x.data * keep, (x,), bwd)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def bce_with_logits(
    logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None
) -> Tensor:
    """Weighted mean binary cross-entropy on logits, numerically stable."""
    if logits.data.ndim != 1:
        raise ValueError(f"bce_with_logits needs a 1-D logit tensor, got {logits.shape}")
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.data.shape:
        raise ValueError("targets shape mismatch")
    z = logits.data.astype(np.float64)
    # log(1 + exp(-|z|)) + max(z, 0) - y*z
    per = np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0) - y * z
    if weights is None:
        w = np.ones_like(y)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != y.shape:
            raise ValueError("weights shape mismatch")
    wsum = np.sum(w)
    loss = np.sum(per * w) / wsum

    def bwd(out):
        def fn():
            if logits.needs_grad:
                dz = (_sigmoid64(z) - y) * (w / wsum) * out.grad.item()
                logits.accumulate(dz.astype(logits.dtype))

        return fn

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bwd)


# ---------------------------------------------------------------------------
# structured primitives backed by the kernel module
# ---------------------------------------------------------------------------


def cluster_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    cluster_ids: np.ndarray,
    mask: np.ndarray,
    n_clusters: int,
    heads: int,
) -> Tensor:
    """Cluster attention over (B, N, M) projections: mean queries per
    cluster attend to all real keys, outputs broadcast back to members.
    Padded rows produce zeros; empty clusters are skipped."""
    _check_same_dtype(q, k, v)
    if not (q.shape == k.shape == v.shape) or q.data.ndim != 3:
        raise ValueError("q/k/v must share one (B, N, M) shape")
    B, N, M = q.shape
    if M % heads != 0:
        raise ValueError(f"M={M} not divisible by heads={heads}")
    if cluster_ids.shape != (B, N) or mask.shape != (B, N):
        raise ValueError("cluster_ids/mask must be (B, N)")
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    cluster_ids = np.ascontiguousarray(cluster_ids, dtype=np.int64)
    if not mask.any(axis=1).all():
        bad = int(np.nonzero(~mask.any(axis=1))[0][0])
        raise ValueError(f"batch row {bad} has zero real slices")
    real_ids = cluster_ids[mask]
    if real_ids.size and (real_ids.min() < 0 or real_ids.max() >= n_clusters):
        raise ValueError("real slice with cluster id outside [0, K)")
    out_data, saved = kernels.cluster_attention_forward(
        q.data, k.data, v.data, cluster_ids, mask, n_clusters, heads
    )

    def bwd(out):
        def fn():
            dq, dk, dv = kernels.cluster_attention_backward(
                out.grad, k.data, v.data, cluster_ids, mask, saved, heads
            )
            if q.needs_grad:
                q.accumulate(dq)
            if k.needs_grad:
                k.accumulate(dk)
            if v.needs_grad:
                v.accumulate(dv)

        return fn

    return _make(out_data, (q, k, v), bwd)


def segment_mean(
    values: Tensor, cluster_ids: np.ndarray, mask: np.ndarray, n_clusters: int
) -> Tensor:
    """(B, N) per-slice values -> (B, K) per-cluster means over real slices;
    empty clusters give 0."""
    if values.data.ndim != 2:
        raise ValueError(f"segment_mean needs (B, N) values, got {values.shape}")
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    cluster_ids = np.ascontiguousarray(cluster_ids, dtype=np.int64)
    out_data, counts = kernels.segment_mean_forward(
        values.data, cluster_ids, mask, n_clusters
    )

    def bwd(out):
        def fn():
            if values.needs_grad:
                values.accumulate(
                    kernels.segment_mean_backward(out.grad, cluster_ids, mask, counts)
                )

        return fn

    return _make(out_data, (values,), bwd)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class AdamState:
    """Bias-corrected Adam over a named parameter table."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = ADAM_EPS,
    ):
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        """One update from the gradients currently held by the parameters.
        Missing gradients count as zero (parameter unchanged)."""
        self.step_count += 1
        b1c = 1.0 - self.beta1**self.step_count
        b2c = 1.0 - self.beta2**self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise NumericalError(
                    f"non-finite gradient for parameter {name!r} at step {self.step_count}"
                )
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p.data = p.data - p.data.dtype.type(self.lr) * update

    def zero_grads(self) -> None:
        zero_grads(self.params)


def adam_step(state: AdamState) -> None:
    state.step()


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-3
) -> float:
    """Compare tape gradients of the scalar f() against central finite
    differences, elementwise; returns the max relative error. Run this on
    float64 parameters: float32 evaluation noise divided by 2h would swamp
    the 1e-4 scale this is meant to resolve."""
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    zero_grads(params)

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            lp = f().data.item()
            flat[idx] = orig - h
            lm = f().data.item()
            flat[idx] = orig
            numeric = (lp - lm) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[idx])
            denom = max(abs(a), abs(numeric))
            err = abs(a - numeric) if denom < 1e-6 else abs(a - numeric) / denom
            worst = max(worst, err)
    return worst
