"""Denoising autoencoder over slice vectors.

A noise schedule defines the forward corruption x_t = sqrt(ab_t) x0 +
sqrt(1-ab_t) eps. A denoiser predicts eps from (x_t, t, z) where z is the
output of a jointly trained encoder; the L1 objective trains both on one
tape. Deterministic reverse steps invert the corruption exactly when fed
the true eps, which is the main correctness oracle here. Schedule math
stays in float64: a 1000-step chain in float32 drifts past 1e-4.

Sampling-side helpers (ddim_step, ddim_jump, reconstruct) are inference
only and work on plain arrays; q_sample and ddim_loss accept tensors and
participate in autodiff.
"""

import math
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import DataError, NumericalError
from .rng import named_stream


class NoiseSchedule:
    """Beta table plus cumulative alpha products, ab[0] = 1 by convention."""

    def __init__(self, betas: np.ndarray):
        b = np.asarray(betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1:
            raise DataError("schedule needs a 1-D beta table with T >= 1")
        if not np.all((b > 0.0) & (b < 1.0)):
            raise DataError("betas must lie strictly inside (0, 1)")
        if np.any(np.diff(b) < 0.0):
            raise DataError("betas must be non-decreasing")
        self.betas = b
        self.T = b.size
        self.alphas = 1.0 - b
        ab = np.empty(self.T + 1, dtype=np.float64)
        ab[0] = 1.0
        for t in range(1, self.T + 1):
            ab[t] = ab[t - 1] * self.alphas[t - 1]
        self.alpha_bar = ab
        self.sqrt_ab = np.sqrt(ab)
        self.sqrt_1m_ab = np.sqrt(1.0 - ab)

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        if T < 1:
            raise DataError(f"T must be >= 1, got {T}")
        return cls(np.linspace(beta_start, beta_end, T))

    def check_step(self, t: int, lowest: int = 1) -> int:
        t = int(t)
        if not (lowest <= t <= self.T):
            raise DataError(f"step {t} outside [{lowest}, {self.T}]")
        return t


def q_sample(x0, t: int, eps, sched: NoiseSchedule):
    """Forward corruption at step t. Tensor inputs stay on the tape;
    plain arrays compute in float64."""
    t = sched.check_step(t, lowest=0)
    a = float(sched.sqrt_ab[t])
    s = float(sched.sqrt_1m_ab[t])
    if isinstance(x0, T.Tensor):
        return T.add(T.scale(x0, a), T.scale(eps, s))
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise DataError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    return a * x0 + s * eps


def ddim_step(xt: np.ndarray, t: int, eps_hat: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """One deterministic reverse step t -> t-1."""
    return ddim_jump(xt, t, t - 1, eps_hat, sched)


def ddim_jump(
    xt: np.ndarray, t: int, t_prev: int, eps_hat: np.ndarray, sched: NoiseSchedule
) -> np.ndarray:
    """Deterministic reverse jump t -> t_prev (t_prev < t). Predicts x0
    from eps_hat, then re-noises to level t_prev."""
    t = sched.check_step(t)
    t_prev = int(t_prev)
    if not (0 <= t_prev < t):
        raise DataError(f"target step {t_prev} must lie in [0, {t})")
    xt = np.asarray(xt, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if eps_hat.shape != xt.shape:
        raise DataError(f"eps_hat shape {eps_hat.shape} != x shape {xt.shape}")
    x0_pred = (xt - sched.sqrt_1m_ab[t] * eps_hat) / sched.sqrt_ab[t]
    return sched.sqrt_ab[t_prev] * x0_pred + sched.sqrt_1m_ab[t_prev] * eps_hat


def ddim_loss(
    x0: T.Tensor,
    t: int,
    eps: T.Tensor,
    den: "Denoiser",
    enc: "Encoder | None",
    sched: NoiseSchedule,
) -> T.Tensor:
    """Mean absolute eps-prediction error; differentiable through both the
    denoiser and the encoder. enc=None trains unconditioned."""
    xt = q_sample(x0, t, eps, sched)
    z = enc(x0) if enc is not None else None
    eps_hat = den(xt, t, z)
    if eps_hat.shape != eps.shape:
        raise DataError(f"denoiser output {eps_hat.shape} != eps {eps.shape}")
    return T.mean_all(T.abs_val(T.sub(eps_hat, eps)))


def l1_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def sample_timesteps(T_total: int, n_steps: int) -> np.ndarray:
    """Ascending strided plan 0 = tau_0 < tau_1 < ... < tau_n = T."""
    if not (1 <= n_steps <= T_total):
        raise DataError(f"n_steps {n_steps} outside [1, {T_total}]")
    taus = np.unique(np.round(np.linspace(0.0, T_total, n_steps + 1)).astype(np.int64))
    assert taus[0] == 0 and taus[-1] == T_total
    return taus


def reconstruct(
    x0: np.ndarray,
    den: "Denoiser",
    enc: "Encoder | None",
    sched: NoiseSchedule,
    n_steps: int = 50,
    noise_seed: int = 0,
) -> np.ndarray:
    """Deterministically reconstruct x0 from fixed noise, conditioning
    every reverse step on enc(x0). Returns the reconstruction; compare
    with l1_error(x0, recon)."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 2:
        raise DataError(f"reconstruct needs (n, dim) input, got shape {x0.shape}")
    rng = named_stream(noise_seed, "reconstruct-noise")
    x = rng.standard_normal(x0.shape)
    z = None
    if enc is not None:
        z = enc(T.Tensor(x0.astype(np.float32)))
    taus = sample_timesteps(sched.T, n_steps)
    for i in range(len(taus) - 1, 0, -1):
        t, t_prev = int(taus[i]), int(taus[i - 1])
        eps_hat = den(T.Tensor(x.astype(np.float32)), t, z).data
        x = ddim_jump(x, t, t_prev, eps_hat, sched)
    return x


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


def sinusoidal_embedding(t: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position code for a scalar step index."""
    if dim < 2 or dim % 2:
        raise DataError(f"embedding dim must be even and >= 2, got {dim}")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = float(t) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)


class MLPEncoder:
    """x0 (n, in_dim) -> representation (n, d_repr); three linear layers
    with GELU between, mirroring the denoiser trunk."""

    def __init__(self, in_dim: int, d_repr: int, width: int = 64, seed: int = 0, dtype=np.float32):
        rng = named_stream(seed, "encoder-init")
        self.in_dim = int(in_dim)
        self.d_repr = int(d_repr)
        self.params = {
            "w0": T.param(_glorot(rng, in_dim, width, dtype)),
            "b0": T.param(np.zeros(width, dtype=dtype)),
            "w1": T.param(_glorot(rng, width, width, dtype)),
            "b1": T.param(np.zeros(width, dtype=dtype)),
            "w2": T.param(_glorot(rng, width, d_repr, dtype)),
            "b2": T.param(np.zeros(d_repr, dtype=dtype)),
        }

    def __call__(self, x0: T.Tensor) -> T.Tensor:
        if x0.data.ndim != 2 or x0.data.shape[1] != self.in_dim:
            raise DataError(
                f"encoder expects (n, {self.in_dim}) input, got shape {tuple(x0.data.shape)}"
            )
        p = self.params
        h = T.gelu(T.linear(x0, p["w0"], p["b0"]))
        h = T.gelu(T.linear(h, p["w1"], p["b1"]))
        return T.linear(h, p["w2"], p["b2"])


class ResidualMLPDenoiser:
    """eps_hat from [x_t ; sin/cos(t) ; z]: input projection then two
    residual GELU blocks at fixed width, linear head back to x dim."""

    def __init__(
        self,
        dim: int,
        d_repr: int,
        width: int = 64,
        t_dim: int = 16,
        seed: int = 0,
        dtype=np.float32,
    ):
        rng = named_stream(seed, "denoiser-init")
        self.dim = int(dim)
        self.d_repr = int(d_repr)
        self.t_dim = int(t_dim)
        self.dtype = np.dtype(dtype)
        in_dim = dim + t_dim + d_repr
        self.params = {
            "w_in": T.param(_glorot(rng, in_dim, width, dtype)),
            "b_in": T.param(np.zeros(width, dtype=dtype)),
            "w_h0": T.param(_glorot(rng, width, width, dtype)),
            "b_h0": T.param(np.zeros(width, dtype=dtype)),
            "w_h1": T.param(_glorot(rng, width, width, dtype)),
            "b_h1": T.param(np.zeros(width, dtype=dtype)),
            "w_out": T.param(_glorot(rng, width, dim, dtype)),
            "b_out": T.param(np.zeros(dim, dtype=dtype)),
        }

    def __call__(self, xt: T.Tensor, t: int, z: T.Tensor | None) -> T.Tensor:
        n = xt.data.shape[0]
        if xt.data.ndim != 2 or xt.data.shape[1] != self.dim:
            raise DataError(f"denoiser expects (n, {self.dim}) input")
        temb = np.tile(sinusoidal_embedding(t, self.t_dim).astype(self.dtype), (n, 1))
        parts = [xt, T.Tensor(temb)]
        if self.d_repr:
            if z is None or z.data.shape != (n, self.d_repr):
                raise DataError(f"denoiser expects condition of shape ({n}, {self.d_repr})")
            parts.append(z)
        p = self.params
        h = T.gelu(T.linear(T.concat_cols(parts), p["w_in"], p["b_in"]))
        h = T.add(h, T.gelu(T.linear(h, p["w_h0"], p["b_h0"])))
        h = T.add(h, T.gelu(T.linear(h, p["w_h1"], p["b_h1"])))
        return T.linear(h, p["w_out"], p["b_out"])


class LinearDenoiser:
    """Scalar toy denoiser eps_hat = w * x_t; ignores t and condition.
    For unit-variance scalar data the optimum at step t is
    w = sqrt(1 - alpha_bar_t), which is what tests check against."""

    def __init__(self, init_w: float = 0.0, dtype=np.float64):
        self.params = {"w": T.param(np.full((1, 1), init_w, dtype=dtype))}

    def __call__(self, xt: T.Tensor, t: int, z: T.Tensor | None) -> T.Tensor:
        return T.matmul(xt, self.params["w"])

    @property
    def weight(self) -> float:
        return float(self.params["w"].data[0, 0])


class OracleDenoiser:
    """Test double that knows the clean signal: returns the eps implied by
    x_t and the true x0, the exact conditional answer."""

    def __init__(self, x0: np.ndarray, sched: NoiseSchedule):
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.sched = sched

    def __call__(self, xt: T.Tensor, t: int, z) -> T.Tensor:
        t = self.sched.check_step(t)
        eps = (xt.data.astype(np.float64) - self.sched.sqrt_ab[t] * self.x0) / self.sched.sqrt_1m_ab[t]
        return T.Tensor(eps.astype(xt.dtype))


class ZeroDenoiser:
    def __call__(self, xt: T.Tensor, t: int, z) -> T.Tensor:
        return T.Tensor(np.zeros_like(xt.data))


# ---------------------------------------------------------------------------
# training and corpus encoding
# ---------------------------------------------------------------------------


def train_autoencoder(
    x0: np.ndarray,
    enc: "MLPEncoder | None",
    den,
    sched: NoiseSchedule,
    epochs: int = 20,
    batch_size: int = 64,
    lr: float = 1e-4,
    seed: int = 0,
    fixed_t: int | None = None,
    log: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Joint Adam training of encoder and denoiser on the L1 objective.
    t is drawn uniformly per batch unless fixed_t pins it. Returns the
    per-epoch mean loss history."""
    dtype = next(iter(den.params.values())).data.dtype
    x0 = np.asarray(x0, dtype=dtype)
    if x0.ndim != 2 or x0.shape[0] == 0:
        raise DataError("training corpus must be a non-empty (n, dim) array")
    n = x0.shape[0]
    params: dict[str, T.Tensor] = {}
    if enc is not None:
        params.update({f"enc.{k}": v for k, v in enc.params.items()})
    params.update({f"den.{k}": v for k, v in den.params.items()})
    opt = T.AdamState(params, lr=lr)
    rng = named_stream(seed, "diffusion-train")
    history: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        batches = 0
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            xb = T.Tensor(x0[idx])
            eps = T.Tensor(rng.standard_normal(xb.data.shape).astype(x0.dtype))
            t = int(fixed_t) if fixed_t is not None else int(rng.integers(1, sched.T + 1))
            with T.Tape() as tape:
                loss = ddim_loss(xb, t, eps, den, enc, sched)
                val = loss.item()
                if not math.isfinite(val):
                    raise NumericalError(f"non-finite diffusion loss at epoch {epoch}")
                tape.backward(loss)
            opt.step()
            opt.zero_grads()
            total += val
            batches += 1
        history.append(total / batches)
        if log is not None:
            log(epoch, history[-1])
    return history


def encode_corpus(
    volumes: Sequence[np.ndarray], enc: MLPEncoder, batch_size: int = 512
) -> list[np.ndarray]:
    """Representations for each per-patient slice stack, order preserved.
    Pure inference: no tape, parameters read-only."""
    out: list[np.ndarray] = []
    for vi, vol in enumerate(volumes):
        arr = np.asarray(vol, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[1] != enc.in_dim:
            raise DataError(
                f"volume {vi}: expected (n, {enc.in_dim}) slices, got shape {arr.shape}"
            )
        reps = np.empty((arr.shape[0], enc.d_repr), dtype=np.float32)
        for lo in range(0, arr.shape[0], batch_size):
            reps[lo : lo + batch_size] = enc(T.Tensor(arr[lo : lo + batch_size])).data
        if not np.all(np.isfinite(reps)):
            raise NumericalError(f"volume {vi}: encoder produced non-finite representation")
        out.append(reps)
    return out
