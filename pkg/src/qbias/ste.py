"""Straight-through training of the quantizer's affine maps.

The value path is the real quantizer; gradients come from the smooth
relaxation in which rounding is replaced by the identity.  Under that
substitution the scale/offset/shift/normalize chain cancels exactly and
each group collapses to

    z^g = A_out^g tanh(A_in^g c^g + b_in^g) + b_out^g

so the backward pass is the plain chain rule through a one-layer tanh
network, and it is the true gradient of a real function, checkable
against finite differences.

The objective is a surrogate: downstream scoring only ever consumes
c reconstruction error and the bilinear form q . (W_k z), so the loss
preserves exactly those two quantities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigurationError, InputError, StateError, TrainingError
from .fsq import FsqConfig, FsqParams, quantize
from .retrieval import split_key_blocks

__all__ = [
    "TrainConfig",
    "GradTape",
    "FsqGrads",
    "TrainResult",
    "init_params",
    "forward_ste",
    "backward",
    "loss",
    "grad_loss",
    "train",
]


_PARAM_LIMIT = float(np.finfo(np.float32).max)


@dataclass(frozen=True)
class TrainConfig:
    """SGD-with-momentum settings; loss_weights = (w_recon, w_dot)."""

    learning_rate: float
    momentum: float = 0.0
    steps: int = 1000
    batch_size: int = 64
    loss_weights: tuple[float, float] = (1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ConfigurationError("learning_rate must be finite and positive")
        if not (np.isfinite(self.momentum) and 0 <= self.momentum < 1):
            raise ConfigurationError("momentum must lie in [0, 1)")
        # steps = 0 is allowed as an explicit no-op (returns init unchanged)
        if self.steps < 0:
            raise ConfigurationError("steps must be non-negative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        w_r, w_d = self.loss_weights
        if not (np.isfinite(w_r) and np.isfinite(w_d) and w_r >= 0 and w_d >= 0):
            raise ConfigurationError("loss weights must be finite and non-negative")
        if w_r == 0 and w_d == 0:
            raise ConfigurationError("loss weights must not both be zero")


@dataclass
class GradTape:
    """Float64 intermediates of one smooth forward pass.

    Consumed exactly once by backward(); the arrays are (B, G, ...) with
    c grouped, t the pre-tanh activations, u = tanh(t), z the smooth
    output regrouped to (B, G, S).
    """

    c: NDArray[np.float64]
    t: NDArray[np.float64]
    u: NDArray[np.float64]
    z: NDArray[np.float64]
    a_out: NDArray[np.float64]
    _consumed: bool = field(default=False, repr=False)


@dataclass
class FsqGrads:
    """Mean-over-batch parameter gradients, float64, shaped like FsqParams."""

    a_in: NDArray[np.float64]
    b_in: NDArray[np.float64]
    a_out: NDArray[np.float64]
    b_out: NDArray[np.float64]


@dataclass
class TrainResult:
    params: FsqParams
    loss_trace: NDArray[np.float64]  # per-step batch loss, quantized path


def init_params(config: FsqConfig, seed: int = 0) -> FsqParams:
    """Fan-in uniform init: weights in +-1/sqrt(D/G), biases zero."""
    rng = np.random.default_rng(seed)
    g, n_lev, s = config.groups, len(config.levels), config.dim // config.groups
    h = 1.0 / np.sqrt(s)
    return FsqParams(
        config.levels,
        rng.uniform(-h, h, (g, n_lev, s)).astype(np.float32),
        np.zeros((g, n_lev), dtype=np.float32),
        rng.uniform(-h, h, (g, s, n_lev)).astype(np.float32),
        np.zeros((g, s), dtype=np.float32),
    )


def _group64(c: np.ndarray, params: FsqParams) -> NDArray[np.float64]:
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != params.dim:
        raise InputError(f"embeddings must be (batch, {params.dim})")
    if not np.all(np.isfinite(c)):
        raise InputError("embeddings contain non-finite values")
    return c.reshape(c.shape[0], params.groups, params.subdim)


def _smooth_tape(c: np.ndarray, params: FsqParams) -> GradTape:
    cg = _group64(c, params)
    a_in = params.a_in.astype(np.float64)
    b_in = params.b_in.astype(np.float64)
    a_out = params.a_out.astype(np.float64)
    b_out = params.b_out.astype(np.float64)
    t = np.einsum("bgs,gls->bgl", cg, a_in) + b_in
    u = np.tanh(t)
    z = np.einsum("bgl,gsl->bgs", u, a_out) + b_out
    return GradTape(cg, t, u, z, a_out)


def forward_ste(c: np.ndarray, params: FsqParams):
    """Quantized output plus the tape of its smooth twin.

    The returned z is bit-identical to quantize(c, params).z; only the
    gradient path sees the relaxation.
    """
    tape = _smooth_tape(c, params)  # validates shape/finiteness first
    z = quantize(np.asarray(c, dtype=np.float32), params).z
    return z, tape


def backward(tape: GradTape, loss_grads: np.ndarray) -> FsqGrads:
    """Chain rule through the tape; upstream is d(loss)/dz per sample.

    Reduction is the batch mean: passing per-sample gradients of
    per-sample losses yields the gradient of their mean.
    """
    if tape._consumed:
        raise StateError("gradient tape already consumed")
    tape._consumed = True
    b_n, groups, s = tape.z.shape
    g = np.asarray(loss_grads, dtype=np.float64)
    if g.shape != (b_n, groups * s):
        raise InputError(f"loss_grads must be ({b_n}, {groups * s})")
    dz = g.reshape(b_n, groups, s)
    d_b_out = dz.mean(axis=0)
    d_a_out = np.einsum("bgs,bgl->gsl", dz, tape.u) / b_n
    du = np.einsum("bgs,gsl->bgl", dz, tape.a_out)
    dt = du * (1.0 - tape.u**2)
    d_b_in = dt.mean(axis=0)
    d_a_in = np.einsum("bgl,bgs->gls", dt, tape.c) / b_n
    return FsqGrads(d_a_in, d_b_in, d_a_out, d_b_out)


def _as_batch(batch) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Accepts (Q, C) matrices or a sequence of (q, c) vector pairs."""
    if isinstance(batch, tuple) and len(batch) == 2 and np.ndim(batch[0]) == 2:
        q, c = (np.asarray(a, dtype=np.float64) for a in batch)
    else:
        pairs = list(batch)
        if not pairs:
            raise InputError("empty batch")
        q = np.asarray([p[0] for p in pairs], dtype=np.float64)
        c = np.asarray([p[1] for p in pairs], dtype=np.float64)
    if q.shape != c.shape or q.ndim != 2 or q.shape[0] == 0:
        raise InputError("batch must pair equal-shape (q, c) rows")
    return q, c


def _check_key_proj(w_k: np.ndarray, params: FsqParams) -> NDArray[np.float64]:
    split_key_blocks(w_k, params.groups)  # raises unless block-diagonal
    return np.asarray(w_k, dtype=np.float64)


def _objective(q, c, z, w_k, weights) -> float:
    w_recon, w_dot = weights
    r = c - z
    total = 0.0
    if w_recon:
        total += w_recon * float(np.mean(np.sum(r * r, axis=1)))
    if w_dot:
        e = np.einsum("bd,bd->b", q @ w_k, r)
        total += w_dot * float(np.mean(e * e))
    return total


def loss(batch, params: FsqParams, key_proj: np.ndarray, weights=(1.0, 1.0)) -> float:
    """Surrogate objective on the real (quantized) outputs.

    w_recon * mean |c - z|^2 + w_dot * mean (q . W_k c - q . W_k z)^2.
    """
    q, c = _as_batch(batch)
    w_k = _check_key_proj(key_proj, params)
    z = quantize(c.astype(np.float32), params).z.astype(np.float64)
    return _objective(q, c, z, w_k, weights)


def grad_loss(batch, params: FsqParams, key_proj: np.ndarray, weights=(1.0, 1.0)):
    """Smooth-relaxation loss value and its exact parameter gradients."""
    q, c = _as_batch(batch)
    w_k = _check_key_proj(key_proj, params)
    w_recon, w_dot = weights
    tape = _smooth_tape(c, params)
    z = tape.z.reshape(c.shape)
    value = _objective(q, c, z, w_k, weights)
    r = c - z
    dz = (2.0 * w_recon) * (z - c)
    if w_dot:
        proj = q @ w_k
        e = np.einsum("bd,bd->b", proj, r)
        dz -= (2.0 * w_dot) * e[:, None] * proj
    return value, backward(tape, dz)


def train(dataset, config: TrainConfig, init: FsqParams, key_proj) -> TrainResult:
    """Seeded SGD with momentum on float64 master weights.

    The loss trace records the quantized-path batch loss before each
    update, so it reflects what inference will actually see.  A
    non-finite trace value aborts with the offending step index.
    """
    q_all, c_all = _as_batch(dataset)
    w_k = _check_key_proj(key_proj, init)
    n = q_all.shape[0]
    rng = np.random.default_rng(config.seed)

    master = {
        "a_in": init.a_in.astype(np.float64),
        "b_in": init.b_in.astype(np.float64),
        "a_out": init.a_out.astype(np.float64),
        "b_out": init.b_out.astype(np.float64),
    }
    velocity = {k: np.zeros_like(v) for k, v in master.items()}

    def snapshot() -> FsqParams:
        return FsqParams(
            init.levels,
            master["a_in"].astype(np.float32),
            master["b_in"].astype(np.float32),
            master["a_out"].astype(np.float32),
            master["b_out"].astype(np.float32),
        )

    trace = np.empty(config.steps, dtype=np.float64)
    for step in range(config.steps):
        idx = rng.integers(0, n, size=config.batch_size)
        batch = (q_all[idx], c_all[idx])
        params = snapshot()
        trace[step] = loss(batch, params, w_k, config.loss_weights)
        if not np.isfinite(trace[step]):
            raise TrainingError(f"loss diverged at step {step}")
        _, grads = grad_loss(batch, params, w_k, config.loss_weights)
        for name, g in (
            ("a_in", grads.a_in),
            ("b_in", grads.b_in),
            ("a_out", grads.a_out),
            ("b_out", grads.b_out),
        ):
            velocity[name] = config.momentum * velocity[name] - config.learning_rate * g
            master[name] += velocity[name]
        for arr in master.values():
            # parameters must stay storable as float32; NaN fails too
            if not np.all(np.abs(arr) <= _PARAM_LIMIT):
                raise TrainingError(f"parameters diverged at step {step}")

    return TrainResult(snapshot() if config.steps else init.copy(), trace)
