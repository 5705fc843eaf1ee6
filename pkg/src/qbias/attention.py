"""Single-head cross attention over a phrase catalogue.

Frames attend over phrase embeddings: {Q, K, V} = {X W_q, C W_k, C W_v},
Y = softmax(QK^T / sqrt(D)) V.  The key projection is block-diagonal
with one block per quantizer group whenever grouping is active, which is
what lets retrieval fold W_k into the quantizer's output affine.

quantized_attend replaces C with reconstructions of the stored codes and
computes the scores through the retrieval table path with the per-frame
bias added back, so its scores equal the reconstruction path's rather
than differing by a frame constant.  (Row-wise softmax is shift
invariant, so in exact arithmetic the bias cannot change the weights;
calibrated scores are still the contract.)  Softmax subtracts the row
max and accumulates in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigurationError, InputError
from .fsq import FsqParams, reconstruct, unpack_codes
from .retrieval import precompute_columns, score_matrix

__all__ = [
    "ProjectionSet",
    "AttentionOutput",
    "project",
    "dense_scores",
    "attend",
    "quantized_attend",
]


@dataclass
class ProjectionSet:
    """Square projections W_q, W_k, W_v (D, D), float32."""

    w_q: NDArray[np.float32]
    w_k: NDArray[np.float32]
    w_v: NDArray[np.float32]

    def __post_init__(self):
        for name in ("w_q", "w_k", "w_v"):
            w = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            setattr(self, name, w)
            if w.ndim != 2 or w.shape[0] != w.shape[1]:
                raise ConfigurationError(f"{name} must be square")
            if not np.all(np.isfinite(w)):
                raise InputError(f"{name} contains non-finite values")
        if not (self.w_q.shape == self.w_k.shape == self.w_v.shape):
            raise ConfigurationError("projections must share one dimension")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "ProjectionSet":
        eye = np.eye(dim, dtype=np.float32)
        return cls(eye, eye.copy(), eye.copy())

    @classmethod
    def random(cls, dim: int, groups: int = 1, seed: int = 0) -> "ProjectionSet":
        """Seeded dense W_q/W_v and a block-diagonal W_k with G blocks."""
        if dim % groups != 0:
            raise ConfigurationError(f"dim {dim} not divisible by {groups} groups")
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(dim)
        w_q = rng.normal(0.0, scale, (dim, dim)).astype(np.float32)
        w_v = rng.normal(0.0, scale, (dim, dim)).astype(np.float32)
        s = dim // groups
        w_k = np.zeros((dim, dim), dtype=np.float32)
        bscale = 1.0 / np.sqrt(s)
        for g in range(groups):
            sl = slice(g * s, (g + 1) * s)
            w_k[sl, sl] = rng.normal(0.0, bscale, (s, s)).astype(np.float32)
        return cls(w_q, w_k, w_v)


@dataclass
class AttentionOutput:
    y: NDArray[np.float32]  # (T, D)
    weights: Optional[NDArray[np.float64]] = None  # (T, B) when requested


def _check_rows(name: str, rows: np.ndarray, dim: int) -> NDArray[np.float32]:
    rows = np.asarray(rows, dtype=np.float32)
    if rows.ndim != 2 or rows.shape[1] != dim:
        raise InputError(f"{name} must be a (n, {dim}) matrix")
    if not np.all(np.isfinite(rows)):
        raise InputError(f"{name} contains non-finite values")
    return rows


def project(frames: np.ndarray, embeddings: np.ndarray, proj: ProjectionSet):
    """Row convention: Q = X W_q, K = C W_k, V = C W_v, all float32."""
    x = _check_rows("frames", frames, proj.dim)
    c = _check_rows("embeddings", embeddings, proj.dim)
    return x @ proj.w_q, c @ proj.w_k, c @ proj.w_v


def dense_scores(
    q_rows: np.ndarray, k_rows: np.ndarray, scale: bool = True
) -> NDArray[np.float32]:
    """Q K^T, optionally scaled by 1/sqrt(D)."""
    q_rows = np.asarray(q_rows, dtype=np.float32)
    k_rows = np.asarray(k_rows, dtype=np.float32)
    if q_rows.shape[-1] != k_rows.shape[-1]:
        raise InputError("query/key dims differ")
    scores = q_rows @ k_rows.T
    if scale:
        scores = scores * np.float32(q_rows.shape[-1] ** -0.5)
    return scores


def _softmax64(scores: np.ndarray) -> NDArray[np.float64]:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise InputError("softmax over an empty score row")
    if not np.all(np.isfinite(s)):
        raise InputError("scores contain non-finite values")
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def attend(
    scores: np.ndarray, v_rows: np.ndarray, return_weights: bool = False
) -> AttentionOutput:
    """Softmax-weighted sum of value rows; float64 inside, float32 out."""
    w = _softmax64(scores)
    if w.shape[-1] != np.asarray(v_rows).shape[0]:
        raise InputError("score columns do not match the number of value rows")
    y = (w @ np.asarray(v_rows, dtype=np.float64)).astype(np.float32)
    return AttentionOutput(y, w if return_weights else None)


def quantized_attend(
    frames: np.ndarray,
    code_data: np.ndarray,
    params: FsqParams,
    proj: ProjectionSet,
    scale: bool = True,
    return_weights: bool = False,
) -> AttentionOutput:
    """Attention with keys/values reconstructed from codes.

    Scores go through the decomposition table with the per-frame bias
    added back so they match q . key(z) exactly; values are
    reconstruct(codes) @ W_v.
    """
    x = _check_rows("frames", frames, proj.dim)
    q_rows = x @ proj.w_q
    columns = precompute_columns(params, proj)
    scores = score_matrix(q_rows, columns, code_data, include_bias=True)
    if scale:
        scores = scores * (proj.dim**-0.5)
    arr = np.asarray(code_data)
    codes = unpack_codes(arr, params.levels) if arr.dtype == np.uint16 else arr
    z = reconstruct(codes, params)
    v_rows = z @ proj.w_v
    return attend(scores, v_rows, return_weights=return_weights)
