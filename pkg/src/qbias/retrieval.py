"""Streaming top-k scoring of quantized phrases against query frames.

The key projection of a reconstructed phrase is affine in its normalized
codes, so a query/key dot product decomposes into a sum of per-group,
per-channel table entries plus a code-independent bias:

    q . key(z_j)  =  sum_g sum_i  (q_g . a_i^g) u(i, c_ij)  +  sum_g q_g . b^g

with a_i^g the columns of W_k^{g,T} A_out^g and b^g = W_k^{g,T} b_out^g.
The first factor of each entry depends only on the frame, the second
only on the code, so a (G, |L|, l_max) table per frame prices every
phrase; scoring is then a gather-and-sum over the packed code words.
The bias term is shared by every phrase of a frame, so the streaming
kernels ignore it entirely and it is added back once per frame at the
end; returned scores are therefore the calibrated q . key(z) values.

Retrieval never materializes a T x |B| score matrix: phrases stream
through a per-frame K-element min-heap.  Ties break toward smaller
phrase ids.  The table path is float64 end to end so results are stable
against reassociation and can be checked against exact arithmetic.

Unused table slots (code c >= l_i) are NaN so that any out-of-range
gather surfaces as a NaN score instead of a silently wrong one.
"""

from __future__ import annotations

import heapq
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import TYPE_CHECKING, Optional

import numpy as np
from numpy.typing import NDArray

from . import _kernel
from .errors import ConfigurationError, InputError
from .fsq import FsqParams, normalize, packing_supported, unpack_codes

if TYPE_CHECKING:  # pragma: no cover
    from .attention import ProjectionSet

__all__ = [
    "Columns",
    "ScoreTable",
    "RetrievalResult",
    "split_key_blocks",
    "precompute_columns",
    "build_score_table",
    "approx_score",
    "score_matrix",
    "topk_from_codes",
    "topk_retrieve",
    "union_retrieved",
]

STREAM_BLOCK = 4096  # phrases per block in the numpy streaming path
LUT_BUDGET_BYTES = 8 << 20  # frame-chunk size follows from this cap


@dataclass
class Columns:
    """Per-group decomposition columns: a (G, D/G, |L|), b (G, D/G), float64."""

    levels: tuple[int, ...]
    a: NDArray[np.float64]
    b: NDArray[np.float64]


@dataclass
class ScoreTable:
    """Per-frame gather table (G, |L|, l_max) float64 plus the frame bias.

    values[g, i, c] prices code c of channel i in group g; slots with
    c >= l_i are NaN.
    """

    levels: tuple[int, ...]
    values: NDArray[np.float64]
    bias: float


@dataclass
class RetrievalResult:
    """Per-frame top phrase ids with calibrated scores q . key(z).

    Rows are score-descending, ties id-ascending.  truncated is set when
    fewer than the requested k phrases exist.  gather_ops counts table
    lookups when the caller asked for counting.
    """

    ids: NDArray[np.int64]  # (T, K')
    scores: NDArray[np.float64]  # (T, K')
    k_requested: int
    truncated: bool = False
    gather_ops: Optional[int] = None


def split_key_blocks(w_k: np.ndarray, groups: int) -> NDArray[np.float64]:
    """Validate block-diagonal structure and return the (G, S, S) blocks."""
    w_k = np.asarray(w_k)
    d = w_k.shape[0]
    if w_k.ndim != 2 or w_k.shape[1] != d:
        raise ConfigurationError("key projection must be square")
    if d % groups != 0:
        raise ConfigurationError(f"dim {d} not divisible by {groups} groups")
    s = d // groups
    blocks = np.empty((groups, s, s), dtype=np.float64)
    mask = np.ones((d, d), dtype=bool)
    for g in range(groups):
        sl = slice(g * s, (g + 1) * s)
        blocks[g] = w_k[sl, sl]
        mask[sl, sl] = False
    if np.any(w_k[mask] != 0):
        raise ConfigurationError(
            f"key projection has nonzero entries outside its {groups} "
            "diagonal blocks; grouped decomposition does not apply"
        )
    return blocks


def precompute_columns(params: FsqParams, proj: "ProjectionSet") -> Columns:
    """Fold the key projection into the output affine, once per model."""
    blocks = split_key_blocks(proj.w_k, params.groups)
    a_out = params.a_out.astype(np.float64)
    b_out = params.b_out.astype(np.float64)
    # a[g] = W_k^{g,T} @ a_out[g]; row convention key(z) = z @ W_k
    a = np.einsum("gts,gtl->gsl", blocks, a_out)
    b = np.einsum("gts,gt->gs", blocks, b_out)
    return Columns(params.levels, a, b)


@lru_cache(maxsize=32)
def _value_table(levels: tuple[int, ...]) -> NDArray[np.float64]:
    """(|L|, l_max) normalized values, NaN in the c >= l_i slots."""
    l_max = max(levels)
    tab = np.full((len(levels), l_max), np.nan, dtype=np.float64)
    for i, l in enumerate(levels):
        tab[i, :l] = normalize(
            np.arange(l).reshape(-1, 1), (l,), dtype=np.float64
        ).ravel()
    return tab


def _grouped_queries(q_rows: np.ndarray, columns: Columns) -> NDArray[np.float64]:
    q_rows = np.asarray(q_rows)
    groups, s, _ = columns.a.shape
    if q_rows.shape[-1] != groups * s:
        raise InputError(
            f"query dim {q_rows.shape[-1]} != decomposition dim {groups * s}"
        )
    return q_rows.astype(np.float64).reshape(q_rows.shape[:-1] + (groups, s))


def _table_values(q_rows: np.ndarray, columns: Columns) -> NDArray[np.float64]:
    """Tables for a batch of projected queries: (T, G, |L|, l_max)."""
    qg = _grouped_queries(q_rows, columns)
    per_channel = np.einsum("...gs,gsl->...gl", qg, columns.a)
    return per_channel[..., None] * _value_table(columns.levels)


def build_score_table(q: np.ndarray, columns: Columns) -> ScoreTable:
    """Table for one projected query vector (D,)."""
    q = np.asarray(q)
    if q.ndim != 1:
        raise InputError("build_score_table takes a single query vector")
    if not np.all(np.isfinite(q)):
        raise InputError("query contains non-finite values")
    values = _table_values(q[None, :], columns)[0]
    qg = _grouped_queries(q[None, :], columns)[0]
    bias = float(np.einsum("gs,gs->", qg, columns.b))
    return ScoreTable(columns.levels, values, bias)


def _row_codes(row: np.ndarray, levels: tuple[int, ...]) -> np.ndarray:
    row = np.asarray(row)
    if row.dtype == np.uint16 and row.ndim == 1:
        return unpack_codes(row, levels)
    if row.ndim == 2 and row.shape[1] == len(levels):
        return row
    raise InputError("expected a packed word row (G,) or codes (G, |L|)")


def approx_score(table: ScoreTable, row: np.ndarray, include_bias: bool = False) -> float:
    """Price one phrase: float64 sum over (group, channel) in index order."""
    codes = _row_codes(row, table.levels)
    total = 0.0
    for g in range(codes.shape[0]):
        for i in range(codes.shape[1]):
            total += table.values[g, i, codes[g, i]]
    if include_bias:
        total += table.bias
    return float(total)


def _normalize_code_data(code_data: np.ndarray, levels: tuple[int, ...]):
    """Returns (words or None, codes or None); exactly one is set."""
    arr = np.asarray(code_data)
    if arr.dtype == np.uint16 and arr.ndim == 2:
        if not packing_supported(levels):
            raise ConfigurationError(
                f"levels {levels} are not 3-bit packable; pass byte codes"
            )
        return np.ascontiguousarray(arr), None
    if arr.ndim == 3 and arr.shape[2] == len(levels):
        return None, np.ascontiguousarray(arr, dtype=np.uint8)
    raise InputError(
        "code data must be packed words (B, G) uint16 or codes (B, G, |L|)"
    )


def _validate_words_blockwise(words: np.ndarray, levels: tuple[int, ...]):
    """Range-check packed words in fixed-size blocks (no |B| temporaries)."""
    n_lev = len(levels)
    lv = np.asarray(levels, dtype=np.uint16)
    for j0 in range(0, words.shape[0], STREAM_BLOCK):
        blk = words[j0 : j0 + STREAM_BLOCK]
        if np.any(blk >> (_kernel.CODE_BITS * n_lev)):
            raise InputError("packed word has bits above the coded channels")
        for i in range(n_lev):
            field = (blk >> (_kernel.CODE_BITS * i)) & 7
            if np.any(field >= lv[i]):
                raise InputError(
                    f"packed word carries a code >= level {levels[i]} in channel {i}"
                )


def _validate_codes_blockwise(codes: np.ndarray, levels: tuple[int, ...]):
    lv = np.asarray(levels, dtype=np.uint8)
    for j0 in range(0, codes.shape[0], STREAM_BLOCK):
        if np.any(codes[j0 : j0 + STREAM_BLOCK] >= lv):
            raise InputError("code matrix carries codes outside the level spec")


def score_matrix(
    q_rows: np.ndarray,
    columns: Columns,
    code_data: np.ndarray,
    include_bias: bool = False,
) -> NDArray[np.float64]:
    """Dense (T, B) table-path scores for projected queries.

    Materializes T x B on purpose; retrieval uses the streaming paths.
    """
    words, codes = _normalize_code_data(code_data, columns.levels)
    if codes is None:
        codes = unpack_codes(words, columns.levels)
    values = _table_values(np.atleast_2d(q_rows), columns)
    t_n = values.shape[0]
    b_n = codes.shape[0]
    out = np.zeros((t_n, b_n), dtype=np.float64)
    for g in range(codes.shape[1]):
        for i in range(codes.shape[2]):
            out += values[:, g, i, :][:, codes[:, g, i]]
    if include_bias:
        qg = _grouped_queries(np.atleast_2d(q_rows), columns)
        out += np.einsum("tgs,gs->t", qg, columns.b)[:, None]
    return out


def _project_queries(frames: np.ndarray, proj) -> NDArray[np.float32]:
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 2:
        raise InputError("frames must be a (T, D) matrix")
    if not np.all(np.isfinite(frames)):
        raise InputError("frames contain non-finite values")
    return frames @ np.asarray(proj.w_q, dtype=np.float32)


def _chunk_frames(n_frames: int, levels: tuple[int, ...], groups: int) -> int:
    n_lev = len(levels)
    slots = 8 ** min(n_lev, 4) + (8 if n_lev == 5 else 0)
    per_frame = slots * groups * 8
    return max(1, min(n_frames, LUT_BUDGET_BYTES // per_frame))


def _topk_numba(q_rows, columns, words, k):
    levels = columns.levels
    n_lev = len(levels)
    groups = columns.a.shape[0]
    t_n = q_rows.shape[0]
    chunk = _chunk_frames(t_n, levels, groups)
    all_s = np.empty((t_n, k), dtype=np.float64)
    all_i = np.empty((t_n, k), dtype=np.int64)
    split = min(n_lev, 4)
    slots_a = 8**split
    for t0 in range(0, t_n, chunk):
        values = _table_values(q_rows[t0 : t0 + chunk], columns)
        tc = values.shape[0]
        heap_s = np.full((tc, k), -np.inf, dtype=np.float64)
        heap_i = np.full((tc, k), _kernel.HEAP_EMPTY_ID, dtype=np.int64)
        lut_a = np.empty((groups * slots_a, tc), dtype=np.float64)
        _kernel.build_lut(values, 0, split, lut_a)
        if n_lev <= 4:
            _kernel.topk_single_table(words, lut_a, heap_s, heap_i)
        else:
            slots_b = 8 ** (n_lev - split)
            lut_b = np.empty((groups * slots_b, tc), dtype=np.float64)
            _kernel.build_lut(values, split, n_lev, lut_b)
            _kernel.topk_two_tables(
                words, lut_a, lut_b, _kernel.CODE_BITS * split, heap_s, heap_i
            )
        all_s[t0 : t0 + tc] = heap_s
        all_i[t0 : t0 + tc] = heap_i
    return all_s, all_i


def _topk_numpy(q_rows, columns, words, codes, k, count_ops):
    levels = columns.levels
    n_lev = len(levels)
    t_n = q_rows.shape[0]
    b_n = words.shape[0] if words is not None else codes.shape[0]
    groups = columns.a.shape[0]
    values = _table_values(q_rows, columns)
    all_s = np.full((t_n, k), -np.inf, dtype=np.float64)
    all_i = np.full((t_n, k), _kernel.HEAP_EMPTY_ID, dtype=np.int64)
    ops = 0
    for t in range(t_n):
        vals = values[t]
        heap: list[tuple[float, int]] = []  # (score, -id); root is worst
        thr = -np.inf
        for j0 in range(0, b_n, STREAM_BLOCK):
            if words is not None:
                blk = words[j0 : j0 + STREAM_BLOCK]
                s = np.zeros(blk.shape[0], dtype=np.float64)
                for g in range(groups):
                    col = blk[:, g]
                    for i in range(n_lev):
                        c = (col >> (_kernel.CODE_BITS * i)) & 7
                        s += vals[g, i][c]
                        ops += blk.shape[0]
            else:
                blk = codes[j0 : j0 + STREAM_BLOCK]
                s = np.zeros(blk.shape[0], dtype=np.float64)
                for g in range(groups):
                    for i in range(n_lev):
                        s += vals[g, i][blk[:, g, i]]
                        ops += blk.shape[0]
            if len(heap) < k:
                cand = range(s.shape[0])
            else:
                cand = np.nonzero(s >= thr)[0]
            for jj in cand:
                entry = (float(s[jj]), -(j0 + int(jj)))
                if len(heap) < k:
                    heapq.heappush(heap, entry)
                elif entry > heap[0]:
                    heapq.heapreplace(heap, entry)
                else:
                    continue
                thr = heap[0][0]
        for pos, (sc, neg) in enumerate(heap):
            all_s[t, pos] = sc
            all_i[t, pos] = -neg
    return all_s, all_i, (ops if count_ops else None)


def topk_from_codes(
    frames: np.ndarray,
    code_data: np.ndarray,
    params: FsqParams,
    proj: "ProjectionSet",
    k: int,
    engine: str = "auto",
    count_ops: bool = False,
) -> RetrievalResult:
    """Project frames with W_q and stream the code matrix for top-k ids.

    engine: "numba" (fused kernel), "numpy" (blockwise fallback), or
    "auto".  Both produce the same id sets; float64 sums may differ at
    reassociation level between engines.
    """
    if k < 1:
        raise InputError("k must be at least 1")
    words, codes = _normalize_code_data(code_data, params.levels)
    if words is not None:
        _validate_words_blockwise(words, params.levels)
    else:
        _validate_codes_blockwise(codes, params.levels)
    if engine == "auto":
        engine = "numba" if (_kernel.HAVE_NUMBA and words is not None) else "numpy"
    if engine == "numba" and not _kernel.HAVE_NUMBA:
        raise ConfigurationError("numba engine requested but numba is unavailable")
    if engine == "numba" and words is None:
        raise ConfigurationError("numba engine requires 3-bit packable codes")
    if engine not in ("numba", "numpy"):
        raise InputError(f"unknown engine {engine!r}")

    q_rows = _project_queries(frames, proj)
    columns = precompute_columns(params, proj)
    b_n = words.shape[0] if words is not None else codes.shape[0]
    truncated = k > b_n
    if truncated:
        warnings.warn(
            f"requested top-{k} from only {b_n} phrases; returning {b_n}",
            stacklevel=2,
        )

    ops = None
    if engine == "numba":
        heap_s, heap_i = _topk_numba(q_rows, columns, words, k)
    else:
        heap_s, heap_i, ops = _topk_numpy(q_rows, columns, words, codes, k, count_ops)

    t_n = q_rows.shape[0]
    k_eff = min(k, b_n)
    ids = np.empty((t_n, k_eff), dtype=np.int64)
    scores = np.empty((t_n, k_eff), dtype=np.float64)
    # per-frame constant, outside the hot loops by design
    bias = np.einsum("tgs,gs->t", _grouped_queries(q_rows, columns), columns.b)
    for t in range(t_n):
        valid = heap_i[t] != _kernel.HEAP_EMPTY_ID
        s_t, i_t = heap_s[t][valid], heap_i[t][valid]
        order = np.lexsort((i_t, -s_t))
        ids[t] = i_t[order]
        scores[t] = s_t[order] + bias[t]
    return RetrievalResult(ids, scores, k, truncated, ops)


def topk_retrieve(
    frames: np.ndarray, index, k: int, engine: str = "auto"
) -> RetrievalResult:
    """Top-k phrase ids per frame from a built index.

    The index supplies the packed code matrix, quantizer parameters, and
    the projection set (see catalogue.PackedIndex).
    """
    return topk_from_codes(frames, index.code_data, index.params, index.proj, k, engine)


def union_retrieved(result: RetrievalResult, exclude=(0,)) -> list[int]:
    """Distinct ids across frames, minus excluded ids (back-off by default)."""
    excluded = set(int(e) for e in exclude)
    found = set(int(i) for i in result.ids.ravel()) - excluded
    return sorted(found)
