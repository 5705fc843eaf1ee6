"""Numba kernels for the fused streaming top-k scorer.

The score of phrase j at frame t is a sum of per-group, per-channel
table entries selected by j's packed codes.  Rather than gathering the
|L| entries of a group one channel at a time, each possible 16-bit group
word is pre-combined into a per-group lookup row (one float64 per frame
of the current frame chunk, frames contiguous so the accumulation
vectorizes).  A word spans at most 15 bits; sub-tables cover at most 12
bits (4096 slots) so |L| = 5 splits into a 4-channel and a 1-channel
sub-table.  The per-frame best-K set lives in an array min-heap whose
root is the worst kept entry (lowest score, ties broken toward larger
id, so the kept set prefers smaller ids).  Everything the kernels touch
is allocated by the caller; nothing here scales with |B|.

This module is import-guarded: when numba is missing the package falls
back to the pure-numpy streaming path in retrieval.py.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn

        return deco


CODE_BITS = 3
MAX_SUBTABLE_BITS = 12  # 4096 slots, stays cache resident
HEAP_EMPTY_ID = np.int64(1) << 62


@njit(cache=True, inline="always")
def _heap_push(hs, hi, s, j):
    """Replace the root if (s, j) beats it, then sift down.

    Ordering: entry a is worse than b when a.score < b.score, or the
    scores tie and a.id > b.id.  The root is the worst kept entry.
    """
    k = hs.shape[0]
    if s > hs[0] or (s == hs[0] and j < hi[0]):
        hs[0] = s
        hi[0] = j
        p = 0
        while True:
            left = 2 * p + 1
            right = left + 1
            worst = p
            if left < k and (
                hs[left] < hs[worst]
                or (hs[left] == hs[worst] and hi[left] > hi[worst])
            ):
                worst = left
            if right < k and (
                hs[right] < hs[worst]
                or (hs[right] == hs[worst] and hi[right] > hi[worst])
            ):
                worst = right
            if worst == p:
                break
            hs[p], hs[worst] = hs[worst], hs[p]
            hi[p], hi[worst] = hi[worst], hi[p]
            p = worst


@njit(cache=True)
def build_lut(values, lev_lo, lev_hi, lut):
    """Pre-combine channels [lev_lo, lev_hi) of every group word.

    values: (T, G, |L|, l_max) float64 score-table entries (NaN in the
    poisoned slots; such slots are only reachable from invalid words,
    which callers reject before getting here).
    lut: (G * slots, T) output, slots = 8 ** (lev_hi - lev_lo).
    """
    t_n = values.shape[0]
    g_n = values.shape[1]
    slots = lut.shape[0] // g_n
    for g in range(g_n):
        for w in range(slots):
            row = g * slots + w
            for t in range(t_n):
                s = 0.0
                for i in range(lev_lo, lev_hi):
                    c = (w >> (CODE_BITS * (i - lev_lo))) & 7
                    s += values[t, g, i, c]
                lut[row, t] = s


@njit(cache=True)
def topk_single_table(words, lut, heap_s, heap_i):
    """Stream all phrases through one sub-table per group (|L| <= 4)."""
    b_n, g_n = words.shape
    t_n = lut.shape[1]
    slots = lut.shape[0] // g_n
    acc = np.zeros(t_n)
    thr = np.empty(t_n)
    for t in range(t_n):
        thr[t] = heap_s[t, 0]
    for j in range(b_n):
        w0 = np.int64(words[j, 0])
        for t in range(t_n):
            acc[t] = lut[w0, t]
        for g in range(1, g_n):
            idx = g * slots + np.int64(words[j, g])
            for t in range(t_n):
                acc[t] += lut[idx, t]
        for t in range(t_n):
            if acc[t] >= thr[t]:
                _heap_push(heap_s[t], heap_i[t], acc[t], j)
                thr[t] = heap_s[t, 0]


@njit(cache=True)
def topk_two_tables(words, lut_a, lut_b, shift_b, heap_s, heap_i):
    """Stream with a split word: low channels in lut_a, high in lut_b."""
    b_n, g_n = words.shape
    t_n = lut_a.shape[1]
    slots_a = lut_a.shape[0] // g_n
    slots_b = lut_b.shape[0] // g_n
    mask_a = slots_a - 1
    acc = np.zeros(t_n)
    thr = np.empty(t_n)
    for t in range(t_n):
        thr[t] = heap_s[t, 0]
    for j in range(b_n):
        for t in range(t_n):
            acc[t] = 0.0
        for g in range(g_n):
            w = np.int64(words[j, g])
            ia = g * slots_a + (w & mask_a)
            ib = g * slots_b + (w >> shift_b)
            for t in range(t_n):
                acc[t] += lut_a[ia, t] + lut_b[ib, t]
        for t in range(t_n):
            if acc[t] >= thr[t]:
                _heap_push(heap_s[t], heap_i[t], acc[t], j)
                thr[t] = heap_s[t, 0]
