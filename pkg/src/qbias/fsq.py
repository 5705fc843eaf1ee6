"""Grouped finite-scalar quantization of embedding vectors.

An embedding of dimension D is split into G equal sub-vectors.  Each
sub-vector is mapped by a learned affine transform to |L| scalar
channels, each channel is squashed through tanh, scaled so that rounding
can only produce l_i distinct integers, and rounded.  The integer tuple
is the code; a second affine transform maps the normalized codes back to
the sub-vector space.  The implicit codebook of one group is the product
of the per-channel level counts, so nothing is stored per codeword.

Per channel with l levels the bounding works like this:

* odd  l: round(floor(l/2) * tanh(x)), integers in [-(l-1)/2, +(l-1)/2]
* even l: round((l-1)/2 * tanh(x) - 1/2), integers in [-l/2, l/2 - 1]

Both give exactly l attainable integers.  Codes are stored level-local,
i.e. shifted into [0, l-1] by adding l // 2 (which equals the magnitude
of the most negative integer in both parities).  Normalization maps a
level-local code c to 2c/(l-1) - 1, an equally spaced grid on [-1, +1]
whose endpoints are always attainable.  Rounding uses round-half-to-even
(IEEE default, numpy.rint).

The forward path is float32 throughout; reductions elsewhere in the
package accumulate in float64.  `reconstruct(quantize(c).codes)` is
bit-identical to `quantize(c).z` because quantize computes z by calling
reconstruct on the codes it just produced.

Codes pack into one little-endian 16-bit word per group, 3 bits per
channel (channel i occupies bits [3i, 3i+3)), which requires every
l_i <= 8 and |L| <= 5.  Specs outside that envelope raise
ConfigurationError and callers fall back to one byte per code.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigurationError, InputError

CODE_BITS = 3
PACK_MAX_LEVEL = 1 << CODE_BITS  # 8
PACK_MAX_CHANNELS = 5  # 5 * 3 bits = 15 bits, fits a uint16

__all__ = [
    "CODE_BITS",
    "PACK_MAX_LEVEL",
    "PACK_MAX_CHANNELS",
    "FsqConfig",
    "FsqParams",
    "Quantized",
    "ValueSet",
    "bound_round",
    "normalize",
    "quantize",
    "reconstruct",
    "capacity",
    "packing_supported",
    "pack_codes",
    "unpack_codes",
]


def _check_levels(levels) -> tuple[int, ...]:
    levels = tuple(int(l) for l in levels)
    if len(levels) == 0:
        raise ConfigurationError("level spec must name at least one channel")
    for l in levels:
        if l < 2:
            raise ConfigurationError(f"every level count must be >= 2, got {l}")
    return levels


@dataclass(frozen=True)
class FsqConfig:
    """Dimensions of a grouped quantizer: D, G, and the per-channel levels."""

    dim: int
    groups: int
    levels: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", _check_levels(self.levels))
        if self.dim <= 0 or self.groups <= 0:
            raise ConfigurationError("dim and groups must be positive")
        if self.dim % self.groups != 0:
            raise ConfigurationError(
                f"dim {self.dim} is not divisible by groups {self.groups}"
            )
        if self.subdim < len(self.levels):
            warnings.warn(
                f"sub-vector dimension {self.subdim} is smaller than the "
                f"number of channels {len(self.levels)}; the input affine "
                "cannot be injective",
                stacklevel=2,
            )

    @property
    def subdim(self) -> int:
        return self.dim // self.groups


@dataclass
class FsqParams:
    """Learned affine maps of every group, stacked along a leading G axis.

    a_in:  (G, |L|, D/G)   b_in:  (G, |L|)
    a_out: (G, D/G, |L|)   b_out: (G, D/G)

    All float32.  The level spec rides along so a params object is
    self-contained for reconstruction and serialization.
    """

    levels: tuple[int, ...]
    a_in: NDArray[np.float32]
    b_in: NDArray[np.float32]
    a_out: NDArray[np.float32]
    b_out: NDArray[np.float32]

    def __post_init__(self):
        self.levels = _check_levels(self.levels)
        for name in ("a_in", "b_in", "a_out", "b_out"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            setattr(self, name, arr)
        g, nl, s = self.a_in.shape
        if nl != len(self.levels):
            raise ConfigurationError(
                f"a_in has {nl} channels but the level spec has {len(self.levels)}"
            )
        if self.b_in.shape != (g, nl):
            raise ConfigurationError("b_in shape mismatch")
        if self.a_out.shape != (g, s, nl):
            raise ConfigurationError("a_out shape mismatch")
        if self.b_out.shape != (g, s):
            raise ConfigurationError("b_out shape mismatch")
        for name in ("a_in", "b_in", "a_out", "b_out"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InputError(f"{name} contains non-finite values")

    @property
    def groups(self) -> int:
        return self.a_in.shape[0]

    @property
    def subdim(self) -> int:
        return self.a_in.shape[2]

    @property
    def dim(self) -> int:
        return self.groups * self.subdim

    @property
    def config(self) -> FsqConfig:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return FsqConfig(self.dim, self.groups, self.levels)

    def copy(self) -> "FsqParams":
        return FsqParams(
            self.levels,
            self.a_in.copy(),
            self.b_in.copy(),
            self.a_out.copy(),
            self.b_out.copy(),
        )


class Quantized(NamedTuple):
    """Result of quantize: level-local codes and the reconstruction."""

    codes: NDArray[np.uint8]  # (..., G, |L|)
    z: NDArray[np.float32]  # (..., D)


def _level_arrays(levels: tuple[int, ...]):
    lv = np.asarray(levels, dtype=np.int64)
    odd = (lv % 2) == 1
    scale = np.where(odd, lv // 2, (lv - 1) / 2.0)
    offset = np.where(odd, 0.0, -0.5)
    shift = lv // 2  # most negative attainable integer has this magnitude
    return lv, scale.astype(np.float64), offset.astype(np.float64), shift


def bound_round(x: np.ndarray, levels) -> NDArray[np.uint8]:
    """Squash, scale, and round each channel to a level-local code.

    x has shape (..., |L|).  Returns uint8 codes in [0, l_i - 1] per
    channel.  Computation stays in the input's floating dtype (quantize
    feeds float32).
    """
    levels = _check_levels(levels)
    x = np.asarray(x)
    if x.shape[-1] != len(levels):
        raise InputError(
            f"last axis {x.shape[-1]} does not match {len(levels)} channels"
        )
    if not np.all(np.isfinite(x)):
        raise InputError("bound_round requires finite inputs")
    dt = x.dtype if x.dtype in (np.float32, np.float64) else np.float32
    _, scale, offset, shift = _level_arrays(levels)
    sym = np.rint(scale.astype(dt) * np.tanh(x.astype(dt)) + offset.astype(dt))
    return (sym + shift).astype(np.uint8)


def normalize(codes: np.ndarray, levels, dtype=np.float32) -> np.ndarray:
    """Map level-local codes to the grid 2c/(l-1) - 1 on [-1, +1]."""
    levels = _check_levels(levels)
    codes = np.asarray(codes)
    if codes.shape[-1] != len(levels):
        raise InputError(
            f"last axis {codes.shape[-1]} does not match {len(levels)} channels"
        )
    lv = np.asarray(levels, dtype=np.int64)
    if np.any(codes >= lv) or np.any(codes < 0):
        raise InputError("codes out of range for the level spec")
    lv = lv.astype(dtype)
    return (2.0 * codes.astype(dtype) / (lv - 1) - 1.0).astype(dtype)


def _grouped(c: np.ndarray, params: FsqParams) -> np.ndarray:
    c = np.asarray(c, dtype=np.float32)
    if c.shape[-1] != params.dim:
        raise InputError(f"embedding dim {c.shape[-1]} != params dim {params.dim}")
    return c.reshape(c.shape[:-1] + (params.groups, params.subdim))


def quantize(c: np.ndarray, params: FsqParams) -> Quantized:
    """Quantize embeddings (..., D) to codes (..., G, |L|) plus z (..., D).

    z is produced by reconstruct() on the fresh codes, so the two are
    bit-identical by construction.
    """
    cg = _grouped(c, params)
    if not np.all(np.isfinite(cg)):
        raise InputError("quantize requires finite embeddings")
    # (..., G, 1, S) @ (G, S, |L|) -> (..., G, 1, |L|)
    t = np.matmul(cg[..., None, :], params.a_in.transpose(0, 2, 1))[..., 0, :]
    t = t + params.b_in
    codes = bound_round(t, params.levels)
    return Quantized(codes, reconstruct(codes, params))


def reconstruct(codes: np.ndarray, params: FsqParams) -> NDArray[np.float32]:
    """Map codes (..., G, |L|) back to embeddings (..., D), float32."""
    codes = np.asarray(codes)
    if codes.ndim < 2 or codes.shape[-2] != params.groups:
        raise InputError(
            f"codes must have shape (..., {params.groups}, {len(params.levels)})"
        )
    n = normalize(codes, params.levels)  # validates range
    zg = np.matmul(params.a_out, n[..., :, None])[..., 0] + params.b_out
    return zg.reshape(zg.shape[:-2] + (params.dim,)).astype(np.float32, copy=False)


def capacity(config: FsqConfig) -> tuple[int, float]:
    """Implicit codebook size: exact per-group count and total log2.

    per_group is the exact integer product of the level counts; the
    total across groups is returned as log2 because the plain integer
    overflows any fixed-width type long before realistic configs do.
    """
    per_group = 1
    for l in config.levels:
        per_group *= int(l)
    return per_group, config.groups * math.log2(per_group)


@dataclass
class ValueSet:
    """Deduplicated normalized values across channels of one level spec.

    Distinct channels share grid points (all channels share the +-1
    endpoints; equal level counts share everything), so the set is
    computed exactly over rationals 2c/(l-1) - 1 instead of trusting
    float equality.  index[i][c] locates channel i's code c in values.
    """

    levels: tuple[int, ...]
    values: NDArray[np.float64] = field(init=False)
    index: list[NDArray[np.int64]] = field(init=False)

    def __post_init__(self):
        self.levels = _check_levels(self.levels)
        grids = [
            [Fraction(2 * c, l - 1) - 1 for c in range(l)] for l in self.levels
        ]
        uniq = sorted(set().union(*[set(g) for g in grids]))
        pos = {v: k for k, v in enumerate(uniq)}
        self.values = np.array([float(v) for v in uniq], dtype=np.float64)
        self.index = [
            np.array([pos[v] for v in grid], dtype=np.int64) for grid in grids
        ]

    def __len__(self) -> int:
        return len(self.values)


def packing_supported(levels) -> bool:
    levels = _check_levels(levels)
    return len(levels) <= PACK_MAX_CHANNELS and max(levels) <= PACK_MAX_LEVEL


def pack_codes(codes: np.ndarray, levels) -> NDArray[np.uint16]:
    """Pack codes (..., G, |L|) into one uint16 word per group.

    Channel i sits at bits [3i, 3i+3) — little-endian within the word.
    Raises ConfigurationError when the spec does not fit 3-bit fields
    (callers then store one byte per code instead).
    """
    levels = _check_levels(levels)
    if not packing_supported(levels):
        raise ConfigurationError(
            f"levels {levels} exceed the 3-bit packing envelope "
            f"(need every l <= {PACK_MAX_LEVEL} and at most "
            f"{PACK_MAX_CHANNELS} channels); store one byte per code instead"
        )
    codes = np.asarray(codes)
    if codes.shape[-1] != len(levels):
        raise InputError("codes last axis does not match the level spec")
    lv = np.asarray(levels, dtype=np.int64)
    if np.any(codes >= lv) or np.any(codes < 0):
        raise InputError("codes out of range for the level spec")
    words = np.zeros(codes.shape[:-1], dtype=np.uint16)
    for i in range(len(levels)):
        words |= codes[..., i].astype(np.uint16) << (CODE_BITS * i)
    return words


def unpack_codes(words: np.ndarray, levels, validate: bool = True) -> NDArray[np.uint8]:
    """Inverse of pack_codes: words (..., G) -> codes (..., G, |L|)."""
    levels = _check_levels(levels)
    if not packing_supported(levels):
        raise ConfigurationError(f"levels {levels} are not 3-bit packable")
    words = np.asarray(words, dtype=np.uint16)
    mask = PACK_MAX_LEVEL - 1
    codes = np.empty(words.shape + (len(levels),), dtype=np.uint8)
    for i in range(len(levels)):
        codes[..., i] = (words >> (CODE_BITS * i)) & mask
    if validate:
        lv = np.asarray(levels, dtype=np.int64)
        if np.any(codes >= lv):
            raise InputError("word decodes to a code outside the level spec")
        if np.any(words >> (CODE_BITS * len(levels))):
            raise InputError("word has set bits above the packed channels")
    return codes
