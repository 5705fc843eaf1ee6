"""Biasing catalogue: phrase embedding, enumeration, and index building.

The embedder is a stand-in for a learned context encoder: character
trigrams hashed to seeded gaussian directions, summed with multiplicity
and length-normalized.  It is deterministic across processes, cheap,
and gives edit-close strings nearby embeddings, which is all the
retrieval experiments need.

Phrase id 0 is always the back-off entry (stored as the empty string)
with its own fixed reserved embedding; every metric downstream excludes
it from retrieval sets.
"""

from __future__ import annotations

import hashlib
import itertools
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from .attention import ProjectionSet
from .errors import ConfigurationError, DataError, InputError
from .fsq import FsqParams, capacity, pack_codes, packing_supported, quantize

__all__ = [
    "TrigramEmbedder",
    "BiasingCatalogue",
    "PackedIndex",
    "embed_phrase",
    "enumerate_phrase",
    "build_catalogue",
    "build_index",
    "collision_rate",
]

BACKOFF_ID = 0
_ORIGINAL = -1  # provenance marker for user-supplied phrases

# word-boundary sentinels so one-character phrases still yield a trigram
_PAD_L = "\x02"
_PAD_R = "\x03"


class TrigramEmbedder:
    """Deterministic character-trigram embedding into D dimensions."""

    def __init__(self, dim: int, seed: int = 0):
        if dim < 1:
            raise ConfigurationError("embedder dim must be positive")
        self.dim = int(dim)
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._cache: dict[str, NDArray[np.float64]] = {}

    @property
    def ident(self) -> str:
        return f"trigram:dim={self.dim}:seed={self.seed}"

    def _direction(self, gram: str) -> NDArray[np.float64]:
        vec = self._cache.get(gram)
        if vec is None:
            h = hashlib.blake2b(
                gram.encode("utf-8"),
                digest_size=8,
                key=self.seed.to_bytes(8, "little"),
            ).digest()
            rng = np.random.default_rng(int.from_bytes(h, "little"))
            vec = rng.standard_normal(self.dim)
            self._cache[gram] = vec
        return vec

    def backoff(self) -> NDArray[np.float32]:
        """Reserved embedding for id 0; fixed given the seed."""
        rng = np.random.default_rng(self.seed ^ 0x6261636B6F6666)  # "backoff"
        v = rng.standard_normal(self.dim)
        return (v / np.linalg.norm(v)).astype(np.float32)

    def embed(self, text: str) -> NDArray[np.float32]:
        if not text:
            raise InputError("cannot embed an empty phrase (back-off is id 0)")
        padded = _PAD_L + text + _PAD_R
        grams = Counter(padded[i : i + 3] for i in range(len(padded) - 2))
        v = np.zeros(self.dim, dtype=np.float64)
        for gram, count in grams.items():
            v += count * self._direction(gram)
        norm = np.linalg.norm(v)
        if norm == 0:
            raise DataError(f"degenerate embedding for {text!r}")
        return (v / norm).astype(np.float32)

    def embed_all(self, phrases: list[str]) -> NDArray[np.float32]:
        """Rows for a whole catalogue; empty strings map to back-off."""
        out = np.empty((len(phrases), self.dim), dtype=np.float32)
        for i, text in enumerate(phrases):
            out[i] = self.backoff() if text == "" else self.embed(text)
        return out


def embed_phrase(text: str, embedder: TrigramEmbedder) -> NDArray[np.float32]:
    return embedder.embed(text)


def enumerate_phrase(text: str) -> list[str]:
    """Expansion set of one phrase, original first, deduplicated.

    Up to three words: every single word plus every ordering of the full
    word set.  Longer phrases get single words only; the factorial blowup
    is not worth it past name-shaped entries.
    """
    words = text.split()
    if not words:
        raise InputError("cannot enumerate an empty phrase")
    out = [text]
    seen = {text}
    variants = list(words)
    if len(words) <= 3:
        variants += [" ".join(p) for p in itertools.permutations(words)]
    for v in variants:
        if v not in seen:
            seen.add(v)
            out.append(v)
    return out


@dataclass
class BiasingCatalogue:
    """Dense, stable phrase ids; id 0 is the back-off (empty string).

    provenance[i] is -1 for a user phrase, else the id it was
    enumerated from.
    """

    phrases: list[str]
    provenance: NDArray[np.int64]

    def __post_init__(self):
        if not self.phrases or self.phrases[BACKOFF_ID] != "":
            raise ConfigurationError("catalogue must start with the back-off entry")
        if any(p == "" for p in self.phrases[1:]):
            raise InputError("only the back-off entry may be empty")
        self.provenance = np.asarray(self.provenance, dtype=np.int64)
        if self.provenance.shape != (len(self.phrases),):
            raise ConfigurationError("provenance length mismatch")

    def __len__(self) -> int:
        return len(self.phrases)


def build_catalogue(user_phrases, expand: str = "none") -> BiasingCatalogue:
    """Catalogue from raw phrases, optionally with enumeration.

    expand: "none" keeps entries verbatim; "contacts" enumerates only
    two-to-three-word entries (name-shaped); "all" enumerates every
    entry.  Variants already present anywhere in the catalogue are
    dropped; duplicates the user supplied are kept as distinct ids.
    """
    if expand not in ("none", "contacts", "all"):
        raise InputError(f"unknown expansion mode {expand!r}")
    phrases = [""]
    provenance = [_ORIGINAL]
    for p in user_phrases:
        if not isinstance(p, str) or not p.strip():
            raise InputError("phrases must be non-empty strings")
        phrases.append(p)
        provenance.append(_ORIGINAL)
    if expand != "none":
        present = set(phrases)
        n_user = len(phrases)
        for pid in range(1, n_user):
            n_words = len(phrases[pid].split())
            if expand == "contacts" and not (2 <= n_words <= 3):
                continue
            for variant in enumerate_phrase(phrases[pid])[1:]:
                if variant not in present:
                    present.add(variant)
                    phrases.append(variant)
                    provenance.append(pid)
    return BiasingCatalogue(phrases, np.asarray(provenance, dtype=np.int64))


@dataclass(eq=False)
class PackedIndex:
    """Everything retrieval needs, in one serializable unit.

    code_data is (B, G) uint16 packed words when the level spec fits
    3-bit fields, else (B, G, |L|) uint8 codes.
    """

    phrases: list[str]
    provenance: NDArray[np.int64]
    code_data: np.ndarray
    params: FsqParams
    proj: ProjectionSet
    embedder_seed: int
    embedder_ident: str = ""

    def __post_init__(self):
        if not self.embedder_ident:
            self.embedder_ident = self.embedder().ident

    def __len__(self) -> int:
        return len(self.phrases)

    @property
    def packed(self) -> bool:
        return self.code_data.dtype == np.uint16

    def embedder(self) -> TrigramEmbedder:
        return TrigramEmbedder(self.params.dim, self.embedder_seed)

    def code_bytes(self) -> int:
        return self.code_data.nbytes


def build_index(
    catalogue: BiasingCatalogue,
    params: FsqParams,
    proj: ProjectionSet,
    embedder: Optional[TrigramEmbedder] = None,
) -> PackedIndex:
    """Embed, quantize, and pack every catalogue entry exactly once."""
    if proj.dim != params.dim:
        raise ConfigurationError("projection dim does not match quantizer dim")
    if embedder is None:
        embedder = TrigramEmbedder(params.dim)
    if embedder.dim != params.dim:
        raise ConfigurationError("embedder dim does not match quantizer dim")
    n_unique = len(set(catalogue.phrases)) - 1
    total, _ = capacity(params.config)
    if n_unique > total:
        warnings.warn(
            f"{n_unique} unique phrases exceed the codebook capacity {total}; "
            "collisions are inevitable",
            stacklevel=2,
        )
    emb = embedder.embed_all(catalogue.phrases)
    codes = quantize(emb, params).codes
    data = pack_codes(codes, params.levels) if packing_supported(params.levels) else codes
    return PackedIndex(
        list(catalogue.phrases),
        catalogue.provenance.copy(),
        data,
        params.copy(),
        proj,
        embedder.seed,
        embedder.ident,
    )


def collision_rate(index: PackedIndex) -> float:
    """Fraction of unique phrases sharing a code tuple with another.

    (#unique phrases - #unique code tuples) / #unique phrases, computed
    after deduplicating phrase strings; back-off excluded.
    """
    rows = index.code_data[1:]
    seen: dict[str, int] = {}
    keep = []
    for i, text in enumerate(index.phrases[1:]):
        if text not in seen:
            seen[text] = i
            keep.append(i)
    if not keep:
        raise InputError("collision rate needs at least one unique phrase")
    rows = rows[np.asarray(keep)]
    flat = rows.reshape(rows.shape[0], -1)
    n_tuples = np.unique(flat, axis=0).shape[0]
    return (len(keep) - n_tuples) / len(keep)
