"""Retrieval-quality evaluation on a synthetic utterance benchmark.

Real utterances come from an acoustic encoder this package does not
have, so the benchmark manufactures frames with a known ground truth:
each frame is built so that its projected query aligns with the target
phrase's key vector, plus a distractor phrase's and white noise at
configurable gains.  All quality numbers are therefore relative
(quantized vs dense under identical frames), never absolute.

Success follows the union rule: an utterance counts as a hit when the
target id appears in the union of per-frame top-K sets, back-off
excluded.  Because result rows are score-sorted, the union at a smaller
K is a prefix of the union at a larger K, which makes success
monotonically non-decreasing in K by construction.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .attention import ProjectionSet
from .catalogue import (
    BiasingCatalogue,
    PackedIndex,
    TrigramEmbedder,
    build_catalogue,
    build_index,
    collision_rate,
)
from .errors import ConfigurationError, InputError
from .fsq import FsqConfig
from .retrieval import topk_retrieve
from .ste import TrainConfig, init_params, train

__all__ = [
    "UtteranceCase",
    "SyntheticBenchmark",
    "synthetic_phrases",
    "RetrievedStats",
    "SweepRow",
    "generate_cases",
    "make_benchmark",
    "success_rate",
    "success_profile",
    "dense_success_profile",
    "retrieved_stats",
    "sweep",
    "sweep_rows_csv",
]


@dataclass
class UtteranceCase:
    """T frames known to contain exactly one target phrase."""

    frames: NDArray[np.float32]  # (T, D)
    target_id: int

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise InputError("an utterance needs at least one frame")
        if self.target_id < 1:
            raise InputError("target id must name a non-back-off phrase")


class RetrievedStats(NamedTuple):
    mean: float
    maximum: int
    std: float


def _query_sources(embeddings: np.ndarray, proj: ProjectionSet) -> NDArray[np.float64]:
    """Frame-space vectors whose projected queries equal each phrase key.

    Solving u W_q = key(c) per phrase makes ground truth exact for the
    dense scorer: frame u_p scores phrase p highest up to key geometry.
    """
    keys = embeddings.astype(np.float64) @ proj.w_k.astype(np.float64)
    return np.linalg.solve(proj.w_q.astype(np.float64).T, keys.T).T


def generate_cases(
    embeddings: np.ndarray,
    proj: ProjectionSet,
    n_cases: int,
    n_frames: int = 10,
    seed: int = 0,
    distractor_gain: float = 0.5,
    noise_gain: float = 0.25,
) -> list[UtteranceCase]:
    """Seeded utterances over a catalogue's embedding rows.

    Every frame mixes the target's source vector with one random
    distractor phrase's and isotropic noise; raising either gain lowers
    the effective SNR.
    """
    emb = np.asarray(embeddings)
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise InputError("need a (B, D) embedding matrix with B >= 2")
    if n_cases < 1 or n_frames < 1:
        raise InputError("n_cases and n_frames must be positive")
    b_n, dim = emb.shape
    sources = _query_sources(emb, proj)
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(n_cases):
        target = int(rng.integers(1, b_n))
        distractors = rng.integers(1, b_n, size=n_frames)
        noise = rng.standard_normal((n_frames, dim)) / np.sqrt(dim)
        frames = (
            sources[target]
            + distractor_gain * sources[distractors]
            + noise_gain * noise
        )
        cases.append(UtteranceCase(frames.astype(np.float32), target))
    return cases


def _check_cases(cases, n_phrases: int):
    if not cases:
        raise InputError("no cases to evaluate")
    for case in cases:
        if not (1 <= case.target_id < n_phrases):
            raise InputError(
                f"target id {case.target_id} outside catalogue of {n_phrases}"
            )


def _union_prefix(ids: np.ndarray, k: int) -> set[int]:
    found = set(int(i) for i in ids[:, :k].ravel())
    found.discard(0)
    return found


def success_profile(
    cases: Sequence[UtteranceCase],
    index: PackedIndex,
    k_list: Sequence[int],
    engine: str = "auto",
) -> dict[int, float]:
    """Success rate at several K from one retrieval pass at max(K).

    Rows are score-sorted, so the top-k' columns of a top-k result are
    exactly the top-k' result; unions at smaller K come for free.
    """
    k_list = sorted(set(int(k) for k in k_list))
    if not k_list or k_list[0] < 1:
        raise InputError("k_list must contain positive integers")
    _check_cases(cases, len(index))
    hits = {k: 0 for k in k_list}
    k_max = k_list[-1]
    for case in cases:
        res = topk_retrieve(case.frames, index, min(k_max, len(index)), engine=engine)
        for k in k_list:
            if case.target_id in _union_prefix(res.ids, k):
                hits[k] += 1
    return {k: hits[k] / len(cases) for k in k_list}


def success_rate(
    cases: Sequence[UtteranceCase],
    index: PackedIndex,
    k: int,
    engine: str = "auto",
) -> float:
    return success_profile(cases, index, [k], engine)[k]


def _dense_ids(frames: np.ndarray, embeddings: np.ndarray, proj: ProjectionSet, k: int):
    q = (np.asarray(frames, dtype=np.float32) @ proj.w_q).astype(np.float64)
    keys = embeddings.astype(np.float64) @ proj.w_k.astype(np.float64)
    scores = q @ keys.T
    t_n, b_n = scores.shape
    k_eff = min(k, b_n)
    out = np.empty((t_n, k_eff), dtype=np.int64)
    for t in range(t_n):
        out[t] = np.lexsort((np.arange(b_n), -scores[t]))[:k_eff]
    return out


def dense_success_profile(
    cases: Sequence[UtteranceCase],
    embeddings: np.ndarray,
    proj: ProjectionSet,
    k_list: Sequence[int],
) -> dict[int, float]:
    """The no-quantization reference under identical frames and union rule."""
    k_list = sorted(set(int(k) for k in k_list))
    if not k_list or k_list[0] < 1:
        raise InputError("k_list must contain positive integers")
    _check_cases(cases, embeddings.shape[0])
    hits = {k: 0 for k in k_list}
    for case in cases:
        ids = _dense_ids(case.frames, embeddings, proj, k_list[-1])
        for k in k_list:
            if case.target_id in _union_prefix(ids, k):
                hits[k] += 1
    return {k: hits[k] / len(cases) for k in k_list}


def retrieved_stats(
    cases: Sequence[UtteranceCase],
    index: PackedIndex,
    k: int,
    engine: str = "auto",
) -> RetrievedStats:
    """Mean, max, and stddev of |S_K| per utterance, back-off excluded."""
    _check_cases(cases, len(index))
    sizes = np.empty(len(cases), dtype=np.int64)
    for i, case in enumerate(cases):
        res = topk_retrieve(case.frames, index, min(k, len(index)), engine=engine)
        sizes[i] = len(_union_prefix(res.ids, k))
    return RetrievedStats(
        float(sizes.mean()), int(sizes.max()), float(sizes.std())
    )


@dataclass
class SyntheticBenchmark:
    """One fixed task shared by every configuration under comparison.

    The key projection is block-diagonal at the finest group count in
    the sweep; any coarser grouping sees it as block-diagonal too, so a
    single projection set serves every configuration and the dense
    reference alike.
    """

    catalogue: BiasingCatalogue
    embeddings: NDArray[np.float32]
    proj: ProjectionSet
    cases: list[UtteranceCase]
    train_queries: NDArray[np.float64]
    train_targets: NDArray[np.float64]
    embedder: TrigramEmbedder


def synthetic_phrases(n: int, seed: int = 0, words=(1, 3)) -> list[str]:
    """Distinct random-letter phrases with little trigram overlap.

    Shared trigrams pull embeddings together; fabricated names keep the
    catalogue spread out the way unrelated real names are, which is what
    the relative quality comparison assumes.
    """
    if n < 1:
        raise InputError("need at least one phrase")
    rng = np.random.default_rng(seed)
    letters = np.frombuffer(b"abcdefghijklmnopqrstuvwxyz", dtype=np.uint8)
    out: list[str] = []
    seen = set()
    while len(out) < n:
        n_words = int(rng.integers(words[0], words[1] + 1))
        parts = []
        for _ in range(n_words):
            length = int(rng.integers(4, 9))
            parts.append(bytes(rng.choice(letters, size=length)).decode())
        phrase = " ".join(parts)
        if phrase not in seen:
            seen.add(phrase)
            out.append(phrase)
    return out


def make_benchmark(
    n_phrases: int,
    n_cases: int,
    dim: int = 64,
    finest_groups: int = 16,
    n_frames: int = 10,
    seed: int = 0,
    distractor_gain: float = 0.5,
    noise_gain: float = 0.25,
    n_train: int = 4096,
) -> SyntheticBenchmark:
    """Phrases, embeddings, utterances, and training pairs in one bundle."""
    if dim % finest_groups:
        raise ConfigurationError(f"dim {dim} not divisible by {finest_groups} groups")
    catalogue = build_catalogue(synthetic_phrases(n_phrases, seed=seed))
    embedder = TrigramEmbedder(dim, seed=seed)
    embeddings = embedder.embed_all(catalogue.phrases)
    proj = ProjectionSet.random(dim, groups=finest_groups, seed=seed + 1)
    cases = generate_cases(
        embeddings,
        proj,
        n_cases,
        n_frames=n_frames,
        seed=seed + 2,
        distractor_gain=distractor_gain,
        noise_gain=noise_gain,
    )
    # training pairs: queries shaped like case frames (projected), targets
    # drawn from the embedding rows they should reconstruct
    rng = np.random.default_rng(seed + 3)
    sources = _query_sources(embeddings, proj)
    pick = rng.integers(1, embeddings.shape[0], size=n_train)
    noise = rng.standard_normal((n_train, dim)) / np.sqrt(dim)
    q_rows = (sources[pick] + noise_gain * noise) @ proj.w_q.astype(np.float64)
    c_rows = embeddings[pick].astype(np.float64)
    return SyntheticBenchmark(
        catalogue, embeddings, proj, cases, q_rows, c_rows, embedder
    )


@dataclass
class SweepRow:
    groups: int
    levels: tuple[int, ...]
    collision: float
    success: dict[int, float]
    mean_retrieved: float
    max_retrieved: int


def sweep(
    configs: Sequence[tuple[int, tuple[int, ...]]],
    bench: SyntheticBenchmark,
    k_list: Sequence[int],
    train_config: Optional[TrainConfig] = None,
    engine: str = "auto",
) -> list[SweepRow]:
    """Train, index, and evaluate one quantizer per (G, levels) config."""
    if train_config is None:
        train_config = TrainConfig(
            learning_rate=0.05, momentum=0.9, steps=300, batch_size=128, seed=17
        )
    dim = bench.embeddings.shape[1]
    rows = []
    for groups, levels in configs:
        init = init_params(FsqConfig(dim, groups, tuple(levels)), seed=train_config.seed)
        result = train(
            (bench.train_queries, bench.train_targets),
            train_config,
            init,
            bench.proj.w_k,
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)  # capacity overflow
            index = build_index(bench.catalogue, result.params, bench.proj, bench.embedder)
        profile = success_profile(bench.cases, index, k_list, engine=engine)
        stats = retrieved_stats(bench.cases, index, max(k_list), engine=engine)
        rows.append(
            SweepRow(
                groups,
                tuple(levels),
                collision_rate(index),
                profile,
                stats.mean,
                stats.maximum,
            )
        )
    return rows


def sweep_rows_csv(rows: Sequence[SweepRow], k_list: Sequence[int]) -> str:
    k_list = sorted(set(int(k) for k in k_list))
    out = io.StringIO()
    heads = ["groups", "levels", "collision_rate"]
    heads += [f"success@{k}" for k in k_list]
    heads += ["mean_retrieved", "max_retrieved"]
    out.write(",".join(heads) + "\n")
    for row in rows:
        cells = [
            str(row.groups),
            "x".join(str(l) for l in row.levels),
            f"{row.collision:.6f}",
        ]
        cells += [f"{row.success[k]:.6f}" for k in k_list]
        cells += [f"{row.mean_retrieved:.3f}", str(row.max_retrieved)]
        out.write(",".join(cells) + "\n")
    return out.getvalue()
