"""
Re-ranking benchmark: per-query latency and saturated throughput.

Every query is an image with ``n`` patches, rescored against a fixed
candidate list of ``candidates`` texts with ``k`` bags each. Global mode
rescores with CLS dot products, bag-wise mode with MaxSim over the bags.

By default embeddings are precomputed and only scoring is timed. With
``encoder_layers > 0`` each query is first encoded online through a stack of
frozen mixers and the projection head, the dual-encoder serving path; the
report then carries both the end-to-end latency and the scoring share.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from config import BenchConfig
from embedding_core import EmbeddingMatrix, ProjectionHead, ToyMixer, l2_normalize_rows, mix, project
from retrieval import RankedList, RetrievalIndex, build_index, rerank, search
from similarity import Direction, ItemEmbedding, ScoringMode

logger = logging.getLogger(__name__)

QUERY_POOL = 32


@dataclass(frozen=True)
class BenchReport:
    mode: str
    latency_ms_mean: float
    latency_ms_p50: float
    latency_ms_p99: float
    scoring_ms_mean: float
    scoring_ms_p50: float
    throughput_qps: float
    n: int
    k: int
    dim: int
    candidates: int
    queries: int
    warmup: int
    workers: int
    encoder_layers: int
    encoder_dim: int
    timer_resolution_s: float

    def as_dict(self) -> Dict:
        return asdict(self)


def _unit_rows(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    x = rng.standard_normal((rows, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class _Workload:
    """Candidate index, query pool and the per-query encode and score steps."""

    def __init__(self, mode: ScoringMode, config: BenchConfig):
        rng = np.random.default_rng(config.seed)
        self.mode = mode
        texts = []
        for c in range(config.candidates):
            rows = _unit_rows(rng, config.k + 1, config.dim)
            texts.append(ItemEmbedding(f"t{c:05d}", rows[0], EmbeddingMatrix(rows[1:], normalized=True)))
        self.index: RetrievalIndex = build_index(texts)
        self.shortlist = RankedList("", tuple((item_id, 0.0) for item_id in self.index.item_ids))

        self.size = min(QUERY_POOL, config.queries)
        self.raw: List[np.ndarray] = []
        self.ready: List[ItemEmbedding] = []
        self.stack: List[ToyMixer] = []
        self.head: Optional[ProjectionHead] = None
        if config.encoder_layers:
            width = config.encoder_dim
            self.stack = [ToyMixer.from_seed(width, config.seed + 1 + layer, scale=0.1)
                          for layer in range(config.encoder_layers)]
            self.head = ProjectionHead.random(width, config.dim, config.seed)
            self.raw = [rng.standard_normal((config.n + 1, width)) for _ in range(self.size)]
        else:
            self.ready = [self._prepare(EmbeddingMatrix(_unit_rows(rng, config.n + 1, config.dim)), f"q{i}")
                          for i in range(self.size)]

    @staticmethod
    def _prepare(rows: EmbeddingMatrix, query_id: str) -> ItemEmbedding:
        unit = l2_normalize_rows(rows)
        return ItemEmbedding(query_id, unit.data[0], unit.take(1))

    def encode(self, q: int) -> ItemEmbedding:
        slot = q % self.size
        if self.ready:
            return self.ready[slot]
        rows = EmbeddingMatrix(self.raw[slot])
        for mixer in self.stack:
            rows = mix(rows, mixer)
        return self._prepare(project(rows, self.head), f"q{q}")

    def score(self, query: ItemEmbedding) -> RankedList:
        if self.mode is ScoringMode.GLOBAL:
            return search(self.index, query, ScoringMode.GLOBAL, top_k=len(self.index))
        return rerank(self.index, query, self.shortlist, self.mode, Direction.I2T)

    def serve(self, q: int) -> RankedList:
        return self.score(self.encode(q))


def _timed(work: _Workload, q: int) -> Tuple[float, float]:
    start = time.perf_counter()
    query = work.encode(q)
    encoded = time.perf_counter()
    work.score(query)
    done = time.perf_counter()
    return done - start, done - encoded


def bench_run(mode: ScoringMode, config: Optional[BenchConfig] = None) -> BenchReport:
    """
    Measure one scoring mode.

    Latency is timed query by query on one thread after ``warmup`` untimed
    queries; throughput pushes all queries through a ``workers``-wide pool.

    Args:
        mode (ScoringMode): GLOBAL, TOKENWISE or BAGWISE rescoring
        config (BenchConfig): Workload shape; defaults to the 196-patch,
            32-bag, 64-candidate setting

    Returns:
        BenchReport: Latency percentiles, scoring-only timings, throughput
        and the config echo
    """
    config = config or BenchConfig()
    mode = ScoringMode(mode)
    work = _Workload(mode, config)

    for q in range(config.warmup):
        work.serve(q)
    logger.info("bench %s: warmup done (%d queries)", mode.value, config.warmup)

    timings = np.array([_timed(work, q) for q in range(config.queries)]) * 1e3
    latencies, scoring = timings[:, 0], timings[:, 1]

    start = time.perf_counter()
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        list(pool.map(work.serve, range(config.queries)))
    elapsed = max(time.perf_counter() - start, time.get_clock_info("perf_counter").resolution)
    logger.info("bench %s: mean %.3f ms (scoring %.3f ms), %d workers",
                mode.value, latencies.mean(), scoring.mean(), config.workers)

    return BenchReport(
        mode=mode.value,
        latency_ms_mean=float(latencies.mean()),
        latency_ms_p50=float(np.percentile(latencies, 50)),
        latency_ms_p99=float(np.percentile(latencies, 99)),
        scoring_ms_mean=float(scoring.mean()),
        scoring_ms_p50=float(np.percentile(scoring, 50)),
        throughput_qps=config.queries / elapsed,
        n=config.n,
        k=config.k,
        dim=config.dim,
        candidates=config.candidates,
        queries=config.queries,
        warmup=config.warmup,
        workers=config.workers,
        encoder_layers=config.encoder_layers,
        encoder_dim=config.encoder_dim,
        timer_resolution_s=time.get_clock_info("perf_counter").resolution,
    )


def compare_modes(config: Optional[BenchConfig] = None) -> Dict:
    """Global and bag-wise runs under one config, with end-to-end and scoring-only latency ratios."""
    config = config or BenchConfig()
    reports: List[BenchReport] = [bench_run(mode, config) for mode in (ScoringMode.GLOBAL, ScoringMode.BAGWISE)]
    glob, bag = reports
    return {
        "global": glob.as_dict(),
        "bagwise": bag.as_dict(),
        "latency_ratio": bag.latency_ms_mean / glob.latency_ms_mean,
        "scoring_ratio": bag.scoring_ms_mean / glob.scoring_ms_mean,
        "cpu_count": os.cpu_count(),
    }
