"""
Immutable retrieval index, two-stage search and Recall@K evaluation.

Stage 1 scans every CLS vector exactly; stage 2 rescores the top candidates
with a MaxSim kernel. Ties are broken by ascending item id everywhere.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from config import RECALL_KS
from embedding_core import NORM_TOLERANCE, EmbeddingMatrix
from errors import (
    DimMismatchError,
    DuplicateIdError,
    EmptyInputError,
    EmptyMaskError,
    FormatError,
    MissingLateMatrixError,
    MissingQrelError,
    NotNormalizedError,
    UnknownItemError,
    UnsupportedModeError,
)
from similarity import Direction, ItemEmbedding, ScoringMode

logger = logging.getLogger(__name__)

LATE_MODES = frozenset({ScoringMode.TOKENWISE, ScoringMode.BAGWISE})
DEFAULT_RERANK_DEPTH = 64


@dataclass(frozen=True)
class RankedList:
    """Items for one query, best first."""
    query_id: str
    entries: Tuple[Tuple[str, float], ...]

    def __post_init__(self):
        entries = tuple((str(item_id), float(score)) for item_id, score in self.entries)
        ids = [item_id for item_id, _ in entries]
        if len(set(ids)) != len(ids):
            raise DuplicateIdError(f"ranking for {self.query_id} repeats an item")
        scores = [score for _, score in entries]
        if any(later > earlier for earlier, later in zip(scores, scores[1:])):
            raise FormatError(f"ranking for {self.query_id} is not sorted by descending score")
        object.__setattr__(self, "entries", entries)

    @property
    def item_ids(self) -> List[str]:
        return [item_id for item_id, _ in self.entries]

    def top(self, k: int) -> "RankedList":
        return RankedList(self.query_id, self.entries[:k])

    def __len__(self) -> int:
        return len(self.entries)


def _ranked(query_id: str, ids: Sequence[str], scores: Sequence[float]) -> RankedList:
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return RankedList(query_id, tuple((ids[i], float(scores[i])) for i in order))


class RetrievalIndex:
    """
    Precomputed candidate items, kept sorted by id.

    The index is read-only after ``build_index``; searches for different
    queries can run concurrently. Late-capable indexes also hold every late
    matrix zero-padded into one (items, rows, dim) tensor with a matching
    validity mask, so a shortlist is rescored in one matrix product.
    """

    def __init__(self, item_ids: Tuple[str, ...], cls_vectors: EmbeddingMatrix,
                 late: Tuple[Optional[ItemEmbedding], ...], capabilities: FrozenSet[ScoringMode],
                 late_rows: Optional[np.ndarray] = None, late_valid: Optional[np.ndarray] = None):
        self.item_ids = item_ids
        self.cls_vectors = cls_vectors
        self._items = late
        self._position: Dict[str, int] = {item_id: i for i, item_id in enumerate(item_ids)}
        self.capabilities = capabilities
        self._late_rows = late_rows
        self._late_valid = late_valid

    def __len__(self) -> int:
        return len(self.item_ids)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._position

    @property
    def dim(self) -> int:
        return self.cls_vectors.dim

    def get(self, item_id: str) -> ItemEmbedding:
        try:
            return self._items[self._position[item_id]]
        except KeyError:
            raise UnknownItemError(f"item {item_id!r} is not in the index")

    def supports(self, mode: ScoringMode) -> bool:
        return ScoringMode(mode) in self.capabilities

    def positions(self, item_ids: Sequence[str]) -> np.ndarray:
        try:
            return np.fromiter((self._position[item_id] for item_id in item_ids),
                               dtype=np.intp, count=len(item_ids))
        except KeyError as e:
            raise UnknownItemError(f"item {e.args[0]!r} is not in the index")

    def maxsim_scores(self, query: EmbeddingMatrix, positions: np.ndarray) -> np.ndarray:
        """
        MaxSim of one query against the indexed items at ``positions``.

        Args:
            query (EmbeddingMatrix): Query-side rows (patches or bags), padding stripped
            positions (np.ndarray): Item positions in index order

        Returns:
            np.ndarray: One score per position, the mean over query rows of the
            best valid candidate row
        """
        if self._late_rows is None:
            raise MissingLateMatrixError("index holds no late-interaction matrices")
        if query.dim != self.dim:
            raise DimMismatchError(f"query dim {query.dim} != index dim {self.dim}")
        if query.rows == 0:
            raise EmptyInputError("query side has no rows")
        if len(positions) == len(self) and np.array_equal(positions, np.arange(len(self))):
            rows, valid = self._late_rows, self._late_valid
        else:
            rows, valid = self._late_rows[positions], self._late_valid[positions]
        count, width, dim = rows.shape
        sims = (query.data @ rows.reshape(count * width, dim).T).reshape(query.rows, count, width)
        if not valid.all():
            sims = np.where(valid[None, :, :], sims, -np.inf)
        return sims.max(axis=2).mean(axis=0)

    def __repr__(self) -> str:
        modes = ",".join(sorted(m.value for m in self.capabilities))
        return f"RetrievalIndex(items={len(self)}, dim={self.dim}, modes={modes})"


def build_index(items: Iterable[ItemEmbedding],
                modes: Optional[Iterable[ScoringMode]] = None) -> RetrievalIndex:
    """
    Build an index over items.

    Without ``modes`` the capabilities are inferred: late-interaction modes are
    declared when every item carries a late matrix.
    """
    ordered = sorted(items, key=lambda item: item.item_id)
    ids = tuple(item.item_id for item in ordered)
    for earlier, later in zip(ids, ids[1:]):
        if earlier == later:
            raise DuplicateIdError(f"duplicate item id {earlier!r}")
    dims = {item.dim for item in ordered}
    if len(dims) > 1:
        raise DimMismatchError(f"items disagree on dimension: {sorted(dims)}")

    has_late = bool(ordered) and all(item.late is not None for item in ordered)
    if modes is None:
        capabilities = frozenset({ScoringMode.GLOBAL} | (LATE_MODES if has_late else set()))
    else:
        capabilities = frozenset(ScoringMode(m) for m in modes) | {ScoringMode.GLOBAL}
        if capabilities & LATE_MODES and ordered and not has_late:
            missing = next(item.item_id for item in ordered if item.late is None)
            raise MissingLateMatrixError(f"late-interaction mode declared but item {missing!r} has no matrix")

    if ordered:
        cls = np.stack([item.cls for item in ordered])
        norms = np.linalg.norm(cls, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOLERANCE)
        if bad.size:
            raise NotNormalizedError(f"cls vector of {ids[bad[0]]!r} is not unit norm")
        cls_vectors = EmbeddingMatrix(cls, normalized=True)
    else:
        cls_vectors = EmbeddingMatrix.empty(1)

    late_rows = late_valid = None
    if capabilities & LATE_MODES and ordered:
        late_rows, late_valid = _pack_late(ordered)
    logger.info("built index: %d items, modes=%s", len(ids), sorted(m.value for m in capabilities))
    return RetrievalIndex(ids, cls_vectors, tuple(ordered), capabilities, late_rows, late_valid)


def _pack_late(items: Sequence[ItemEmbedding]) -> Tuple[np.ndarray, np.ndarray]:
    """Zero-pad every late matrix to the longest one; padding rows are invalid."""
    width = max(item.late.rows for item in items)
    rows = np.zeros((len(items), width, items[0].dim))
    valid = np.zeros((len(items), width), dtype=bool)
    for i, item in enumerate(items):
        if not item.mask.any_valid:
            raise EmptyMaskError(f"item {item.item_id!r} has no valid late-interaction rows")
        rows[i, :item.late.rows] = item.late.data
        valid[i, :item.late.rows] = item.mask.valid
    rows.setflags(write=False)
    valid.setflags(write=False)
    return rows, valid


def _query_vector(query) -> Tuple[str, np.ndarray]:
    if isinstance(query, ItemEmbedding):
        return query.item_id, query.cls
    return "", np.asarray(query, dtype=np.float64).reshape(-1)


def search(index: RetrievalIndex, query, mode: ScoringMode = ScoringMode.GLOBAL,
           top_k: int = 10) -> RankedList:
    """
    Exact CLS scan: top_k items by dot product.

    Args:
        index (RetrievalIndex): Index to scan
        query: An ItemEmbedding or a bare unit CLS vector
        mode (ScoringMode): Must be GLOBAL; late modes go through rerank
        top_k (int): Number of items to return

    Returns:
        RankedList: Best items first, ties by ascending id
    """
    if ScoringMode(mode) is not ScoringMode.GLOBAL:
        raise UnsupportedModeError(f"first-stage search only supports global mode, got {ScoringMode(mode).value}")
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    query_id, vector = _query_vector(query)
    if len(index) == 0:
        return RankedList(query_id, ())
    if vector.shape[0] != index.dim:
        raise DimMismatchError(f"query dim {vector.shape[0]} != index dim {index.dim}")
    if abs(float(np.linalg.norm(vector)) - 1.0) > NORM_TOLERANCE:
        raise NotNormalizedError("query cls vector is not unit norm")
    scores = index.cls_vectors.data @ vector
    # stable sort on position == ascending id among equal scores
    order = np.argsort(-scores, kind="stable")[:top_k]
    return RankedList(query_id, tuple((index.item_ids[i], float(scores[i])) for i in order))


def rerank(index: RetrievalIndex, query: ItemEmbedding, candidates: RankedList,
           mode: ScoringMode = ScoringMode.BAGWISE,
           direction: Direction = Direction.I2T) -> RankedList:
    """
    Rescore a candidate list with a MaxSim kernel; scores are replaced, not fused.

    Both directions mask the candidate side, so one kernel serves i2t and t2i:
    the query's valid rows are scored against every candidate's valid rows.

    Args:
        index (RetrievalIndex): Index holding the candidates' late matrices
        query (ItemEmbedding): Query item with a late-interaction matrix
        candidates (RankedList): Items to rescore, usually a global shortlist
        mode (ScoringMode): TOKENWISE or BAGWISE
        direction (Direction): I2T (image queries) or T2I (text queries)

    Returns:
        RankedList: The same items ordered by MaxSim score, ties by ascending id
    """
    mode = ScoringMode(mode)
    Direction(direction)
    if mode not in LATE_MODES:
        raise UnsupportedModeError(f"rerank needs tokenwise or bagwise mode, got {mode.value}")
    if not index.supports(mode):
        raise UnsupportedModeError(f"index does not support {mode.value} scoring")
    query_id = candidates.query_id or query.item_id
    ids = candidates.item_ids
    if not ids:
        return RankedList(query_id, ())
    scores = index.maxsim_scores(query.valid_late(), index.positions(ids))
    return _ranked(query_id, ids, scores.tolist())


def two_stage_search(index: RetrievalIndex, query: ItemEmbedding,
                     mode: ScoringMode = ScoringMode.BAGWISE,
                     direction: Direction = Direction.I2T,
                     depth: int = DEFAULT_RERANK_DEPTH, top_k: int = 10) -> RankedList:
    """Global scan for ``depth`` candidates, then rerank them (global mode skips stage 2)."""
    first = search(index, query, ScoringMode.GLOBAL, top_k=max(depth, 1))
    if ScoringMode(mode) is ScoringMode.GLOBAL:
        return first.top(top_k)
    return rerank(index, query, first, mode, direction).top(top_k)


# ---------------------------
# Evaluation
# ---------------------------
@dataclass(frozen=True)
class EvalReport:
    """Recall@K per K and their mean (MR)."""
    r_at: Mapping[int, float]
    mr: float
    queries: int = 0

    def as_dict(self) -> Dict[str, float]:
        out = {f"R@{k}": v for k, v in sorted(self.r_at.items())}
        out["MR"] = self.mr
        return out


def evaluate(results: Sequence[RankedList], qrels: Mapping[str, Iterable[str]],
             ks: Sequence[int] = RECALL_KS) -> EvalReport:
    """R@K = fraction of queries with at least one relevant item in the top K."""
    hits = {k: 0 for k in ks}
    for ranking in results:
        if ranking.query_id not in qrels:
            raise MissingQrelError(f"no relevance judgements for query {ranking.query_id!r}")
        relevant = set(qrels[ranking.query_id])
        ids = ranking.item_ids
        for k in ks:
            if relevant.intersection(ids[:k]):
                hits[k] += 1
    total = len(results)
    r_at = {k: (hits[k] / total if total else 0.0) for k in ks}
    mr = float(np.mean(list(r_at.values()))) if r_at else 0.0
    return EvalReport(r_at, mr, total)


def mean_recall(*reports: EvalReport) -> float:
    """MR over every recall of every direction given."""
    values = [v for report in reports for v in report.r_at.values()]
    return float(np.mean(values)) if values else 0.0


def evaluate_directions(i2t: EvalReport, t2i: EvalReport) -> Dict[str, float]:
    out = {f"i2t_{key}": value for key, value in i2t.as_dict().items()}
    out.update({f"t2i_{key}": value for key, value in t2i.as_dict().items()})
    out["MR"] = mean_recall(i2t, t2i)
    return out


def recall_from_scores(scores: np.ndarray, ks: Sequence[int] = RECALL_KS) -> Dict[int, float]:
    """In-batch Recall@K from a square matrix whose diagonal holds the positives (row queries)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise DimMismatchError(f"in-batch recall needs a square matrix, got {scores.shape}")
    positive = np.diagonal(scores)[:, None]
    columns = np.arange(scores.shape[1])
    # ties count against the positive only when they come from a lower index
    ahead = (scores > positive) | ((scores == positive) & (columns[None, :] < columns[:, None]))
    rank = ahead.sum(axis=1)
    return {k: float((rank < k).mean()) for k in ks}


# ---------------------------
# JSON Lines I/O
# ---------------------------
def load_qrels(path: str) -> Dict[str, Set[str]]:
    """
    Read relevance judgments, one JSON object per line.

    Args:
        path (str): JSONL file of {"query": id, "relevant": [ids]} records.

    Returns:
        Dict[str, Set[str]]: Relevant item ids per query id.
    """
    qrels: Dict[str, Set[str]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                qrels[str(record["query"])] = {str(r) for r in record["relevant"]}
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise FormatError(f"{path}:{line_no}: bad qrels record ({e})")
    return qrels


def save_qrels(qrels: Mapping[str, Iterable[str]], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for query_id in sorted(qrels):
            f.write(json.dumps({"query": query_id, "relevant": sorted(qrels[query_id])}) + "\n")


def load_results(path: str) -> List[RankedList]:
    results = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                entries = tuple((str(item), float(score)) for item, score in record["ranking"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise FormatError(f"{path}:{line_no}: bad results record ({e})")
            results.append(RankedList(str(record["query"]), entries))
    return results


def save_results(results: Iterable[RankedList], path: str) -> None:
    """Write one {"query", "ranking"} JSON line per ranked list."""
    with open(path, "w", encoding="utf-8") as f:
        for ranking in results:
            record = {"query": ranking.query_id,
                      "ranking": [[item_id, score] for item_id, score in ranking.entries]}
            f.write(json.dumps(record) + "\n")
