"""
Scoring kernels: global CLS similarity, token-wise and bag-wise MaxSim.

All three late-interaction kernels share one formula: for every row on the
query side take the best dot product over the valid rows on the candidate
side, then average. They differ only in what the rows are.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from embedding_core import NORM_TOLERANCE, EmbeddingMatrix
from errors import (
    DimMismatchError,
    EmptyInputError,
    EmptyMaskError,
    GridMismatchError,
    MissingLateMatrixError,
    NotNormalizedError,
)

logger = logging.getLogger(__name__)


class ScoringMode(str, Enum):
    GLOBAL = "global"
    TOKENWISE = "tokenwise"
    BAGWISE = "bagwise"


class Direction(str, Enum):
    I2T = "i2t"
    T2I = "t2i"


@dataclass(frozen=True, eq=False)
class PaddingMask:
    """Per-row validity flags for one item's late-interaction matrix."""
    valid: np.ndarray

    def __post_init__(self):
        valid = np.array(self.valid, dtype=bool, copy=True).reshape(-1)
        valid.setflags(write=False)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def all_valid(cls, rows: int) -> "PaddingMask":
        return cls(np.ones(rows, dtype=bool))

    @property
    def rows(self) -> int:
        return self.valid.shape[0]

    @property
    def any_valid(self) -> bool:
        return bool(self.valid.any())


@dataclass(frozen=True, eq=False)
class ItemEmbedding:
    """
    Precomputed representation of one image or text.

    ``late`` holds patches (images) or bags/tokens (texts) without the CLS row.
    """
    item_id: str
    cls: np.ndarray
    late: Optional[EmbeddingMatrix] = None
    mask: Optional[PaddingMask] = None

    def __post_init__(self):
        cls = np.array(self.cls, dtype=np.float64, copy=True).reshape(-1)
        cls.setflags(write=False)
        object.__setattr__(self, "cls", cls)
        if self.late is not None:
            if self.late.dim != cls.shape[0]:
                raise DimMismatchError(f"item {self.item_id}: late dim {self.late.dim} != cls dim {cls.shape[0]}")
            if self.mask is None:
                object.__setattr__(self, "mask", PaddingMask.all_valid(self.late.rows))
            elif self.mask.rows != self.late.rows:
                raise DimMismatchError(f"item {self.item_id}: mask has {self.mask.rows} rows, matrix {self.late.rows}")

    @property
    def dim(self) -> int:
        return self.cls.shape[0]

    def valid_late(self) -> EmbeddingMatrix:
        """Late rows with padding stripped, for use on the query side."""
        if self.late is None:
            raise MissingLateMatrixError(f"item {self.item_id} has no late-interaction matrix")
        if self.mask.valid.all():
            return self.late
        return EmbeddingMatrix(self.late.data[self.mask.valid])


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    """Queries x candidates scores, tagged with the kernel that produced them."""
    scores: np.ndarray
    mode: ScoringMode
    query_ids: Optional[Sequence[str]] = None
    candidate_ids: Optional[Sequence[str]] = None

    def __post_init__(self):
        scores = np.array(self.scores, dtype=np.float64, copy=True)
        if scores.ndim != 2:
            raise DimMismatchError(f"similarity matrix must be 2-D, got shape {scores.shape}")
        if not np.all(np.isfinite(scores)):
            raise DimMismatchError("similarity matrix has non-finite scores")
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "mode", ScoringMode(self.mode))

    @property
    def queries(self) -> int:
        return self.scores.shape[0]

    @property
    def candidates(self) -> int:
        return self.scores.shape[1]

    @property
    def is_square(self) -> bool:
        return self.queries == self.candidates


def _is_unit(vector: np.ndarray) -> bool:
    return abs(float(np.linalg.norm(vector)) - 1.0) <= NORM_TOLERANCE


def global_similarity(img_cls: np.ndarray, txt_cls: np.ndarray) -> float:
    """Dot product of two L2-normalized CLS vectors."""
    a = np.asarray(img_cls, dtype=np.float64).reshape(-1)
    b = np.asarray(txt_cls, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DimMismatchError(f"cls dims differ: {a.shape[0]} vs {b.shape[0]}")
    if not (_is_unit(a) and _is_unit(b)):
        raise NotNormalizedError("global similarity needs L2-normalized CLS vectors")
    return float(np.dot(a, b))


def _maxsim(query: EmbeddingMatrix, cand: EmbeddingMatrix, mask: PaddingMask) -> float:
    if query.dim != cand.dim:
        raise DimMismatchError(f"dims differ: {query.dim} vs {cand.dim}")
    if mask.rows != cand.rows:
        raise DimMismatchError(f"mask has {mask.rows} rows, matrix has {cand.rows}")
    if query.rows == 0:
        raise EmptyInputError("query side has no rows")
    if not mask.any_valid:
        raise EmptyMaskError("no valid rows on the candidate side")
    rows = cand.data if mask.valid.all() else cand.data[mask.valid]
    sims = query.data @ rows.T
    return float(sims.max(axis=1).mean())


def maxsim_i2t(visual: EmbeddingMatrix, bags: EmbeddingMatrix, mask: PaddingMask) -> float:
    """Bag-wise image-to-text score: mean over patches of the best valid bag."""
    return _maxsim(visual, bags, mask)


def maxsim_t2i(bags: EmbeddingMatrix, visual: EmbeddingMatrix, mask: PaddingMask) -> float:
    """Bag-wise text-to-image score: mean over bags of the best valid patch."""
    return _maxsim(bags, visual, mask)


def tokenwise_maxsim(a: EmbeddingMatrix, b: EmbeddingMatrix, mask: PaddingMask) -> float:
    """MaxSim against raw token rows (bag-wise with every bag a single token)."""
    return _maxsim(a, b, mask)


def pair_score(query: ItemEmbedding, cand: ItemEmbedding, mode: ScoringMode,
               direction: Direction = Direction.I2T) -> float:
    """Score one (query, candidate) cell with the mode's kernel."""
    mode = ScoringMode(mode)
    if mode is ScoringMode.GLOBAL:
        return global_similarity(query.cls, cand.cls)
    if cand.late is None:
        raise MissingLateMatrixError(f"candidate {cand.item_id} has no late-interaction matrix")
    q_late = query.valid_late()
    if mode is ScoringMode.TOKENWISE:
        return tokenwise_maxsim(q_late, cand.late, cand.mask)
    if Direction(direction) is Direction.I2T:
        return maxsim_i2t(q_late, cand.late, cand.mask)
    return maxsim_t2i(q_late, cand.late, cand.mask)


def score_batch(queries: Sequence[ItemEmbedding], cands: Sequence[ItemEmbedding],
                mode: ScoringMode, direction: Direction = Direction.I2T,
                workers: int = 1) -> SimilarityMatrix:
    """
    Dense queries x candidates matrix.

    Rows may be filled by a thread pool; every cell is computed on its own,
    so the result does not depend on ``workers``.
    """
    scores = np.zeros((len(queries), len(cands)))

    def fill_row(q: int) -> None:
        for c, cand in enumerate(cands):
            scores[q, c] = pair_score(queries[q], cand, mode, direction)

    if workers > 1 and len(queries) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill_row, range(len(queries))))
    else:
        for q in range(len(queries)):
            fill_row(q)
    return SimilarityMatrix(scores, ScoringMode(mode),
                            query_ids=[item.item_id for item in queries],
                            candidate_ids=[item.item_id for item in cands])


def heatmap(visual: EmbeddingMatrix, bag: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """Per-patch activation of one bag, laid out row-major on the patch grid."""
    if grid_h < 1 or grid_w < 1 or visual.rows != grid_h * grid_w:
        raise GridMismatchError(f"{visual.rows} patches do not fill a {grid_h}x{grid_w} grid")
    bag = np.asarray(bag, dtype=np.float64).reshape(-1)
    if bag.shape[0] != visual.dim:
        raise DimMismatchError(f"bag dim {bag.shape[0]} != patch dim {visual.dim}")
    return (visual.data @ bag).reshape(grid_h, grid_w)
