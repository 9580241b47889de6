"""
Embedding containers, projection heads and the deterministic toy encoder.

All arrays are float64 and read-only once wrapped; every operation returns a
new object.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from errors import DimMismatchError, NotNormalizedError, ZeroRowError

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-6
ZERO_NORM = 1e-12


def _frozen(array) -> np.ndarray:
    data = np.array(array, dtype=np.float64, copy=True)
    data.setflags(write=False)
    return data


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """
    A sequence of fixed-dimension vectors (tokens, patches or bags).

    ``normalized`` promises that every row has unit L2 norm.
    """
    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        data = _frozen(self.data)
        if data.ndim != 2:
            raise DimMismatchError(f"expected a 2-D matrix, got shape {data.shape}")
        if data.shape[1] < 1:
            raise DimMismatchError("embedding dimension must be > 0")
        if self.normalized and data.shape[0]:
            norms = np.linalg.norm(data, axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOLERANCE)
            if bad.size:
                raise NotNormalizedError(f"row {int(bad[0])} is not unit norm ({norms[bad[0]]:.3g})")
        object.__setattr__(self, "data", data)

    @classmethod
    def empty(cls, dim: int) -> "EmbeddingMatrix":
        return cls(np.zeros((0, dim)))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def row(self, index: int) -> np.ndarray:
        return self.data[index]

    def take(self, start: int, stop: Optional[int] = None) -> "EmbeddingMatrix":
        """Slice of rows; keeps the normalized flag."""
        return EmbeddingMatrix(self.data[start:stop], normalized=self.normalized)

    def scaled(self, alpha: float) -> "EmbeddingMatrix":
        return EmbeddingMatrix(self.data * alpha)

    def __len__(self) -> int:
        return self.rows


def l2_normalize_rows(m: EmbeddingMatrix) -> EmbeddingMatrix:
    """Scale each row to unit norm."""
    if m.rows == 0:
        return EmbeddingMatrix(m.data, normalized=True)
    norms = np.linalg.norm(m.data, axis=1)
    zero = np.flatnonzero(norms < ZERO_NORM)
    if zero.size:
        raise ZeroRowError(int(zero[0]))
    return EmbeddingMatrix(m.data / norms[:, None], normalized=True)


def l2_normalize(vector: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vector))
    if norm < ZERO_NORM:
        raise ZeroRowError(0, "vector has (near) zero norm")
    return np.asarray(vector, dtype=np.float64) / norm


@dataclass(frozen=True, eq=False)
class ProjectionHead:
    """Bias-free linear map into the joint multimodal space."""
    weight: np.ndarray

    def __post_init__(self):
        weight = _frozen(self.weight)
        if weight.ndim != 2 or min(weight.shape) < 1:
            raise DimMismatchError(f"projection weight must be 2-D and non-empty, got {weight.shape}")
        if not np.all(np.isfinite(weight)):
            raise DimMismatchError("projection weight has non-finite entries")
        object.__setattr__(self, "weight", weight)

    @property
    def dim_in(self) -> int:
        return self.weight.shape[0]

    @property
    def dim_out(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def identity(cls, dim: int) -> "ProjectionHead":
        return cls(np.eye(dim))

    @classmethod
    def random(cls, dim_in: int, dim_out: int, seed: int) -> "ProjectionHead":
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((dim_in, dim_out)) / np.sqrt(dim_in))


def project(m: EmbeddingMatrix, head: ProjectionHead) -> EmbeddingMatrix:
    """Project rows into the joint space; the result is not normalized."""
    if m.dim != head.dim_in:
        raise DimMismatchError(f"matrix dim {m.dim} != head input dim {head.dim_in}")
    return EmbeddingMatrix(m.data @ head.weight)


@dataclass(frozen=True, eq=False)
class ToyMixer:
    """
    Deterministic stand-in for a frozen text encoder.

    Each row is right-multiplied by ``weight``; seeded mixers also add a
    sequence-context term (row mean times ``context``) and squash with tanh,
    so the CLS row sees the whole sequence. The identity mixer is exactly
    the identity map.
    """
    weight: np.ndarray
    seed: Optional[int] = None
    context: Optional[np.ndarray] = field(default=None)
    nonlinear: bool = False

    def __post_init__(self):
        weight = _frozen(self.weight)
        if weight.ndim != 2 or weight.shape[0] != weight.shape[1]:
            raise DimMismatchError(f"mixer weight must be square, got {weight.shape}")
        object.__setattr__(self, "weight", weight)
        if self.context is not None:
            context = _frozen(self.context)
            if context.shape != weight.shape:
                raise DimMismatchError(f"context weight shape {context.shape} != {weight.shape}")
            object.__setattr__(self, "context", context)

    @property
    def dim(self) -> int:
        return self.weight.shape[0]

    @property
    def is_identity(self) -> bool:
        return self.context is None and not self.nonlinear and np.array_equal(self.weight, np.eye(self.dim))

    @classmethod
    def identity(cls, dim: int) -> "ToyMixer":
        return cls(np.eye(dim))

    @classmethod
    def from_seed(cls, dim: int, seed: int, scale: float = 0.5) -> "ToyMixer":
        rng = np.random.default_rng(seed)
        weight = np.eye(dim) + scale * rng.standard_normal((dim, dim)) / np.sqrt(dim)
        context = np.eye(dim) + scale * rng.standard_normal((dim, dim)) / np.sqrt(dim)
        return cls(weight, seed=seed, context=context, nonlinear=True)


def mix(m: EmbeddingMatrix, mixer: ToyMixer) -> EmbeddingMatrix:
    """Run rows through the toy encoder."""
    if m.dim != mixer.dim:
        raise DimMismatchError(f"matrix dim {m.dim} != mixer dim {mixer.dim}")
    if mixer.is_identity or m.rows == 0:
        return EmbeddingMatrix(m.data)
    out = m.data @ mixer.weight
    if mixer.context is not None:
        out = out + m.data.mean(axis=0) @ mixer.context
    if mixer.nonlinear:
        out = np.tanh(out)
    return EmbeddingMatrix(out)
