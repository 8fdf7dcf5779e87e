"""
models.py
---------

numpy-backed value objects passed between services: embeddings,
prototypes, feature vectors and client datasets.  They are frozen and
hold read-only arrays so they can be shared freely across the client
training threads.  Configuration and report records are pydantic models
and live in :mod:`fedsem.schemas`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from fedsem.core.errors import InvalidInputError, NonFiniteError, ShapeMismatchError

# k x d real matrix (W_i per client, W_g global)
ProjectionMatrix = np.ndarray


def _frozen_array(values, ndim: int, what: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != ndim:
        raise ShapeMismatchError(f"{what} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains non-finite entries")
    arr.setflags(write=False)
    return arr


def validate_matrix(W, *, k: Optional[int] = None, d: Optional[int] = None) -> np.ndarray:
    """Check a projection matrix: 2-D, finite, optionally of shape (k, d)."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ShapeMismatchError(f"projection matrix must be 2-D, got shape {W.shape}")
    if (k is not None and W.shape[0] != k) or (d is not None and W.shape[1] != d):
        raise ShapeMismatchError(f"projection matrix has shape {W.shape}, expected ({k}, {d})")
    if not np.all(np.isfinite(W)):
        raise NonFiniteError("projection matrix contains non-finite entries")
    return W


@dataclass(frozen=True)
class SemanticEmbedding:
    values: np.ndarray
    encoder_id: str
    latency_ms: Optional[float] = None
    token_count: Optional[int] = None

    def __post_init__(self) -> None:
        arr = _frozen_array(self.values, 1, "embedding")
        if arr.size == 0:
            raise InvalidInputError("embedding must have at least one component")
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


@dataclass(frozen=True)
class AttackPrototype:
    """Fused prototype of one attack concept.

    ``fused`` is the componentwise mean of ``members``; ``disagreement``
    is the mean pairwise L2 distance among the members.
    """

    concept_id: str
    fused: SemanticEmbedding
    members: Tuple[SemanticEmbedding, ...]
    disagreement: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "members", tuple(self.members))
        if len(self.members) < 2:
            raise InvalidInputError(f"prototype '{self.concept_id}' needs at least 2 members")
        if self.disagreement < 0:
            raise InvalidInputError(f"prototype '{self.concept_id}' has negative disagreement")

    @property
    def encoder_ids(self) -> Tuple[str, ...]:
        return tuple(m.encoder_id for m in self.members)


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    label: Optional[str] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _frozen_array(self.values, 1, "feature vector"))

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class LocalDataset:
    """Labelled samples held by one client (or a pooled/test split).

    ``features`` has one row per sample.  ``labels`` may contain ``None``
    for unlabelled rows, which training rejects.
    """

    client_id: str
    features: np.ndarray
    labels: Tuple[Optional[str], ...]
    sample_ids: Tuple[int, ...] = field(default=())

    def __post_init__(self) -> None:
        feats = _frozen_array(self.features, 2, f"features of {self.client_id}")
        labels = tuple(self.labels)
        if len(labels) != feats.shape[0]:
            raise ShapeMismatchError(
                f"{self.client_id}: {feats.shape[0]} feature rows but {len(labels)} labels"
            )
        ids = tuple(int(i) for i in self.sample_ids) if self.sample_ids else tuple(range(len(labels)))
        if len(ids) != len(labels):
            raise ShapeMismatchError(f"{self.client_id}: sample_ids and labels differ in length")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "sample_ids", ids)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices: Sequence[int], client_id: Optional[str] = None) -> "LocalDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LocalDataset(
            client_id=client_id or self.client_id,
            features=self.features[idx] if idx.size else np.zeros((0, self.dim)),
            labels=tuple(self.labels[i] for i in idx),
            sample_ids=tuple(self.sample_ids[i] for i in idx),
        )

    def vectors(self):
        for row, label in zip(self.features, self.labels):
            yield FeatureVector(row, label)
