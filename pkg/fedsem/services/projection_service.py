"""
services/projection_service.py
------------------------------

Client-side linear semantic projection ``z = W x`` and local training of
``W`` against the fused prototypes of the sample labels.

The local loss is the mean squared L2 residual
``L = (1/|D|) sum ||W x - z_label||^2``.  Two solvers are provided:
full-batch gradient descent and the closed-form ridge solution
``W = Z X^T (X X^T + rho I)^-1``.  Both accept an optional anchor matrix
with a proximal weight ``mu``; the objective then gains
``mu ||W - anchor||_F^2`` (scaled by ``1/|D|`` in the gradient path) and
the closed form becomes ``(Z X^T + mu A)(X X^T + (rho + mu) I)^-1``.
With no anchor both reduce to the plain formulas.  Reported losses are
always the plain alignment loss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from fedsem.core.errors import (
    DivergenceError,
    InvalidInputError,
    NonFiniteError,
    ShapeMismatchError,
    SingularSystemError,
    UnknownLabelError,
)
from fedsem.logging_config import logger
from fedsem.models import (
    AttackPrototype,
    FeatureVector,
    LocalDataset,
    ProjectionMatrix,
    SemanticEmbedding,
    validate_matrix,
)
from fedsem.utils.csv_io import read_csv, write_csv

Prototypes = Union[Mapping[str, AttackPrototype], Sequence[AttackPrototype]]


def prototype_map(prototypes: Prototypes) -> dict:
    if isinstance(prototypes, Mapping):
        return dict(prototypes)
    return {p.concept_id: p for p in prototypes}


def _feature_values(x) -> np.ndarray:
    if isinstance(x, FeatureVector):
        return x.values
    return np.asarray(x, dtype=np.float64)


def project(W: ProjectionMatrix, x) -> SemanticEmbedding:
    """``z_hat = W x``."""
    W = np.asarray(W, dtype=np.float64)
    values = _feature_values(x)
    if W.ndim != 2 or values.ndim != 1 or W.shape[1] != values.shape[0]:
        raise ShapeMismatchError(f"cannot project feature of shape {values.shape} with matrix {W.shape}")
    z = W @ values
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("projection produced non-finite values")
    return SemanticEmbedding(values=z, encoder_id="projection")


def targets(dataset: LocalDataset, prototypes: Prototypes) -> np.ndarray:
    """Fused prototype of every sample's label, one row per sample (n x k)."""
    protos = prototype_map(prototypes)
    if len(dataset) == 0:
        raise InvalidInputError(f"dataset of {dataset.client_id} is empty")
    rows = []
    for label in dataset.labels:
        proto = protos.get(label)
        if proto is None:
            raise UnknownLabelError(f"{dataset.client_id}: label {label!r} has no prototype")
        rows.append(proto.fused.values)
    return np.stack(rows)


def _check_shapes(W: np.ndarray, dataset: LocalDataset, Z: np.ndarray) -> None:
    if W.shape != (Z.shape[1], dataset.dim):
        raise ShapeMismatchError(
            f"matrix {W.shape} does not map features of dim {dataset.dim} to prototypes of dim {Z.shape[1]}"
        )


def _loss(W: np.ndarray, X: np.ndarray, Z: np.ndarray) -> float:
    residual = X @ W.T - Z
    return float(np.einsum("ij,ij->", residual, residual) / X.shape[0])


def local_loss(W: ProjectionMatrix, dataset: LocalDataset, prototypes: Prototypes) -> float:
    """Mean squared residual to the fused prototype of each sample's label."""
    Z = targets(dataset, prototypes)
    W = np.asarray(W, dtype=np.float64)
    _check_shapes(W, dataset, Z)
    return _loss(W, dataset.features, Z)


def local_gradient(W: ProjectionMatrix, dataset: LocalDataset, prototypes: Prototypes) -> np.ndarray:
    """Gradient of :func:`local_loss`: ``(2/|D|) sum (W x - z) x^T``."""
    Z = targets(dataset, prototypes)
    W = np.asarray(W, dtype=np.float64)
    _check_shapes(W, dataset, Z)
    X = dataset.features
    return 2.0 * (X @ W.T - Z).T @ X / X.shape[0]


def train_local_gd(W0: ProjectionMatrix, dataset: LocalDataset, prototypes: Prototypes,
                   learning_rate: float, epochs: int, *,
                   anchor: Optional[np.ndarray] = None, proximal: float = 0.0,
                   loss_history: Optional[list] = None) -> Tuple[np.ndarray, float]:
    """Full-batch gradient descent from ``W0``.

    ``epochs = 0`` returns ``W0`` and its loss.  Raises
    :class:`DivergenceError` naming the epoch at which the loss or the
    matrix stopped being finite.  When ``loss_history`` is a list, the
    loss after every epoch is appended to it.
    """
    if learning_rate <= 0:
        raise InvalidInputError(f"learning rate must be positive, got {learning_rate}")
    if epochs < 0:
        raise InvalidInputError(f"epochs must be >= 0, got {epochs}")
    if proximal < 0:
        raise InvalidInputError("proximal weight must be >= 0")
    Z = targets(dataset, prototypes)
    W = np.array(W0, dtype=np.float64)
    _check_shapes(W, dataset, Z)
    if anchor is not None:
        anchor = validate_matrix(anchor, k=W.shape[0], d=W.shape[1])
    X = dataset.features
    n = X.shape[0]
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, epochs + 1):
            grad = 2.0 * (X @ W.T - Z).T @ X / n
            if anchor is not None and proximal:
                grad += 2.0 * proximal * (W - anchor) / n
            W = W - learning_rate * grad
            loss = _loss(W, X, Z)
            if not np.isfinite(loss) or not np.all(np.isfinite(W)):
                logger.error(json.dumps({
                    "event": "gradient_descent_diverged",
                    "client_id": dataset.client_id,
                    "epoch": epoch,
                    "learning_rate": learning_rate,
                }))
                raise DivergenceError(
                    f"gradient descent diverged at epoch {epoch} (learning rate {learning_rate})", epoch
                )
            if loss_history is not None:
                loss_history.append(loss)
    return W, _loss(W, X, Z)


def train_local_closed_form(dataset: LocalDataset, prototypes: Prototypes, ridge: float, *,
                            anchor: Optional[np.ndarray] = None,
                            proximal: float = 0.0) -> Tuple[np.ndarray, float]:
    """Ridge least-squares solution of the alignment loss."""
    if ridge < 0:
        raise InvalidInputError(f"ridge must be >= 0, got {ridge}")
    if proximal < 0:
        raise InvalidInputError("proximal weight must be >= 0")
    Z = targets(dataset, prototypes)
    X = dataset.features
    d = X.shape[1]
    gram = X.T @ X
    rhs = Z.T @ X
    reg = ridge
    if anchor is not None and proximal:
        anchor = validate_matrix(anchor, k=Z.shape[1], d=d)
        reg += proximal
        rhs = rhs + proximal * anchor
    if reg == 0 and np.linalg.matrix_rank(gram) < d:
        raise SingularSystemError(
            f"{dataset.client_id}: features are rank-deficient "
            f"(rank {np.linalg.matrix_rank(gram)} < {d}); use ridge > 0"
        )
    system = gram + reg * np.eye(d)
    try:
        W = np.linalg.solve(system, rhs.T).T
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"{dataset.client_id}: singular normal equations ({exc}); use ridge > 0") from exc
    if not np.all(np.isfinite(W)):
        raise NonFiniteError(f"{dataset.client_id}: closed-form solution is not finite")
    return W, _loss(W, X, Z)


# -----------------------------------------------------------------------------
# Feature scaling
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureScaler:
    """Per-dimension standardisation fitted on the training split.

    Scale is the population standard deviation; dimensions without
    spread keep scale 1.  The mean is only subtracted when ``center`` is
    set, since the projection has no bias term.
    """

    mean: np.ndarray
    scale: np.ndarray
    center: bool = False

    @classmethod
    def fit(cls, features: np.ndarray, *, center: bool = False) -> "FeatureScaler":
        X = np.asarray(features, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise InvalidInputError("scaler needs a non-empty 2-D feature matrix")
        std = X.std(axis=0)
        scale = np.where(std > 0, std, 1.0)
        mean = X.mean(axis=0) if center else np.zeros(X.shape[1])
        return cls(mean=mean, scale=scale, center=center)

    def transform(self, features: np.ndarray) -> np.ndarray:
        X = np.asarray(features, dtype=np.float64)
        return (X - self.mean) / self.scale

    def transform_dataset(self, dataset: LocalDataset) -> LocalDataset:
        return LocalDataset(
            client_id=dataset.client_id,
            features=self.transform(dataset.features),
            labels=dataset.labels,
            sample_ids=dataset.sample_ids,
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "feature": [f"f{i}" for i in range(len(self.scale))],
            "mean": self.mean,
            "scale": self.scale,
        })

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "FeatureScaler":
        mean = frame["mean"].to_numpy(dtype=np.float64)
        return cls(mean=mean, scale=frame["scale"].to_numpy(dtype=np.float64), center=bool(np.any(mean != 0)))


# -----------------------------------------------------------------------------
# Dataset CSV
# -----------------------------------------------------------------------------

def dataset_frame(dataset: LocalDataset) -> pd.DataFrame:
    frame = pd.DataFrame(dataset.features, columns=[f"f{i}" for i in range(dataset.dim)])
    frame["label"] = ["" if label is None else label for label in dataset.labels]
    return frame


def write_dataset_csv(path: str | Path, dataset: LocalDataset) -> Path:
    """Header ``f0,...,f{d-1},label``; empty label for unlabelled rows."""
    return write_csv(path, dataset_frame(dataset))


def read_dataset_csv(path: str | Path, client_id: Optional[str] = None,
                     sample_ids: Optional[Sequence[int]] = None) -> LocalDataset:
    path = Path(path)
    frame = read_csv(path, dtype={"label": str}, keep_default_na=False)
    if "label" not in frame.columns:
        raise InvalidInputError(f"{path.name}: missing 'label' column")
    feature_cols = [c for c in frame.columns if c != "label"]
    expected = [f"f{i}" for i in range(len(feature_cols))]
    if feature_cols != expected:
        raise InvalidInputError(f"{path.name}: feature columns must be f0..f{len(feature_cols) - 1}")
    labels = tuple(label if label != "" else None for label in frame["label"].tolist())
    return LocalDataset(
        client_id=client_id or path.stem,
        features=np.ascontiguousarray(
            frame[feature_cols].to_numpy(dtype=np.float64).reshape(len(frame), len(feature_cols))
        ),
        labels=labels,
        sample_ids=tuple(sample_ids) if sample_ids is not None else (),
    )
