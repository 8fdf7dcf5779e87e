"""
services/inference_service.py
-----------------------------

Zero-shot attribution and zero-day risk scoring.

An observation ``x`` is projected with the global matrix, ``z_hat = W_g x``,
and attributed to the prototype with the highest cosine similarity.  The
winning cosine is the confidence ``c`` and the zero-day score blends the
attributed prototype's disagreement with the lack of confidence:

    ZDS = lambda * D + (1 - lambda) * (1 - c)

A zero projection has no direction; attribution abstains with
:class:`~fedsem.core.errors.AbstentionError` instead of picking a class.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from fedsem.core.errors import AbstentionError, InvalidInputError, ShapeMismatchError
from fedsem.logging_config import log_call, logger
from fedsem.models import AttackPrototype, FeatureVector, LocalDataset, ProjectionMatrix, SemanticEmbedding
from fedsem.schemas.inference import DisagreementMode, InferenceConfig, ZeroDayAssessment
from fedsem.services.projection_service import Prototypes, project, prototype_map
from fedsem.services.semantic_encoding_service import disagreement
from fedsem.utils.csv_io import write_csv

ASSESSMENT_COLUMNS = [
    "sample_id",
    "attributed_concept",
    "confidence",
    "zds",
    "true_label_if_known",
    "is_novel_flag",
    "disagreement_used",
    "observation_disagreement",
]


def _values(v) -> np.ndarray:
    if isinstance(v, (SemanticEmbedding, FeatureVector)):
        return v.values
    return np.asarray(v, dtype=np.float64)


def cosine_similarity(a, b) -> float:
    """``a.b / (|a| |b|)`` clamped to [-1, 1]."""
    a = _values(a)
    b = _values(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"cannot compare vectors of shape {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise AbstentionError("cosine similarity of a zero vector is undefined")
    return min(1.0, max(-1.0, float((a / na) @ (b / nb))))


def attribute(z_hat, prototypes: Prototypes) -> Tuple[str, float]:
    """Concept of highest cosine; ties go to the smallest concept_id."""
    protos = prototype_map(prototypes)
    if not protos:
        raise InvalidInputError("attribution needs at least one prototype")
    z = _values(z_hat)
    if not np.any(z):
        raise AbstentionError("projection is the zero vector; attribution abstains")
    best_id, best_c = None, -math.inf
    for cid in sorted(protos):
        c = cosine_similarity(z, protos[cid].fused)
        if c > best_c:
            best_id, best_c = cid, c
    return best_id, best_c


def zero_day_score(D_attributed: float, confidence: float, lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise InvalidInputError(f"lambda must lie in [0, 1], got {lam}")
    if D_attributed < 0:
        raise InvalidInputError(f"disagreement must be >= 0, got {D_attributed}")
    return lam * D_attributed + (1.0 - lam) * (1.0 - confidence)


def normalize_disagreements(prototypes: Prototypes) -> Dict[str, float]:
    """Min-max scale of ``D_a`` over the prototype set; all-equal maps to 0."""
    protos = prototype_map(prototypes)
    if not protos:
        raise InvalidInputError("no prototypes given")
    values = {cid: p.disagreement for cid, p in protos.items()}
    lo, hi = min(values.values()), max(values.values())
    if hi == lo:
        return {cid: 0.0 for cid in values}
    return {cid: (v - lo) / (hi - lo) for cid, v in values.items()}


def disagreement_table(prototypes: Prototypes, mode: DisagreementMode = "raw") -> Dict[str, float]:
    if mode == "minmax":
        return normalize_disagreements(prototypes)
    if mode != "raw":
        raise InvalidInputError(f"unknown disagreement mode {mode!r}")
    return {cid: p.disagreement for cid, p in prototype_map(prototypes).items()}


def observation_disagreement(z_hat, prototype: AttackPrototype) -> float:
    """Disagreement of the prototype's members joined by the observation.

    ``z_hat`` is rescaled to the fused prototype's norm first, so only its
    direction counts.
    """
    z = _values(z_hat)
    norm = float(np.linalg.norm(z))
    if norm == 0.0:
        raise AbstentionError("projection is the zero vector; attribution abstains")
    if z.shape != prototype.fused.values.shape:
        raise ShapeMismatchError(f"projection {z.shape} vs prototype {prototype.fused.values.shape}")
    scaled = z * (prototype.fused.norm / norm)
    return disagreement([m.values for m in prototype.members] + [scaled])


def assess(x, W_g: ProjectionMatrix, prototypes: Prototypes, lam: float, *,
           mode: DisagreementMode = "raw",
           disagreements: Optional[Dict[str, float]] = None) -> ZeroDayAssessment:
    """Project, attribute and score one observation.

    ``disagreements`` lets batch callers pass a precomputed
    :func:`disagreement_table`.
    """
    protos = prototype_map(prototypes)
    if not protos:
        raise InvalidInputError("assessment needs at least one prototype")
    z_hat = project(W_g, x)
    concept, confidence = attribute(z_hat, protos)
    table = disagreements if disagreements is not None else disagreement_table(protos, mode)
    D = table[concept]
    return ZeroDayAssessment(
        attributed_concept=concept,
        confidence=confidence,
        zds=zero_day_score(D, confidence, lam),
        disagreement_used=D,
        observation_disagreement=observation_disagreement(z_hat, protos[concept]),
    )


# -----------------------------------------------------------------------------
# Batches
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class ScoredSample:
    sample_id: int
    true_label: Optional[str]
    is_novel: bool
    assessment: Optional[ZeroDayAssessment]

    @property
    def abstained(self) -> bool:
        return self.assessment is None

    @property
    def correct(self) -> bool:
        return self.assessment is not None and self.assessment.attributed_concept == self.true_label


@log_call
def assess_batch(dataset: LocalDataset, W_g: ProjectionMatrix, prototypes: Prototypes,
                 config: InferenceConfig, *, novel: Sequence[str] = ()) -> List[ScoredSample]:
    """Assess every row of ``dataset``; abstentions are recorded, not raised."""
    protos = prototype_map(prototypes)
    table = disagreement_table(protos, config.disagreement_mode)
    novel_set = set(novel)
    out: List[ScoredSample] = []
    abstentions = 0
    for sample_id, row, label in zip(dataset.sample_ids, dataset.features, dataset.labels):
        try:
            result = assess(row, W_g, protos, config.zds_lambda, disagreements=table)
        except AbstentionError:
            abstentions += 1
            result = None
        out.append(ScoredSample(sample_id, label, label in novel_set, result))
    logger.info(json.dumps({
        "event": "batch_assessed",
        "samples": len(out),
        "abstentions": abstentions,
        "mode": config.disagreement_mode,
        "lambda": config.zds_lambda,
    }))
    return out


def assessments_frame(samples: Sequence[ScoredSample]) -> pd.DataFrame:
    rows = []
    for s in samples:
        a = s.assessment
        rows.append([
            s.sample_id,
            "" if a is None else a.attributed_concept,
            math.nan if a is None else a.confidence,
            math.nan if a is None else a.zds,
            "" if s.true_label is None else s.true_label,
            int(s.is_novel),
            math.nan if a is None else a.disagreement_used,
            math.nan if a is None else a.observation_disagreement,
        ])
    return pd.DataFrame(rows, columns=ASSESSMENT_COLUMNS)


def write_assessments(path: str | Path, samples: Sequence[ScoredSample]) -> Path:
    return write_csv(path, assessments_frame(samples))


def samples_from_frame(frame: pd.DataFrame) -> List[ScoredSample]:
    """Rebuild scored samples from ``assessments.csv``."""
    out = []
    for row in frame.itertuples(index=False):
        concept = "" if pd.isna(row.attributed_concept) else str(row.attributed_concept)
        label = "" if pd.isna(row.true_label_if_known) else str(row.true_label_if_known)
        assessment = None
        if concept:
            assessment = ZeroDayAssessment(
                attributed_concept=concept,
                confidence=float(row.confidence),
                zds=float(row.zds),
                disagreement_used=float(row.disagreement_used),
                observation_disagreement=float(row.observation_disagreement),
            )
        out.append(ScoredSample(int(row.sample_id), label or None, bool(row.is_novel_flag), assessment))
    return out


@dataclass(frozen=True)
class ThresholdSweep:
    threshold: float
    accuracy: float
    curve: Tuple[Tuple[float, float], ...]


def sweep_threshold(samples: Sequence[ScoredSample]) -> ThresholdSweep:
    """Confidence threshold maximising detection accuracy.

    A seen sample counts as handled when it is correctly attributed with
    ``c >= tau``; a novel sample when ``c < tau``.  Candidates are the
    observed confidences plus one above the largest; ties go to the
    smallest threshold.  Abstentions are skipped.
    """
    scored = [s for s in samples if s.assessment is not None]
    if not scored:
        raise InvalidInputError("threshold sweep needs at least one non-abstained sample")
    conf = np.array([s.assessment.confidence for s in scored])
    novel = np.array([s.is_novel for s in scored])
    correct = np.array([s.correct for s in scored])
    top = float(conf.max())
    candidates = sorted(set(conf.tolist()) | {float(np.nextafter(top, math.inf))})
    curve = []
    for tau in candidates:
        handled = np.where(novel, conf < tau, correct & (conf >= tau))
        curve.append((tau, float(handled.mean())))
    best = max(curve, key=lambda p: (p[1], -p[0]))
    return ThresholdSweep(threshold=best[0], accuracy=best[1], curve=tuple(curve))
