from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field


DisagreementMode = Literal["raw", "minmax"]


class InferenceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    zds_lambda: float = Field(0.5, ge=0.0, le=1.0, alias="lambda", description="Weight of disagreement in ZDS.")
    disagreement_mode: DisagreementMode = "raw"
    calibration_bins: int = Field(5, ge=2, description="Bins of the confidence-vs-disagreement curve.")


class ZeroDayAssessment(BaseModel):
    model_config = ConfigDict(frozen=True)

    attributed_concept: str
    confidence: float = Field(..., ge=-1.0, le=1.0)
    zds: float
    disagreement_used: float = Field(..., ge=0.0)
    observation_disagreement: Optional[float] = None
