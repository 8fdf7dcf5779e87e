from __future__ import annotations

from enum import Enum
from typing import Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator


class Perspective(str, Enum):
    offensive = "offensive"
    defensive = "defensive"
    adversarial = "adversarial"


# Perspective i is always encoded by encoder i.
PERSPECTIVE_ORDER: Tuple[Perspective, ...] = (
    Perspective.offensive,
    Perspective.defensive,
    Perspective.adversarial,
)


class ConceptDescription(BaseModel):
    model_config = ConfigDict(frozen=True)

    concept_id: str = Field(..., min_length=1)
    perspective: Perspective
    text: str

    @field_validator("text")
    @classmethod
    def _text_not_blank(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("description text must be non-empty")
        return v


class EncoderProfile(BaseModel):
    """Statistical profile of one encoder.

    Norm parameters shape the embedding length, latency parameters the
    synthetic latency model ``T = slope * tokens + intercept + noise``.
    ``idiosyncrasy`` weights the encoder-specific part of each token
    vector in the stub encoder.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    encoder_id: str = Field(..., min_length=1)
    target_norm_mean: float = Field(..., gt=0, description="Mean L2 norm of produced embeddings.")
    target_norm_std: float = Field(0.0, ge=0, description="Std of the L2 norm.")
    latency_slope: float = Field(0.0, ge=0, description="ms per token.")
    latency_intercept: float = Field(0.0, description="ms.")
    latency_noise_std: float = Field(0.0, ge=0, description="ms.")
    idiosyncrasy: float = Field(0.3, ge=0, description="Weight of encoder-specific token directions.")


GPT4O = EncoderProfile(
    encoder_id="gpt-4o",
    target_norm_mean=1.145, target_norm_std=0.011,
    latency_slope=1.0, latency_intercept=30.8, latency_noise_std=11.46,
)
DEEPSEEK_V3 = EncoderProfile(
    encoder_id="deepseek-v3",
    target_norm_mean=1.042, target_norm_std=0.007,
    latency_slope=0.8, latency_intercept=31.4, latency_noise_std=15.76,
)
LLAMA3_8B = EncoderProfile(
    encoder_id="llama-3-8b",
    target_norm_mean=1.221, target_norm_std=0.026,
    latency_slope=1.3, latency_intercept=30.8, latency_noise_std=15.59,
)

# offensive -> GPT-4o, defensive -> DeepSeek-V3, adversarial -> LLaMA-3-8B
DEFAULT_PROFILES: Tuple[EncoderProfile, ...] = (GPT4O, DEEPSEEK_V3, LLAMA3_8B)
