from __future__ import annotations

from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from fedsem.schemas.adversary import AttackKind, AttackScenario
from fedsem.schemas.encoding import DEFAULT_PROFILES, EncoderProfile
from fedsem.schemas.federation import FederationConfig
from fedsem.schemas.inference import InferenceConfig

DEFAULT_CONCEPTS = [
    "benign",
    "botnet_c2",
    "brute_force",
    "dns_tunneling",
    "dos_flood",
    "exfiltration",
    "port_scan",
    "ransomware",
    "sql_injection",
    "supply_chain_implant",
]
DEFAULT_NOVEL = ["dns_tunneling", "supply_chain_implant"]

Ablation = Literal["full", "no_trust", "no_disagreement"]


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    d: int = Field(32, ge=1, description="Feature dimension.")
    k: int = Field(64, ge=1, description="Embedding dimension.")
    concepts: List[str] = Field(default_factory=lambda: list(DEFAULT_CONCEPTS))
    novel: List[str] = Field(default_factory=lambda: list(DEFAULT_NOVEL), description="Held-out concepts, test split only.")
    samples_per_concept: int = Field(200, ge=1)
    noise_std: float = Field(0.1, ge=0.0)
    noise_heterogeneity: float = Field(
        3.0, ge=0.0, description="Exponent tying a concept's sample noise to its prototype disagreement."
    )
    beta: float = Field(0.5, gt=0.0, description="Dirichlet concentration of the label skew.")
    test_fraction: float = Field(0.2, ge=0.0, lt=1.0, description="Share of each seen concept kept for testing.")
    center: bool = Field(False, description="Subtract the training mean before scaling.")
    descriptions_dir: Optional[str] = Field(None, description="Directory of <concept>.<perspective>.txt files; synthetic when unset.")

    @field_validator("concepts")
    @classmethod
    def _unique(cls, v: List[str]) -> List[str]:
        if len(v) != len(set(v)):
            raise ValueError("concept ids must be unique")
        if not v:
            raise ValueError("at least one concept is required")
        return v

    @model_validator(mode="after")
    def _novel_subset(self) -> "DataConfig":
        unknown = sorted(set(self.novel) - set(self.concepts))
        if unknown:
            raise ValueError(f"novel concepts not in concept list: {unknown}")
        if len(set(self.novel)) == len(self.concepts):
            raise ValueError("at least one concept must be seen in training")
        return self

    @property
    def seen(self) -> List[str]:
        return [c for c in self.concepts if c not in set(self.novel)]


class EncoderSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    profiles: List[EncoderProfile] = Field(default_factory=lambda: list(DEFAULT_PROFILES))
    corpus_size: int = Field(1000, ge=2, description="Texts per encoder for latency and norm statistics.")

    @field_validator("profiles")
    @classmethod
    def _three_distinct(cls, v: List[EncoderProfile]) -> List[EncoderProfile]:
        if len(v) != 3:
            raise ValueError("exactly three encoder profiles are required (one per perspective)")
        if len({p.encoder_id for p in v}) != 3:
            raise ValueError("encoder ids must be pairwise distinct")
        return v


class ReportConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    diversity_betas: List[float] = Field(default_factory=list, description="Dirichlet betas of the diversity sweep; empty skips it.")

    @field_validator("diversity_betas")
    @classmethod
    def _positive(cls, v: List[float]) -> List[float]:
        if any(b <= 0 for b in v):
            raise ValueError("diversity betas must be positive")
        return v


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data: DataConfig = Field(default_factory=DataConfig)
    encoders: EncoderSection = Field(default_factory=EncoderSection)
    federation: FederationConfig = Field(default_factory=FederationConfig)
    inference: InferenceConfig = Field(default_factory=InferenceConfig)
    attacks: List[AttackScenario] = Field(default_factory=list)
    report: ReportConfig = Field(default_factory=ReportConfig)
    ablation: Ablation = "full"
    output_dir: str = "runs/default"
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _consistent(self) -> "ExperimentConfig":
        seen = set(self.data.seen)
        for scenario in self.attacks:
            if scenario.kind == AttackKind.evasion and scenario.target_concept not in seen:
                raise ValueError(f"evasion target '{scenario.target_concept}' is not a seen concept")
        if self.federation.seed != self.seed:
            self.federation = self.federation.model_copy(update={"seed": self.seed})
        return self

    def effective_federation(self) -> FederationConfig:
        if self.ablation == "no_trust":
            return self.federation.model_copy(update={"aggregation": "uniform"})
        return self.federation

    def effective_inference(self) -> InferenceConfig:
        if self.ablation == "no_disagreement":
            return self.inference.model_copy(update={"zds_lambda": 0.0})
        return self.inference
