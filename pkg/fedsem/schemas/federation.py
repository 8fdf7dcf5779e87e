from __future__ import annotations

import math
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


TrainingMode = Literal["closed_form", "gradient_descent"]
AggregationMode = Literal["trust", "uniform"]


class FederationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_clients: int = Field(10, ge=1, description="N clients.")
    rounds: int = Field(20, ge=1, description="T federated rounds.")
    gamma: float = Field(0.9, ge=0.0, lt=1.0, description="Trust smoothing factor.")
    epsilon: float = Field(1e-8, gt=0.0, description="Trust score stabiliser.")
    convergence_tol: float = Field(1e-6, gt=0.0, description="Entropy convergence tolerance on |dH|.")
    convergence_window: int = Field(3, ge=1, description="Consecutive rounds below tolerance.")
    training_mode: TrainingMode = "closed_form"
    aggregation: AggregationMode = Field("trust", description="'uniform' forces alpha = 1/N over reporting clients.")
    ridge: float = Field(1e-6, ge=0.0, description="Ridge term of the closed-form solver.")
    proximal: float = Field(10.0, ge=0.0, description="Pull of local solutions toward the broadcast matrix.")
    learning_rate: float = Field(1e-2, gt=0.0)
    epochs: int = Field(200, ge=0)
    stop_on_convergence: bool = False
    tolerate_client_failures: bool = Field(True, description="Exclude failing clients instead of aborting the round.")
    snapshots: bool = Field(False, description="Write the global matrix after every round.")
    seed: int = 0


class TrustState(BaseModel):
    """Per-client trust after a round: instantaneous tau, smoothed u, normalised alpha."""

    client_id: str
    tau: Optional[float] = None
    u: float = Field(..., gt=0.0)
    alpha: float = Field(0.0, ge=0.0, le=1.0)


class ClientReport(TrustState):
    """One client's row of a round.  Excluded clients carry no loss/tau and alpha 0."""

    reported: bool
    loss: Optional[float] = None


class RoundReport(BaseModel):
    t: int = Field(..., ge=0)
    clients: List[ClientReport]
    entropy: float
    delta_entropy: float
    deviation_norm: float
    checksum: str
    alignment: Optional[float] = None
    num_reporting: int

    @model_validator(mode="after")
    def _entropy_in_range(self) -> "RoundReport":
        upper = math.log(max(self.num_reporting, 1))
        if not (0.0 <= self.entropy <= upper + 1e-12):
            raise ValueError(f"entropy {self.entropy} outside [0, ln {self.num_reporting}]")
        if self.t == 0 and self.delta_entropy != 0.0:
            raise ValueError("delta entropy of round 0 must be 0")
        return self

    @property
    def alphas(self) -> dict:
        return {c.client_id: c.alpha for c in self.clients}

    def client(self, client_id: str) -> ClientReport:
        for c in self.clients:
            if c.client_id == client_id:
                return c
        raise KeyError(client_id)
