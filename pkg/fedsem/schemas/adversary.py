from __future__ import annotations

from enum import Enum

from pydantic import BaseModel, ConfigDict, Field


class AttackKind(str, Enum):
    poison_random = "poison_random"
    poison_signflip = "poison_signflip"
    poison_scale = "poison_scale"
    lie_about_loss = "lie_about_loss"
    dropout = "dropout"
    evasion = "evasion"


POISON_KINDS = frozenset({AttackKind.poison_random, AttackKind.poison_signflip, AttackKind.poison_scale})


class AttackScenario(BaseModel):
    """One attack injected into an experiment.

    For ``evasion``, ``fraction_of_clients`` is the share of malicious
    seen-concept test samples that get crafted, ``magnitude`` the L2
    budget, and ``steps``/``step_size`` drive the projected descent.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: AttackKind
    fraction_of_clients: float = Field(0.0, ge=0.0, le=1.0)
    magnitude: float = Field(1.0, ge=0.0, allow_inf_nan=False)
    relative: bool = Field(False, description="poison_random: magnitude is a multiple of the honest update norm.")
    start_round: int = Field(0, ge=0)
    steps: int = Field(50, ge=0)
    step_size: float = Field(0.05, gt=0.0, allow_inf_nan=False)
    target_concept: str = "benign"
    seed: int = 0


class AttackEvent(BaseModel):
    t: int
    client_id: str
    kind: AttackKind
    magnitude: float
