"""
services/adversary_service.py
-----------------------------

Threat scenarios injected into experiments:

* update poisoning (random noise, sign flip, scaling) applied to the
  matrix a compromised client submits;
* clients that lie about their loss or drop out;
* evasion: observations crafted by projected gradient descent so that
  their projection lands near the benign prototype.

Attacked clients are drawn once per run from a seeded generator.  A
poisoned update goes through the honest loss-reporting path, i.e. the
reported loss is the alignment loss of the matrix actually submitted;
only ``lie_about_loss`` tampers with the report itself.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from fedsem.core.errors import InvalidInputError, NonFiniteError, ShapeMismatchError
from fedsem.logging_config import logger
from fedsem.models import FeatureVector, ProjectionMatrix, SemanticEmbedding
from fedsem.schemas.adversary import POISON_KINDS, AttackEvent, AttackKind, AttackScenario
from fedsem.services.federation_service import ClientUpdate
from fedsem.utils.seeding import derive_seed


def _kind(kind) -> AttackKind:
    try:
        return AttackKind(kind)
    except ValueError as exc:
        raise InvalidInputError(f"unknown attack kind {kind!r}") from exc


def poison_update(W: ProjectionMatrix, kind, magnitude: float, seed: int) -> np.ndarray:
    """Return the manipulated version of an honest update ``W``.

    ``poison_random`` adds Gaussian noise of Frobenius norm ``magnitude``;
    ``poison_signflip`` returns ``-magnitude * W``; ``poison_scale``
    returns ``magnitude * W``.
    """
    kind = _kind(kind)
    if kind not in POISON_KINDS:
        raise InvalidInputError(f"{kind.value} is not an update poisoning attack")
    if magnitude < 0 or not math.isfinite(magnitude):
        raise InvalidInputError(f"magnitude must be finite and >= 0, got {magnitude}")
    W = np.asarray(W, dtype=np.float64)
    if kind == AttackKind.poison_signflip:
        return -magnitude * W
    if kind == AttackKind.poison_scale:
        return magnitude * W
    if magnitude == 0:
        return W.copy()
    noise = np.random.default_rng(seed).standard_normal(W.shape)
    noise *= magnitude / np.linalg.norm(noise)
    return W + noise


def evasion_objective(x, W: ProjectionMatrix, z_benign) -> float:
    """``||W x - z_benign||^2``."""
    values = x.values if isinstance(x, FeatureVector) else np.asarray(x, dtype=np.float64)
    target = z_benign.values if isinstance(z_benign, SemanticEmbedding) else np.asarray(z_benign, dtype=np.float64)
    r = np.asarray(W, dtype=np.float64) @ values - target
    return float(r @ r)


def craft_evasion(x_mal, W: ProjectionMatrix, z_benign, steps: int, step_size: float,
                  budget: float) -> FeatureVector:
    """Projected gradient descent toward the benign prototype.

    Minimises ``||W x' - z_benign||^2`` with gradient
    ``2 W^T (W x' - z_benign)``; after every step the iterate is pulled
    back into the L2 ball of radius ``budget`` around ``x_mal``.
    ``budget`` may be ``inf``.
    """
    if steps < 0:
        raise InvalidInputError(f"steps must be >= 0, got {steps}")
    if budget < 0:
        raise InvalidInputError(f"budget must be >= 0, got {budget}")
    if not math.isfinite(step_size) or step_size <= 0:
        raise InvalidInputError(f"step size must be finite and > 0, got {step_size}")
    label = x_mal.label if isinstance(x_mal, FeatureVector) else None
    x0 = x_mal.values if isinstance(x_mal, FeatureVector) else np.asarray(x_mal, dtype=np.float64)
    target = z_benign.values if isinstance(z_benign, SemanticEmbedding) else np.asarray(z_benign, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if W.shape != (target.shape[0], x0.shape[0]):
        raise ShapeMismatchError(f"matrix {W.shape} incompatible with feature {x0.shape} and target {target.shape}")
    x = x0.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, steps + 1):
            grad = 2.0 * W.T @ (W @ x - target)
            x = x - step_size * grad
            delta = x - x0
            norm = np.linalg.norm(delta)
            if math.isfinite(budget) and norm > budget:
                x = x0 + delta * (budget / norm)
            if not np.all(np.isfinite(x)):
                raise NonFiniteError(f"evasion iterate became non-finite at step {step}")
    return FeatureVector(x, label)


def selection_count(n: int, fraction: float) -> int:
    """``ceil(fraction * n)``, so any positive fraction selects at least one."""
    if not 0.0 <= fraction <= 1.0:
        raise InvalidInputError(f"fraction must lie in [0, 1], got {fraction}")
    if fraction == 0 or n == 0:
        return 0
    return max(1, min(n, math.ceil(fraction * n - 1e-9)))


def select_clients(client_ids: Sequence[str], fraction: float, seed: int) -> Tuple[str, ...]:
    """``ceil(fraction * N)`` clients drawn without replacement, sorted."""
    ids = sorted(client_ids)
    count = selection_count(len(ids), fraction)
    if count == 0:
        return ()
    chosen = np.random.default_rng(seed).choice(len(ids), size=count, replace=False)
    return tuple(sorted(ids[i] for i in chosen))


@dataclass(frozen=True)
class ScenarioPlan:
    """Attack scenarios with their selected clients, fixed for a run."""

    assignments: Tuple[Tuple[AttackScenario, Tuple[str, ...]], ...]

    @classmethod
    def build(cls, scenarios: Sequence[AttackScenario], client_ids: Sequence[str]) -> "ScenarioPlan":
        assignments = []
        for index, scenario in enumerate(scenarios):
            if scenario.kind == AttackKind.evasion:
                continue
            selected = select_clients(
                client_ids, scenario.fraction_of_clients,
                derive_seed("select", scenario.seed, index, scenario.kind.value),
            )
            assignments.append((scenario, selected))
            logger.info(json.dumps({
                "event": "attack_plan",
                "kind": scenario.kind.value,
                "clients": list(selected),
                "magnitude": scenario.magnitude,
            }))
        return cls(tuple(assignments))

    def clients_for(self, kind) -> Tuple[str, ...]:
        kind = _kind(kind)
        out = set()
        for scenario, selected in self.assignments:
            if scenario.kind == kind:
                out.update(selected)
        return tuple(sorted(out))

    @property
    def attacked_clients(self) -> Tuple[str, ...]:
        return tuple(sorted({cid for _, selected in self.assignments for cid in selected}))


@dataclass
class RoundContext:
    t: int
    updates: Dict[str, ClientUpdate]
    W_global: np.ndarray
    evaluate: Callable[[str, np.ndarray], float]


def apply_scenario(context: RoundContext, plan: ScenarioPlan) -> Tuple[Dict[str, ClientUpdate], List[AttackEvent]]:
    """Transform the round's client reports before the server sees them.

    Returns the modified reports and the attack events of the round.
    The input mapping is left untouched.
    """
    updates = dict(context.updates)
    events: List[AttackEvent] = []
    for scenario, selected in plan.assignments:
        if context.t < scenario.start_round:
            continue
        for cid in selected:
            if cid not in updates:
                continue
            update = updates[cid]
            magnitude = scenario.magnitude
            if scenario.kind == AttackKind.dropout:
                del updates[cid]
                logger.info(json.dumps({"event": "client_excluded", "t": context.t, "client_id": cid, "reason": "dropout"}))
            elif scenario.kind == AttackKind.lie_about_loss:
                updates[cid] = replace(update, loss=update.loss * magnitude)
            else:
                if scenario.relative and scenario.kind == AttackKind.poison_random:
                    magnitude = scenario.magnitude * float(np.linalg.norm(update.matrix - context.W_global))
                W_bad = poison_update(
                    update.matrix, scenario.kind, magnitude,
                    derive_seed("poison", scenario.seed, context.t, cid),
                )
                with np.errstate(over="ignore", invalid="ignore"):
                    loss = context.evaluate(cid, W_bad) if np.all(np.isfinite(W_bad)) else math.inf
                updates[cid] = ClientUpdate(cid, W_bad, loss)
            events.append(AttackEvent(t=context.t, client_id=cid, kind=scenario.kind, magnitude=magnitude))
            logger.info(json.dumps({
                "event": "attack_applied",
                "t": context.t,
                "client_id": cid,
                "kind": scenario.kind.value,
                "magnitude": magnitude,
            }))
    return updates, events
