"""
services/federation_service.py
------------------------------

Trust-aware federated rounds.

Each round the server broadcasts the global matrix ``W_g``; every client
trains from it and reports ``(W_i, L_i)``.  The server turns the losses
into trust scores ``tau = 1/(L + eps)``, smooths them
``u = gamma u_prev + (1 - gamma) tau``, normalises ``alpha = u / sum u``
and aggregates ``W_g = sum alpha_i W_i``.  The Shannon entropy of
``alpha`` and its round-to-round change are reported as convergence
diagnostics.

Client training runs in a thread pool.  Results are merged after the
barrier in ascending ``client_id`` order and aggregation uses
compensated summation, so the outcome is independent of scheduling.
Clients that fail or drop out are excluded from the round's
normalisation and keep their previous ``u``.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd

from fedsem.core.config import get_settings
from fedsem.core.errors import (
    ClientFailureError,
    InvalidInputError,
    ShapeMismatchError,
)
from fedsem.logging_config import logger
from fedsem.models import LocalDataset, ProjectionMatrix, validate_matrix
from fedsem.schemas.adversary import AttackEvent
from fedsem.schemas.federation import ClientReport, FederationConfig, RoundReport
from fedsem.services.metrics_service import alignment_score
from fedsem.services.projection_service import (
    Prototypes,
    local_loss,
    train_local_closed_form,
    train_local_gd,
)

SUM_TOLERANCE = 1e-9


# -----------------------------------------------------------------------------
# Trust arithmetic
# -----------------------------------------------------------------------------

def trust_score(loss: float, epsilon: float) -> float:
    """Instantaneous trust ``1 / (loss + epsilon)``."""
    if not math.isfinite(loss) or loss < 0:
        raise InvalidInputError(f"loss must be a finite non-negative number, got {loss}")
    if epsilon <= 0:
        raise InvalidInputError(f"epsilon must be positive, got {epsilon}")
    return 1.0 / (loss + epsilon)


def smooth_trust(u_prev: float, tau: float, gamma: float) -> float:
    """Exponential smoothing ``gamma u_prev + (1 - gamma) tau``."""
    if not 0.0 <= gamma < 1.0:
        raise InvalidInputError(f"gamma must lie in [0, 1), got {gamma}")
    return gamma * u_prev + (1.0 - gamma) * tau


def normalize_weights(u: Sequence[float]) -> List[float]:
    if len(u) == 0:
        raise InvalidInputError("cannot normalise an empty weight list")
    if any(not (x > 0) or not math.isfinite(x) for x in u):
        raise InvalidInputError(f"trust values must be positive and finite, got {list(u)}")
    total = math.fsum(u)
    return [x / total for x in u]


def _check_normalized(alpha: Sequence[float]) -> None:
    total = math.fsum(alpha)
    if abs(total - 1.0) > SUM_TOLERANCE:
        raise InvalidInputError(f"weights must sum to 1 (got {total!r})")


def _weighted_sum(matrices: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Neumaier-compensated ``sum w_i M_i`` in the given order."""
    total = np.zeros_like(matrices[0], dtype=np.float64)
    comp = np.zeros_like(total)
    for w, M in zip(weights, matrices):
        term = w * M
        t = total + term
        comp += np.where(np.abs(total) >= np.abs(term), (total - t) + term, (term - t) + total)
        total = t
    return total + comp


def _check_same_shape(W_list: Sequence[np.ndarray], alpha: Sequence[float]) -> List[np.ndarray]:
    if len(W_list) == 0:
        raise InvalidInputError("no matrices to aggregate")
    if len(W_list) != len(alpha):
        raise ShapeMismatchError(f"{len(W_list)} matrices but {len(alpha)} weights")
    mats = [np.asarray(W, dtype=np.float64) for W in W_list]
    shape = mats[0].shape
    for W in mats[1:]:
        if W.shape != shape:
            raise ShapeMismatchError(f"matrix shapes differ: {shape} vs {W.shape}")
    return mats


def aggregate(W_list: Sequence[ProjectionMatrix], alpha: Sequence[float]) -> np.ndarray:
    """``W_g = sum alpha_i W_i``, accumulated in list order.

    Callers pass the matrices in ascending client_id order.
    """
    mats = _check_same_shape(W_list, alpha)
    _check_normalized(alpha)
    return _weighted_sum(mats, alpha)


def trust_entropy(alpha: Sequence[float]) -> float:
    """Natural-log Shannon entropy of normalised positive weights, in [0, ln N]."""
    if len(alpha) == 0:
        raise InvalidInputError("entropy of an empty distribution")
    if any(not (a > 0) for a in alpha):
        raise InvalidInputError("entropy requires strictly positive weights")
    _check_normalized(alpha)
    h = -math.fsum(a * math.log(a) for a in alpha)
    return min(max(h, 0.0), math.log(len(alpha)))


def aggregation_deviation(W_list: Sequence[ProjectionMatrix], alpha: Sequence[float],
                          W_g_prev: ProjectionMatrix) -> float:
    """Frobenius norm of ``sum alpha_i (W_i - W_g_prev)``."""
    mats = _check_same_shape(W_list, alpha)
    prev = np.asarray(W_g_prev, dtype=np.float64)
    if prev.shape != mats[0].shape:
        raise ShapeMismatchError(f"previous global matrix {prev.shape} vs client matrices {mats[0].shape}")
    return float(np.linalg.norm(_weighted_sum([W - prev for W in mats], alpha)))


def check_convergence(delta_history: Sequence[float], epsilon_H: float, m: int) -> bool:
    """True iff the last ``m`` entropy changes are all within ``epsilon_H``."""
    if m < 1:
        raise InvalidInputError(f"convergence window must be >= 1, got {m}")
    if len(delta_history) < m:
        return False
    return all(abs(d) <= epsilon_H for d in delta_history[-m:])


# -----------------------------------------------------------------------------
# Matrix snapshots
# -----------------------------------------------------------------------------

def matrix_checksum(W: ProjectionMatrix) -> str:
    """SHA-256 of the little-endian float64 row-major bytes."""
    return hashlib.sha256(np.ascontiguousarray(W, dtype="<f8").tobytes()).hexdigest()


def write_matrix_snapshot(path: str | Path, W: ProjectionMatrix) -> Path:
    """Two ``<u8`` dims (k, d) followed by ``<f8`` row-major entries."""
    W = validate_matrix(W)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = np.array(W.shape, dtype="<u8").tobytes()
    path.write_bytes(header + np.ascontiguousarray(W, dtype="<f8").tobytes())
    return path


def read_matrix_snapshot(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise InvalidInputError(f"{path}: truncated matrix header")
    k, d = (int(v) for v in np.frombuffer(raw[:16], dtype="<u8"))
    if len(raw) != 16 + 8 * k * d:
        raise InvalidInputError(f"{path}: expected {k}x{d} float64 payload, got {len(raw) - 16} bytes")
    return np.frombuffer(raw[16:], dtype="<f8").reshape(k, d).astype(np.float64)


# -----------------------------------------------------------------------------
# Clients
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class ClientUpdate:
    client_id: str
    matrix: np.ndarray
    loss: float


class Client(Protocol):
    client_id: str

    def train(self, W_global: np.ndarray, t: int, prototypes: Prototypes) -> ClientUpdate: ...

    def evaluate(self, W: np.ndarray, prototypes: Prototypes) -> float: ...


class FederatedClient:
    """Honest client training on its own :class:`LocalDataset`."""

    def __init__(self, dataset: LocalDataset, config: FederationConfig) -> None:
        if len(dataset) == 0:
            raise InvalidInputError(f"client {dataset.client_id} has no data")
        self.dataset = dataset
        self.client_id = dataset.client_id
        self.config = config

    def train(self, W_global: np.ndarray, t: int, prototypes: Prototypes) -> ClientUpdate:
        cfg = self.config
        if cfg.training_mode == "closed_form":
            W, loss = train_local_closed_form(
                self.dataset, prototypes, cfg.ridge, anchor=W_global, proximal=cfg.proximal,
            )
        else:
            W, loss = train_local_gd(
                W_global, self.dataset, prototypes, cfg.learning_rate, cfg.epochs,
                anchor=W_global, proximal=cfg.proximal,
            )
        return ClientUpdate(self.client_id, W, loss)

    def evaluate(self, W: np.ndarray, prototypes: Prototypes) -> float:
        return local_loss(W, self.dataset, prototypes)


class LossScheduleClient:
    """Scripted client: returns the broadcast matrix and a loss taken from ``schedule(t)``."""

    def __init__(self, client_id: str, schedule: Callable[[int], float]) -> None:
        self.client_id = client_id
        self.schedule = schedule
        self._last_t = 0

    def train(self, W_global: np.ndarray, t: int, prototypes: Prototypes) -> ClientUpdate:
        self._last_t = t
        return ClientUpdate(self.client_id, np.array(W_global, dtype=np.float64), float(self.schedule(t)))

    def evaluate(self, W: np.ndarray, prototypes: Prototypes) -> float:
        return float(self.schedule(self._last_t))


# -----------------------------------------------------------------------------
# Rounds
# -----------------------------------------------------------------------------

@dataclass
class FederationState:
    """Server-owned state; mutated only between round barriers."""

    W_global: np.ndarray
    u: Dict[str, float]
    t: int = 0
    last_entropy: Optional[float] = None
    delta_history: List[float] = field(default_factory=list)

    @classmethod
    def initial(cls, client_ids: Sequence[str], k: int, d: int,
                W0: Optional[np.ndarray] = None) -> "FederationState":
        W = np.zeros((k, d)) if W0 is None else validate_matrix(W0, k=k, d=d).copy()
        return cls(W_global=W, u={cid: 1.0 for cid in sorted(client_ids)})

    def copy(self) -> "FederationState":
        return FederationState(
            W_global=self.W_global.copy(),
            u=dict(self.u),
            t=self.t,
            last_entropy=self.last_entropy,
            delta_history=list(self.delta_history),
        )


def _client_map(clients) -> Dict[str, Client]:
    if isinstance(clients, Mapping):
        return dict(clients)
    return {c.client_id: c for c in clients}


def _train_all(clients: Dict[str, Client], ids: Sequence[str], W_prev: np.ndarray, t: int,
               prototypes: Prototypes, config: FederationConfig,
               max_workers: Optional[int]) -> Dict[str, ClientUpdate]:
    workers = max(1, min(max_workers or get_settings().max_workers, len(ids) or 1))
    updates: Dict[str, ClientUpdate] = {}
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = {cid: executor.submit(clients[cid].train, W_prev, t, prototypes) for cid in ids}
        for cid in ids:
            try:
                update = futures[cid].result()
                _check_update(cid, update, W_prev.shape)
                updates[cid] = update
            except Exception as exc:
                _exclude(cid, t, exc, config, "failure")
    return updates


def _check_update(cid: str, update: ClientUpdate, shape: Tuple[int, int]) -> None:
    if not math.isfinite(update.loss) or update.loss < 0:
        raise ClientFailureError(f"client {cid} reported invalid loss {update.loss}", cid)
    validate_matrix(update.matrix, k=shape[0], d=shape[1])


def _exclude(cid: str, t: int, exc: Exception, config: FederationConfig, reason: str) -> None:
    if not config.tolerate_client_failures:
        raise ClientFailureError(f"client {cid} failed in round {t}: {exc}", cid) from exc
    logger.warning(json.dumps({
        "event": "client_excluded",
        "t": t,
        "client_id": cid,
        "reason": reason,
        "detail": getattr(exc, "detail", str(exc)),
    }))


def _screen_received(updates: Dict[str, ClientUpdate], t: int, shape: Tuple[int, int],
                     config: FederationConfig) -> Dict[str, ClientUpdate]:
    """Drop updates that became unusable at receipt, e.g. a non-finite lied loss."""
    kept: Dict[str, ClientUpdate] = {}
    for cid in sorted(updates):
        try:
            _check_update(cid, updates[cid], shape)
            kept[cid] = updates[cid]
        except Exception as exc:
            _exclude(cid, t, exc, config, "invalid_update")
    return kept


def run_round(state: FederationState, clients, prototypes: Prototypes, config: FederationConfig, *,
              plan=None, reference: Optional[np.ndarray] = None,
              events: Optional[List[AttackEvent]] = None,
              received: Optional[Dict[str, np.ndarray]] = None,
              max_workers: Optional[int] = None) -> RoundReport:
    """Run one federated round and advance ``state``.

    ``plan`` is an adversary :class:`~fedsem.services.adversary_service.ScenarioPlan`
    applied at server receipt; attack events are appended to ``events``.
    ``reference`` is a feature vector used for the semantic alignment score.
    Matrices the server accepted are stored into ``received`` by client id.
    """
    from fedsem.services.adversary_service import RoundContext, apply_scenario

    client_map = _client_map(clients)
    ids = sorted(client_map)
    t = state.t
    W_prev = state.W_global.copy()

    logger.info(json.dumps({"event": "federation_round_start", "t": t, "clients": len(ids)}))

    updates = _train_all(client_map, ids, W_prev, t, prototypes, config, max_workers)

    if plan is not None:
        context = RoundContext(
            t=t,
            updates=updates,
            W_global=W_prev,
            evaluate=lambda cid, W: client_map[cid].evaluate(W, prototypes),
        )
        updates, round_events = apply_scenario(context, plan)
        if events is not None:
            events.extend(round_events)
        updates = _screen_received(updates, t, W_prev.shape, config)

    reporting = [cid for cid in ids if cid in updates]
    if not reporting:
        raise ClientFailureError(f"no client reported in round {t}")

    taus: Dict[str, float] = {}
    for cid in reporting:
        tau = trust_score(updates[cid].loss, config.epsilon)
        taus[cid] = tau
        state.u[cid] = smooth_trust(state.u.get(cid, 1.0), tau, config.gamma)

    if config.aggregation == "trust":
        alpha_list = normalize_weights([state.u[cid] for cid in reporting])
    else:
        alpha_list = normalize_weights([1.0] * len(reporting))
    alpha = dict(zip(reporting, alpha_list))

    W_list = [updates[cid].matrix for cid in reporting]
    if received is not None:
        received.update({cid: updates[cid].matrix for cid in reporting})
    deviation = aggregation_deviation(W_list, alpha_list, W_prev)
    W_new = aggregate(W_list, alpha_list)
    entropy = trust_entropy(alpha_list)
    delta = 0.0 if t == 0 or state.last_entropy is None else entropy - state.last_entropy

    alignment = None
    if reference is not None:
        alignment = alignment_score([W @ reference for W in W_list], W_new @ reference)

    rows = []
    for cid in ids:
        if cid in updates:
            rows.append(ClientReport(
                client_id=cid, reported=True, loss=updates[cid].loss,
                tau=taus[cid], u=state.u[cid], alpha=alpha[cid],
            ))
        else:
            rows.append(ClientReport(client_id=cid, reported=False, u=state.u.get(cid, 1.0), alpha=0.0))

    report = RoundReport(
        t=t,
        clients=rows,
        entropy=entropy,
        delta_entropy=delta,
        deviation_norm=deviation,
        checksum=matrix_checksum(W_new),
        alignment=alignment,
        num_reporting=len(reporting),
    )

    state.W_global = W_new
    state.t = t + 1
    state.last_entropy = entropy
    state.delta_history.append(delta)

    logger.info(json.dumps({
        "event": "federation_round_end",
        "t": t,
        "reporting": len(reporting),
        "H": entropy,
        "dH": delta,
        "dev_norm": deviation,
        "alignment": alignment,
        "checksum": report.checksum[:16],
    }))
    return report


class FederationServer:
    """Runs ``config.rounds`` rounds over a fixed client set."""

    def __init__(self, clients, prototypes: Prototypes, config: FederationConfig, *,
                 k: int, d: int, plan=None, reference: Optional[np.ndarray] = None,
                 W0: Optional[np.ndarray] = None, snapshot_dir: Optional[str | Path] = None,
                 max_workers: Optional[int] = None) -> None:
        self.clients = _client_map(clients)
        self.prototypes = prototypes
        self.config = config
        self.plan = plan
        self.reference = reference
        self.snapshot_dir = Path(snapshot_dir) if snapshot_dir is not None else None
        self.max_workers = max_workers
        self.state = FederationState.initial(list(self.clients), k, d, W0)
        self.reports: List[RoundReport] = []
        self.events: List[AttackEvent] = []
        self.last_updates: Dict[str, np.ndarray] = {}
        self.converged_at: Optional[int] = None

    def run(self) -> List[RoundReport]:
        for _ in range(self.config.rounds):
            report = run_round(
                self.state, self.clients, self.prototypes, self.config,
                plan=self.plan, reference=self.reference, events=self.events,
                received=self.last_updates, max_workers=self.max_workers,
            )
            self.reports.append(report)
            if self.config.snapshots and self.snapshot_dir is not None:
                write_matrix_snapshot(self.snapshot_dir / f"round_{report.t:03d}.bin", self.state.W_global)
            if self.converged_at is None and check_convergence(
                self.state.delta_history, self.config.convergence_tol, self.config.convergence_window
            ):
                self.converged_at = report.t
                logger.info(json.dumps({
                    "event": "entropy_converged",
                    "t": report.t,
                    "H": report.entropy,
                    "window": self.config.convergence_window,
                }))
                if self.config.stop_on_convergence:
                    break
        return self.reports

    @property
    def global_matrix(self) -> np.ndarray:
        return self.state.W_global


# -----------------------------------------------------------------------------
# Report frames
# -----------------------------------------------------------------------------

ROUND_COLUMNS = ["t", "client_id", "loss", "tau", "u", "alpha", "H", "dH", "dev_norm"]
SUMMARY_COLUMNS = ["t", "H", "dH", "dev_norm", "alignment", "num_reporting", "checksum"]


def rounds_frame(reports: Sequence[RoundReport]) -> pd.DataFrame:
    rows = []
    for r in reports:
        for c in r.clients:
            rows.append([r.t, c.client_id, c.loss, c.tau, c.u, c.alpha, r.entropy, r.delta_entropy, r.deviation_norm])
    return pd.DataFrame(rows, columns=ROUND_COLUMNS)


def summary_frame(reports: Sequence[RoundReport]) -> pd.DataFrame:
    return pd.DataFrame(
        [[r.t, r.entropy, r.delta_entropy, r.deviation_norm, r.alignment, r.num_reporting, r.checksum] for r in reports],
        columns=SUMMARY_COLUMNS,
    )


def reports_from_frames(rounds: pd.DataFrame, summary: pd.DataFrame) -> List[RoundReport]:
    """Rebuild round reports from ``rounds.csv`` and ``round_summary.csv``."""
    reports = []
    for _, s in summary.sort_values("t").iterrows():
        t = int(s["t"])
        rows = []
        for _, r in rounds[rounds["t"] == t].sort_values("client_id").iterrows():
            reported = not pd.isna(r["loss"])
            rows.append(ClientReport(
                client_id=str(r["client_id"]),
                reported=reported,
                loss=float(r["loss"]) if reported else None,
                tau=float(r["tau"]) if reported else None,
                u=float(r["u"]),
                alpha=float(r["alpha"]),
            ))
        reports.append(RoundReport(
            t=t,
            clients=rows,
            entropy=float(s["H"]),
            delta_entropy=float(s["dH"]),
            deviation_norm=float(s["dev_norm"]),
            checksum=str(s["checksum"]),
            alignment=None if pd.isna(s["alignment"]) else float(s["alignment"]),
            num_reporting=int(s["num_reporting"]),
        ))
    return reports
