from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest

from fedsem.core.errors import ClientFailureError, InvalidInputError, ShapeMismatchError
from fedsem.models import LocalDataset
from fedsem.schemas.adversary import AttackKind, AttackScenario
from fedsem.schemas.federation import FederationConfig, TrustState
from fedsem.services.adversary_service import ScenarioPlan
from fedsem.services.federation_service import (
    ClientUpdate,
    FederatedClient,
    FederationServer,
    FederationState,
    LossScheduleClient,
    aggregate,
    aggregation_deviation,
    check_convergence,
    matrix_checksum,
    normalize_weights,
    read_matrix_snapshot,
    reports_from_frames,
    rounds_frame,
    run_round,
    smooth_trust,
    summary_frame,
    trust_entropy,
    trust_score,
    write_matrix_snapshot,
)
from fedsem.services.harness_service import run_loss_schedule_scenario
from fedsem.services.metrics_service import trust_entropy_series
from tests.conftest import random_dataset, random_prototypes


def test_trust_score_examples() -> None:
    assert trust_score(1.0, 1.0) == 0.5
    assert trust_score(0.0, 1e-8) == pytest.approx(1e8)
    assert trust_score(0.25, 1e-12) == pytest.approx(4.0, abs=1e-8)


@pytest.mark.parametrize("loss, eps", [(-1.0, 1.0), (math.inf, 1.0), (math.nan, 1.0), (1.0, 0.0)])
def test_trust_score_rejects(loss: float, eps: float) -> None:
    with pytest.raises(InvalidInputError):
        trust_score(loss, eps)


def test_smooth_trust_examples() -> None:
    assert smooth_trust(123.0, 7.0, 0.0) == 7.0
    assert smooth_trust(1.0, 2.0, 0.9) == pytest.approx(1.1)
    assert smooth_trust(0.0, 4.0, 0.5) == 2.0
    with pytest.raises(InvalidInputError):
        smooth_trust(1.0, 1.0, 1.0)


def test_normalize_weights_examples() -> None:
    assert normalize_weights([1, 1, 1, 1]) == [0.25] * 4
    assert normalize_weights([1, 3]) == [0.25, 0.75]
    assert normalize_weights([5]) == [1.0]
    with pytest.raises(InvalidInputError):
        normalize_weights([1.0, 0.0])
    with pytest.raises(InvalidInputError):
        normalize_weights([])


def test_aggregate_examples() -> None:
    W1 = np.array([[1.0, 2.0], [3.0, 4.0]])
    W2 = np.array([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(aggregate([W1, W2], [1.0, 0.0]), W1)
    assert np.allclose(aggregate([W1, W2], [0.5, 0.5]), (W1 + W2) / 2)
    assert np.allclose(aggregate([np.zeros((2, 2)), np.eye(2)], [0.25, 0.75]), 0.75 * np.eye(2))


def test_aggregate_errors() -> None:
    with pytest.raises(ShapeMismatchError):
        aggregate([np.eye(2), np.eye(3)], [0.5, 0.5])
    with pytest.raises(ShapeMismatchError):
        aggregate([np.eye(2)], [0.5, 0.5])
    with pytest.raises(InvalidInputError, match="sum to 1"):
        aggregate([np.eye(2), np.eye(2)], [0.5, 0.6])


def test_trust_entropy_examples() -> None:
    assert trust_entropy([0.25] * 4) == pytest.approx(math.log(4), abs=1e-12)
    assert trust_entropy([1.0]) == 0.0
    assert trust_entropy([0.25, 0.75]) == pytest.approx(0.562335, abs=1e-6)


def test_aggregation_deviation_examples() -> None:
    prev = np.array([[1.0, -1.0]])
    assert aggregation_deviation([prev, prev], [0.5, 0.5], prev) == 0.0
    E = np.array([[3.0, 4.0]])
    assert aggregation_deviation([prev + E], [1.0], prev) == pytest.approx(5.0)
    assert aggregation_deviation([prev + E, prev - E], [0.5, 0.5], prev) == pytest.approx(0.0, abs=1e-15)


def test_check_convergence_examples() -> None:
    assert check_convergence([0.0, 0.0, 0.0], 1e-6, 3)
    assert not check_convergence([0.0, 0.0, 1e-3], 1e-6, 3)
    assert check_convergence([-3e-5, -1e-6, -5e-7], 1e-6, 2)
    assert not check_convergence([0.0], 1e-6, 2)


def test_matrix_snapshot_layout(tmp_path: Path) -> None:
    W = np.arange(6, dtype=float).reshape(2, 3) / 7.0
    path = write_matrix_snapshot(tmp_path / "w.bin", W)
    raw = path.read_bytes()
    assert len(raw) == 16 + 8 * 6
    assert raw[:16] == np.array([2, 3], dtype="<u8").tobytes()
    assert np.array_equal(read_matrix_snapshot(path), W)
    assert matrix_checksum(read_matrix_snapshot(path)) == matrix_checksum(W)


def test_truncated_snapshot_is_rejected(tmp_path: Path) -> None:
    path = write_matrix_snapshot(tmp_path / "w.bin", np.eye(2))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(InvalidInputError):
        read_matrix_snapshot(path)


def _clients(n: int, labels, d: int, seed: int, config: FederationConfig, *, same: bool = False):
    out = []
    for i in range(n):
        base = random_dataset(f"client_{i:02d}", labels, d, seed if same else seed + i)
        out.append(FederatedClient(base, config))
    return out


def test_identical_clients_get_uniform_weights() -> None:
    config = FederationConfig(num_clients=4, rounds=5)
    protos = random_prototypes(["a", "b", "c"], 5, seed=0)
    clients = _clients(4, ["a", "b", "c"] * 4, 6, seed=1, config=config, same=True)
    state = FederationState.initial([c.client_id for c in clients], 5, 6)
    for _ in range(config.rounds):
        report = run_round(state, clients, protos, config)
        assert all(a == pytest.approx(0.25, abs=1e-12) for a in report.alphas.values()), report.t
        assert report.entropy == pytest.approx(math.log(4), abs=1e-12)
        assert isinstance(report.client("client_00"), TrustState)
    assert state.t == config.rounds
    assert report.delta_entropy == 0.0
    assert state.t == 1


def test_round_is_deterministic_regardless_of_workers() -> None:
    config = FederationConfig(num_clients=5, rounds=1)
    protos = random_prototypes(["a", "b", "c"], 4, seed=2)
    clients = _clients(5, ["a", "b", "c"] * 3, 5, seed=3, config=config)
    ids = [c.client_id for c in clients]
    first = run_round(FederationState.initial(ids, 4, 5), clients, protos, config, max_workers=1)
    second = run_round(FederationState.initial(ids, 4, 5), clients[::-1], protos, config, max_workers=4)
    assert first.checksum == second.checksum
    assert first.model_dump() == second.model_dump()


def test_high_loss_client_gets_less_weight() -> None:
    config = FederationConfig(num_clients=4, rounds=1)
    clients = [LossScheduleClient(f"client_{i:02d}", lambda t: 0.1) for i in range(3)]
    clients.append(LossScheduleClient("client_03", lambda t: 1.0))
    state = FederationState.initial([c.client_id for c in clients], 2, 2, W0=np.eye(2))
    report = run_round(state, clients, {}, config)
    assert report.alphas["client_03"] < 0.25
    assert report.client("client_03").tau == pytest.approx(1.0, rel=1e-7)
    assert math.fsum(report.alphas.values()) == pytest.approx(1.0, abs=1e-9)


def test_uniform_aggregation_ignores_losses() -> None:
    config = FederationConfig(num_clients=2, rounds=1, aggregation="uniform")
    clients = [LossScheduleClient("a", lambda t: 0.01), LossScheduleClient("b", lambda t: 10.0)]
    report = run_round(FederationState.initial(["a", "b"], 1, 1), clients, {}, config)
    assert report.alphas == {"a": 0.5, "b": 0.5}


def test_dropout_keeps_stale_trust() -> None:
    config = FederationConfig(num_clients=2, rounds=1)
    clients = [LossScheduleClient("client_00", lambda t: 0.5), LossScheduleClient("client_01", lambda t: 0.5)]
    state = FederationState.initial(["client_00", "client_01"], 1, 1, W0=np.ones((1, 1)))
    run_round(state, clients, {}, config)
    u_before = dict(state.u)

    plan = ScenarioPlan(((AttackScenario(kind=AttackKind.dropout, fraction_of_clients=0.5, start_round=1),
                          ("client_01",)),))
    events = []
    report = run_round(state, clients, {}, config, plan=plan, events=events)
    dropped = report.client("client_01")
    assert not dropped.reported
    assert dropped.alpha == 0.0
    assert state.u["client_01"] == u_before["client_01"]
    assert report.alphas["client_00"] == 1.0
    assert report.entropy == 0.0
    assert [e.client_id for e in events] == ["client_01"]


class _BrokenClient:
    client_id = "client_09"

    def train(self, W_global, t, prototypes):
        raise RuntimeError("disk full")

    def evaluate(self, W, prototypes):
        return 0.0


def test_failing_client_is_excluded_or_fatal() -> None:
    clients = [LossScheduleClient("client_00", lambda t: 0.5), _BrokenClient()]
    ids = [c.client_id for c in clients]
    report = run_round(FederationState.initial(ids, 1, 1), clients, {}, FederationConfig())
    assert report.num_reporting == 1
    assert not report.client("client_09").reported

    strict = FederationConfig(tolerate_client_failures=False)
    with pytest.raises(ClientFailureError) as excinfo:
        run_round(FederationState.initial(ids, 1, 1), clients, {}, strict)
    assert excinfo.value.client_id == "client_09"


def test_invalid_reported_loss_excludes_client() -> None:
    clients = [LossScheduleClient("client_00", lambda t: 0.5), LossScheduleClient("client_01", lambda t: math.nan)]
    report = run_round(FederationState.initial(["client_00", "client_01"], 1, 1), clients, {}, FederationConfig())
    assert report.num_reporting == 1


def test_server_run_writes_snapshots_and_frames(tmp_path: Path) -> None:
    config = FederationConfig(num_clients=3, rounds=3, snapshots=True)
    protos = random_prototypes(["a", "b"], 3, seed=5)
    clients = _clients(3, ["a", "b"] * 4, 4, seed=6, config=config)
    server = FederationServer(clients, protos, config, k=3, d=4, reference=np.ones(4), snapshot_dir=tmp_path)
    reports = server.run()
    assert [r.t for r in reports] == [0, 1, 2]
    assert sorted(p.name for p in tmp_path.iterdir()) == ["round_000.bin", "round_001.bin", "round_002.bin"]
    assert matrix_checksum(read_matrix_snapshot(tmp_path / "round_002.bin")) == reports[-1].checksum
    assert all(r.alignment is not None and r.alignment > 0 for r in reports)
    assert set(server.last_updates) == {"client_00", "client_01", "client_02"}

    rebuilt = reports_from_frames(rounds_frame(reports), summary_frame(reports))
    assert [r.checksum for r in rebuilt] == [r.checksum for r in reports]
    assert rebuilt[1].alphas == pytest.approx(reports[1].alphas)


def test_loss_schedule_concentrates_trust() -> None:
    result = run_loss_schedule_scenario(num_clients=4, rounds=40, decay=0.5)
    entropies = [r.entropy for r in result.reports]
    assert entropies[0] == pytest.approx(math.log(4))
    assert all(b <= a + 1e-12 for a, b in zip(entropies, entropies[1:]))
    assert entropies[-1] < 0.01
    assert result.converged_at is not None and result.converged_at < 40
    assert result.reports[-1].alphas["client_00"] > 0.99
    assert trust_entropy_series(result.reports).fit.slope < 0


def test_loss_schedule_validates_arguments() -> None:
    with pytest.raises(InvalidInputError):
        run_loss_schedule_scenario(num_clients=1)
    with pytest.raises(InvalidInputError):
        run_loss_schedule_scenario(decay=1.0)


def test_client_update_is_plain_record() -> None:
    update = ClientUpdate("c", np.eye(1), 0.0)
    assert update.client_id == "c"


def test_federated_client_rejects_empty_dataset() -> None:
    empty = LocalDataset("client_00", np.zeros((0, 2)), ())
    with pytest.raises(InvalidInputError):
        FederatedClient(empty, FederationConfig())
