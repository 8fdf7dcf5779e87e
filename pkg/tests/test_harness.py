from __future__ import annotations

import json
import math
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from fedsem.core.config import load_experiment_config
from fedsem.core.errors import InvalidInputError, StageError
from fedsem.models import LocalDataset
from fedsem.schemas.adversary import AttackScenario
from fedsem.schemas.experiment import ExperimentConfig
from fedsem.services.harness_service import (
    ASSESSMENTS_CSV,
    EVASION_COLUMNS,
    MANIFEST,
    METRICS_DIR,
    build_experiment_prototypes,
    evasion_experiment,
    generate_synthetic_dataset,
    load_prototypes,
    load_training,
    partition_non_iid,
    prepare_data,
    run_diversity_sweep,
    run_experiment,
    run_gen_stage,
    run_infer_stage,
    run_prototypes_stage,
    run_report_stage,
    run_train_stage,
    save_data,
    seen_accuracy,
    split_train_test,
    train_federation,
)
from fedsem.services.inference_service import assess_batch, attribute
from fedsem.services.metrics_service import binned_curve
from fedsem.services.projection_service import local_loss
from fedsem.utils.csv_io import read_csv

ROOT = Path(__file__).resolve().parents[1]

STAGE_OUTPUTS = [
    "prototypes.csv",
    "prototype_vectors.csv",
    "data/client_00.csv",
    "data/test.csv",
    "data/test_index.csv",
    "data/scaler.csv",
    "rounds.csv",
    "round_summary.csv",
    "attacks.csv",
    "global_matrix.bin",
    "assessments.csv",
    "metrics/entropy.csv",
    "metrics/calibration.csv",
    "metrics/calibration_observation.csv",
    "metrics/threshold_sweep.csv",
    "metrics/latency.csv",
    "metrics/client_regression.csv",
    "metrics/entropy_schedule.csv",
    "metrics/summary.csv",
]


def _with(config: ExperimentConfig, **sections) -> ExperimentConfig:
    update = {name: getattr(config, name).model_copy(update=values) for name, values in sections.items()}
    return config.model_copy(update=update)


def _pool(labels_counts, d: int = 3) -> LocalDataset:
    labels = [label for label, n in labels_counts for _ in range(n)]
    return LocalDataset("pool", np.random.default_rng(0).standard_normal((len(labels), d)), tuple(labels))


def test_planted_map_reproduces_prototypes(small_config: ExperimentConfig) -> None:
    config = _with(small_config, data={"noise_std": 0.0})
    prototypes = build_experiment_prototypes(config)
    synthetic = generate_synthetic_dataset(config, prototypes)
    assert synthetic.residual < 1e-9
    assert len(synthetic.pool) == 5 * 40
    seen = synthetic.pool.subset([i for i, label in enumerate(synthetic.pool.labels) if label != "dns_tunneling"])
    assert local_loss(synthetic.planted, seen, prototypes) < 1e-9


def test_novel_samples_map_near_their_own_prototype(small_config: ExperimentConfig) -> None:
    config = _with(small_config, data={"noise_std": 0.0})
    prototypes = build_experiment_prototypes(config)
    synthetic = generate_synthetic_dataset(config, prototypes)
    novel = config.data.concepts.index("dns_tunneling")
    mapped = synthetic.planted @ synthetic.generators[:, novel]
    concept, confidence = attribute(mapped, prototypes)
    assert concept == "dns_tunneling"
    assert 0.5 < confidence < 0.999


def test_noise_grows_with_disagreement(small_config: ExperimentConfig) -> None:
    prototypes = build_experiment_prototypes(small_config)
    flat = generate_synthetic_dataset(_with(small_config, data={"noise_heterogeneity": 0.0}), prototypes)
    skewed = generate_synthetic_dataset(_with(small_config, data={"noise_heterogeneity": 2.0}), prototypes)
    assert set(flat.noise_levels.values()) == {small_config.data.noise_std}
    D = {p.concept_id: p.disagreement for p in prototypes}
    mean_seen = np.mean([D[c] for c in small_config.data.seen])
    for concept, sigma in skewed.noise_levels.items():
        assert sigma == pytest.approx(small_config.data.noise_std * (D[concept] / mean_seen) ** 2, rel=1e-12)
    ordered = sorted(small_config.data.concepts, key=D.get)
    levels = [skewed.noise_levels[c] for c in ordered]
    assert levels == sorted(levels)

    labels = np.asarray(flat.pool.labels)
    for j, concept in enumerate(small_config.data.concepts):
        rows = labels == concept
        spread_flat = np.linalg.norm(flat.pool.features[rows] - flat.generators[:, j])
        spread_skewed = np.linalg.norm(skewed.pool.features[rows] - skewed.generators[:, j])
        assert spread_skewed / spread_flat == pytest.approx((D[concept] / mean_seen) ** 2, rel=1e-9)


def test_planting_needs_enough_dimensions(small_config: ExperimentConfig) -> None:
    config = _with(small_config, data={"d": 3})
    with pytest.raises(InvalidInputError, match="at least 4"):
        generate_synthetic_dataset(config)


def test_split_keeps_novel_concepts_out_of_training(small_config: ExperimentConfig) -> None:
    prototypes = build_experiment_prototypes(small_config)
    pool = generate_synthetic_dataset(small_config, prototypes).pool
    train, test = split_train_test(pool, small_config.data, small_config.seed)
    test_counts = Counter(test.labels)
    assert "dns_tunneling" not in train.labels
    assert test_counts["dns_tunneling"] == 40
    assert all(test_counts[c] == 8 for c in small_config.data.seen)
    assert len(train) + len(test) == len(pool)
    assert set(train.sample_ids).isdisjoint(test.sample_ids)


def test_partition_conserves_samples() -> None:
    pool = _pool([("a", 50), ("b", 30), ("c", 20)])
    clients = partition_non_iid(pool, 5, 0.3, seed=1)
    assert [c.client_id for c in clients] == [f"client_{i:02d}" for i in range(5)]
    assert all(len(c) > 0 for c in clients)
    ids = sorted(i for c in clients for i in c.sample_ids)
    assert ids == list(range(100))
    assert partition_non_iid(pool, 5, 0.3, seed=1)[2].sample_ids == clients[2].sample_ids


def test_partition_single_client_gets_everything() -> None:
    pool = _pool([("a", 7), ("b", 3)])
    (only,) = partition_non_iid(pool, 1, 0.5, seed=0)
    assert only.sample_ids == pool.sample_ids


def test_partition_large_beta_is_nearly_iid() -> None:
    pool = _pool([("a", 400), ("b", 400), ("c", 800), ("d", 400)])
    global_share = {label: n / len(pool) for label, n in Counter(pool.labels).items()}
    for client in partition_non_iid(pool, 4, 1e6, seed=2):
        counts = Counter(client.labels)
        for label, share in global_share.items():
            assert abs(counts[label] / len(client) - share) < 0.05


def test_partition_errors() -> None:
    pool = _pool([("a", 3)])
    with pytest.raises(InvalidInputError):
        partition_non_iid(pool, 4, 0.5, seed=0)
    with pytest.raises(InvalidInputError):
        partition_non_iid(pool, 2, 0.0, seed=0)


def test_prepared_clients_never_see_novel_concepts(small_config: ExperimentConfig) -> None:
    data = prepare_data(small_config, build_experiment_prototypes(small_config))
    assert len(data.clients) == 3
    for client in data.clients:
        assert "dns_tunneling" not in client.labels
    assert "dns_tunneling" in data.test.labels


def test_data_files_are_reproducible(small_config: ExperimentConfig, tmp_path: Path) -> None:
    prototypes = build_experiment_prototypes(small_config)
    for name in ("one", "two"):
        save_data(tmp_path / name, prepare_data(small_config, prototypes), small_config.data.novel)
    for path in sorted((tmp_path / "one" / "data").iterdir()):
        assert path.read_bytes() == (tmp_path / "two" / "data" / path.name).read_bytes()


def test_stages_run_separately(small_config: ExperimentConfig) -> None:
    out = Path(small_config.output_dir)
    run_prototypes_stage(small_config)
    loaded = load_prototypes(out)
    assert [p.concept_id for p in loaded] == small_config.data.concepts

    run_gen_stage(small_config)
    training = run_train_stage(small_config)
    assert len(training.reports) == small_config.federation.rounds
    samples = run_infer_stage(small_config)
    assert len(samples) == 4 * 8 + 40
    headline = run_report_stage(small_config)

    for rel in STAGE_OUTPUTS:
        assert (out / rel).is_file(), rel
    assert 0.0 <= headline["seen_accuracy"] <= 1.0
    assert headline["rounds"] == 4
    assert "tau_star" in headline
    header = (out / ASSESSMENTS_CSV).read_text(encoding="utf-8").splitlines()[0]
    assert header == "sample_id,attributed_concept,confidence,zds,true_label_if_known,is_novel_flag,disagreement_used,observation_disagreement"


def test_calibration_bins_attributed_prototype_disagreement(small_config: ExperimentConfig) -> None:
    run_experiment(small_config)
    out = Path(small_config.output_dir)
    assessments = read_csv(out / ASSESSMENTS_CSV).dropna(subset=["confidence"])
    D = {p.concept_id: p.disagreement for p in load_prototypes(out)}
    assert assessments["disagreement_used"].tolist() == [D[c] for c in assessments["attributed_concept"]]

    expected = binned_curve(
        assessments["disagreement_used"].tolist(), assessments["confidence"].tolist(),
        small_config.inference.calibration_bins,
    )
    calibration = read_csv(out / METRICS_DIR / "calibration.csv")
    assert calibration["count"].tolist() == [n for _, _, n in expected.points]
    assert calibration["mean_confidence_cosine"].tolist() == pytest.approx([m for _, m, _ in expected.points])
    observed = read_csv(out / METRICS_DIR / "calibration_observation.csv")
    assert observed["count"].sum() == len(assessments)


def test_separate_stages_match_chained_run(small_config: ExperimentConfig, tmp_path: Path) -> None:
    run_prototypes_stage(small_config)
    run_gen_stage(small_config)
    run_train_stage(small_config)
    run_infer_stage(small_config)
    run_report_stage(small_config)

    chained = small_config.model_copy(update={"output_dir": str(tmp_path / "chained")})
    run_experiment(chained)
    for rel in STAGE_OUTPUTS:
        assert (Path(small_config.output_dir) / rel).read_bytes() == (tmp_path / "chained" / rel).read_bytes(), rel


def test_stage_without_inputs_fails(small_config: ExperimentConfig) -> None:
    with pytest.raises(StageError) as excinfo:
        run_train_stage(small_config)
    assert excinfo.value.stage == "train"
    assert isinstance(excinfo.value.cause, InvalidInputError)
    assert "prototypes" in excinfo.value.detail


def test_manifest_is_reproducible(small_config: ExperimentConfig) -> None:
    out = Path(small_config.output_dir)
    run_experiment(small_config)
    first = json.loads((out / MANIFEST).read_text(encoding="utf-8"))
    run_experiment(small_config)
    second = json.loads((out / MANIFEST).read_text(encoding="utf-8"))
    first.pop("created_at")
    second.pop("created_at")
    assert first == second
    assert first["synthetic_data"] is True
    assert first["seed"] == 3
    assert "assessments.csv" in first["files"]
    assert MANIFEST not in first["files"]


def test_evasion_experiment_respects_budget(small_config: ExperimentConfig) -> None:
    scenario = AttackScenario(kind="evasion", fraction_of_clients=0.5, magnitude=0.3, steps=20,
                              step_size=0.05, target_concept="benign", seed=1)
    config = small_config.model_copy(update={"attacks": [scenario]})
    prototypes = build_experiment_prototypes(config)
    data = prepare_data(config, prototypes)
    training = train_federation(config, prototypes, data)
    frame = evasion_experiment(config, prototypes, data.scaled_test(), training.global_matrix)
    assert list(frame.columns) == EVASION_COLUMNS
    # 3 seen non-target concepts with 8 test samples each
    assert len(frame) == 12
    assert (frame["true_label"] != "benign").all()
    assert (frame["perturbation_l2"] <= 0.3 + 1e-9).all()
    assert evasion_experiment(small_config, prototypes, data.scaled_test(), training.global_matrix) is None


def test_diversity_sweep(small_config: ExperimentConfig) -> None:
    result = run_diversity_sweep(small_config, [0.1, 100.0])
    assert list(result.frame.columns) == ["beta", "H_final_nats", "H_centered_nats", "seen_accuracy"]
    assert result.frame["beta"].tolist() == [0.1, 100.0]
    assert result.frame["H_centered_nats"].sum() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(InvalidInputError):
        run_diversity_sweep(small_config, [0.5])


@pytest.mark.slow
def test_default_experiment_meets_targets(tmp_path: Path) -> None:
    config = load_experiment_config(ROOT / "configs" / "default.yaml", output_dir=str(tmp_path / "default"))
    headline = run_experiment(config)
    assert headline["seen_accuracy"] >= 0.8
    assert headline["zds_auroc"] >= 0.8
    assert headline["calibration_monotone"] is True
    assert 0.0 <= headline["final_entropy_nats"] <= np.log(config.federation.num_clients) + 1e-12
    assert headline["schedule_converged_at"] is not None
    assert (tmp_path / "default" / METRICS_DIR / "summary.csv").is_file()
    reports = load_training(config).reports
    assert len(reports) == config.federation.rounds
    for report in reports:
        assert math.fsum(report.alphas.values()) == pytest.approx(1.0, abs=1e-9), report.t


@pytest.mark.slow
def test_trust_weighting_resists_poisoning(tmp_path: Path) -> None:
    base = load_experiment_config(ROOT / "configs" / "poison.yaml")
    poison_only = [a for a in base.attacks if a.kind.value == "poison_random"]
    results = {}
    for ablation in ("full", "no_trust"):
        config = base.model_copy(update={
            "attacks": poison_only,
            "ablation": ablation,
            "output_dir": str(tmp_path / ablation),
        })
        prototypes = build_experiment_prototypes(config)
        data = prepare_data(config, prototypes)
        training = train_federation(config, prototypes, data)
        poisoned = {e.client_id for e in training.events}
        assert len(poisoned) == 2
        if ablation == "full":
            round_five = training.reports[5].alphas
            honest = [a for cid, a in round_five.items() if cid not in poisoned]
            assert all(round_five[cid] < np.mean(honest) for cid in poisoned)
            last = training.reports[-1].alphas
            assert all(last[cid] < 1 / len(last) for cid in poisoned)
        samples = assess_batch(data.scaled_test(), training.global_matrix, prototypes,
                               config.effective_inference(), novel=config.data.novel)
        results[ablation] = seen_accuracy(samples)
    assert results["full"] >= results["no_trust"]
