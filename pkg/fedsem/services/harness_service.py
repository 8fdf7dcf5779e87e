"""
services/harness_service.py
---------------------------

Experiment pipeline on synthetic data.

The real traffic behind the detector is not available, so features are
generated: every concept gets a random generator ``g_a`` in feature
space and a planted matrix ``W*`` with ``W* g_a = z_a`` exactly; samples
are ``g_a`` plus Gaussian noise.  Held-out (novel) concepts only ever
reach the test split.

A run goes through five stages, each reading the artefacts of the
previous one from the output directory, so they can also be run one
at a time from the command line:

=============  ===============================================
prototypes     ``prototypes.csv``, ``prototype_vectors.csv``
gen            ``data/client_XX.csv``, ``data/test.csv``,
               ``data/test_index.csv``, ``data/scaler.csv``
train          ``rounds.csv``, ``round_summary.csv``, ``attacks.csv``,
               ``global_matrix.bin``, ``clients/client_XX.bin``
infer          ``assessments.csv``, ``evasion.csv``
report         ``metrics/*.csv``
=============  ===============================================

``run_experiment`` chains them and writes ``manifest.json``, the only
file carrying a timestamp.
"""

from __future__ import annotations

import json
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import orjson
import pandas as pd

from fedsem.core.config import config_hash, dump_resolved_config
from fedsem.core.errors import AbstentionError, InvalidInputError, StageError, UnknownLabelError
from fedsem.logging_config import log_call, logger
from fedsem.models import AttackPrototype, FeatureVector, LocalDataset, SemanticEmbedding
from fedsem.schemas.adversary import AttackEvent, AttackKind
from fedsem.schemas.encoding import PERSPECTIVE_ORDER
from fedsem.schemas.experiment import DataConfig, ExperimentConfig
from fedsem.schemas.federation import FederationConfig, RoundReport
from fedsem.services.adversary_service import ScenarioPlan, craft_evasion, selection_count
from fedsem.services.federation_service import (
    FederatedClient,
    FederationServer,
    LossScheduleClient,
    check_convergence,
    read_matrix_snapshot,
    reports_from_frames,
    rounds_frame,
    summary_frame,
    write_matrix_snapshot,
)
from fedsem.services.inference_service import (
    ScoredSample,
    assess,
    assess_batch,
    attribute,
    disagreement_table,
    samples_from_frame,
    sweep_threshold,
    write_assessments,
)
from fedsem.services.metrics_service import (
    alignment_series,
    auroc,
    binned_curve,
    centered_entropy,
    client_regression,
    latency_table,
    ols_fit,
    series_frame,
    similarity_stats,
    trust_entropy_series,
    write_metric_csv,
    zero_shot_accuracy,
)
from fedsem.services.projection_service import (
    FeatureScaler,
    Prototypes,
    prototype_map,
    read_dataset_csv,
    write_dataset_csv,
)
from fedsem.services.semantic_encoding_service import (
    StubEncoder,
    build_prototypes,
    disagreement_stats,
    load_descriptions,
    resolve_backends,
    semantic_strength,
    synthetic_corpus,
    synthetic_descriptions,
)
from fedsem.utils.csv_io import read_csv, relative_files, sha256_file, write_csv, write_rows
from fedsem.utils.seeding import rng_for

RESOLVED_CONFIG = "resolved_config.yaml"
PROTOTYPES_CSV = "prototypes.csv"
PROTOTYPE_VECTORS_CSV = "prototype_vectors.csv"
DATA_DIR = "data"
TEST_CSV = "data/test.csv"
TEST_INDEX_CSV = "data/test_index.csv"
SCALER_CSV = "data/scaler.csv"
ROUNDS_CSV = "rounds.csv"
ROUND_SUMMARY_CSV = "round_summary.csv"
ATTACKS_CSV = "attacks.csv"
GLOBAL_MATRIX = "global_matrix.bin"
CLIENTS_DIR = "clients"
SNAPSHOT_DIR = "snapshots"
ASSESSMENTS_CSV = "assessments.csv"
EVASION_CSV = "evasion.csv"
METRICS_DIR = "metrics"
MANIFEST = "manifest.json"

# Largest acceptable |W* G - Z| entry of the planted map.
PLANTING_TOLERANCE = 1e-9
PARTITION_ATTEMPTS = 100

ATTACK_COLUMNS = ["t", "client_id", "kind", "magnitude"]
EVASION_COLUMNS = [
    "scenario", "sample_id", "true_label", "target_concept", "attributed_before",
    "attributed_after", "zds_before", "zds_after", "perturbation_l2",
]


def client_name(index: int) -> str:
    return f"client_{index:02d}"


@contextmanager
def _stage(name: str) -> Iterator[None]:
    logger.info(json.dumps({"event": "stage_start", "stage": name}))
    start = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        logger.error(json.dumps({
            "event": "stage_error",
            "stage": name,
            "error": type(exc).__name__,
            "detail": getattr(exc, "detail", str(exc)),
        }), exc_info=True)
        raise StageError(name, exc) from exc
    logger.info(json.dumps({
        "event": "stage_end",
        "stage": name,
        "duration_ms": round((time.perf_counter() - start) * 1000, 2),
    }))


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise InvalidInputError(f"{path} not found; run the '{stage}' stage first")
    return path


def write_resolved_config(config: ExperimentConfig) -> Path:
    path = Path(config.output_dir) / RESOLVED_CONFIG
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_resolved_config(config), encoding="utf-8")
    return path


# -----------------------------------------------------------------------------
# Prototypes
# -----------------------------------------------------------------------------

def concept_descriptions(config: ExperimentConfig):
    data = config.data
    if data.descriptions_dir:
        found = load_descriptions(data.descriptions_dir)
        missing = [c for c in data.concepts if c not in found]
        if missing:
            raise InvalidInputError(f"no descriptions for concepts {missing} in {data.descriptions_dir}")
        return {c: found[c] for c in data.concepts}
    return synthetic_descriptions(data.concepts, data.novel, config.seed)


def build_experiment_prototypes(config: ExperimentConfig, *, backends=None) -> List[AttackPrototype]:
    profiles = config.encoders.profiles
    if backends is None:
        backends = resolve_backends(profiles, config.seed)
    return build_prototypes(
        concept_descriptions(config), profiles, config.data.k, config.seed, backends=backends,
    )


def prototypes_frame(prototypes: Sequence[AttackPrototype], novel: Sequence[str]) -> pd.DataFrame:
    novel_set = set(novel)
    rows = [
        [p.concept_id, int(p.concept_id in novel_set), p.disagreement, p.fused.norm, *p.encoder_ids]
        for p in prototypes
    ]
    return pd.DataFrame(rows, columns=[
        "concept_id", "is_novel", "disagreement", "fused_norm",
        *[f"encoder_{p.value}" for p in PERSPECTIVE_ORDER],
    ])


def prototype_vectors_frame(prototypes: Sequence[AttackPrototype]) -> pd.DataFrame:
    k = prototypes[0].fused.dim
    rows = []
    for p in prototypes:
        for perspective, member in zip(PERSPECTIVE_ORDER, p.members):
            rows.append([p.concept_id, perspective.value, member.encoder_id, *member.values])
        rows.append([p.concept_id, "fused", "fused", *p.fused.values])
    return pd.DataFrame(rows, columns=["concept_id", "perspective", "encoder_id", *[f"v{i}" for i in range(k)]])


def load_prototypes(out: str | Path) -> List[AttackPrototype]:
    out = Path(out)
    summary = read_csv(_require(out / PROTOTYPES_CSV, "prototypes"), dtype={"concept_id": str})
    vectors = read_csv(
        _require(out / PROTOTYPE_VECTORS_CSV, "prototypes"),
        dtype={"concept_id": str, "perspective": str, "encoder_id": str},
    )
    value_cols = [c for c in vectors.columns if c.startswith("v")]
    prototypes = []
    for cid, D in zip(summary["concept_id"], summary["disagreement"]):
        block = vectors[vectors["concept_id"] == cid]
        members, fused = [], None
        for perspective, encoder_id, values in zip(
            block["perspective"], block["encoder_id"], block[value_cols].to_numpy(dtype=np.float64)
        ):
            if perspective == "fused":
                fused = SemanticEmbedding(values, "fused")
            else:
                members.append(SemanticEmbedding(values, encoder_id))
        if fused is None or len(members) != len(PERSPECTIVE_ORDER):
            raise InvalidInputError(f"{PROTOTYPE_VECTORS_CSV}: incomplete vectors for '{cid}'")
        prototypes.append(AttackPrototype(cid, fused, tuple(members), float(D)))
    return prototypes


def run_prototypes_stage(config: ExperimentConfig) -> List[AttackPrototype]:
    out = Path(config.output_dir)
    with _stage("prototypes"):
        prototypes = build_experiment_prototypes(config)
        write_csv(out / PROTOTYPES_CSV, prototypes_frame(prototypes, config.data.novel))
        write_csv(out / PROTOTYPE_VECTORS_CSV, prototype_vectors_frame(prototypes))
    return prototypes


# -----------------------------------------------------------------------------
# Synthetic data
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticData:
    pool: LocalDataset
    generators: np.ndarray
    planted: np.ndarray
    residual: float
    noise_levels: Dict[str, float]


@log_call
def generate_synthetic_dataset(config: ExperimentConfig,
                               prototypes: Optional[Prototypes] = None) -> SyntheticData:
    """Plant a linear map from concept generators to prototypes and sample around it.

    ``generators`` is ``d x C`` (one column per concept in config order).
    Seen generators are orthogonal with norm ``sqrt(d)`` and
    ``planted = Z_seen pinv(G_seen)``, so ``planted @ g_a`` reproduces
    ``z_a`` for every seen concept.  A novel generator is the seen
    combination whose planted image is the least-squares fit of its
    prototype: novel telemetry lives in the trained feature subspace.

    Sample noise of concept ``c`` is
    ``noise_std * (D_c / mean seen D) ** noise_heterogeneity``.
    """
    data = config.data
    if prototypes is None:
        prototypes = build_experiment_prototypes(config)
    protos = prototype_map(prototypes)
    seen = data.seen
    C = len(seen)
    if C > min(data.d, data.k):
        raise InvalidInputError(
            f"{C} seen concepts cannot be planted exactly with d={data.d}, k={data.k}; "
            f"use d and k of at least {C}"
        )
    missing = [c for c in data.concepts if c not in protos]
    if missing:
        raise UnknownLabelError(f"concepts without prototype: {missing}")
    Z = np.stack([protos[c].fused.values for c in data.concepts], axis=1)
    if Z.shape[0] != data.k:
        raise InvalidInputError(f"prototypes have dimension {Z.shape[0]}, config says k={data.k}")
    seen_idx = [data.concepts.index(c) for c in seen]
    Z_seen = Z[:, seen_idx]
    Q, _ = np.linalg.qr(rng_for("generators", config.seed).standard_normal((data.d, C)))
    G_seen = np.sqrt(data.d) * Q
    planted = Z_seen @ np.linalg.pinv(G_seen)
    residual = float(np.max(np.abs(planted @ G_seen - Z_seen)))
    if residual > PLANTING_TOLERANCE:
        raise InvalidInputError(f"planted map misses the prototypes by {residual:.3e}")
    coefficients = np.linalg.lstsq(Z_seen, Z, rcond=None)[0]
    G = G_seen @ coefficients
    G[:, seen_idx] = G_seen

    mean_seen = float(np.mean([protos[c].disagreement for c in seen]))
    blocks, labels, noise_levels = [], [], {}
    for j, cid in enumerate(data.concepts):
        ratio = protos[cid].disagreement / mean_seen if mean_seen > 0 else 1.0
        sigma = data.noise_std * ratio ** data.noise_heterogeneity
        noise_levels[cid] = sigma
        noise = rng_for("samples", config.seed, cid).standard_normal((data.samples_per_concept, data.d))
        blocks.append(G[:, j] + sigma * noise)
        labels.extend([cid] * data.samples_per_concept)
    pool = LocalDataset("pool", np.vstack(blocks), tuple(labels))
    logger.info(json.dumps({
        "event": "synthetic_data_generated",
        "samples": len(pool),
        "concepts": len(data.concepts),
        "d": data.d,
        "noise_std": data.noise_std,
        "noise_levels": noise_levels,
        "planting_residual": residual,
    }))
    return SyntheticData(pool=pool, generators=G, planted=planted, residual=residual, noise_levels=noise_levels)


def _indices_by_label(pool: LocalDataset) -> Dict[str, List[int]]:
    out: Dict[str, List[int]] = {}
    for i, label in enumerate(pool.labels):
        out.setdefault(label, []).append(i)
    return out


def split_train_test(pool: LocalDataset, data: DataConfig, seed: int) -> Tuple[LocalDataset, LocalDataset]:
    """Novel concepts go to test entirely; seen ones keep ``test_fraction`` for testing."""
    novel = set(data.novel)
    train_idx: List[int] = []
    test_idx: List[int] = []
    for label, idx in sorted(_indices_by_label(pool).items()):
        if label in novel:
            test_idx.extend(idx)
            continue
        perm = rng_for("split", seed, label).permutation(np.asarray(idx))
        n_test = int(round(data.test_fraction * len(idx)))
        test_idx.extend(int(i) for i in perm[:n_test])
        train_idx.extend(int(i) for i in perm[n_test:])
    return pool.subset(sorted(train_idx), "train"), pool.subset(sorted(test_idx), "test")


@log_call
def partition_non_iid(pool: LocalDataset, num_clients: int, beta: float, seed: int) -> List[LocalDataset]:
    """Dirichlet label-skew partition into ``client_00 .. client_{N-1}``.

    Every concept's samples are shuffled and cut according to a
    Dirichlet(beta) draw.  An allocation that leaves a client empty is
    redrawn, up to a fixed number of attempts.
    """
    if num_clients < 1:
        raise InvalidInputError(f"need at least one client, got {num_clients}")
    if beta <= 0:
        raise InvalidInputError(f"beta must be positive, got {beta}")
    if len(pool) < num_clients:
        raise InvalidInputError(f"pool of {len(pool)} samples cannot feed {num_clients} clients")
    by_label = _indices_by_label(pool)
    for attempt in range(PARTITION_ATTEMPTS):
        rng = rng_for("partition", seed, attempt)
        assignment: List[List[int]] = [[] for _ in range(num_clients)]
        for label in sorted(by_label):
            idx = rng.permutation(np.asarray(by_label[label]))
            proportions = rng.dirichlet(np.full(num_clients, beta))
            cuts = (np.cumsum(proportions) * len(idx)).astype(np.int64)[:-1]
            for client, part in enumerate(np.split(idx, cuts)):
                assignment[client].extend(int(i) for i in part)
        if all(assignment):
            return [pool.subset(sorted(a), client_name(i)) for i, a in enumerate(assignment)]
        logger.warning(json.dumps({"event": "partition_retry", "attempt": attempt, "beta": beta}))
    raise InvalidInputError(
        f"could not give every one of {num_clients} clients a sample in {PARTITION_ATTEMPTS} draws (beta={beta})"
    )


@dataclass(frozen=True)
class ExperimentData:
    clients: List[LocalDataset]
    test: LocalDataset
    scaler: FeatureScaler

    def scaled_clients(self) -> List[LocalDataset]:
        return [self.scaler.transform_dataset(ds) for ds in self.clients]

    def scaled_test(self) -> LocalDataset:
        return self.scaler.transform_dataset(self.test)


def prepare_data(config: ExperimentConfig, prototypes: Prototypes) -> ExperimentData:
    synthetic = generate_synthetic_dataset(config, prototypes)
    train, test = split_train_test(synthetic.pool, config.data, config.seed)
    clients = partition_non_iid(train, config.federation.num_clients, config.data.beta, config.seed)
    scaler = FeatureScaler.fit(train.features, center=config.data.center)
    return ExperimentData(clients=clients, test=test, scaler=scaler)


def save_data(out: str | Path, data: ExperimentData, novel: Sequence[str]) -> None:
    out = Path(out)
    for ds in data.clients:
        write_dataset_csv(out / DATA_DIR / f"{ds.client_id}.csv", ds)
    write_dataset_csv(out / TEST_CSV, data.test)
    novel_set = set(novel)
    write_rows(
        out / TEST_INDEX_CSV,
        ["sample_id", "label", "is_novel"],
        [[sid, label, int(label in novel_set)] for sid, label in zip(data.test.sample_ids, data.test.labels)],
    )
    write_csv(out / SCALER_CSV, data.scaler.to_frame())


def load_data(config: ExperimentConfig) -> ExperimentData:
    out = Path(config.output_dir)
    paths = sorted((out / DATA_DIR).glob("client_*.csv"))
    if len(paths) != config.federation.num_clients:
        raise InvalidInputError(
            f"found {len(paths)} client files in {out / DATA_DIR}, "
            f"config expects {config.federation.num_clients}; run the 'gen' stage first"
        )
    clients = [read_dataset_csv(p, client_id=p.stem) for p in paths]
    index = read_csv(_require(out / TEST_INDEX_CSV, "gen"), dtype={"label": str})
    test = read_dataset_csv(_require(out / TEST_CSV, "gen"), "test", index["sample_id"].tolist())
    scaler = FeatureScaler.from_frame(read_csv(_require(out / SCALER_CSV, "gen")))
    return ExperimentData(clients=clients, test=test, scaler=scaler)


def run_gen_stage(config: ExperimentConfig, prototypes: Optional[Prototypes] = None) -> ExperimentData:
    with _stage("gen"):
        if prototypes is None:
            prototypes = load_prototypes(config.output_dir)
        data = prepare_data(config, prototypes)
        save_data(config.output_dir, data, config.data.novel)
    return data


# -----------------------------------------------------------------------------
# Federated training
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingResult:
    reports: List[RoundReport]
    events: List[AttackEvent]
    global_matrix: np.ndarray
    client_matrices: Dict[str, np.ndarray]
    converged_at: Optional[int]


def train_federation(config: ExperimentConfig, prototypes: Prototypes, data: ExperimentData, *,
                     snapshot_dir: Optional[Path] = None) -> TrainingResult:
    fed = config.effective_federation()
    clients = [FederatedClient(ds, fed) for ds in data.scaled_clients()]
    plan = ScenarioPlan.build(config.attacks, [c.client_id for c in clients])
    reference = np.vstack([c.dataset.features for c in clients]).mean(axis=0)
    server = FederationServer(
        clients, prototypes, fed, k=config.data.k, d=config.data.d,
        plan=plan, reference=reference, snapshot_dir=snapshot_dir,
    )
    reports = server.run()
    return TrainingResult(
        reports=reports,
        events=list(server.events),
        global_matrix=server.global_matrix.copy(),
        client_matrices=dict(server.last_updates),
        converged_at=server.converged_at,
    )


def save_training(out: str | Path, result: TrainingResult) -> None:
    out = Path(out)
    write_csv(out / ROUNDS_CSV, rounds_frame(result.reports))
    write_csv(out / ROUND_SUMMARY_CSV, summary_frame(result.reports))
    write_rows(
        out / ATTACKS_CSV, ATTACK_COLUMNS,
        [[e.t, e.client_id, e.kind.value, e.magnitude] for e in result.events],
    )
    write_matrix_snapshot(out / GLOBAL_MATRIX, result.global_matrix)
    for cid, W in sorted(result.client_matrices.items()):
        write_matrix_snapshot(out / CLIENTS_DIR / f"{cid}.bin", W)


def first_convergence(delta_history: Sequence[float], tol: float, window: int) -> Optional[int]:
    for t in range(len(delta_history)):
        if check_convergence(delta_history[: t + 1], tol, window):
            return t
    return None


def load_training(config: ExperimentConfig) -> TrainingResult:
    out = Path(config.output_dir)
    rounds = read_csv(_require(out / ROUNDS_CSV, "train"), dtype={"client_id": str})
    summary = read_csv(_require(out / ROUND_SUMMARY_CSV, "train"), dtype={"checksum": str})
    reports = reports_from_frames(rounds, summary)
    attacks = read_csv(_require(out / ATTACKS_CSV, "train"), dtype={"client_id": str, "kind": str})
    events = [
        AttackEvent(t=int(t), client_id=cid, kind=AttackKind(kind), magnitude=float(m))
        for t, cid, kind, m in zip(attacks["t"], attacks["client_id"], attacks["kind"], attacks["magnitude"])
    ]
    matrices = {p.stem: read_matrix_snapshot(p) for p in sorted((out / CLIENTS_DIR).glob("*.bin"))}
    fed = config.effective_federation()
    return TrainingResult(
        reports=reports,
        events=events,
        global_matrix=read_matrix_snapshot(_require(out / GLOBAL_MATRIX, "train")),
        client_matrices=matrices,
        converged_at=first_convergence(
            [r.delta_entropy for r in reports], fed.convergence_tol, fed.convergence_window,
        ),
    )


def run_train_stage(config: ExperimentConfig, prototypes: Optional[Prototypes] = None,
                    data: Optional[ExperimentData] = None) -> TrainingResult:
    out = Path(config.output_dir)
    with _stage("train"):
        if prototypes is None:
            prototypes = load_prototypes(out)
        if data is None:
            data = load_data(config)
        snapshots = out / SNAPSHOT_DIR if config.federation.snapshots else None
        result = train_federation(config, prototypes, data, snapshot_dir=snapshots)
        save_training(out, result)
    return result


# -----------------------------------------------------------------------------
# Inference
# -----------------------------------------------------------------------------

def evasion_experiment(config: ExperimentConfig, prototypes: Prototypes, test: LocalDataset,
                       W_g: np.ndarray) -> Optional[pd.DataFrame]:
    """Craft seen malicious test samples toward a target prototype and rescore them.

    ``test`` must already be scaled.  Returns ``None`` when no evasion
    scenario is configured.
    """
    scenarios = [(i, s) for i, s in enumerate(config.attacks) if s.kind == AttackKind.evasion]
    if not scenarios:
        return None
    protos = prototype_map(prototypes)
    inference = config.effective_inference()
    table = disagreement_table(protos, inference.disagreement_mode)
    seen = set(config.data.seen)
    rows = []
    for index, scenario in scenarios:
        target = protos[scenario.target_concept]
        candidates = [
            i for i, label in enumerate(test.labels)
            if label in seen and label != scenario.target_concept
        ]
        count = selection_count(len(candidates), scenario.fraction_of_clients)
        chosen = sorted(rng_for("evasion", scenario.seed, index).choice(len(candidates), size=count, replace=False))
        for j in chosen:
            pos = candidates[int(j)]
            x = FeatureVector(test.features[pos], test.labels[pos])
            try:
                before = assess(x, W_g, protos, inference.zds_lambda, disagreements=table)
                x_adv = craft_evasion(x, W_g, target.fused, scenario.steps, scenario.step_size, scenario.magnitude)
                after = assess(x_adv, W_g, protos, inference.zds_lambda, disagreements=table)
            except AbstentionError:
                logger.warning(json.dumps({"event": "evasion_abstained", "sample_id": test.sample_ids[pos]}))
                continue
            rows.append([
                index, test.sample_ids[pos], x.label, scenario.target_concept,
                before.attributed_concept, after.attributed_concept, before.zds, after.zds,
                float(np.linalg.norm(x_adv.values - x.values)),
            ])
        logger.info(json.dumps({
            "event": "evasion_crafted",
            "scenario": index,
            "samples": count,
            "budget": scenario.magnitude,
            "target": scenario.target_concept,
        }))
    return pd.DataFrame(rows, columns=EVASION_COLUMNS)


def run_infer_stage(config: ExperimentConfig, prototypes: Optional[Prototypes] = None,
                    data: Optional[ExperimentData] = None,
                    W_g: Optional[np.ndarray] = None) -> List[ScoredSample]:
    out = Path(config.output_dir)
    with _stage("infer"):
        if prototypes is None:
            prototypes = load_prototypes(out)
        if data is None:
            data = load_data(config)
        if W_g is None:
            W_g = read_matrix_snapshot(_require(out / GLOBAL_MATRIX, "train"))
        test = data.scaled_test()
        samples = assess_batch(test, W_g, prototypes, config.effective_inference(), novel=config.data.novel)
        write_assessments(out / ASSESSMENTS_CSV, samples)
        evasion = evasion_experiment(config, prototypes, test, W_g)
        if evasion is not None:
            write_csv(out / EVASION_CSV, evasion)
    return samples


def load_assessments(out: str | Path) -> List[ScoredSample]:
    frame = read_csv(
        _require(Path(out) / ASSESSMENTS_CSV, "infer"),
        dtype={"attributed_concept": str, "true_label_if_known": str},
        keep_default_na=False,
    )
    return samples_from_frame(frame)


# -----------------------------------------------------------------------------
# Report
# -----------------------------------------------------------------------------

def seen_accuracy(samples: Sequence[ScoredSample]) -> float:
    """Attribution accuracy over seen samples; an abstention counts as a miss."""
    seen = [s for s in samples if not s.is_novel]
    if not seen:
        raise InvalidInputError("no seen-concept test samples")
    predicted = ["" if s.assessment is None else s.assessment.attributed_concept for s in seen]
    return zero_shot_accuracy(predicted, [s.true_label for s in seen])


def zds_auroc(samples: Sequence[ScoredSample]) -> Optional[float]:
    scored = [s for s in samples if s.assessment is not None]
    flags = [s.is_novel for s in scored]
    if not any(flags) or all(flags):
        return None
    return auroc([s.assessment.zds for s in scored], flags)


def encoder_statistics(config: ExperimentConfig) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Latency regression table and semantic strength per encoder over the synthetic corpus.

    Always measured on the stub encoders, whose latency model is what
    the table characterises.
    """
    corpus = synthetic_corpus(config.encoders.corpus_size, config.seed)
    samples: Dict[str, Tuple[List[int], List[float]]] = {}
    strength = []
    for profile in config.encoders.profiles:
        encoder = StubEncoder(profile, config.seed)
        embeddings = [encoder.encode(text, config.data.k) for text in corpus]
        samples[profile.encoder_id] = (
            [e.token_count for e in embeddings],
            [e.latency_ms for e in embeddings],
        )
        mean, std = semantic_strength(embeddings)
        strength.append([profile.encoder_id, mean, std, len(embeddings)])
    return latency_table(samples), pd.DataFrame(strength, columns=["encoder_id", "mean_norm", "std_norm", "n"])


def client_accuracy_frame(config: ExperimentConfig, prototypes: Prototypes, data: ExperimentData,
                          client_matrices: Mapping[str, np.ndarray]) -> pd.DataFrame:
    """Per client: mean disagreement of its training labels and seen-test accuracy of its last matrix."""
    protos = prototype_map(prototypes)
    test = data.scaled_test()
    novel = set(config.data.novel)
    seen_rows = [i for i, label in enumerate(test.labels) if label not in novel]
    rows = []
    if not seen_rows:
        return pd.DataFrame(rows, columns=["client_id", "mean_disagreement", "seen_accuracy"])
    for ds in data.clients:
        W = client_matrices.get(ds.client_id)
        if W is None:
            continue
        D_i = math.fsum(protos[label].disagreement for label in ds.labels) / len(ds)
        hits = 0
        for i in seen_rows:
            try:
                concept, _ = attribute(W @ test.features[i], protos)
            except AbstentionError:
                continue
            hits += concept == test.labels[i]
        rows.append([ds.client_id, D_i, hits / len(seen_rows)])
    return pd.DataFrame(rows, columns=["client_id", "mean_disagreement", "seen_accuracy"])


@dataclass(frozen=True)
class ScheduleResult:
    reports: List[RoundReport]
    converged_at: Optional[int]


def run_loss_schedule_scenario(num_clients: int = 4, rounds: int = 40, decay: float = 0.5,
                               config: Optional[FederationConfig] = None) -> ScheduleResult:
    """Trust concentration on scripted losses.

    ``client_00`` reports ``decay**t``, every other client a constant 1.
    Matrices are left untouched, so only the trust dynamics move.
    """
    if num_clients < 2:
        raise InvalidInputError("the schedule scenario needs at least 2 clients")
    if not 0 < decay < 1:
        raise InvalidInputError(f"decay must lie in (0, 1), got {decay}")
    fed = (config or FederationConfig()).model_copy(update={"rounds": rounds, "num_clients": num_clients})
    clients = [LossScheduleClient(client_name(0), lambda t: decay ** t)]
    clients += [LossScheduleClient(client_name(i), lambda t: 1.0) for i in range(1, num_clients)]
    server = FederationServer(clients, {}, fed, k=1, d=1)
    reports = server.run()
    return ScheduleResult(reports=reports, converged_at=server.converged_at)


def _entropy_frame(reports: Sequence[RoundReport]) -> pd.DataFrame:
    series = trust_entropy_series(reports)
    centered = centered_entropy(reports)
    return pd.DataFrame({
        "t_round": [t for t, _ in series.shift.pairs],
        "H_nats": [r.entropy for r in sorted(reports, key=lambda r: r.t)],
        "dH_nats": series.delta.values,
        "H_shift_nats": series.shift.values,
        "H_centered_nats": centered.values,
    })


def write_report(config: ExperimentConfig, prototypes: Prototypes, data: ExperimentData,
                 training: TrainingResult, samples: Sequence[ScoredSample],
                 evasion: Optional[pd.DataFrame] = None) -> Dict[str, Any]:
    """Write ``metrics/*.csv`` and return the headline numbers."""
    metrics_dir = Path(config.output_dir) / METRICS_DIR
    protos = prototype_map(prototypes)
    reports = training.reports
    headline: Dict[str, Any] = {
        "rounds": len(reports),
        "final_entropy_nats": reports[-1].entropy if reports else None,
        "converged_at": training.converged_at,
        "attack_events": len(training.events),
    }

    if len(reports) >= 2:
        write_metric_csv(metrics_dir, "entropy", _entropy_frame(reports))
        fit = trust_entropy_series(reports).fit
        write_metric_csv(metrics_dir, "entropy_fit", pd.DataFrame(
            [[fit.slope, fit.intercept, fit.r]], columns=["gamma_nats_per_round", "c_nats", "r"],
        ))
        headline["entropy_gamma"] = fit.slope
    else:
        logger.warning(json.dumps({"event": "metric_skipped", "metric": "entropy", "reason": "fewer than 2 rounds"}))

    alignment = [(r.t, r.alignment) for r in reports if r.alignment is not None]
    if alignment:
        A, dA = alignment_series(alignment)
        frame = series_frame(A, "A_inverse_distance")
        frame["dA_inverse_distance"] = dA.values
        write_metric_csv(metrics_dir, "alignment", frame)
        headline["final_alignment"] = A.values[-1]

    accuracy = seen_accuracy(samples)
    headline["seen_accuracy"] = accuracy
    headline["zds_auroc"] = zds_auroc(samples)
    headline["abstentions"] = sum(1 for s in samples if s.abstained)

    scored = [s for s in samples if s.assessment is not None]
    if scored:
        confidences = [s.assessment.confidence for s in scored]
        curve = binned_curve(
            [s.assessment.disagreement_used for s in scored], confidences, config.inference.calibration_bins,
        )
        write_metric_csv(metrics_dir, "calibration", pd.DataFrame(
            list(curve.points), columns=["bin_center_disagreement", "mean_confidence_cosine", "count"],
        ))
        headline["calibration_monotone"] = curve.monotone_decreasing
        observed = binned_curve(
            [s.assessment.observation_disagreement for s in scored], confidences, config.inference.calibration_bins,
        )
        write_metric_csv(metrics_dir, "calibration_observation", pd.DataFrame(
            list(observed.points), columns=["bin_center_observation_disagreement", "mean_confidence_cosine", "count"],
        ))

        sweep = sweep_threshold(scored)
        write_metric_csv(metrics_dir, "threshold_sweep", pd.DataFrame(
            list(sweep.curve), columns=["threshold_cosine", "detection_accuracy"],
        ))
        headline["tau_star"] = sweep.threshold
        headline["tau_star_accuracy"] = sweep.accuracy

        seen_scored = [s for s in scored if not s.is_novel]
        sim = similarity_stats([s.assessment.confidence for s in seen_scored], [s.correct for s in seen_scored])
        write_metric_csv(metrics_dir, "similarity", pd.DataFrame([
            ["correct", sim["correct_count"], sim["correct_mean"], sim["correct_std"]],
            ["incorrect", sim["incorrect_count"], sim["incorrect_mean"], sim["incorrect_std"]],
        ], columns=["group", "count", "mean_cosine", "std_cosine"]))

    stats = disagreement_stats(list(protos.values()))
    write_metric_csv(metrics_dir, "disagreement", pd.DataFrame(
        [[stats["mean"], stats["std"], stats["min"], stats["max"], len(protos)]],
        columns=["mean_l2", "std_l2", "min_l2", "max_l2", "prototypes"],
    ))

    latency, strength = encoder_statistics(config)
    write_metric_csv(metrics_dir, "latency", latency)
    write_metric_csv(metrics_dir, "semantic_strength", strength)

    clients = client_accuracy_frame(config, protos, data, training.client_matrices)
    fit = client_regression(clients["mean_disagreement"].tolist(), clients["seen_accuracy"].tolist())
    if fit is None:
        logger.warning(json.dumps({
            "event": "metric_skipped",
            "metric": "client_regression",
            "reason": "client disagreements coincide",
        }))
    else:
        headline["client_regression_slope"] = fit.slope
    clients["fit_intercept"] = None if fit is None else fit.intercept
    clients["fit_slope_per_l2"] = None if fit is None else fit.slope
    clients["fit_r"] = None if fit is None else fit.r
    write_metric_csv(metrics_dir, "client_regression", clients)

    schedule = run_loss_schedule_scenario(config=config.federation)
    write_metric_csv(metrics_dir, "entropy_schedule", _entropy_frame(schedule.reports))
    headline["schedule_converged_at"] = schedule.converged_at

    if evasion is not None and len(evasion):
        summary = (
            evasion.assign(success=evasion["attributed_after"] == evasion["target_concept"])
            .groupby("scenario", sort=True)
            .agg(samples=("sample_id", "size"), success_rate=("success", "mean"),
                 mean_zds_before=("zds_before", "mean"), mean_zds_after=("zds_after", "mean"),
                 mean_perturbation_l2=("perturbation_l2", "mean"))
            .reset_index()
        )
        write_metric_csv(metrics_dir, "evasion", summary)
        headline["evasion_success_rate"] = float(evasion["attributed_after"].eq(evasion["target_concept"]).mean())

    write_metric_csv(metrics_dir, "summary", pd.DataFrame(
        [[k, v] for k, v in headline.items()], columns=["metric", "value"],
    ))
    return headline


def run_report_stage(config: ExperimentConfig, prototypes: Optional[Prototypes] = None,
                     data: Optional[ExperimentData] = None,
                     training: Optional[TrainingResult] = None,
                     samples: Optional[Sequence[ScoredSample]] = None) -> Dict[str, Any]:
    out = Path(config.output_dir)
    with _stage("report"):
        if prototypes is None:
            prototypes = load_prototypes(out)
        if data is None:
            data = load_data(config)
        if training is None:
            training = load_training(config)
        if samples is None:
            samples = load_assessments(out)
        evasion = None
        if (out / EVASION_CSV).exists():
            evasion = read_csv(out / EVASION_CSV, dtype={
                "true_label": str, "target_concept": str,
                "attributed_before": str, "attributed_after": str,
            })
        headline = write_report(config, prototypes, data, training, samples, evasion)
    return headline


# -----------------------------------------------------------------------------
# Whole runs
# -----------------------------------------------------------------------------

def _json_ready(value: Any) -> Any:
    if isinstance(value, (np.generic,)):
        return value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_manifest(config: ExperimentConfig, headline: Mapping[str, Any]) -> Path:
    """``manifest.json`` with config hash, seed, headline numbers and file digests."""
    out = Path(config.output_dir)
    files = relative_files(out, exclude=(MANIFEST,))
    manifest = {
        "config_hash": config_hash(config),
        "seed": config.seed,
        "synthetic_data": True,
        "data_note": "features are sampled around planted concept generators; no captured traffic",
        "headline": {k: _json_ready(v) for k, v in headline.items()},
        "files": {rel: sha256_file(out / rel) for rel in files},
        "created_at": datetime.now(timezone.utc).isoformat(),
    }
    path = out / MANIFEST
    path.write_bytes(orjson.dumps(manifest, option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2))
    return path


@log_call
def run_experiment(config: ExperimentConfig) -> Dict[str, Any]:
    """All stages, optional diversity sweep, then the manifest.

    Each stage reads its inputs back from the output directory, the same
    way separate CLI invocations do, so both give byte-identical files.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(config)
    run_prototypes_stage(config)
    run_gen_stage(config)
    run_train_stage(config)
    run_infer_stage(config)
    headline = run_report_stage(config)
    if config.report.diversity_betas:
        with _stage("diversity_sweep"):
            sweep = run_diversity_sweep(config, config.report.diversity_betas, prototypes=load_prototypes(out))
            write_metric_csv(out / METRICS_DIR, "diversity_sweep", sweep.frame)
            if sweep.fit is not None:
                headline["diversity_slope"] = sweep.fit.slope
    write_manifest(config, headline)
    logger.info(json.dumps({
        "event": "experiment_complete",
        "output_dir": str(out),
        "seen_accuracy": headline.get("seen_accuracy"),
        "zds_auroc": headline.get("zds_auroc"),
    }))
    return headline


@dataclass(frozen=True)
class SweepResult:
    frame: pd.DataFrame
    fit: Optional[Any]


def run_diversity_sweep(config: ExperimentConfig, betas: Sequence[float], *,
                        prototypes: Optional[Prototypes] = None) -> SweepResult:
    """Seen accuracy against centred final trust entropy over Dirichlet betas.

    Runs in memory; nothing but the returned frame is written.
    """
    if len(betas) < 2:
        raise InvalidInputError("a diversity sweep needs at least two betas")
    if prototypes is None:
        prototypes = build_experiment_prototypes(config)
    rows = []
    for beta in betas:
        cfg = config.model_copy(update={"data": config.data.model_copy(update={"beta": float(beta)})})
        data = prepare_data(cfg, prototypes)
        training = train_federation(cfg, prototypes, data)
        samples = assess_batch(
            data.scaled_test(), training.global_matrix, prototypes,
            cfg.effective_inference(), novel=cfg.data.novel,
        )
        rows.append([float(beta), training.reports[-1].entropy, seen_accuracy(samples)])
    frame = pd.DataFrame(rows, columns=["beta", "H_final_nats", "seen_accuracy"])
    frame.insert(2, "H_centered_nats", frame["H_final_nats"] - frame["H_final_nats"].mean())
    try:
        fit = ols_fit(frame["H_centered_nats"].tolist(), frame["seen_accuracy"].tolist())
    except InvalidInputError as exc:
        logger.warning(json.dumps({"event": "metric_skipped", "metric": "diversity_fit", "reason": exc.detail}))
        fit = None
    logger.info(json.dumps({
        "event": "diversity_sweep_complete",
        "betas": [float(b) for b in betas],
        "slope": None if fit is None else fit.slope,
    }))
    return SweepResult(frame=frame, fit=fit)
