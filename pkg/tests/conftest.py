from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import pytest

from fedsem.core.config import get_settings
from fedsem.models import AttackPrototype, LocalDataset, SemanticEmbedding
from fedsem.schemas.experiment import DataConfig, EncoderSection, ExperimentConfig
from fedsem.schemas.federation import FederationConfig
from fedsem.services.semantic_encoding_service import fuse
from fedsem.utils.cache import embedding_cache


@pytest.fixture(autouse=True)
def _stub_backend(monkeypatch: pytest.MonkeyPatch):
    """Keep every test on the seeded stub encoders."""
    monkeypatch.delenv("FEDSEM_ENCODER_URL", raising=False)
    monkeypatch.delenv("FEDSEM_ENCODER_TOKEN", raising=False)
    get_settings.cache_clear()
    embedding_cache.clear()
    yield
    get_settings.cache_clear()
    embedding_cache.clear()


def make_prototype(concept_id: str, members: Sequence[Sequence[float]]) -> AttackPrototype:
    return fuse(concept_id, [SemanticEmbedding(np.asarray(m, dtype=float), f"enc{i}") for i, m in enumerate(members)])


def random_prototypes(concepts: Sequence[str], k: int, seed: int) -> Dict[str, AttackPrototype]:
    rng = np.random.default_rng(seed)
    out = {}
    for cid in concepts:
        center = rng.standard_normal(k)
        out[cid] = make_prototype(cid, [center + 0.05 * rng.standard_normal(k) for _ in range(3)])
    return out


def random_dataset(client_id: str, labels: List[str], d: int, seed: int) -> LocalDataset:
    rng = np.random.default_rng(seed)
    return LocalDataset(client_id, rng.standard_normal((len(labels), d)), tuple(labels))


@pytest.fixture
def small_config(tmp_path: Path) -> ExperimentConfig:
    """A few seconds' worth of experiment: 5 concepts, 1 novel, 3 clients."""
    return ExperimentConfig(
        data=DataConfig(
            d=12, k=16,
            concepts=["benign", "brute_force", "dns_tunneling", "port_scan", "ransomware"],
            novel=["dns_tunneling"],
            samples_per_concept=40,
        ),
        encoders=EncoderSection(corpus_size=40),
        federation=FederationConfig(num_clients=3, rounds=4),
        output_dir=str(tmp_path / "run"),
        seed=3,
    )
