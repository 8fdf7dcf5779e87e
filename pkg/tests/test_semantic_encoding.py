from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest

from fedsem.core.errors import InvalidInputError, ShapeMismatchError
from fedsem.models import SemanticEmbedding
from fedsem.schemas.encoding import (
    DEEPSEEK_V3,
    DEFAULT_PROFILES,
    GPT4O,
    LLAMA3_8B,
    ConceptDescription,
    EncoderProfile,
    Perspective,
)
from fedsem.services.semantic_encoding_service import (
    StubEncoder,
    build_prototype,
    build_prototypes,
    disagreement,
    disagreement_stats,
    encode,
    fuse,
    load_descriptions,
    semantic_strength,
    synthetic_corpus,
    synthetic_descriptions,
)
from tests.conftest import make_prototype

UNIT = EncoderProfile(encoder_id="unit", target_norm_mean=1.0, target_norm_std=0.0)


def _descriptions(concept_id: str = "port_scan"):
    return [
        ConceptDescription(concept_id=concept_id, perspective=Perspective.offensive, text="sweep many ports quickly"),
        ConceptDescription(concept_id=concept_id, perspective=Perspective.defensive, text="many resets from one host"),
        ConceptDescription(concept_id=concept_id, perspective=Perspective.adversarial, text="slow randomised port order"),
    ]


class _ConstantBackend:
    def __init__(self, encoder_id: str, values) -> None:
        self.profile = EncoderProfile(encoder_id=encoder_id, target_norm_mean=1.0)
        self.values = np.asarray(values, dtype=float)

    def encode(self, text: str, k: int) -> SemanticEmbedding:
        return SemanticEmbedding(self.values, self.profile.encoder_id)


def test_zero_variance_profile_gives_exact_norm() -> None:
    e = encode(UNIT, "failed login burst", 4, seed=1)
    assert e.dim == 4
    assert e.norm == pytest.approx(1.0, abs=1e-9)


def test_encode_is_deterministic() -> None:
    a = encode(GPT4O, "beacon every sixty seconds", 64, seed=7)
    b = encode(GPT4O, "beacon every sixty seconds", 64, seed=7)
    assert np.array_equal(a.values, b.values)
    assert a.latency_ms == b.latency_ms


def test_encode_depends_on_encoder_and_seed() -> None:
    a = encode(GPT4O, "beacon every sixty seconds", 16, seed=7)
    assert not np.array_equal(a.values, encode(DEEPSEEK_V3, "beacon every sixty seconds", 16, seed=7).values)
    assert not np.array_equal(a.values, encode(GPT4O, "beacon every sixty seconds", 16, seed=8).values)


@pytest.mark.parametrize("text, k", [("", 4), ("   ", 4), ("ok", 0)])
def test_encode_rejects_bad_input(text: str, k: int) -> None:
    with pytest.raises(InvalidInputError):
        encode(GPT4O, text, k, seed=0)


def test_latency_follows_token_count_without_noise() -> None:
    profile = EncoderProfile(encoder_id="quiet", target_norm_mean=1.0, latency_slope=2.0, latency_intercept=10.0)
    e = encode(profile, "one two three four five", 8, seed=0)
    assert e.token_count == 5
    assert e.latency_ms == pytest.approx(20.0)


def test_shared_vocabulary_correlates_directions() -> None:
    enc = StubEncoder(GPT4O, 0)
    base = enc.direction("dns query burst to rare domain", 64)
    close = enc.direction("dns query burst to rare domain again", 64)
    far = enc.direction("ransom note encrypts shares", 64)
    assert base @ close > base @ far


@pytest.mark.parametrize("profile", [GPT4O, DEEPSEEK_V3])
def test_corpus_norm_mean_matches_profile(profile: EncoderProfile) -> None:
    corpus = synthetic_corpus(1000, seed=0)
    encoder = StubEncoder(profile, 0)
    mean, std = semantic_strength([encoder.encode(t, 32) for t in corpus])
    standard_error = profile.target_norm_std / math.sqrt(len(corpus))
    assert abs(mean - profile.target_norm_mean) < 3 * standard_error
    assert std == pytest.approx(profile.target_norm_std, rel=0.15)


def test_corpus_norm_ordering() -> None:
    corpus = synthetic_corpus(1000, seed=1)
    means = {p.encoder_id: semantic_strength([StubEncoder(p, 1).encode(t, 16) for t in corpus])[0]
             for p in DEFAULT_PROFILES}
    assert means[LLAMA3_8B.encoder_id] > means[GPT4O.encoder_id] > means[DEEPSEEK_V3.encoder_id]


def test_fuse_is_componentwise_mean() -> None:
    p = make_prototype("a", [[1, 0], [0, 1], [1, 1]])
    assert np.allclose(p.fused.values, [2 / 3, 2 / 3], atol=1e-12)


def test_disagreement_examples() -> None:
    assert disagreement([[1.0, 2.0]] * 3) == 0.0
    assert disagreement([[0, 0], [3, 4]]) == pytest.approx(5.0)
    assert disagreement([[0, 0], [1, 0], [0, 1]]) == pytest.approx((2 + math.sqrt(2)) / 3, abs=1e-6)


def test_disagreement_is_permutation_invariant_and_homogeneous() -> None:
    rng = np.random.default_rng(3)
    members = [rng.standard_normal(8) for _ in range(4)]
    D = disagreement(members)
    assert disagreement(members[::-1]) == D
    assert disagreement([m * 2.5 for m in members]) == pytest.approx(2.5 * D, abs=1e-9)


def test_disagreement_errors() -> None:
    with pytest.raises(InvalidInputError):
        disagreement([[1.0, 0.0]])
    with pytest.raises(ShapeMismatchError):
        disagreement([[1.0, 0.0], [1.0, 0.0, 0.0]])


def test_identical_members_give_zero_disagreement() -> None:
    e = [0.5, -0.25, 1.0]
    backends = [_ConstantBackend(name, e) for name in ("a", "b", "c")]
    proto = build_prototype("port_scan", _descriptions(), [b.profile for b in backends], 3, 0, backends=backends)
    assert np.array_equal(proto.fused.values, e)
    assert proto.disagreement == 0.0


def test_build_prototype_pairs_perspectives_with_encoders() -> None:
    proto = build_prototype("port_scan", _descriptions()[::-1], list(DEFAULT_PROFILES), 16, 0)
    assert proto.encoder_ids == tuple(p.encoder_id for p in DEFAULT_PROFILES)
    expected = StubEncoder(GPT4O, 0).encode("sweep many ports quickly", 16)
    assert np.array_equal(proto.members[0].values, expected.values)
    mean = np.mean([m.values for m in proto.members], axis=0)
    assert np.max(np.abs(proto.fused.values - mean)) < 1e-12


def test_build_prototype_errors() -> None:
    with pytest.raises(InvalidInputError, match="missing perspectives"):
        build_prototype("port_scan", _descriptions()[:2], list(DEFAULT_PROFILES), 8, 0)
    with pytest.raises(InvalidInputError, match="distinct"):
        build_prototype("port_scan", _descriptions(), [GPT4O, GPT4O, LLAMA3_8B], 8, 0)


def test_build_prototypes_is_schedule_independent() -> None:
    descs = synthetic_descriptions(["a", "b", "c", "d"], ["d"], seed=2)
    one = build_prototypes(descs, list(DEFAULT_PROFILES), 16, 2, max_workers=1)
    many = build_prototypes(descs, list(DEFAULT_PROFILES), 16, 2, max_workers=4)
    assert [p.concept_id for p in one] == ["a", "b", "c", "d"]
    for p, q in zip(one, many):
        assert np.array_equal(p.fused.values, q.fused.values)
        assert p.disagreement == q.disagreement


def test_novel_descriptions_disagree_more() -> None:
    concepts = ["benign", "port_scan", "ransomware", "zero_a", "zero_b"]
    descs = synthetic_descriptions(concepts, ["zero_a", "zero_b"], seed=0)
    protos = {p.concept_id: p for p in build_prototypes(descs, list(DEFAULT_PROFILES), 64, 0)}
    seen_max = max(protos[c].disagreement for c in ("benign", "port_scan", "ransomware"))
    novel_min = min(protos[c].disagreement for c in ("zero_a", "zero_b"))
    assert novel_min > seen_max


def test_novel_descriptions_borrow_seen_cores() -> None:
    concepts = ["benign", "port_scan", "ransomware", "zero_a"]
    descs = synthetic_descriptions(concepts, ["zero_a"], seed=1, parents=2)
    cores = {
        c: set.intersection(*(set(d.text.split()) for d in descs[c]))
        for c in ("benign", "port_scan", "ransomware")
    }
    novel_core = set.intersection(*(set(d.text.split()) for d in descs["zero_a"]))
    borrowed = [c for c, core in cores.items() if core <= novel_core]
    assert len(borrowed) == 2
    assert {"zero", "a"} <= novel_core
    assert descs == synthetic_descriptions(concepts, ["zero_a"], seed=1, parents=2)
    with pytest.raises(InvalidInputError):
        synthetic_descriptions(concepts, ["zero_a"], seed=1, parents=-1)


def test_semantic_strength_examples() -> None:
    assert semantic_strength([[2.0, 0.0], [0.0, 2.0]]) == (2.0, 0.0)
    assert semantic_strength([[1.0], [3.0]]) == pytest.approx((2.0, 1.0))
    with pytest.raises(InvalidInputError):
        semantic_strength([])


def test_disagreement_stats() -> None:
    protos = [fuse("a", [SemanticEmbedding(np.zeros(2), "x"), SemanticEmbedding(np.array([3.0, 4.0]), "y")]),
              make_prototype("b", [[0, 0], [0, 0]])]
    stats = disagreement_stats(protos)
    assert stats == {"mean": 2.5, "std": 2.5, "min": 0.0, "max": 5.0}


def test_load_descriptions(tmp_path: Path) -> None:
    for d in _descriptions():
        (tmp_path / f"{d.concept_id}.{d.perspective.value}.txt").write_text(d.text + "\n", encoding="utf-8")
    loaded = load_descriptions(tmp_path)
    assert list(loaded) == ["port_scan"]
    assert {d.perspective for d in loaded["port_scan"]} == set(Perspective)
    assert "sweep many ports quickly" in {d.text for d in loaded["port_scan"]}


def test_load_descriptions_rejects_unknown_perspective(tmp_path: Path) -> None:
    (tmp_path / "port_scan.sideways.txt").write_text("x", encoding="utf-8")
    with pytest.raises(InvalidInputError, match="unknown perspective"):
        load_descriptions(tmp_path)


def test_load_descriptions_requires_all_perspectives(tmp_path: Path) -> None:
    (tmp_path / "port_scan.offensive.txt").write_text("sweep", encoding="utf-8")
    with pytest.raises(InvalidInputError, match="missing perspectives"):
        load_descriptions(tmp_path)
