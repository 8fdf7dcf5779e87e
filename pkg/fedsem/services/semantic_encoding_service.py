"""
services/semantic_encoding_service.py
-------------------------------------

Semantic encoding of attack-concept descriptions.

Three encoders each embed one perspective (offensive, defensive,
adversarial) of a concept; the embeddings are fused by componentwise
mean into an :class:`~fedsem.models.AttackPrototype`, and the mean
pairwise L2 distance among them is kept as the prototype's
disagreement.

The default backend is :class:`StubEncoder`, a seeded model with no
network access.  Each whitespace token maps to a hash-seeded Gaussian
vector shared by all encoders plus an encoder-specific one weighted by
the profile's ``idiosyncrasy``; the text direction is their sum, so
texts that share vocabulary get correlated embeddings.  The direction is
then scaled to a norm drawn per text from the profile.  Setting
``FEDSEM_ENCODER_URL`` switches to :class:`RemoteEncoder`.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np

from fedsem.clients.encoder_client import RemoteEncoderClient
from fedsem.core.config import Settings, get_settings
from fedsem.core.errors import InvalidInputError, ShapeMismatchError
from fedsem.logging_config import log_call, logger
from fedsem.models import AttackPrototype, SemanticEmbedding
from fedsem.schemas.encoding import (
    PERSPECTIVE_ORDER,
    ConceptDescription,
    EncoderProfile,
    Perspective,
)
from fedsem.utils.seeding import rng_for

# Smallest norm a stub embedding may take.
MIN_NORM = 1e-12


def tokenize(text: str) -> List[str]:
    return text.split()


def _check_dim(k: int) -> None:
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or k < 1:
        raise InvalidInputError(f"embedding dimension must be a positive integer, got {k!r}")


def _check_text(text: str) -> None:
    if not isinstance(text, str) or not text.strip():
        raise InvalidInputError("text to encode must be non-empty")


@lru_cache(maxsize=1 << 16)
def _token_vector(seed: int, scope: str, token: str, k: int) -> np.ndarray:
    v = rng_for("token", seed, scope, token).standard_normal(k)
    v.setflags(write=False)
    return v


class EncoderBackend(Protocol):
    profile: EncoderProfile

    def encode(self, text: str, k: int) -> SemanticEmbedding: ...


class StubEncoder:
    def __init__(self, profile: EncoderProfile, seed: int) -> None:
        self.profile = profile
        self.seed = int(seed)

    def direction(self, text: str, k: int) -> np.ndarray:
        eta = self.profile.idiosyncrasy
        v = np.zeros(k)
        for tok in tokenize(text):
            v += _token_vector(self.seed, "", tok, k)
            if eta:
                v += eta * _token_vector(self.seed, self.profile.encoder_id, tok, k)
        n = np.linalg.norm(v)
        if n == 0.0 or not np.isfinite(n):
            v = rng_for("direction", self.seed, self.profile.encoder_id, text).standard_normal(k)
            n = np.linalg.norm(v)
        return v / n

    def target_norm(self, text: str) -> float:
        p = self.profile
        draw = rng_for("norm", self.seed, p.encoder_id, text).standard_normal()
        return max(p.target_norm_mean + p.target_norm_std * float(draw), MIN_NORM)

    def latency(self, token_count: int, text: str) -> float:
        p = self.profile
        noise = 0.0
        if p.latency_noise_std:
            noise = p.latency_noise_std * float(rng_for("latency", self.seed, p.encoder_id, text).standard_normal())
        return p.latency_slope * token_count + p.latency_intercept + noise

    def encode(self, text: str, k: int) -> SemanticEmbedding:
        _check_text(text)
        _check_dim(k)
        tokens = tokenize(text)
        values = self.direction(text, int(k)) * self.target_norm(text)
        return SemanticEmbedding(
            values=values,
            encoder_id=self.profile.encoder_id,
            latency_ms=self.latency(len(tokens), text),
            token_count=len(tokens),
        )


class RemoteEncoder:
    def __init__(self, profile: EncoderProfile, client: RemoteEncoderClient) -> None:
        self.profile = profile
        self.client = client

    def encode(self, text: str, k: int) -> SemanticEmbedding:
        _check_text(text)
        _check_dim(k)
        values, latency = self.client.embed(self.profile.encoder_id, text, int(k))
        return SemanticEmbedding(
            values=values,
            encoder_id=self.profile.encoder_id,
            latency_ms=latency,
            token_count=len(tokenize(text)),
        )


def resolve_backends(profiles: Sequence[EncoderProfile], seed: int, *,
                     settings: Optional[Settings] = None,
                     client: Optional[RemoteEncoderClient] = None) -> List[EncoderBackend]:
    """Stub encoders unless a remote encoder URL is configured (or a client given)."""
    settings = settings or get_settings()
    if client is None and settings.encoder_url:
        client = RemoteEncoderClient.from_settings(settings)
    if client is not None:
        logger.info(json.dumps({
            "event": "encoder_backend",
            "backend": "remote",
            "url": client.url,
            "encoders": [p.encoder_id for p in profiles],
        }))
        return [RemoteEncoder(p, client) for p in profiles]
    return [StubEncoder(p, seed) for p in profiles]


def encode(encoder: EncoderProfile, text: str, k: int, seed: int) -> SemanticEmbedding:
    """Embed ``text`` with the stub model of ``encoder``.

    Deterministic in ``(encoder_id, text, k, seed)``.
    """
    return StubEncoder(encoder, seed).encode(text, k)


def _as_array(member) -> np.ndarray:
    if isinstance(member, SemanticEmbedding):
        return member.values
    return np.asarray(member, dtype=np.float64)


def disagreement(members: Sequence) -> float:
    """Mean pairwise L2 distance among ``members``.

    Equal to the average over ordered pairs ``i != j``.  Distances are
    summed with ``math.fsum`` after sorting, so the result does not
    depend on member order.
    """
    arrays = [_as_array(m) for m in members]
    if len(arrays) < 2:
        raise InvalidInputError(f"disagreement needs at least 2 members, got {len(arrays)}")
    dim = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != dim:
            raise ShapeMismatchError(f"member dimensions differ: {dim} vs {a.shape}")
    dists = [
        float(np.linalg.norm(arrays[i] - arrays[j]))
        for i in range(len(arrays))
        for j in range(i + 1, len(arrays))
    ]
    return math.fsum(sorted(dists)) / len(dists)


def fuse(concept_id: str, members: Sequence[SemanticEmbedding]) -> AttackPrototype:
    """Build a prototype from already computed member embeddings."""
    members = tuple(members)
    if len(members) < 2:
        raise InvalidInputError(f"prototype '{concept_id}' needs at least 2 members")
    stack = np.stack([m.values for m in members])
    fused = SemanticEmbedding(values=stack.mean(axis=0), encoder_id="fused")
    return AttackPrototype(
        concept_id=concept_id,
        fused=fused,
        members=members,
        disagreement=disagreement(members),
    )


def _by_perspective(concept_id: str, descriptions: Sequence[ConceptDescription]) -> Dict[Perspective, ConceptDescription]:
    out: Dict[Perspective, ConceptDescription] = {}
    for desc in descriptions:
        if desc.concept_id != concept_id:
            raise InvalidInputError(
                f"description for '{desc.concept_id}' passed while building '{concept_id}'"
            )
        if desc.perspective in out:
            raise InvalidInputError(f"duplicate {desc.perspective.value} description for '{concept_id}'")
        out[desc.perspective] = desc
    missing = [p.value for p in PERSPECTIVE_ORDER if p not in out]
    if missing:
        raise InvalidInputError(f"concept '{concept_id}' is missing perspectives: {missing}")
    return out


def build_prototype(concept_id: str, descriptions: Sequence[ConceptDescription],
                    encoders: Sequence[EncoderProfile], k: int, seed: int, *,
                    backends: Optional[Sequence[EncoderBackend]] = None) -> AttackPrototype:
    """Encode the three perspectives of a concept and fuse them.

    offensive -> ``encoders[0]``, defensive -> ``encoders[1]``,
    adversarial -> ``encoders[2]``.
    """
    _check_dim(k)
    if len(encoders) != len(PERSPECTIVE_ORDER):
        raise InvalidInputError(f"exactly {len(PERSPECTIVE_ORDER)} encoders are required, got {len(encoders)}")
    ids = [e.encoder_id for e in encoders]
    if len(set(ids)) != len(ids):
        raise InvalidInputError(f"encoder ids must be pairwise distinct, got {ids}")
    by_perspective = _by_perspective(concept_id, descriptions)
    if backends is None:
        backends = [StubEncoder(e, seed) for e in encoders]
    members = [
        backend.encode(by_perspective[perspective].text, k)
        for perspective, backend in zip(PERSPECTIVE_ORDER, backends)
    ]
    prototype = fuse(concept_id, members)
    logger.debug(json.dumps({
        "event": "prototype_built",
        "concept_id": concept_id,
        "disagreement": prototype.disagreement,
        "fused_norm": prototype.fused.norm,
    }))
    return prototype


@log_call
def build_prototypes(descriptions: Mapping[str, Sequence[ConceptDescription]],
                     encoders: Sequence[EncoderProfile], k: int, seed: int, *,
                     backends: Optional[Sequence[EncoderBackend]] = None,
                     max_workers: Optional[int] = None) -> List[AttackPrototype]:
    """Build one prototype per concept, in the mapping's order.

    Concepts are encoded concurrently; each build is pure so the result
    does not depend on scheduling.
    """
    if backends is None:
        backends = [StubEncoder(e, seed) for e in encoders]
    concept_ids = list(descriptions)
    workers = max_workers or get_settings().max_workers
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = [
            executor.submit(build_prototype, cid, descriptions[cid], encoders, k, seed, backends=backends)
            for cid in concept_ids
        ]
        prototypes = [f.result() for f in futures]
    logger.info(json.dumps({
        "event": "prototypes_built",
        "count": len(prototypes),
        "k": k,
        "encoders": [e.encoder_id for e in encoders],
    }))
    return prototypes


def semantic_strength(embeddings: Sequence) -> Tuple[float, float]:
    """Mean and population standard deviation of the L2 norms."""
    if len(embeddings) == 0:
        raise InvalidInputError("semantic strength needs at least one embedding")
    norms = np.array([np.linalg.norm(_as_array(e)) for e in embeddings])
    return float(norms.mean()), float(norms.std())


def disagreement_stats(prototypes: Sequence[AttackPrototype]) -> Dict[str, float]:
    """Distribution of prototype disagreement (population std)."""
    if not prototypes:
        raise InvalidInputError("no prototypes given")
    values = np.array([p.disagreement for p in prototypes])
    return {
        "mean": float(values.mean()),
        "std": float(values.std()),
        "min": float(values.min()),
        "max": float(values.max()),
    }


# -----------------------------------------------------------------------------
# Synthetic text
# -----------------------------------------------------------------------------

_VOCABULARY = (
    "packet flow session host port payload header request response beacon "
    "domain query login token credential shell process registry service kernel "
    "socket handshake certificate proxy tunnel gateway firewall rule alert signature "
    "anomaly burst rate interval jitter entropy volume byte frame segment window "
    "retransmit reset timeout scan sweep exploit inject escalate persist "
    "encrypt exfiltrate stage download upload callback lateral pivot archive"
).split()

_SYLLABLES = (
    "ka ro mi tu ven sol dar pex lum qui zor bel nat fri gos hul "
    "jin kev lor mus nov pra rit sav tel ulm vor wex yad zen"
).split()


def synthetic_corpus(n: int, seed: int, *, min_tokens: int = 8, max_tokens: int = 56) -> List[str]:
    """``n`` distinct telemetry-like texts with token counts uniform on [min_tokens, max_tokens]."""
    if n < 1:
        raise InvalidInputError("corpus size must be at least 1")
    if not 1 <= min_tokens <= max_tokens:
        raise InvalidInputError("need 1 <= min_tokens <= max_tokens")
    rng = rng_for("corpus", seed)
    texts = []
    for i in range(n):
        count = int(rng.integers(min_tokens, max_tokens + 1))
        words = rng.choice(_VOCABULARY, size=count - 1)
        texts.append(" ".join([f"record{i}", *words]))
    return texts


def _pseudo_word(*parts) -> str:
    rng = rng_for("word", *parts)
    return "".join(rng.choice(_SYLLABLES, size=4))


def synthetic_descriptions(concepts: Sequence[str], novel: Sequence[str], seed: int, *,
                           core_seen: int = 12, core_novel: int = 2,
                           own_seen: int = 3, own_novel: int = 30,
                           parents: int = 4) -> Dict[str, List[ConceptDescription]]:
    """Three-perspective descriptions for every concept.

    Each text is the concept's core vocabulary followed by words of its
    own perspective.  Seen concepts share a large core across the three
    perspectives.  A novel concept is described in terms of up to
    ``parents`` seen concepts: its core borrows their cores, and each
    perspective adds many words of its own, so novel prototypes carry
    more disagreement while staying related to what was trained on.
    """
    if parents < 0:
        raise InvalidInputError(f"parents must be >= 0, got {parents}")
    novel_set = set(novel)
    seen = [c for c in concepts if c not in novel_set]
    cores = {
        cid: cid.replace("_", " ").split() + [_pseudo_word(seed, cid, "core", j) for j in range(core_seen)]
        for cid in seen
    }
    out: Dict[str, List[ConceptDescription]] = {}
    for cid in concepts:
        is_novel = cid in novel_set
        if is_novel:
            core = cid.replace("_", " ").split() + [_pseudo_word(seed, cid, "core", j) for j in range(core_novel)]
            count = min(parents, len(seen))
            if count:
                chosen = sorted(rng_for("parents", seed, cid).choice(len(seen), size=count, replace=False))
                for index in chosen:
                    core += cores[seen[int(index)]]
        else:
            core = cores[cid]
        n_own = own_novel if is_novel else own_seen
        out[cid] = [
            ConceptDescription(
                concept_id=cid,
                perspective=perspective,
                text=" ".join(core + [_pseudo_word(seed, cid, perspective.value, j) for j in range(n_own)]),
            )
            for perspective in PERSPECTIVE_ORDER
        ]
    return out


def load_descriptions(path: str | Path) -> Dict[str, List[ConceptDescription]]:
    """Read ``<concept_id>.<perspective>.txt`` files from a directory."""
    root = Path(path)
    if not root.is_dir():
        raise InvalidInputError(f"descriptions directory {root} does not exist")
    found: Dict[str, List[ConceptDescription]] = {}
    for file in sorted(root.glob("*.txt")):
        stem = file.name[: -len(".txt")]
        if "." not in stem:
            raise InvalidInputError(f"{file.name}: expected <concept_id>.<perspective>.txt")
        concept_id, perspective = stem.rsplit(".", 1)
        try:
            persp = Perspective(perspective)
        except ValueError as exc:
            raise InvalidInputError(f"{file.name}: unknown perspective '{perspective}'") from exc
        text = file.read_text(encoding="utf-8").strip()
        try:
            desc = ConceptDescription(concept_id=concept_id, perspective=persp, text=text)
        except ValueError as exc:
            raise InvalidInputError(f"{file.name}: {exc}") from exc
        found.setdefault(concept_id, []).append(desc)
    if not found:
        raise InvalidInputError(f"no description files in {root}")
    for concept_id, descs in found.items():
        _by_perspective(concept_id, descs)
    return found
