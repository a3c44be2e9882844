"""Evidence re-ranking, hard-negative mining and bundle assembly.

Similarities are computed in float64. Zero-norm vectors have similarity 0
with everything, and every sort is stable so ties fall back to the original
pool position.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError, IoError
from .store import (
    EmbeddingMatrix,
    Role,
    VerificationPair,
    decode_embeddings,
    encode_embeddings,
)

TEXT, IMAGE = 0, 1


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DataError(f"vector lengths differ: {a.shape[0]} vs {b.shape[0]}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise DataError("non-finite input to cosine_similarity")
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def _normalized(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    if not np.isfinite(rows).all():
        raise DataError("non-finite input to similarity computation")
    norms = np.sqrt(np.einsum("...i,...i->...", rows, rows))[..., None]
    safe = np.where(norms == 0.0, 1.0, norms)
    return rows / safe


def similarities(query: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Cosine similarity of one query against every row."""
    if len(rows) == 0:
        return np.zeros(0)
    return np.clip(_normalized(rows) @ _normalized(query), -1.0, 1.0)


def _order(scores: np.ndarray) -> np.ndarray:
    """Descending by score, ascending by position on ties."""
    return np.argsort(-scores, kind="stable")


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    n = scores.shape[0]
    if k >= n:
        return _order(scores)
    neg = -scores
    kth = np.partition(neg, k - 1)[k - 1]
    candidates = np.flatnonzero(neg <= kth)
    ranked = candidates[np.argsort(neg[candidates], kind="stable")]
    return ranked[:k]


# --------------------------------------------------------------------------
# ranking


@dataclass(frozen=True)
class RankedEvidence:
    pair_id: str
    ranked_text_ids: tuple[str, ...]
    ranked_image_ids: tuple[str, ...]
    text_scores: np.ndarray
    image_scores: np.ndarray

    def to_json(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "ranked_text_ids": list(self.ranked_text_ids),
            "ranked_image_ids": list(self.ranked_image_ids),
            "text_scores": self.text_scores.tolist(),
            "image_scores": self.image_scores.tolist(),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "RankedEvidence":
        return cls(
            pair_id=obj["pair_id"],
            ranked_text_ids=tuple(obj["ranked_text_ids"]),
            ranked_image_ids=tuple(obj["ranked_image_ids"]),
            text_scores=np.asarray(obj["text_scores"], dtype=np.float64),
            image_scores=np.asarray(obj["image_scores"], dtype=np.float64),
        )


def rank_relevant(pair: VerificationPair, matrices: Mapping[Role, EmbeddingMatrix]) -> RankedEvidence:
    ranked = {}
    for claim_role, ev_role, claim_id, pool in (
        (Role.TEXT_CLAIM, Role.TEXT_EVIDENCE, pair.text_id, pair.candidate_text_evidence),
        (Role.IMAGE_CLAIM, Role.IMAGE_EVIDENCE, pair.image_id, pair.candidate_image_evidence),
    ):
        claim = matrices[claim_role].row(claim_id)
        rows = matrices[ev_role].take(pool)
        scores = similarities(claim, rows)
        order = _order(scores)
        ranked[ev_role] = (tuple(pool[j] for j in order), scores[order])
    return RankedEvidence(
        pair_id=pair.pair_id,
        ranked_text_ids=ranked[Role.TEXT_EVIDENCE][0],
        ranked_image_ids=ranked[Role.IMAGE_EVIDENCE][0],
        text_scores=ranked[Role.TEXT_EVIDENCE][1],
        image_scores=ranked[Role.IMAGE_EVIDENCE][1],
    )


def rank_all(pairs: Iterable[VerificationPair], matrices: Mapping[Role, EmbeddingMatrix]) -> dict[str, RankedEvidence]:
    return {p.pair_id: rank_relevant(p, matrices) for p in pairs}


# --------------------------------------------------------------------------
# neighbor index


class NeighborIndex:
    """Exact cosine top-k over a fixed set of rows.

    ``mode="exact"`` scores all rows with one matrix product; ``mode="scan"``
    is the reference linear scan calling :func:`cosine_similarity` row by row.
    Both break ties by row position.
    """

    def __init__(self, rows: np.ndarray, ids: Sequence[str], mode: str = "exact"):
        if mode not in ("exact", "scan"):
            raise ConfigError(f"unknown index mode {mode!r}")
        rows = np.asarray(rows)
        if rows.ndim != 2 or rows.shape[0] == 0:
            raise ConfigError("cannot index an empty matrix")
        self.mode = mode
        self.ids = tuple(ids)
        self._raw = rows
        self._unit = _normalized(rows)
        self._unit.flags.writeable = False

    def __len__(self) -> int:
        return len(self.ids)

    def scores(self, query: np.ndarray) -> np.ndarray:
        if self.mode == "scan":
            return np.array([cosine_similarity(query, row) for row in self._raw])
        return np.clip(self._unit @ _normalized(query), -1.0, 1.0)

    def query(self, vector: np.ndarray, k: int = 1) -> list[tuple[str, float]]:
        if k < 1:
            raise ConfigError(f"k must be positive, got {k}")
        scores = self.scores(vector)
        return [(self.ids[j], float(scores[j])) for j in _top_k(scores, k)]

    def query_positions(self, vector: np.ndarray, k: int = 1) -> np.ndarray:
        return _top_k(self.scores(vector), k)


def build_index(matrix: EmbeddingMatrix | np.ndarray, ids: Sequence[str] | None = None, mode: str = "exact") -> NeighborIndex:
    if isinstance(matrix, EmbeddingMatrix):
        return NeighborIndex(matrix.rows, matrix.ids, mode)
    if ids is None:
        ids = [str(i) for i in range(len(matrix))]
    return NeighborIndex(matrix, ids, mode)


@dataclass(frozen=True)
class ClaimIndices:
    """Indices over the claim texts and claim images of a pair collection, keyed by pair id."""

    text: NeighborIndex
    image: NeighborIndex


def build_claim_indices(pairs: Sequence[VerificationPair], matrices: Mapping[Role, EmbeddingMatrix], mode: str = "exact") -> ClaimIndices:
    ids = [p.pair_id for p in pairs]
    texts = matrices[Role.TEXT_CLAIM].take(p.text_id for p in pairs)
    images = matrices[Role.IMAGE_CLAIM].take(p.image_id for p in pairs)
    return ClaimIndices(text=NeighborIndex(texts, ids, mode), image=NeighborIndex(images, ids, mode))


# --------------------------------------------------------------------------
# hard negatives


@dataclass(frozen=True)
class NegativeAssignment:
    pair_id: str
    donor_pair_id_for_images: str  # nearest other claim text
    donor_pair_id_for_texts: str  # nearest other claim image
    negative_text_ids: tuple[str, ...]
    negative_image_ids: tuple[str, ...]

    def to_json(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "donor_pair_id_for_images": self.donor_pair_id_for_images,
            "donor_pair_id_for_texts": self.donor_pair_id_for_texts,
            "negative_text_ids": list(self.negative_text_ids),
            "negative_image_ids": list(self.negative_image_ids),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "NegativeAssignment":
        return cls(
            pair_id=obj["pair_id"],
            donor_pair_id_for_images=obj["donor_pair_id_for_images"],
            donor_pair_id_for_texts=obj["donor_pair_id_for_texts"],
            negative_text_ids=tuple(obj["negative_text_ids"]),
            negative_image_ids=tuple(obj["negative_image_ids"]),
        )


def _nearest_other(index: NeighborIndex, position: int) -> int:
    for j in index.query_positions(index._raw[position], k=2):
        if j != position:
            return int(j)
    raise ConfigError("hard-negative mining needs at least two pairs")


def _assignment(pair_id: str, image_donor: str, text_donor: str, ranked: Mapping[str, RankedEvidence],
                m: int | None, k: int | None) -> NegativeAssignment:
    try:
        texts = ranked[text_donor].ranked_text_ids
        images = ranked[image_donor].ranked_image_ids
    except KeyError as exc:
        raise DataError(f"no ranked evidence for donor pair {exc.args[0]!r}") from None
    return NegativeAssignment(
        pair_id=pair_id,
        donor_pair_id_for_images=image_donor,
        donor_pair_id_for_texts=text_donor,
        negative_text_ids=tuple(texts if m is None else texts[:m]),
        negative_image_ids=tuple(images if k is None else images[:k]),
    )


def mine_hard_negatives(
    pair: VerificationPair,
    all_pairs: Sequence[VerificationPair],
    indices: ClaimIndices,
    ranked: Mapping[str, RankedEvidence],
    m: int | None = None,
    k: int | None = None,
) -> NegativeAssignment:
    """Borrow the ranked evidence of the most similar other claim.

    Image negatives come from the pair whose claim text is closest to ours,
    text negatives from the pair whose claim image is closest.
    """
    if len(all_pairs) < 2:
        raise ConfigError("hard-negative mining needs at least two pairs")
    position = indices.text.ids.index(pair.pair_id)
    image_donor = indices.text.ids[_nearest_other(indices.text, position)]
    text_donor = indices.image.ids[_nearest_other(indices.image, position)]
    return _assignment(pair.pair_id, image_donor, text_donor, ranked, m, k)


def _nearest_others(rows: np.ndarray, block: int = 1024) -> np.ndarray:
    unit = _normalized(rows)
    n = len(unit)
    out = np.empty(n, dtype=np.int64)
    for start in range(0, n, block):
        stop = min(start + block, n)
        scores = unit[start:stop] @ unit.T
        scores[np.arange(stop - start), np.arange(start, stop)] = -np.inf
        out[start:stop] = np.argmax(scores, axis=1)
    return out


def mine_all(
    pairs: Sequence[VerificationPair],
    matrices: Mapping[Role, EmbeddingMatrix],
    ranked: Mapping[str, RankedEvidence],
    m: int | None = None,
    k: int | None = None,
) -> dict[str, NegativeAssignment]:
    """Blocked all-pairs version of :func:`mine_hard_negatives`."""
    if len(pairs) < 2:
        raise ConfigError("hard-negative mining needs at least two pairs")
    texts = matrices[Role.TEXT_CLAIM].take(p.text_id for p in pairs)
    images = matrices[Role.IMAGE_CLAIM].take(p.image_id for p in pairs)
    by_text = _nearest_others(texts)
    by_image = _nearest_others(images)
    return {
        p.pair_id: _assignment(p.pair_id, pairs[by_text[i]].pair_id, pairs[by_image[i]].pair_id, ranked, m, k)
        for i, p in enumerate(pairs)
    }


# --------------------------------------------------------------------------
# bundles


@dataclass(frozen=True)
class EvidenceBundle:
    pair_id: str
    evidence_features: np.ndarray  # (slots, dim), shuffled
    relevance_labels: np.ndarray  # (slots,) 0/1
    permutation: np.ndarray  # shuffled slot i came from unshuffled slot permutation[i]
    modality_tags: np.ndarray  # TEXT or IMAGE per slot
    padded_flags: np.ndarray  # True where the slot was filled by random sampling
    evidence_ids: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.relevance_labels)

    def unshuffled(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Features, labels and modality tags in pre-shuffle order."""
        inverse = np.argsort(self.permutation)
        return (
            self.evidence_features[inverse],
            self.relevance_labels[inverse],
            self.modality_tags[inverse],
        )

    def slot_tags(self) -> list[str]:
        """Human-readable tag per slot, e.g. ``"T+"`` or ``"I-"``."""
        return [
            ("T" if mod == TEXT else "I") + ("+" if lab else "-")
            for mod, lab in zip(self.modality_tags, self.relevance_labels)
        ]

    def sidecar(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "relevance_labels": self.relevance_labels.tolist(),
            "permutation": self.permutation.tolist(),
            "modality_tags": self.modality_tags.tolist(),
            "padded_flags": self.padded_flags.astype(int).tolist(),
            "evidence_ids": list(self.evidence_ids),
        }


def derive_seed(global_seed: int, pair_id: str) -> int:
    digest = hashlib.blake2b(f"{global_seed}:{pair_id}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def assemble_bundle(
    pair: VerificationPair,
    ranked: RankedEvidence,
    negatives: NegativeAssignment | None,
    M: int,
    K: int,
    rng_seed: int,
    matrices: Mapping[Role, EmbeddingMatrix],
    shuffle: bool = True,
) -> EvidenceBundle:
    """Stack [T+, I+, T-, I-] slots, pad shortfalls at random, then permute.

    With ``negatives=None`` only the relevant slots are built, which is how
    external benchmarks are consumed at inference time.
    """
    if M < 0 or K < 0 or M + K < 1:
        raise ConfigError(f"need M, K >= 0 and M + K >= 1, got M={M}, K={K}")
    rng = np.random.default_rng(rng_seed)
    groups = [
        (ranked.ranked_text_ids, M, TEXT, 1),
        (ranked.ranked_image_ids, K, IMAGE, 1),
    ]
    if negatives is not None:
        groups += [
            (negatives.negative_text_ids, M, TEXT, 0),
            (negatives.negative_image_ids, K, IMAGE, 0),
        ]
    features, labels, tags, padded, ids = [], [], [], [], []
    for pool, want, modality, label in groups:
        matrix = matrices[Role.TEXT_EVIDENCE if modality == TEXT else Role.IMAGE_EVIDENCE]
        chosen = list(pool[:want])
        filled = [False] * len(chosen)
        shortfall = want - len(chosen)
        if shortfall > 0:
            if len(matrix) == 0:
                raise DataError(f"pair {pair.pair_id!r}: {matrix.role.label} pool is empty, cannot pad")
            picks = rng.integers(0, len(matrix), size=shortfall)
            chosen += [matrix.ids[j] for j in picks]
            filled += [True] * shortfall
        features.append(matrix.take(chosen))
        labels += [label] * want
        tags += [modality] * want
        padded += filled
        ids += chosen
    stacked = np.concatenate(features).astype(np.float32)
    n = len(labels)
    perm = rng.permutation(n) if shuffle else np.arange(n)
    return EvidenceBundle(
        pair_id=pair.pair_id,
        evidence_features=stacked[perm],
        relevance_labels=np.asarray(labels, dtype=np.int64)[perm],
        permutation=perm.astype(np.int64),
        modality_tags=np.asarray(tags, dtype=np.int64)[perm],
        padded_flags=np.asarray(padded, dtype=bool)[perm],
        evidence_ids=tuple(ids[j] for j in perm),
    )


def assemble_all(
    pairs: Sequence[VerificationPair],
    ranked: Mapping[str, RankedEvidence],
    negatives: Mapping[str, NegativeAssignment] | None,
    M: int,
    K: int,
    seed: int,
    matrices: Mapping[Role, EmbeddingMatrix],
) -> list[EvidenceBundle]:
    return [
        assemble_bundle(
            p, ranked[p.pair_id], None if negatives is None else negatives[p.pair_id],
            M, K, derive_seed(seed, p.pair_id), matrices,
        )
        for p in pairs
    ]


def save_bundles(bundles: Sequence[EvidenceBundle], path: str | os.PathLike, M: int, K: int) -> None:
    """Write ``<path>`` (embedding container) and ``<path>.json`` (labels and permutations)."""
    if not bundles:
        raise DataError("no bundles to save")
    dim = bundles[0].evidence_features.shape[1]
    rows = np.concatenate([b.evidence_features for b in bundles])
    ids = tuple(f"{b.pair_id}#{s}" for b in bundles for s in range(len(b)))
    container = EmbeddingMatrix(role=Role.BUNDLE_EVIDENCE, dim=dim, rows=rows, ids=ids)
    sidecar = {
        "M": M,
        "K": K,
        "dim": dim,
        "slots_per_pair": sorted({len(b) for b in bundles}),
        "pairs": [b.sidecar() for b in bundles],
    }
    path = Path(path)
    try:
        path.write_bytes(encode_embeddings(container))
        Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_bundles(path: str | os.PathLike) -> tuple[list[EvidenceBundle], dict]:
    path = Path(path)
    try:
        container = decode_embeddings(path.read_bytes(), Role.BUNDLE_EVIDENCE)
        sidecar = json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    bundles, offset = [], 0
    for entry in sidecar["pairs"]:
        n = len(entry["relevance_labels"])
        if offset + n > len(container):
            raise FormatError("bundle sidecar describes more slots than the container holds")
        bundles.append(
            EvidenceBundle(
                pair_id=entry["pair_id"],
                evidence_features=np.array(container.rows[offset:offset + n]),
                relevance_labels=np.asarray(entry["relevance_labels"], dtype=np.int64),
                permutation=np.asarray(entry["permutation"], dtype=np.int64),
                modality_tags=np.asarray(entry["modality_tags"], dtype=np.int64),
                padded_flags=np.asarray(entry["padded_flags"], dtype=bool),
                evidence_ids=tuple(entry["evidence_ids"]),
            )
        )
        offset += n
    if offset != len(container):
        raise FormatError("bundle container holds slots not described by the sidecar")
    meta = {k: v for k, v in sidecar.items() if k != "pairs"}
    return bundles, meta
