"""Glue from manifests and embedding matrices to model-ready arrays."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .protocol import EncodedSplit, encode_split
from .retrieval import (
    EvidenceBundle,
    NegativeAssignment,
    RankedEvidence,
    assemble_all,
    mine_all,
    rank_all,
)
from .store import DatasetManifest, EmbeddingMatrix, Role, SynthConfig, Split, generate_synthetic, partition_manifest


@dataclass
class PreparedSplit:
    manifest: DatasetManifest
    ranked: dict[str, RankedEvidence]
    negatives: dict[str, NegativeAssignment] | None
    bundles: list[EvidenceBundle]
    data: EncodedSplit


def prepare_split(
    manifest: DatasetManifest,
    matrices: Mapping[Role, EmbeddingMatrix],
    M: int,
    K: int,
    seed: int = 0,
    with_negatives: bool = True,
) -> PreparedSplit:
    """Rank, mine negatives inside the split, and assemble bundles.

    ``with_negatives=False`` builds relevant-only bundles, the way an external
    benchmark is consumed.
    """
    ranked = rank_all(manifest.pairs, matrices)
    negatives = mine_all(manifest.pairs, matrices, ranked, M, K) if with_negatives else None
    bundles = assemble_all(manifest.pairs, ranked, negatives, M, K, seed, matrices)
    return PreparedSplit(manifest, ranked, negatives, bundles, encode_split(manifest, matrices, bundles))


def synthetic_splits(
    sizes: Mapping[str, int],
    dim: int = 64,
    sigma: float = 0.1,
    M: int = 1,
    K: int = 1,
    seed: int = 0,
    truthful_fraction: float = 0.5,
) -> dict[Split, PreparedSplit]:
    """Generate one synthetic corpus and prepare each requested split.

    A split named ``external`` gets relevant-only bundles.
    """
    config = SynthConfig(
        n_pairs=sum(sizes.values()), dim=dim, m=M, k=K, sigma=sigma,
        truthful_fraction=truthful_fraction, text_distractors=M, image_distractors=K,
    )
    manifest, matrices = generate_synthetic(config, seed)
    parts = partition_manifest(manifest, sizes)
    return {
        split: prepare_split(part, matrices, M, K, seed, with_negatives=split != Split.EXTERNAL)
        for split, part in parts.items()
    }


def corrupt_relevant(data: EncodedSplit, fraction: float, seed: int = 0) -> EncodedSplit:
    """Replace a fraction of the label-1 evidence slots with random unit vectors (labels kept)."""
    rng = np.random.default_rng(seed)
    evidence = data.evidence.copy()
    rows, cols = np.nonzero(data.relevance == 1)
    chosen = rng.random(len(rows)) < fraction
    noise = rng.standard_normal((int(chosen.sum()), evidence.shape[-1]))
    noise /= np.linalg.norm(noise, axis=-1, keepdims=True)
    evidence[rows[chosen], cols[chosen]] = noise.astype(evidence.dtype)
    out = data.subset(np.arange(len(data)))
    out.evidence = evidence
    return out
