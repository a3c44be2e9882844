"""Embedding matrices, dataset manifests and the synthetic dataset generator.

Embeddings are kept raw (never normalized here) as little-endian float32.
"""

from __future__ import annotations

import enum
import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError, DataError, FormatError, IoError

MAGIC = b"REDE"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHBIQ")


class Role(enum.IntEnum):
    TEXT_CLAIM = 0
    IMAGE_CLAIM = 1
    TEXT_EVIDENCE = 2
    IMAGE_EVIDENCE = 3
    # container reuse for assembled evidence bundles
    BUNDLE_EVIDENCE = 4

    @classmethod
    def parse(cls, value: "Role | str | int") -> "Role":
        if isinstance(value, Role):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ConfigError(f"unknown role {value!r}") from None
        return cls(value)

    @property
    def label(self) -> str:
        return self.name.lower()


class Split(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"
    EXTERNAL = "external"


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """Dense feature rows of one role, addressed by opaque string ids."""

    role: Role
    dim: int
    rows: np.ndarray
    ids: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        role = Role.parse(self.role)
        object.__setattr__(self, "role", role)
        if int(self.dim) <= 0:
            raise DataError(f"dim must be positive, got {self.dim}")
        rows = np.ascontiguousarray(self.rows, dtype="<f4")
        if rows.ndim == 1 and rows.size == 0:
            rows = rows.reshape(0, self.dim)
        if rows.ndim != 2 or rows.shape[1] != self.dim:
            raise DataError(f"rows must have shape (N, {self.dim}), got {rows.shape}")
        ids = tuple(str(i) for i in self.ids)
        if len(ids) != rows.shape[0]:
            raise DataError(f"{len(ids)} ids for {rows.shape[0]} rows")
        index = {}
        for pos, ident in enumerate(ids):
            if ident in index:
                raise DataError(f"duplicate id {ident!r} in {role.label} matrix")
            if "\x00" in ident:
                raise DataError(f"id {ident!r} contains a NUL byte")
            index[ident] = pos
        if not np.isfinite(rows).all():
            bad = int(np.argwhere(~np.isfinite(rows))[0, 0])
            raise DataError(f"non-finite value in row {ids[bad]!r}")
        rows.flags.writeable = False
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "dim", int(self.dim))
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, ident: str) -> bool:
        return ident in self._index

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return (
            self.role == other.role
            and self.dim == other.dim
            and self.ids == other.ids
            and np.array_equal(self.rows.view(np.uint32), other.rows.view(np.uint32))
        )

    def position(self, ident: str) -> int:
        try:
            return self._index[ident]
        except KeyError:
            raise DataError(f"id {ident!r} not found in {self.role.label} matrix") from None

    def row(self, ident: str) -> np.ndarray:
        return self.rows[self.position(ident)]

    def take(self, ids: Iterable[str]) -> np.ndarray:
        positions = [self.position(i) for i in ids]
        return self.rows[positions] if positions else np.zeros((0, self.dim), dtype=np.float32)


@dataclass(frozen=True)
class VerificationPair:
    pair_id: str
    text_id: str
    image_id: str
    verdict: int
    candidate_text_evidence: tuple[str, ...] = ()
    candidate_image_evidence: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.verdict not in (0, 1):
            raise DataError(f"pair {self.pair_id!r}: verdict must be 0 or 1, got {self.verdict!r}")
        object.__setattr__(self, "candidate_text_evidence", tuple(self.candidate_text_evidence))
        object.__setattr__(self, "candidate_image_evidence", tuple(self.candidate_image_evidence))

    def to_json(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "text_id": self.text_id,
            "image_id": self.image_id,
            "verdict": self.verdict,
            "candidate_text_evidence": list(self.candidate_text_evidence),
            "candidate_image_evidence": list(self.candidate_image_evidence),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "VerificationPair":
        expected = {
            "pair_id", "text_id", "image_id", "verdict",
            "candidate_text_evidence", "candidate_image_evidence",
        }
        if set(obj) != expected:
            raise FormatError(f"pair fields must be exactly {sorted(expected)}, got {sorted(obj)}")
        return cls(
            pair_id=str(obj["pair_id"]),
            text_id=str(obj["text_id"]),
            image_id=str(obj["image_id"]),
            verdict=int(obj["verdict"]),
            candidate_text_evidence=tuple(obj["candidate_text_evidence"]),
            candidate_image_evidence=tuple(obj["candidate_image_evidence"]),
        )


@dataclass
class DatasetManifest:
    split: Split
    pairs: list[VerificationPair]
    dim: int
    provenance: str = ""

    def __post_init__(self) -> None:
        self.split = Split(self.split)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def pair_ids(self) -> list[str]:
        return [p.pair_id for p in self.pairs]


# --------------------------------------------------------------------------
# binary embedding container


def header_size(ids: Iterable[str]) -> int:
    """Bytes preceding the float payload: fixed header plus NUL-terminated ids."""
    return _HEADER.size + sum(len(i.encode("utf-8")) + 1 for i in ids)


def encode_embeddings(matrix: EmbeddingMatrix) -> bytes:
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, FORMAT_VERSION, int(matrix.role), matrix.dim, len(matrix)))
    for ident in matrix.ids:
        buf.write(ident.encode("utf-8") + b"\x00")
    buf.write(matrix.rows.astype("<f4", copy=False).tobytes(order="C"))
    return buf.getvalue()


def decode_embeddings(data: bytes, role: Role | str | None = None) -> EmbeddingMatrix:
    if len(data) < _HEADER.size:
        raise FormatError("file shorter than the fixed header")
    magic, version, role_code, dim, n = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    try:
        stored_role = Role(role_code)
    except ValueError:
        raise FormatError(f"unknown role code {role_code}") from None
    if role is not None and Role.parse(role) != stored_role:
        raise FormatError(f"file holds {stored_role.label}, expected {Role.parse(role).label}")
    if dim == 0:
        raise FormatError("dim must be positive")
    offset = _HEADER.size
    ids = []
    for _ in range(n):
        end = data.find(b"\x00", offset)
        if end < 0:
            raise FormatError("truncated id table")
        try:
            ids.append(data[offset:end].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"id is not valid UTF-8: {exc}") from None
        offset = end + 1
    payload = n * dim * 4
    if len(data) - offset != payload:
        raise FormatError(f"expected {payload} payload bytes, found {len(data) - offset}")
    rows = np.frombuffer(data, dtype="<f4", count=n * dim, offset=offset).reshape(n, dim).copy()
    return EmbeddingMatrix(role=stored_role, dim=dim, rows=rows, ids=tuple(ids))


def load_embeddings(path: str | os.PathLike, role: Role | str | None = None) -> EmbeddingMatrix:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return decode_embeddings(data, role)


def save_embeddings(matrix: EmbeddingMatrix, path: str | os.PathLike) -> None:
    try:
        Path(path).write_bytes(encode_embeddings(matrix))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# --------------------------------------------------------------------------
# manifests


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    path = Path(path)
    lines = [json.dumps(p.to_json(), sort_keys=True) for p in manifest.pairs]
    meta = {"split": manifest.split.value, "dim": manifest.dim, "provenance": manifest.provenance}
    try:
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        _meta_path(path).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_manifest(path: str | os.PathLike, split: Split | str | None = None, dim: int | None = None) -> DatasetManifest:
    """Read an NDJSON manifest; split/dim come from the ``.meta.json`` sidecar when present."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    meta = {}
    if _meta_path(path).exists():
        meta = json.loads(_meta_path(path).read_text(encoding="utf-8"))
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        pairs.append(VerificationPair.from_json(obj))
    split = split or meta.get("split")
    dim = dim or meta.get("dim")
    if split is None or dim is None:
        raise FormatError(f"{path}: split/dim missing (no sidecar and no explicit values)")
    return DatasetManifest(split=Split(split), pairs=pairs, dim=int(dim), provenance=meta.get("provenance", ""))


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Finding:
    kind: str  # dangling_id | dim_mismatch | duplicate_pair_id | duplicate_evidence | missing_matrix | split_overlap
    subject: str
    detail: str


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)
    # duplicate evidence inside one pool is reported but does not block use
    warnings: list[Finding] = field(default_factory=list)

    @property
    def usable(self) -> bool:
        return not self.findings

    def __len__(self) -> int:
        return len(self.findings)

    def to_json(self) -> dict:
        return {
            "usable": self.usable,
            "findings": [vars(f) for f in self.findings],
            "warnings": [vars(f) for f in self.warnings],
        }


def validate_dataset(manifest: DatasetManifest, matrices: Mapping[Role, EmbeddingMatrix]) -> ValidationReport:
    report = ValidationReport()
    matrices = {Role.parse(r): m for r, m in matrices.items()}
    needed = (Role.TEXT_CLAIM, Role.IMAGE_CLAIM, Role.TEXT_EVIDENCE, Role.IMAGE_EVIDENCE)
    for role in needed:
        if role not in matrices:
            report.findings.append(Finding("missing_matrix", role.label, "no matrix supplied"))
    for role, matrix in sorted(matrices.items()):
        if matrix.dim != manifest.dim:
            report.findings.append(
                Finding("dim_mismatch", role.label, f"matrix dim {matrix.dim} != manifest dim {manifest.dim}")
            )

    seen: set[str] = set()
    for pair in manifest.pairs:
        if pair.pair_id in seen:
            report.findings.append(Finding("duplicate_pair_id", pair.pair_id, "pair_id appears more than once"))
        seen.add(pair.pair_id)
        refs = [
            (Role.TEXT_CLAIM, [pair.text_id]),
            (Role.IMAGE_CLAIM, [pair.image_id]),
            (Role.TEXT_EVIDENCE, pair.candidate_text_evidence),
            (Role.IMAGE_EVIDENCE, pair.candidate_image_evidence),
        ]
        for role, ids in refs:
            matrix = matrices.get(role)
            if matrix is None:
                continue
            for ident in ids:
                if ident not in matrix:
                    report.findings.append(
                        Finding("dangling_id", ident, f"pair {pair.pair_id!r} references missing {role.label} id")
                    )
        for role, pool in (
            (Role.TEXT_EVIDENCE, pair.candidate_text_evidence),
            (Role.IMAGE_EVIDENCE, pair.candidate_image_evidence),
        ):
            if len(set(pool)) != len(pool):
                report.warnings.append(
                    Finding("duplicate_evidence", pair.pair_id, f"repeated {role.label} ids in candidate pool")
                )
    return report


def check_split_disjoint(manifests: Iterable[DatasetManifest]) -> list[Finding]:
    owner: dict[str, Split] = {}
    findings = []
    for manifest in manifests:
        for pid in manifest.pair_ids:
            if pid in owner and owner[pid] != manifest.split:
                findings.append(
                    Finding("split_overlap", pid, f"in both {owner[pid].value} and {manifest.split.value}")
                )
            owner.setdefault(pid, manifest.split)
    return findings


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthConfig:
    n_pairs: int = 1000
    dim: int = 64
    m: int = 1  # relevant text evidence per pair
    k: int = 1  # relevant image evidence per pair
    sigma: float = 0.1
    truthful_fraction: float = 0.5
    text_distractors: int = 1  # random unit vectors added to each text pool
    image_distractors: int = 1

    def check(self) -> None:
        if self.n_pairs <= 0:
            raise ConfigError(f"n_pairs must be positive, got {self.n_pairs}")
        if self.dim <= 0:
            raise ConfigError(f"dim must be positive, got {self.dim}")
        if self.sigma < 0 or not np.isfinite(self.sigma):
            raise ConfigError(f"sigma must be a finite non-negative number, got {self.sigma}")
        if not 0.0 <= self.truthful_fraction <= 1.0:
            raise ConfigError(f"truthful_fraction must lie in [0, 1], got {self.truthful_fraction}")
        if min(self.m, self.k, self.text_distractors, self.image_distractors) < 0:
            raise ConfigError("evidence counts must be non-negative")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _perturbed(raw: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    # normalize(unit(raw) + sigma * g), written so that sigma == 0 reproduces unit(raw) bit-exactly
    noise = rng.standard_normal(raw.shape)
    scale = np.linalg.norm(raw, axis=-1, keepdims=True)
    return _unit(raw + sigma * scale * noise)


def generate_synthetic(
    config: SynthConfig, seed: int = 0, split: Split | str = Split.TRAIN, prefix: str = ""
) -> tuple[DatasetManifest, dict[Role, EmbeddingMatrix]]:
    """Build a labelled toy corpus with the same structure as a real fact-checking set.

    Truthful pairs get a text embedding that is a noisy copy of the image
    embedding; misinformation pairs get independent directions. Each pair's
    evidence pools hold noisy copies of its own claim (relevant) mixed with
    random unit vectors (distractors), in shuffled order.
    """
    config.check()
    rng = np.random.default_rng(seed)
    n, dim = config.n_pairs, config.dim
    n_true = int(round(config.truthful_fraction * n))
    verdicts = np.ones(n, dtype=np.int64)
    verdicts[:n_true] = 0
    verdicts = rng.permutation(verdicts)

    raw_images = rng.standard_normal((n, dim))
    images = _unit(raw_images)
    texts = np.empty_like(images)
    truthful = verdicts == 0
    texts[truthful] = _perturbed(raw_images[truthful], config.sigma, rng)
    texts[~truthful] = _unit(rng.standard_normal((int((~truthful).sum()), dim)))

    text_ev_rows, text_ev_ids = [], []
    image_ev_rows, image_ev_ids = [], []
    pairs = []
    for i in range(n):
        pools = []
        for claim, n_rel, n_dis, rows, ids, tag in (
            (texts[i], config.m, config.text_distractors, text_ev_rows, text_ev_ids, "te"),
            (images[i], config.k, config.image_distractors, image_ev_rows, image_ev_ids, "ie"),
        ):
            relevant = _perturbed(np.tile(claim, (n_rel, 1)), config.sigma, rng) if n_rel else np.zeros((0, dim))
            distract = _unit(rng.standard_normal((n_dis, dim))) if n_dis else np.zeros((0, dim))
            block = np.concatenate([relevant, distract])
            start = len(ids)
            new_ids = [f"{prefix}{tag}{start + j:07d}" for j in range(len(block))]
            rows.append(block)
            ids.extend(new_ids)
            order = rng.permutation(len(new_ids))
            pools.append(tuple(new_ids[j] for j in order))
        pairs.append(
            VerificationPair(
                pair_id=f"{prefix}p{i:07d}",
                text_id=f"{prefix}t{i:07d}",
                image_id=f"{prefix}i{i:07d}",
                verdict=int(verdicts[i]),
                candidate_text_evidence=pools[0],
                candidate_image_evidence=pools[1],
            )
        )

    def _matrix(role: Role, rows: list | np.ndarray, ids: list[str]) -> EmbeddingMatrix:
        stacked = np.concatenate(rows) if isinstance(rows, list) and rows else np.asarray(rows)
        return EmbeddingMatrix(role=role, dim=dim, rows=np.asarray(stacked, dtype=np.float32).reshape(-1, dim), ids=tuple(ids))

    matrices = {
        Role.TEXT_CLAIM: _matrix(Role.TEXT_CLAIM, texts, [p.text_id for p in pairs]),
        Role.IMAGE_CLAIM: _matrix(Role.IMAGE_CLAIM, images, [p.image_id for p in pairs]),
        Role.TEXT_EVIDENCE: _matrix(Role.TEXT_EVIDENCE, text_ev_rows, text_ev_ids),
        Role.IMAGE_EVIDENCE: _matrix(Role.IMAGE_EVIDENCE, image_ev_rows, image_ev_ids),
    }
    provenance = json.dumps({"generator": "synthetic", "seed": seed, **vars(config)}, sort_keys=True)
    manifest = DatasetManifest(split=Split(split), pairs=pairs, dim=dim, provenance=provenance)
    return manifest, matrices


def partition_manifest(manifest: DatasetManifest, sizes: Mapping[Split | str, int]) -> dict[Split, DatasetManifest]:
    """Cut a manifest into consecutive disjoint splits of the requested sizes."""
    total = sum(sizes.values())
    if total > len(manifest):
        raise ConfigError(f"requested {total} pairs but manifest holds {len(manifest)}")
    out, start = {}, 0
    for split, size in sizes.items():
        split = Split(split)
        out[split] = DatasetManifest(
            split=split, pairs=manifest.pairs[start:start + size], dim=manifest.dim, provenance=manifest.provenance
        )
        start += size
    return out


def save_dataset(directory: str | os.PathLike, manifests: Iterable[DatasetManifest], matrices: Mapping[Role, EmbeddingMatrix]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for role, matrix in matrices.items():
        save_embeddings(matrix, directory / f"{Role.parse(role).label}.rede")
    for manifest in manifests:
        save_manifest(manifest, directory / f"{manifest.split.value}.jsonl")


def load_dataset(directory: str | os.PathLike) -> tuple[dict[Split, DatasetManifest], dict[Role, EmbeddingMatrix]]:
    directory = Path(directory)
    matrices = {}
    for role in (Role.TEXT_CLAIM, Role.IMAGE_CLAIM, Role.TEXT_EVIDENCE, Role.IMAGE_EVIDENCE):
        path = directory / f"{role.label}.rede"
        if path.exists():
            matrices[role] = load_embeddings(path, role)
    manifests = {}
    for split in Split:
        path = directory / f"{split.value}.jsonl"
        if path.exists():
            manifests[split] = load_manifest(path)
    if not manifests:
        raise IoError(f"no manifests found in {directory}")
    return manifests, matrices
