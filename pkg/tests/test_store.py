import hashlib

import numpy as np
import pytest

from reddot.errors import ConfigError, DataError, FormatError, IoError
from reddot.store import (
    DatasetManifest,
    EmbeddingMatrix,
    Role,
    Split,
    SynthConfig,
    VerificationPair,
    check_split_disjoint,
    decode_embeddings,
    encode_embeddings,
    generate_synthetic,
    header_size,
    load_dataset,
    load_embeddings,
    load_manifest,
    partition_manifest,
    save_dataset,
    save_embeddings,
    save_manifest,
    validate_dataset,
)


def _matrix(rows, role=Role.TEXT_EVIDENCE, ids=None):
    rows = np.asarray(rows, dtype=np.float32)
    ids = ids or [f"r{i}" for i in range(len(rows))]
    return EmbeddingMatrix(role=role, dim=rows.shape[1], rows=rows, ids=tuple(ids))


def test_load_exact_rows(tmp_path):
    m = _matrix([[1, 0, 0, 0], [0, 1, 0, 0]])
    save_embeddings(m, tmp_path / "m.rede")
    loaded = load_embeddings(tmp_path / "m.rede", Role.TEXT_EVIDENCE)
    np.testing.assert_array_equal(loaded.rows, [[1, 0, 0, 0], [0, 1, 0, 0]])
    assert loaded.ids == ("r0", "r1")
    assert loaded == m


def test_empty_matrix_keeps_dim(tmp_path):
    m = EmbeddingMatrix(role=Role.IMAGE_CLAIM, dim=7, rows=np.zeros((0, 7)), ids=())
    save_embeddings(m, tmp_path / "e.rede")
    loaded = load_embeddings(tmp_path / "e.rede")
    assert len(loaded) == 0 and loaded.dim == 7 and loaded.role == Role.IMAGE_CLAIM


def test_byte_identical_roundtrip_many(tmp_path):
    rng = np.random.default_rng(0)
    for trial in range(100):
        n, dim = rng.integers(0, 20), rng.integers(1, 40)
        rows = rng.standard_normal((n, dim)).astype(np.float32) * 10.0 ** rng.integers(-5, 5)
        m = EmbeddingMatrix(role=Role(trial % 4), dim=int(dim), rows=rows, ids=tuple(f"id-{trial}-{i}" for i in range(n)))
        path = tmp_path / "a.rede"
        save_embeddings(m, path)
        first = hashlib.sha256(path.read_bytes()).hexdigest()
        save_embeddings(load_embeddings(path), tmp_path / "b.rede")
        assert hashlib.sha256((tmp_path / "b.rede").read_bytes()).hexdigest() == first
        assert load_embeddings(path) == m


def test_zero_row_file_size(tmp_path):
    m = _matrix([[0, 0, 0, 0]])
    save_embeddings(m, tmp_path / "z.rede")
    assert (tmp_path / "z.rede").stat().st_size == header_size(m.ids) + 16


def test_payload_size_arithmetic():
    rows = np.ones((3, 512), dtype=np.float32)
    m = _matrix(rows)
    assert len(encode_embeddings(m)) - header_size(m.ids) == 3 * 512 * 4


def test_header_layout():
    data = encode_embeddings(_matrix([[1.5, -2.0]], role=Role.IMAGE_EVIDENCE, ids=["é"]))
    assert data[:4] == b"REDE"
    assert int.from_bytes(data[4:6], "little") == 1
    assert data[6] == Role.IMAGE_EVIDENCE
    assert int.from_bytes(data[7:11], "little") == 2
    assert int.from_bytes(data[11:19], "little") == 1
    assert data[19:22] == "é".encode() + b"\x00"
    assert np.frombuffer(data[22:], "<f4").tolist() == [1.5, -2.0]


@pytest.mark.parametrize("mutate", [
    lambda d: b"XXXX" + d[4:],
    lambda d: d[:4] + (9).to_bytes(2, "little") + d[6:],
    lambda d: d[:10],
    lambda d: d[:-1],
    lambda d: d + b"\x00",
])
def test_malformed_header(mutate):
    data = encode_embeddings(_matrix([[1, 2]]))
    with pytest.raises(FormatError):
        decode_embeddings(mutate(data))


def test_non_finite_rejected():
    data = bytearray(encode_embeddings(_matrix([[1, 2]])))
    data[-4:] = np.array([np.nan], dtype="<f4").tobytes()
    with pytest.raises(DataError):
        decode_embeddings(bytes(data))


def test_duplicate_ids_rejected():
    with pytest.raises(DataError):
        _matrix([[1, 2], [3, 4]], ids=["a", "a"])


def test_wrong_role_is_format_error():
    with pytest.raises(FormatError):
        decode_embeddings(encode_embeddings(_matrix([[1, 2]])), Role.IMAGE_CLAIM)


def test_unwritable_path(tmp_path):
    with pytest.raises(IoError):
        save_embeddings(_matrix([[1, 2]]), tmp_path / "missing" / "dir" / "x.rede")


def test_rows_are_read_only():
    m = _matrix([[1, 2]])
    with pytest.raises(ValueError):
        m.rows[0, 0] = 5


# -- manifests and validation


@pytest.fixture
def small_dataset():
    manifest, matrices = generate_synthetic(SynthConfig(n_pairs=6, dim=8), seed=3)
    return manifest, matrices


def test_manifest_roundtrip(tmp_path, small_dataset):
    manifest, _ = small_dataset
    save_manifest(manifest, tmp_path / "train.jsonl")
    loaded = load_manifest(tmp_path / "train.jsonl")
    assert loaded.pairs == manifest.pairs
    assert loaded.split == Split.TRAIN and loaded.dim == 8
    first_line = (tmp_path / "train.jsonl").read_text().splitlines()[0]
    assert '"candidate_image_evidence"' in first_line


def test_manifest_rejects_extra_fields(tmp_path):
    (tmp_path / "m.jsonl").write_text(
        '{"pair_id": "a", "text_id": "t", "image_id": "i", "verdict": 0, '
        '"candidate_text_evidence": [], "candidate_image_evidence": [], "extra": 1}\n'
    )
    with pytest.raises(FormatError):
        load_manifest(tmp_path / "m.jsonl", split="train", dim=4)


def test_consistent_manifest_empty_report(small_dataset):
    manifest, matrices = small_dataset
    report = validate_dataset(manifest, matrices)
    assert report.findings == [] and report.usable


def test_dangling_image_id(small_dataset):
    manifest, matrices = small_dataset
    bad = VerificationPair("pX", manifest.pairs[0].text_id, "x9", 0)
    manifest.pairs.append(bad)
    report = validate_dataset(manifest, matrices)
    assert len(report.findings) == 1
    assert report.findings[0].kind == "dangling_id" and report.findings[0].subject == "x9"


def test_duplicate_pair_id(small_dataset):
    manifest, matrices = small_dataset
    manifest.pairs.append(manifest.pairs[0])
    kinds = [f.kind for f in validate_dataset(manifest, matrices).findings]
    assert kinds == ["duplicate_pair_id"]


def test_dim_mismatch_and_missing_matrix(small_dataset):
    manifest, matrices = small_dataset
    matrices = dict(matrices)
    matrices[Role.TEXT_CLAIM] = EmbeddingMatrix(Role.TEXT_CLAIM, 4, np.zeros((0, 4)), ())
    del matrices[Role.IMAGE_EVIDENCE]
    kinds = {f.kind for f in validate_dataset(manifest, matrices).findings}
    assert {"dim_mismatch", "missing_matrix", "dangling_id"} <= kinds


def test_duplicate_evidence_is_warning_only(small_dataset):
    manifest, matrices = small_dataset
    p = manifest.pairs[0]
    manifest.pairs[0] = VerificationPair(
        p.pair_id, p.text_id, p.image_id, p.verdict,
        p.candidate_text_evidence * 2, p.candidate_image_evidence,
    )
    report = validate_dataset(manifest, matrices)
    assert report.usable and [w.kind for w in report.warnings] == ["duplicate_evidence"]


def test_any_id_mutation_is_reported(small_dataset):
    manifest, matrices = small_dataset
    rng = np.random.default_rng(0)
    for _ in range(30):
        m = DatasetManifest(manifest.split, list(manifest.pairs), manifest.dim)
        i = int(rng.integers(len(m.pairs)))
        p = m.pairs[i]
        field = rng.choice(["text_id", "image_id", "text_ev", "image_ev", "pair_id"])
        if field == "text_id":
            p = VerificationPair(p.pair_id, p.text_id + "?", p.image_id, p.verdict, p.candidate_text_evidence, p.candidate_image_evidence)
        elif field == "image_id":
            p = VerificationPair(p.pair_id, p.text_id, p.image_id + "?", p.verdict, p.candidate_text_evidence, p.candidate_image_evidence)
        elif field == "text_ev":
            p = VerificationPair(p.pair_id, p.text_id, p.image_id, p.verdict, p.candidate_text_evidence + ("zz",), p.candidate_image_evidence)
        elif field == "image_ev":
            p = VerificationPair(p.pair_id, p.text_id, p.image_id, p.verdict, p.candidate_text_evidence, ("zz",) + p.candidate_image_evidence)
        else:
            j = (i + 1) % len(m.pairs)
            p = VerificationPair(m.pairs[j].pair_id, p.text_id, p.image_id, p.verdict, p.candidate_text_evidence, p.candidate_image_evidence)
        m.pairs[i] = p
        assert not validate_dataset(m, matrices).usable


def test_split_disjointness(small_dataset):
    manifest, _ = small_dataset
    parts = partition_manifest(manifest, {"train": 4, "val": 2})
    assert check_split_disjoint(parts.values()) == []
    overlap = DatasetManifest(Split.TEST, manifest.pairs[:1], manifest.dim)
    findings = check_split_disjoint(list(parts.values()) + [overlap])
    assert [f.subject for f in findings] == [manifest.pairs[0].pair_id]


# -- synthetic generator


def test_zero_noise_truthful_text_equals_image():
    manifest, matrices = generate_synthetic(SynthConfig(n_pairs=20, dim=16, sigma=0.0), seed=1)
    truthful = [p for p in manifest.pairs if p.verdict == 0]
    assert truthful
    for p in truthful:
        np.testing.assert_array_equal(matrices[Role.TEXT_CLAIM].row(p.text_id), matrices[Role.IMAGE_CLAIM].row(p.image_id))


def test_generator_deterministic(tmp_path):
    cfg = SynthConfig(n_pairs=30, dim=8)
    for name in ("a", "b"):
        manifest, matrices = generate_synthetic(cfg, seed=5)
        save_dataset(tmp_path / name, [manifest], matrices)
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    manifests, matrices = load_dataset(tmp_path / "a")
    assert validate_dataset(manifests[Split.TRAIN], matrices).usable


def test_generator_separates_truthful_from_misinformation():
    manifest, matrices = generate_synthetic(SynthConfig(n_pairs=2000, dim=64, sigma=0.1), seed=0)
    t = matrices[Role.TEXT_CLAIM].take(p.text_id for p in manifest.pairs).astype(np.float64)
    i = matrices[Role.IMAGE_CLAIM].take(p.image_id for p in manifest.pairs).astype(np.float64)
    cos = np.sum(t * i, axis=1) / (np.linalg.norm(t, axis=1) * np.linalg.norm(i, axis=1))
    y = np.array([p.verdict for p in manifest.pairs])
    truthful, misinfo = cos[y == 0], cos[y == 1]
    # fraction of (truthful, misinformation) comparisons won by the truthful pair
    wins = np.mean(truthful[:, None] > misinfo[None, :])
    assert wins > 0.99


def test_generator_labels_and_pools():
    cfg = SynthConfig(n_pairs=50, dim=8, m=2, k=1, text_distractors=3, image_distractors=0, truthful_fraction=0.3)
    manifest, matrices = generate_synthetic(cfg, seed=0)
    assert sum(p.verdict == 0 for p in manifest.pairs) == 15
    assert all(len(p.candidate_text_evidence) == 5 and len(p.candidate_image_evidence) == 1 for p in manifest.pairs)
    assert validate_dataset(manifest, matrices).usable


@pytest.mark.parametrize("kwargs", [{"sigma": -0.1}, {"n_pairs": 0}, {"truthful_fraction": 1.5}])
def test_generator_config_errors(kwargs):
    with pytest.raises(ConfigError):
        generate_synthetic(SynthConfig(**kwargs), seed=0)
