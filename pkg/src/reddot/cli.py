"""``red-dot`` command line: ingest, validate, synth, rank, mine, bundle, train, eval, gradcheck, report.

Every stage works inside one run directory (``--out``). Intermediate
artifacts are kept there; a stage whose inputs and parameters are unchanged
is skipped unless ``--force`` is given.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import shutil
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, IoError, NumericalError, RedDotError, StateError
from .fusion import ABLATIONS, FusionConfig, fuse
from .model import VARIANTS, ModelConfig, RedDotModel, multitask_loss
from .protocol import (
    Checkpoint,
    TrainConfig,
    attention_report,
    encode_split,
    evaluate_accuracy,
    format_attention_report,
    format_table,
    relevance_accuracy,
    run_id_v,
    run_ood_cv,
)
from .retrieval import (
    NegativeAssignment,
    RankedEvidence,
    assemble_all,
    load_bundles,
    mine_all,
    rank_all,
    save_bundles,
)
from .store import (
    Role,
    Split,
    SynthConfig,
    check_split_disjoint,
    generate_synthetic,
    load_dataset,
    load_embeddings,
    load_manifest,
    partition_manifest,
    save_dataset,
    validate_dataset,
)

log = logging.getLogger("reddot")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

TOP_LEVEL_KEYS = {"seed", "m", "k", "variant", "fusion", "protocol", "folds", "model", "train", "synth"}
SYNTH_KEYS = {"pairs", "dim", "sigma", "truthful_fraction", "splits"}
DEFAULT_SPLITS = {"train": 0.8, "val": 0.1, "test": 0.1}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # exit code 1 instead of argparse's 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# configuration


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read config {p}: {exc}") from exc
    if p.suffix == ".json":
        data = json.loads(raw.decode("utf-8"))
    else:
        try:
            import tomllib  # type: ignore[import-not-found]
        except ModuleNotFoundError:
            import tomli as tomllib
        data = tomllib.loads(raw.decode("utf-8"))
    if not isinstance(data, dict):
        raise ConfigError("config root must be a table")
    _reject_unknown(data, TOP_LEVEL_KEYS, "config")
    _reject_unknown(data.get("synth", {}), SYNTH_KEYS, "[synth]")
    _reject_unknown(data.get("train", {}), {f.name for f in fields(TrainConfig)}, "[train]")
    model_keys = {f.name for f in fields(ModelConfig)} - {"variant", "M", "K", "fusion"}
    _reject_unknown(data.get("model", {}), model_keys, "[model]")
    return data


def _reject_unknown(data: Mapping, allowed: set[str], where: str) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` (or ``key=value``) overrides onto the config table."""
    config = json.loads(json.dumps(config))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        parts = key.split(".")
        if len(parts) > 2:
            raise ConfigError(f"override key {key!r} nests too deeply")
        if len(parts) == 2:
            config.setdefault(parts[0], {})[parts[1]] = _parse_value(value)
        else:
            config[parts[0]] = _parse_value(value)
    _reject_unknown(config, TOP_LEVEL_KEYS, "overrides")
    _reject_unknown(config.get("synth", {}), SYNTH_KEYS, "[synth]")
    _reject_unknown(config.get("train", {}), {f.name for f in fields(TrainConfig)}, "[train]")
    _reject_unknown(config.get("model", {}), {f.name for f in fields(ModelConfig)} - {"variant", "M", "K", "fusion"}, "[model]")
    return config


class Settings:
    """Merged view: built-in defaults < config file < --set overrides < explicit flags."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config = _apply_overrides(_read_config(args.config), args.set or [])

    def get(self, name: str, default: Any = None) -> Any:
        value = getattr(self.args, name, None)
        if value is not None:
            return value
        return self.config.get(name, default)

    @property
    def seed(self) -> int:
        return int(self.get("seed", 0))

    @property
    def m(self) -> int:
        return int(self.get("m", 1))

    @property
    def k(self) -> int:
        return int(self.get("k", 1))

    def fusion(self) -> FusionConfig:
        value = self.get("fusion", "full")
        if isinstance(value, str) and value in ABLATIONS:
            return ABLATIONS[value]
        return FusionConfig.parse(value)

    def model_config(self, dim: int) -> ModelConfig:
        section = dict(self.config.get("model", {}))
        section.setdefault("dim", dim)
        if section["dim"] != dim:
            raise ConfigError(f"model dim {section['dim']} does not match dataset dim {dim}")
        return ModelConfig(variant=self.get("variant", "dsl"), M=self.m, K=self.k, fusion=self.fusion(), **section)

    def train_config(self) -> TrainConfig:
        section = dict(self.config.get("train", {}))
        section["seed"] = self.seed
        return TrainConfig.from_json(section)


# --------------------------------------------------------------------------
# run directory helpers


@contextlib.contextmanager
def run_lock(directory: Path):
    """Exclusive lock file so only one process writes into a run directory."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StateError(f"{directory} is locked by another process (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _write_json(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


class RunDir:
    def __init__(self, root: Path):
        self.root = root
        self.data = root / "data"
        self.stamp_path = root / "stages.json"

    def stamps(self) -> dict:
        return _read_json(self.stamp_path) if self.stamp_path.exists() else {}

    def fresh(self, stage: str, params: dict) -> bool:
        return self.stamps().get(stage) == params

    def mark(self, stage: str, params: dict) -> None:
        stamps = self.stamps()
        stamps[stage] = params
        # later stages depend on this one; drop their stamps
        order = ["data", "rank", "mine", "bundle"]
        if stage in order:
            for later in order[order.index(stage) + 1:]:
                stamps.pop(later, None)
        _write_json(self.stamp_path, stamps)

    def dataset(self):
        if not self.data.exists():
            raise IoError(f"{self.data} does not exist; run `red-dot synth` or `red-dot ingest` first")
        return load_dataset(self.data)

    def model_dir(self, variant: str, protocol: str) -> Path:
        return self.root / "models" / f"{variant}-{protocol}"


# --------------------------------------------------------------------------
# stages


def _split_sizes(total: int, splits: Mapping[str, float | int]) -> dict[str, int]:
    values = dict(splits)
    if all(isinstance(v, int) and not isinstance(v, bool) for v in values.values()):
        if sum(values.values()) != total:
            raise ConfigError(f"split sizes {values} do not add up to {total} pairs")
        return values
    sizes = {name: int(round(float(v) * total)) for name, v in values.items()}
    first = next(iter(sizes))
    sizes[first] += total - sum(sizes.values())
    return sizes


def cmd_synth(args, settings: Settings, run: RunDir) -> int:
    section = settings.config.get("synth", {})
    pairs = args.pairs if args.pairs is not None else int(section.get("pairs", 2000))
    dim = args.dim if args.dim is not None else int(section.get("dim", 64))
    sigma = args.sigma if args.sigma is not None else float(section.get("sigma", 0.1))
    truthful = float(section.get("truthful_fraction", 0.5))
    splits = section.get("splits", DEFAULT_SPLITS)
    sizes = _split_sizes(pairs, splits)
    params = {"kind": "synth", "pairs": pairs, "dim": dim, "sigma": sigma, "truthful_fraction": truthful,
              "splits": sizes, "m": settings.m, "k": settings.k, "seed": settings.seed}
    if run.fresh("data", params) and not args.force:
        print(f"synth: {run.data} is up to date")
        return EXIT_OK
    config = SynthConfig(n_pairs=pairs, dim=dim, m=settings.m, k=settings.k, sigma=sigma, truthful_fraction=truthful,
                         text_distractors=settings.m, image_distractors=settings.k)
    config.check()
    manifest, matrices = generate_synthetic(config, settings.seed)
    parts = partition_manifest(manifest, sizes)
    shutil.rmtree(run.data, ignore_errors=True)
    save_dataset(run.data, parts.values(), matrices)
    run.mark("data", params)
    print(f"synth: wrote {pairs} pairs (dim {dim}) to {run.data}: " + ", ".join(f"{s}={n}" for s, n in sizes.items()))
    return EXIT_OK


def _key_value(items: list[str], what: str) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"{what} argument {item!r} must be NAME=PATH")
        out[key] = value
    return out


def cmd_ingest(args, settings: Settings, run: RunDir) -> int:
    manifests = _key_value(args.manifest, "--manifest")
    embeddings = _key_value(args.embeddings, "--embeddings")
    matrices = {Role.parse(name): load_embeddings(path, name) for name, path in embeddings.items()}
    dims = {m.dim for m in matrices.values()}
    if len(dims) != 1:
        raise ConfigError(f"embedding files disagree on dim: {sorted(dims)}")
    dim = dims.pop()
    loaded = [load_manifest(path, Split(split), dim) for split, path in manifests.items()]
    reports = _validate(loaded, matrices)
    if not all(r["usable"] for r in reports.values()):
        _write_json(run.root / "validation.json", reports)
        print(f"ingest: dataset failed validation, see {run.root / 'validation.json'}", file=sys.stderr)
        return EXIT_DATA
    shutil.rmtree(run.data, ignore_errors=True)
    save_dataset(run.data, loaded, matrices)
    run.mark("data", {"kind": "ingest", "manifests": manifests, "embeddings": embeddings})
    print(f"ingest: {sum(len(m) for m in loaded)} pairs across {len(loaded)} splits copied to {run.data}")
    return EXIT_OK


def _validate(manifests, matrices) -> dict:
    reports = {m.split.value: validate_dataset(m, matrices).to_json() for m in manifests}
    overlaps = check_split_disjoint(manifests)
    if overlaps:
        reports["cross_split"] = {"usable": False, "findings": [vars(f) for f in overlaps], "warnings": []}
    return reports


def cmd_validate(args, settings: Settings, run: RunDir) -> int:
    manifests, matrices = run.dataset()
    reports = _validate(manifests.values(), matrices)
    _write_json(run.root / "validation.json", reports)
    for name, report in reports.items():
        status = "ok" if report["usable"] else "UNUSABLE"
        print(f"{name}: {status}, {len(report['findings'])} findings, {len(report['warnings'])} warnings")
        for f in report["findings"][:10]:
            print(f"  {f['kind']}: {f['subject']}: {f['detail']}")
    return EXIT_OK if all(r["usable"] for r in reports.values()) else EXIT_DATA


def ensure_ranked(run: RunDir, force: bool) -> dict[Split, dict[str, RankedEvidence]]:
    manifests, matrices = run.dataset()
    params = {"splits": sorted(s.value for s in manifests)}
    directory = run.root / "ranked"
    if force or not run.fresh("rank", params):
        for split, manifest in manifests.items():
            ranked = rank_all(manifest.pairs, matrices)
            _write_json(directory / f"{split.value}.json", [ranked[p.pair_id].to_json() for p in manifest.pairs])
        run.mark("rank", params)
        log.info("ranked evidence for %d splits", len(manifests))
    return {
        split: {r["pair_id"]: RankedEvidence.from_json(r) for r in _read_json(directory / f"{split.value}.json")}
        for split in manifests
    }


def ensure_mined(run: RunDir, m: int, k: int, force: bool) -> dict[Split, dict[str, NegativeAssignment] | None]:
    ranked = ensure_ranked(run, force)
    manifests, matrices = run.dataset()
    params = {"m": m, "k": k}
    directory = run.root / "negatives"
    if force or not run.fresh("mine", params):
        for split, manifest in manifests.items():
            if split == Split.EXTERNAL:
                continue  # external benchmarks are consumed without injected negatives
            negatives = mine_all(manifest.pairs, matrices, ranked[split], m, k)
            _write_json(directory / f"{split.value}.json", [negatives[p.pair_id].to_json() for p in manifest.pairs])
        run.mark("mine", params)
    out = {}
    for split in manifests:
        path = directory / f"{split.value}.json"
        out[split] = None if split == Split.EXTERNAL else {
            r["pair_id"]: NegativeAssignment.from_json(r) for r in _read_json(path)
        }
    return out


def ensure_bundled(run: RunDir, m: int, k: int, seed: int, force: bool) -> dict[Split, Path]:
    params = {"m": m, "k": k, "seed": seed}
    directory = run.root / "bundles"
    manifests, matrices = run.dataset()
    paths = {split: directory / f"{split.value}.rede" for split in manifests}
    if force or not run.fresh("bundle", params) or not run.fresh("mine", {"m": m, "k": k}):
        negatives = ensure_mined(run, m, k, force)
        ranked = ensure_ranked(run, False)
        directory.mkdir(parents=True, exist_ok=True)
        for split, manifest in manifests.items():
            bundles = assemble_all(manifest.pairs, ranked[split], negatives[split], m, k, seed, matrices)
            save_bundles(bundles, paths[split], m, k)
        run.mark("bundle", params)
    return paths


def cmd_rank(args, settings: Settings, run: RunDir) -> int:
    ranked = ensure_ranked(run, args.force)
    for split, items in ranked.items():
        print(f"rank: {split.value}: {len(items)} pairs ranked -> {run.root / 'ranked' / (split.value + '.json')}")
    return EXIT_OK


def cmd_mine(args, settings: Settings, run: RunDir) -> int:
    mined = ensure_mined(run, settings.m, settings.k, args.force)
    for split, items in mined.items():
        if items is None:
            print(f"mine: {split.value}: skipped (external split, no injected negatives)")
        else:
            print(f"mine: {split.value}: {len(items)} donor assignments (M={settings.m}, K={settings.k})")
    return EXIT_OK


def cmd_bundle(args, settings: Settings, run: RunDir) -> int:
    paths = ensure_bundled(run, settings.m, settings.k, settings.seed, args.force)
    for split, path in paths.items():
        _, meta = load_bundles(path)
        print(f"bundle: {split.value}: slots per pair {meta['slots_per_pair']} -> {path}")
    return EXIT_OK


def _encoded_splits(run: RunDir, settings: Settings, force: bool):
    paths = ensure_bundled(run, settings.m, settings.k, settings.seed, force)
    manifests, matrices = run.dataset()
    out = {}
    for split, manifest in manifests.items():
        bundles, _ = load_bundles(paths[split])
        out[split] = encode_split(manifest, matrices, bundles)
    return out, manifests


def cmd_train(args, settings: Settings, run: RunDir) -> int:
    splits, manifests = _encoded_splits(run, settings, args.force)
    dim = next(iter(manifests.values())).dim
    model_config = settings.model_config(dim)
    train_config = settings.train_config()
    protocol = settings.get("protocol", "idv")
    if Split.TRAIN not in splits:
        raise ConfigError("the dataset has no train split")
    directory = run.model_dir(model_config.variant, protocol)

    def progress(record: dict) -> None:
        print(f"  epoch {record['epoch']:3d}  loss {record['loss']:.4f}  val {record['val_accuracy']:.4f}", flush=True)

    if protocol == "idv":
        if Split.VAL not in splits:
            raise ConfigError("ID-V needs a val split")
        in_dist = {s.value: splits[s] for s in (Split.TRAIN, Split.VAL, Split.TEST) if s in splits}
        result = run_id_v(model_config, train_config, in_dist, splits.get(Split.EXTERNAL), epoch_callback=progress)
    else:
        if Split.EXTERNAL not in splits:
            raise ConfigError("OOD-CV needs an external split")
        folds = int(settings.get("folds", 3))
        result = run_ood_cv(model_config, train_config, splits[Split.TRAIN], splits[Split.EXTERNAL], k=folds,
                            epoch_callback=progress)
    shutil.rmtree(directory, ignore_errors=True)
    path = result.save(directory)
    print(f"train: {model_config.variant} / {protocol}: " + ", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in sorted(result.metrics.items())))
    print(f"train: run record -> {path}")
    return EXIT_OK


def _load_run(run: RunDir, settings: Settings) -> tuple[dict, Path]:
    variant = settings.get("variant", "dsl")
    protocol = settings.get("protocol", "idv")
    directory = run.model_dir(variant, protocol)
    path = directory / "run.json"
    if not path.exists():
        raise IoError(f"no trained {variant}/{protocol} model in {run.root}; run `red-dot train` first")
    return _read_json(path), directory


def cmd_eval(args, settings: Settings, run: RunDir) -> int:
    record, directory = _load_run(run, settings)
    splits, _ = _encoded_splits(run, settings, False)
    target = Split(args.split)
    if target not in splits:
        raise ConfigError(f"dataset has no {target.value} split")
    data = splits[target]
    mode = "true_vs_ooc" if target == Split.EXTERNAL else "accuracy"
    results = []
    for fold in record["folds"]:
        model = Checkpoint.load(directory / fold["checkpoint"]).restore()
        subset = data
        if record["kind"] == "ood_cv" and target == Split.EXTERNAL:
            subset = data.subset(fold["test_indices"])
        entry = {"fold": fold["fold"], "accuracy": evaluate_accuracy(model, subset, mode)}
        if model.config.variant != "baseline":
            entry["relevance_accuracy"] = relevance_accuracy(model, subset)
        results.append(entry)
    accs = np.array([r["accuracy"] for r in results])
    summary = {"split": target.value, "mode": mode, "folds": results,
               "accuracy_mean": float(accs.mean()), "accuracy_std": float(accs.std())}
    _write_json(directory / f"eval-{target.value}.json", summary)
    for r in results:
        extra = f"  relevance {r['relevance_accuracy']:.4f}" if "relevance_accuracy" in r else ""
        print(f"eval: fold {r['fold']}  {mode} {r['accuracy']:.4f}{extra}")
    if len(results) > 1:
        print(f"eval: mean {summary['accuracy_mean']:.4f}  std {summary['accuracy_std']:.4f}")
    return EXIT_OK


def gradcheck_suite(dim: int, seed: int = 0, max_samples: int = 20) -> dict[str, float]:
    """Finite-difference check of the full forward pass plus multitask loss for every variant."""
    rng = np.random.default_rng(seed)
    errors = {}
    for variant in VARIANTS:
        config = ModelConfig(variant=variant, dim=dim, layers=2, ff_width=2 * dim, heads=2, dropout=0.0,
                             relevance_hidden=8, M=1, K=1)
        model = RedDotModel(config, seed=seed, dtype=np.float64)
        claim = fuse(rng.standard_normal((2, dim)), rng.standard_normal((2, dim)), config.fusion)
        evidence = rng.standard_normal((2, config.n_evidence, dim))
        labels = np.array([[1, 0, 0, 1], [0, 1, 1, 0]])[:, : config.n_evidence]
        y_v = np.array([1, 0])

        def loss():
            out = model.forward(claim, evidence, "train", labels)
            return multitask_loss(out, y_v, None if variant == "baseline" else labels)[0]

        report = ad.grad_check(loss, dict(model.params.items()), max_samples=max_samples, seed=seed)
        errors[variant] = report.max_rel_error
    return errors


def cmd_gradcheck(args, settings: Settings, run: RunDir | None) -> int:
    errors = gradcheck_suite(args.dim, settings.seed, args.samples)
    for variant, err in errors.items():
        print(f"gradcheck: {variant:<9} max relative error {err:.3e}")
    worst = max(errors.values())
    print(f"max relative error {worst:.3e} (tolerance 1e-4)")
    return EXIT_OK if worst <= 1e-4 else EXIT_NUMERIC


def cmd_report(args, settings: Settings, run: RunDir) -> int:
    if args.pair is not None:
        return _pair_report(args, settings, run)
    rows, records = [], {}
    for path in sorted((run.root / "models").glob("*/run.json")):
        record = _read_json(path)
        name = path.parent.name
        records[name] = record
        metrics = record["metrics"]
        if record["kind"] == "id_v":
            ext = metrics.get("external_true_vs_ooc_accuracy", "-")
            rows.append([name, metrics.get("test_accuracy", "-"), ext, "-"])
        else:
            rows.append([name, "-", "-", (metrics["true_vs_ooc_accuracy_mean"], metrics["true_vs_ooc_accuracy_std"])])
    if not rows:
        raise IoError(f"no trained models under {run.root / 'models'}")
    _write_json(run.root / "report.json", records)
    print(format_table("Accuracy (%)", ["model", "ID test", "external (ID-V)", "external (OOD-CV)"], rows))
    return EXIT_OK


def _pair_report(args, settings: Settings, run: RunDir) -> int:
    record, directory = _load_run(run, settings)
    model = Checkpoint.load(directory / record["folds"][0]["checkpoint"]).restore()
    manifests, matrices = run.dataset()
    paths = ensure_bundled(run, model.config.M, model.config.K, settings.seed, False)
    for split, manifest in manifests.items():
        if args.pair in manifest.pair_ids:
            bundles, _ = load_bundles(paths[split])
            bundle = next(b for b in bundles if b.pair_id == args.pair)
            pair = next(p for p in manifest.pairs if p.pair_id == args.pair)
            fused = fuse(matrices[Role.IMAGE_CLAIM].row(pair.image_id), matrices[Role.TEXT_CLAIM].row(pair.text_id),
                         model.config.fusion)
            report = attention_report(model, fused, bundle)
            _write_json(directory / f"attention-{args.pair}.json", report)
            print(format_attention_report(report))
            return EXIT_OK
    raise ConfigError(f"pair {args.pair!r} not found in any split")


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run configuration; unknown keys are an error")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.lr=1e-3 (repeatable)")
    common.add_argument("--seed", type=int, help="global random seed (default 0)")
    common.add_argument("--out", default="run", help="run directory holding all artifacts (default ./run)")
    common.add_argument("--force", action="store_true", help="recompute stages even when their outputs are current")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    evidence = argparse.ArgumentParser(add_help=False)
    evidence.add_argument("--m", type=int, help="text evidence slots per polarity (default 1)")
    evidence.add_argument("--k", type=int, help="image evidence slots per polarity (default 1)")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--variant", choices=VARIANTS, help="model variant (default dsl)")
    model.add_argument("--fusion", help=f"fusion ablation ({', '.join(ABLATIONS)}) or comma-separated ops")
    model.add_argument("--protocol", choices=("idv", "oodcv"), help="evaluation protocol (default idv)")
    model.add_argument("--folds", type=int, help="OOD-CV folds (default 3)")

    parser = _Parser(prog="red-dot", description="Relevant-evidence detection for multimodal fact checking.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[common], help="copy manifests and embedding files into a run directory")
    p.add_argument("--manifest", action="append", default=[], metavar="SPLIT=PATH", required=True,
                   help="NDJSON manifest for a split (train, val, test, external); repeatable")
    p.add_argument("--embeddings", action="append", default=[], metavar="ROLE=PATH", required=True,
                   help="embedding file for a role (text_claim, image_claim, text_evidence, image_evidence); repeatable")

    sub.add_parser("validate", parents=[common], help="check referential integrity of the run's dataset")

    p = sub.add_parser("synth", parents=[common, evidence], help="generate a synthetic dataset")
    p.add_argument("--pairs", type=int, help="number of claim pairs (default 2000)")
    p.add_argument("--dim", type=int, help="embedding width (default 64)")
    p.add_argument("--sigma", type=float, help="noise scale (default 0.1)")

    sub.add_parser("rank", parents=[common], help="rank each pair's evidence pools by similarity")
    sub.add_parser("mine", parents=[common, evidence], help="mine hard negatives from nearest other pairs")
    sub.add_parser("bundle", parents=[common, evidence], help="assemble shuffled evidence bundles")
    sub.add_parser("train", parents=[common, evidence, model], help="train a model under a protocol")

    p = sub.add_parser("eval", parents=[common, evidence, model], help="evaluate a trained model's checkpoints")
    p.add_argument("--split", default="test", choices=[s.value for s in Split], help="split to evaluate (default test)")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every model variant")
    p.add_argument("--dim", type=int, default=16, help="model width for the check (default 16)")
    p.add_argument("--samples", type=int, default=20, help="coordinates sampled per parameter (default 20)")

    p = sub.add_parser("report", parents=[common, evidence, model], help="summarise trained models or one pair")
    p.add_argument("--pair", help="print the per-slot relevance report for this pair id")
    return parser


COMMANDS = {
    "ingest": cmd_ingest,
    "validate": cmd_validate,
    "synth": cmd_synth,
    "rank": cmd_rank,
    "mine": cmd_mine,
    "bundle": cmd_bundle,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        settings = Settings(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(args, settings, None)
        run = RunDir(Path(args.out))
        with run_lock(run.root):
            return COMMANDS[args.command](args, settings, run)
    except NumericalError as exc:
        print(f"red-dot: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"red-dot: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RedDotError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"red-dot: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
