"""Training, early stopping, the ID-V and OOD-CV protocols, and analysis helpers."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from . import autodiff as ad
from .errors import ConfigError, DataError, NumericalError, StateError
from .fusion import fuse
from .model import DUAL_STAGE, ForwardOutput, ModelConfig, RedDotModel, multitask_loss, relevant_only
from .retrieval import EvidenceBundle
from .store import DatasetManifest, EmbeddingMatrix, Role

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# data


@dataclass
class EncodedSplit:
    """Arrays for one split, aligned row by row with ``pair_ids``."""

    pair_ids: list[str]
    images: np.ndarray  # (N, dim)
    texts: np.ndarray  # (N, dim)
    evidence: np.ndarray  # (N, E, dim)
    relevance: np.ndarray  # (N, E)
    verdict: np.ndarray  # (N,)
    modality: np.ndarray | None = None  # (N, E)
    # e.g. "true", "ooc", "miscaptioned"; None means every item is true or ooc
    categories: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.pair_ids)

    def subset(self, idx: Sequence[int] | np.ndarray) -> "EncodedSplit":
        idx = np.asarray(idx, dtype=np.int64)
        return EncodedSplit(
            pair_ids=[self.pair_ids[i] for i in idx],
            images=self.images[idx],
            texts=self.texts[idx],
            evidence=self.evidence[idx],
            relevance=self.relevance[idx],
            verdict=self.verdict[idx],
            modality=None if self.modality is None else self.modality[idx],
            categories=None if self.categories is None else self.categories[idx],
        )


def encode_split(
    manifest: DatasetManifest,
    matrices: Mapping[Role, EmbeddingMatrix],
    bundles: Sequence[EvidenceBundle],
    categories: Sequence[str] | None = None,
) -> EncodedSplit:
    by_id = {b.pair_id: b for b in bundles}
    missing = [p.pair_id for p in manifest.pairs if p.pair_id not in by_id]
    if missing:
        raise DataError(f"{len(missing)} pairs have no bundle, e.g. {missing[0]!r}")
    ordered = [by_id[p.pair_id] for p in manifest.pairs]
    if len({len(b) for b in ordered}) > 1:
        raise DataError("bundles in one split must have equal slot counts")
    return EncodedSplit(
        pair_ids=manifest.pair_ids,
        images=matrices[Role.IMAGE_CLAIM].take(p.image_id for p in manifest.pairs),
        texts=matrices[Role.TEXT_CLAIM].take(p.text_id for p in manifest.pairs),
        evidence=np.stack([b.evidence_features for b in ordered]).astype(np.float32),
        relevance=np.stack([b.relevance_labels for b in ordered]).astype(np.int64),
        verdict=np.asarray([p.verdict for p in manifest.pairs], dtype=np.int64),
        modality=np.stack([b.modality_tags for b in ordered]),
        categories=None if categories is None else np.asarray(categories),
    )


def batch_forward(model: RedDotModel, data: EncodedSplit, idx: np.ndarray, mode: str) -> ForwardOutput:
    claim = fuse(data.images[idx], data.texts[idx], model.config.fusion)
    evidence = data.evidence[idx]
    labels = data.relevance[idx]
    if model.config.variant == "baseline":
        evidence = relevant_only(evidence, labels)
    teacher = labels if (mode == "train" and model.config.variant in DUAL_STAGE) else None
    return model.forward(claim, evidence, mode, teacher)


def batch_loss(model: RedDotModel, data: EncodedSplit, idx: np.ndarray):
    out = batch_forward(model, data, idx, "train")
    y_e = None if model.config.variant == "baseline" else data.relevance[idx]
    return multitask_loss(out, data.verdict[idx], y_e), out


# --------------------------------------------------------------------------
# metrics


def predict_proba(model: RedDotModel, data: EncodedSplit, batch_size: int = 1024) -> tuple[np.ndarray, np.ndarray | None]:
    """Verdict probabilities and (when available) per-slot relevance probabilities, eval mode."""
    was_training = model.training
    model.eval()
    verdict, relevance = [], []
    try:
        for start in range(0, len(data), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data)))
            out = batch_forward(model, data, idx, "infer")
            verdict.append(ad.stable_sigmoid(out.verdict_logit.data))
            if out.relevance_logits is not None:
                relevance.append(ad.stable_sigmoid(out.relevance_logits.data))
    finally:
        model.training = was_training
    return np.concatenate(verdict), (np.concatenate(relevance) if relevance else None)


def _select(data: EncodedSplit, mode: str) -> EncodedSplit:
    if mode == "accuracy":
        return data
    if mode == "true_vs_ooc":
        if data.categories is None:
            return data
        keep = np.flatnonzero(np.isin(data.categories, ("true", "ooc")))
        return data.subset(keep)
    raise ConfigError(f"unknown accuracy mode {mode!r}")


def evaluate_accuracy(model: RedDotModel, dataset: EncodedSplit, mode: str = "accuracy") -> float:
    data = _select(dataset, mode)
    if len(data) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    probs, _ = predict_proba(model, data)
    return float(np.mean((probs > 0.5).astype(np.int64) == data.verdict))


def relevance_accuracy(model: RedDotModel, dataset: EncodedSplit) -> float:
    """Fraction of evidence slots whose predicted relevance matches the label."""
    _, probs = predict_proba(model, dataset)
    if probs is None:
        raise StateError(f"variant {model.config.variant} predicts no relevance")
    return float(np.mean((probs > 0.5).astype(np.int64) == dataset.relevance))


def point_biserial(similarities: Sequence[float], labels: Sequence[int]) -> tuple[float, float]:
    """Point-biserial r with population std, and the two-sided p-value (n - 2 dof)."""
    s = np.asarray(similarities, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise DataError("similarities and labels must be 1-D arrays of equal length")
    if len(s) < 3:
        raise DataError("point-biserial correlation needs at least 3 observations")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be binary")
    n1, n0 = int((y == 1).sum()), int((y == 0).sum())
    if n1 == 0 or n0 == 0:
        raise DataError("both label classes must be present")
    s_n = s.std()
    if s_n == 0.0:
        raise DataError("similarities have zero variance")
    n = len(s)
    r = (s[y == 1].mean() - s[y == 0].mean()) / s_n * np.sqrt(n1 * n0 / n**2)
    r = float(np.clip(r, -1.0, 1.0))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * np.sqrt((n - 2) / (1.0 - r * r))
    return r, float(2.0 * stats.t.sf(abs(t), n - 2))


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    max_epochs: int = 100
    patience: int = 10
    batch_size: int = 512
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("max_epochs, batch_size and patience must be positive")
        if self.patience > self.max_epochs:
            raise ConfigError(f"patience {self.patience} exceeds max_epochs {self.max_epochs}")

    @classmethod
    def from_json(cls, obj: Mapping) -> "TrainConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**obj)


# layers t, feed-forward width z, attention heads h
HYPERPARAMETER_GRID = {"layers": (4, 6), "ff_width": (128, 2048), "heads": (2, 8)}


def grid_configs(base: ModelConfig, grid: Mapping[str, Sequence] = HYPERPARAMETER_GRID) -> list[ModelConfig]:
    from itertools import product

    keys = sorted(grid)
    out = []
    for values in product(*(grid[k] for k in keys)):
        data = base.to_json() | dict(zip(keys, values))
        out.append(ModelConfig.from_json(data))
    return out


class EarlyStopping:
    """Track the best score; signal a stop after ``patience`` epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best: float | None = None
        self.best_epoch: int | None = None
        self.stale = 0

    def update(self, epoch: int, score: float) -> bool:
        if self.best is None or score > self.best:
            self.best, self.best_epoch, self.stale = score, epoch, 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


@dataclass
class Checkpoint:
    epoch: int
    val_accuracy: float
    state: dict[str, np.ndarray]
    model_config: ModelConfig

    def restore(self, dtype=np.float32) -> RedDotModel:
        model = RedDotModel(self.model_config, dtype=dtype)
        model.load_state_dict(self.state)
        return model.eval()

    def save(self, path) -> None:
        params = ad.ParameterSet()
        for name, value in self.state.items():
            params.add(name, value)
        ad.save_checkpoint(
            params, path,
            {"model": self.model_config.to_json(), "epoch": self.epoch, "val_accuracy": self.val_accuracy},
        )

    @classmethod
    def load(cls, path) -> "Checkpoint":
        config, values, _, _, _ = ad.load_checkpoint(path)
        return cls(
            epoch=int(config["epoch"]),
            val_accuracy=float(config["val_accuracy"]),
            state=values,
            model_config=ModelConfig.from_json(config["model"]),
        )


ValStream = EncodedSplit | Callable[[RedDotModel, int], float]


def train(
    model: RedDotModel,
    train_data: EncodedSplit,
    val_stream: ValStream,
    config: TrainConfig,
    epoch_callback: Callable[[dict], None] | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Adam over seeded shuffled mini-batches, checkpointing on strict validation improvement.

    Returns the best checkpoint (never simply the last) and one history record per epoch.
    """
    if len(train_data) == 0:
        raise ConfigError("empty training set")
    rng = np.random.default_rng([config.seed, 2])
    stopper = EarlyStopping(config.patience)
    best: Checkpoint | None = None
    history = []
    for epoch in range(1, config.max_epochs + 1):
        model.train()
        order = rng.permutation(len(train_data))
        totals = np.zeros(3)
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            model.params.zero_grad()
            (loss, loss_v, loss_e), _ = batch_loss(model, train_data, idx)
            if not np.isfinite(loss.data):
                raise NumericalError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            ad.adam_step(model.params, config.lr, config.beta1, config.beta2, config.eps)
            totals += len(idx) * np.array([loss.item(), loss_v.item(), loss_e.item()])
        totals /= len(train_data)
        model.eval()
        if callable(val_stream):
            val_acc = float(val_stream(model, epoch))
        else:
            val_acc = evaluate_accuracy(model, val_stream)
        improved = stopper.update(epoch, val_acc)
        if improved:
            best = Checkpoint(epoch, val_acc, model.state_dict(), model.config)
        record = {
            "epoch": epoch,
            "loss": float(totals[0]),
            "loss_verdict": float(totals[1]),
            "loss_relevance": float(totals[2]),
            "val_accuracy": val_acc,
            "improved": improved,
        }
        history.append(record)
        log.info("epoch %d loss %.4f val %.4f", epoch, totals[0], val_acc)
        if epoch_callback is not None:
            epoch_callback(record)
        if stopper.should_stop:
            break
    model.load_state_dict(best.state)
    model.eval()
    return best, history


# --------------------------------------------------------------------------
# protocols


@dataclass
class FoldResult:
    fold: int
    val_indices: list[int]
    test_indices: list[int]
    best_epoch: int
    val_accuracy: float
    test_accuracy: float
    history: list[dict]
    checkpoint: Checkpoint | None = field(default=None, repr=False)
    checkpoint_path: str | None = None


@dataclass
class ProtocolRun:
    kind: str  # "id_v" | "ood_cv"
    model_config: ModelConfig
    train_config: TrainConfig
    metrics: dict[str, float]
    folds: list[FoldResult] = field(default_factory=list)

    def config_hash(self) -> str:
        blob = json.dumps({"model": self.model_config.to_json(), "train": asdict(self.train_config)}, sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "config_hash": self.config_hash(),
            "model_config": self.model_config.to_json(),
            "train_config": asdict(self.train_config),
            "metrics": self.metrics,
            "folds": [
                {
                    "fold": f.fold,
                    "val_indices": f.val_indices,
                    "test_indices": f.test_indices,
                    "best_epoch": f.best_epoch,
                    "val_accuracy": f.val_accuracy,
                    "test_accuracy": f.test_accuracy,
                    "history": f.history,
                    "checkpoint": f.checkpoint_path,
                }
                for f in self.folds
            ],
        }

    def save(self, directory) -> Path:
        """Write ``run.json`` plus one checkpoint per fold, referenced by relative path."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for f in self.folds:
            if f.checkpoint is not None:
                name = f"fold{f.fold}.ckpt"
                f.checkpoint.save(directory / name)
                f.checkpoint_path = name
        path = directory / "run.json"
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _check_disjoint(splits: Mapping[str, EncodedSplit]) -> None:
    owner: dict[str, str] = {}
    for name, split in splits.items():
        for pid in split.pair_ids:
            if pid in owner:
                raise DataError(f"pair {pid!r} appears in both {owner[pid]} and {name}")
            owner[pid] = name


def run_id_v(
    model_config: ModelConfig,
    train_cfg: TrainConfig,
    in_dist_splits: Mapping[str, EncodedSplit],
    external_set: EncodedSplit | None = None,
    epoch_callback: Callable[[dict], None] | None = None,
) -> ProtocolRun:
    """Train once, checkpoint on in-distribution validation, test in-distribution and externally."""
    _check_disjoint({k: v for k, v in in_dist_splits.items() if k in ("train", "val", "test")})
    model = RedDotModel(model_config, seed=train_cfg.seed)
    best, history = train(model, in_dist_splits["train"], in_dist_splits["val"], train_cfg, epoch_callback)
    metrics = {"val_accuracy": best.val_accuracy, "best_epoch": best.epoch}
    test = in_dist_splits.get("test")
    if test is not None and len(test):
        metrics["test_accuracy"] = evaluate_accuracy(model, test)
    if external_set is not None and len(external_set):
        metrics["external_true_vs_ooc_accuracy"] = evaluate_accuracy(model, external_set, "true_vs_ooc")
    fold = FoldResult(
        fold=0, val_indices=[], test_indices=[], best_epoch=best.epoch, val_accuracy=best.val_accuracy,
        test_accuracy=metrics.get("test_accuracy", float("nan")), history=history, checkpoint=best,
    )
    return ProtocolRun("id_v", model_config, train_cfg, metrics, [fold])


def stratified_folds(labels: Sequence[int], k: int = 3, seed: int = 0) -> list[np.ndarray]:
    """Seeded label-stratified partition into ``k`` folds whose sizes differ by at most one."""
    labels = np.asarray(labels)
    if k < 2:
        raise ConfigError("need at least two folds")
    if len(labels) < k:
        raise ConfigError(f"cannot split {len(labels)} items into {k} folds")
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    cursor = 0
    for value in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == value))
        for item in members:
            folds[cursor % k].append(int(item))
            cursor += 1
    return [np.sort(np.asarray(f, dtype=np.int64)) for f in folds]


def run_ood_cv(
    model_config: ModelConfig,
    train_cfg: TrainConfig,
    in_dist_train: EncodedSplit,
    external_set: EncodedSplit,
    k: int = 3,
    epoch_callback: Callable[[dict], None] | None = None,
) -> ProtocolRun:
    """Per fold: train on the in-distribution set, checkpoint on that external fold, test on the rest."""
    if len(external_set) < k:
        raise ConfigError(f"external set of {len(external_set)} items is smaller than k={k}")
    _check_disjoint({"train": in_dist_train, "external": external_set})
    folds = stratified_folds(external_set.verdict, k, train_cfg.seed)
    results = []
    for f, val_idx in enumerate(folds):
        test_idx = np.sort(np.concatenate([folds[g] for g in range(k) if g != f]))
        val_split = external_set.subset(val_idx)
        test_split = external_set.subset(test_idx)
        model = RedDotModel(model_config, seed=train_cfg.seed)
        best, history = train(
            model, in_dist_train, lambda m, _e: evaluate_accuracy(m, val_split, "true_vs_ooc"), train_cfg,
            epoch_callback,
        )
        results.append(
            FoldResult(
                fold=f,
                val_indices=val_idx.tolist(),
                test_indices=test_idx.tolist(),
                best_epoch=best.epoch,
                val_accuracy=best.val_accuracy,
                test_accuracy=evaluate_accuracy(model, test_split, "true_vs_ooc"),
                history=history,
                checkpoint=best,
            )
        )
    accs = np.array([r.test_accuracy for r in results])
    metrics = {
        "true_vs_ooc_accuracy_mean": float(accs.mean()),
        "true_vs_ooc_accuracy_std": float(accs.std(ddof=0)),
    }
    return ProtocolRun("ood_cv", model_config, train_cfg, metrics, results)


# --------------------------------------------------------------------------
# interpretability


def attention_report(model: RedDotModel, pair_fused: np.ndarray, bundle: EvidenceBundle) -> dict:
    """Per-slot relevance scores, predicted mask and verdict probability for one pair."""
    variant = model.config.variant
    if variant == "baseline":
        raise StateError("the baseline produces no relevance scores")
    was_training = model.training
    model.eval()
    try:
        out = model.forward(np.asarray(pair_fused)[None], bundle.evidence_features[None], "infer")
    finally:
        model.training = was_training
    raw = out.relevance_logits.data[0]
    probs = ad.stable_sigmoid(raw)
    predicted = (probs > model.config.inference_mask_threshold).astype(int)
    tags = bundle.slot_tags()
    slots = []
    for i in range(len(bundle)):
        slots.append(
            {
                "slot": i,
                "tag": tags[i],
                "evidence_id": bundle.evidence_ids[i] if bundle.evidence_ids else None,
                "score": float(raw[i]),
                "probability": float(probs[i]),
                "predicted_relevant": int(predicted[i]),
                "label": int(bundle.relevance_labels[i]),
                "padded": bool(bundle.padded_flags[i]),
            }
        )
    return {
        "pair_id": bundle.pair_id,
        "variant": variant,
        "score_kind": "guided_attention" if variant in ("ssl_ga", "dsl_ga") else "relevance_head",
        "verdict_probability": float(ad.stable_sigmoid(out.verdict_logit.data)[0]),
        "slots": slots,
    }


def format_attention_report(report: dict) -> str:
    lines = [
        f"pair {report['pair_id']}  variant {report['variant']}  "
        f"P(misinformation) = {report['verdict_probability']:.3f}",
        f"{'slot':>4}  {'tag':<3}  {'score':>9}  {'prob':>6}  {'pred':>4}  {'label':>5}",
    ]
    for s in report["slots"]:
        lines.append(
            f"{s['slot']:>4}  {s['tag']:<3}  {s['score']:>9.4f}  {s['probability']:>6.3f}  "
            f"{s['predicted_relevant']:>4}  {s['label']:>5}"
        )
    return "\n".join(lines)


def format_table(title: str, header: Sequence[str], rows: Sequence[Sequence]) -> str:
    """Plain-text table in the method-per-row layout used for result summaries."""
    cells = [list(map(str, header))] + [[_cell(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    rule = "+".join("-" * (w + 2) for w in widths)
    out = [title, rule]
    for j, row in enumerate(cells):
        out.append("|".join(f" {c:<{w}} " for c, w in zip(row, widths)))
        if j == 0:
            out.append(rule)
    out.append(rule)
    return "\n".join(out)


def _cell(value) -> str:
    if isinstance(value, float):
        return f"{100 * value:.1f}"
    if isinstance(value, tuple) and len(value) == 2:
        return f"{100 * value[0]:.1f} ({100 * value[1]:.1f})"
    return str(value)
