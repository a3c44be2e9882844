"""The RED-DOT network and its six forward variants.

Token layout is always ``[CLS; claim tokens; evidence tokens]`` with learned
positional embeddings added to the whole sequence. Encoder layers are
post-norm with a GELU feed-forward block.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .errors import ConfigError, ShapeError, StateError
from .fusion import FULL, FusionConfig, fuse
from .retrieval import EvidenceBundle

VARIANTS = ("baseline", "ssl", "ssl_ga", "dsl", "dsl_ga", "dsl_d2")
HEAD_VARIANTS = ("ssl", "dsl", "dsl_d2")
GA_VARIANTS = ("ssl_ga", "dsl_ga")
DUAL_STAGE = ("dsl", "dsl_ga", "dsl_d2")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "dsl"
    dim: int = 512
    layers: int = 4
    ff_width: int = 128
    heads: int = 8
    dropout: float = 0.1
    M: int = 1
    K: int = 1
    fusion: FusionConfig = FULL
    inference_mask_threshold: float = 0.5
    relevance_hidden: int = 256
    max_length: int | None = None

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if isinstance(self.fusion, (list, tuple, str)):
            object.__setattr__(self, "fusion", FusionConfig.parse(self.fusion))
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} must be divisible by heads {self.heads}")
        if self.dim % 2:
            raise ConfigError("dim must be even (verdict head hidden width is dim/2)")
        if self.layers < 1 or self.ff_width < 1 or self.relevance_hidden < 1:
            raise ConfigError("layers, ff_width and relevance_hidden must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.M < 0 or self.K < 0:
            raise ConfigError("M and K must be non-negative")
        if self.variant != "baseline" and self.M + self.K < 1:
            raise ConfigError(f"variant {self.variant} needs M + K >= 1")
        if self.max_length is None:
            object.__setattr__(self, "max_length", self.sequence_length)
        if self.max_length < self.sequence_length:
            raise ConfigError(f"max_length {self.max_length} < sequence length {self.sequence_length}")

    @property
    def n_evidence(self) -> int:
        """Evidence tokens the encoder sees during training."""
        if self.variant == "baseline":
            return self.M + self.K
        return 2 * (self.M + self.K)

    @property
    def sequence_length(self) -> int:
        return 1 + len(self.fusion) + self.n_evidence

    def to_json(self) -> dict:
        out = asdict(self)
        out["fusion"] = list(self.fusion.ops)
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        data = dict(obj)
        if "fusion" in data:
            data["fusion"] = FusionConfig.parse(data["fusion"])
        return cls(**data)


@dataclass
class ForwardOutput:
    verdict_logit: Tensor  # (B,)
    relevance_logits: Tensor | None  # (B, E); GA variants: raw CLS-row scores
    token_outputs: Tensor  # (B, L, dim), stage used for the verdict
    stage1_outputs: Tensor | None = None  # dual-stage only
    attention_cls_scores: Tensor | None = None  # GA variants
    applied_mask: np.ndarray | None = None  # dual-stage only
    attention_matrix: np.ndarray | None = None  # GA variants, (B, L, L)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def apply_evidence_mask(evidence_tokens: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero whole evidence vectors where ``mask`` is 0; the token count is unchanged."""
    evidence_tokens = np.asarray(evidence_tokens)
    mask = np.asarray(mask)
    if mask.shape != evidence_tokens.shape[:-1]:
        raise ShapeError(f"mask shape {mask.shape} does not match evidence {evidence_tokens.shape[:-1]}")
    return np.where(mask[..., None] != 0, evidence_tokens, np.zeros((), dtype=evidence_tokens.dtype))


def attention_matrix(d: Tensor) -> Tensor:
    """Scaled token Gram matrix ``d @ d.T / dim``."""
    dim = d.shape[-1]
    return ad.matmul(d, ad.transpose(d, tuple(range(d.ndim - 2)) + (d.ndim - 1, d.ndim - 2))) * (1.0 / dim)


def guided_attention_scores(d: Tensor, n_evidence: int) -> tuple[Tensor, Tensor]:
    """CLS row of the Gram matrix restricted to the trailing evidence positions.

    Returns ``(scores, matrix)``; scores are raw (no softmax, no sigmoid).
    """
    length = d.shape[-2]
    if length < 1 + n_evidence:
        raise ShapeError(f"sequence of {length} tokens cannot hold CLS plus {n_evidence} evidence")
    a = attention_matrix(d)
    return a[..., 0, length - n_evidence:], a


class RedDotModel:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.training = True
        self.rng = np.random.default_rng([seed, 1])
        self.params = ParameterSet()
        init = np.random.default_rng([seed, 0])
        c = config
        self._add("cls_token", init.normal(0.0, 0.02, c.dim))
        self._add("positional", init.normal(0.0, 0.02, (c.max_length, c.dim)))
        self._add_encoder("encoder", init)
        if c.variant == "dsl_d2":
            self._add_encoder("encoder2", init)
        self._add_head("verdict", c.dim // 2, init)
        if c.variant in HEAD_VARIANTS:
            self._add_head("relevance", c.relevance_hidden, init)

    # -- construction
    def _add(self, name: str, value: np.ndarray) -> None:
        self.params.add(name, np.asarray(value, dtype=self.dtype))

    def _add_linear(self, name: str, fan_in: int, fan_out: int, init) -> None:
        self._add(f"{name}.weight", _xavier(init, fan_in, fan_out))
        self._add(f"{name}.bias", np.zeros(fan_out))

    def _add_norm(self, name: str, dim: int) -> None:
        self._add(f"{name}.gain", np.ones(dim))
        self._add(f"{name}.shift", np.zeros(dim))

    def _add_encoder(self, prefix: str, init) -> None:
        c = self.config
        for i in range(c.layers):
            p = f"{prefix}.{i:02d}"
            for proj in ("q", "k", "v", "o"):
                self._add_linear(f"{p}.attn.{proj}", c.dim, c.dim, init)
            self._add_norm(f"{p}.norm1", c.dim)
            self._add_linear(f"{p}.ff.in", c.dim, c.ff_width, init)
            self._add_linear(f"{p}.ff.out", c.ff_width, c.dim, init)
            self._add_norm(f"{p}.norm2", c.dim)

    def _add_head(self, prefix: str, hidden: int, init) -> None:
        self._add_norm(f"{prefix}.norm", self.config.dim)
        self._add_linear(f"{prefix}.hidden", self.config.dim, hidden, init)
        self._add_linear(f"{prefix}.out", hidden, 1, init)

    # -- modes and state
    def train(self) -> "RedDotModel":
        self.training = True
        return self

    def eval(self) -> "RedDotModel":
        self.training = False
        return self

    def astype(self, dtype) -> "RedDotModel":
        self.dtype = np.dtype(dtype)
        self.params.astype(self.dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return self.params.state_dict()

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        self.params.load_state_dict(state)

    def copy_encoder_to_second(self) -> None:
        """Initialise the second-stage encoder as an exact copy of the first."""
        if self.config.variant != "dsl_d2":
            raise StateError("only dsl_d2 has a second encoder")
        for name, tensor in self.params.items():
            if name.startswith("encoder."):
                self.params["encoder2." + name[len("encoder."):]].data = tensor.data.copy()

    def save(self, path) -> None:
        ad.save_checkpoint(self.params, path, {"model": self.config.to_json()})

    @classmethod
    def load(cls, path, dtype=np.float32) -> "RedDotModel":
        config, values, first, second, step = ad.load_checkpoint(path)
        model = cls(ModelConfig.from_json(config["model"]), dtype=dtype)
        model.load_state_dict(values)
        model.params.first_moment = {k: v.astype(dtype) for k, v in first.items()}
        model.params.second_moment = {k: v.astype(dtype) for k, v in second.items()}
        model.params.step = step
        return model

    # -- building blocks
    def _linear(self, x: Tensor, name: str) -> Tensor:
        return ad.linear(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def _norm(self, x: Tensor, name: str) -> Tensor:
        return ad.layer_norm(x, self.params[f"{name}.gain"], self.params[f"{name}.shift"], eps=1e-5)

    def _dropout(self, x: Tensor) -> Tensor:
        return ad.dropout(x, self.config.dropout, self.training, self.rng)

    def _encoder_layer(self, x: Tensor, p: str) -> Tensor:
        c = self.config
        attn = {}
        for proj in ("q", "k", "v", "o"):
            attn[f"w_{proj}"] = self.params[f"{p}.attn.{proj}.weight"]
            attn[f"b_{proj}"] = self.params[f"{p}.attn.{proj}.bias"]
        a = ad.multi_head_self_attention(x, c.heads, attn, c.dropout, self.training, self.rng)
        x = self._norm(x + self._dropout(a), f"{p}.norm1")
        f = self._linear(self._dropout(ad.gelu(self._linear(x, f"{p}.ff.in"))), f"{p}.ff.out")
        return self._norm(x + self._dropout(f), f"{p}.norm2")

    def encode(self, claim_tokens: np.ndarray, evidence_tokens: np.ndarray | None, encoder: str = "encoder") -> Tensor:
        """Run ``[CLS; claim; evidence] + positions`` through an encoder.

        Inputs may be unbatched ``(n, dim)`` or batched ``(B, n, dim)``.
        """
        dim = self.config.dim
        claim = np.asarray(claim_tokens, dtype=self.dtype)
        single = claim.ndim == 2
        if single:
            claim = claim[None]
        if evidence_tokens is None:
            evidence = np.zeros((claim.shape[0], 0, dim), dtype=self.dtype)
        else:
            evidence = np.asarray(evidence_tokens, dtype=self.dtype)
            if single:
                evidence = evidence[None]
        if claim.shape[-1] != dim or evidence.shape[-1] != dim:
            raise ShapeError(f"token width must equal model dim {dim}")
        if evidence.shape[0] != claim.shape[0]:
            raise ShapeError("claim and evidence batch sizes differ")
        batch = claim.shape[0]
        length = 1 + claim.shape[1] + evidence.shape[1]
        if length > self.config.max_length:
            raise ConfigError(f"sequence length {length} exceeds max_length {self.config.max_length}")
        cls = ad.reshape(self.params["cls_token"], (1, 1, dim)) + Tensor(np.zeros((batch, 1, dim), dtype=self.dtype))
        x = ad.concat([cls, Tensor(np.concatenate([claim, evidence], axis=1))], axis=1)
        x = x + self.params["positional"][:length]
        for i in range(self.config.layers):
            x = self._encoder_layer(x, f"{encoder}.{i:02d}")
        if single:
            x = ad.reshape(x, (length, dim))
        return x

    def predict_verdict(self, d_cls: Tensor) -> Tensor:
        h = ad.gelu(self._linear(self._norm(d_cls, "verdict.norm"), "verdict.hidden"))
        logit = self._linear(h, "verdict.out")
        return ad.reshape(logit, logit.shape[:-1])

    def predict_relevance_head(self, d_evidence: Tensor) -> Tensor:
        if self.config.variant not in HEAD_VARIANTS:
            raise StateError(f"variant {self.config.variant} has no relevance head")
        h = ad.gelu(self._linear(self._norm(d_evidence, "relevance.norm"), "relevance.hidden"))
        logit = self._linear(h, "relevance.out")
        return ad.reshape(logit, logit.shape[:-1])

    # -- full forward
    def forward(
        self,
        claim_tokens: np.ndarray,
        evidence_tokens: np.ndarray | None,
        mode: str = "infer",
        teacher_labels: np.ndarray | None = None,
    ) -> ForwardOutput:
        """Batched forward pass; ``claim_tokens`` is ``(B, n_ops, dim)``, evidence ``(B, E, dim)``.

        The baseline consumes whatever evidence it is given; callers pass it
        the relevant slots only.
        """
        if mode not in ("train", "infer"):
            raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
        variant = self.config.variant
        claim = np.asarray(claim_tokens, dtype=self.dtype)
        batch = claim.shape[0]
        if evidence_tokens is None:
            evidence = np.zeros((batch, 0, self.config.dim), dtype=self.dtype)
        else:
            evidence = np.asarray(evidence_tokens, dtype=self.dtype)
        n_ev = evidence.shape[1]
        if variant != "baseline" and n_ev == 0:
            raise ShapeError(f"variant {variant} needs evidence tokens")

        d1 = self.encode(claim, evidence)
        relevance = ga_scores = gram = None
        if variant in HEAD_VARIANTS:
            relevance = self.predict_relevance_head(d1[:, d1.shape[1] - n_ev:])
        elif variant in GA_VARIANTS:
            ga_scores, a = guided_attention_scores(d1, n_ev)
            relevance, gram = ga_scores, a.data

        if variant not in DUAL_STAGE:
            return ForwardOutput(
                verdict_logit=self.predict_verdict(d1[:, 0]),
                relevance_logits=relevance,
                token_outputs=d1,
                attention_cls_scores=ga_scores,
                attention_matrix=gram,
            )

        if mode == "train":
            if teacher_labels is None:
                raise StateError("dual-stage training needs teacher relevance labels")
            mask = np.asarray(teacher_labels).astype(np.int64)
            if mask.shape != (batch, n_ev):
                raise ShapeError(f"teacher labels {mask.shape} do not match evidence ({batch}, {n_ev})")
        else:
            probs = ad.stable_sigmoid(relevance.data)
            mask = (probs > self.config.inference_mask_threshold).astype(np.int64)
        second = "encoder2" if variant == "dsl_d2" else "encoder"
        d2 = self.encode(claim, apply_evidence_mask(evidence, mask), encoder=second)
        return ForwardOutput(
            verdict_logit=self.predict_verdict(d2[:, 0]),
            relevance_logits=relevance,
            token_outputs=d2,
            stage1_outputs=d1,
            attention_cls_scores=ga_scores,
            applied_mask=mask,
            attention_matrix=gram,
        )

    __call__ = forward


def relevant_only(evidence: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Keep the label-1 slots of each row, preserving order; rows must agree on the count."""
    evidence = np.asarray(evidence)
    labels = np.asarray(labels)
    counts = labels.sum(axis=-1)
    if labels.ndim == 1:
        return evidence[labels == 1]
    if len(set(counts.tolist())) > 1:
        raise ShapeError("rows hold different numbers of relevant slots")
    order = np.argsort(labels == 0, axis=-1, kind="stable")[:, : int(counts[0]) if len(counts) else 0]
    return np.take_along_axis(evidence, order[..., None], axis=1)


def forward(
    pair_fused: np.ndarray,
    bundle: EvidenceBundle | None,
    model: RedDotModel,
    mode: str = "infer",
    teacher_labels: np.ndarray | None = None,
) -> ForwardOutput:
    """Single-pair forward from fused claim tokens and an evidence bundle."""
    claim = np.asarray(pair_fused)[None]
    if bundle is None:
        evidence = None
    elif model.config.variant == "baseline":
        evidence = relevant_only(bundle.evidence_features, bundle.relevance_labels)[None]
    else:
        evidence = bundle.evidence_features[None]
    teacher = None if teacher_labels is None else np.asarray(teacher_labels)[None]
    return model.forward(claim, evidence, mode, teacher)


def multitask_loss(output: ForwardOutput, y_v: np.ndarray, y_e: np.ndarray | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(L, L_v, L_e)`` with ``L = L_v + L_e``; ``L_e`` is 0 without relevance outputs."""
    y_v = np.asarray(y_v)
    if y_v.shape != output.verdict_logit.shape:
        raise ShapeError(f"verdict labels {y_v.shape} vs logits {output.verdict_logit.shape}")
    loss_v = ad.bce_with_logits(output.verdict_logit, y_v)
    if output.relevance_logits is None:
        loss_e = Tensor(np.zeros((), dtype=loss_v.dtype))
        return loss_v + loss_e, loss_v, loss_e
    if y_e is None:
        raise ShapeError("relevance labels required for a multi-task output")
    y_e = np.asarray(y_e)
    if y_e.shape != output.relevance_logits.shape:
        raise ShapeError(f"relevance labels {y_e.shape} vs logits {output.relevance_logits.shape}")
    loss_e = ad.bce_with_logits(output.relevance_logits, y_e)
    return loss_v + loss_e, loss_v, loss_e


def fuse_batch(images: np.ndarray, texts: np.ndarray, config: ModelConfig) -> np.ndarray:
    return fuse(images, texts, config.fusion)
