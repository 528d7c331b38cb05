"""Client objective: cross-entropy + alpha * prompt distance + beta * head L2."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .model import (
    TOWERS,
    AnswerHead,
    Backbone,
    HeadParams,
    InputError,
    PromptSet,
    answer_forward,
    encode,
)
from .numerics import DimensionError, Tensor


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.001

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over the batch (a single row is a batch of one)."""
    if logits.ndim == 1:
        logits = nx.reshape(logits, (1, logits.shape[0]))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: {n} rows but {labels.size} labels")
    if np.any((labels < 0) | (labels >= k)):
        raise InputError(f"cross_entropy: labels {labels.tolist()} outside [0, {k})")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    picked = nx.sum_(nx.log_softmax_lastdim(logits) * Tensor(onehot))
    return nx.scale(picked, -1.0 / n)


def _values(p) -> Tensor:
    if isinstance(p, PromptSet):
        return Tensor(p.values)
    return p


def distance_loss(local, shared) -> Tensor:
    """1 - cos(local, shared); 0 (and no gradient) while ``shared`` is all zero.

    ``shared`` is treated as a constant.
    """
    if isinstance(local, PromptSet) and isinstance(shared, PromptSet) and local.modality != shared.modality:
        raise DimensionError(f"distance_loss: {local.modality} vs {shared.modality} prompts")
    lv, sv = _values(local), _values(shared)
    if lv.shape != sv.shape:
        raise DimensionError(f"distance_loss: shapes {lv.shape} and {sv.shape} differ")
    if not np.any(sv.data):
        return Tensor(0.0)
    return nx.scale(nx.cosine_similarity(lv, Tensor(sv.data)), -1.0) + 1.0


def regularizer(head: HeadParams | AnswerHead) -> Tensor:
    """Squared L2 norm of both weight matrices (biases excluded)."""
    if isinstance(head, AnswerHead):
        head = HeadParams.of(head)
    return nx.l2_norm_squared(head.w1) + nx.l2_norm_squared(head.w2)


@dataclass
class LossParts:
    total: Tensor
    ce: float
    ld: float
    reg: float


@dataclass
class Batch:
    image_tokens: np.ndarray  # (B, S_img)
    question_tokens: np.ndarray  # (B, S_q)
    question_valid: np.ndarray  # (B, S_q) bool
    labels: np.ndarray  # (B,)

    def __len__(self) -> int:
        return len(self.labels)


def client_loss(
    batch: Batch,
    backbone: Backbone,
    local: dict[str, Tensor | None],
    shared: dict[str, Tensor | None],
    head: HeadParams,
    weights: LossWeights,
    train: bool = True,
    rng: np.random.Generator | None = None,
    dropout_mask: nx.DropoutMask | None = None,
) -> LossParts:
    """Mean CE + alpha * mean per-tower distance loss + beta * R.

    ``local``/``shared`` map tower name to the prompt tensor fed into that tower,
    or ``None`` when the tower runs without prompts; towers without a local
    prompt contribute no distance term.
    """
    feats = {}
    for tower in TOWERS:
        tokens = batch.image_tokens if tower == "image" else batch.question_tokens
        valid = None if tower == "image" else batch.question_valid
        feats[tower] = encode(tokens, tower, local.get(tower), shared.get(tower), backbone, valid)
    logits = answer_forward(feats["image"], feats["text"], head, train=train, rng=rng, mask=dropout_mask)
    ce = cross_entropy(logits, batch.labels)

    dists = [
        distance_loss(local[t], shared[t])
        for t in TOWERS
        if local.get(t) is not None and shared.get(t) is not None
    ]
    ld = nx.scale(dists[0] if len(dists) == 1 else dists[0] + dists[1], 1.0 / len(dists)) if dists else Tensor(0.0)
    reg = regularizer(head)
    total = ce + nx.scale(ld, weights.alpha) + nx.scale(reg, weights.beta)
    return LossParts(total=total, ce=ce.item(), ld=ld.item(), reg=reg.item())
