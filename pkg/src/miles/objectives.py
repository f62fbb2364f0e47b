"""Training objectives: symmetric InfoNCE and masked-feature regression.

The contrastive term treats every other caption (or clip) in the batch
as a negative:

    nce(x_i, Y, i) = -log( exp(x_i . y_i / tau) / sum_j exp(x_i . y_j / tau) )
                   = logsumexp_j(x_i . y_j / tau) - x_i . y_i / tau

summed over both retrieval directions.  The masked-modeling term is the
plain (not squared) Euclidean distance between student features and
snapshot targets at masked positions, averaged over each sample's
masked tokens and summed over the batch.  The total objective is their
sum; during the warm-up epoch the masked term is dropped from the graph
entirely and the total *is* the contrastive tensor.
"""

from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError

log = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-4


def nce(x: Tensor, gallery: Tensor, index: int, tau: float) -> Tensor:
    """One query ``x`` against ``gallery`` rows; row ``index`` is positive."""
    if tau <= 0.0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if x.ndim != 1 or gallery.ndim != 2 or gallery.shape[1] != x.shape[0]:
        raise DimensionError(f"bad nce shapes: query {x.shape}, gallery {gallery.shape}")
    if not 0 <= index < gallery.shape[0]:
        raise ContractError(f"positive index {index} outside gallery of {gallery.shape[0]}")
    logits = ad.reshape(ad.matmul(gallery, ad.reshape(x, (x.shape[0], 1))), (gallery.shape[0],))
    logits = logits * (1.0 / tau)
    return ad.logsumexp(logits, axis=0) - logits[index]


def contrastive_loss(
    video_cls: Tensor,
    text_cls: Tensor,
    tau: float,
    reduction: str = "sum",
) -> Tensor:
    """Symmetric in-batch InfoNCE over aligned (video, text) rows."""
    if tau <= 0.0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if video_cls.shape != text_cls.shape or video_cls.ndim != 2:
        raise DimensionError(
            f"embedding shapes differ: {video_cls.shape} vs {text_cls.shape}"
        )
    if reduction not in ("sum", "mean"):
        raise ConfigError(f"unknown reduction '{reduction}'")
    for name, t in (("video", video_cls), ("text", text_cls)):
        norms = np.linalg.norm(t.data, axis=1)
        if np.abs(norms - 1.0).max() > NORM_TOLERANCE:
            raise ContractError(f"{name} embeddings are not unit-norm")

    b = video_cls.shape[0]
    scores = ad.matmul(video_cls, ad.transpose(text_cls, (1, 0))) * (1.0 / tau)
    eye = Tensor(np.eye(b, dtype=video_cls.data.dtype))
    positives = ad.sum_(scores * eye)
    v2t = ad.sum_(ad.logsumexp(scores, axis=1)) - positives
    t2v = ad.sum_(ad.logsumexp(scores, axis=0)) - positives
    total = v2t + t2v
    if reduction == "mean":
        total = total * (1.0 / (2.0 * b))
    return total


def mvm_loss(
    student: Tensor,
    targets: Tensor,
    counts: np.ndarray,
    squared: bool = False,
) -> Tensor:
    """Per-token distance to the targets, token-mean per sample, batch sum.

    ``student`` and ``targets`` are (K_total, D) with rows grouped by
    sample; ``counts`` gives each sample's group size.  Targets must be
    constants (no gradient path).  An entirely empty mask yields zero
    with a logged warning.
    """
    if targets.requires_grad:
        raise ContractError("mvm targets must not require gradients")
    if student.shape != targets.shape:
        raise DimensionError(
            f"student/target shapes differ: {student.shape} vs {targets.shape}"
        )
    total = int(np.sum(counts))
    if student.shape[0] != total:
        raise DimensionError(f"{student.shape[0]} feature rows but counts sum to {total}")
    if total == 0:
        log.warning("mvm_loss called with no masked positions; returning zero")
        return Tensor(np.zeros((), dtype=student.data.dtype))

    diff = student - targets
    per_token = ad.sum_(diff * diff, axis=1)
    if not squared:
        per_token = ad.sqrt(per_token)
    weights = np.repeat(
        np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0), counts
    ).astype(student.data.dtype)
    return ad.sum_(per_token * Tensor(weights))


def total_loss(
    contrastive: Tensor,
    mvm: Tensor | None,
    warmup_active: bool,
    mvm_weight: float = 1.0,
) -> Tensor:
    """Contrastive plus weighted masked term; warm-up returns contrastive as-is."""
    if warmup_active or mvm is None:
        return contrastive
    if mvm_weight == 1.0:
        return contrastive + mvm
    return contrastive + mvm * mvm_weight
