"""Losses for both training stages.

Stage one pairs every image with its own generated description and pulls the
pair together against the rest of the batch from both directions. Stage two
combines the label-smoothed identity loss on classifier logits, a batch-hard
triplet loss on raw image features, and an image-to-text cross-entropy that
scores each image against the merged descriptions of every train identity.
All softmaxes are computed through stabilized log-sum-exp.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .encoders import FeatureVector

VALID_FLAGS = frozenset({"id", "tri", "i2tce", "i2t", "t2i"})
DEFAULT_FLAGS = frozenset({"id", "tri", "i2tce"})


def _unwrap(x) -> torch.Tensor:
    if isinstance(x, FeatureVector):
        return x.values
    return torch.as_tensor(x, dtype=torch.float64) if not torch.is_tensor(x) else x


def cosine_sim(v, t) -> torch.Tensor:
    """Cosine similarity of two equal-length vectors, in [-1, 1]."""
    v, t = _unwrap(v), _unwrap(t)
    if v.shape != t.shape or v.ndim != 1:
        raise ValueError(f"expected two equal-length vectors, got {v.shape} and {t.shape}")
    nv, nt = torch.linalg.vector_norm(v), torch.linalg.vector_norm(t)
    if float(nv.detach()) == 0.0 or float(nt.detach()) == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm input")
    return (v @ t) / (nv * nt)


def similarity_matrix(image_features, text_features, temperature=1.0) -> torch.Tensor:
    """Temperature-scaled cosine similarities, image rows by text columns."""
    V, T = _unwrap(image_features), _unwrap(text_features)
    V = V / torch.linalg.vector_norm(V, dim=-1, keepdim=True)
    T = T / torch.linalg.vector_norm(T, dim=-1, keepdim=True)
    return temperature * (V @ T.T)


def _check_square(sim: torch.Tensor) -> torch.Tensor:
    sim = _unwrap(sim)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"contrastive loss needs a square matrix, got {tuple(sim.shape)}")
    return sim


def i2t_loss(sim) -> torch.Tensor:
    """Image-to-text contrastive loss: row-wise softmax, diagonal pairing, batch mean."""
    sim = _check_square(sim)
    log_p = torch.log_softmax(sim, dim=1)
    return -log_p.diagonal().mean()


def t2i_loss(sim) -> torch.Tensor:
    """Text-to-image contrastive loss: column-wise softmax, diagonal pairing, batch mean."""
    sim = _check_square(sim)
    log_p = torch.log_softmax(sim, dim=0)
    return -log_p.diagonal().mean()


def stage1_loss(sim) -> torch.Tensor:
    """Sum of the two contrastive directions over one batch."""
    sim = _check_square(sim)
    return i2t_loss(sim) + t2i_loss(sim)


@dataclass(frozen=True)
class SmoothedTargets:
    """Label distribution mixing a one-hot with the uniform by weight epsilon."""

    q: torch.Tensor
    epsilon: float
    true_class: int


def smoothed_targets(y: int, num_classes: int, epsilon: float) -> SmoothedTargets:
    if not 0 <= y < num_classes:
        raise ValueError(f"class {y} out of range for {num_classes} classes")
    if not 0 <= epsilon < 1:
        raise ValueError(f"smoothing weight must be in [0, 1), got {epsilon}")
    q = torch.full((num_classes,), epsilon / num_classes, dtype=torch.float64)
    q[y] = (1.0 - epsilon) + epsilon / num_classes
    return SmoothedTargets(q=q, epsilon=epsilon, true_class=y)


def identity_loss(logits, y, epsilon: float = 0.1) -> torch.Tensor:
    """Cross-entropy against label-smoothed targets.

    Accepts one logits vector with an int label, or a BxN matrix with a length-B
    label vector (mean over the batch).
    """
    logits = _unwrap(logits)
    if not torch.isfinite(logits).all():
        raise ValueError("identity loss requires finite logits")
    if logits.ndim == 1:
        logits = logits.unsqueeze(0)
        labels = torch.as_tensor([y], dtype=torch.long)
    else:
        labels = torch.as_tensor(y, dtype=torch.long)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ValueError("labels must align with logits rows")
    n = logits.shape[1]
    if labels.min() < 0 or labels.max() >= n:
        raise ValueError("label out of range")
    if not 0 <= epsilon < 1:
        raise ValueError(f"smoothing weight must be in [0, 1), got {epsilon}")
    log_p = torch.log_softmax(logits, dim=1)
    nll = -log_p.gather(1, labels.unsqueeze(1)).squeeze(1)
    uniform = -log_p.mean(dim=1)
    return ((1.0 - epsilon) * nll + epsilon * uniform).mean()


def triplet_loss(features, labels, margin: float = 0.3) -> torch.Tensor:
    """Batch-hard triplet loss on Euclidean distances over raw features.

    Per anchor: hardest positive is the farthest same-label sample, hardest
    negative the closest different-label sample; the hinge
    ``max(0, d_p - d_n + margin)`` is averaged over all anchors. Every label in
    the batch must occur at least twice and at least one other label must be
    present.
    """
    feats = _unwrap(features)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if feats.ndim != 2 or labels.ndim != 1 or feats.shape[0] != labels.shape[0]:
        raise ValueError("features must be BxD with one label per row")
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(len(labels), dtype=torch.bool)
    pos_mask = same & ~eye
    neg_mask = ~same
    if not pos_mask.any(dim=1).all():
        raise ValueError("every anchor needs a same-label sample in the batch")
    if not neg_mask.any(dim=1).all():
        raise ValueError("every anchor needs a different-label sample in the batch")

    dist = torch.cdist(feats, feats, p=2, compute_mode="donot_use_mm_for_euclid_dist")
    d_pos = dist.masked_fill(~pos_mask, float("-inf")).max(dim=1).values
    d_neg = dist.masked_fill(~neg_mask, float("inf")).min(dim=1).values
    return torch.clamp(d_pos - d_neg + margin, min=0.0).mean()


def i2tce_loss(
    image_features,
    text_features,
    labels,
    epsilon: float = 0.1,
    temperature=1.0,
    num_identities: int | None = None,
) -> torch.Tensor:
    """Label-smoothed cross-entropy of each image against every identity's description.

    ``text_features`` must hold one row per train identity, indexed by label.
    """
    V = _unwrap(image_features)
    if V.ndim == 1:
        V = V.unsqueeze(0)
        labels = [labels] if isinstance(labels, int) else labels
    T = _unwrap(text_features)
    if T.ndim != 2:
        raise ValueError("text_features must be N x d")
    if num_identities is not None and T.shape[0] != num_identities:
        raise ValueError(
            f"need one description per identity: got {T.shape[0]}, expected {num_identities}"
        )
    logits = similarity_matrix(V, T, temperature)
    return identity_loss(logits, labels, epsilon)


def stage2_loss(
    image_features,
    labels,
    merged_descriptions=None,
    classifier_logits=None,
    *,
    temperature=1.0,
    margin: float = 0.3,
    epsilon: float = 0.1,
    flags=DEFAULT_FLAGS,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Sum of the second-stage terms selected by ``flags``, with a per-term breakdown.

    Flags: ``id`` (classifier cross-entropy with smoothing), ``tri``
    (batch-hard triplet), ``i2tce`` (image against all merged descriptions),
    plus the first-stage-style ``i2t``/``t2i`` contrastive terms routed over
    the batch for ablations. The contrastive and i2tce terms need
    ``merged_descriptions``; ``id`` needs ``classifier_logits``.
    """
    flags = frozenset(flags)
    if not flags:
        raise ValueError("no loss terms enabled")
    unknown = flags - VALID_FLAGS
    if unknown:
        raise ValueError(f"unknown loss flags: {sorted(unknown)}")

    V = _unwrap(image_features)
    labels = torch.as_tensor(labels, dtype=torch.long)
    total = torch.zeros((), dtype=V.dtype)
    breakdown: dict[str, float] = {}

    def add(name: str, value: torch.Tensor):
        nonlocal total
        total = total + value
        breakdown[name] = float(value.detach())

    if "id" in flags:
        if classifier_logits is None:
            raise ValueError("'id' term needs classifier logits")
        add("id", identity_loss(classifier_logits, labels, epsilon))
    if "tri" in flags:
        add("tri", triplet_loss(V, labels, margin))
    if "i2tce" in flags:
        if merged_descriptions is None:
            raise ValueError("'i2tce' term needs merged descriptions")
        add("i2tce", i2tce_loss(V, merged_descriptions, labels, epsilon, temperature))
    if "i2t" in flags or "t2i" in flags:
        if merged_descriptions is None:
            raise ValueError("contrastive terms need merged descriptions")
        T = _unwrap(merged_descriptions)
        sim = similarity_matrix(V, T[labels], temperature)
        if "i2t" in flags:
            add("i2t", i2t_loss(sim))
        if "t2i" in flags:
            add("t2i", t2i_loss(sim))
    return total, breakdown
