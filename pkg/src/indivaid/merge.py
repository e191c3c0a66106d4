"""Second-stage merge of per-image description features into one vector per identity.

The description bank caches every train image's text feature once (the
generator and text encoder are frozen by then), stored L2-normalized so the
merge depends on direction only. The attention module is a single-head scaled
dot-product over an identity's cached features with one shared learnable query
offset by the mean feature; key and value maps start as the identity matrix so
an untrained merge is close to a uniform average.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import load_image
from .encoders import FeatureVector, image_to_tensor
from .prompts import describe_images


@dataclass(frozen=True)
class DescriptionBank:
    """Frozen per-identity matrices of cached unit-norm description features."""

    per_identity: dict[int, torch.Tensor]

    def __post_init__(self):
        n = len(self.per_identity)
        if set(self.per_identity) != set(range(n)):
            raise ValueError("bank must cover identities 0..N-1 exactly")
        for ident, feats in self.per_identity.items():
            if feats.ndim != 2 or feats.shape[0] == 0:
                raise ValueError(f"identity {ident} has no cached features")

    @property
    def num_identities(self) -> int:
        return len(self.per_identity)

    @property
    def counts(self) -> dict[int, int]:
        return {ident: feats.shape[0] for ident, feats in self.per_identity.items()}

    @property
    def total(self) -> int:
        return sum(feats.shape[0] for feats in self.per_identity.values())


def build_description_bank(records, state, encoders, batch_size: int = 32) -> DescriptionBank:
    """Cache one description feature per train image, grouped by identity.

    Features are computed under no_grad (everything feeding them is frozen in
    the second stage) and stored unit-norm in ascending record order.
    """
    train = [r for r in records if r.split == "train"]
    if not train:
        raise ValueError("no train records to build a description bank from")
    resolution = encoders.config.resolution

    collected: dict[int, list[torch.Tensor]] = {}
    with torch.no_grad():
        for start in range(0, len(train), batch_size):
            chunk = train[start : start + batch_size]
            images = torch.stack(
                [image_to_tensor(load_image(r.path, resolution)) for r in chunk]
            )
            feats = encoders.encode_image(images, trainable=False)
            ids = [r.identity for r in chunk]
            descriptions = describe_images(state, encoders, feats, ids)
            descriptions = descriptions / torch.linalg.vector_norm(
                descriptions, dim=1, keepdim=True
            )
            for ident, row in zip(ids, descriptions):
                collected.setdefault(ident, []).append(row)

    per_identity = {ident: torch.stack(rows) for ident, rows in collected.items()}
    return DescriptionBank(per_identity=per_identity)


def _canonical_order(features: torch.Tensor) -> torch.Tensor:
    # Lexicographic row order fixes the float summation order, making the
    # merge bit-identical under any permutation of its inputs.
    arr = features.detach().cpu().numpy()
    return torch.from_numpy(np.lexsort(arr.T[::-1]).copy())


class AttentionMerge(nn.Module):
    """Single-head attention pooling over a set of description features."""

    def __init__(self, embed_dim: int):
        super().__init__()
        self.embed_dim = embed_dim
        self.query = nn.Parameter(torch.zeros(embed_dim, dtype=torch.float64))
        self.key_map = nn.Parameter(torch.eye(embed_dim, dtype=torch.float64))
        self.value_map = nn.Parameter(torch.eye(embed_dim, dtype=torch.float64))

    def merge(self, features) -> torch.Tensor:
        """Merge an identity's feature rows (n x d, n >= 1) into one unit vector."""
        if isinstance(features, (list, tuple)):
            rows = [f.values if isinstance(f, FeatureVector) else f for f in features]
            if not rows:
                raise ValueError("cannot merge an empty feature list")
            features = torch.stack(rows)
        if features.ndim != 2 or features.shape[0] == 0:
            raise ValueError("features must be a nonempty n x d matrix")
        if features.shape[1] != self.embed_dim:
            raise ValueError(
                f"feature width {features.shape[1]} != embed_dim {self.embed_dim}"
            )
        f = features[_canonical_order(features)].to(torch.float64)
        center = self.query + f.mean(dim=0)
        keys = f @ self.key_map.T
        logits = keys @ center / self.embed_dim**0.5
        weights = torch.softmax(logits, dim=0)
        pooled = (weights.unsqueeze(1) * (f @ self.value_map.T)).sum(dim=0)
        norm = torch.linalg.vector_norm(pooled)
        if float(norm.detach()) == 0.0:
            raise ValueError("merged description collapsed to the zero vector")
        return pooled / norm

    forward = merge


def merged_descriptions(attention: AttentionMerge, bank: DescriptionBank) -> torch.Tensor:
    """One merged unit-norm description per identity, stacked as N x d."""
    return torch.stack(
        [attention.merge(bank.per_identity[i]) for i in range(bank.num_identities)]
    )
