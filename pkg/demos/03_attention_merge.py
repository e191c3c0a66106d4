"""Merging an identity's per-image descriptions into one vector.

The description bank caches a frozen text feature per train image. The
attention module then pools each identity's cached features: at
initialization (identity maps, zero query) it behaves like a uniform average;
after training it can emphasize the most diagnostic descriptions. The merge is
order-free down to the bit level.
"""

from pathlib import Path

import torch

from indivaid import (
    AttentionMerge,
    EncoderConfig,
    build_description_bank,
    init_prompt_state,
    make_encoders,
    merged_descriptions,
    scan_dataset,
)
from indivaid.synthetic import make_synthetic_dataset

out = Path("demo_output/merge")
out.mkdir(parents=True, exist_ok=True)

make_synthetic_dataset(out / "data", num_identities=4, train_per_id=5, seed=2)
records, index = scan_dataset(out / "data")
encoders = make_encoders(EncoderConfig())
state = init_prompt_state(index, "animal", encoders, seed=0)

print("== caching one description per train image ==")
bank = build_description_bank(records, state, encoders)
print(f"bank: {bank.total} descriptions across {bank.num_identities} identities")
print(f"per-identity counts: {bank.counts}")

attention = AttentionMerge(encoders.config.embed_dim)
merged = merged_descriptions(attention, bank)
print(f"\nmerged matrix: {tuple(merged.shape)}, all unit norm:",
      bool(torch.allclose(torch.linalg.vector_norm(merged, dim=1),
                          torch.ones(bank.num_identities, dtype=torch.float64))))

print("\n== permutation invariance (bit level) ==")
features = bank.per_identity[0]
base = attention.merge(features)
perm = torch.randperm(features.shape[0], generator=torch.Generator().manual_seed(0))
print("merge(features) == merge(shuffled features):",
      bool(torch.equal(base, attention.merge(features[perm]))))

print("\n== how close is the untrained merge to a plain average? ==")
average = features.mean(dim=0)
average = average / torch.linalg.vector_norm(average)
print(f"cosine(merge, average) = {float(base @ average):.6f}")

print("\n== a trained-looking merge shifts the weights ==")
with torch.no_grad():
    attention.query.add_(0.5 * features[0])
merged_after = attention.merge(features)
print(f"cosine(before, after query update) = {float(base @ merged_after):.6f}")
