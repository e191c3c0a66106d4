"""First-stage text description generator.

A description for one image of identity ``i`` is assembled in word-embedding
space as::

    [SOT] (v_1 + pi) ... (v_m + pi) s_i [.] [EOT] [pad ...]

where ``v_j`` are shared learnable context tokens, ``s_i`` is a learnable
per-identity token, and ``pi`` is the meta token produced from the image
feature by a small Linear-ReLU-Linear network whose hidden width compresses
``embed_dim`` sixteenfold. Static words never enter the sequence; the context
tokens are merely initialized from the phrase "A photo of a" and the identity
tokens from a species word.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .encoders import FeatureVector, special_token_ids

CONTEXT_INIT_PHRASE = "A photo of a"
META_INIT_STD = 0.02


class PromptState(nn.Module):
    """Everything the description generator owns: context tokens, identity tokens, meta net.

    ``per_identity_context=True`` gives every identity its own bank of context
    tokens instead of one shared bank. Experimental; the shared layout is the
    default and the only one exercised by the training recipes.
    """

    def __init__(
        self,
        num_identities: int,
        word_dim: int,
        embed_dim: int,
        num_context: int = 4,
        per_identity_context: bool = False,
    ):
        super().__init__()
        if num_context < 1:
            raise ValueError("need at least one context token")
        if num_identities < 1:
            raise ValueError("need at least one identity")
        self.num_identities = num_identities
        self.num_context = num_context
        self.per_identity_context = per_identity_context
        hidden = max(1, embed_dim // 16)

        ctx_shape = (
            (num_identities, num_context, word_dim)
            if per_identity_context
            else (num_context, word_dim)
        )
        self.context_tokens = nn.Parameter(torch.zeros(ctx_shape, dtype=torch.float64))
        self.identity_tokens = nn.Parameter(
            torch.zeros(num_identities, word_dim, dtype=torch.float64)
        )
        self.meta_w1 = nn.Parameter(torch.zeros(hidden, embed_dim, dtype=torch.float64))
        self.meta_b1 = nn.Parameter(torch.zeros(hidden, dtype=torch.float64))
        self.meta_w2 = nn.Parameter(torch.zeros(word_dim, hidden, dtype=torch.float64))
        self.meta_b2 = nn.Parameter(torch.zeros(word_dim, dtype=torch.float64))

    def meta_token(self, image_features: torch.Tensor) -> torch.Tensor:
        """Map image features (BxE or E) to meta tokens (BxW or W)."""
        if isinstance(image_features, FeatureVector):
            image_features = image_features.values
        expected = self.meta_w1.shape[1]
        if image_features.shape[-1] != expected:
            raise ValueError(
                f"image feature width {image_features.shape[-1]} != embed_dim {expected}"
            )
        h = torch.relu(image_features @ self.meta_w1.T + self.meta_b1)
        return h @ self.meta_w2.T + self.meta_b2


def init_prompt_state(
    index,
    species_word: str,
    encoders,
    num_context: int = 4,
    seed: int = 0,
    per_identity_context: bool = False,
) -> PromptState:
    """Build a generator for ``index.n`` identities with the standard initialization.

    Context tokens copy the word embeddings of the context phrase, identity
    tokens all start from the species word's first token, and the meta net
    starts near zero (std ``0.02`` weights, zero bias) so early descriptions
    are image-agnostic.
    """
    num_identities = index.n if hasattr(index, "n") else int(index)
    config = encoders.config
    state = PromptState(
        num_identities=num_identities,
        word_dim=config.word_dim,
        embed_dim=config.embed_dim,
        num_context=num_context,
        per_identity_context=per_identity_context,
    )

    phrase_ids = encoders.tokenize(CONTEXT_INIT_PHRASE)
    phrase = encoders.word_embed(phrase_ids).detach().to(torch.float64)
    rows = torch.stack([phrase[j % len(phrase_ids)] for j in range(num_context)])
    species_ids = encoders.tokenize(species_word)
    if not species_ids:
        raise ValueError(f"species word {species_word!r} produced no tokens")
    species = encoders.word_embed(species_ids[:1]).detach().to(torch.float64)[0]

    rng = np.random.default_rng(seed)
    with torch.no_grad():
        if per_identity_context:
            state.context_tokens.copy_(rows.unsqueeze(0).expand(num_identities, -1, -1))
        else:
            state.context_tokens.copy_(rows)
        state.identity_tokens.copy_(species.unsqueeze(0).expand(num_identities, -1))
        for w in (state.meta_w1, state.meta_w2):
            w.copy_(torch.from_numpy(rng.normal(0.0, META_INIT_STD, size=tuple(w.shape))))
    return state


def assemble_prompts(
    state: PromptState, encoders, identities: torch.Tensor, meta_tokens: torch.Tensor
) -> tuple[torch.Tensor, int]:
    """Assemble a batch of prompt embedding sequences.

    Returns ``(B x context_length x word_dim, eos_position)`` with
    ``eos_position = num_context + 3`` (start token, contexts, identity token,
    period, terminator, then padding).
    """
    ids = torch.as_tensor(identities, dtype=torch.long)
    if ids.ndim != 1:
        raise ValueError("identities must be a 1-D index sequence")
    if ids.numel() and (ids.min() < 0 or ids.max() >= state.num_identities):
        raise ValueError("identity index out of range")
    if meta_tokens.ndim != 2 or meta_tokens.shape[0] != ids.shape[0]:
        raise ValueError("meta_tokens must be Bxword_dim aligned with identities")

    config = encoders.config
    m = state.num_context
    L = config.context_length
    if L < m + 4:
        raise ValueError(f"context_length {L} too short for {m} context tokens")

    pad_id, sot_id, eot_id, period_id = special_token_ids(encoders)
    specials = encoders.word_embed([pad_id, sot_id, eot_id, period_id]).detach()
    pad_e, sot_e, eot_e, period_e = specials.to(torch.float64)

    B = ids.shape[0]
    if state.per_identity_context:
        ctx = state.context_tokens[ids]
    else:
        ctx = state.context_tokens.unsqueeze(0).expand(B, -1, -1)
    pieces = [
        sot_e.expand(B, 1, -1),
        ctx + meta_tokens.unsqueeze(1),
        state.identity_tokens[ids].unsqueeze(1),
        period_e.expand(B, 1, -1),
        eot_e.expand(B, 1, -1),
    ]
    if L > m + 4:
        pieces.append(pad_e.expand(B, L - (m + 4), -1))
    return torch.cat(pieces, dim=1), m + 3


def assemble_prompt(
    state: PromptState, encoders, identity: int, meta_token: torch.Tensor
) -> tuple[torch.Tensor, int]:
    """Single-prompt convenience wrapper around :func:`assemble_prompts`."""
    seq, eos = assemble_prompts(
        state, encoders, torch.tensor([identity]), meta_token.reshape(1, -1)
    )
    return seq[0], eos


def describe_images(
    state: PromptState, encoders, image_features: torch.Tensor, identities
) -> torch.Tensor:
    """Per-image description features: meta net, prompt assembly, text encoder."""
    meta = state.meta_token(image_features)
    prompts, eos = assemble_prompts(state, encoders, identities, meta)
    return encoders.encode_text(prompts, eos)


def describe_image(state: PromptState, encoders, image_feature, identity: int) -> FeatureVector:
    feats = image_feature.values if isinstance(image_feature, FeatureVector) else image_feature
    out = describe_images(state, encoders, feats.reshape(1, -1), [identity])
    return FeatureVector(out[0])
