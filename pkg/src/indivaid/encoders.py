"""Image and text encoders sharing one multimodal embedding space.

Two interchangeable backends exist behind the same interface:

* ``toy`` is a small deterministic backbone (seeded random weights, float64)
  that runs the whole pipeline in seconds without any downloads. The image
  tower pools the input to a coarse grid and applies a two-layer perceptron;
  the text tower is a single causally-masked attention block.
* ``pretrained`` wraps a ViT-B/16 contrastive vision-language checkpoint via
  the ``transformers`` package. Weights are resolved through the normal cache
  (override with the ``INDIVAID_CACHE`` environment variable).

Both expose ``encode_image``, ``encode_text`` over pre-embedded token
sequences (so prompts may contain learnable vectors), ``word_embed`` and
``tokenize``, and both land image and text features in the same
``embed_dim``-wide space.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

PAD_ID = 0
SOT_ID = 1
EOT_ID = 2
PERIOD_ID = 3
_NUM_RESERVED = 4

INITIAL_TEMPERATURE = 1.0 / 0.07
MAX_TEMPERATURE = 100.0


@dataclass
class EncoderConfig:
    backend: str = "toy"
    image_width: int = 64
    embed_dim: int = 32
    word_dim: int = 32
    context_length: int = 16
    vocab_size: int = 512
    toy_seed: int = 0
    resolution: int = 224

    def __post_init__(self):
        if self.backend not in ("toy", "pretrained"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")
        if self.context_length < 8:
            raise ValueError(
                "context_length must be >= 8: prefix + 4 context tokens + "
                "identity token + terminator need the room"
            )
        if self.vocab_size <= _NUM_RESERVED:
            raise ValueError("vocab_size too small for reserved special tokens")

    @classmethod
    def pretrained_defaults(cls) -> "EncoderConfig":
        return cls(
            backend="pretrained",
            image_width=768,
            embed_dim=512,
            word_dim=512,
            context_length=77,
            vocab_size=49408,
            resolution=224,
        )


@dataclass(frozen=True)
class FeatureVector:
    """A fixed-width real vector in the shared embedding space."""

    values: torch.Tensor
    normalized: bool = False

    def __post_init__(self):
        if self.values.ndim != 1:
            raise ValueError(f"feature must be 1-D, got shape {tuple(self.values.shape)}")
        if self.normalized:
            norm = float(torch.linalg.vector_norm(self.values.detach()))
            if abs(norm - 1.0) > 1e-5:
                raise ValueError(f"normalized flag set but norm is {norm}")

    def __len__(self) -> int:
        return self.values.shape[0]

    def normalize(self) -> "FeatureVector":
        norm = torch.linalg.vector_norm(self.values)
        if float(norm.detach()) == 0.0:
            raise ValueError("cannot normalize a zero vector")
        return FeatureVector(self.values / norm, normalized=True)


class SimpleTokenizer:
    """Deterministic hash tokenizer for the toy backend.

    Lowercases, splits on whitespace, maps a trailing period to its own token,
    and hashes every word to a stable id outside the reserved range.
    """

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size

    def _word_id(self, word: str) -> int:
        digest = hashlib.sha256(word.encode("utf-8")).digest()
        span = self.vocab_size - _NUM_RESERVED
        return _NUM_RESERVED + int.from_bytes(digest[:8], "big") % span

    def encode(self, text: str) -> list[int]:
        ids = []
        for chunk in text.lower().split():
            trailing_period = chunk.endswith(".")
            word = chunk.rstrip(".")
            if word:
                ids.append(self._word_id(word))
            if trailing_period:
                ids.append(PERIOD_ID)
        return ids


def image_to_tensor(image: np.ndarray, dtype=torch.float64) -> torch.Tensor:
    """HxWx3 array in [0, 1] to a CxHxW tensor."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {image.shape}")
    return torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).to(dtype)


def _from_rng(rng: np.random.Generator, shape, scale: float) -> torch.Tensor:
    return torch.from_numpy(rng.normal(0.0, scale, size=shape)).to(torch.float64)


class ToyEncoders(nn.Module):
    """Deterministic small-scale backbone seeded entirely by ``toy_seed``.

    Image side: average-pool to an 8x8 grid, flatten, two tanh layers at
    ``image_width``, then a bias-free linear projection to ``embed_dim``.
    Text side: learned-position causal self-attention block over word
    embeddings, output taken at the terminator position and projected to
    ``embed_dim``. All arithmetic is float64.
    """

    GRID = 8

    def __init__(self, config: EncoderConfig):
        super().__init__()
        if config.backend != "toy":
            raise ValueError("ToyEncoders requires backend='toy'")
        self.config = config
        self.tokenizer = SimpleTokenizer(config.vocab_size)
        rng = np.random.default_rng(config.toy_seed)
        d_in = self.GRID * self.GRID * 3
        w, e, v, L = config.word_dim, config.embed_dim, config.vocab_size, config.context_length

        self.tower_w1 = nn.Parameter(_from_rng(rng, (config.image_width, d_in), d_in**-0.5))
        self.tower_b1 = nn.Parameter(torch.zeros(config.image_width, dtype=torch.float64))
        self.tower_w2 = nn.Parameter(
            _from_rng(rng, (config.image_width, config.image_width), config.image_width**-0.5)
        )
        self.tower_b2 = nn.Parameter(torch.zeros(config.image_width, dtype=torch.float64))
        self.image_projection = nn.Parameter(
            _from_rng(rng, (e, config.image_width), config.image_width**-0.5)
        )

        self.token_embedding = nn.Parameter(_from_rng(rng, (v, w), 0.1))
        self.positional = nn.Parameter(_from_rng(rng, (L, w), 0.02))
        self.attn_q = nn.Parameter(_from_rng(rng, (w, w), w**-0.5))
        self.attn_k = nn.Parameter(_from_rng(rng, (w, w), w**-0.5))
        self.attn_v = nn.Parameter(_from_rng(rng, (w, w), w**-0.5))
        self.attn_out = nn.Parameter(_from_rng(rng, (w, w), w**-0.5))
        self.mlp_w1 = nn.Parameter(_from_rng(rng, (2 * w, w), w**-0.5))
        self.mlp_b1 = nn.Parameter(torch.zeros(2 * w, dtype=torch.float64))
        self.mlp_w2 = nn.Parameter(_from_rng(rng, (w, 2 * w), (2 * w) ** -0.5))
        self.mlp_b2 = nn.Parameter(torch.zeros(w, dtype=torch.float64))
        self.text_projection = nn.Parameter(_from_rng(rng, (e, w), w**-0.5))

        self.log_temperature = nn.Parameter(
            torch.tensor(math.log(INITIAL_TEMPERATURE), dtype=torch.float64)
        )

    @property
    def temperature(self) -> torch.Tensor:
        return torch.exp(self.log_temperature).clamp(max=MAX_TEMPERATURE)

    # Parameter groups drive the per-stage freezing contracts.
    def image_named_parameters(self) -> dict[str, torch.Tensor]:
        names = ("tower_w1", "tower_b1", "tower_w2", "tower_b2", "image_projection")
        return {n: getattr(self, n) for n in names}

    def text_named_parameters(self) -> dict[str, torch.Tensor]:
        names = (
            "token_embedding",
            "positional",
            "attn_q",
            "attn_k",
            "attn_v",
            "attn_out",
            "mlp_w1",
            "mlp_b1",
            "mlp_w2",
            "mlp_b2",
            "text_projection",
        )
        return {n: getattr(self, n) for n in names}

    def encode_image(self, images, trainable: bool = False):
        """Project images to unnormalized ``embed_dim`` features.

        Accepts one CxHxW image (returns a :class:`FeatureVector`) or a batch
        BxCxHxW (returns a BxD tensor). With ``trainable=False`` no gradients
        reach the tower or the projection.
        """
        single = images.ndim == 3
        x = images.unsqueeze(0) if single else images
        res = self.config.resolution
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != res or x.shape[3] != res:
            raise ValueError(
                f"expected Bx3x{res}x{res} images, got shape {tuple(x.shape)}"
            )
        x = x.to(torch.float64)
        ctx = contextlib.nullcontext() if trainable else torch.no_grad()
        with ctx:
            x = (x - 0.5) / 0.5
            pooled = torch.nn.functional.adaptive_avg_pool2d(x, self.GRID)
            flat = pooled.reshape(x.shape[0], -1)
            h = torch.tanh(flat @ self.tower_w1.T + self.tower_b1)
            h = torch.tanh(h @ self.tower_w2.T + self.tower_b2)
            feats = h @ self.image_projection.T
        return FeatureVector(feats[0]) if single else feats

    def encode_text(self, token_embeddings, eos_position: int):
        """Run the causal text block over pre-embedded tokens, read out at ``eos_position``.

        Accepts LxW (returns a :class:`FeatureVector`) or BxLxW (returns BxD).
        Causal masking means positions after ``eos_position`` cannot influence
        the output.
        """
        single = token_embeddings.ndim == 2
        x = token_embeddings.unsqueeze(0) if single else token_embeddings
        L = x.shape[1]
        if L > self.config.context_length or x.shape[2] != self.config.word_dim:
            raise ValueError(f"bad token embedding shape {tuple(x.shape)}")
        if not 0 < eos_position < L:
            raise ValueError(f"eos_position {eos_position} out of range for length {L}")
        x = x.to(torch.float64)

        h = x + self.positional[:L]
        q = h @ self.attn_q.T
        k = h @ self.attn_k.T
        v = h @ self.attn_v.T
        scores = q @ k.transpose(1, 2) / math.sqrt(self.config.word_dim)
        mask = torch.full((L, L), float("-inf"), dtype=torch.float64).triu(1)
        weights = torch.softmax(scores + mask, dim=-1)
        h = h + (weights @ v) @ self.attn_out.T
        h = h + torch.tanh(h @ self.mlp_w1.T + self.mlp_b1) @ self.mlp_w2.T + self.mlp_b2
        out = h[:, eos_position] @ self.text_projection.T
        return FeatureVector(out[0]) if single else out

    def word_embed(self, token_ids) -> torch.Tensor:
        ids = torch.as_tensor(token_ids, dtype=torch.long)
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ValueError("token id out of range")
        return self.token_embedding[ids]

    def tokenize(self, text: str) -> list[int]:
        return self.tokenizer.encode(text)


class ClipEncoders(nn.Module):
    """Pretrained ViT-B/16 vision-language backbone behind the shared interface.

    Reuses the checkpoint's own image projection (768 -> 512) and drives the
    text transformer over raw embeddings so learnable prompt tokens can be
    injected. Requires the optional ``transformers`` dependency and access to
    cached weights.
    """

    MEAN = (0.48145466, 0.4578275, 0.40821073)
    STD = (0.26862954, 0.26130258, 0.27577711)

    def __init__(self, config: EncoderConfig, model_name: str = "openai/clip-vit-base-patch16"):
        super().__init__()
        if config.backend != "pretrained":
            raise ValueError("ClipEncoders requires backend='pretrained'")
        try:
            from transformers import CLIPModel, CLIPTokenizerFast
        except ImportError as exc:
            raise RuntimeError(
                "the pretrained backend needs the 'transformers' package "
                "(pip install indivaid[pretrained])"
            ) from exc
        cache_dir = os.environ.get("INDIVAID_CACHE") or None
        try:
            self.model = CLIPModel.from_pretrained(model_name, cache_dir=cache_dir)
            self._tokenizer = CLIPTokenizerFast.from_pretrained(model_name, cache_dir=cache_dir)
        except Exception as exc:
            raise RuntimeError(
                f"could not load pretrained weights for {model_name}; "
                "set INDIVAID_CACHE to a directory holding them"
            ) from exc
        self.config = config
        text_width = self.model.text_model.config.hidden_size
        if (self.model.config.projection_dim, text_width) != (config.embed_dim, config.word_dim):
            raise ValueError("encoder config dims disagree with the checkpoint")
        mean = torch.tensor(self.MEAN).view(1, 3, 1, 1)
        std = torch.tensor(self.STD).view(1, 3, 1, 1)
        self.register_buffer("pixel_mean", mean)
        self.register_buffer("pixel_std", std)

    @property
    def temperature(self) -> torch.Tensor:
        return torch.exp(self.model.logit_scale).clamp(max=MAX_TEMPERATURE)

    @property
    def log_temperature(self) -> torch.Tensor:
        return self.model.logit_scale

    def image_named_parameters(self) -> dict[str, torch.Tensor]:
        groups = {}
        groups.update(
            {f"vision.{n}": p for n, p in self.model.vision_model.named_parameters()}
        )
        groups.update(
            {f"proj.{n}": p for n, p in self.model.visual_projection.named_parameters()}
        )
        return groups

    def text_named_parameters(self) -> dict[str, torch.Tensor]:
        groups = {f"text.{n}": p for n, p in self.model.text_model.named_parameters()}
        groups.update(
            {f"proj.{n}": p for n, p in self.model.text_projection.named_parameters()}
        )
        return groups

    def encode_image(self, images, trainable: bool = False):
        single = images.ndim == 3
        x = images.unsqueeze(0) if single else images
        x = x.to(torch.float32)
        x = (x - self.pixel_mean) / self.pixel_std
        ctx = contextlib.nullcontext() if trainable else torch.no_grad()
        with ctx:
            pooled = self.model.vision_model(pixel_values=x).pooler_output
            feats = self.model.visual_projection(pooled)
        return FeatureVector(feats[0]) if single else feats

    def encode_text(self, token_embeddings, eos_position: int):
        single = token_embeddings.ndim == 2
        x = token_embeddings.unsqueeze(0) if single else token_embeddings
        L = x.shape[1]
        if not 0 < eos_position < L:
            raise ValueError(f"eos_position {eos_position} out of range for length {L}")
        x = x.to(torch.float32)
        text_model = self.model.text_model
        positions = torch.arange(L)
        h = x + text_model.embeddings.position_embedding(positions)
        mask = torch.full((L, L), torch.finfo(torch.float32).min).triu(1)
        mask = mask.unsqueeze(0).unsqueeze(0)
        h = text_model.encoder(inputs_embeds=h, causal_attention_mask=mask).last_hidden_state
        h = text_model.final_layer_norm(h)
        out = self.model.text_projection(h[:, eos_position])
        return FeatureVector(out[0]) if single else out

    def word_embed(self, token_ids) -> torch.Tensor:
        ids = torch.as_tensor(token_ids, dtype=torch.long)
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ValueError("token id out of range")
        return self.model.text_model.embeddings.token_embedding(ids)

    def tokenize(self, text: str) -> list[int]:
        return self._tokenizer(text, add_special_tokens=False)["input_ids"]


def make_encoders(config: EncoderConfig) -> nn.Module:
    if config.backend == "toy":
        return ToyEncoders(config)
    return ClipEncoders(config)


def special_token_ids(encoders) -> tuple[int, int, int, int]:
    """(pad, start, end, period) ids for the given backend."""
    if isinstance(encoders, ToyEncoders):
        return PAD_ID, SOT_ID, EOT_ID, PERIOD_ID
    tok = encoders._tokenizer
    period = tok(".", add_special_tokens=False)["input_ids"][0]
    return tok.pad_token_id, tok.bos_token_id, tok.eos_token_id, period
