"""Training loops for both stages plus the fine-tune and zero-shot baselines.

Stage one optimizes only the description generator against cached frozen image
features with the bidirectional contrastive loss. Stage two freezes the
generator and the text encoder, caches a description bank, and fine-tunes the
image tower together with the projection, a throwaway classifier head, the
attention merge and the temperature. The ``clip_ft`` baseline runs the same
second-stage loop with one fixed literal description shared by all identities;
``clip_zs`` trains nothing at all.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml
from torch import nn

from . import checkpoint as ckpt
from .data import AugmentConfig, augment, load_image, make_batches, split_records
from .encoders import EncoderConfig, image_to_tensor, make_encoders, special_token_ids
from .losses import similarity_matrix, stage1_loss, stage2_loss
from .merge import AttentionMerge, build_description_bank, merged_descriptions
from .prompts import PromptState, describe_images

logger = logging.getLogger(__name__)

MODES = ("indivaid", "clip_ft", "clip_zs")
LOG_KEYS = ("l_id", "l_tri", "l_i2tce", "l_i2t", "l_t2i")


class ConfigError(ValueError):
    """Invalid training configuration."""


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 10
    stage1_lr: float = 3.5e-4
    stage1_batch_size: int = 32
    stage2_lr_start: float = 5e-7
    stage2_lr_peak: float = 5e-6
    warmup_epochs: int = 10
    decay_factor: float = 0.1
    decay_epochs: tuple[int, ...] = (15,)
    tau: float = 0.3
    epsilon: float = 0.1
    I: int = 4
    K: int = 4
    seed: int = 0
    loss_flags: tuple[str, ...] = ("id", "tri", "i2tce")
    mode: str = "indivaid"
    species: str = "animal"
    num_context: int = 4

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        self.loss_flags = tuple(str(f) for f in self.loss_flags)
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        for name in ("stage1_lr", "stage2_lr_start", "stage2_lr_peak"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.tau < 0:
            raise ConfigError("tau must be >= 0")
        if not 0 <= self.epsilon < 1:
            raise ConfigError("epsilon must be in [0, 1)")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if self.decay_factor <= 0:
            raise ConfigError("decay_factor must be positive")
        if self.stage1_batch_size < 1:
            raise ConfigError("stage1_batch_size must be >= 1")

    def config_hash(self) -> str:
        canon = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def to_yaml(self, path) -> None:
        payload = asdict(self)
        payload["decay_epochs"] = list(self.decay_epochs)
        payload["loss_flags"] = list(self.loss_flags)
        Path(path).write_text(yaml.safe_dump(payload, sort_keys=True))

    @classmethod
    def from_yaml(cls, path) -> "TrainConfig":
        payload = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(payload, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        known = set(cls.__dataclass_fields__)
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload)


def lr_stage1(step: int, total_steps: int, base: float) -> float:
    """Cosine decay from ``base`` to zero over the run."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def lr_stage2(epoch: int, config: TrainConfig) -> float:
    """Linear warmup to the peak rate, then stepwise decay at the configured epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if config.warmup_epochs > 0 and epoch <= config.warmup_epochs:
        frac = epoch / config.warmup_epochs
        return config.stage2_lr_start + (config.stage2_lr_peak - config.stage2_lr_start) * frac
    lr = config.stage2_lr_peak
    for boundary in sorted(config.decay_epochs):
        if epoch >= boundary:
            lr *= config.decay_factor
    return lr


@dataclass
class TrainResult:
    checkpoint_dir: Path
    history: list[dict] = field(default_factory=list)


def _epoch_seed(seed: int, stream: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, stream, epoch]).generate_state(1)[0])


def _log_line(history, log_fh, step, lr, total, parts):
    line = {"step": step, **{k: 0.0 for k in LOG_KEYS}}
    for name, value in parts.items():
        line[f"l_{name}"] = value
    line["l_total"] = float(total)
    line["lr"] = lr
    history.append(line)
    if log_fh is not None:
        log_fh.write(json.dumps(line, sort_keys=True) + "\n")


def _abort_if_not_finite(loss, step, parts=None):
    if not torch.isfinite(loss):
        raise RuntimeError(
            f"non-finite loss at step {step}: total={float(loss)} breakdown={parts}"
        )


def make_classifier(embed_dim: int, num_identities: int, seed: int) -> nn.Linear:
    """Identity-logit head used by the second stage only; discarded at inference."""
    head = nn.Linear(embed_dim, num_identities, dtype=torch.float64)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    with torch.no_grad():
        head.weight.copy_(
            torch.from_numpy(rng.normal(0.0, 0.01, size=(num_identities, embed_dim)))
        )
        head.bias.zero_()
    return head


def _encoder_group(encoders) -> dict[str, torch.Tensor]:
    group = {f"image.{n}": p for n, p in encoders.image_named_parameters().items()}
    group.update({f"text.{n}": p for n, p in encoders.text_named_parameters().items()})
    group["temperature.log"] = encoders.log_temperature
    return group


def _build_meta(config: TrainConfig, encoders, num_identities: int, stage: int) -> dict:
    return {
        "stage": stage,
        "mode": config.mode,
        "seed": config.seed,
        "species": config.species,
        "num_context": config.num_context,
        "num_identities": num_identities,
        "config_hash": config.config_hash(),
        "encoder": asdict(encoders.config),
    }


def save_pipeline(
    out_dir, config: TrainConfig, encoders, stage: int, num_identities: int,
    prompt_state=None, attention=None, classifier=None,
) -> Path:
    groups = {"encoders": _encoder_group(encoders)}
    if prompt_state is not None:
        groups["prompt"] = dict(prompt_state.named_parameters())
    if attention is not None:
        groups["attention"] = dict(attention.named_parameters())
    if classifier is not None:
        groups["classifier"] = dict(classifier.named_parameters())
    meta = _build_meta(config, encoders, num_identities, stage)
    return ckpt.save_checkpoint(out_dir, groups, meta)


@dataclass
class Pipeline:
    encoders: object
    prompt_state: PromptState | None
    attention: AttentionMerge | None
    classifier: nn.Linear | None
    meta: dict


def _restore(params: dict[str, torch.Tensor], stored: dict[str, torch.Tensor], where: str):
    missing = set(params) - set(stored)
    extra = set(stored) - set(params)
    if missing or extra:
        raise ValueError(f"{where}: parameter names disagree (missing={missing}, extra={extra})")
    with torch.no_grad():
        for name, p in params.items():
            if tuple(p.shape) != tuple(stored[name].shape):
                raise ValueError(f"{where}: shape mismatch for {name}")
            p.copy_(stored[name].to(p.dtype))


def load_pipeline(checkpoint_dir) -> Pipeline:
    """Rebuild encoders, generator, attention and classifier from a checkpoint."""
    meta, groups = ckpt.load_checkpoint(checkpoint_dir)
    enc_config = EncoderConfig(**meta["encoder"])
    encoders = make_encoders(enc_config)
    _restore(_encoder_group(encoders), groups["encoders"], "encoders")

    prompt_state = None
    if "prompt" in groups:
        per_identity = groups["prompt"]["context_tokens"].ndim == 3
        prompt_state = PromptState(
            num_identities=meta["num_identities"],
            word_dim=enc_config.word_dim,
            embed_dim=enc_config.embed_dim,
            num_context=meta["num_context"],
            per_identity_context=per_identity,
        )
        _restore(dict(prompt_state.named_parameters()), groups["prompt"], "prompt")

    attention = None
    if "attention" in groups:
        attention = AttentionMerge(enc_config.embed_dim)
        _restore(dict(attention.named_parameters()), groups["attention"], "attention")

    classifier = None
    if "classifier" in groups:
        classifier = nn.Linear(enc_config.embed_dim, meta["num_identities"], dtype=torch.float64)
        _restore(dict(classifier.named_parameters()), groups["classifier"], "classifier")

    return Pipeline(encoders, prompt_state, attention, classifier, meta)


def _encode_all(encoders, records, batch_size: int = 32) -> torch.Tensor:
    resolution = encoders.config.resolution
    chunks = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            batch = records[start : start + batch_size]
            images = torch.stack(
                [image_to_tensor(load_image(r.path, resolution)) for r in batch]
            )
            chunks.append(encoders.encode_image(images, trainable=False))
    return torch.cat(chunks)


def run_stage1(config: TrainConfig, records, encoders, prompt_state, out_dir, log_path=None) -> TrainResult:
    """Optimize the description generator against frozen encoders."""
    train = split_records(records, "train")
    if not train:
        raise ValueError("no train records")
    features = _encode_all(encoders, train)
    labels = torch.tensor([r.identity for r in train], dtype=torch.long)
    temperature = encoders.temperature.detach()

    optimizer = torch.optim.Adam(prompt_state.parameters(), lr=config.stage1_lr)
    steps_per_epoch = max(1, math.ceil(len(train) / config.stage1_batch_size))
    total_steps = max(1, config.epochs * steps_per_epoch)

    history: list[dict] = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        step = 0
        for epoch in range(config.epochs):
            rng = np.random.default_rng(_epoch_seed(config.seed, 1, epoch))
            order = rng.permutation(len(train))
            for start in range(0, len(order), config.stage1_batch_size):
                idx = torch.from_numpy(order[start : start + config.stage1_batch_size].copy())
                lr = lr_stage1(step, total_steps, config.stage1_lr)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                descriptions = describe_images(
                    prompt_state, encoders, features[idx], labels[idx]
                )
                sim = similarity_matrix(features[idx], descriptions, temperature)
                loss = stage1_loss(sim)
                _abort_if_not_finite(loss, step)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                _log_line(history, log_fh, step, lr, loss.detach(), {})
                step += 1
    finally:
        if log_fh is not None:
            log_fh.close()

    num_identities = prompt_state.num_identities
    path = save_pipeline(
        out_dir, config, encoders, stage=1, num_identities=num_identities,
        prompt_state=prompt_state,
    )
    return TrainResult(checkpoint_dir=path, history=history)


def _literal_descriptions(encoders, species: str, num_identities: int) -> torch.Tensor:
    """One fixed unit-norm encoding of "A photo of a <species>." repeated per identity."""
    pad_id, sot_id, eot_id, _ = special_token_ids(encoders)
    ids = [sot_id] + encoders.tokenize(f"a photo of a {species}.") + [eot_id]
    L = encoders.config.context_length
    if len(ids) > L:
        raise ValueError(f"literal prompt too long for context_length {L}")
    eos = len(ids) - 1
    ids = ids + [pad_id] * (L - len(ids))
    with torch.no_grad():
        feat = encoders.encode_text(encoders.word_embed(ids), eos)
    row = feat.values / torch.linalg.vector_norm(feat.values)
    return row.unsqueeze(0).expand(num_identities, -1).contiguous()


def _run_stage2_loop(
    config: TrainConfig, records, encoders, out_dir,
    prompt_state=None, attention=None, fixed_descriptions=None, log_path=None,
) -> TrainResult:
    train = split_records(records, "train")
    if not train:
        raise ValueError("no train records")
    num_identities = len({r.identity for r in train})
    resolution = encoders.config.resolution

    if fixed_descriptions is None:
        if prompt_state is None or attention is None:
            raise ValueError("stage two needs a trained generator and an attention module")
        bank = build_description_bank(train, prompt_state, encoders)
        if bank.num_identities != num_identities:
            raise ValueError("description bank does not cover every train identity")
    else:
        bank = None

    classifier = make_classifier(encoders.config.embed_dim, num_identities, config.seed)
    trained: list[torch.Tensor] = list(encoders.image_named_parameters().values())
    trained.append(encoders.log_temperature)
    trained.extend(classifier.parameters())
    if attention is not None:
        trained.extend(attention.parameters())
    optimizer = torch.optim.Adam(trained, lr=lr_stage2(0, config))

    image_cache: dict[Path, np.ndarray] = {}
    aug_config = AugmentConfig()
    history: list[dict] = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        step = 0
        for epoch in range(config.epochs):
            lr = lr_stage2(epoch, config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            plan = make_batches(train, config.I, config.K, _epoch_seed(config.seed, 2, epoch))
            aug_rng = np.random.default_rng(_epoch_seed(config.seed, 4, epoch))
            for batch in plan.batches:
                images = []
                for pos in batch:
                    record = train[pos]
                    base = image_cache.get(record.path)
                    if base is None:
                        base = load_image(record.path, resolution)
                        image_cache[record.path] = base
                    images.append(image_to_tensor(augment(base, aug_config, aug_rng)))
                x = torch.stack(images)
                batch_labels = torch.tensor([train[pos].identity for pos in batch])

                image_features = encoders.encode_image(x, trainable=True)
                if bank is not None:
                    descriptions = merged_descriptions(attention, bank)
                else:
                    descriptions = fixed_descriptions
                logits = classifier(image_features)
                total, parts = stage2_loss(
                    image_features,
                    batch_labels,
                    merged_descriptions=descriptions,
                    classifier_logits=logits,
                    temperature=encoders.temperature,
                    margin=config.tau,
                    epsilon=config.epsilon,
                    flags=config.loss_flags,
                )
                _abort_if_not_finite(total, step, parts)
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                _log_line(history, log_fh, step, lr, total.detach(), parts)
                step += 1
    finally:
        if log_fh is not None:
            log_fh.close()

    path = save_pipeline(
        out_dir, config, encoders, stage=2, num_identities=num_identities,
        prompt_state=prompt_state, attention=attention, classifier=classifier,
    )
    return TrainResult(checkpoint_dir=path, history=history)


def run_stage2(
    config: TrainConfig, records, encoders, prompt_state, attention, out_dir, log_path=None
) -> TrainResult:
    """Fine-tune the image side against attention-merged descriptions."""
    return _run_stage2_loop(
        config, records, encoders, out_dir,
        prompt_state=prompt_state, attention=attention, log_path=log_path,
    )


def run_baseline(config: TrainConfig, records, encoders, out_dir, log_path=None) -> TrainResult | None:
    """Run the degenerate pipeline modes.

    ``clip_zs`` performs no training and returns None: evaluation uses the
    frozen image encoder directly. ``clip_ft`` runs the second-stage loop with
    a single fixed literal description shared by every identity (no generator,
    no attention merge).
    """
    if config.mode == "clip_zs":
        return None
    if config.mode != "clip_ft":
        raise ValueError(f"run_baseline handles clip_ft/clip_zs, not {config.mode!r}")
    train = split_records(records, "train")
    num_identities = len({r.identity for r in train})
    fixed = _literal_descriptions(encoders, config.species, num_identities)
    return _run_stage2_loop(
        config, records, encoders, out_dir,
        fixed_descriptions=fixed, log_path=log_path,
    )
