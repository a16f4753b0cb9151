"""Segmentation loss, warmup + cosine schedule, and the training loop."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import BenchmarkSplit, ExpressionTokens, Vocabulary, tokenize
from .errors import NonFiniteLoss, ShapeMismatch
from .masks import majority_pool, resize_mask_nearest
from .model import UniRES, load_checkpoint, preprocess_image, save_checkpoint

log = logging.getLogger(__name__)

LOSSES = ("bce", "bce_plus_dice")
MODES = ("pretrain", "finetune")

_MODE_DEFAULTS = {
    "pretrain": dict(warmup_epochs=5, epochs=50, batch_size=128),
    "finetune": dict(warmup_epochs=1, epochs=15, batch_size=64),
}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 5e-4
    warmup_epochs: int = 5
    epochs: int = 50
    batch_size: int = 128
    seed: int = 0
    loss: str = "bce_plus_dice"
    supervise_full_res: bool = False
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "TrainConfig":
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        return cls(**{**_MODE_DEFAULTS[mode], **overrides})

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass(frozen=True)
class TrainLogEntry:
    step: int
    epoch: int
    loss: float
    lr: float
    wall_ms: float

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


# --- loss -------------------------------------------------------------------------

def seg_loss(pred: torch.Tensor, target: torch.Tensor, mode: str = "bce_plus_dice", *,
             from_logits: bool = True, eps: float = 1e-7) -> torch.Tensor:
    """Mean per-pixel BCE, optionally plus soft Dice (weight 1).

    ``pred`` holds pre-sigmoid logits, or confidences in ``[0, 1]`` when
    ``from_logits`` is False (clamped to ``[eps, 1 - eps]``).
    """
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if mode not in LOSSES:
        raise ValueError(f"unknown loss mode {mode!r}")
    target = target.to(pred.dtype)
    if from_logits:
        bce = F.binary_cross_entropy_with_logits(pred, target)
        prob = torch.sigmoid(pred)
    else:
        prob = pred.clamp(eps, 1 - eps)
        bce = F.binary_cross_entropy(prob, target)
    if mode == "bce":
        return bce
    dims = tuple(range(1, pred.dim())) if pred.dim() > 1 else (0,)
    inter = (prob * target).sum(dims)
    dice = 1 - (2 * inter + 1) / (prob.sum(dims) + target.sum(dims) + 1)
    return bce + dice.mean()


# --- schedule ---------------------------------------------------------------------

def warmup_steps(total_steps: int, config: TrainConfig) -> int:
    if config.epochs == 0:
        return 0
    return round(total_steps * config.warmup_epochs / config.epochs)


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to ``learning_rate``, then cosine decay to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    base = config.learning_rate
    warm = warmup_steps(total_steps, config)
    if step < warm:
        return base * step / warm
    if total_steps == warm:
        return base
    progress = (step - warm) / (total_steps - warm)
    return base * (1 + math.cos(math.pi * progress)) / 2


# --- data -------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainExample:
    image: torch.Tensor  # normalized (3, S, S)
    tokens: ExpressionTokens
    target: torch.Tensor  # (grid, grid) majority-pooled
    target_full: torch.Tensor  # (S, S) nearest-resized


def make_example(image: np.ndarray, mask: np.ndarray, tokens: ExpressionTokens, image_size: int,
                 grid: int) -> TrainExample:
    return TrainExample(
        image=preprocess_image(image, image_size),
        tokens=tokens,
        target=torch.from_numpy(majority_pool(mask, grid, grid)).float(),
        target_full=torch.from_numpy(resize_mask_nearest(mask, image_size, image_size)).float(),
    )


def prepare_examples(split: BenchmarkSplit, vocab: Vocabulary, model: UniRES) -> list[TrainExample]:
    cfg = model.cfg
    return [
        make_example(split.load_image(s), s.decode_mask(), tokenize(s.expression, vocab, cfg.max_text_len),
                     cfg.image_size, cfg.grid)
        for s in split
    ]


def collate(examples: Sequence[TrainExample], dtype=torch.float32):
    images = torch.stack([e.image for e in examples]).to(dtype)
    ids = torch.tensor([e.tokens.ids for e in examples], dtype=torch.long)
    lengths = torch.tensor([e.tokens.true_length for e in examples], dtype=torch.long)
    targets = torch.stack([e.target for e in examples]).to(dtype)
    targets_full = torch.stack([e.target_full for e in examples]).to(dtype)
    return images, ids, lengths, targets, targets_full


def batch_loss(model: UniRES, batch, config: TrainConfig) -> torch.Tensor:
    images, ids, lengths, targets, targets_full = batch
    trace = model(images, ids, lengths)
    if config.supervise_full_res:
        size = targets_full.shape[-2:]
        logits = F.interpolate(trace.mask_logits[:, None], size=size, mode="bilinear", align_corners=False)[:, 0]
        return seg_loss(logits, targets_full, config.loss)
    return seg_loss(trace.mask_logits, targets, config.loss)


# --- optimisation -----------------------------------------------------------------

def make_optimizer(model: UniRES, config: TrainConfig) -> torch.optim.AdamW:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=config.learning_rate, betas=config.betas, eps=config.eps,
                             weight_decay=config.weight_decay)


def train_step(model: UniRES, batch, optimizer: torch.optim.Optimizer, config: TrainConfig, *,
               lr: float, step: int = 0, epoch: int = 0) -> TrainLogEntry:
    """One AdamW update at learning rate ``lr``."""
    t0 = time.perf_counter()
    model.train()
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=False)
    loss = batch_loss(model, batch, config)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss.item()} at step {step} (epoch {epoch}, lr {lr:.3g})")
    loss.backward()
    optimizer.step()
    return TrainLogEntry(step=step, epoch=epoch, loss=float(loss.item()), lr=lr,
                         wall_ms=(time.perf_counter() - t0) * 1000.0)


def epoch_order(n: int, seed: int, epoch: int) -> list[int]:
    g = torch.Generator().manual_seed(seed * 100_003 + epoch)
    return torch.randperm(n, generator=g).tolist()


def fit(model: UniRES, examples: Sequence[TrainExample], config: TrainConfig, *,
        out_dir=None, resume=None, log_path=None, extra_state: dict | None = None,
        optimizer: torch.optim.Optimizer | None = None):
    """Train for ``config.epochs`` epochs of ``ceil(N / batch_size)`` steps each.

    Step ``s`` (0-based, global) uses ``lr_at(s, total_steps)``. A checkpoint is
    written to ``out_dir/epoch_XXX.pt`` after every epoch; ``resume`` names one
    of those files and continues at the following epoch.
    """
    if not examples:
        raise ValueError("cannot train on an empty dataset")
    torch.manual_seed(config.seed)
    n = len(examples)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = config.epochs * steps_per_epoch
    optimizer = optimizer or make_optimizer(model, config)
    dtype = next(model.parameters()).dtype
    start_epoch = 0
    if resume is not None:
        _, payload = load_checkpoint(resume, expected=model.cfg)
        model.load_state_dict(payload["state_dict"])
        optimizer.load_state_dict(payload["optimizer"])
        start_epoch = payload["epoch"]
    history: list[TrainLogEntry] = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path, "a", encoding="utf-8") if log_path is not None else None
    try:
        for epoch in range(start_epoch, config.epochs):
            order = epoch_order(n, config.seed, epoch)
            for i in range(steps_per_epoch):
                step = epoch * steps_per_epoch + i
                batch = collate([examples[j] for j in order[i * config.batch_size:(i + 1) * config.batch_size]],
                                dtype)
                entry = train_step(model, batch, optimizer, config, lr=lr_at(step, total, config),
                                   step=step, epoch=epoch)
                history.append(entry)
                if log_fh is not None:
                    log_fh.write(json.dumps(entry.to_json()) + "\n")
            log.info("epoch %d/%d loss %.4f", epoch + 1, config.epochs, history[-1].loss)
            if out_dir is not None:
                save_checkpoint(out_dir / f"epoch_{epoch + 1:03d}.pt", model, optimizer=optimizer.state_dict(),
                                epoch=epoch + 1, step=(epoch + 1) * steps_per_epoch,
                                train_config=config.to_dict(), **(extra_state or {}))
    finally:
        if log_fh is not None:
            log_fh.close()
    return model, history


# --- config files -----------------------------------------------------------------

def _coerce(value: str, default):
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(float(v) for v in value.replace(",", " ").split())
    return value


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def load_config_file(path, mode: str = "finetune"):
    """Read a key-value file into ``(ModelConfig, TrainConfig, extras)``.

    Keys may be prefixed ``model.`` or ``train.``; unprefixed keys are matched
    against both. ``profile = tiny|toy|default`` picks the model base config.
    Keys that belong to neither are returned in ``extras``.
    """
    from .model import ModelConfig

    raw = parse_config_text(Path(path).read_text(encoding="utf-8"))
    profile = raw.pop("profile", raw.pop("model.profile", "default"))
    base_model = {"tiny": ModelConfig.tiny, "toy": ModelConfig.toy, "default": ModelConfig}[profile]()
    base_train = TrainConfig.for_mode(mode)
    mfields = {f.name: getattr(base_model, f.name) for f in dataclasses.fields(ModelConfig)}
    tfields = {f.name: getattr(base_train, f.name) for f in dataclasses.fields(TrainConfig)}
    m_over, t_over, extras = {}, {}, {}
    for key, value in raw.items():
        scope, _, name = key.rpartition(".")
        if scope in ("", "model") and name in mfields:
            m_over[name] = _coerce(value, mfields[name])
        elif scope in ("", "train") and name in tfields:
            t_over[name] = _coerce(value, tfields[name])
        else:
            extras[key] = value
    return base_model.replace(**m_over), base_train.replace(**t_over), extras
