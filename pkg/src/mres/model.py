"""UniRES: vision-language backbone with two-level group tokens, a
language-guided region filter and a two-stage decoder.

Sequence layout in the visual encoder::

    layers 1 .. L/2      [patches | low-level tokens]
    layers L/2+1 .. L    [patches | low-level tokens | high-level tokens]

Both token banks are read out at the last layer and re-weighted by the
sentence feature (the region filter) before entering decoder stage 2.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .dataset import ExpressionTokens
from .errors import CheckpointMismatch, ShapeMismatch
from .masks import DEFAULT_THRESHOLD, binarize, resize_prob

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

PARAM_GROUPS = ("visual", "low_group", "high_group", "text", "lrf", "stage1", "stage2", "mask_head")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 512
    num_heads: int = 16
    visual_layers: int = 12
    text_layers: int = 12
    vocab_size: int = 49408
    max_text_len: int = 17
    n_low_group: int = 64
    n_high_group: int = 8
    decoder_layers_stage1: int = 2
    decoder_layers_stage2: int = 1
    mask_threshold: float = DEFAULT_THRESHOLD
    mlp_ratio: int = 4
    use_low_group: bool = True
    use_high_group: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.visual_layers < 2 or self.visual_layers % 2:
            raise ValueError("visual_layers must be even so the encoder splits into two halves")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.n_low_group <= 0 or self.n_high_group <= 0:
            raise ValueError("group token counts must be positive")
        if self.max_text_len < 3:
            raise ValueError("max_text_len must be at least 3")
        if not 0.0 < self.mask_threshold < 1.0:
            raise ValueError("mask_threshold must lie in (0, 1)")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def n_low(self) -> int:
        return self.n_low_group if self.use_low_group else 0

    @property
    def n_high(self) -> int:
        return self.n_high_group if self.use_high_group else 0

    def sequence_lengths(self) -> tuple[int, int]:
        """Visual sequence length in the first and the second half of the encoder."""
        first = self.num_patches + self.n_low
        return first, first + self.n_high

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Smallest configuration exercising every component (used for gradient checks)."""
        base = dict(image_size=32, patch_size=8, embed_dim=16, num_heads=2, visual_layers=4,
                    text_layers=2, vocab_size=32, max_text_len=8, n_low_group=4, n_high_group=2,
                    decoder_layers_stage1=1, decoder_layers_stage2=1)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        """Small configuration at 2-pixel patches, used for overfitting runs."""
        base = dict(image_size=32, patch_size=2, embed_dim=32, num_heads=2, visual_layers=4,
                    text_layers=2, vocab_size=64, max_text_len=17, n_low_group=8, n_high_group=4,
                    decoder_layers_stage1=1, decoder_layers_stage2=1)
        base.update(overrides)
        return cls(**base)


class Attention(nn.Module):
    """Multi-head attention returning its (row-stochastic) attention weights."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def _heads(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, query: Tensor, context: Tensor, key_padding_mask: Tensor | None = None):
        q, k, v = self._heads(self.q(query)), self._heads(self.k(context)), self._heads(self.v(context))
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if key_padding_mask is not None:
            logits = logits.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        weights = logits.softmax(dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(query.shape[0], query.shape[1], -1)
        return self.out(out), weights


class MLP(nn.Sequential):
    def __init__(self, dim: int, ratio: int):
        super().__init__(nn.Linear(dim, dim * ratio), nn.GELU(), nn.Linear(dim * ratio, dim))


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio)

    def forward(self, x: Tensor, key_padding_mask: Tensor | None = None, attn_log: list | None = None):
        h = self.norm1(x)
        a, w = self.attn(h, h, key_padding_mask)
        if attn_log is not None:
            attn_log.append(w)
        x = x + a
        return x + self.mlp(self.norm2(x))


class DecoderLayer(nn.Module):
    """Self-attention over patch queries, then cross-attention into a memory."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.norm_mem = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, num_heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio)

    def forward(self, x: Tensor, memory: Tensor, memory_padding_mask: Tensor | None = None,
                attn_log: list | None = None):
        h = self.norm1(x)
        a, w1 = self.self_attn(h, h)
        x = x + a
        c, w2 = self.cross_attn(self.norm2(x), self.norm_mem(memory), memory_padding_mask)
        x = x + c
        if attn_log is not None:
            attn_log.extend((w1, w2))
        return x + self.mlp(self.norm3(x))


class VisualEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(3, d, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.randn(cfg.num_patches, d) * 0.02)
        self.norm_pre = nn.LayerNorm(d)
        self.blocks = nn.ModuleList(EncoderBlock(d, cfg.num_heads, cfg.mlp_ratio)
                                    for _ in range(cfg.visual_layers))
        self.norm_post = nn.LayerNorm(d)

    def forward(self, images: Tensor, low_tokens: Tensor | None, high_tokens: Tensor | None,
                attn_log: list | None = None):
        cfg = self.cfg
        if images.dim() != 4 or images.shape[1] != 3 or tuple(images.shape[-2:]) != (cfg.image_size,) * 2:
            raise ShapeMismatch(
                f"expected images of shape (B, 3, {cfg.image_size}, {cfg.image_size}), got {tuple(images.shape)}")
        b = images.shape[0]
        x = self.patch_embed(images).flatten(2).transpose(1, 2) + self.pos_embed
        if low_tokens is not None:
            x = torch.cat([x, low_tokens.expand(b, -1, -1)], dim=1)
        x = self.norm_pre(x)
        half = cfg.visual_layers // 2
        lengths = []
        for i, blk in enumerate(self.blocks):
            if i == half and high_tokens is not None:
                x = torch.cat([x, high_tokens.expand(b, -1, -1)], dim=1)
            lengths.append(x.shape[1])
            x = blk(x, attn_log=attn_log)
        x = self.norm_post(x)
        p, nl = cfg.num_patches, cfg.n_low
        patches = x[:, :p]
        low = x[:, p:p + nl] if low_tokens is not None else None
        high = x[:, p + nl:] if high_tokens is not None else None
        return patches, low, high, lengths


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.token_embed = nn.Embedding(cfg.vocab_size, d)
        nn.init.normal_(self.token_embed.weight, std=0.02)
        self.pos_embed = nn.Parameter(torch.randn(cfg.max_text_len, d) * 0.01)
        self.blocks = nn.ModuleList(EncoderBlock(d, cfg.num_heads, cfg.mlp_ratio)
                                    for _ in range(cfg.text_layers))
        self.norm = nn.LayerNorm(d)

    def forward(self, ids: Tensor, lengths: Tensor, attn_log: list | None = None):
        t = ids.shape[1]
        pad = torch.arange(t, device=ids.device)[None, :] >= lengths[:, None]
        x = self.token_embed(ids) + self.pos_embed[:t]
        # pad positions never act as keys, so pad ids cannot reach real tokens
        for blk in self.blocks:
            x = blk(x, key_padding_mask=pad, attn_log=attn_log)
        x = self.norm(x).masked_fill(pad[..., None], 0.0)
        sentence = x[torch.arange(x.shape[0]), lengths - 1]
        return x, sentence, pad


class RegionFilter(nn.Module):
    """Sentence-queried cross-attention that gates each group token.

    Token ``i`` of a bank becomes ``out(n * a_i * v_i)`` per head, where ``a`` is
    the softmax over the bank, so the bank keeps its row count.
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim)

    def forward(self, bank: Tensor, sentence: Tensor):
        b, n, d = bank.shape
        h, hd = self.num_heads, self.head_dim
        q = self.q(sentence).view(b, h, 1, hd)
        k = self.k(bank).view(b, n, h, hd).transpose(1, 2)
        v = self.v(bank).view(b, n, h, hd).transpose(1, 2)
        weights = (q @ k.transpose(-2, -1) / math.sqrt(hd)).softmax(dim=-1)  # (b, h, 1, n)
        gated = v * (n * weights.transpose(-2, -1))
        out = self.out(gated.transpose(1, 2).reshape(b, n, d))
        return self.norm(out), weights.squeeze(2)


class MaskDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig, num_layers: int):
        super().__init__()
        self.layers = nn.ModuleList(DecoderLayer(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio)
                                    for _ in range(num_layers))

    def forward(self, x, memory, memory_padding_mask=None, attn_log=None):
        for layer in self.layers:
            x = layer(x, memory, memory_padding_mask, attn_log)
        return x


@dataclass
class ForwardTrace:
    patch_features: Tensor
    text_features: Tensor
    sentence_feature: Tensor
    low_group_out: Tensor | None
    high_group_out: Tensor | None
    selected_regions: Tensor | None
    stage1_features: Tensor
    stage2_features: Tensor
    mask_logits: Tensor  # pre-sigmoid, (B, grid, grid)
    mask_probs: Tensor  # sigmoid of mask_logits
    visual_seq_lengths: list[int]
    lrf_weights: list[Tensor] = field(default_factory=list)
    attention: list[Tensor] = field(default_factory=list)


class UniRES(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.visual = VisualEncoder(cfg)
        self.low_group = nn.Parameter(torch.randn(cfg.n_low_group, d) * 0.02) if cfg.use_low_group else None
        self.high_group = nn.Parameter(torch.randn(cfg.n_high_group, d) * 0.02) if cfg.use_high_group else None
        self.text = TextEncoder(cfg)
        # one filter shared by both banks; dropped only when no bank is left
        self.lrf = RegionFilter(d, cfg.num_heads) if (cfg.use_low_group or cfg.use_high_group) else None
        self.stage1 = MaskDecoder(cfg, cfg.decoder_layers_stage1)
        self.stage2 = MaskDecoder(cfg, cfg.decoder_layers_stage2)
        self.mask_head = nn.Sequential(nn.LayerNorm(d), nn.Linear(d, 1))

    # -- components ---------------------------------------------------------

    def visual_encode(self, images: Tensor, attn_log: list | None = None):
        return self.visual(images, self.low_group, self.high_group, attn_log)

    def text_encode(self, ids: Tensor, lengths: Tensor, attn_log: list | None = None):
        return self.text(ids, lengths, attn_log)

    def lrf_select(self, low: Tensor | None, high: Tensor | None, sentence: Tensor):
        banks = [bank for bank in (low, high) if bank is not None]
        if not banks:
            return None, []
        filtered, weights = zip(*(self.lrf(bank, sentence) for bank in banks))
        return torch.cat(filtered, dim=1), list(weights)

    def decode(self, patches: Tensor, text: Tensor, text_pad: Tensor, regions: Tensor | None,
               attn_log: list | None = None):
        stage1 = self.stage1(patches, text, text_pad, attn_log)
        if regions is not None:
            memory = torch.cat([text, regions], dim=1)
            region_pad = torch.zeros(regions.shape[:2], dtype=torch.bool, device=regions.device)
            memory_pad = torch.cat([text_pad, region_pad], dim=1)
        else:
            memory, memory_pad = text, text_pad
        stage2 = self.stage2(stage1, memory, memory_pad, attn_log)
        g = self.cfg.grid
        logits = self.mask_head(stage2).squeeze(-1).view(-1, g, g)
        return stage1, stage2, logits

    def forward(self, images: Tensor, ids: Tensor, lengths: Tensor, *, record_attention: bool = False,
                zero_regions: bool = False) -> ForwardTrace:
        attn_log = [] if record_attention else None
        patches, low, high, seq_lengths = self.visual_encode(images, attn_log)
        text, sentence, text_pad = self.text_encode(ids, lengths, attn_log)
        regions, lrf_weights = self.lrf_select(low, high, sentence)
        if zero_regions and regions is not None:
            regions = torch.zeros_like(regions)
        stage1, stage2, logits = self.decode(patches, text, text_pad, regions, attn_log)
        return ForwardTrace(
            patch_features=patches, text_features=text, sentence_feature=sentence,
            low_group_out=low, high_group_out=high, selected_regions=regions,
            stage1_features=stage1, stage2_features=stage2, mask_logits=logits,
            mask_probs=torch.sigmoid(logits), visual_seq_lengths=seq_lengths,
            lrf_weights=lrf_weights, attention=attn_log or [])

    # -- parameter bookkeeping -------------------------------------------------

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups: dict[str, list] = {g: [] for g in PARAM_GROUPS}
        for name, p in self.named_parameters():
            groups[name.split(".", 1)[0]].append((name, p))
        return {g: ps for g, ps in groups.items() if ps}

    def set_frozen(self, group: str, frozen: bool = True) -> None:
        for _, p in self.parameter_groups()[group]:
            p.requires_grad_(not frozen)


def param_count(cfg: ModelConfig) -> int:
    """Exact number of trainable scalars for ``cfg`` (built on the meta device)."""
    with torch.device("meta"):
        model = UniRES(cfg)
    return sum(p.numel() for p in model.parameters())


def build_model(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> UniRES:
    torch.manual_seed(seed)
    return UniRES(cfg).to(dtype)


# --- inputs ---------------------------------------------------------------------

def preprocess_image(image: np.ndarray, image_size: int) -> Tensor:
    """uint8 ``(h, w, 3)`` image -> normalized ``(3, S, S)`` float tensor."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeMismatch(f"expected an (h, w, 3) image, got {arr.shape}")
    x = torch.from_numpy(np.array(arr, dtype=np.uint8)).permute(2, 0, 1).float().div(255.0)
    if tuple(x.shape[1:]) != (image_size, image_size):
        x = F.interpolate(x[None], size=(image_size, image_size), mode="bilinear", align_corners=False)[0]
    mean = torch.tensor(CLIP_MEAN)[:, None, None]
    std = torch.tensor(CLIP_STD)[:, None, None]
    return (x - mean) / std


def token_tensors(tokens: list[ExpressionTokens]) -> tuple[Tensor, Tensor]:
    ids = torch.tensor([t.ids for t in tokens], dtype=torch.long)
    lengths = torch.tensor([t.true_length for t in tokens], dtype=torch.long)
    return ids, lengths


@torch.no_grad()
def predict(model: UniRES, image: np.ndarray, tokens: ExpressionTokens):
    """Run one sample; returns (probability map at the image's size, trace)."""
    model.eval()
    dtype = next(model.parameters()).dtype
    x = preprocess_image(image, model.cfg.image_size)[None].to(dtype)
    ids, lengths = token_tensors([tokens])
    trace = model(x, ids, lengths)
    h, w = image.shape[:2]
    prob = resize_prob(trace.mask_probs[0].double().numpy(), w, h)
    return prob, trace


def predict_mask(model: UniRES, image: np.ndarray, tokens: ExpressionTokens, threshold: float | None = None):
    prob, _ = predict(model, image, tokens)
    return binarize(prob, model.cfg.mask_threshold if threshold is None else threshold)


# --- group visualisation --------------------------------------------------------

def assign_groups(patches: Tensor, bank: Tensor, temperature: float = 1.0) -> np.ndarray:
    """Argmax over scaled dot-product affinity between ``(P, d)`` patches and a ``(n, d)`` bank."""
    logits = patches @ bank.T / (math.sqrt(patches.shape[-1]) * temperature)
    g = int(round(math.sqrt(patches.shape[0])))
    return logits.argmax(dim=-1).view(g, g).cpu().numpy()


def group_assignment(trace: ForwardTrace, level: str, index: int = 0, temperature: float = 1.0) -> np.ndarray:
    """Assign every patch to its most affine group token of ``level`` ("low" or "high").

    Uses the encoder-output token bank, i.e. before the region filter.
    """
    bank = {"low": trace.low_group_out, "high": trace.high_group_out}[level]
    if bank is None:
        raise ValueError(f"{level}-level group tokens are disabled in this model")
    return assign_groups(trace.patch_features[index], bank[index], temperature)


# --- checkpoints and weight import ----------------------------------------------

def save_checkpoint(path, model: UniRES, **extra) -> None:
    payload = {"config": model.cfg.to_dict(), "state_dict": model.state_dict(), **extra}
    torch.save(payload, Path(path))


def load_checkpoint(path, expected: ModelConfig | None = None):
    """Return ``(model, payload)``; rejects a checkpoint whose config differs from ``expected``."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    cfg = ModelConfig.from_dict(payload["config"])
    if expected is not None and cfg != expected:
        diff = {k: (v, getattr(expected, k)) for k, v in cfg.to_dict().items() if getattr(expected, k) != v}
        raise CheckpointMismatch(f"checkpoint config differs (saved, expected): {diff}")
    model = UniRES(cfg)
    state = payload["state_dict"]
    model.to(next(iter(state.values())).dtype)
    model.load_state_dict(state)
    return model, payload


def import_weights(model: UniRES, external: dict[str, Tensor], manifest) -> list[str]:
    """Copy externally converted tensors into ``model``.

    ``manifest`` is a dict (or a JSON file path) of the form
    ``{"mapping": {"external.name": "internal.name", ...}}``. Returns the
    internal parameter names that were not covered by the manifest.
    """
    if not isinstance(manifest, dict):
        manifest = json.loads(Path(manifest).read_text(encoding="utf-8"))
    mapping = manifest["mapping"]
    state = model.state_dict()
    for ext_name, int_name in mapping.items():
        if int_name not in state:
            raise KeyError(f"manifest targets unknown parameter {int_name!r}")
        if ext_name not in external:
            raise KeyError(f"external weights lack {ext_name!r}")
        src = torch.as_tensor(external[ext_name])
        if tuple(src.shape) != tuple(state[int_name].shape):
            raise ShapeMismatch(f"{ext_name} {tuple(src.shape)} -> {int_name} {tuple(state[int_name].shape)}")
        state[int_name] = src.to(state[int_name].dtype)
    model.load_state_dict(state)
    covered = set(mapping.values())
    return [n for n in state if n not in covered]
