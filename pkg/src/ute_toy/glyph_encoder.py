"""Patch-transformer glyph encoder: glyph image -> cross-attention context tokens.

A tiny stand-in for a pretrained OCR encoder. It is pretrained on rendered
strings with a per-slot character classification head, after which the head
is dropped and the encoder is frozen.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .glyph import GLYPH_CANVAS, render_glyph
from .vae import NonFiniteLossError, images_to_tensor

logger = logging.getLogger(__name__)


@dataclass
class GlyphEncoderConfig:
    canvas: tuple[int, int] = GLYPH_CANVAS
    patch_size: int = 16
    dim: int = 64
    layers: int = 2
    heads: int = 4
    frozen: bool = True

    def __post_init__(self):
        self.canvas = tuple(self.canvas)
        gh, gw = self.canvas
        if gh % self.patch_size or gw % self.patch_size:
            raise ValueError(f"glyph canvas {self.canvas} not divisible by patch size {self.patch_size}")

    @property
    def num_tokens(self) -> int:
        gh, gw = self.canvas
        return (gh // self.patch_size) * (gw // self.patch_size)


class GlyphEncoder(nn.Module):
    def __init__(self, config: GlyphEncoderConfig | None = None):
        super().__init__()
        self.config = cfg = config or GlyphEncoderConfig()
        self.patch = nn.Conv2d(3, cfg.dim, cfg.patch_size, stride=cfg.patch_size)
        self.pos = nn.Parameter(torch.randn(1, cfg.num_tokens, cfg.dim) * 0.02)
        layer = nn.TransformerEncoderLayer(
            cfg.dim, cfg.heads, dim_feedforward=2 * cfg.dim, dropout=0.0, batch_first=True, norm_first=True
        )
        self.transformer = nn.TransformerEncoder(layer, cfg.layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(cfg.dim)

    def forward(self, glyphs: torch.Tensor) -> torch.Tensor:
        """Map ``(N, 3, G_h, G_w)`` glyph images in ``[0, 1]`` to ``(N, M, d)`` tokens."""
        if tuple(glyphs.shape[1:]) != (3, *self.config.canvas):
            raise ValueError(f"glyph batch shape {tuple(glyphs.shape)} does not match canvas {self.config.canvas}")
        tokens = self.patch(glyphs * 2.0 - 1.0).flatten(2).transpose(1, 2) + self.pos
        return self.norm(self.transformer(tokens))


@torch.no_grad()
def encode_glyph(encoder: GlyphEncoder, glyphs) -> torch.Tensor:
    """Inference-mode embedding of one :class:`GlyphImage` or a list of them."""
    if not isinstance(glyphs, (list, tuple)):
        glyphs = [glyphs]
    encoder.eval()
    return encoder(images_to_tensor([g.pixels for g in glyphs]))


def encode_texts(encoder: GlyphEncoder, texts: Sequence[str]) -> torch.Tensor:
    canvas = encoder.config.canvas
    return encode_glyph(encoder, [render_glyph(t, canvas) for t in texts])


def weights_hash(module: nn.Module) -> str:
    """SHA-256 over all parameters and buffers in name order."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

class SlotHead(nn.Module):
    """Predicts the character (or blank) in each of ``max_len`` left-aligned slots."""

    def __init__(self, cfg: GlyphEncoderConfig, n_classes: int, max_len: int):
        super().__init__()
        self.max_len, self.n_classes = max_len, n_classes
        self.fc = nn.Linear(cfg.num_tokens * cfg.dim, max_len * n_classes)

    def forward(self, tokens):
        return self.fc(tokens.flatten(1)).view(-1, self.max_len, self.n_classes)


def charset_of(vocabulary: Sequence[str]) -> list[str]:
    return sorted({c for word in vocabulary for c in word})


def random_strings(rng: np.random.Generator, charset: Sequence[str], n: int, max_len: int) -> list[str]:
    lengths = rng.integers(1, max_len + 1, size=n)
    return ["".join(charset[j] for j in rng.integers(0, len(charset), size=k)) for k in lengths]


def slot_targets(texts: Sequence[str], charset: Sequence[str], max_len: int) -> torch.Tensor:
    index = {c: i + 1 for i, c in enumerate(charset)}
    out = torch.zeros(len(texts), max_len, dtype=torch.long)
    for r, text in enumerate(texts):
        for k, ch in enumerate(text):
            out[r, k] = index[ch]
    return out


def _render_batch(texts, canvas) -> torch.Tensor:
    return images_to_tensor([render_glyph(t, canvas).pixels for t in texts])


@dataclass
class GlyphPretrainResult:
    encoder: GlyphEncoder
    losses: list[float]
    charset: list[str]
    head: SlotHead


def pretrain_glyph_encoder(
    vocabulary: Sequence[str],
    steps: int,
    seed: int = 0,
    config: GlyphEncoderConfig | None = None,
    batch_size: int = 64,
    lr: float = 1e-3,
    max_len: int = 8,
    word_fraction: float = 0.25,
) -> GlyphPretrainResult:
    """Pretrain the encoder on uniform-font renders of random strings.

    Each batch is rendered fresh: random strings over the vocabulary's
    character set, with whole vocabulary words mixed in at ``word_fraction``.
    The returned encoder is frozen.
    """
    charset = charset_of(vocabulary)
    if len(charset) < 10:
        raise ValueError(f"vocabulary has only {len(charset)} distinct characters; need at least 10")
    max_len = max(max_len, max(len(w) for w in vocabulary))
    config = config or GlyphEncoderConfig()
    torch.manual_seed(seed)
    encoder = GlyphEncoder(config)
    head = SlotHead(config, len(charset) + 1, max_len)
    rng = np.random.default_rng(seed)
    losses: list[float] = []
    if steps > 0:
        params = list(encoder.parameters()) + list(head.parameters())
        opt = torch.optim.Adam(params, lr=lr)
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * min(s / steps, 1.0))))
        encoder.train()
        n_words = int(round(batch_size * word_fraction))
        for step in range(steps):
            texts = random_strings(rng, charset, batch_size - n_words, max_len)
            texts += [vocabulary[i] for i in rng.integers(0, len(vocabulary), size=n_words)]
            logits = head(encoder(_render_batch(texts, config.canvas)))
            targets = slot_targets(texts, charset, max_len)
            loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))
            if not math.isfinite(loss.item()):
                raise NonFiniteLossError(f"non-finite glyph-encoder loss at step {step}", step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
            if step % 200 == 0:
                logger.info("glyph encoder step %d loss %.4f", step, loss.item())
    freeze(encoder)
    head.eval()
    return GlyphPretrainResult(encoder, losses, charset, head)


@torch.no_grad()
def character_accuracy(result: GlyphPretrainResult, n: int = 512, seed: int = 12345, max_len: int = 8) -> float:
    """Held-out per-character accuracy of the pretext head on fresh random strings."""
    rng = np.random.default_rng(seed)
    texts = random_strings(rng, result.charset, n, min(max_len, result.head.max_len))
    images = _render_batch(texts, result.encoder.config.canvas)
    targets = slot_targets(texts, result.charset, result.head.max_len)
    pred = result.head(result.encoder(images)).argmax(-1)
    real = targets > 0
    return float((pred[real] == targets[real]).float().mean())
