"""Noise-prediction losses and the UNet training loop (VAE and glyph encoder frozen)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import AnnotatedImage
from .diffusion import NoiseSchedule, UNet, UnetConfig, add_noise, downsample_mask, make_schedule
from .glyph import EditSample, apply_mask, make_mask, render_glyph, select_box_index
from .glyph_encoder import GlyphEncoder, freeze, weights_hash
from .vae import VAE, NonFiniteLossError, images_to_tensor

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """UNet optimisation settings.

    Full-scale reference values are batch 256 and lr 1e-5. ``epochs``, when
    set, overrides ``steps`` with ``ceil(epochs * n_images / batch_size)``.
    """

    batch_size: int = 32
    lr: float = 1e-4
    steps: int = 500
    epochs: float | None = None
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.1
    grad_clip: float | None = 1.0
    log_every: int = 50
    freeze_vae: bool = True
    freeze_glyph_encoder: bool = True

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)

    def total_steps(self, n_images: int) -> int:
        if self.epochs is None:
            return self.steps
        return math.ceil(self.epochs * n_images / self.batch_size)


@dataclass
class LossReport:
    step: int
    loss: float
    grad_norm: float
    hashes: dict[str, str] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {"step": self.step, "loss": self.loss, "grad_norm": self.grad_norm, "hashes": self.hashes}


def _mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"prediction shape {tuple(a.shape)} != target shape {tuple(b.shape)}")
    return (a - b).pow(2).mean()


def sd_loss_reference(
    model: Callable[..., torch.Tensor],
    z0: torch.Tensor,
    context: torch.Tensor,
    t,
    eps: torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Plain conditional latent-diffusion loss ``mean((eps - model(z_t, t, context))^2)``."""
    z_t = add_noise(z0, eps, t, schedule)
    return _mse(eps, model(z_t, t, context))


def diffute_loss_latents(
    unet: Callable[..., torch.Tensor],
    z0: torch.Tensor,
    x_m: torch.Tensor,
    m_lat: torch.Tensor,
    e_g: torch.Tensor,
    t,
    eps: torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    z_t = add_noise(z0, eps, t, schedule)
    return _mse(eps, unet(z_t, t, x_m, m_lat, e_g))


def encode_samples(
    samples: Sequence[EditSample], vae: VAE, glyph_encoder: GlyphEncoder
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Frozen-component features ``(z0, x_m, m_lat, e_g)`` for a batch of samples."""
    dtype = next(vae.parameters()).dtype
    with torch.no_grad():
        source = images_to_tensor([s.source for s in samples]).to(dtype)
        masked = images_to_tensor([s.masked for s in samples]).to(dtype)
        mask = images_to_tensor([s.mask for s in samples]).to(dtype)
        glyphs = images_to_tensor([s.glyph.pixels for s in samples]).to(next(glyph_encoder.parameters()).dtype)
        z0 = vae.encode(source)
        x_m = vae.encode(masked)
        m_lat = downsample_mask(mask, vae.config.downsample)
        e_g = glyph_encoder(glyphs)
    return z0, x_m, m_lat, e_g


def diffute_loss(
    samples: EditSample | Sequence[EditSample],
    t,
    eps: torch.Tensor,
    unet: UNet,
    vae: VAE,
    glyph_encoder: GlyphEncoder,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Editing objective: encode the source, noise it, predict the noise given
    the masked-image latent, the latent mask and the glyph embedding."""
    if isinstance(samples, EditSample):
        samples = [samples]
    if any(not 0 <= int(v) <= schedule.T for v in torch.as_tensor(t).reshape(-1)):
        raise ValueError(f"timestep out of range 0..{schedule.T}")
    z0, x_m, m_lat, e_g = encode_samples(samples, vae, glyph_encoder)
    return diffute_loss_latents(unet, z0, x_m, m_lat, e_g, t, eps.to(z0.dtype), schedule)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

class FrozenFeatureCache:
    """Memoised outputs of the frozen VAE and glyph encoder.

    Because both encoders are frozen and deterministic in inference mode, the
    features for a given (image, box) pair never change during UNet training,
    so they are computed once instead of every step.
    """

    def __init__(self, images: Sequence[AnnotatedImage], vae: VAE, glyph_encoder: GlyphEncoder, batch: int = 256):
        self.images = images
        self.box_counts = [len(a.boxes) for a in images]
        if any(n == 0 for n in self.box_counts):
            raise ValueError("every training image needs at least one OCR box")
        factor = vae.config.downsample
        pairs = [(i, j) for i, n in enumerate(self.box_counts) for j in range(n)]
        self.pair_index = {p: k for k, p in enumerate(pairs)}
        texts = sorted({b.text for a in images for b in a.boxes})
        self.text_index = {t: k for k, t in enumerate(texts)}
        canvas = glyph_encoder.config.canvas
        with torch.no_grad():
            self.z0 = self._encode(vae, [a.image for a in images], batch)
            masks = [make_mask(images[i].boxes[j].bbox, images[i].size) for i, j in pairs]
            masked = [apply_mask(images[i].image, m) for (i, _), m in zip(pairs, masks)]
            self.x_m = self._encode(vae, masked, batch)
            self.m_lat = downsample_mask(images_to_tensor(masks), factor)
            self.e_g = glyph_encoder(images_to_tensor([render_glyph(t, canvas).pixels for t in texts]))
        self.pairs = pairs

    @staticmethod
    def _encode(vae: VAE, images, batch: int) -> torch.Tensor:
        return torch.cat([vae.encode(images_to_tensor(images[k:k + batch])) for k in range(0, len(images), batch)])

    def batch(self, image_idx: Sequence[int], box_idx: Sequence[int]):
        pk = torch.tensor([self.pair_index[(i, j)] for i, j in zip(image_idx, box_idx)])
        tk = torch.tensor([self.text_index[self.images[i].boxes[j].text] for i, j in zip(image_idx, box_idx)])
        return self.z0[torch.as_tensor(image_idx)], self.x_m[pk], self.m_lat[pk], self.e_g[tk]


@dataclass
class UnetTrainResult:
    unet: UNet
    reports: list[LossReport]
    frozen_hashes_before: dict[str, str]
    frozen_hashes_after: dict[str, str]

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.reports]


def frozen_hashes(vae: VAE, glyph_encoder: GlyphEncoder) -> dict[str, str]:
    return {"vae": weights_hash(vae), "glyph_encoder": weights_hash(glyph_encoder)}


def iter_training(
    images: Sequence[AnnotatedImage],
    vae: VAE,
    glyph_encoder: GlyphEncoder,
    config: TrainConfig,
    unet_config: UnetConfig | None = None,
    seed: int = 0,
    unet: UNet | None = None,
) -> Iterator[tuple[UNet, LossReport]]:
    """Generator form of :func:`train_unet`, yielding after every optimiser step.

    Each step draws a batch of images, selects one OCR box per image with
    :func:`select_box_index`, samples ``t ~ U{1..T}`` and ``eps ~ N(0, I)`` and
    takes an Adam step on the UNet only.

    Raises:
        NonFiniteLossError: carrying the last finite UNet state dict.
    """
    if not (config.freeze_vae and config.freeze_glyph_encoder):
        raise ValueError("the VAE and glyph encoder must stay frozen during UNet training")
    if not images:
        raise ValueError("no training images")
    freeze(vae)
    freeze(glyph_encoder)
    hashes = frozen_hashes(vae, glyph_encoder)
    schedule = config.schedule()
    unet_config = unet_config or UnetConfig(
        latent_channels=vae.config.latent_channels, context_dim=glyph_encoder.config.dim
    )
    torch.manual_seed(seed)
    unet = unet or UNet(unet_config)
    cache = FrozenFeatureCache(images, vae, glyph_encoder)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(unet.parameters(), lr=config.lr)
    unet.train()
    last_good = {k: v.clone() for k, v in unet.state_dict().items()}
    for step in range(1, config.total_steps(len(images)) + 1):
        image_idx = rng.integers(0, len(images), size=config.batch_size)
        box_idx = [select_box_index(cache.box_counts[i], rng) for i in image_idx]
        t = torch.from_numpy(rng.integers(1, schedule.T + 1, size=config.batch_size))
        z0, x_m, m_lat, e_g = cache.batch(image_idx, box_idx)
        eps = torch.randn(z0.shape, generator=gen)
        loss = diffute_loss_latents(unet, z0, x_m, m_lat, e_g, t, eps, schedule)
        if not math.isfinite(loss.item()):
            raise NonFiniteLossError(f"non-finite UNet loss at step {step}", step, last_good)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        max_norm = config.grad_clip if config.grad_clip is not None else float("inf")
        grad_norm = float(nn.utils.clip_grad_norm_(unet.parameters(), max_norm))
        opt.step()
        last_good = {k: v.clone() for k, v in unet.state_dict().items()}
        report = LossReport(step, loss.item(), grad_norm)
        if config.log_every and step % config.log_every == 0:
            report.hashes = frozen_hashes(vae, glyph_encoder)
            logger.info("unet step %d loss %.5f grad %.3f", step, report.loss, grad_norm)
        yield unet, report
    if frozen_hashes(vae, glyph_encoder) != hashes:
        raise RuntimeError("frozen component weights changed during UNet training")


def train_unet(
    images: Sequence[AnnotatedImage],
    vae: VAE,
    glyph_encoder: GlyphEncoder,
    config: TrainConfig,
    unet_config: UnetConfig | None = None,
    seed: int = 0,
) -> UnetTrainResult:
    before = frozen_hashes(vae, glyph_encoder)
    reports = []
    torch.manual_seed(seed)
    unet_config = unet_config or UnetConfig(
        latent_channels=vae.config.latent_channels, context_dim=glyph_encoder.config.dim
    )
    unet = UNet(unet_config)
    for unet, report in iter_training(images, vae, glyph_encoder, config, unet_config, seed, unet=unet):
        reports.append(report)
    unet.eval()
    return UnetTrainResult(unet, reports, before, frozen_hashes(vae, glyph_encoder))
