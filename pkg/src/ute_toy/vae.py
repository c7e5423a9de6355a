"""Small convolutional VAE and its progressive crop-size training schedule."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    """Raised when a training loss becomes NaN or infinite."""

    def __init__(self, message: str, step: int, last_good_state: dict | None = None):
        super().__init__(message)
        self.step = step
        self.last_good_state = last_good_state


@dataclass
class VaeConfig:
    """Architecture and optimisation settings.

    Full-scale reference values: 3 epochs, batch 48, lr 5e-6.
    """

    downsample: int = 8
    latent_channels: int = 4
    widths: tuple[int, ...] = (32, 64, 96)
    groups: int = 8
    kl_weight: float = 1e-6
    image_size: int = 64
    steps_per_stage: int = 250
    batch_size: int = 16
    lr: float = 1e-3

    def __post_init__(self):
        self.widths = tuple(self.widths)
        n = self.downsample.bit_length() - 1
        if self.downsample < 2 or 2**n != self.downsample:
            raise ValueError("downsample factor must be a power of two")
        if len(self.widths) != n:
            raise ValueError(f"need {n} widths for downsample factor {self.downsample}")


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Encoder(nn.Module):
    """Space-to-depth by 2, then one residual level per further halving."""

    def __init__(self, cfg: VaeConfig):
        super().__init__()
        w = cfg.widths
        self.unshuffle = nn.PixelUnshuffle(2)
        self.conv_in = nn.Conv2d(12, w[0], 3, padding=1)
        blocks = []
        for i, width in enumerate(w):
            blocks.append(ResBlock(width, width, cfg.groups))
            if i + 1 < len(w):
                blocks.append(nn.Conv2d(width, w[i + 1], 3, stride=2, padding=1))
        self.blocks = nn.Sequential(*blocks)
        self.norm = nn.GroupNorm(min(cfg.groups, w[-1]), w[-1])
        self.conv_out = nn.Conv2d(w[-1], 2 * cfg.latent_channels, 3, padding=1)

    def forward(self, x):
        h = self.blocks(self.conv_in(self.unshuffle(x)))
        return self.conv_out(F.silu(self.norm(h)))


class Decoder(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        w = cfg.widths[::-1]
        self.conv_in = nn.Conv2d(cfg.latent_channels, w[0], 3, padding=1)
        blocks = []
        for i, width in enumerate(w):
            blocks.append(ResBlock(width, width, cfg.groups))
            if i + 1 < len(w):
                blocks += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(width, w[i + 1], 3, padding=1)]
        self.blocks = nn.Sequential(*blocks)
        self.norm = nn.GroupNorm(min(cfg.groups, w[-1]), w[-1])
        self.conv_out = nn.Conv2d(w[-1], 12, 3, padding=1)
        self.shuffle = nn.PixelShuffle(2)

    def forward(self, z):
        h = self.blocks(self.conv_in(z))
        return self.shuffle(self.conv_out(F.silu(self.norm(h))))


class VAE(nn.Module):
    """Image <-> latent autoencoder.

    Public methods take NCHW images in ``[0, 1]`` and return latents of shape
    ``(N, c, H/alpha, W/alpha)``. Latents are multiplied by ``latent_scale``
    (fitted after training) so that they are roughly unit variance for diffusion.
    """

    def __init__(self, config: VaeConfig | None = None):
        super().__init__()
        self.config = config or VaeConfig()
        self.encoder = Encoder(self.config)
        self.decoder = Decoder(self.config)
        self.register_buffer("latent_scale", torch.ones(()))

    def posterior(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        a = self.config.downsample
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) images, got {tuple(images.shape)}")
        if images.shape[-2] % a or images.shape[-1] % a:
            raise ValueError(f"image size {tuple(images.shape[-2:])} not divisible by {a}")
        moments = self.encoder(images * 2.0 - 1.0)
        mean, logvar = moments.chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """Posterior mean, scaled. Deterministic."""
        mean, _ = self.posterior(images)
        return mean * self.latent_scale

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        """Unclamped reconstruction in ``[-1, 1]`` units from an unscaled latent."""
        c = self.config.latent_channels
        if z.ndim != 4 or z.shape[1] != c:
            raise ValueError(f"expected (N, {c}, h, w) latents, got {tuple(z.shape)}")
        return self.decoder(z)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        out = self.decode_raw(z / self.latent_scale)
        return ((out + 1.0) / 2.0).clamp(0.0, 1.0)

    def reconstruct(self, images: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(images))


def images_to_tensor(images) -> torch.Tensor:
    """Stack HxWx3 numpy images (or one image) into an NCHW float tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).contiguous()


def tensor_to_images(t: torch.Tensor) -> np.ndarray:
    return t.detach().permute(0, 2, 3, 1).cpu().numpy().astype(np.float32)


# ---------------------------------------------------------------------------
# progressive training
# ---------------------------------------------------------------------------

def ptt_crop_size(stage: int, size: int) -> int:
    """Crop size of a progressive-training stage: S/8, S/4, S/2, then S."""
    if stage not in (1, 2, 3, 4):
        raise ValueError(f"PTT stage must be in 1..4, got {stage}")
    if size % 8:
        raise ValueError(f"input size {size} not divisible by 8")
    return size // 2 ** (4 - stage)


@dataclass
class PttSchedule:
    size: int
    stages: list[int] = field(init=False)

    def __post_init__(self):
        self.stages = [ptt_crop_size(k, self.size) for k in (1, 2, 3, 4)]

    @classmethod
    def fixed(cls, size: int) -> "PttSchedule":
        """Equal-budget baseline: four stages all at native size."""
        sched = cls(size)
        sched.stages = [size] * 4
        return sched


@dataclass
class VaeTrainResult:
    model: VAE
    stage_losses: list[list[float]]
    stage_val_losses: list[float] = field(default_factory=list)


def random_crops(
    images: torch.Tensor, crop: int, size: int, rng: np.random.Generator
) -> torch.Tensor:
    """Random ``crop``-sized window per image, bilinearly resized to ``size``."""
    n, _, h, w = images.shape
    if crop == h and crop == w:
        return images
    ys = rng.integers(0, h - crop + 1, size=n)
    xs = rng.integers(0, w - crop + 1, size=n)
    out = torch.stack([images[i, :, ys[i]:ys[i] + crop, xs[i]:xs[i] + crop] for i in range(n)])
    if crop != size:
        out = F.interpolate(out, size=(size, size), mode="bilinear", align_corners=False)
    return out


def vae_loss(model: VAE, batch: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """Pixel MSE plus a lightly weighted KL term (per-pixel normalised)."""
    mean, logvar = model.posterior(batch)
    std = torch.exp(0.5 * logvar)
    z = mean + std * torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    rec = model.decode_raw(z)
    mse = (rec - (batch * 2.0 - 1.0)).pow(2).mean()
    kl = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).sum(dim=(1, 2, 3)).mean()
    return mse + model.config.kl_weight * kl / batch[0].numel()


@torch.no_grad()
def fit_latent_scale(model: VAE, images: torch.Tensor, batch_size: int = 256) -> float:
    model.latent_scale.fill_(1.0)
    means = torch.cat([model.posterior(images[i:i + batch_size])[0] for i in range(0, len(images), batch_size)])
    scale = 1.0 / float(means.std().clamp_min(1e-6))
    model.latent_scale.fill_(scale)
    return scale


def train_vae(
    images: torch.Tensor,
    config: VaeConfig,
    ptt: PttSchedule | None,
    seed: int = 0,
    log_every: int = 0,
    val_images: torch.Tensor | None = None,
) -> VaeTrainResult:
    """Train a VAE on NCHW images in ``[0, 1]`` over four equal-budget stages.

    With ``ptt=None`` all four stages train at native size (the fixed-size
    baseline with an identical step budget). When ``val_images`` is given,
    the posterior-mean reconstruction MSE on them is recorded after each stage.

    Raises:
        NonFiniteLossError: if any step's loss is NaN or infinite.
    """
    if len(images) == 0:
        raise ValueError("no training images")
    size = images.shape[-1]
    schedule = ptt if ptt is not None else PttSchedule.fixed(size)
    torch.manual_seed(seed)
    model = VAE(config)
    generator = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    stage_losses: list[list[float]] = []
    stage_val: list[float] = []
    step = 0
    for stage, crop in enumerate(schedule.stages, start=1):
        losses = []
        for _ in range(config.steps_per_stage):
            idx = rng.integers(0, len(images), size=config.batch_size)
            batch = random_crops(images[torch.from_numpy(idx)], crop, size, rng)
            loss = vae_loss(model, batch, generator)
            if not math.isfinite(loss.item()):
                raise NonFiniteLossError(f"non-finite VAE loss at step {step} (stage {stage})", step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
            if log_every and step % log_every == 0:
                logger.info("vae stage %d step %d loss %.5f", stage, step, loss.item())
        stage_losses.append(losses)
        if val_images is not None:
            stage_val.append(reconstruction_mse(model, val_images))
            model.train()
    model.eval()
    if step:
        fit_latent_scale(model, images)
    return VaeTrainResult(model, stage_losses, stage_val)


@torch.no_grad()
def reconstruction_mse(model: VAE, images: torch.Tensor, batch_size: int = 128) -> float:
    """Mean squared error of ``decode(encode(x))`` against ``x`` in ``[0, 1]``."""
    model.eval()
    se, n = 0.0, 0
    for i in range(0, len(images), batch_size):
        x = images[i:i + batch_size]
        se += float((model.reconstruct(x) - x).pow(2).sum())
        n += x.numel()
    return se / n


def psnr(model: VAE, images: torch.Tensor, batch_size: int = 128) -> float:
    """Mean-squared-error PSNR (dB) of ``decode(encode(x))`` over a set of images."""
    return float(10.0 * math.log10(1.0 / max(reconstruction_mse(model, images, batch_size), 1e-12)))


@torch.no_grad()
def text_crop_psnr(model: VAE, images: torch.Tensor, boxes, batch_size: int = 128) -> float:
    """PSNR (dB) over the pixels inside each image's ``(x, y, w, h)`` boxes only.

    ``boxes[i]`` lists the boxes of ``images[i]``; the whole image is encoded
    and decoded, then only text pixels are scored.
    """
    if len(boxes) != len(images):
        raise ValueError(f"{len(boxes)} box lists for {len(images)} images")
    model.eval()
    se, n = 0.0, 0
    for i in range(0, len(images), batch_size):
        x = images[i:i + batch_size]
        err = (model.reconstruct(x) - x).pow(2)
        for k, image_boxes in enumerate(boxes[i:i + batch_size]):
            for bx, by, bw, bh in image_boxes:
                se += float(err[k, :, by:by + bh, bx:bx + bw].sum())
                n += 3 * bw * bh
    if n == 0:
        raise ValueError("no text boxes to score")
    return float(10.0 * math.log10(1.0 / max(se / n, 1e-12)))
