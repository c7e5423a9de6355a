"""Versioned checkpoint container: named weight tensors plus the model config.

Files are written with ``torch.save`` and read back with ``weights_only=True``,
so a checkpoint only ever holds tensors and plain JSON-like config values.
"""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import torch

from .edit import Components
from .diffusion import NoiseSchedule, UNet, UnetConfig, make_schedule
from .glyph_encoder import GlyphEncoder, GlyphEncoderConfig
from .vae import VAE, VaeConfig

FORMAT = "ute-toy-checkpoint"
VERSION = 1

VAE_FILE = "vae.pt"
GLYPH_FILE = "glyph_encoder.pt"
UNET_FILE = "unet.pt"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, kind: str, model: torch.nn.Module, config, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = asdict(config) if not isinstance(config, dict) else config
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "config": cfg,
        "extra": extra or {},
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path, kind: str | None = None) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if payload.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')} in {path}")
    if kind is not None and payload.get("kind") != kind:
        raise CheckpointError(f"{path} holds a {payload.get('kind')!r} model, expected {kind!r}")
    return payload


def load_vae(path: str | Path) -> VAE:
    payload = load_checkpoint(path, "vae")
    model = VAE(VaeConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    return model.eval()


def load_glyph_encoder(path: str | Path) -> GlyphEncoder:
    payload = load_checkpoint(path, "glyph_encoder")
    model = GlyphEncoder(GlyphEncoderConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    return model.eval()


def save_unet(path: str | Path, unet: UNet, schedule: NoiseSchedule, extra: dict | None = None) -> Path:
    return save_checkpoint(path, "unet", unet, unet.config, {"schedule": schedule.to_config(), **(extra or {})})


def load_unet(path: str | Path) -> tuple[UNet, NoiseSchedule]:
    payload = load_checkpoint(path, "unet")
    model = UNet(UnetConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    sched = payload["extra"]["schedule"]
    return model.eval(), make_schedule(sched["T"], sched["beta_start"], sched["beta_end"])


def load_components(ckpt_dir: str | Path) -> Components:
    """Load the VAE, glyph encoder, UNet and schedule stored in one directory."""
    ckpt_dir = Path(ckpt_dir)
    unet, schedule = load_unet(ckpt_dir / UNET_FILE)
    return Components(load_vae(ckpt_dir / VAE_FILE), load_glyph_encoder(ckpt_dir / GLYPH_FILE), unet, schedule)
