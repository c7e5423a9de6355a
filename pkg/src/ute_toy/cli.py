"""Command-line entry point: ``ute-toy <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import torch
from PIL import Image

from . import checkpoint as ckpt
from .data import (
    DEFAULT_VOCABULARY,
    DataError,
    DatasetManifest,
    generate_synthetic_dataset,
    load_annotated_image,
    to_uint8,
)
from .diffusion import UNet, UnetConfig
from .edit import InstructionError, diffusion_editor, edit_image, evaluate, parse_instruction
from .glyph import GlyphError
from .glyph_encoder import GlyphEncoderConfig, character_accuracy, pretrain_glyph_encoder
from .trainer import TrainConfig, iter_training
from .vae import NonFiniteLossError, PttSchedule, VaeConfig, images_to_tensor, psnr, train_vae

def _read_config(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _build(cls, raw: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise SystemExit(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**raw)


def _vocabulary(args) -> list[str]:
    if getattr(args, "vocabulary", None):
        return [w.strip() for w in Path(args.vocabulary).read_text().split() if w.strip()]
    return list(DEFAULT_VOCABULARY)


def cmd_make_dataset(args):
    manifest = generate_synthetic_dataset(
        args.out, args.n, vocabulary=_vocabulary(args), size=args.size, seed=args.seed, split=args.split
    )
    print(f"wrote {len(manifest)} images to {args.out}")


def cmd_train_vae(args):
    raw = _read_config(args.config)
    ptt = raw.pop("ptt", True)
    config = _build(VaeConfig, raw)
    manifest = DatasetManifest.load_file(args.manifest)
    images = images_to_tensor([a.image for a in manifest.load_all()])
    config.image_size = images.shape[-1]
    result = train_vae(images, config, PttSchedule(images.shape[-1]) if ptt else None, seed=args.seed, log_every=50)
    ckpt.save_checkpoint(args.out, "vae", result.model, config, {"stage_losses": result.stage_losses, "ptt": ptt})
    print(f"train PSNR {psnr(result.model, images[:256]):.2f} dB; saved {args.out}")


def cmd_pretrain_glyph(args):
    raw = _read_config(args.config)
    steps = raw.pop("steps", args.steps)
    config = _build(GlyphEncoderConfig, raw)
    result = pretrain_glyph_encoder(_vocabulary(args), steps, seed=args.seed, config=config)
    ckpt.save_checkpoint(args.out, "glyph_encoder", result.encoder, config, {"charset": result.charset})
    print(f"held-out character accuracy {100 * character_accuracy(result):.1f}%; saved {args.out}")


def cmd_train_unet(args):
    raw = _read_config(args.config)
    unet_raw = raw.pop("unet", {})
    config = _build(TrainConfig, raw)
    vae = ckpt.load_vae(args.vae_ckpt)
    glyph = ckpt.load_glyph_encoder(args.glyph_ckpt)
    unet_cfg = _build(UnetConfig, {"latent_channels": vae.config.latent_channels,
                                   "context_dim": glyph.config.dim, **unet_raw})
    images = DatasetManifest.load_file(args.manifest).load_all()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    schedule = config.schedule()
    unet = None
    with open(out / "loss.jsonl", "w") as stream:
        try:
            for unet, report in iter_training(images, vae, glyph, config, unet_cfg, seed=args.seed):
                stream.write(json.dumps(report.to_record()) + "\n")
        except NonFiniteLossError as exc:
            last = UNet(unet_cfg)
            last.load_state_dict(exc.last_good_state)
            ckpt.save_unet(out / "last_good_unet.pt", last, schedule)
            raise SystemExit(f"{exc}; last good weights saved to {out / 'last_good_unet.pt'}")
    if unet is None:
        torch.manual_seed(args.seed)
        unet = UNet(unet_cfg)
    ckpt.save_unet(out / ckpt.UNET_FILE, unet, schedule, {"train": asdict(config)})
    for src, name in ((args.vae_ckpt, ckpt.VAE_FILE), (args.glyph_ckpt, ckpt.GLYPH_FILE)):
        if Path(src).resolve() != (out / name).resolve():
            (out / name).write_bytes(Path(src).read_bytes())
    print(f"saved checkpoints to {out}")


def cmd_edit(args):
    annotated = load_annotated_image(args.image, args.annotations)
    request = parse_instruction(args.instruction, annotated.boxes)
    components = ckpt.load_components(args.ckpt_dir)
    out = edit_image(annotated.image, request, components, args.steps, args.seed, composite=args.composite)
    Image.fromarray(to_uint8(out)).save(args.out)
    print(f"edited {list(request.bbox)} -> {request.target_text!r}; wrote {args.out}")


def cmd_eval(args):
    manifest = DatasetManifest.load_file(args.manifest)
    images = [a for a in manifest.load_all() if a.boxes]
    vocabulary = manifest.meta.get("vocabulary") or _vocabulary(args)
    components = ckpt.load_components(args.ckpt_dir)
    editor = diffusion_editor(components, args.steps, composite=args.composite)
    report = evaluate(images, editor, vocabulary, seed=args.seed)
    Path(args.out).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    print(f"OCR accuracy {report.ocr_accuracy:.2f}% over {report.n_samples} samples; wrote {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ute-toy", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-dataset", help="generate a synthetic annotated dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="train", choices=["train", "val", "test"])
    s.add_argument("--vocabulary", help="whitespace-separated word list file")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_dataset)

    s = sub.add_parser("train-vae", help="train the VAE with progressive crop sizes")
    s.add_argument("--config")
    s.add_argument("--manifest", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_vae)

    s = sub.add_parser("pretrain-glyph-encoder", help="pretrain and freeze the glyph encoder")
    s.add_argument("--config")
    s.add_argument("--vocabulary")
    s.add_argument("--steps", type=int, default=1500)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain_glyph)

    s = sub.add_parser("train-unet", help="train the conditional UNet")
    s.add_argument("--config")
    s.add_argument("--vae-ckpt", required=True)
    s.add_argument("--glyph-ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.set_defaults(func=cmd_train_unet)

    s = sub.add_parser("edit", help="apply one instruction to an annotated image")
    s.add_argument("--image", required=True)
    s.add_argument("--annotations", required=True)
    s.add_argument("--instruction", required=True)
    s.add_argument("--ckpt-dir", required=True)
    s.add_argument("--steps", type=int, default=None, help="DDIM steps (default: full chain)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--composite", action=argparse.BooleanOptionalAction, default=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_edit)

    s = sub.add_parser("eval", help="OCR accuracy of edits on a held-out manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--ckpt-dir", required=True)
    s.add_argument("--vocabulary")
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--composite", action=argparse.BooleanOptionalAction, default=True)
    s.add_argument("--out", required=True, help="report path (JSON)")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except (InstructionError, DataError, GlyphError, ckpt.CheckpointError) as exc:
        print(f"ute-toy {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
