"""Annotated-image data model, annotation I/O and the synthetic text-image generator.

Images are handled as ``float32`` arrays of shape ``(H, W, 3)`` with values in
``[0, 1]``. Boxes follow the ``[x, y, w, h]`` integer convention with the origin
at the top-left pixel.

On disk every image is an 8-bit RGB PNG with a JSON sidecar listing
``{"text": ..., "bbox": [x, y, w, h]}`` records. A dataset is indexed by a JSON
manifest whose entry paths are relative to the manifest's own directory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw, ImageFont

from .fonts import SYNTHETIC_FONTS

MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "val", "test")

DEFAULT_VOCABULARY = (
    "OPEN", "SALE", "CAFE", "EXIT", "STOP", "FOOD", "BAR", "HOTEL", "PARK", "BANK",
    "TAXI", "SHOP", "MENU", "FREE", "PUSH", "ZOO", "ROOM", "BUS", "GIFT", "TEA",
)


class DataError(ValueError):
    """Raised for malformed images, annotations or manifests."""


class CanvasTooSmallError(DataError):
    pass


@dataclass(frozen=True)
class OcrBox:
    text: str
    bbox: tuple[int, int, int, int]

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise DataError("empty text field")
        x, y, w, h = self.bbox
        if w < 1 or h < 1:
            raise DataError(f"degenerate box {list(self.bbox)}")

    def check_inside(self, height: int, width: int) -> None:
        x, y, w, h = self.bbox
        if x < 0 or y < 0 or x + w > width or y + h > height:
            raise DataError(f"box outside bounds: {list(self.bbox)} in {width}x{height} image")

    def to_record(self) -> dict:
        return {"text": self.text, "bbox": list(self.bbox)}


@dataclass
class AnnotatedImage:
    image: np.ndarray
    boxes: list[OcrBox] = field(default_factory=list)

    def __post_init__(self):
        check_image(self.image)
        h, w = self.image.shape[:2]
        for box in self.boxes:
            box.check_inside(h, w)

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


@dataclass
class DatasetManifest:
    """Index of (image, annotation) file pairs.

    Entry paths are stored relative to ``root``; :meth:`paths` resolves them.
    """

    entries: list[tuple[str, str]]
    split: str = "train"
    seed: int = 0
    root: Path = Path(".")
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        images = [e[0] for e in self.entries]
        if len(set(images)) != len(images):
            raise DataError("duplicate image paths in manifest")
        self.root = Path(self.root)

    def __len__(self) -> int:
        return len(self.entries)

    def paths(self) -> list[tuple[Path, Path]]:
        return [(self.root / img, self.root / ann) for img, ann in self.entries]

    def load(self, index: int) -> AnnotatedImage:
        img, ann = self.paths()[index]
        return load_annotated_image(img, ann)

    def load_all(self) -> list[AnnotatedImage]:
        return [load_annotated_image(img, ann) for img, ann in self.paths()]

    def save(self, path: str | Path | None = None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        payload = {
            "split": self.split,
            "seed": self.seed,
            "meta": self.meta,
            "entries": [{"image": img, "annotation": ann} for img, ann in self.entries],
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load_file(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        payload = json.loads(path.read_text())
        manifest = cls(
            entries=[(e["image"], e["annotation"]) for e in payload["entries"]],
            split=payload.get("split", "train"),
            seed=int(payload.get("seed", 0)),
            root=path.parent,
            meta=payload.get("meta", {}),
        )
        for img, ann in manifest.paths():
            if not img.exists() or not ann.exists():
                raise DataError(f"manifest entry does not resolve: {img}, {ann}")
        return manifest


def check_image(image: np.ndarray, factor: int | None = None) -> None:
    """Validate an ``(H, W, 3)`` image array in ``[0, 1]``.

    If ``factor`` is given, H and W must also be divisible by it.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"expected an HxWx3 image, got shape {image.shape}")
    h, w = image.shape[:2]
    if h <= 0 or w <= 0:
        raise DataError("image has zero extent")
    if not np.all(np.isfinite(image)):
        raise DataError("image contains non-finite values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise DataError("image values outside [0, 1]")
    if factor is not None and (h % factor or w % factor):
        raise DataError(f"image size {h}x{w} not divisible by {factor}")


def parse_annotations(records: Sequence[dict]) -> list[OcrBox]:
    boxes = []
    for rec in records:
        text = rec.get("text", "")
        bbox = rec.get("bbox")
        if bbox is None or len(bbox) != 4:
            raise DataError(f"annotation record lacks a 4-element bbox: {rec}")
        boxes.append(OcrBox(text, tuple(int(v) for v in bbox)))
    return boxes


def load_annotated_image(image_path: str | Path, annotation_path: str | Path) -> AnnotatedImage:
    """Read a PNG and its JSON sidecar into an :class:`AnnotatedImage`.

    Raises:
        DataError: if the image cannot be decoded, a box is degenerate or lies
            outside the image, or a text field is empty.
    """
    try:
        with Image.open(image_path) as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"could not decode image {image_path}: {exc}") from exc
    try:
        records = json.loads(Path(annotation_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"could not parse annotation {annotation_path}: {exc}") from exc
    if isinstance(records, dict):
        records = records.get("boxes", [])
    return AnnotatedImage(pixels, parse_annotations(records))


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(image * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_annotated_image(
    annotated: AnnotatedImage,
    image_path: str | Path,
    annotation_path: str | Path,
    extra: Sequence[dict] | None = None,
) -> None:
    """Write an annotated image as PNG + JSON sidecar.

    ``extra`` optionally carries per-box fields merged into each record (the
    synthetic generator stores the font and size this way).
    """
    Image.fromarray(to_uint8(annotated.image), mode="RGB").save(image_path)
    records = [b.to_record() for b in annotated.boxes]
    if extra is not None:
        records = [{**rec, **ex} for rec, ex in zip(records, extra)]
    Path(annotation_path).write_text(json.dumps(records, indent=1, sort_keys=True) + "\n")


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def scale_box(bbox: Sequence[int], sx: float, sy: float, height: int, width: int) -> tuple[int, int, int, int]:
    x, y, w, h = bbox
    nx = min(max(_round_half_up(x * sx), 0), width - 1)
    ny = min(max(_round_half_up(y * sy), 0), height - 1)
    nw = min(max(_round_half_up(w * sx), 1), width - nx)
    nh = min(max(_round_half_up(h * sy), 1), height - ny)
    return nx, ny, nw, nh


def resize_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize (antialiased when shrinking) of an HxWx3 array."""
    if image.shape[:2] == (height, width):
        return image.copy()
    t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None].float()
    shrink = height < image.shape[0] or width < image.shape[1]
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False, antialias=shrink)
    return out[0].permute(1, 2, 0).clamp(0, 1).numpy().astype(np.float32)


def resize_to_model_input(annotated: AnnotatedImage, size: int, factor: int = 8) -> AnnotatedImage:
    """Resize to ``size x size`` and rescale boxes proportionally."""
    if size % factor:
        raise DataError(f"model input size {size} not divisible by {factor}")
    h, w = annotated.size
    pixels = resize_image(annotated.image, size, size)
    boxes = [OcrBox(b.text, scale_box(b.bbox, size / w, size / h, size, size)) for b in annotated.boxes]
    return AnnotatedImage(pixels, boxes)


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

def rasterize_word(text: str, font: ImageFont.FreeTypeFont) -> np.ndarray:
    """Coverage map (uint8) of ``text`` cropped tightly to its ink."""
    left, top, right, bottom = font.getbbox(text)
    pad = 4
    canvas = Image.new("L", (right - left + 2 * pad, bottom - top + 2 * pad), 0)
    ImageDraw.Draw(canvas).text((pad - left, pad - top), text, fill=255, font=font)
    ink = canvas.getbbox()
    if ink is None:
        raise DataError(f"no renderable ink for {text!r}")
    return np.asarray(canvas.crop(ink), dtype=np.uint8)


def _contrasting_color(rng: np.random.Generator, bg: np.ndarray, min_contrast: float) -> np.ndarray:
    weights = np.array([0.299, 0.587, 0.114])
    bg_lum = float(weights @ bg)
    for _ in range(100):
        fg = rng.integers(0, 256, size=3)
        if abs(float(weights @ fg) - bg_lum) >= min_contrast:
            return fg
    return np.zeros(3, dtype=np.int64) if bg_lum > 127 else np.full(3, 255)


def _boxes_touch(a: Sequence[int], b: Sequence[int], margin: int) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return not (
        ax + aw + margin <= bx or bx + bw + margin <= ax or ay + ah + margin <= by or by + bh + margin <= ay
    )


@dataclass
class SyntheticConfig:
    size: int = 64
    min_font_size: int = 16
    max_font_size: int = 24
    max_words: int = 3
    min_contrast: float = 90.0
    placement_tries: int = 60


def render_synthetic_image(
    rng: np.random.Generator,
    vocabulary: Sequence[str],
    fonts: Sequence[str | Path],
    config: SyntheticConfig,
) -> tuple[AnnotatedImage, list[dict]]:
    """Draw 1..max_words non-touching words on a flat background.

    Returns the annotated image and per-box extras (font file name and size).
    """
    s = config.size
    bg = rng.integers(0, 256, size=3)
    canvas = np.broadcast_to(bg.astype(np.float64), (s, s, 3)).copy()
    n_words = int(rng.integers(1, config.max_words + 1))
    boxes: list[OcrBox] = []
    extras: list[dict] = []
    for _ in range(n_words):
        text = vocabulary[int(rng.integers(len(vocabulary)))]
        font_path = Path(fonts[int(rng.integers(len(fonts)))])
        size = int(rng.integers(config.min_font_size, config.max_font_size + 1))
        fg = _contrasting_color(rng, bg, config.min_contrast)
        while True:
            try:
                font = ImageFont.truetype(str(font_path), size)
            except OSError as exc:
                raise DataError(f"could not load font {font_path}: {exc}") from exc
            cov = rasterize_word(text, font)
            h, w = cov.shape
            if w <= s - 2 and h <= s - 2:
                break
            if size <= config.min_font_size:
                raise CanvasTooSmallError(f"canvas too small for requested word {text!r} at {s}px")
            size -= 1
        placed = None
        for _ in range(config.placement_tries):
            x = int(rng.integers(1, s - w))
            y = int(rng.integers(1, s - h))
            if not any(_boxes_touch((x, y, w, h), b.bbox, 2) for b in boxes):
                placed = (x, y)
                break
        if placed is None:
            continue
        x, y = placed
        a = cov.astype(np.float64)[..., None] / 255.0
        canvas[y:y + h, x:x + w] = canvas[y:y + h, x:x + w] * (1.0 - a) + fg * a
        boxes.append(OcrBox(text, (x, y, w, h)))
        extras.append({"font": font_path.name, "size": size})
    pixels = np.floor(canvas + 0.5).astype(np.uint8).astype(np.float32) / 255.0
    return AnnotatedImage(pixels, boxes), extras


def generate_synthetic_dataset(
    out_dir: str | Path,
    n_images: int,
    vocabulary: Sequence[str] = DEFAULT_VOCABULARY,
    fonts: Sequence[str | Path] = SYNTHETIC_FONTS,
    size: int = 64,
    seed: int = 0,
    split: str = "train",
    config: SyntheticConfig | None = None,
) -> DatasetManifest:
    """Write ``n_images`` synthetic annotated images plus a manifest to ``out_dir``.

    Each image draws from its own ``np.random.default_rng([seed, index])`` stream,
    so the output is identical for a fixed seed regardless of generation order.
    """
    if not vocabulary:
        raise DataError("vocabulary is empty")
    if not fonts:
        raise DataError("at least one font is required")
    config = config or SyntheticConfig(size=size)
    config.size = size
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_images):
        rng = np.random.default_rng([seed, i])
        annotated, extras = render_synthetic_image(rng, vocabulary, fonts, config)
        img_rel, ann_rel = f"images/{i:06d}.png", f"images/{i:06d}.json"
        save_annotated_image(annotated, out / img_rel, out / ann_rel, extras)
        entries.append((img_rel, ann_rel))
    manifest = DatasetManifest(
        entries,
        split=split,
        seed=seed,
        root=out,
        meta={"size": size, "vocabulary": list(vocabulary), "fonts": [Path(f).name for f in fonts]},
    )
    manifest.save()
    return manifest
