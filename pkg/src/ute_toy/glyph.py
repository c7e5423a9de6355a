"""Uniform-font glyph rendering, edit masks and self-supervised sample assembly."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from fontTools.ttLib import TTFont
from PIL import Image, ImageDraw, ImageFont

from .data import AnnotatedImage, DataError, OcrBox, resize_image
from .fonts import UNIFORM_FONT

GLYPH_CANVAS = (32, 128)
GLYPH_MARGIN = 2
MIN_POINT_SIZE = 6
BLANK_VALUE = 0.0


class GlyphError(ValueError):
    pass


@dataclass
class GlyphImage:
    pixels: np.ndarray
    text: str


@dataclass
class EditSample:
    source: np.ndarray
    masked: np.ndarray
    mask: np.ndarray
    glyph: GlyphImage
    target_text: str
    bbox: tuple[int, int, int, int]


@lru_cache(maxsize=8)
def _codepoints(font_path: str) -> frozenset[int]:
    with TTFont(font_path, lazy=True) as tt:
        return frozenset(tt.getBestCmap())


@lru_cache(maxsize=256)
def _font(font_path: str, size: int) -> ImageFont.FreeTypeFont:
    return ImageFont.truetype(font_path, size)


def glyph_layout(
    text: str,
    canvas: tuple[int, int] = GLYPH_CANVAS,
    font_path: str | Path = UNIFORM_FONT,
    margin: int = GLYPH_MARGIN,
) -> tuple[int, tuple[int, int]]:
    """Pick the font size and draw origin that center ``text`` on ``canvas``.

    The size is the largest integer point size whose ink box fits inside the
    canvas minus ``margin`` on every side.

    Returns:
        ``(point_size, (x, y))`` where ``(x, y)`` is the draw origin passed to
        ``ImageDraw.text``.
    """
    font_path = str(font_path)
    if not text or not text.strip():
        raise GlyphError("no renderable ink")
    missing = [c for c in text if not c.isspace() and ord(c) not in _codepoints(font_path)]
    if missing:
        raise GlyphError(f"text unrenderable in font: {''.join(missing)!r}")
    gh, gw = canvas
    avail_h, avail_w = gh - 2 * margin, gw - 2 * margin
    best = None
    lo, hi = MIN_POINT_SIZE, max(MIN_POINT_SIZE, 2 * gh)
    while lo <= hi:
        mid = (lo + hi) // 2
        left, top, right, bottom = _font(font_path, mid).getbbox(text)
        if right - left <= avail_w and bottom - top <= avail_h:
            best = (mid, (left, top, right, bottom))
            lo = mid + 1
        else:
            hi = mid - 1
    if best is None:
        raise GlyphError(f"canvas {gh}x{gw} too small for {text!r}")
    size, (left, top, right, bottom) = best
    x = (gw - (right - left)) // 2 - left
    y = (gh - (bottom - top)) // 2 - top
    return size, (x, y)


def render_glyph(
    text: str,
    canvas: tuple[int, int] = GLYPH_CANVAS,
    font_path: str | Path = UNIFORM_FONT,
) -> GlyphImage:
    """Render ``text`` in the uniform font: black ink on white, centered, fit to canvas."""
    size, origin = glyph_layout(text, canvas, font_path)
    im = Image.new("L", (canvas[1], canvas[0]), 255)
    ImageDraw.Draw(im).text(origin, text, fill=0, font=_font(str(font_path), size))
    gray = np.asarray(im, dtype=np.float32) / 255.0
    if gray.min() >= 1.0:
        raise GlyphError("no renderable ink")
    return GlyphImage(np.repeat(gray[..., None], 3, axis=2), text)


def ink_crop(pixels: np.ndarray) -> np.ndarray:
    """Crop a dark-on-light render to the bounding box of its ink."""
    ink = pixels.mean(axis=2) < 1.0
    ys, xs = np.nonzero(ink)
    if len(ys) == 0:
        raise GlyphError("no renderable ink")
    return pixels[ys.min():ys.max() + 1, xs.min():xs.max() + 1]


def make_mask(bbox: Sequence[int], image_size: tuple[int, int]) -> np.ndarray:
    """Binary ``(H, W, 1)`` mask that is 1 exactly inside ``bbox``."""
    height, width = image_size
    box = OcrBox("_", tuple(int(v) for v in bbox))
    box.check_inside(height, width)
    x, y, w, h = box.bbox
    mask = np.zeros((height, width, 1), dtype=np.float32)
    mask[y:y + h, x:x + w] = 1.0
    return mask


def apply_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return image * (1.0 - mask) + BLANK_VALUE * mask


def select_box_index(n_boxes: int, rng: np.random.Generator) -> int:
    """Uniform region choice: one integer draw reduced modulo the box count."""
    if n_boxes < 1:
        raise DataError("image has no OCR boxes")
    return int(rng.integers(0, 2**31 - 1)) % n_boxes


def build_training_sample(
    annotated: AnnotatedImage,
    rng: np.random.Generator,
    canvas: tuple[int, int] = GLYPH_CANVAS,
    box_index: int | None = None,
) -> EditSample:
    """Assemble one ``{(masked, glyph, mask), source}`` tuple.

    The glyph is always re-rendered in the uniform font rather than cropped
    from the source; otherwise the network could learn to copy the crop back.
    """
    if box_index is None:
        box_index = select_box_index(len(annotated.boxes), rng)
    box = annotated.boxes[box_index]
    mask = make_mask(box.bbox, annotated.size)
    source = annotated.image
    return EditSample(
        source=source,
        masked=apply_mask(source, mask).astype(np.float32),
        mask=mask,
        glyph=render_glyph(box.text, canvas),
        target_text=box.text,
        bbox=box.bbox,
    )


def paste_glyph(image: np.ndarray, glyph: GlyphImage, bbox: Sequence[int]) -> np.ndarray:
    """Stretch the glyph's ink box into ``bbox`` and overwrite those pixels."""
    x, y, w, h = bbox
    out = image.copy()
    out[y:y + h, x:x + w] = resize_image(ink_crop(glyph.pixels), h, w)
    return out
