"""Instruction-driven editing, a template-matching word recognizer and OCR-accuracy evaluation."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
import torch

from .data import AnnotatedImage, OcrBox, resize_image
from .diffusion import NoiseSchedule, UNet, ddim_sample, downsample_mask
from .glyph import apply_mask, ink_crop, make_mask, paste_glyph, render_glyph, select_box_index
from .glyph_encoder import GlyphEncoder
from .vae import VAE, images_to_tensor, tensor_to_images


# ---------------------------------------------------------------------------
# instruction parsing
# ---------------------------------------------------------------------------

class InstructionError(ValueError):
    pass


class GrammarError(InstructionError):
    pass


class NoMatchError(InstructionError):
    pass


class AmbiguousMatchError(InstructionError):
    def __init__(self, message: str, candidates: Sequence[OcrBox]):
        super().__init__(message)
        self.candidates = list(candidates)


@dataclass(frozen=True)
class Replace:
    source_text: str
    target_text: str


@dataclass(frozen=True)
class SetRegion:
    region_index: int
    target_text: str


@dataclass(frozen=True)
class EditInstruction:
    raw: str
    parsed: Replace | SetRegion


@dataclass(frozen=True)
class EditRequest:
    target_text: str
    bbox: tuple[int, int, int, int]


_REPLACE = re.compile(r'^\s*replace\s+"([^"]+)"\s+with\s+"([^"]*)"\s*$', re.IGNORECASE)
_SET_REGION = re.compile(r'^\s*set\s+region\s+(\d+)\s+to\s+"([^"]*)"\s*$', re.IGNORECASE)


def parse_grammar(instruction: str) -> EditInstruction:
    """Match ``replace "<src>" with "<tgt>"`` or ``set region <i> to "<tgt>"``."""
    if m := _REPLACE.match(instruction):
        parsed = Replace(m.group(1), m.group(2))
    elif m := _SET_REGION.match(instruction):
        parsed = SetRegion(int(m.group(1)), m.group(2))
    else:
        raise GrammarError(f"instruction does not match the edit grammar: {instruction!r}")
    if not parsed.target_text.strip():
        raise GrammarError("target text is empty")
    return EditInstruction(instruction, parsed)


def parse_instruction(instruction: str, ocr_results: Sequence[OcrBox]) -> EditRequest:
    """Resolve an instruction against OCR results into a target text and box.

    Raises:
        GrammarError: the instruction matches neither rule.
        NoMatchError: no box contains the source text, or the region index is
            out of range.
        AmbiguousMatchError: several boxes contain the source text; the error
            lists them and no box is chosen.
    """
    parsed = parse_grammar(instruction).parsed
    if isinstance(parsed, SetRegion):
        if not 0 <= parsed.region_index < len(ocr_results):
            raise NoMatchError(f"region {parsed.region_index} out of range (have {len(ocr_results)})")
        box = ocr_results[parsed.region_index]
        return EditRequest(parsed.target_text, box.bbox)
    hits = [b for b in ocr_results if parsed.source_text in b.text]
    if not hits:
        raise NoMatchError(f"no OCR region contains {parsed.source_text!r}")
    if len(hits) > 1:
        listing = ", ".join(f"{b.text!r} at {list(b.bbox)}" for b in hits)
        raise AmbiguousMatchError(f"{parsed.source_text!r} matches several regions: {listing}", hits)
    box = hits[0]
    return EditRequest(box.text.replace(parsed.source_text, parsed.target_text), box.bbox)


# ---------------------------------------------------------------------------
# editing
# ---------------------------------------------------------------------------

@dataclass
class Components:
    vae: VAE
    glyph_encoder: GlyphEncoder
    unet: UNet
    schedule: NoiseSchedule


@torch.no_grad()
def edit_images(
    images: Sequence[np.ndarray],
    requests: Sequence[EditRequest],
    components: Components,
    n_steps: int | None = None,
    seeds: Sequence[int] | int = 0,
    composite: bool = True,
) -> list[np.ndarray]:
    """Batched edit: mask, encode, sample with DDIM, decode and optionally composite.

    With ``composite`` the output equals the source outside the edit box.
    """
    vae, enc, unet, schedule = components.vae, components.glyph_encoder, components.unet, components.schedule
    vae.eval(), enc.eval(), unet.eval()
    n_steps = n_steps or schedule.T
    if isinstance(seeds, int):
        seeds = [seeds + k for k in range(len(images))]
    masks = [make_mask(r.bbox, im.shape[:2]) for im, r in zip(images, requests)]
    masked = images_to_tensor([apply_mask(im, m) for im, m in zip(images, masks)])
    mask_t = images_to_tensor(masks)
    x_m = vae.encode(masked)
    m_lat = downsample_mask(mask_t, vae.config.downsample)
    e_g = enc(images_to_tensor([render_glyph(r.target_text, enc.config.canvas).pixels for r in requests]))
    z0 = ddim_sample(unet, x_m, m_lat, e_g, schedule, n_steps, seed=list(seeds))
    decoded = tensor_to_images(vae.decode(z0))
    out = []
    for src, dec, m in zip(images, decoded, masks):
        out.append(src * (1.0 - m) + dec * m if composite else dec)
    return [o.astype(np.float32) for o in out]


def edit_image(
    image: np.ndarray,
    request: EditRequest,
    components: Components,
    n_steps: int | None = None,
    seed: int = 0,
    composite: bool = True,
) -> np.ndarray:
    return edit_images([image], [request], components, n_steps, [seed], composite)[0]


# ---------------------------------------------------------------------------
# recognition
# ---------------------------------------------------------------------------

TEMPLATE_SHAPE = (16, 48)
LOW_CONFIDENCE = 0.3


@dataclass
class Recognition:
    text: str
    score: float
    low_confidence: bool
    scores: list[float] = field(default_factory=list)


def _normalise(gray: np.ndarray) -> np.ndarray:
    """Resize to the template grid, then zero-mean and unit norm."""
    resized = resize_image(np.repeat(gray[..., None], 3, axis=2).astype(np.float32), *TEMPLATE_SHAPE)[..., 0]
    v = resized.astype(np.float64) - resized.mean()
    if np.ptp(v) < 1e-3:
        return np.zeros_like(v)
    return v / np.linalg.norm(v)


@lru_cache(maxsize=16)
def _templates(vocabulary: tuple[str, ...]) -> np.ndarray:
    bank = [_normalise(1.0 - ink_crop(render_glyph(word).pixels).mean(axis=2)) for word in vocabulary]
    return np.stack(bank).reshape(len(vocabulary), -1)


def recognize_word(region: np.ndarray, vocabulary: Sequence[str]) -> Recognition:
    """Match a tight word crop against uniform-font renders of every vocabulary word.

    The score is the magnitude of the normalised cross-correlation between the
    crop's gray levels and each template, so dark-on-light and light-on-dark
    text read the same. Ties go to the lowest vocabulary index.
    """
    if not vocabulary:
        raise ValueError("vocabulary is empty")
    if region.size == 0 or region.shape[0] < 2 or region.shape[1] < 2:
        raise ValueError("empty region")
    probe = _normalise(region.astype(np.float64).mean(axis=2))
    scores = np.abs(_templates(tuple(vocabulary)) @ probe.reshape(-1))
    best = int(np.argmax(scores))
    score = float(scores[best])
    return Recognition(vocabulary[best], score, score <= LOW_CONFIDENCE, [float(s) for s in scores])


def template_recognizer(region: np.ndarray, vocabulary: Sequence[str]) -> str:
    return recognize_word(region, vocabulary).text


def crop_box(image: np.ndarray, bbox: Sequence[int]) -> np.ndarray:
    x, y, w, h = bbox
    return image[y:y + h, x:x + w]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

Editor = Callable[[Sequence[np.ndarray], Sequence[EditRequest], Sequence[int]], Sequence[np.ndarray]]


def diffusion_editor(components: Components, n_steps: int | None = None, composite: bool = True,
                     batch_size: int = 128) -> Editor:
    def run(images, requests, seeds):
        out = []
        for k in range(0, len(images), batch_size):
            out += edit_images(images[k:k + batch_size], requests[k:k + batch_size], components,
                               n_steps, list(seeds[k:k + batch_size]), composite)
        return out

    return run


def oracle_editor(images, requests, seeds):
    """Pastes the exact uniform-font render of the target into the box."""
    return [paste_glyph(im, render_glyph(r.target_text), r.bbox) for im, r in zip(images, requests)]


def identity_editor(images, requests, seeds):
    return [im.copy() for im in images]


@dataclass
class EvalReport:
    n_samples: int
    ocr_accuracy: float
    records: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def eval_plan(images: Sequence[AnnotatedImage], vocabulary: Sequence[str], seed: int):
    """Per-sample (box, target text, DDIM seed), a pure function of the inputs."""
    plan = []
    for i, annotated in enumerate(images):
        rng = np.random.default_rng([seed, i])
        box = annotated.boxes[select_box_index(len(annotated.boxes), rng)]
        choices = [w for w in vocabulary if w != box.text]
        target = choices[int(rng.integers(len(choices)))]
        plan.append((box, target, int(rng.integers(0, 2**31 - 1))))
    return plan


def evaluate(
    images: Sequence[AnnotatedImage],
    editor: Editor,
    vocabulary: Sequence[str],
    seed: int = 0,
) -> EvalReport:
    """Edit one random box per image to a different vocabulary word and score
    exact-match recognition of the edited region."""
    if not images:
        return EvalReport(0, 0.0, [])
    plan = eval_plan(images, vocabulary, seed)
    requests = [EditRequest(target, box.bbox) for box, target, _ in plan]
    edited = editor([a.image for a in images], requests, [s for _, _, s in plan])
    records, correct = [], 0
    for i, ((box, target, s), out) in enumerate(zip(plan, edited)):
        rec = recognize_word(crop_box(out, box.bbox), vocabulary)
        ok = rec.text == target
        correct += ok
        records.append({
            "index": i, "source_text": box.text, "target_text": target, "bbox": list(box.bbox),
            "recognized": rec.text, "score": rec.score, "low_confidence": rec.low_confidence, "correct": ok,
        })
    return EvalReport(len(images), 100.0 * correct / len(images), records)
