"""Bundled font files."""

from pathlib import Path

FONT_DIR = Path(__file__).resolve().parent

#: Font used for every glyph condition image and recognizer template.
UNIFORM_FONT = FONT_DIR / "DejaVuSans.ttf"

#: Fonts used to draw words into synthetic scene images. The uniform font is
#: deliberately absent so that glyph renders never coincide with the source.
SYNTHETIC_FONTS = (
    FONT_DIR / "DejaVuSans-Bold.ttf",
    FONT_DIR / "DejaVuSerif.ttf",
    FONT_DIR / "DejaVuSansMono.ttf",
    FONT_DIR / "DejaVuSerif-Italic.ttf",
    FONT_DIR / "DejaVuSans-Oblique.ttf",
)
