"""Built-in letter-glyph targets for benchmarks and demos.

Glyphs are stroke lists in unit image coordinates (x right, y down) rendered
through the package's own rasterizer, so target generation needs no fonts.
"""

from __future__ import annotations

import numpy as np

from .objectives import TargetImage
from .rasterizer import Canvas, render

# ((x0, y0), (x1, y1)) per stroke, unit image coords, y down
GLYPH_STROKES = {
    "X": [((0.25, 0.25), (0.75, 0.75)),
          ((0.75, 0.25), (0.25, 0.75))],
    "Y": [((0.25, 0.22), (0.50, 0.50)),
          ((0.75, 0.22), (0.50, 0.50)),
          ((0.50, 0.50), (0.50, 0.78))],
    "Z": [((0.27, 0.25), (0.73, 0.25)),
          ((0.73, 0.25), (0.27, 0.75)),
          ((0.27, 0.75), (0.73, 0.75))],
    "O": [((0.50, 0.25), (0.72, 0.40)), ((0.72, 0.40), (0.72, 0.62)),
          ((0.72, 0.62), (0.50, 0.76)), ((0.50, 0.76), (0.28, 0.62)),
          ((0.28, 0.62), (0.28, 0.40)), ((0.28, 0.40), (0.50, 0.25))],
    "L": [((0.30, 0.22), (0.30, 0.76)),
          ((0.30, 0.76), (0.72, 0.76))],
    "T": [((0.25, 0.25), (0.75, 0.25)),
          ((0.50, 0.25), (0.50, 0.77))],
}


def letter_strokes(letter: str):
    if letter not in GLYPH_STROKES:
        raise KeyError(f"no glyph for {letter!r}; have {sorted(GLYPH_STROKES)}")
    return GLYPH_STROKES[letter]


def _line_segment(a, b):
    """A straight cubic: interior control points at thirds of the chord."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.stack([a, a + (b - a) / 3.0, a + 2.0 * (b - a) / 3.0, b])


def letter_target(letter: str, width: int = 256, height: int = 256,
                  stroke_width: float = 5.0, view: str = "") -> TargetImage:
    """Render a glyph as a grayscale target image."""
    scale = np.array([width, height], dtype=np.float64)
    wires = [
        _line_segment(np.asarray(a) * scale, np.asarray(b) * scale)[None]
        for a, b in letter_strokes(letter)
    ]
    canvas = Canvas(width, height, stroke_width=stroke_width)
    img = render(wires, canvas, view=view)
    return TargetImage(img.pixels, view=view)
