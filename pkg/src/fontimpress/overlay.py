"""SVG overlays: glyph rasters with importance-scaled keypoint circles."""

from __future__ import annotations

import base64
import io

import numpy as np
from PIL import Image

# distinct fill colors, keyed by cluster id modulo the palette size
PALETTE = ["#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4",
           "#46f0f0", "#f032e6", "#bcf60c", "#fabebe", "#008080"]


def _glyph_png_base64(glyph):
    gray = np.clip((1.0 - glyph.pixels) * 255.0, 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(gray, mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def glyph_svg(glyph, circles):
    """SVG text: the glyph raster plus one circle per (x, y, r, opacity,
    color) tuple."""
    w, h = glyph.width, glyph.height
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}">',
        f'<image href="data:image/png;base64,{_glyph_png_base64(glyph)}" '
        f'width="{w}" height="{h}"/>',
    ]
    for x, y, r, opacity, color in circles:
        parts.append(
            f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r:.2f}" '
            f'fill="{color}" fill-opacity="{opacity:.3f}"/>')
    parts.append("</svg>")
    return "\n".join(parts)


def _radius(scale):
    return 3.0 * max(float(scale), 0.5)


def ig_circles(keypoints, attributions, letter):
    """Opacity proportional to min-max-normalized attribution magnitude."""
    attributions = np.abs(np.asarray(attributions, dtype=np.float64))
    lo, hi = attributions.min(), attributions.max()
    span = hi - lo
    circles = []
    for kp, a in zip(keypoints, attributions):
        if kp.source_letter != letter:
            continue
        opacity = 1.0 if span == 0 else (a - lo) / span
        circles.append((kp.x, kp.y, _radius(kp.scale), opacity, PALETTE[0]))
    return circles


def occlusion_circles(keypoints, labels, important_clusters, letter):
    """Solid circles colored by cluster id, for the given important words."""
    circles = []
    for kp, q in zip(keypoints, labels):
        if kp.source_letter != letter or q not in important_clusters:
            continue
        circles.append((kp.x, kp.y, _radius(kp.scale), 0.6,
                        PALETTE[int(q) % len(PALETTE)]))
    return circles


def write_font_overlays(out_dir, record, circles_by_letter, prefix):
    """One SVG per glyph letter; returns the written paths."""
    paths = []
    for letter, glyph in record.glyphs.items():
        svg = glyph_svg(glyph, circles_by_letter.get(letter, []))
        path = f"{out_dir}/{prefix}_{record.font_id}_{letter}.svg"
        with open(path, "w") as f:
            f.write(svg)
        paths.append(path)
    return paths
