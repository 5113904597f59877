"""Desk-scale synthetic font corpus with planted local-shape features.

Each synthetic tag is causally tied to a renderable feature (rounded
terminals, serif stubs, stroke-width class, ...) so attribution methods can
be tested against known ground truth. Regeneration is byte-identical per
seed: every font draws from its own spawned RNG stream.
"""

from __future__ import annotations

import numpy as np

from .dataset import LETTERS, FontRecord, GlyphImage

CANVAS = 128
MARGIN = 8
BASE_WIDTH = 7.0

# Catalog order fixes which tags exist for a given n_tags. Grouped tags
# (terminal style, weight) are mutually exclusive within their group.
TAG_CATALOG = (
    "round-plant",   # discs at stroke terminals
    "bold",          # wide strokes
    "serif-plant",   # perpendicular stubs at terminals
    "oblique",       # sheared skeleton
    "dotty",         # detached dots above the glyph
    "notch",         # stencil-like gaps cut into stems
    "spur",          # short diagonal ticks on stems
    "ring",          # small hollow ring near the glyph top
    "wavy",          # zig-zag crossbars
    "thin",          # narrow strokes
    "flare",         # widened terminal wedges
    "slash",         # diagonal slash through the counter
)

TAG_DESCRIPTIONS = {
    "round-plant": "filled disc planted at each open stroke terminal",
    "bold": "stroke width increased to bold weight",
    "serif-plant": "short perpendicular serif stub at each open stroke terminal",
    "oblique": "whole skeleton sheared to the right",
    "dotty": "two detached dots rendered above the glyph body",
    "notch": "gap erased from the middle of each stem",
    "spur": "short diagonal tick attached to each stem midpoint",
    "ring": "small hollow ring rendered near the top of the glyph",
    "wavy": "crossbars replaced by a two-segment zig-zag",
    "thin": "stroke width reduced to hairline weight",
    "flare": "terminal segments widened into a flare",
    "slash": "diagonal slash stroke across the counter",
}

_TERMINAL_GROUP = ("round-plant", "serif-plant", "flare")
_WEIGHT_GROUP = ("bold", "thin")


# ---- geometry primitives (pixel coordinates, y down) ----

def _grid():
    ys, xs = np.mgrid[0:CANVAS, 0:CANVAS]
    return xs + 0.5, ys + 0.5


def _segment_coverage(xs, ys, a, b, width):
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    den = dx * dx + dy * dy
    if den < 1e-12:
        d = np.hypot(xs - ax, ys - ay)
    else:
        t = np.clip(((xs - ax) * dx + (ys - ay) * dy) / den, 0.0, 1.0)
        d = np.hypot(xs - (ax + t * dx), ys - (ay + t * dy))
    return np.clip(width / 2.0 + 0.5 - d, 0.0, 1.0)


def _disc_coverage(xs, ys, center, radius):
    d = np.hypot(xs - center[0], ys - center[1])
    return np.clip(radius + 0.5 - d, 0.0, 1.0)


def _arc_coverage(xs, ys, center, radius, a0, a1, width):
    """Ring band restricted to angles swept counterclockwise from a0 to a1
    (radians, screen coordinates with y down)."""
    rel_x, rel_y = xs - center[0], ys - center[1]
    d = np.abs(np.hypot(rel_x, rel_y) - radius)
    ang = np.arctan2(rel_y, rel_x)
    sweep = (a1 - a0) % (2 * np.pi)
    if sweep == 0.0:
        inside = np.ones_like(ang, dtype=bool)
    else:
        inside = ((ang - a0) % (2 * np.pi)) <= sweep
    return np.where(inside, np.clip(width / 2.0 + 0.5 - d, 0.0, 1.0), 0.0)


class _Canvas:
    def __init__(self):
        self.xs, self.ys = _grid()
        self.ink = np.zeros((CANVAS, CANVAS))

    def segment(self, a, b, width):
        self.ink = np.maximum(self.ink, _segment_coverage(self.xs, self.ys, a, b, width))

    def disc(self, center, radius):
        self.ink = np.maximum(self.ink, _disc_coverage(self.xs, self.ys, center, radius))

    def arc(self, center, radius, a0, a1, width):
        self.ink = np.maximum(
            self.ink, _arc_coverage(self.xs, self.ys, center, radius, a0, a1, width))

    def erase_disc(self, center, radius):
        self.ink = self.ink * (1.0 - _disc_coverage(self.xs, self.ys, center, radius))


# ---- letter skeletons (unit coordinates, y down) ----

def _letter_skeleton(letter):
    """Returns dict with: segments, arcs, terminals [(point, outward dir)],
    crossbars [(a, b)], stem_mids [point], top anchor, counter anchor,
    notch anchors."""
    if letter == "H":
        return {
            "segments": [((0.15, 0.05), (0.15, 0.95)), ((0.85, 0.05), (0.85, 0.95))],
            "arcs": [],
            "crossbars": [((0.15, 0.5), (0.85, 0.5))],
            "terminals": [((0.15, 0.05), (0, -1)), ((0.15, 0.95), (0, 1)),
                          ((0.85, 0.05), (0, -1)), ((0.85, 0.95), (0, 1))],
            "stem_mids": [(0.15, 0.72), (0.85, 0.28)],
            "top": (0.5, 0.05),
            "counter": (0.5, 0.28),
            "notches": [(0.15, 0.72), (0.85, 0.28)],
        }
    if letter == "E":
        return {
            "segments": [((0.2, 0.05), (0.2, 0.95)),
                         ((0.2, 0.05), (0.8, 0.05)),
                         ((0.2, 0.95), (0.8, 0.95))],
            "arcs": [],
            "crossbars": [((0.2, 0.5), (0.7, 0.5))],
            "terminals": [((0.8, 0.05), (1, 0)), ((0.7, 0.5), (1, 0)),
                          ((0.8, 0.95), (1, 0))],
            "stem_mids": [(0.2, 0.72)],
            "top": (0.5, 0.05),
            "counter": (0.55, 0.28),
            "notches": [(0.2, 0.72)],
        }
    if letter == "R":
        return {
            "segments": [((0.2, 0.05), (0.2, 0.95)),
                         ((0.2, 0.05), (0.6, 0.05)),
                         ((0.45, 0.5), (0.8, 0.95))],
            "arcs": [((0.6, 0.275), 0.225, -np.pi / 2, np.pi / 2)],
            "crossbars": [((0.2, 0.5), (0.6, 0.5))],
            "terminals": [((0.2, 0.95), (0, 1)), ((0.8, 0.95), (0.6, 0.8))],
            "stem_mids": [(0.2, 0.72)],
            "top": (0.4, 0.05),
            "counter": (0.45, 0.28),
            "notches": [(0.2, 0.72)],
        }
    if letter == "O":
        return {
            "segments": [],
            "arcs": [((0.5, 0.5), 0.38, 0.0, 0.0)],  # full ring
            "crossbars": [],
            "terminals": [],
            "stem_mids": [],
            "top": (0.5, 0.12),
            "counter": (0.5, 0.5),
            "notches": [(0.12, 0.5), (0.88, 0.5)],
        }
    if letter == "N":
        return {
            "segments": [((0.15, 0.05), (0.15, 0.95)), ((0.85, 0.05), (0.85, 0.95)),
                         ((0.15, 0.05), (0.85, 0.95))],
            "arcs": [],
            "crossbars": [],
            "terminals": [((0.15, 0.95), (0, 1)), ((0.85, 0.05), (0, -1))],
            "stem_mids": [(0.15, 0.6), (0.85, 0.4)],
            "top": (0.5, 0.05),
            "counter": (0.62, 0.25),
            "notches": [(0.15, 0.6), (0.85, 0.4)],
        }
    if letter == "S":
        return {
            "segments": [],
            "arcs": [((0.5, 0.28), 0.22, np.pi * 0.5, np.pi * 1.9),
                     ((0.5, 0.72), 0.22, np.pi * 1.5, np.pi * 0.9)],
            "crossbars": [],
            "terminals": [((0.5 + 0.22 * np.cos(np.pi * 1.9),
                            0.28 + 0.22 * np.sin(np.pi * 1.9)), (0.31, 0.95)),
                          ((0.5 + 0.22 * np.cos(np.pi * 0.9),
                            0.72 + 0.22 * np.sin(np.pi * 0.9)), (-0.31, -0.95))],
            "stem_mids": [],
            "top": (0.5, 0.06),
            "counter": (0.5, 0.28),
            "notches": [(0.5, 0.06), (0.5, 0.94)],
        }
    raise ValueError(f"unknown letter {letter!r}")


def _to_pixels(p, shear, scale, offset):
    x, y = p
    if shear:
        x = x + 0.22 * (1.0 - y) - 0.11
    span = CANVAS - 2 * MARGIN
    cx = MARGIN + (0.5 + (x - 0.5) * scale) * span + offset[0]
    cy = MARGIN + (0.5 + (y - 0.5) * scale) * span + offset[1]
    return (cx, cy)


def _bbox(points, pad):
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    return [max(0.0, min(xs) - pad), max(0.0, min(ys) - pad),
            min(float(CANVAS), max(xs) + pad), min(float(CANVAS), max(ys) + pad)]


def render_glyph(letter, features, rng):
    """Rasterize one glyph with the given feature set.

    Returns (GlyphImage, feature_boxes) where feature_boxes maps each tag
    that left a localized mark to a list of pixel bounding boxes.
    """
    skel = _letter_skeleton(letter)
    shear = "oblique" in features
    if "bold" in features:
        width = BASE_WIDTH + 5.0
    elif "thin" in features:
        width = BASE_WIDTH - 3.0
    else:
        width = BASE_WIDTH
    width = width + rng.uniform(-0.6, 0.6)
    scale = rng.uniform(0.92, 1.0)
    offset = (rng.uniform(-2.5, 2.5), rng.uniform(-2.5, 2.5))

    def px(p):
        return _to_pixels(p, shear, scale, offset)

    canvas = _Canvas()
    boxes = {}

    def add_box(tag, points, pad):
        boxes.setdefault(tag, []).append(_bbox(points, pad))

    for a, b in skel["segments"]:
        canvas.segment(px(a), px(b), width)
    for center, radius, a0, a1 in skel["arcs"]:
        c = px(center)
        r = radius * scale * (CANVAS - 2 * MARGIN)
        canvas.arc(c, r, a0, a1, width)

    wavy = "wavy" in features
    for a, b in skel["crossbars"]:
        pa, pb = px(a), px(b)
        if wavy:
            mid = ((pa[0] + pb[0]) / 2.0, (pa[1] + pb[1]) / 2.0 - 7.0)
            canvas.segment(pa, mid, width)
            canvas.segment(mid, pb, width)
            add_box("wavy", [pa, mid, pb], width)
        else:
            canvas.segment(pa, pb, width)

    for point, direction in skel["terminals"]:
        p = px(point)
        if "round-plant" in features:
            r = width * 0.9 + 2.5
            canvas.disc(p, r)
            add_box("round-plant", [p], r + 2.0)
        elif "serif-plant" in features:
            dx, dy = direction
            # stub runs perpendicular to the outward direction
            n = np.hypot(dx, dy)
            if n == 0:
                perp = (1.0, 0.0)
            else:
                perp = (-dy / n, dx / n)
            half = 7.5
            a = (p[0] - perp[0] * half, p[1] - perp[1] * half)
            b = (p[0] + perp[0] * half, p[1] + perp[1] * half)
            canvas.segment(a, b, width * 0.8)
            add_box("serif-plant", [a, b], width)
        elif "flare" in features:
            dx, dy = direction
            n = np.hypot(dx, dy) or 1.0
            inward = (-dx / n, -dy / n)
            b = (p[0] + inward[0] * 9.0, p[1] + inward[1] * 9.0)
            canvas.segment(p, b, width * 1.9)
            add_box("flare", [p, b], width * 1.2)

    if "spur" in features:
        for point in skel["stem_mids"]:
            p = px(point)
            b = (p[0] - 8.0, p[1] - 8.0)
            canvas.segment(p, b, width * 0.7)
            add_box("spur", [p, b], width)

    if "slash" in features:
        c = px(skel["counter"])
        a = (c[0] - 9.0, c[1] + 9.0)
        b = (c[0] + 9.0, c[1] - 9.0)
        canvas.segment(a, b, width * 0.7)
        add_box("slash", [a, b], width)

    if "ring" in features:
        c = px(skel["top"])
        c = (c[0], max(6.0, c[1] - 9.0))
        canvas.arc(c, 5.0, 0.0, 0.0, 2.5)
        add_box("ring", [c], 9.0)

    if "dotty" in features:
        c = px(skel["top"])
        y = max(5.0, c[1] - 10.0)
        for dx in (-8.0, 8.0):
            canvas.disc((c[0] + dx, y), 3.2)
        add_box("dotty", [(c[0] - 8.0, y), (c[0] + 8.0, y)], 7.0)

    if "notch" in features:
        for point in skel["notches"]:
            p = px(point)
            canvas.erase_disc(p, width * 0.75)
            add_box("notch", [p], width * 1.5)

    if "bold" in features or "thin" in features:
        tag = "bold" if "bold" in features else "thin"
        boxes[tag] = [[0.0, 0.0, float(CANVAS), float(CANVAS)]]
    if shear:
        boxes["oblique"] = [[0.0, 0.0, float(CANVAS), float(CANVAS)]]

    return GlyphImage(np.clip(canvas.ink, 0.0, 1.0)), boxes


def _sample_tags(available, rng):
    """Draw a feature/tag set of size 2..6 (clamped to what's available)."""
    terminal = [t for t in _TERMINAL_GROUP if t in available]
    weight = [t for t in _WEIGHT_GROUP if t in available]
    binaries = [t for t in available if t not in _TERMINAL_GROUP and t not in _WEIGHT_GROUP]
    # group contributions cap the reachable count
    max_reach = (1 if terminal else 0) + (1 if weight else 0) + len(binaries)
    lo = min(2, max_reach)
    hi = min(6, max_reach)
    for _ in range(200):
        tags = set()
        if terminal and rng.random() < 0.75:
            tags.add(terminal[rng.integers(len(terminal))])
        if weight and rng.random() < 0.6:
            tags.add(weight[rng.integers(len(weight))])
        for t in binaries:
            if rng.random() < 0.3:
                tags.add(t)
        if lo <= len(tags) <= hi:
            return tags
    # deterministic fallback: take the first `lo` available tags
    return set(list(available)[:lo])


def synth_corpus(n_fonts, n_tags, seed):
    """Generate `n_fonts` records using the first `n_tags` catalog features.

    Returns (records, plant_map); plant_map[tag] holds the feature
    description and per-font/per-letter pixel bounding boxes.
    """
    if n_fonts < 4:
        raise ValueError(f"n_fonts must be >= 4, got {n_fonts}")
    if not 2 <= n_tags <= len(TAG_CATALOG):
        raise ValueError(f"n_tags must lie in [2, {len(TAG_CATALOG)}], got {n_tags}")
    available = TAG_CATALOG[:n_tags]
    plant_map = {
        t: {"feature": TAG_DESCRIPTIONS[t], "regions": {}} for t in available
    }
    records = []
    streams = np.random.SeedSequence(seed).spawn(n_fonts)
    for i, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        font_id = f"synth-{i:04d}"
        tags = _sample_tags(available, rng)
        glyphs = {}
        regions = {t: {} for t in tags}
        for letter in LETTERS:
            glyph, boxes = render_glyph(letter, tags, rng)
            glyphs[letter] = glyph
            for tag, bs in boxes.items():
                regions[tag][letter] = bs
        for tag in tags:
            plant_map[tag]["regions"][font_id] = regions[tag]
        records.append(FontRecord(font_id=font_id, glyphs=glyphs, tags=tags))
    return records, plant_map
