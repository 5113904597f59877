"""Font-impression corpus handling: records, tag vocabulary, splits,
translator target sequences, and the JSON/PNG interchange formats."""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import (
    BadManifest,
    EmptyCorpus,
    NoTagsSurvive,
    SequenceOverflow,
    TooFewFonts,
    UnknownTag,
)

LETTERS = ("H", "E", "R", "O", "N", "S")
MIN_GLYPH_SIDE = 32


@dataclass
class GlyphImage:
    """Grayscale raster, row-major intensities in [0,1]; 1 = ink."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        h, w = self.pixels.shape
        if w < MIN_GLYPH_SIDE or h < MIN_GLYPH_SIDE:
            raise ValueError(f"glyph raster {w}x{h} below minimum side {MIN_GLYPH_SIDE}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("glyph intensities must lie in [0,1]")

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]


@dataclass
class FontRecord:
    font_id: str
    glyphs: dict  # letter -> GlyphImage
    tags: set = field(default_factory=set)

    def __post_init__(self):
        missing = [c for c in LETTERS if c not in self.glyphs]
        if missing:
            raise ValueError(f"font {self.font_id} missing glyphs {missing}")


class TagVocab:
    """Tags ordered by descending training frequency; ids 0..K-1 plus
    BOS=K, EOS=K+1, PAD=K+2."""

    def __init__(self, entries):
        self.entries = [(str(t), int(c)) for t, c in entries]
        self.index = {t: i for i, (t, _) in enumerate(self.entries)}
        if len(self.index) != len(self.entries):
            raise ValueError("duplicate tag in vocabulary")
        for (_, a), (_, b) in zip(self.entries, self.entries[1:]):
            if a < b:
                raise ValueError("vocabulary not sorted by descending count")

    @property
    def K(self):
        return len(self.entries)

    @property
    def bos(self):
        return self.K

    @property
    def eos(self):
        return self.K + 1

    @property
    def pad(self):
        return self.K + 2

    def id_of(self, tag):
        if tag not in self.index:
            raise UnknownTag(f"tag {tag!r} not in vocabulary")
        return self.index[tag]

    def tag_of(self, tag_id):
        return self.entries[tag_id][0]

    def tags(self):
        return [t for t, _ in self.entries]

    def save(self, path):
        with open(path, "w") as f:
            json.dump([[t, c] for t, c in self.entries], f, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls(json.load(f))


@dataclass
class SplitAssignment:
    assignment: dict  # font_id -> "train" | "val" | "test"
    seed: int

    def members(self, partition):
        return sorted(f for f, p in self.assignment.items() if p == partition)

    def save(self, path):
        with open(path, "w") as f:
            json.dump({"seed": self.seed, "assignment": self.assignment}, f, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            doc = json.load(f)
        return cls(assignment=doc["assignment"], seed=doc["seed"])


def build_vocab(records, min_count):
    """Keep tags occurring at least `min_count` times, ordered by descending
    count with lexicographic tie-break."""
    records = list(records)
    if not records:
        raise EmptyCorpus("no font records given")
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter()
    for rec in records:
        counts.update(rec.tags)
    kept = [(t, c) for t, c in counts.items() if c >= min_count]
    if not kept:
        raise NoTagsSurvive(f"no tag reaches {min_count} occurrences")
    kept.sort(key=lambda tc: (-tc[1], tc[0]))
    return TagVocab(kept)


def split_fonts(records, ratios, seed):
    """Deterministic font-disjoint train/val/test split. Val and test sizes
    are floored; the remainder goes to train."""
    records = list(records)
    r_train, r_val, r_test = ratios
    if min(ratios) <= 0:
        raise ValueError("all split ratios must be positive")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    if len(records) < 3:
        raise TooFewFonts(f"need at least 3 fonts, got {len(records)}")
    ids = sorted(rec.font_id for rec in records)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate font_id in corpus")
    m = len(ids)
    n_val = int(np.floor(r_val * m))
    n_test = int(np.floor(r_test * m))
    n_train = m - n_val - n_test
    order = np.random.default_rng(seed).permutation(m)
    assignment = {}
    for pos, idx in enumerate(order):
        if pos < n_train:
            part = "train"
        elif pos < n_train + n_val:
            part = "val"
        else:
            part = "test"
        assignment[ids[idx]] = part
    return SplitAssignment(assignment=assignment, seed=int(seed))


def target_sequence(record, vocab, max_len):
    """Tag ids in descending popularity order (ascending id), then EOS,
    padded with PAD to `max_len`."""
    ids = sorted(vocab.id_of(t) for t in record.tags)
    if len(ids) + 1 > max_len:
        raise SequenceOverflow(
            f"font {record.font_id}: {len(ids)} tags + EOS exceed max_len={max_len}")
    seq = ids + [vocab.eos] + [vocab.pad] * (max_len - len(ids) - 1)
    return seq


def labels_vector(record, vocab):
    """K-dim binary ground-truth vector for the multi-label classifier."""
    y = np.zeros(vocab.K)
    for t in record.tags:
        if t in vocab.index:
            y[vocab.index[t]] = 1.0
    return y


# ---- manifest / glyph interchange ----

def save_glyph_png(glyph, path):
    # ink = dark in the PNG convention
    gray = np.round((1.0 - glyph.pixels) * 255.0).astype(np.uint8)
    Image.fromarray(gray, mode="L").save(path)


def load_glyph_png(path):
    gray = np.asarray(Image.open(path).convert("L"), dtype=np.float64)
    return GlyphImage(1.0 - gray / 255.0)


def save_manifest(records, out_dir, manifest_name="manifest.json"):
    """Write glyph PNGs plus the corpus manifest under `out_dir`."""
    glyph_dir = os.path.join(out_dir, "glyphs")
    os.makedirs(glyph_dir, exist_ok=True)
    doc = {"fonts": []}
    for rec in records:
        paths = {}
        for letter in LETTERS:
            rel = os.path.join("glyphs", f"{rec.font_id}_{letter}.png")
            save_glyph_png(rec.glyphs[letter], os.path.join(out_dir, rel))
            paths[letter] = rel
        doc["fonts"].append(
            {"id": rec.font_id, "glyphs": paths, "tags": sorted(rec.tags)})
    path = os.path.join(out_dir, manifest_name)
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
    return path


def load_manifest(path):
    base = os.path.dirname(os.path.abspath(path))
    try:
        with open(path) as f:
            doc = json.load(f)
        fonts = doc["fonts"]
    except (OSError, ValueError, KeyError) as exc:
        raise BadManifest(f"cannot read manifest {path}: {exc}") from exc
    records = []
    seen = set()
    for entry in fonts:
        try:
            font_id = entry["id"]
            glyphs = {
                letter: load_glyph_png(os.path.join(base, entry["glyphs"][letter]))
                for letter in LETTERS
            }
            tags = set(entry.get("tags", []))
        except (KeyError, OSError, ValueError) as exc:
            raise BadManifest(f"bad font entry in {path}: {exc}") from exc
        if font_id in seen:
            raise BadManifest(f"duplicate font id {font_id!r}")
        seen.add(font_id)
        records.append(FontRecord(font_id=font_id, glyphs=glyphs, tags=tags))
    if not records:
        raise BadManifest(f"manifest {path} lists no fonts")
    return records
