"""Scale-space keypoint detection and 128-d gradient-histogram descriptors.

Classic difference-of-Gaussians pipeline: 4 octaves, 3 scales per octave,
sigma0 = 1.6, no initial upsampling (glyph rasters are noise-free),
contrast threshold 0.03, edge-ratio threshold 10. Descriptors are the
standard 4x4 spatial cells x 8 orientation bins with trilinear binning,
L2-normalized, clamped at 0.2, renormalized.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .dataset import LETTERS
from .errors import EmptyDescriptorSet, NormalizationDegenerate, WindowOutOfBounds

SIGMA0 = 1.6
INTERVALS = 3
OCTAVES = 4
CONTRAST_THRESH = 0.03
EDGE_RATIO = 10.0
ASSUMED_BLUR = 0.5
N_MAX = 300
DESC_DIM = 128
CACHE_MAGIC = b"FSD1"

_LETTER_CODE = {c: i for i, c in enumerate(LETTERS)}


@dataclass
class Keypoint:
    x: float
    y: float
    scale: float
    orientation: float
    source_letter: str = "?"


@dataclass
class Descriptor:
    values: np.ndarray
    keypoint: Keypoint


@dataclass
class DescriptorSet:
    """Fixed-slot descriptor matrix for one font: real rows first (mask
    True), zero-padded rows after."""

    values: np.ndarray            # (n_max, 128)
    mask: np.ndarray              # (n_max,) bool
    font_id: str
    keypoints: list = field(default_factory=list)  # one per real slot

    @property
    def n(self):
        return int(self.mask.sum())

    def real_values(self):
        return self.values[self.mask]


# ---- scale-space construction ----

UPSAMPLE = True  # initial 2x upsampling stabilizes sparse glyph detections


def _base_image(pixels):
    img = np.asarray(pixels, dtype=np.float64)
    blur = ASSUMED_BLUR
    if UPSAMPLE:
        # pixel-repeat upsampling commutes with 90-degree rotations
        img = np.repeat(np.repeat(img, 2, axis=0), 2, axis=1)
        blur = 2.0 * ASSUMED_BLUR
    extra = np.sqrt(max(SIGMA0 ** 2 - blur ** 2, 0.01))
    return ndimage.gaussian_filter(img, extra)


def _pyramid(pixels):
    """Gaussian pyramid: per octave, INTERVALS+3 images; octave-relative
    sigmas sigma0 * k^i."""
    k = 2.0 ** (1.0 / INTERVALS)
    per_octave = INTERVALS + 3
    increments = [0.0]
    for i in range(1, per_octave):
        prev = SIGMA0 * k ** (i - 1)
        increments.append(np.sqrt((k * prev) ** 2 - prev ** 2))
    gauss = []
    img = _base_image(pixels)
    for _ in range(OCTAVES):
        octave = [img]
        for inc in increments[1:]:
            octave.append(ndimage.gaussian_filter(octave[-1], inc))
        gauss.append(octave)
        nxt = octave[INTERVALS]
        h2, w2 = (nxt.shape[0] // 2) * 2, (nxt.shape[1] // 2) * 2
        nxt = nxt[:h2, :w2]
        # 2x2 block averaging also commutes with 90-degree rotations
        img = 0.25 * (nxt[0::2, 0::2] + nxt[1::2, 0::2]
                      + nxt[0::2, 1::2] + nxt[1::2, 1::2])
        if min(img.shape) < 8:
            break
    return gauss


def _dog(gauss):
    return [[b - a for a, b in zip(octave, octave[1:])] for octave in gauss]


def _refine(dog_octave, i, y, x):
    """Quadratic sub-pixel refinement in (x, y, scale). Returns
    (i, y, x, offset, value) or None."""
    shape = dog_octave[0].shape
    for _ in range(5):
        prev_l, cur, next_l = dog_octave[i - 1], dog_octave[i], dog_octave[i + 1]
        g = 0.5 * np.array([
            cur[y, x + 1] - cur[y, x - 1],
            cur[y + 1, x] - cur[y - 1, x],
            next_l[y, x] - prev_l[y, x],
        ])
        dxx = cur[y, x + 1] - 2 * cur[y, x] + cur[y, x - 1]
        dyy = cur[y + 1, x] - 2 * cur[y, x] + cur[y - 1, x]
        dss = next_l[y, x] - 2 * cur[y, x] + prev_l[y, x]
        dxy = 0.25 * (cur[y + 1, x + 1] - cur[y + 1, x - 1]
                      - cur[y - 1, x + 1] + cur[y - 1, x - 1])
        dxs = 0.25 * (next_l[y, x + 1] - next_l[y, x - 1]
                      - prev_l[y, x + 1] + prev_l[y, x - 1])
        dys = 0.25 * (next_l[y + 1, x] - next_l[y - 1, x]
                      - prev_l[y + 1, x] + prev_l[y - 1, x])
        hess = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
        try:
            offset = -np.linalg.solve(hess, g)
        except np.linalg.LinAlgError:
            return None
        if np.all(np.abs(offset) < 0.5):
            value = cur[y, x] + 0.5 * float(g @ offset)
            if abs(value) * INTERVALS < CONTRAST_THRESH:
                return None
            # edge rejection on the spatial Hessian
            tr = dxx + dyy
            det = dxx * dyy - dxy * dxy
            if det <= 0 or tr * tr * EDGE_RATIO >= det * (EDGE_RATIO + 1) ** 2:
                return None
            return i, y, x, offset, value
        x += int(round(offset[0]))
        y += int(round(offset[1]))
        i += int(round(offset[2]))
        if not (1 <= i <= INTERVALS and 1 <= y < shape[0] - 1 and 1 <= x < shape[1] - 1):
            return None
    return None


def _gradients(img):
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, 1:-1] = 0.5 * (img[:, 2:] - img[:, :-2])
    gy[1:-1, :] = 0.5 * (img[2:, :] - img[:-2, :])
    return np.hypot(gx, gy), np.arctan2(gy, gx)


def _orientations(gauss_img, x, y, sigma_oct):
    """36-bin orientation histogram; returns peak orientations (radians)."""
    h, w = gauss_img.shape
    sig_w = 1.5 * sigma_oct
    radius = int(round(3.0 * sig_w))
    cx, cy = int(round(x)), int(round(y))
    x0, x1 = max(cx - radius, 1), min(cx + radius + 1, w - 1)
    y0, y1 = max(cy - radius, 1), min(cy + radius + 1, h - 1)
    if x0 >= x1 or y0 >= y1:
        return []
    mag, ori = _gradients(gauss_img[y0 - 1:y1 + 1, x0 - 1:x1 + 1])
    mag = mag[1:-1, 1:-1]
    ori = ori[1:-1, 1:-1]
    ys, xs = np.mgrid[y0:y1, x0:x1]
    weight = np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2.0 * sig_w ** 2))
    bins = np.floor(((ori % (2 * np.pi)) / (2 * np.pi)) * 36).astype(int) % 36
    hist = np.bincount(bins.ravel(), weights=(weight * mag).ravel(), minlength=36)
    # circular smoothing, twice
    for _ in range(2):
        hist = (np.roll(hist, 1) + hist + np.roll(hist, -1)) / 3.0
    peak = hist.max()
    if peak <= 0:
        return []
    result = []
    for b in range(36):
        left, right = hist[(b - 1) % 36], hist[(b + 1) % 36]
        if hist[b] >= 0.8 * peak and hist[b] > left and hist[b] > right:
            denom = left - 2 * hist[b] + right
            interp = b if denom == 0 else b + 0.5 * (left - right) / denom
            result.append((interp % 36) / 36.0 * 2 * np.pi)
    return result


def detect_keypoints(image):
    """Difference-of-Gaussians extrema with sub-pixel refinement, contrast
    and edge rejection, and 36-bin orientation assignment."""
    gauss = _pyramid(image.pixels)
    dogs = _dog(gauss)
    keypoints = []
    seen = set()
    # glyphs are binary-ish rasters: discard blob responses with no ink
    # support near the center (e.g. the counter of an 'O')
    ink_dist = ndimage.distance_transform_edt(image.pixels <= 0.2)
    for o, dog_octave in enumerate(dogs):
        stack = np.stack(dog_octave)
        prefilter = 0.5 * CONTRAST_THRESH / INTERVALS
        for i in range(1, INTERVALS + 1):
            cube = stack[i - 1:i + 2]
            center = cube[1, 1:-1, 1:-1]
            strong = np.abs(center) > prefilter
            if not strong.any():
                continue
            neighborhood = np.lib.stride_tricks.sliding_window_view(
                cube, (3, 3, 3))[0]
            is_max = (center >= neighborhood.max(axis=(2, 3, 4))) & (center > 0)
            is_min = (center <= neighborhood.min(axis=(2, 3, 4))) & (center < 0)
            ys, xs = np.nonzero(strong & (is_max | is_min))
            for y, x in zip(ys + 1, xs + 1):
                refined = _refine(dog_octave, i, int(y), int(x))
                if refined is None:
                    continue
                ri, ry, rx, offset, _ = refined
                sigma_oct = SIGMA0 * 2.0 ** ((ri + offset[2]) / INTERVALS)
                level = int(np.clip(round(ri + offset[2]), 0, INTERVALS + 2))
                fx, fy = rx + offset[0], ry + offset[1]
                octave_scale = 2.0 ** o * (0.5 if UPSAMPLE else 1.0)
                for theta in _orientations(gauss[o][level], fx, fy, sigma_oct):
                    kx = fx * octave_scale
                    ky = fy * octave_scale
                    if not (0 <= kx < image.width and 0 <= ky < image.height):
                        continue
                    scale_abs = sigma_oct * octave_scale
                    if ink_dist[int(ky), int(kx)] > 0.5 * scale_abs + 2.0:
                        continue
                    key = (round(kx, 2), round(ky, 2),
                           round(scale_abs, 2), round(theta, 3))
                    if key in seen:
                        continue
                    seen.add(key)
                    keypoints.append(Keypoint(
                        x=float(kx), y=float(ky),
                        scale=float(scale_abs),
                        orientation=float(theta)))
    keypoints.sort(key=lambda k: (k.y, k.x, k.scale, k.orientation))
    return keypoints


# ---- descriptor computation ----

_CELLS = 4
_BINS = 8


def _blur_for_scale(pixels, scale):
    sigma = np.sqrt(max(scale ** 2 - ASSUMED_BLUR ** 2, 0.01))
    return ndimage.gaussian_filter(np.asarray(pixels, dtype=np.float64), sigma)


def _descriptor_from_blurred(blurred, kp):
    h, w = blurred.shape
    if not (0 <= kp.x < w and 0 <= kp.y < h):
        raise WindowOutOfBounds(
            f"keypoint ({kp.x:.1f},{kp.y:.1f}) outside {w}x{h} image")
    # floor the cell width so fine-scale keypoints still gather enough
    # pixels to satisfy the clamped-normalization invariants
    hist_width = 3.0 * max(kp.scale, 1.2)
    radius = int(round(hist_width * np.sqrt(2) * (_CELLS + 1) * 0.5))
    x0, x1 = max(int(kp.x) - radius, 1), min(int(kp.x) + radius + 1, w - 1)
    y0, y1 = max(int(kp.y) - radius, 1), min(int(kp.y) + radius + 1, h - 1)
    if x0 >= x1 or y0 >= y1:
        raise WindowOutOfBounds("descriptor support entirely off-image")
    mag, ori = _gradients(blurred[y0 - 1:y1 + 1, x0 - 1:x1 + 1])
    mag = mag[1:-1, 1:-1].ravel()
    ori = ori[1:-1, 1:-1].ravel()
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx = xs.ravel() - kp.x
    dy = ys.ravel() - kp.y
    cos_t, sin_t = np.cos(kp.orientation), np.sin(kp.orientation)
    x_rot = (cos_t * dx + sin_t * dy) / hist_width
    y_rot = (-sin_t * dx + cos_t * dy) / hist_width
    rbin = y_rot + 0.5 * _CELLS - 0.5
    cbin = x_rot + 0.5 * _CELLS - 0.5
    inside = (rbin > -1) & (rbin < _CELLS) & (cbin > -1) & (cbin < _CELLS)
    if not inside.any():
        raise NormalizationDegenerate("no gradient support in window")
    rbin, cbin = rbin[inside], cbin[inside]
    mag, ori = mag[inside], ori[inside]
    x_r, y_r = x_rot[inside], y_rot[inside]
    weight = np.exp(-(x_r ** 2 + y_r ** 2) / (0.5 * _CELLS ** 2))
    obin = (((ori - kp.orientation) % (2 * np.pi)) / (2 * np.pi)) * _BINS
    contrib = weight * mag

    hist = np.zeros((_CELLS + 2, _CELLS + 2, _BINS))
    r0 = np.floor(rbin).astype(int)
    c0 = np.floor(cbin).astype(int)
    o0 = np.floor(obin).astype(int)
    fr, fc, fo = rbin - r0, cbin - c0, obin - o0
    for dr in (0, 1):
        wr = contrib * (fr if dr else 1 - fr)
        for dc in (0, 1):
            wc = wr * (fc if dc else 1 - fc)
            for do in (0, 1):
                wo = wc * (fo if do else 1 - fo)
                np.add.at(hist, (r0 + dr + 1, c0 + dc + 1, (o0 + do) % _BINS), wo)
    vec = hist[1:-1, 1:-1, :].ravel()
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        raise NormalizationDegenerate("zero-gradient descriptor window")
    vec = vec / norm
    # iterate clamp + renormalize to a fixed point so both invariants hold:
    # unit norm and no component above 0.2
    for _ in range(50):
        clamped = np.minimum(vec, 0.2)
        n = np.linalg.norm(clamped)
        if n < 1e-12:
            raise NormalizationDegenerate("descriptor collapses under clamping")
        vec = clamped / n
        if vec.max() <= 0.2 + 1e-6:
            break
    else:
        raise NormalizationDegenerate("descriptor too sparse to clamp at 0.2")
    return Descriptor(values=vec, keypoint=kp)


def compute_descriptor(image, keypoint):
    blurred = _blur_for_scale(image.pixels, keypoint.scale)
    return _descriptor_from_blurred(blurred, keypoint)


def extract_glyph(image, source_letter="?"):
    """Detect keypoints and compute descriptors, caching blurs per scale."""
    cache = {}
    out = []
    for kp in detect_keypoints(image):
        kp.source_letter = source_letter
        key = round(kp.scale, 3)
        if key not in cache:
            cache[key] = _blur_for_scale(image.pixels, kp.scale)
        try:
            out.append(_descriptor_from_blurred(cache[key], kp))
        except (WindowOutOfBounds, NormalizationDegenerate):
            continue
    return out


def _font_stream(seed, font_id):
    digest = hashlib.sha256(font_id.encode("utf-8")).digest()
    sub = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed) % 2**63, sub]))


def extract_font_set(record, seed, n_max=N_MAX):
    """Pool descriptors over the six glyphs; subsample to `n_max` with the
    font-derived stream if over, zero-pad with mask False if under."""
    descs = []
    for letter in LETTERS:
        descs.extend(extract_glyph(record.glyphs[letter], source_letter=letter))
    if not descs:
        raise EmptyDescriptorSet(f"font {record.font_id} yields no descriptors")
    if len(descs) > n_max:
        rng = _font_stream(seed, record.font_id)
        keep = np.sort(rng.choice(len(descs), size=n_max, replace=False))
        descs = [descs[i] for i in keep]
    values = np.zeros((n_max, DESC_DIM))
    mask = np.zeros(n_max, dtype=bool)
    for i, d in enumerate(descs):
        values[i] = d.values
        mask[i] = True
    return DescriptorSet(values=values, mask=mask, font_id=record.font_id,
                         keypoints=[d.keypoint for d in descs])


# ---- binary descriptor cache ----

def save_cache(path, dset):
    """FSD1 cache: count, then per-descriptor geometry + 128 f32 values."""
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        n = dset.n
        f.write(struct.pack("<I", n))
        for kp, vec in zip(dset.keypoints, dset.values[:n]):
            f.write(struct.pack("<ffff", kp.x, kp.y, kp.scale, kp.orientation))
            f.write(struct.pack("<B", _LETTER_CODE.get(kp.source_letter, 255)))
            f.write(np.asarray(vec, dtype="<f4").tobytes())


def load_cache(path, font_id="", n_max=N_MAX):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CACHE_MAGIC:
        raise ValueError("not a descriptor cache (bad magic)")
    (n,) = struct.unpack_from("<I", data, 4)
    off = 8
    values = np.zeros((max(n_max, n), DESC_DIM))
    mask = np.zeros(max(n_max, n), dtype=bool)
    keypoints = []
    for i in range(n):
        x, y, scale, orientation = struct.unpack_from("<ffff", data, off)
        off += 16
        (code,) = struct.unpack_from("<B", data, off)
        off += 1
        vec = np.frombuffer(data, dtype="<f4", count=DESC_DIM, offset=off)
        off += 4 * DESC_DIM
        letter = LETTERS[code] if code < len(LETTERS) else "?"
        keypoints.append(Keypoint(x, y, scale, orientation, letter))
        values[i] = vec.astype(np.float64)
        mask[i] = True
    return DescriptorSet(values=values[:n_max] if n <= n_max else values,
                         mask=mask[:n_max] if n <= n_max else mask,
                         font_id=font_id, keypoints=keypoints)
