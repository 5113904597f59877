"""Explainability: occlusion over k-means visual words and Integrated Gradients."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat, dtype_scope, no_grad
from .classifier import classifier_forward
from .errors import InsufficientPoints, NoLabeledFonts, NotDifferentiable
from .nn import PROB_CLAMP
from .sift import DescriptorSet
from .translator import decode_logits

log = logging.getLogger(__name__)


# ---- k-means visual words ----

@dataclass
class Codebook:
    centroids: np.ndarray         # (Q, d)
    n_points: int
    seed: int
    sse_history: list = field(default_factory=list)

    @property
    def Q(self):
        return self.centroids.shape[0]


def _sse(points, centroids, labels):
    return float(np.sum((points - centroids[labels]) ** 2))


def _assign_all(points, centroids):
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)  # argmin takes the lowest id on ties


def kmeans(points, q, seed, max_iters=100):
    """k-means++ init followed by Lloyd's iterations (SSE non-increasing)."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be a 2-d array")
    if np.unique(points, axis=0).shape[0] < q:
        raise InsufficientPoints(f"need at least {q} distinct points")
    rng = np.random.default_rng(seed)

    centroids = np.empty((q, points.shape[1]))
    centroids[0] = points[rng.integers(len(points))]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, q):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(len(points),
                                                           1.0 / len(points))
        centroids[j] = points[rng.choice(len(points), p=probs)]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))

    history = []
    for _ in range(max_iters):
        labels = _assign_all(points, centroids)
        history.append(_sse(points, centroids, labels))
        new = centroids.copy()
        for j in range(q):
            members = points[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
            else:
                # reseed an empty cluster to the point farthest from its
                # current centroid; moving a centroid onto a point never
                # increases SSE
                far = int(np.argmax(
                    ((points - centroids[labels]) ** 2).sum(axis=1)))
                new[j] = points[far]
        centroids = new
        if len(history) >= 2 and history[-2] > 0 and \
                (history[-2] - history[-1]) / history[-2] < 1e-6:
            break
    labels = _assign_all(points, centroids)
    history.append(_sse(points, centroids, labels))
    return Codebook(centroids, len(points), seed, history)


def assign(descriptor, codebook):
    """Nearest-centroid cluster id; ties resolved to the lowest id."""
    descriptor = np.asarray(descriptor, dtype=np.float64)
    if descriptor.ndim == 1:
        return int(_assign_all(descriptor[None, :], codebook.centroids)[0])
    return _assign_all(descriptor, codebook.centroids)


# ---- group-based occlusion sensitivity ----

@dataclass
class SensitivityVector:
    impression: int
    raw: np.ndarray               # (Q,)
    centered: np.ndarray          # (Q,)
    n_fonts: int


def occlude_cluster(dset, codebook, q):
    """The descriptor set with every descriptor of visual word q removed."""
    labels = assign(dset.real_values(), codebook)
    keep = np.nonzero(labels != q)[0]
    values = np.zeros_like(dset.values)
    values[:len(keep)] = dset.real_values()[keep]
    mask = np.zeros_like(dset.mask)
    mask[:len(keep)] = True
    kept_kps = [dset.keypoints[i] for i in keep] if dset.keypoints else []
    return DescriptorSet(values, mask, dset.font_id, kept_kps)


def _bce_k(model, dset, k):
    """Per-impression BCE with ground-truth label 1: -log p_k."""
    with no_grad():
        p = float(classifier_forward(model, dset).data[k])
    return -np.log(np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP))


def occlusion_raw(model, pairs, codebook, vocab, k):
    """Mean over fonts labeled k of BCE_k(occluded) - BCE_k(full), per word."""
    tag = vocab.tag_of(k)
    labeled = [(rec, dset) for rec, dset in pairs if tag in rec.tags]
    if not labeled:
        raise NoLabeledFonts(f"no fonts labeled {tag!r} in the subset")
    raw = np.zeros(codebook.Q)
    for rec, dset in labeled:
        full = _bce_k(model, dset, k)
        labels = assign(dset.real_values(), codebook)
        for q in np.unique(labels):
            occluded = occlude_cluster(dset, codebook, int(q))
            if occluded.n == 0:
                log.warning("occluding word %d empties font %s; skipped",
                            q, rec.font_id)
                continue
            raw[q] += _bce_k(model, occluded, k) - full
    return raw / len(labeled), len(labeled)


def occlusion_matrix(model, pairs, codebook, vocab):
    """Raw sensitivities for every impression; rows for absent tags are zero."""
    raw = np.zeros((vocab.K, codebook.Q))
    counts = np.zeros(vocab.K, dtype=int)
    for k in range(vocab.K):
        try:
            raw[k], counts[k] = occlusion_raw(model, pairs, codebook, vocab, k)
        except NoLabeledFonts:
            pass
    return raw, counts


def occlusion_sensitivity(model, pairs, codebook, vocab, k, raw_matrix=None):
    """SensitivityVector for impression k; centering subtracts the per-word
    median across all impressions present in the subset."""
    if raw_matrix is None:
        raw_matrix = occlusion_matrix(model, pairs, codebook, vocab)
    raw, counts = raw_matrix
    if counts[k] == 0:
        raise NoLabeledFonts(f"no fonts labeled {vocab.tag_of(k)!r}")
    present = raw[counts > 0]
    centered = raw[k] - np.median(present, axis=0)
    return SensitivityVector(k, raw[k], centered, int(counts[k]))


def write_sensitivity_report(path, vectors):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("impression", "q", "raw", "centered", "n_fonts"))
        for vec in vectors:
            for q in range(len(vec.raw)):
                writer.writerow((vec.impression, q, f"{vec.raw[q]:.8f}",
                                 f"{vec.centered[q]:.8f}", vec.n_fonts))


# ---- Integrated Gradients ----

@dataclass
class AttributionMap:
    font_id: str
    target: tuple                 # e.g. ("tag", k) or ("token", id, position)
    per_descriptor: np.ndarray    # (n,) summed component attributions
    components: np.ndarray        # (n, 128)
    steps: int
    completeness_gap: float


def integrated_gradients(forward, dset, steps, target=("output",)):
    """Midpoint-rule IG from the zero baseline over the real descriptors.

    `forward` maps a Tensor of shape (n, 128) to a scalar Tensor.  Gradients
    are accumulated in float64 regardless of the model dtype.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = dset.real_values().astype(np.float64)
    grad_sum = np.zeros_like(x)
    with dtype_scope(np.float64):
        for j in range(1, steps + 1):
            alpha = (j - 0.5) / steps
            point = Tensor(alpha * x, requires_grad=True)
            out = forward(point)
            out.backward()
            if point.grad is None:
                raise NotDifferentiable("target does not depend on the input")
            grad_sum += point.grad
        components = x * grad_sum / steps

        with no_grad():
            f_x = float(forward(Tensor(x)).item())
            f_0 = float(forward(Tensor(np.zeros_like(x))).item())
    gap = abs(components.sum() - (f_x - f_0))
    return AttributionMap(dset.font_id, target, components.sum(axis=1),
                          components, steps, gap)


def classifier_logit_target(model, k):
    """Pre-sigmoid logit of impression k as a functional of the input."""
    def forward(x):
        h = concat([model.cls, model.embed(x)], axis=0)
        for layer in model.encoder:
            h = layer(h)
        return model.head(h[0])[k]
    return forward


def translator_logit_target(model, config, prefix, token):
    """Pre-softmax logit of `token` after `prefix`, as a functional of the
    encoder input descriptors (teacher-forced)."""
    def forward(x):
        h = model.embed(x)
        for layer in model.encoder:
            h = layer(h)
        mask = np.ones(h.shape[0], dtype=bool)
        return decode_logits(model, config, h, mask, prefix)[-1][token]
    return forward


def write_attribution_report(path, maps):
    """JSON lines, one per (font, target)."""
    with open(path, "w") as f:
        for amap in maps:
            row = {
                "font_id": amap.font_id,
                "target": list(amap.target),
                "attributions": [round(float(v), 8)
                                 for v in amap.per_descriptor],
                "steps": amap.steps,
                "completeness_gap": round(amap.completeness_gap, 8),
            }
            f.write(json.dumps(row) + "\n")
