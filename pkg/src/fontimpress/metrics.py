"""Evaluation metrics: frequency-sliced per-tag F1 and mean average precision."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyCorpus, LikelihoodsRequired

log = logging.getLogger(__name__)


@dataclass
class PredictionRow:
    truth: frozenset
    predicted: frozenset
    likelihoods: np.ndarray | None = None


@dataclass
class PredictionTable:
    """Per-font ground truth, predictions, and optional per-tag likelihoods."""

    rows: dict = field(default_factory=dict)

    def add(self, font_id, truth, predicted, likelihoods=None):
        if likelihoods is not None:
            likelihoods = np.asarray(likelihoods, dtype=np.float64)
            if likelihoods.min() < 0.0 or likelihoods.max() > 1.0:
                raise ValueError("likelihoods must lie in [0, 1]")
        self.rows[font_id] = PredictionRow(frozenset(truth), frozenset(predicted),
                                           likelihoods)

    @property
    def has_likelihoods(self):
        return all(r.likelihoods is not None for r in self.rows.values())


def _tag_f1(table, k):
    tp = fp = fn = 0
    for row in table.rows.values():
        truth, pred = k in row.truth, k in row.predicted
        tp += truth and pred
        fp += pred and not truth
        fn += truth and not pred
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def f1_at(table, vocab, n):
    """Unweighted mean per-tag F1 over the n most frequent tags.

    `n` is "all" or a count; vocabulary ids are already frequency-ordered,
    so the slice is simply the first ids.
    """
    if not table.rows:
        raise EmptyCorpus("prediction table is empty")
    count = vocab.K if n == "all" else int(n)
    if count > vocab.K:
        log.warning("f1_at: n=%s exceeds K=%d; capping", n, vocab.K)
        count = vocab.K
    return float(np.mean([_tag_f1(table, k) for k in range(count)]))


def _ranked_font_ids(table, k):
    """All fonts ordered by descending likelihood of tag k; ties by font id."""
    items = sorted(table.rows.items(),
                   key=lambda kv: (-kv[1].likelihoods[k], kv[0]))
    return [font_id for font_id, _ in items]


def average_precision(table, k):
    """The paper's per-tag AP: (sum_{m=1..M_k} m / r_m) / M_k."""
    if not table.has_likelihoods:
        raise LikelihoodsRequired(
            "average precision needs per-tag likelihoods (set predictions only)")
    ranking = _ranked_font_ids(table, k)
    positive_ranks = [rank for rank, font_id in enumerate(ranking, start=1)
                      if k in table.rows[font_id].truth]
    if not positive_ranks:
        raise ValueError(f"tag {k} has no positive fonts in the table")
    total = sum(m / r for m, r in enumerate(positive_ranks, start=1))
    return total / len(positive_ranks)


def mean_ap(table, vocab):
    """Unweighted mean AP over tags present in the split; absent tags skipped."""
    aps = []
    skipped = 0
    for k in range(vocab.K):
        if any(k in row.truth for row in table.rows.values()):
            aps.append(average_precision(table, k))
        else:
            skipped += 1
    if skipped:
        log.info("mean_ap: skipped %d tags absent from the split", skipped)
    if not aps:
        raise EmptyCorpus("no tag appears in the evaluated split")
    return float(np.mean(aps))


def write_metrics_report(path, table, vocab, split="test"):
    """Summary CSV: one row per metric.  mAP included when likelihoods exist."""
    rows = [("f1@100", f1_at(table, vocab, 100), min(100, vocab.K), split),
            ("f1@200", f1_at(table, vocab, 200), min(200, vocab.K), split),
            ("f1@all", f1_at(table, vocab, "all"), vocab.K, split)]
    if table.has_likelihoods:
        rows.append(("map", mean_ap(table, vocab), vocab.K, split))
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("metric", "value", "n_tags", "split"))
        for name, value, n_tags, part in rows:
            writer.writerow((name, f"{value:.6f}", n_tags, part))


def write_per_tag_report(path, table, vocab, split="test"):
    """Per-tag breakdown CSV: F1 and, when available, AP for each tag."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("tag", "tag_id", "count", "f1", "ap", "split"))
        for k, (tag, count) in enumerate(vocab.entries):
            ap = ""
            if table.has_likelihoods and any(
                    k in row.truth for row in table.rows.values()):
                ap = f"{average_precision(table, k):.6f}"
            writer.writerow((tag, k, count, f"{_tag_f1(table, k):.6f}", ap, split))
