"""Set-transformer multi-label classifier: CLS token readout over descriptors."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat, no_grad
from .dataset import labels_vector
from .errors import (
    EmptyDescriptorSet,
    InvalidThreshold,
    TrainingDiverged,
)
from .metrics import PredictionTable, f1_at
from .nn import Adam, EncoderLayer, Linear, Module, bce_loss, load_checkpoint, \
    save_checkpoint


@dataclass
class ClassifierConfig:
    K: int
    d_model: int = 128
    layers: int = 5
    heads: int = 5
    n_max: int = 300
    dropout: float = 0.0
    subsample: float = 1.0
    batch_size: int = 16
    steps: int = 2000
    lr: float = 0.001
    val_every: int = 50

    def __post_init__(self):
        for name in ("K", "d_model", "layers", "heads", "n_max", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.subsample <= 1.0:
            raise ValueError("subsample must lie in (0, 1]")

    def to_dict(self):
        return {"kind": "classifier", **vars(self)}

    @classmethod
    def from_dict(cls, d):
        d = {k: v for k, v in d.items() if k != "kind"}
        return cls(**d)


class ClassifierModel(Module):
    def __init__(self, config, rng):
        d = config.d_model
        self.embed = Linear(d, d, rng)
        self.cls = Tensor(rng.normal(0.0, 0.02, size=(1, d)), requires_grad=True)
        self.encoder = [EncoderLayer(d, config.heads, 4 * d, rng,
                                     p_drop=config.dropout)
                        for _ in range(config.layers)]
        self.head = Linear(d, config.K, rng)
        # small readout init keeps untrained probabilities near 0.5
        self.head.weight.data *= 0.25


def classifier_forward(model, dset, rng=None, training=False):
    """Probability vector over the K impressions for one descriptor set.

    Padded slots are dropped before embedding, which realizes the masking
    contract exactly: the forward pass sees only the real descriptors.
    """
    real = dset.real_values()
    if real.shape[0] == 0:
        raise EmptyDescriptorSet(f"font {dset.font_id!r} has no descriptors")
    x = model.embed(Tensor(real))
    h = concat([model.cls, x], axis=0)
    for layer in model.encoder:
        h = layer(h, rng=rng, training=training)
    return model.head(h[0]).sigmoid()


def predict_labels(probabilities, threshold):
    """Tag ids whose probability strictly exceeds the threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise InvalidThreshold(f"threshold {threshold} outside [0, 1]")
    p = probabilities.data if isinstance(probabilities, Tensor) else probabilities
    p = np.asarray(p)
    return {int(k) for k in np.nonzero(p > threshold)[0]}


def _subsample_set(dset, rng, keep):
    """Training-time set augmentation: keep a random `keep` fraction of the
    real descriptors (at least 16). Discourages reliance on any small group
    of descriptors, so the learned evidence spreads over repeated parts."""
    from .sift import DescriptorSet

    n = dset.n
    m = max(16, int(round(keep * n)))
    idx = rng.choice(n, size=min(m, n), replace=False)
    values = np.zeros_like(dset.values)
    values[:len(idx)] = dset.values[:n][idx]
    mask = np.zeros(len(dset.mask), dtype=bool)
    mask[:len(idx)] = True
    return DescriptorSet(values, mask, dset.font_id)


def _f1_on(model, pairs, vocab, threshold=0.5):
    table = PredictionTable()
    with no_grad():
        for record, dset in pairs:
            probs = classifier_forward(model, dset)
            truth = {vocab.id_of(t) for t in record.tags}
            table.add(record.font_id, truth, predict_labels(probs, threshold))
    return f1_at(table, vocab, "all")


@dataclass
class TrainingLog:
    losses: list = field(default_factory=list)
    val_f1: list = field(default_factory=list)  # (step, f1)
    best_step: int = 0
    best_f1: float = -1.0
    stopped_at: int = 0


def train_classifier(corpus, vocab, config, seed, val_pairs=None,
                     early_stop_f1=None):
    """Adam/BCE training over (FontRecord, DescriptorSet) pairs.

    `corpus` is the training material; `val_pairs` (defaulting to the
    training pairs) drives best-checkpoint selection by F1@all.  Returns
    (model, best_state, log); the model is left at its final-step weights.
    """
    pairs = list(corpus)
    if not pairs:
        raise ValueError("empty training corpus")
    if val_pairs is None:
        val_pairs = pairs
    rng = np.random.default_rng(seed)
    model = ClassifierModel(config, rng)
    targets = {rec.font_id: labels_vector(rec, vocab) for rec, _ in pairs}
    optimizer = Adam(model.parameters(), lr=config.lr)
    log = TrainingLog(best_step=0, best_f1=-1.0)
    best_state = model.state_dict()
    last_good = best_state

    for step in range(1, config.steps + 1):
        batch_ids = rng.integers(0, len(pairs), size=config.batch_size)
        optimizer.zero_grad()
        total = 0.0
        for i in batch_ids:
            record, dset = pairs[i]
            if config.subsample < 1.0:
                dset = _subsample_set(dset, rng, config.subsample)
            probs = classifier_forward(model, dset, rng=rng,
                                       training=config.dropout > 0.0)
            loss = bce_loss(probs, targets[record.font_id]) * (
                1.0 / config.batch_size)
            loss.backward()
            total += loss.item() * config.batch_size
        mean_loss = total / config.batch_size
        if not np.isfinite(mean_loss):
            raise TrainingDiverged(f"loss became {mean_loss} at step {step}",
                                   checkpoint=last_good)
        optimizer.step()
        log.losses.append(mean_loss)
        last_good = model.state_dict()

        if step % config.val_every == 0 or step == config.steps:
            f1 = _f1_on(model, val_pairs, vocab)
            log.val_f1.append((step, f1))
            if f1 > log.best_f1:
                log.best_f1 = f1
                log.best_step = step
                best_state = model.state_dict()
            if early_stop_f1 is not None and f1 >= early_stop_f1:
                log.stopped_at = step
                return model, best_state, log

    if log.best_f1 < 0.0:  # zero-step budget: the checkpoint is the init
        log.best_f1 = 0.0
        best_state = model.state_dict()
    log.stopped_at = config.steps
    return model, best_state, log


def save_classifier(path, config, state):
    save_checkpoint(path, config.to_dict(), state)


def load_classifier(path):
    config_dict, params = load_checkpoint(path)
    if config_dict.get("kind") != "classifier":
        raise ValueError("checkpoint does not hold a classifier")
    config = ClassifierConfig.from_dict(config_dict)
    model = ClassifierModel(config, np.random.default_rng(0))
    model.load_state_dict(params)
    return model, config


def dump_predictions(path, entries, vocab):
    """JSON lines: {font_id, probabilities, predicted} per font."""
    with open(path, "w") as f:
        for font_id, probs in entries:
            p = np.asarray(probs.data if isinstance(probs, Tensor) else probs)
            record = {
                "font_id": font_id,
                "probabilities": [round(float(v), 6) for v in p],
                "predicted": sorted(vocab.tag_of(k)
                                    for k in predict_labels(p, 0.5)),
            }
            f.write(json.dumps(record) + "\n")
