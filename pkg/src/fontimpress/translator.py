"""Encoder-decoder shape-to-impression translator with beam-search decoding."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .dataset import target_sequence
from .errors import (
    EmptyDescriptorSet,
    InvalidPrefix,
    TrainingDiverged,
)
from .nn import Adam, DecoderLayer, EncoderLayer, Linear, Module, ce_loss, \
    load_checkpoint, pe_matrix, save_checkpoint


@dataclass
class TranslatorConfig:
    K: int
    d_model: int = 128
    enc_layers: int = 5
    dec_layers: int = 5
    heads: int = 1
    n_max: int = 300
    max_len: int = 40
    beam: int = 5
    dropout: float = 0.0
    batch_size: int = 16
    steps: int = 3000
    lr: float = 0.001
    val_every: int = 50
    pad_in_loss: bool = True

    def __post_init__(self):
        for name in ("K", "d_model", "enc_layers", "dec_layers", "heads",
                     "n_max", "max_len", "beam", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def vocab_size(self):
        return self.K + 3

    @property
    def bos(self):
        return self.K

    @property
    def eos(self):
        return self.K + 1

    @property
    def pad(self):
        return self.K + 2

    def to_dict(self):
        return {"kind": "translator", **vars(self)}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k != "kind"})


class TranslatorModel(Module):
    def __init__(self, config, rng):
        d = config.d_model
        self.embed = Linear(d, d, rng)
        self.encoder = [EncoderLayer(d, config.heads, 4 * d, rng,
                                     p_drop=config.dropout)
                        for _ in range(config.enc_layers)]
        self.token_emb = Tensor(
            rng.normal(0.0, 0.25, size=(config.vocab_size, d)),
            requires_grad=True)
        self.decoder = [DecoderLayer(d, config.heads, 4 * d, rng,
                                     p_drop=config.dropout)
                        for _ in range(config.dec_layers)]
        self.out_proj = Linear(d, config.vocab_size, rng)
        # small readout init keeps untrained logits near uniform
        self.out_proj.weight.data *= 0.1


def encode(model, dset, rng=None, training=False):
    """Latents for the real descriptor slots (compacted; mask all-True)."""
    real = dset.real_values()
    if real.shape[0] == 0:
        raise EmptyDescriptorSet(f"font {dset.font_id!r} has no descriptors")
    h = model.embed(Tensor(real))
    for layer in model.encoder:
        h = layer(h, rng=rng, training=training)
    return h, np.ones(real.shape[0], dtype=bool)


def _check_prefix(config, prefix):
    prefix = list(int(t) for t in prefix)
    if not prefix or prefix[0] != config.bos:
        raise InvalidPrefix("prefix must start with BOS")
    if any(t < 0 or t >= config.vocab_size for t in prefix):
        raise InvalidPrefix("token id out of range")
    if config.bos in prefix[1:]:
        raise InvalidPrefix("BOS may appear only at position 0")
    if len(prefix) > config.max_len:
        raise InvalidPrefix(f"prefix longer than max_len={config.max_len}")
    return prefix


def decode_logits(model, config, latents, mask, prefix, rng=None,
                  training=False):
    """Logit rows for every position of a BOS-led prefix (teacher forcing)."""
    prefix = _check_prefix(config, prefix)
    x = model.token_emb[np.asarray(prefix)] + Tensor(
        pe_matrix(len(prefix), config.d_model))
    for layer in model.decoder:
        x = layer(x, latents, latent_mask=mask, rng=rng, training=training)
    return model.out_proj(x)


def decode_step(model, config, latents, mask, prefix):
    """Next-token logits after the given prefix."""
    return decode_logits(model, config, latents, mask, prefix)[-1]


@dataclass
class BeamResult:
    tokens: list          # tag ids only; BOS/EOS/PAD stripped
    score: float          # sum of token log-probabilities (incl. EOS)
    truncated: bool


def beam_search(model, config, latents, mask, width=None, max_len=None):
    """Highest log-probability EOS-terminated hypothesis; ties broken by
    lexicographically smallest token sequence."""
    width = config.beam if width is None else width
    max_len = config.max_len if max_len is None else max_len
    if width < 1:
        raise ValueError("beam width must be >= 1")
    beams = [((config.bos,), 0.0)]
    completed = []
    with no_grad():
        for _ in range(max_len):
            candidates = []
            for prefix, score in beams:
                logits = decode_step(model, config, latents, mask, prefix)
                logp = logits.log_softmax().data
                for token in range(config.vocab_size):
                    if token == config.bos:
                        continue
                    candidates.append((prefix + (token,),
                                       score + float(logp[token])))
            candidates.sort(key=lambda c: (-c[1], c[0]))
            beams = []
            for prefix, score in candidates:
                if prefix[-1] == config.eos:
                    completed.append((prefix, score))
                elif len(beams) < width:
                    beams.append((prefix, score))
            if not beams:
                break
    pool, truncated = (completed, False) if completed else (beams, True)
    prefix, score = min(pool, key=lambda c: (-c[1], c[0]))
    tokens = [t for t in prefix
              if t not in (config.bos, config.eos, config.pad)]
    return BeamResult(tokens, score, truncated)


def _sequence_loss(model, config, latents, mask, target, rng=None,
                   training=False):
    decoder_input = [config.bos] + list(target[:-1])
    logits = decode_logits(model, config, latents, mask, decoder_input,
                           rng=rng, training=training)
    target = np.asarray(target, dtype=np.int64)
    if not config.pad_in_loss:
        keep = np.nonzero(target != config.pad)[0]
        logits, target = logits[keep], target[keep]
    return ce_loss(logits, target)


def exact_match_rate(model, config, pairs, vocab, width=None):
    """Fraction of fonts whose beam output reproduces the target tag ids."""
    hits = 0
    for record, dset in pairs:
        want = [t for t in target_sequence(record, vocab, config.max_len)
                if t < vocab.K]
        latents, mask = encode(model, dset)
        result = beam_search(model, config, latents, mask, width=width)
        hits += result.tokens == want
    return hits / len(pairs)


@dataclass
class TranslatorLog:
    losses: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)  # (step, loss)
    best_step: int = 0
    best_loss: float = float("inf")
    stopped_at: int = 0


def train_translator(corpus, vocab, config, seed, val_pairs=None,
                     early_stop_exact=None):
    """Teacher-forced CE training; best checkpoint by validation loss.

    `early_stop_exact`: stop once the beam-search exact-match rate on the
    validation pairs reaches this fraction (checked at each validation).
    """
    pairs = list(corpus)
    if not pairs:
        raise ValueError("empty training corpus")
    if val_pairs is None:
        val_pairs = pairs
    rng = np.random.default_rng(seed)
    model = TranslatorModel(config, rng)
    targets = {rec.font_id: target_sequence(rec, vocab, config.max_len)
               for rec, _ in pairs}
    optimizer = Adam(model.parameters(), lr=config.lr)
    log = TranslatorLog()
    best_state = model.state_dict()
    last_good = best_state

    for step in range(1, config.steps + 1):
        batch_ids = rng.integers(0, len(pairs), size=config.batch_size)
        optimizer.zero_grad()
        total = 0.0
        for i in batch_ids:
            record, dset = pairs[i]
            training = config.dropout > 0.0
            latents, mask = encode(model, dset, rng=rng, training=training)
            loss = _sequence_loss(model, config, latents, mask,
                                  targets[record.font_id], rng=rng,
                                  training=training) * (1.0 / config.batch_size)
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
            with no_grad():
                vloss = float(np.mean([
                    _sequence_loss(model, config, *encode(model, d),
                                   target_sequence(r, vocab, config.max_len)
                                   ).item()
                    for r, d in val_pairs]))
            log.val_loss.append((step, vloss))
            if vloss < log.best_loss:
                log.best_loss = vloss
                log.best_step = step
                best_state = model.state_dict()
            # greedy decoding is a cheap gate for the beam-width target:
            # a peaked, converged model decodes identically at any width
            if early_stop_exact is not None and exact_match_rate(
                    model, config, val_pairs, vocab, width=1) >= early_stop_exact:
                log.stopped_at = step
                # the state that met the target is the one worth keeping
                return model, model.state_dict(), log

    log.stopped_at = config.steps
    return model, best_state, log


def save_translator(path, config, state):
    save_checkpoint(path, config.to_dict(), state)


def load_translator(path):
    config_dict, params = load_checkpoint(path)
    if config_dict.get("kind") != "translator":
        raise ValueError("checkpoint does not hold a translator")
    config = TranslatorConfig.from_dict(config_dict)
    model = TranslatorModel(config, np.random.default_rng(0))
    model.load_state_dict(params)
    return model, config


def dump_translations(path, entries, vocab):
    """JSON lines: {font_id, tokens, score, truncated} per font."""
    with open(path, "w") as f:
        for font_id, result in entries:
            record = {
                "font_id": font_id,
                "tokens": [vocab.tag_of(t) for t in result.tokens],
                "score": round(result.score, 6),
                "truncated": result.truncated,
            }
            f.write(json.dumps(record) + "\n")
