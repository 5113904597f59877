import itertools
import json

import numpy as np
import pytest

from fontimpress import translator as tr
from fontimpress.autodiff import no_grad
from fontimpress.dataset import (
    FontRecord,
    GlyphImage,
    LETTERS,
    build_vocab,
    target_sequence,
)
from fontimpress.errors import EmptyDescriptorSet, InvalidPrefix, \
    TrainingDiverged
from fontimpress.sift import DescriptorSet
from fontimpress.translator import (
    BeamResult,
    TranslatorConfig,
    TranslatorModel,
    beam_search,
    decode_logits,
    decode_step,
    encode,
    train_translator,
)


def random_set(rng, n, n_max=30, font_id="f"):
    values = np.zeros((n_max, 128), dtype=np.float32)
    values[:n] = rng.random((n, 128), dtype=np.float32)
    mask = np.zeros(n_max, dtype=bool)
    mask[:n] = True
    return DescriptorSet(values, mask, font_id)


@pytest.fixture(scope="module")
def toy():
    config = TranslatorConfig(K=4, enc_layers=1, dec_layers=1, max_len=3,
                              n_max=30)
    model = TranslatorModel(config, np.random.default_rng(0))
    dset = random_set(np.random.default_rng(1), 8)
    latents, mask = encode(model, dset)
    return config, model, dset, latents, mask


def test_encode_rejects_empty(toy):
    config, model = toy[:2]
    with pytest.raises(EmptyDescriptorSet):
        encode(model, random_set(np.random.default_rng(0), 0))


@pytest.mark.parametrize("seed", range(5))
def test_encode_permutation_equivariance(toy, seed):
    _, model = toy[:2]
    rng = np.random.default_rng(seed)
    dset = random_set(rng, 10)
    base, _ = encode(model, dset)
    for _ in range(20):
        perm = rng.permutation(10)
        shuffled = dset.values.copy()
        shuffled[:10] = dset.values[perm]
        out, _ = encode(model, DescriptorSet(shuffled, dset.mask, "f"))
        assert np.max(np.abs(out.data - base.data[perm])) <= 1e-5


def test_single_latent_cross_attention_collapse(toy):
    config, model = toy[:2]
    dset = random_set(np.random.default_rng(2), 1)
    latents, _ = encode(model, dset)
    attn = model.decoder[0].cross_attn
    queries = np.random.default_rng(3).random((4, config.d_model))
    from fontimpress.autodiff import Tensor
    out = attn(Tensor(queries), latents, latents).data
    want = attn.wo(attn.wv(latents)).data
    assert np.max(np.abs(out - want)) <= 1e-6


def test_decode_step_well_formed(toy):
    config, model, _, latents, mask = toy
    logits = decode_step(model, config, latents, mask, [config.bos])
    assert logits.shape == (config.vocab_size,)
    assert np.all(np.isfinite(logits.data))
    assert abs(logits.softmax().data.sum() - 1.0) <= 1e-6


def test_decode_causality(toy):
    config, model, _, latents, mask = toy
    short = decode_logits(model, config, latents, mask, [config.bos, 1]).data
    longer = decode_logits(model, config, latents, mask,
                           [config.bos, 1, 3]).data
    assert np.max(np.abs(longer[:2] - short)) <= 1e-6


def test_incremental_equals_batch_decode(toy):
    config, model, _, latents, mask = toy
    prefix = [config.bos, 2, 0]
    batch = decode_logits(model, config, latents, mask, prefix).data
    for t in range(len(prefix)):
        step = decode_step(model, config, latents, mask, prefix[:t + 1]).data
        assert np.max(np.abs(step - batch[t])) <= 1e-5


def test_invalid_prefixes(toy):
    config, model, _, latents, mask = toy
    for bad in ([], [0], [config.bos, config.vocab_size],
                [config.bos, config.bos], [config.bos, 1, 2, 3]):
        with pytest.raises(InvalidPrefix):
            decode_step(model, config, latents, mask, bad)


def brute_force_best(model, config, latents, mask):
    """Enumerate every EOS-terminated sequence within max_len tokens."""
    body_tokens = [t for t in range(config.vocab_size)
                   if t not in (config.bos, config.eos)]
    best = None
    for length in range(1, config.max_len + 1):
        for body in itertools.product(body_tokens, repeat=length - 1):
            prefix = (config.bos,) + body + (config.eos,)
            with no_grad():
                logits = decode_logits(model, config, latents, mask,
                                       prefix[:-1])
                logp = logits.log_softmax(axis=-1).data
            score = float(sum(logp[t, prefix[t + 1]]
                              for t in range(len(prefix) - 1)))
            key = (-score, prefix)
            if best is None or key < best[0]:
                best = (key, prefix, score)
    _, prefix, score = best
    tokens = [t for t in prefix
              if t not in (config.bos, config.eos, config.pad)]
    return BeamResult(tokens, score, False)


def test_beam_exhaustive_oracle(toy):
    config, model, _, latents, mask = toy
    want = brute_force_best(model, config, latents, mask)
    got = beam_search(model, config, latents, mask,
                      width=config.vocab_size ** 3)
    assert not got.truncated
    assert got.tokens == want.tokens
    assert got.score == pytest.approx(want.score, abs=1e-6)


def test_beam_width_one_is_greedy(toy):
    config, model, _, latents, mask = toy
    result = beam_search(model, config, latents, mask, width=1)
    prefix = [config.bos]
    score = 0.0
    for _ in range(config.max_len):
        with no_grad():
            logp = decode_step(model, config, latents, mask,
                               prefix).log_softmax().data
        logp[config.bos] = -np.inf
        token = int(np.argmax(logp))
        score += float(logp[token])
        prefix.append(token)
        if token == config.eos:
            break
    greedy = [t for t in prefix
              if t not in (config.bos, config.eos, config.pad)]
    if prefix[-1] == config.eos:
        assert result.tokens == greedy
        assert result.score == pytest.approx(score, abs=1e-6)


def test_beam_score_monotone_in_width(toy):
    config, model, _, latents, mask = toy
    scores = [beam_search(model, config, latents, mask, width=w).score
              for w in (1, 2, 4, 8)]
    for a, b in zip(scores, scores[1:]):
        assert b >= a - 1e-9


def test_output_contains_no_specials(toy):
    config, model, _, latents, mask = toy
    result = beam_search(model, config, latents, mask, width=4)
    assert config.bos not in result.tokens
    assert config.eos not in result.tokens
    assert config.pad not in result.tokens


@pytest.mark.parametrize("seed", range(5))
def test_initial_loss_near_uniform(seed):
    config = TranslatorConfig(K=8, enc_layers=1, dec_layers=1, max_len=6,
                              n_max=30)
    rng = np.random.default_rng(seed)
    model = TranslatorModel(config, rng)
    dset = random_set(rng, 10)
    latents, mask = encode(model, dset)
    target = [0, 3, config.eos] + [config.pad] * 3
    with no_grad():
        loss = tr._sequence_loss(model, config, latents, mask, target).item()
    assert abs(loss - np.log(config.vocab_size)) <= 0.15 * np.log(
        config.vocab_size)


def tiny_corpus(n_fonts=6, k=4, seed=0):
    rng = np.random.default_rng(seed)
    blank = GlyphImage(np.zeros((32, 32)))
    prototypes = rng.random((k, 128), dtype=np.float32) * 0.2
    records, pairs = [], []
    for i in range(n_fonts):
        tags = {f"t{j}" for j in range(k) if rng.random() < 0.5} or {"t0"}
        rec = FontRecord(f"f{i}", {c: blank for c in LETTERS}, tags)
        rows = [prototypes[j] + rng.normal(0, 0.01, 128).astype(np.float32)
                for j in range(k) if f"t{j}" in tags for _ in range(3)]
        values = np.zeros((18, 128), dtype=np.float32)
        values[:len(rows)] = rows
        mask = np.zeros(18, dtype=bool)
        mask[:len(rows)] = True
        records.append(rec)
        pairs.append((rec, DescriptorSet(values, mask, rec.font_id)))
    return pairs, build_vocab(records, 1)


def test_zero_steps_checkpoint_equals_init():
    pairs, vocab = tiny_corpus()
    config = TranslatorConfig(K=vocab.K, enc_layers=1, dec_layers=1,
                              max_len=6, steps=0, n_max=18)
    _, best, _ = train_translator(pairs, vocab, config, seed=5)
    fresh = TranslatorModel(config, np.random.default_rng(5))
    for name, value in fresh.state_dict().items():
        assert np.array_equal(best[name], value)


def test_training_deterministic_and_loss_decreases():
    pairs, vocab = tiny_corpus()
    config = TranslatorConfig(K=vocab.K, enc_layers=1, dec_layers=1,
                              max_len=6, steps=40, batch_size=4,
                              val_every=20, n_max=18)
    m1, best1, log1 = train_translator(pairs, vocab, config, seed=1)
    m2, best2, log2 = train_translator(pairs, vocab, config, seed=1)
    assert log1.losses == log2.losses
    for name in best1:
        assert np.array_equal(best1[name], best2[name])
    assert np.mean(log1.losses[-10:]) < np.mean(log1.losses[:10])


def test_divergence_carries_checkpoint(monkeypatch):
    pairs, vocab = tiny_corpus()
    config = TranslatorConfig(K=vocab.K, enc_layers=1, dec_layers=1,
                              max_len=6, steps=5, batch_size=2, n_max=18)
    from fontimpress.autodiff import Tensor
    calls = {"n": 0}
    real = tr.ce_loss

    def poisoned(logits, targets):
        calls["n"] += 1
        if calls["n"] > 3:
            return Tensor(np.asarray(np.nan, dtype=np.float32))
        return real(logits, targets)

    monkeypatch.setattr(tr, "ce_loss", poisoned)
    with pytest.raises(TrainingDiverged) as info:
        train_translator(pairs, vocab, config, seed=2)
    assert info.value.checkpoint is not None


def test_checkpoint_round_trip(tmp_path):
    pairs, vocab = tiny_corpus()
    config = TranslatorConfig(K=vocab.K, enc_layers=1, dec_layers=1,
                              max_len=6, steps=5, batch_size=2,
                              val_every=5, n_max=18)
    model, best, _ = train_translator(pairs, vocab, config, seed=7)
    latents, mask = encode(model, pairs[0][1])
    before = decode_step(model, config, latents, mask, [config.bos]).data.copy()
    path = tmp_path / "tr.ckpt"
    tr.save_translator(path, config, model.state_dict())
    loaded, loaded_config = tr.load_translator(path)
    assert loaded_config == config
    latents2, mask2 = encode(loaded, pairs[0][1])
    after = decode_step(loaded, loaded_config, latents2, mask2,
                        [config.bos]).data
    assert np.array_equal(before, after)


def test_dump_translations(tmp_path):
    pairs, vocab = tiny_corpus()
    path = tmp_path / "tr.jsonl"
    tr.dump_translations(
        path, [("f0", BeamResult([0, 2], -1.25, False))], vocab)
    row = json.loads(path.read_text().strip())
    assert row["font_id"] == "f0"
    assert row["tokens"] == [vocab.tag_of(0), vocab.tag_of(2)]
    assert row["truncated"] is False
