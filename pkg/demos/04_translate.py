"""Train the shape-to-impression translator and decode with beam search.

The encoder is the classifier backbone without the CLS token: it emits one
latent vector per descriptor. A single-head autoregressive decoder (with
sinusoidal position encoding on its own inputs only) cross-attends to those
latents and emits impression tokens until EOS. Training is teacher-forced
cross-entropy; inference is beam search over log-probability sums.

Run:  python3 demos/04_translate.py     (~5-12 minutes; stops early once
                                         14/16 sequences match)
"""

from fontimpress.dataset import build_vocab, target_sequence
from fontimpress.sift import extract_font_set
from fontimpress.synth import synth_corpus
from fontimpress.translator import (
    TranslatorConfig,
    beam_search,
    encode,
    train_translator,
)


def main():
    records, _ = synth_corpus(16, 12, seed=7)
    vocab = build_vocab(records, min_count=1)
    print(f"{len(records)} fonts, K={vocab.K}; extracting descriptors...")
    pairs = [(r, extract_font_set(r, seed=7)) for r in records]

    config = TranslatorConfig(K=vocab.K, max_len=8, steps=3000, val_every=50)
    # training seeds differ in how fast they escape the frequency-prior
    # plateau (the decoder first learns to emit the most common tags for
    # every font); this one converges comfortably within the step budget
    model, best, log = train_translator(pairs, vocab, config, seed=101,
                                        early_stop_exact=14 / 16)
    model.load_state_dict(best)
    print(f"stopped at step {log.stopped_at}; "
          f"val CE {log.val_loss[0][1]:.3f} -> {log.val_loss[-1][1]:.3f}")

    exact = 0
    for rec, dset in pairs:
        latents, mask = encode(model, dset)
        result = beam_search(model, config, latents, mask, width=5)
        got = [vocab.tag_of(t) for t in result.tokens]
        want = [vocab.tag_of(t)
                for t in target_sequence(rec, vocab, config.max_len)
                if t < vocab.K]
        hit = got == want
        exact += hit
        mark = "=" if hit else "x"
        print(f"  {mark} {rec.font_id}: {got}"
              + ("" if hit else f"   (truth: {want})"))
    print(f"\nexact sequence matches: {exact}/{len(pairs)} at beam width 5")
    print("note: emitted tags come out in descending corpus frequency,")
    print("because target sequences are frequency-ordered during training")


if __name__ == "__main__":
    main()
