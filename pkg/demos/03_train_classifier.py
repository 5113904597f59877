"""Train the set-transformer classifier on the synthetic corpus.

The model embeds each descriptor, prepends a learned CLS token, runs five
transformer encoder layers with five-head self-attention and no position
encoding (the input is a set, not a sequence), and reads the CLS output
through a sigmoid head into K impression probabilities.

Run:  python3 demos/03_train_classifier.py     (~2 minutes)
"""

import numpy as np

from fontimpress.classifier import (
    ClassifierConfig,
    classifier_forward,
    predict_labels,
    train_classifier,
)
from fontimpress.dataset import build_vocab
from fontimpress.metrics import PredictionTable, f1_at, mean_ap
from fontimpress.sift import extract_font_set
from fontimpress.synth import synth_corpus


def main():
    records, _ = synth_corpus(16, 12, seed=7)
    vocab = build_vocab(records, min_count=1)
    print(f"{len(records)} fonts, K={vocab.K} impressions; extracting...")
    pairs = [(r, extract_font_set(r, seed=7)) for r in records]

    config = ClassifierConfig(K=vocab.K, steps=400, val_every=25)
    model, best, log = train_classifier(pairs, vocab, config, seed=7,
                                        early_stop_f1=0.95)
    model.load_state_dict(best)
    print(f"stopped at step {log.stopped_at}, best F1@all={log.best_f1:.3f}")
    print(f"loss: {log.losses[0]:.3f} -> {log.losses[-1]:.3f}")

    table = PredictionTable()
    for rec, dset in pairs:
        probs = classifier_forward(model, dset).data
        truth = {vocab.id_of(t) for t in rec.tags}
        table.add(rec.font_id, truth, predict_labels(probs, 0.5),
                  np.clip(probs, 0, 1))
    print(f"train F1@all = {f1_at(table, vocab, 'all'):.3f}, "
          f"mAP = {mean_ap(table, vocab):.3f}")

    rec, dset = pairs[0]
    probs = classifier_forward(model, dset).data
    print(f"\nfont {rec.font_id}: truth {sorted(rec.tags)}")
    ranked = sorted(zip(probs, vocab.tags()), reverse=True)[:5]
    for p, tag in ranked:
        print(f"  {tag:<12} {p:.3f}")


if __name__ == "__main__":
    main()
