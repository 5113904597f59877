"""Command-line pipeline: synth -> extract -> vocab/split -> train -> explain."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys

import numpy as np

from . import attribution, classifier, metrics, overlay, sift, synth, translator
from .dataset import (
    SplitAssignment,
    TagVocab,
    build_vocab,
    load_manifest,
    save_manifest,
    split_fonts,
    target_sequence,
)
from .errors import (
    FontImpressError,
    NonScalarLoss,
    NormalizationDegenerate,
    NotDifferentiable,
    TrainingDiverged,
)
from .nn import load_checkpoint

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

NUMERIC_ERRORS = (TrainingDiverged, NonScalarLoss, NormalizationDegenerate,
                  NotDifferentiable)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_manifest(out_dir, args, inputs):
    config = {k: v for k, v in sorted(vars(args).items())
              if k != "func" and not callable(v)}
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    manifest = {
        "subcommand": args.command,
        "seed": getattr(args, "seed", None),
        "strict": getattr(args, "strict", False),
        "config": config,
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "input_hashes": {p: _sha256(p) for p in inputs if os.path.isfile(p)},
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)


def _load_pairs(records, args):
    """(record, DescriptorSet) pairs from the cache dir or fresh extraction."""
    pairs = []
    cache = getattr(args, "cache", None)
    for rec in records:
        if cache:
            path = os.path.join(cache, f"{rec.font_id}.fsd")
            dset = sift.load_cache(path, font_id=rec.font_id, n_max=args.nmax)
        else:
            dset = sift.extract_font_set(rec, seed=args.seed, n_max=args.nmax)
        pairs.append((rec, dset))
    return pairs


def _partition_pairs(pairs, args, partition):
    if not getattr(args, "split", None):
        return pairs
    split = SplitAssignment.load(args.split)
    wanted = set(split.members(partition))
    return [(r, d) for r, d in pairs if r.font_id in wanted]


# ---- subcommands ----

def cmd_synth(args):
    records, plant_map = synth.synth_corpus(args.fonts, args.tags, args.seed)
    os.makedirs(args.out, exist_ok=True)
    save_manifest(records, args.out)
    with open(os.path.join(args.out, "plant_map.json"), "w") as f:
        json.dump(plant_map, f, indent=2, sort_keys=True)
    _write_run_manifest(args.out, args, [])
    return 0


def cmd_extract(args):
    records = load_manifest(args.manifest)
    os.makedirs(args.out, exist_ok=True)
    index = {"seed": args.seed, "n_max": args.nmax, "fonts": {}}
    for rec in records:
        dset = sift.extract_font_set(rec, seed=args.seed, n_max=args.nmax)
        name = f"{rec.font_id}.fsd"
        sift.save_cache(os.path.join(args.out, name), dset)
        index["fonts"][rec.font_id] = name
    with open(os.path.join(args.out, "index.json"), "w") as f:
        json.dump(index, f, indent=2, sort_keys=True)
    _write_run_manifest(args.out, args, [args.manifest])
    return 0


def cmd_vocab(args):
    records = load_manifest(args.manifest)
    vocab = build_vocab(records, args.min_count)
    os.makedirs(args.out, exist_ok=True)
    vocab.save(os.path.join(args.out, "vocab.json"))
    _write_run_manifest(args.out, args, [args.manifest])
    return 0


def cmd_split(args):
    records = load_manifest(args.manifest)
    split = split_fonts(records, (0.8, 0.1, 0.1), seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    split.save(os.path.join(args.out, "split.json"))
    _write_run_manifest(args.out, args, [args.manifest])
    return 0


def cmd_train_cls(args):
    records = load_manifest(args.manifest)
    vocab = TagVocab.load(args.vocab)
    pairs = _load_pairs(records, args)
    train_pairs = _partition_pairs(pairs, args, "train")
    val_pairs = _partition_pairs(pairs, args, "val") or train_pairs
    config = classifier.ClassifierConfig(K=vocab.K, n_max=args.nmax,
                                         steps=args.steps)
    model, best, log = classifier.train_classifier(
        train_pairs, vocab, config, args.seed, val_pairs=val_pairs)
    os.makedirs(args.out, exist_ok=True)
    classifier.save_classifier(os.path.join(args.out, "classifier.ckpt"),
                               config, best)
    with open(os.path.join(args.out, "training_log.json"), "w") as f:
        json.dump({"losses": log.losses, "val_f1": log.val_f1,
                   "best_step": log.best_step, "best_f1": log.best_f1}, f)
    model.load_state_dict(best)
    entries = [(r.font_id, classifier.classifier_forward(model, d))
               for r, d in val_pairs]
    classifier.dump_predictions(os.path.join(args.out, "predictions.jsonl"),
                                entries, vocab)
    _write_run_manifest(args.out, args, [args.manifest, args.vocab])
    return 0


def cmd_train_tr(args):
    records = load_manifest(args.manifest)
    vocab = TagVocab.load(args.vocab)
    pairs = _load_pairs(records, args)
    train_pairs = _partition_pairs(pairs, args, "train")
    val_pairs = _partition_pairs(pairs, args, "val") or train_pairs
    config = translator.TranslatorConfig(K=vocab.K, n_max=args.nmax,
                                         steps=args.steps, beam=args.beam,
                                         max_len=args.max_len)
    model, best, log = translator.train_translator(
        train_pairs, vocab, config, args.seed, val_pairs=val_pairs)
    os.makedirs(args.out, exist_ok=True)
    translator.save_translator(os.path.join(args.out, "translator.ckpt"),
                               config, best)
    with open(os.path.join(args.out, "training_log.json"), "w") as f:
        json.dump({"losses": log.losses, "val_loss": log.val_loss,
                   "best_step": log.best_step, "best_loss": log.best_loss}, f)
    model.load_state_dict(best)
    entries = []
    for rec, dset in val_pairs:
        latents, mask = translator.encode(model, dset)
        entries.append((rec.font_id,
                        translator.beam_search(model, config, latents, mask)))
    translator.dump_translations(
        os.path.join(args.out, "translations.jsonl"), entries, vocab)
    _write_run_manifest(args.out, args, [args.manifest, args.vocab])
    return 0


def cmd_eval(args):
    records = load_manifest(args.manifest)
    vocab = TagVocab.load(args.vocab)
    config_dict, _ = load_checkpoint(args.checkpoint)
    kind = config_dict.get("kind")
    if kind == "translator" and args.metric == "map":
        print("error: mAP requires per-tag likelihoods; the translator emits "
              "sequences only", file=sys.stderr)
        return EXIT_DATA
    pairs = _partition_pairs(_load_pairs(records, args), args, args.partition)
    os.makedirs(args.out, exist_ok=True)
    table = metrics.PredictionTable()
    if kind == "classifier":
        model, config = classifier.load_classifier(args.checkpoint)
        entries = []
        for rec, dset in pairs:
            probs = classifier.classifier_forward(model, dset).data
            truth = {vocab.id_of(t) for t in rec.tags if t in
                     {tag for tag, _ in vocab.entries}}
            table.add(rec.font_id, truth,
                      classifier.predict_labels(probs, args.threshold),
                      np.clip(probs, 0.0, 1.0))
            entries.append((rec.font_id, probs))
        classifier.dump_predictions(
            os.path.join(args.out, "predictions.jsonl"), entries, vocab)
    elif kind == "translator":
        model, config = translator.load_translator(args.checkpoint)
        entries = []
        for rec, dset in pairs:
            latents, mask = translator.encode(model, dset)
            result = translator.beam_search(model, config, latents, mask,
                                            width=args.beam)
            truth = {vocab.id_of(t) for t in rec.tags if t in
                     {tag for tag, _ in vocab.entries}}
            table.add(rec.font_id, truth, set(result.tokens))
            entries.append((rec.font_id, result))
        translator.dump_translations(
            os.path.join(args.out, "translations.jsonl"), entries, vocab)
    else:
        print(f"error: unknown checkpoint kind {kind!r}", file=sys.stderr)
        return EXIT_DATA
    metrics.write_metrics_report(os.path.join(args.out, "metrics.csv"),
                                 table, vocab, split=args.partition)
    metrics.write_per_tag_report(os.path.join(args.out, "per_tag.csv"),
                                 table, vocab, split=args.partition)
    _write_run_manifest(args.out, args,
                        [args.manifest, args.vocab, args.checkpoint])
    return 0


def cmd_occlude(args):
    records = load_manifest(args.manifest)
    vocab = TagVocab.load(args.vocab)
    model, _ = classifier.load_classifier(args.checkpoint)
    pairs = _partition_pairs(_load_pairs(records, args), args, args.partition)
    all_desc = np.concatenate([d.real_values() for _, d in pairs])
    book = attribution.kmeans(all_desc, args.q, seed=args.seed)
    matrix = attribution.occlusion_matrix(model, pairs, book, vocab)
    vectors = []
    for k in range(vocab.K):
        if matrix[1][k] > 0:
            vectors.append(attribution.occlusion_sensitivity(
                model, pairs, book, vocab, k, matrix))
    os.makedirs(args.out, exist_ok=True)
    attribution.write_sensitivity_report(
        os.path.join(args.out, "sensitivity.csv"), vectors)
    np.savez(os.path.join(args.out, "codebook.npz"),
             centroids=book.centroids, seed=book.seed,
             n_points=book.n_points)
    _write_run_manifest(args.out, args,
                        [args.manifest, args.vocab, args.checkpoint])
    return 0


def cmd_ig(args):
    records = load_manifest(args.manifest)
    vocab = TagVocab.load(args.vocab)
    config_dict, _ = load_checkpoint(args.checkpoint)
    kind = config_dict.get("kind")
    pairs = _partition_pairs(_load_pairs(records, args), args, args.partition)
    if args.fonts:
        pairs = pairs[:args.fonts]
    maps = []
    if kind == "translator":
        model, config = translator.load_translator(args.checkpoint)
        for rec, dset in pairs:
            latents, mask = translator.encode(model, dset)
            result = translator.beam_search(model, config, latents, mask)
            prefix = [config.bos]
            for pos, token in enumerate(result.tokens + [config.eos]):
                forward = attribution.translator_logit_target(
                    model, config, prefix, token)
                maps.append(attribution.integrated_gradients(
                    forward, dset, args.ig_steps,
                    target=("token", token, pos)))
                prefix = prefix + [token]
    elif kind == "classifier":
        model, config = classifier.load_classifier(args.checkpoint)
        for rec, dset in pairs:
            for tag in sorted(rec.tags):
                k = vocab.id_of(tag)
                forward = attribution.classifier_logit_target(model, k)
                maps.append(attribution.integrated_gradients(
                    forward, dset, args.ig_steps, target=("tag", k)))
    else:
        print(f"error: unknown checkpoint kind {kind!r}", file=sys.stderr)
        return EXIT_DATA
    os.makedirs(args.out, exist_ok=True)
    attribution.write_attribution_report(
        os.path.join(args.out, "attributions.jsonl"), maps)
    _write_run_manifest(args.out, args,
                        [args.manifest, args.vocab, args.checkpoint])
    return 0


def cmd_overlay(args):
    records = {r.font_id: r for r in load_manifest(args.manifest)}
    if args.font not in records:
        print(f"error: unknown font id {args.font!r}", file=sys.stderr)
        return EXIT_DATA
    record = records[args.font]
    dset = sift.load_cache(os.path.join(args.cache, f"{args.font}.fsd"),
                           font_id=args.font, n_max=args.nmax)
    os.makedirs(args.out, exist_ok=True)
    circles_by_letter = {}
    if args.attribution:
        per_descriptor = None
        with open(args.attribution) as f:
            for line in f:
                row = json.loads(line)
                if row["font_id"] == args.font:
                    values = np.asarray(row["attributions"], dtype=np.float64)
                    per_descriptor = (values if per_descriptor is None
                                      else per_descriptor + values)
        if per_descriptor is None:
            print(f"error: no attributions for font {args.font!r}",
                  file=sys.stderr)
            return EXIT_DATA
        for letter in record.glyphs:
            circles_by_letter[letter] = overlay.ig_circles(
                dset.keypoints, per_descriptor, letter)
        prefix = "ig"
    elif args.sensitivity:
        book_data = np.load(args.codebook)
        book = attribution.Codebook(book_data["centroids"],
                                    int(book_data["n_points"]),
                                    int(book_data["seed"]))
        vocab = TagVocab.load(args.vocab)
        k = vocab.id_of(args.tag)
        centered = np.zeros(book.Q)
        with open(args.sensitivity) as f:
            for row in csv.DictReader(f):
                if int(row["impression"]) == k:
                    centered[int(row["q"])] = float(row["centered"])
        important = set(np.argsort(-centered)[:args.top].tolist())
        labels = attribution.assign(dset.real_values(), book)
        for letter in record.glyphs:
            circles_by_letter[letter] = overlay.occlusion_circles(
                dset.keypoints, labels, important, letter)
        prefix = "occlusion"
    else:
        print("error: provide --attribution or --sensitivity",
              file=sys.stderr)
        return EXIT_USAGE
    overlay.write_font_overlays(args.out, record, circles_by_letter, prefix)
    _write_run_manifest(args.out, args, [args.manifest])
    return 0


# ---- argument parsing ----

def _add_common(p, manifest=True, out=True):
    if manifest:
        p.add_argument("--manifest", required=True)
    if out:
        p.add_argument("-o", "--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strict", action="store_true",
                   help="bit-deterministic mode (single-threaded)")
    p.add_argument("--nmax", type=int, default=sift.N_MAX)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fontimpress",
        description="Part-based font shape-to-impression pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    _add_common(p, manifest=False)
    p.add_argument("--fonts", type=int, default=16)
    p.add_argument("--tags", type=int, default=12)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="cache SIFT descriptor sets")
    _add_common(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("vocab", help="build the impression vocabulary")
    _add_common(p)
    p.add_argument("--min-count", type=int, default=1)
    p.set_defaults(func=cmd_vocab)

    p = sub.add_parser("split", help="font-disjoint train/val/test split")
    _add_common(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train-cls", help="train the set-transformer classifier")
    _add_common(p)
    p.add_argument("--vocab", required=True)
    p.add_argument("--split")
    p.add_argument("--cache")
    p.add_argument("--steps", type=int, default=2000)
    p.set_defaults(func=cmd_train_cls)

    p = sub.add_parser("train-tr", help="train the shape-to-impression translator")
    _add_common(p)
    p.add_argument("--vocab", required=True)
    p.add_argument("--split")
    p.add_argument("--cache")
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int, default=40)
    p.set_defaults(func=cmd_train_tr)

    p = sub.add_parser("eval", help="metrics and prediction dumps")
    _add_common(p)
    p.add_argument("--vocab", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split")
    p.add_argument("--cache")
    p.add_argument("--partition", default="test",
                   choices=("train", "val", "test"))
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--metric", choices=("f1", "map"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("occlude", help="visual-word occlusion sensitivity")
    _add_common(p)
    p.add_argument("--vocab", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split")
    p.add_argument("--cache")
    p.add_argument("--partition", default="test",
                   choices=("train", "val", "test"))
    p.add_argument("--q", type=int, default=64)
    p.set_defaults(func=cmd_occlude)

    p = sub.add_parser("ig", help="integrated-gradients attributions")
    _add_common(p)
    p.add_argument("--vocab", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split")
    p.add_argument("--cache")
    p.add_argument("--partition", default="test",
                   choices=("train", "val", "test"))
    p.add_argument("--ig-steps", type=int, default=64)
    p.add_argument("--fonts", type=int, default=0,
                   help="limit to the first N fonts (0 = all)")
    p.set_defaults(func=cmd_ig)

    p = sub.add_parser("overlay", help="SVG keypoint-importance overlays")
    _add_common(p)
    p.add_argument("--cache", required=True)
    p.add_argument("--font", required=True)
    p.add_argument("--attribution", help="attributions.jsonl from `ig`")
    p.add_argument("--sensitivity", help="sensitivity.csv from `occlude`")
    p.add_argument("--codebook", help="codebook.npz from `occlude`")
    p.add_argument("--vocab")
    p.add_argument("--tag", help="impression tag for occlusion mode")
    p.add_argument("--top", type=int, default=3)
    p.set_defaults(func=cmd_overlay)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0,) else 0
    try:
        return args.func(args)
    except NUMERIC_ERRORS as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FontImpressError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
