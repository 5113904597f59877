import json
import os

import pytest

from fontimpress.cli import main


def run(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """A tiny corpus pushed through synth/extract/vocab plus short trainings."""
    root = tmp_path_factory.mktemp("cli")
    corpus = str(root / "corpus")
    cache = str(root / "cache")
    art = str(root / "art")
    assert run("synth", "--fonts", "4", "--tags", "6", "--seed", "3",
               "-o", corpus) == 0
    manifest = os.path.join(corpus, "manifest.json")
    assert run("extract", "--manifest", manifest, "--seed", "3",
               "-o", cache) == 0
    assert run("vocab", "--manifest", manifest, "--min-count", "1",
               "-o", art) == 0
    vocab = os.path.join(art, "vocab.json")
    cls_dir = str(root / "cls")
    assert run("train-cls", "--manifest", manifest, "--vocab", vocab,
               "--cache", cache, "--seed", "3", "--steps", "3",
               "-o", cls_dir) == 0
    tr_dir = str(root / "tr")
    assert run("train-tr", "--manifest", manifest, "--vocab", vocab,
               "--cache", cache, "--seed", "3", "--steps", "3",
               "--max-len", "8", "-o", tr_dir) == 0
    return {"root": root, "manifest": manifest, "cache": cache,
            "vocab": vocab,
            "cls": os.path.join(cls_dir, "classifier.ckpt"),
            "tr": os.path.join(tr_dir, "translator.ckpt")}


def test_no_arguments_is_usage_error(capsys):
    assert run() == 2


def test_unknown_subcommand_is_usage_error():
    assert run("frobnicate") == 2


def test_synth_rerun_byte_identical(tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    for out in (a, b):
        assert run("synth", "--fonts", "4", "--tags", "6", "--seed", "9",
                   "-o", out) == 0
    for name in sorted(os.listdir(a)):
        if name == "run_manifest.json":
            continue  # records the differing output paths
        pa, pb = os.path.join(a, name), os.path.join(b, name)
        if os.path.isdir(pa):
            for inner in sorted(os.listdir(pa)):
                with open(os.path.join(pa, inner), "rb") as fa, \
                        open(os.path.join(pb, inner), "rb") as fb:
                    assert fa.read() == fb.read(), inner
        else:
            with open(pa, "rb") as fa, open(pb, "rb") as fb:
                assert fa.read() == fb.read(), name


def test_run_manifest_written(pipeline):
    path = os.path.join(os.path.dirname(pipeline["cls"]),
                        "run_manifest.json")
    manifest = json.loads(open(path).read())
    assert manifest["subcommand"] == "train-cls"
    assert manifest["seed"] == 3
    assert pipeline["manifest"] in manifest["input_hashes"]


def test_eval_classifier_writes_reports(pipeline, tmp_path):
    out = str(tmp_path / "eval")
    assert run("eval", "--manifest", pipeline["manifest"],
               "--vocab", pipeline["vocab"], "--checkpoint", pipeline["cls"],
               "--cache", pipeline["cache"], "--seed", "3", "-o", out) == 0
    assert os.path.exists(os.path.join(out, "metrics.csv"))
    assert os.path.exists(os.path.join(out, "predictions.jsonl"))


def test_eval_translator_map_is_data_error(pipeline, tmp_path):
    out = str(tmp_path / "eval")
    assert run("eval", "--manifest", pipeline["manifest"],
               "--vocab", pipeline["vocab"], "--checkpoint", pipeline["tr"],
               "--cache", pipeline["cache"], "--seed", "3",
               "--metric", "map", "-o", out) == 3


def test_missing_manifest_is_data_error(pipeline, tmp_path):
    assert run("vocab", "--manifest", str(tmp_path / "nope.json"),
               "-o", str(tmp_path)) == 3


def test_occlude_ig_overlay_round_trip(pipeline, tmp_path):
    occ = str(tmp_path / "occ")
    assert run("occlude", "--manifest", pipeline["manifest"],
               "--vocab", pipeline["vocab"], "--checkpoint", pipeline["cls"],
               "--cache", pipeline["cache"], "--seed", "3", "--q", "8",
               "-o", occ) == 0
    assert os.path.exists(os.path.join(occ, "sensitivity.csv"))

    ig = str(tmp_path / "ig")
    assert run("ig", "--manifest", pipeline["manifest"],
               "--vocab", pipeline["vocab"], "--checkpoint", pipeline["tr"],
               "--cache", pipeline["cache"], "--seed", "3",
               "--ig-steps", "4", "--fonts", "1", "-o", ig) == 0
    attributions = os.path.join(ig, "attributions.jsonl")
    assert os.path.exists(attributions)

    ov = str(tmp_path / "ov")
    assert run("overlay", "--manifest", pipeline["manifest"],
               "--cache", pipeline["cache"], "--font", "synth-0000",
               "--attribution", attributions, "--seed", "3", "-o", ov) == 0
    svgs = [p for p in os.listdir(ov) if p.endswith(".svg")]
    assert len(svgs) == 6
    text = open(os.path.join(ov, svgs[0])).read()
    assert text.startswith("<svg") and "image" in text


def test_overlay_unknown_font_is_data_error(pipeline, tmp_path):
    assert run("overlay", "--manifest", pipeline["manifest"],
               "--cache", pipeline["cache"], "--font", "nope",
               "--attribution", "whatever.jsonl", "--seed", "3",
               "-o", str(tmp_path)) == 3
