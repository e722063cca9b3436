import json
import struct

import numpy as np
import pytest

from hypermap import cli
from hypermap.checkpoint import load_checkpoint
from hypermap.data import read_pgm_array, write_pgm


def run(*argv):
    try:
        return cli.main([str(a) for a in argv])
    except SystemExit as e:  # argparse usage errors
        return e.code


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    data, model = root / "data", root / "model"
    assert run("synth", "--out", data, "--scenes", 4, "--size", 144, "--patch-size", 36, "--region-size", 36, "--seed", 1) == 0
    assert (
        run("train", "--out", model, "--manifest", data / "manifest.tsv", "--arch", "reduced", "--epochs", 2, "--batch-size", 32)
        == 0
    )
    return root


def test_synth_outputs(pipeline):
    data = pipeline / "data"
    assert sorted(p.name for p in (data / "scenes").iterdir()) == [f"scene_{k:02d}.pgm" for k in range(4)]
    assert len(list((data / "masks").iterdir())) == 4
    lines = (data / "manifest.tsv").read_text().splitlines()
    assert lines[0].startswith("# patch_size=36")
    assert len(lines) == 1 + 4 * 16
    run_txt = (data / "run.txt").read_text()
    assert "seed=1" in run_txt.splitlines() and "command=\"synth\"" in run_txt


def test_synth_rerun_identical(pipeline, tmp_path):
    assert run("synth", "--out", tmp_path, "--scenes", 4, "--size", 144, "--patch-size", 36, "--region-size", 36, "--seed", 1) == 0
    for rel in ("scenes/scene_00.pgm", "masks/mask_03.pgm", "manifest.tsv"):
        assert (tmp_path / rel).read_bytes() == (pipeline / "data" / rel).read_bytes()


def test_train_report_and_defaults(pipeline):
    model = pipeline / "model"
    report = (model / "report.txt").read_text().splitlines()
    assert report[0] == "epoch\tloss\tval_acc" and len(report) == 3
    record = dict(line.split("=", 1) for line in (model / "run.txt").read_text().splitlines())
    assert json.loads(record["lr"]) == 0.00273
    net = load_checkpoint(model / "checkpoint.hmap")
    assert net.spec.input_size == 36 and net.metadata["epochs_run"] == 2


def test_classify_scene_grids(pipeline, tmp_path):
    ckpt = pipeline / "model" / "checkpoint.hmap"
    scene = pipeline / "data" / "scenes" / "scene_00.pgm"
    assert run("classify-scene", "--out", tmp_path / "a", "--checkpoint", ckpt, "--scene", scene) == 0
    labels, _ = read_pgm_array(tmp_path / "a" / "labels.pgm")
    assert labels.shape == (9, 9)
    assert (tmp_path / "a" / "labels.png").exists()
    big = tmp_path / "big.pgm"
    write_pgm(np.zeros((1728, 1728), np.float32) + 0.4, big)
    assert run("classify-scene", "--out", tmp_path / "b", "--checkpoint", ckpt, "--scene", big, "--block", 144) == 0
    assert read_pgm_array(tmp_path / "b" / "labels.pgm")[0].shape == (12, 12)


def test_segment_full_resolution_and_reproducible(pipeline, tmp_path):
    ckpt = pipeline / "model" / "checkpoint.hmap"
    scene = pipeline / "data" / "scenes" / "scene_01.pgm"
    args = ["segment", "--checkpoint", ckpt, "--scene", scene, "--kmeans-iterations", 30]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    a = (tmp_path / "a" / "clusters.pgm").read_bytes()
    assert a == (tmp_path / "b" / "clusters.pgm").read_bytes()
    labels, _ = read_pgm_array(tmp_path / "a" / "clusters.pgm")
    assert labels.shape == (144, 144) and labels.max() < 4


def test_embed_table_and_montage(pipeline, tmp_path):
    ckpt = pipeline / "model" / "checkpoint.hmap"
    manifest = pipeline / "data" / "manifest.tsv"
    rc = run(
        "embed", "--out", tmp_path, "--checkpoint", ckpt, "--manifest", manifest,
        "--split", "train", "--n", 30, "--perplexity", 5, "--iterations", 260, "--canvas", 200,
    )
    assert rc == 0
    rows = (tmp_path / "embedding.csv").read_text().splitlines()
    assert rows[0] == "id,x,y,label" and len(rows) == 31
    montage, _ = read_pgm_array(tmp_path / "montage.pgm")
    assert montage.shape == (200, 200)


def test_activations_panels(pipeline, tmp_path):
    ckpt = pipeline / "model" / "checkpoint.hmap"
    scene = pipeline / "data" / "scenes" / "scene_02.pgm"
    args = ["activations", "--checkpoint", ckpt, "--patch", scene]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b", "--x", 0, "--y", 0, "--layer", "conv1,conv4") == 0
    panel, _ = read_pgm_array(tmp_path / "a" / "panel_00_scene_02.pgm")
    assert panel.shape == (36, 5 * 36 + 8)
    assert read_pgm_array(tmp_path / "b" / "panel_00_scene_02.pgm")[0].shape == (36, 3 * 36 + 4)
    assert run(*args, "--out", tmp_path / "c") == 0
    assert (tmp_path / "a" / "panel_00_scene_02.pgm").read_bytes() == (tmp_path / "c" / "panel_00_scene_02.pgm").read_bytes()


def test_config_file_precedence(pipeline, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 5, "synth": {"scenes": 2, "size": 72, "patch_size": 36, "ratios": [0.5, 0.5, 0.0]}}))
    assert run("synth", "--config", cfg, "--out", tmp_path / "o", "--size", 108, "--region-size", 36) == 0
    record = dict(line.split("=", 1) for line in (tmp_path / "o" / "run.txt").read_text().splitlines())
    assert json.loads(record["seed"]) == 5
    assert json.loads(record["scenes"]) == 2
    assert json.loads(record["size"]) == 108  # flag beats config
    cfg.write_text(json.dumps({"synth": {"bogus": 1}}))
    assert run("synth", "--config", cfg, "--out", tmp_path / "p") == 2


# -- exit codes ----------------------------------------------------------------


def test_bad_ratio_exit_2(tmp_path):
    assert run("synth", "--out", tmp_path, "--size", 72, "--patch-size", 36, "--ratios", "0.5,0.6,0.1") == 2
    assert run("synth", "--out", tmp_path, "--ratios", "a,b") == 2


def test_missing_manifest_exit_3(tmp_path):
    assert run("train", "--out", tmp_path, "--manifest", tmp_path / "nope.tsv") == 3


def test_segment_k1_exit_2(pipeline, tmp_path):
    ckpt = pipeline / "model" / "checkpoint.hmap"
    scene = pipeline / "data" / "scenes" / "scene_00.pgm"
    assert run("segment", "--out", tmp_path, "--checkpoint", ckpt, "--scene", scene, "--k", 1) == 2
    assert run("segment", "--out", tmp_path, "--checkpoint", ckpt, "--scene", scene, "--layers", "conv9") == 2


def test_embed_perplexity_too_large_exit_2(pipeline, tmp_path):
    rc = run(
        "embed", "--out", tmp_path, "--checkpoint", pipeline / "model" / "checkpoint.hmap",
        "--manifest", pipeline / "data" / "manifest.tsv", "--split", "train", "--n", 30, "--perplexity", 10,
    )
    assert rc == 2


def test_invalid_layer_exit_2(pipeline, tmp_path):
    rc = run(
        "activations", "--out", tmp_path, "--checkpoint", pipeline / "model" / "checkpoint.hmap",
        "--patch", pipeline / "data" / "scenes" / "scene_00.pgm", "--layer", "fcn1",
    )
    assert rc == 2


def test_wrong_checkpoint_version_exit_2(pipeline, tmp_path):
    buf = bytearray((pipeline / "model" / "checkpoint.hmap").read_bytes())
    buf[4:8] = struct.pack("<I", 2)
    bad = tmp_path / "v2.hmap"
    bad.write_bytes(bytes(buf))
    scene = pipeline / "data" / "scenes" / "scene_00.pgm"
    assert run("classify-scene", "--out", tmp_path / "o", "--checkpoint", bad, "--scene", scene) == 2


def test_missing_scene_exit_3(pipeline, tmp_path):
    ckpt = pipeline / "model" / "checkpoint.hmap"
    assert run("classify-scene", "--out", tmp_path, "--checkpoint", ckpt, "--scene", tmp_path / "none.pgm") == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_training_exit_4(pipeline, tmp_path):
    rc = run(
        "train", "--out", tmp_path, "--manifest", pipeline / "data" / "manifest.tsv",
        "--arch", "reduced", "--epochs", 1, "--lr", 1e30, "--init-std", 10,
    )
    assert rc == 4


def test_threads_flag(pipeline, tmp_path):
    ckpt = pipeline / "model" / "checkpoint.hmap"
    scene = pipeline / "data" / "scenes" / "scene_00.pgm"
    assert run("classify-scene", "--out", tmp_path, "--checkpoint", ckpt, "--scene", scene, "--threads", 1) == 0
    assert run("classify-scene", "--out", tmp_path, "--checkpoint", ckpt, "--scene", scene, "--threads", 0) == 2
