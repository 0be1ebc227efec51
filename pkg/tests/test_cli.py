import json
import sys

import numpy as np
import pytest

from ovdet.cli import main
from ovdet.config import ExperimentConfig


@pytest.fixture(scope="module")
def tiny_config_file(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = ExperimentConfig()
    cfg.seed = 3
    cfg.data.n_train = 20
    cfg.data.n_test = 8
    cfg.pretrain.steps = 3
    cfg.pretrain.batch_size = 4
    cfg.detector.steps = 3
    cfg.detector.batch_size = 2
    cfg.detector.roi_batch = 32
    path = root / "config.json"
    cfg.save(path)
    return root, path


@pytest.fixture(scope="module")
def pipeline_artifacts(tiny_config_file):
    root, cfg_path = tiny_config_file
    data_dir = root / "data"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(data_dir)]) == 0
    pre = root / "pre.ovck"
    assert main(["pretrain", "--data", str(data_dir), "--config", str(cfg_path),
                 "--out", str(pre), "--quiet"]) == 0
    det = root / "det.ovck"
    assert main(["train", "--pretrained", str(pre), "--data", str(data_dir),
                 "--config", str(cfg_path), "--out", str(det), "--quiet"]) == 0
    return root, cfg_path, data_dir, pre, det


def test_gen_data_outputs(pipeline_artifacts):
    root, _, data_dir, _, _ = pipeline_artifacts
    assert (data_dir / "dataset.json").exists()
    assert (data_dir / "vocab.txt").exists()
    assert (data_dir / "manifest_train.jsonl").exists()
    assert (data_dir / "images_test.ovck").exists()
    meta = json.loads((data_dir / "dataset.json").read_text())
    assert len(meta["base"]) == 14 and len(meta["target"]) == 6


def test_pretrain_writes_log_and_checkpoint(pipeline_artifacts):
    root, _, _, pre, _ = pipeline_artifacts
    from ovdet.checkpoint import load_checkpoint

    ck = load_checkpoint(pre)
    assert {"backbone", "v2l", "mmt"} <= ck.namespaces()
    log = (root / "pre.ovck.log.csv").read_text().splitlines()
    assert log[0] == "step,grounding_image,grounding_caption,mlm,itm,total"
    assert len(log) >= 2


def test_detect_and_eval_and_dump(pipeline_artifacts):
    root, _, data_dir, _, det = pipeline_artifacts
    out = root / "detections.json"
    assert main(["detect", "--ckpt", str(det), "--classes", "all",
                 "--data", str(data_dir), "--out", str(out)]) == 0
    records = json.loads(out.read_text())
    for rec in records[:5]:
        assert {"image_id", "box", "class_name", "score"} <= set(rec)
    report = root / "report.json"
    assert main(["eval", "--ckpt", str(det), "--data", str(data_dir),
                 "--protocol", "generalized", "--out", str(report)]) == 0
    payload = json.loads(report.read_text())
    assert "all_map" in payload["summary"]
    assert (root / "report.csv").exists()
    dump = root / "emb.jsonl"
    assert main(["dump-embeddings", "--ckpt", str(det), "--data", str(data_dir),
                 "--out", str(dump)]) == 0
    lines = dump.read_text().splitlines()
    if lines:
        rec = json.loads(lines[0])
        assert len(rec["embedding"]) == ExperimentConfig().model.d_l


def test_detect_with_class_file(pipeline_artifacts, tmp_path):
    root, _, data_dir, _, det = pipeline_artifacts
    class_file = tmp_path / "classes.txt"
    class_file.write_text("red square\nviolet hexagon\n")  # unseen name still embeds
    out = tmp_path / "d.json"
    assert main(["detect", "--ckpt", str(det), "--classes", str(class_file),
                 "--data", str(data_dir), "--out", str(out)]) == 0
    names = {r["class_name"] for r in json.loads(out.read_text())}
    assert names <= {"red square", "violet hexagon"}


def test_train_without_pretraining_flag(pipeline_artifacts, tmp_path):
    root, cfg_path, data_dir, _, _ = pipeline_artifacts
    out = tmp_path / "scratch.ovck"
    assert main(["train", "--no-pretraining", "--data", str(data_dir),
                 "--config", str(cfg_path), "--out", str(out), "--quiet"]) == 0
    from ovdet.checkpoint import load_checkpoint

    assert load_checkpoint(out).metadata["pretrained"] is False


def test_structural_mismatch_refused_with_json_error(pipeline_artifacts, tmp_path, capsys):
    root, cfg_path, data_dir, pre, _ = pipeline_artifacts
    bad = ExperimentConfig.from_file(cfg_path)
    bad.model.d_l = 16
    bad_path = tmp_path / "bad.json"
    bad.save(bad_path)
    rc = main(["pretrain", "--data", str(data_dir), "--config", str(bad_path),
               "--out", str(tmp_path / "x.ovck"), "--quiet"])
    assert rc == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ValueError"
    assert "structural hash" in err["message"]


def test_missing_file_yields_structured_error(capsys, tmp_path):
    rc = main(["eval", "--ckpt", str(tmp_path / "missing.ovck"), "--data", str(tmp_path),
               "--protocol", "base", "--out", str(tmp_path / "r.json")])
    assert rc == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert "error" in err and "message" in err


def test_grad_check_subcommand():
    assert main(["grad-check", "--seeds", "1"]) == 0


def test_ablate_tiny_matrix(tiny_config_file):
    root, cfg_path = tiny_config_file
    out = root / "matrix"
    assert main(["ablate", "--config", str(cfg_path), "--out", str(out),
                 "--cells", "full", "no-pretraining", "--seeds", "3", "--quiet"]) == 0
    payload = json.loads((out / "matrix.json").read_text())
    assert set(payload["cells"]) == {"full", "no-pretraining"}
    rows = (out / "matrix.csv").read_text().splitlines()
    assert rows[0].startswith("cell,seed,base_map,target_map")
    assert len(rows) == 3  # header + 2 cells x 1 seed


def test_alpha_sweep_tiny(tiny_config_file):
    root, cfg_path = tiny_config_file
    out = root / "sweep"
    assert main(["alpha-sweep", "--config", str(cfg_path), "--out", str(out),
                 "--alphas", "0.0", "0.2", "1.0", "--quiet"]) == 0
    payload = json.loads((out / "alpha_sweep.json").read_text())
    assert [r["alpha"] for r in payload["rows"]] == [0.0, 0.2, 1.0]
    assert payload["best_alpha_by_target_map"] in (0.0, 0.2, 1.0)
    lines = (out / "alpha_sweep.csv").read_text().splitlines()
    assert lines[0] == "alpha,base_map,target_map,best"
    assert sum(1 for l in lines[1:] if l.endswith("yes")) == 1
