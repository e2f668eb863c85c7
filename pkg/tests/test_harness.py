import json

import jsonschema
import numpy as np
import pytest

from stvis import harness
from stvis.cli import main
from stvis.config import ConfigError, RunConfig
from stvis.synthclip import generate_clip, save_clip


def tiny(steps=3, **sections):
    cfg = RunConfig(steps=steps).replace(
        encoder={"hidden_dim": 16, "ffn_dim": 32},
        decoder={"n_queries": 4, "ffn_dim": 32, "mask_dim": 8},
        data={"n_clips": 2, "height": 16, "width": 16, "clips_per_step": 2},
    )
    return cfg.replace(**sections) if sections else cfg


def write_config(path, cfg):
    path.write_text(json.dumps(cfg.to_dict()))
    return str(path)


def test_zero_steps_reports_initial_losses():
    result = harness.train(tiny(0))
    assert len(result.log) == 1 and result.log[0]["final"] and result.log[0]["step"] == 0
    assert result.metrics.losses == [result.metrics.final_loss]


def test_log_entries_carry_terms_assignment_and_time(tmp_path):
    result = harness.train(tiny(2), tmp_path)
    lines = (tmp_path / "loss_log.jsonl").read_text().splitlines()
    assert len(lines) == 3
    entry = json.loads(lines[0])
    assert set(entry) >= {"step", "loss", "terms", "assignment", "wall_time", "grad_norm"}
    assert set(entry["terms"]) == {"cls", "l1", "giou", "dice", "focal", "cl"}
    assert abs(sum(entry["terms"].values()) - entry["loss"]) < 1e-9
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert 0 <= metrics["mean_iou"] <= 1 and -1 <= metrics["intra_similarity"] <= 1
    assert all(np.isfinite(v) for v in metrics["losses"])
    assert result.metrics.n_clips == 2


def test_determinism_and_checkpoint_round_trip(tmp_path):
    a = harness.train(tiny(3), tmp_path / "a")
    b = harness.train(tiny(3), tmp_path / "b")
    assert harness.strip_wall_time(a.log) == harness.strip_wall_time(b.log)
    for name in ("decoder.query_embed", "encoder.layers.0.spatial.offset_proj.weight"):
        assert (tmp_path / "a/checkpoint/params" / f"{name}.taft").read_bytes() == \
            (tmp_path / "b/checkpoint/params" / f"{name}.taft").read_bytes()
    model, cfg = harness.load_checkpoint(tmp_path / "a/checkpoint")
    assert cfg == a.config
    reloaded, _ = harness.evaluate(model, a.clips, cfg)
    assert reloaded.as_dict() | {"losses": []} == a.metrics.as_dict() | {"losses": []}


def test_checkpoint_mismatch_lists_parameters(tmp_path):
    harness.train(tiny(0), tmp_path)
    with pytest.raises(ConfigError, match="encoder.k_inter"):
        harness.load_checkpoint(tmp_path / "checkpoint", tiny(0, encoder={"k_inter": 3}))
    manifest = json.loads((tmp_path / "checkpoint/manifest.json").read_text())
    manifest["parameters"][0]["shape"] = [1]
    manifest["parameters"].append({"name": "extra.weight", "shape": [1], "file": "params/x.taft"})
    (tmp_path / "checkpoint/manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ConfigError, match="unexpected extra.weight") as exc:
        harness.load_checkpoint(tmp_path / "checkpoint")
    assert manifest["parameters"][0]["name"] in str(exc.value)


def test_predictions_dump_validates(tmp_path):
    result = harness.train(tiny(0))
    doc = harness.write_predictions(result.model, result.clips, result.config, tmp_path)
    jsonschema.validate(doc, harness.PREDICTION_SCHEMA)
    first = doc["clips"][0]["queries"][0]
    assert (tmp_path / first["masks"][0]).exists()
    assert sum(q["matched_instance"] is not None for q in doc["clips"][0]["queries"]) == 2


def test_dumps_shapes_and_labels(tmp_path):
    result = harness.train(tiny(0))
    clip = result.clips[0]
    side = harness.dump_attention(result.model, clip, tmp_path)
    from stvis.tensorio import read_pgm
    assert read_pgm(tmp_path / "attn_t0.pgm").shape == (4, 4) and side["shape"] == [4, 4]
    assert len(side["frames"]) == 3 and side["frames"][0]["min"] <= side["frames"][0]["max"]
    doc = harness.dump_embeddings(result.model, clip, result.config, tmp_path)
    assert len(doc["entries"]) == 3 * 4
    _, reports = harness.evaluate(result.model, [clip], result.config)
    assert doc["assignment"] == reports[0].layers[-1]["assignment"]
    for e in doc["entries"]:
        if e["instance"] is not None:
            assert doc["assignment"][e["instance"]] == e["slot"]


def test_ablation_row_structure():
    variants = {axis: [n for n, _ in harness.ablation_variants(tiny(0), axis)]
                for axis in ("components", "k_inter", "fusion")}
    assert len(variants["components"]) == 4
    assert variants["k_inter"] == ["k_inter=1", "k_inter=2", "k_inter=3", "k_inter=4"]
    assert variants["fusion"] == ["add", "concat", "dynamic"]
    base = harness.ablation_variants(tiny(0), "components")[0][1]
    assert not base.encoder.temporal and not base.decoder.tsa and not base.contrastive_enabled
    with pytest.raises(ConfigError):
        harness.ablation_variants(tiny(0), "depth")


def test_cli_end_to_end(tmp_path, capsys):
    cfg_path = write_config(tmp_path / "cfg.json", tiny(1))
    out = tmp_path / "run"
    assert main(["--config", cfg_path, "--out", str(out), "train"]) == 0
    assert main(["--config", cfg_path, "--out", str(tmp_path / "ev"), "eval", "--checkpoint", str(out / "checkpoint")]) == 0
    assert (tmp_path / "ev/predictions.json").exists()
    assert main(["--out", str(tmp_path / "dump"), "dump", "--checkpoint", str(out / "checkpoint")]) == 0
    assert len(json.loads((tmp_path / "dump/embeddings.json").read_text())["entries"]) == 12
    assert main(["--config", cfg_path, "--out", str(tmp_path / "clips"), "synth", "--count", "2",
                 "--scenario", "occlusion"]) == 0
    assert (tmp_path / "clips/clip_0/anno.json").exists() and (tmp_path / "clips/clip_1/frames.taft").exists()
    assert main(["--config", cfg_path, "--out", str(tmp_path / "ev2"), "eval", "--checkpoint",
                 str(out / "checkpoint"), "--clips", str(tmp_path / "clips")]) == 0


def test_eval_of_training_clips_reproduces_training_iou(tmp_path):
    cfg = tiny(2)
    result = harness.train(cfg, tmp_path / "run")
    for clip in result.clips:
        save_clip(clip, tmp_path / "clips")
    cfg_path = write_config(tmp_path / "cfg.json", cfg)
    assert main(["--config", cfg_path, "--out", str(tmp_path / "ev"), "eval", "--checkpoint",
                 str(tmp_path / "run/checkpoint"), "--clips", str(tmp_path / "clips")]) == 0
    metrics = json.loads((tmp_path / "ev/metrics.json").read_text())
    assert metrics["mean_iou"] == result.metrics.mean_iou


def test_cli_validation_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"encoder": {"k_intr": 2}}))
    assert main(["--config", str(bad), "train"]) == 1
    assert "k_intr" in capsys.readouterr().err
    assert main(["--out", str(tmp_path), "eval", "--checkpoint", str(tmp_path / "missing")]) == 1
    assert main(["--out", str(tmp_path), "synth", "--count", "0"]) == 1
