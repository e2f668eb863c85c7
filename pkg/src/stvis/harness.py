"""Training, evaluation, checkpoints, dumps and ablation sweeps."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tn
from .config import ConfigError, RunConfig, config_from_dict
from .encoder import attention_maps
from .losses import GroundTruth, hungarian_match, matching_cost, total_loss
from .metrics import MetricsReport, clip_metrics, summarize
from .model import VideoModel
from .optim import OptimizerState, adamw_step, clip_grad_norm
from .synthclip import SynthClip, generate_clip, ground_truth, load_clip
from .tensor import Tape
from .tensorio import load_tensor, save_tensor, to_greymap, write_pgm

log = logging.getLogger(__name__)


def build_model(cfg: RunConfig) -> VideoModel:
    return VideoModel(cfg.encoder, cfg.decoder, seed=cfg.seed, contrastive=cfg.contrastive_enabled)


def make_clips(cfg: RunConfig, offset: int = 0, count: int | None = None) -> list[SynthClip]:
    d = cfg.data
    count = d.n_clips if count is None else count
    return [generate_clip(cfg.seed + offset + i, d.scenario, d.n_frames, d.height, d.width, d.n_instances)
            for i in range(count)]


def load_clips(root: str | os.PathLike) -> list[SynthClip]:
    dirs = sorted((p for p in Path(root).iterdir() if p.is_dir() and p.name.startswith("clip_")),
                  key=lambda p: int(p.name.split("_", 1)[1]))
    if not dirs:
        raise ConfigError(f"no clip_<seed> directories under {root}")
    return [load_clip(p) for p in dirs]


# training


@dataclass
class TrainResult:
    model: VideoModel
    config: RunConfig
    log: list[dict]
    metrics: MetricsReport
    clips: list[SynthClip]


def _batch_loss(model, clips, gts, batch, weights):
    total = None
    reports = []
    for i in batch:
        loss, report = total_loss(model(clips[i].frames), gts[i], weights)
        total = loss if total is None else total + loss
        reports.append(report)
    return total * (1.0 / len(batch)), reports


def _log_entry(step, loss, reports, batch, wall):
    terms = {}
    for report in reports:
        for layer in report.layers:
            for key, value in layer.items():
                if key not in ("layer", "assignment"):
                    terms[key] = terms.get(key, 0.0) + value / len(reports)
    return {
        "step": step,
        "loss": loss,
        "terms": terms,
        "assignment": {str(i): r.layers[-1]["assignment"] for i, r in zip(batch, reports)},
        "wall_time": wall,
    }


def train(cfg: RunConfig, out_dir: str | os.PathLike | None = None,
          clips: list[SynthClip] | None = None) -> TrainResult:
    """AdamW on a fixed clip pool; writes loss log, metrics and checkpoint when ``out_dir`` is set."""
    cfg.validate()
    clips = make_clips(cfg) if clips is None else clips
    gts = [ground_truth(c) for c in clips]
    model = build_model(cfg)
    params = model.parameters()
    o = cfg.optim
    state = OptimizerState(lr=o.lr, betas=(o.beta1, o.beta2), weight_decay=o.weight_decay, eps=o.eps)
    per_step = min(cfg.data.clips_per_step, len(clips))

    entries = []
    start = time.perf_counter()
    for step in range(cfg.steps):
        batch = [(step * per_step + j) % len(clips) for j in range(per_step)]
        with Tape() as tape:
            loss, reports = _batch_loss(model, clips, gts, batch, cfg.loss)
        tape.backward(loss, params)
        grads = [p.grad for p in params]
        grad_norm = clip_grad_norm(grads, o.grad_clip)
        adamw_step(params, grads, state)
        entry = _log_entry(step, float(loss.data), reports, batch, time.perf_counter() - start)
        entry["grad_norm"] = grad_norm
        entries.append(entry)
        if step % 50 == 0:
            log.info("step %d loss %.4f", step, entry["loss"])

    metrics, final_reports = evaluate(model, clips, cfg)
    final = _log_entry(cfg.steps, metrics.final_loss, final_reports, range(len(clips)),
                       time.perf_counter() - start)
    final["final"] = True
    entries.append(final)
    metrics.losses = [e["loss"] for e in entries]
    result = TrainResult(model, cfg, entries, metrics, clips)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_loss_log(entries, out / "loss_log.jsonl")
        with open(out / "metrics.json", "w") as fh:
            json.dump(metrics.as_dict(), fh, indent=1)
        save_checkpoint(model, cfg, out / "checkpoint")
    return result


def write_loss_log(entries: list[dict], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for entry in entries:
            fh.write(json.dumps(entry) + "\n")


def strip_wall_time(entries: list[dict]) -> list[dict]:
    return [{k: v for k, v in e.items() if k != "wall_time"} for e in entries]


# evaluation


def evaluate(model: VideoModel, clips: list[SynthClip], cfg: RunConfig):
    """Forward-only metrics on ``clips``; returns the report and per-clip loss reports."""
    per_clip, reports, losses = [], [], []
    for clip in clips:
        gt = ground_truth(clip)
        preds = model(clip.frames)
        loss, report = total_loss(preds, gt, cfg.loss)
        per_clip.append(clip_metrics(preds.final, gt, report.matches[-1]))
        reports.append(report)
        losses.append(float(loss.data))
    return summarize(per_clip, float(np.mean(losses)) if losses else None), reports


PREDICTION_SCHEMA = {
    "type": "object",
    "required": ["clips"],
    "properties": {
        "clips": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["seed", "n_frames", "queries"],
                "properties": {
                    "seed": {"type": "integer"},
                    "n_frames": {"type": "integer", "minimum": 1},
                    "queries": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["slot", "class_probs", "boxes", "masks", "matched_instance"],
                            "properties": {
                                "slot": {"type": "integer", "minimum": 0},
                                "class_probs": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
                                "boxes": {
                                    "type": "array",
                                    "items": {"type": "array", "minItems": 4, "maxItems": 4,
                                              "items": {"type": "number", "minimum": 0, "maximum": 1}},
                                },
                                "masks": {"type": "array", "items": {"type": "string", "pattern": r"\.pgm$"}},
                                "matched_instance": {"type": ["integer", "null"]},
                            },
                        },
                    },
                },
            },
        },
    },
}


def write_predictions(model: VideoModel, clips: list[SynthClip], cfg: RunConfig,
                      out_dir: str | os.PathLike) -> dict:
    """JSON of per-query class probabilities and boxes; masks as PGMs referenced by relative path."""
    out = Path(out_dir)
    mask_dir = out / "masks"
    mask_dir.mkdir(parents=True, exist_ok=True)
    doc = {"clips": []}
    for clip in clips:
        preds = model(clip.frames).final
        gt = ground_truth(clip)
        labels = hungarian_match(matching_cost(preds, gt, cfg.loss)).slot_labels()
        probs = 1.0 / (1.0 + np.exp(-preds.class_logits.data))
        mask_prob = 1.0 / (1.0 + np.exp(-preds.mask_logits.data))
        n_frames, n_q = preds.boxes.shape[:2]
        entries = []
        for q in range(n_q):
            files = []
            for t in range(n_frames):
                name = f"masks/clip{clip.seed}_t{t}_q{q}.pgm"
                write_pgm(out / name, np.round(mask_prob[t, q] * 255).astype(np.uint8))
                files.append(name)
            entries.append({
                "slot": q,
                "class_probs": probs[q].tolist(),
                "boxes": preds.boxes.data[:, q].tolist(),
                "masks": files,
                "matched_instance": int(labels[q]) if labels[q] >= 0 else None,
            })
        doc["clips"].append({"seed": clip.seed, "n_frames": n_frames, "queries": entries})
    with open(out / "predictions.json", "w") as fh:
        json.dump(doc, fh, indent=1)
    return doc


# checkpoints


def save_checkpoint(model: VideoModel, cfg: RunConfig, directory: str | os.PathLike) -> Path:
    out = Path(directory)
    (out / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in model.named_parameters():
        fname = f"params/{name}.taft"
        save_tensor(out / fname, p.data)
        entries.append({"name": name, "shape": list(p.shape), "file": fname})
    with open(out / "manifest.json", "w") as fh:
        json.dump({"config": cfg.to_dict(), "parameters": entries}, fh, indent=1)
    return out


_MODEL_SECTIONS = ("encoder", "decoder")


def load_checkpoint(directory: str | os.PathLike, cfg: RunConfig | None = None) -> tuple[VideoModel, RunConfig]:
    """Rebuild the model from a checkpoint; parameter mismatches raise naming each offender."""
    directory = Path(directory)
    try:
        with open(directory / "manifest.json") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint manifest in {directory}: {exc.strerror}") from exc
    saved_cfg = config_from_dict(manifest["config"])
    if cfg is not None:
        diffs = [f"{sec}.{k}" for sec in _MODEL_SECTIONS
                 for k, v in dataclasses.asdict(getattr(cfg, sec)).items()
                 if dataclasses.asdict(getattr(saved_cfg, sec))[k] != v]
        if cfg.contrastive_enabled != saved_cfg.contrastive_enabled:
            diffs.append("loss.contrastive (on/off)")
        if diffs:
            raise ConfigError(f"checkpoint manifest does not match config: {', '.join(diffs)}")
    model = build_model(saved_cfg)
    own = dict(model.named_parameters())
    listed = {e["name"]: e for e in manifest["parameters"]}
    problems = [f"missing {n}" for n in sorted(set(own) - set(listed))]
    problems += [f"unexpected {n}" for n in sorted(set(listed) - set(own))]
    state = {}
    for name in sorted(set(own) & set(listed)):
        arr = load_tensor(directory / listed[name]["file"])
        if arr.shape != own[name].shape or list(arr.shape) != listed[name]["shape"]:
            problems.append(f"{name} shape {tuple(arr.shape)} != {own[name].shape}")
        state[name] = arr
    if problems:
        raise ConfigError("checkpoint parameter mismatch: " + "; ".join(problems))
    model.load_state_dict(state)
    return model, saved_cfg


# dumps


def dump_attention(model: VideoModel, clip: SynthClip, out_dir: str | os.PathLike) -> dict:
    """Per-frame PGMs of the channel-mean finest encoder level plus a JSON sidecar of raw ranges."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    maps = attention_maps(model.encode(clip.frames))
    frames = []
    for t, m in enumerate(maps):
        img, lo, hi = to_greymap(m)
        name = f"attn_t{t}.pgm"
        write_pgm(out / name, img)
        frames.append({"frame": t, "file": name, "min": lo, "max": hi})
    sidecar = {"seed": clip.seed, "shape": list(maps.shape[1:]), "frames": frames}
    with open(out / "attn.json", "w") as fh:
        json.dump(sidecar, fh, indent=1)
    return sidecar


def dump_embeddings(model: VideoModel, clip: SynthClip, cfg: RunConfig, out_dir: str | os.PathLike) -> dict:
    """Final-layer box queries labeled by the matched ground-truth instance (T*Q entries)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gt = ground_truth(clip)
    preds = model(clip.frames).final
    match = hungarian_match(matching_cost(preds, gt, cfg.loss))
    labels = match.slot_labels()
    queries = preds.box_queries.data
    entries = []
    for t in range(queries.shape[0]):
        for q in range(queries.shape[1]):
            inst = int(labels[q]) if labels[q] >= 0 else None
            entries.append({
                "frame": t, "slot": q, "instance": inst,
                "class_id": int(gt.classes[inst]) if inst is not None else None,
                "embedding": queries[t, q].tolist(),
            })
    doc = {"seed": clip.seed, "assignment": match.slots.tolist(), "entries": entries}
    with open(out / "embeddings.json", "w") as fh:
        json.dump(doc, fh)
    return doc


# ablations


def ablation_variants(cfg: RunConfig, axis: str) -> list[tuple[str, RunConfig]]:
    cl = cfg.loss.contrastive if cfg.loss.contrastive > 0 else 1.0
    if axis == "components":
        specs = [
            ("baseline", False, False, 0.0),
            ("baseline+st_enc", True, False, 0.0),
            ("baseline+st_enc+ta_dec", True, True, 0.0),
            ("baseline+st_enc+ta_dec+cl", True, True, cl),
        ]
        return [(name, cfg.replace(encoder={"temporal": enc}, decoder={"tsa": tsa}, loss={"contrastive": w}))
                for name, enc, tsa, w in specs]
    if axis == "k_inter":
        return [(f"k_inter={k}", cfg.replace(encoder={"k_inter": k, "temporal": True})) for k in (1, 2, 3, 4)]
    if axis == "fusion":
        return [(mode, cfg.replace(encoder={"fusion_mode": mode, "temporal": True}))
                for mode in ("add", "concat", "dynamic")]
    raise ConfigError(f"unknown ablation axis {axis!r}; expected components, k_inter or fusion")


ABLATION_FIELDS = ("axis", "variant", "final_loss", "mean_iou", "track_consistency", "separation",
                   "intra_similarity", "inter_similarity", "n_params")


def ablate(cfg: RunConfig, axis: str, out_path: str | os.PathLike | None = None) -> list[dict]:
    """Train every variant of ``axis`` under the same seed and budget; optional CSV output."""
    variants = ablation_variants(cfg, axis)
    rows = []
    for name, variant in variants:
        result = train(variant)
        m = result.metrics
        rows.append({
            "axis": axis, "variant": name, "final_loss": m.final_loss, "mean_iou": m.mean_iou,
            "track_consistency": m.track_consistency, "separation": m.separation,
            "intra_similarity": m.intra_similarity, "inter_similarity": m.inter_similarity,
            "n_params": sum(p.size for p in result.model.parameters()),
        })
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
            writer.writeheader()
            writer.writerows(rows)
    return rows
