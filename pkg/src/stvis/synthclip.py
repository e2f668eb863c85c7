"""Procedural video clips of moving shapes with exact masks, boxes and track ids."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .losses import GroundTruth
from .tensorio import FormatError, load_tensor, read_pgm, save_tensor, write_pgm

SCENARIOS = ("plain", "fast-motion", "occlusion", "same-class-pair")
CLASS_NAMES = ("circle", "square", "triangle")
CLASS_COLORS = np.array([[0.9, 0.25, 0.2], [0.2, 0.8, 0.3], [0.25, 0.35, 0.95]])

# speed range in px/frame and per-frame relative scale change
_MOTION = {
    "plain": ((0.5, 2.0), 0.03),
    "fast-motion": ((3.0, 5.0), 0.15),
    "occlusion": ((1.0, 3.0), 0.03),
    "same-class-pair": ((0.5, 2.0), 0.03),
}


@dataclass
class InstanceTrack:
    class_id: int
    color: np.ndarray     # [3]
    centers: np.ndarray   # [T, 2] pixel (x, y)
    scales: np.ndarray    # [T] radius in pixels
    visible: np.ndarray   # [T] bool
    masks: np.ndarray     # [T, H, W] bool, after occlusion
    boxes: np.ndarray     # [T, 4] normalized (cx, cy, w, h); zeros when not visible


@dataclass
class SynthClip:
    frames: np.ndarray    # [T, 3, H, W] in [0, 1]
    tracks: list[InstanceTrack]
    seed: int
    scenario: str
    max_displacement: float

    @property
    def shape(self) -> tuple[int, int, int]:
        t, _, h, w = self.frames.shape
        return t, h, w


def shape_mask(class_id: int, center, radius: float, height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width] + 0.5
    dx = xs - center[0]
    dy = ys - center[1]
    if class_id == 0:
        return dx * dx + dy * dy <= radius * radius
    if class_id == 1:
        half = 0.85 * radius
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    return (dy >= -radius) & (dy <= radius) & (np.abs(dx) <= (dy + radius) / 2)


def tight_box(mask: np.ndarray) -> np.ndarray:
    """Normalized (cx, cy, w, h) of the pixel extent of ``mask``; zeros if empty."""
    height, width = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return np.zeros(4)
    x0, x1 = cols[0], cols[-1] + 1
    y0, y1 = rows[0], rows[-1] + 1
    return np.array([(x0 + x1) / 2 / width, (y0 + y1) / 2 / height, (x1 - x0) / width, (y1 - y0) / height])


def _trajectory(rng, n_frames, height, width, radii, speed, anchor=None, anchor_frame=0):
    """Centers [T, 2] keeping a shape of the given per-frame radii inside the canvas."""
    for _ in range(200):
        angle = rng.uniform(0, 2 * np.pi)
        vel = rng.uniform(*speed) * np.array([np.cos(angle), np.sin(angle)])
        steps = (np.arange(n_frames) - anchor_frame)[:, None] * vel
        if anchor is None:
            lo = np.max(radii[:, None] - steps, axis=0)
            hi = np.min(np.array([width, height])[None] - radii[:, None] - steps, axis=0)
            if np.any(lo > hi):
                continue
            start = rng.uniform(lo, hi)
        else:
            start = np.asarray(anchor, dtype=np.float64)
        centers = start[None] + steps
        inside = ((centers - radii[:, None] >= 0).all()
                  and (centers[:, 0] + radii <= width).all() and (centers[:, 1] + radii <= height).all())
        if inside:
            return centers
    return None


def generate_clip(seed: int, scenario: str = "plain", n_frames: int = 3, height: int = 32, width: int = 32,
                  n_instances: int = 2, max_displacement: float | None = None) -> SynthClip:
    """Deterministic clip for ``seed``; instance 0 is frontmost."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    if n_instances < 1:
        raise ValueError(f"n_instances must be >= 1, got {n_instances}")
    if scenario in ("occlusion", "same-class-pair") and n_instances < 2:
        raise ValueError(f"scenario {scenario!r} needs at least 2 instances")
    if n_frames < 1:
        raise ValueError(f"n_frames must be >= 1, got {n_frames}")
    speed, scale_rate = _MOTION[scenario]
    if max_displacement is None:
        max_displacement = speed[1]
    speed = (min(speed[0], max_displacement), min(speed[1], max_displacement))

    side = min(height, width)
    base_lo, base_hi = 0.15 * side, 0.22 * side
    growth_max = (1 + scale_rate) ** (n_frames - 1)
    if base_lo < 2.0 or 2 * base_hi * growth_max + 2 > side:
        raise ValueError(f"canvas {height}x{width} too small for {n_frames}-frame shapes")

    rng = np.random.default_rng(seed)
    classes = rng.integers(0, len(CLASS_NAMES), size=n_instances)
    if scenario == "same-class-pair":
        classes[1] = classes[0]
    colors = CLASS_COLORS[classes] * rng.uniform(0.85, 1.0, size=(n_instances, 1))
    if scenario == "same-class-pair":
        colors[1] = colors[0]

    radii = []
    for _ in range(n_instances):
        base = rng.uniform(base_lo, base_hi)
        rate = rng.uniform(-scale_rate, scale_rate)
        radii.append(base * (1 + rate) ** np.arange(n_frames))
    radii = np.array(radii)

    centers = []
    meet_frame = n_frames // 2
    for i in range(n_instances):
        if scenario == "occlusion" and i == 1:
            # rear instance passes behind the front one at the meeting frame
            gap = 0.5 * (radii[0, meet_frame] + radii[1, meet_frame])
            traj = None
            for _ in range(50):
                angle = rng.uniform(0, 2 * np.pi)
                anchor = centers[0][meet_frame] + gap * np.array([np.cos(angle), np.sin(angle)])
                traj = _trajectory(rng, n_frames, height, width, radii[i], speed, anchor, meet_frame)
                if traj is not None:
                    break
        else:
            # outside the occlusion scenario, prefer placements that keep shapes apart
            for _ in range(50):
                traj = _trajectory(rng, n_frames, height, width, radii[i], speed)
                if traj is None or all(
                    np.linalg.norm(traj - centers[j], axis=1).min() > 1.2 * (radii[i] + radii[j]).max()
                    for j in range(i)
                ):
                    break
        if traj is None:
            raise ValueError(f"canvas {height}x{width} too small to place instance {i} for seed {seed}")
        centers.append(traj)

    frames = 0.1 + 0.05 * rng.random((n_frames, 3, height, width))
    raw = np.array([[shape_mask(classes[i], centers[i][t], radii[i, t], height, width)
                     for t in range(n_frames)] for i in range(n_instances)])
    tracks = []
    occupied = np.zeros((n_frames, height, width), dtype=bool)
    for i in range(n_instances):
        masks = raw[i] & ~occupied
        occupied |= raw[i]
        tracks.append(InstanceTrack(
            class_id=int(classes[i]), color=colors[i], centers=centers[i], scales=radii[i],
            visible=masks.any(axis=(1, 2)), masks=masks,
            boxes=np.array([tight_box(m) for m in masks]),
        ))
    for track in reversed(tracks):
        for t in range(n_frames):
            frames[t][:, track.masks[t]] = track.color[:, None]
    return SynthClip(np.clip(frames, 0.0, 1.0), tracks, seed, scenario, float(max_displacement))


def downsample_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    """Average-pool then threshold at 0.5; a visible mask keeps at least its best cell."""
    h, w = mask.shape
    pooled = mask.reshape(h // stride, stride, w // stride, stride).mean(axis=(1, 3))
    out = pooled >= 0.5
    if mask.any() and not out.any():
        out.flat[np.argmax(pooled)] = True
    return out


def ground_truth(clip: SynthClip, stride: int = 4) -> GroundTruth:
    n_frames = clip.frames.shape[0]
    tracks = clip.tracks
    return GroundTruth(
        classes=np.array([tr.class_id for tr in tracks], dtype=np.int64),
        boxes=np.stack([tr.boxes for tr in tracks], axis=1) if tracks else np.zeros((n_frames, 0, 4)),
        masks=np.array([[downsample_mask(tr.masks[t], stride) for tr in tracks] for t in range(n_frames)],
                       dtype=np.float64),
        present=np.stack([tr.visible for tr in tracks], axis=1),
    )


# persistence


def clip_dir(root: str | os.PathLike, seed: int) -> Path:
    return Path(root) / f"clip_{seed}"


def save_clip(clip: SynthClip, root: str | os.PathLike) -> Path:
    """Write ``clip_<seed>/frames.taft``, ``anno.json`` and per-frame instance mask PGMs."""
    out = clip_dir(root, clip.seed)
    out.mkdir(parents=True, exist_ok=True)
    save_tensor(out / "frames.taft", clip.frames)
    n_frames = clip.frames.shape[0]
    anno = {
        "seed": clip.seed,
        "scenario": clip.scenario,
        "shape": list(clip.frames.shape),
        "max_displacement": clip.max_displacement,
        "instances": [],
    }
    for i, tr in enumerate(clip.tracks):
        files = []
        for t in range(n_frames):
            name = f"mask_t{t}_i{i}.pgm"
            write_pgm(out / name, tr.masks[t].astype(np.uint8) * 255)
            files.append(name)
        anno["instances"].append({
            "track_id": i,
            "class_id": tr.class_id,
            "class_name": CLASS_NAMES[tr.class_id],
            "color": tr.color.tolist(),
            "centers": tr.centers.tolist(),
            "scales": tr.scales.tolist(),
            "visible": tr.visible.tolist(),
            "boxes": tr.boxes.tolist(),
            "masks": files,
        })
    with open(out / "anno.json", "w") as fh:
        json.dump(anno, fh, indent=1)
    return out


def load_clip(path: str | os.PathLike) -> SynthClip:
    path = Path(path)
    frames = load_tensor(path / "frames.taft")
    try:
        with open(path / "anno.json") as fh:
            anno = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed anno.json at offset {exc.pos}: {exc.msg}") from exc
    if list(frames.shape) != anno["shape"]:
        raise FormatError(f"frames.taft shape {frames.shape} disagrees with anno.json {anno['shape']}")
    n_frames, _, height, width = frames.shape
    tracks = []
    for inst in anno["instances"]:
        masks = np.array([read_pgm(path / name) > 0 for name in inst["masks"]])
        if masks.shape != (n_frames, height, width):
            raise FormatError(f"instance {inst['track_id']} masks have shape {masks.shape}")
        tracks.append(InstanceTrack(
            class_id=int(inst["class_id"]), color=np.array(inst["color"]),
            centers=np.array(inst["centers"]), scales=np.array(inst["scales"]),
            visible=np.array(inst["visible"], dtype=bool), masks=masks, boxes=np.array(inst["boxes"]),
        ))
    return SynthClip(frames, tracks, int(anno["seed"]), anno["scenario"], float(anno["max_displacement"]))
