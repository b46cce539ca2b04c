"""Deterministic synthetic activity world: trimmed clips and untrimmed
multi-activity videos with exact joints, binary maps, and segments.

Six classes mirror a shopping scene. A two-arm blob figure moves its
wrists along class-specific templates: reach sweeps up to the shelf line,
retract sweeps back down, hand-in dwells at the shelf, inspect-product
holds mid-frame while an object blob circles the wrists, inspect-shelf
freezes just under the shelf, background drifts randomly. Object blobs
appear per class rule: always for inspect-product, never for
inspect-shelf/background, a coin flip for the rest.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import atomic_write_text
from .posegan import HeatmapSample, JointSet, NoiseConfig, gaussian_bumps, render_pose_image, synth_heatmap
from .streams import (CLASS_NAMES, FRAME_LIMIT, VideoSample, build_joint_map,
                      build_object_map, save_sample, subsample_sequence)
from .tensor import ContractError

BACKGROUND, REACH, RETRACT, HAND_IN, INSPECT_PRODUCT, INSPECT_SHELF = range(6)

SHELF_Y = 0.10
SHELF_INSPECT_Y = 0.30
MID_Y = 0.48
REST_Y = 0.82

OBJECT_TINT = np.array([0.15, 0.85, 0.95])

# transition probabilities that keep trajectories kinematically continuous
# (e.g. hand-in only makes sense at the shelf, so it follows reach)
DEFAULT_TRANSITIONS = np.array([
    # bg  reach retr  hand  prod  shelf
    [0.00, 0.50, 0.00, 0.00, 0.20, 0.30],   # background
    [0.00, 0.00, 0.25, 0.60, 0.00, 0.15],   # reach
    [0.45, 0.10, 0.00, 0.00, 0.45, 0.00],   # retract
    [0.10, 0.10, 0.80, 0.00, 0.00, 0.00],   # hand_in
    [0.45, 0.35, 0.20, 0.00, 0.00, 0.00],   # inspect_product
    [0.30, 0.70, 0.00, 0.00, 0.00, 0.00],   # inspect_shelf
])


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 6
    len_range: tuple = (8, 40)
    joint_radius: int = 3
    object_box: int = 12
    fps: int = 15
    jitter_px: float = 1.0

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ContractError("frames must be at least 16x16")
        lo, hi = self.len_range
        if not 1 <= lo <= hi <= 200:
            raise ContractError(f"len_range must sit within [1,200], got {self.len_range}")

    def to_text(self) -> str:
        return (f"height={self.height}\nwidth={self.width}\nnum_classes={self.num_classes}\n"
                f"len_min={self.len_range[0]}\nlen_max={self.len_range[1]}\n"
                f"joint_radius={self.joint_radius}\nobject_box={self.object_box}\n"
                f"fps={self.fps}\njitter_px={self.jitter_px}\n")


@dataclass
class ActivityScript:
    """Ordered (class, duration) entries for one untrimmed video."""
    entries: list

    def __post_init__(self):
        for cls, dur in self.entries:
            if dur < 1:
                raise ContractError(f"script durations must be >= 1, got {dur} for class {cls}")

    @property
    def total_frames(self) -> int:
        return sum(d for _, d in self.entries)


def _entry_anchor(class_id: int, rng) -> np.ndarray:
    x = rng.uniform(0.3, 0.7)
    y = {BACKGROUND: rng.uniform(0.30, 0.62),
         REACH: rng.uniform(0.60, 0.85),
         RETRACT: rng.uniform(0.06, 0.18),
         HAND_IN: rng.uniform(0.06, 0.14),
         INSPECT_PRODUCT: rng.uniform(0.35, 0.55),
         INSPECT_SHELF: rng.uniform(0.25, 0.35)}[class_id]
    return np.array([x, y])


def _approach(entry, target, frames, total):
    """Move to target over the first ``frames`` steps, then hold it."""
    pos = np.empty((total, 2))
    frames = max(1, min(frames, total))
    for t in range(total):
        a = min(1.0, (t + 1) / frames)
        pos[t] = entry + a * (target - entry)
    return pos


def _trajectory(class_id: int, entry: np.ndarray, t: int, rng) -> tuple:
    """Wrist-midpoint track [t,2] and per-frame object center (or None)."""
    if class_id == BACKGROUND:
        # waypoint wander strictly inside the frame: sustained motion that
        # never reaches the shelf or rest borders
        mid = np.empty((t, 2))
        pos = np.clip(entry, [0.30, 0.30], [0.70, 0.62])
        target = np.array([rng.uniform(0.30, 0.70), rng.uniform(0.30, 0.62)])
        speed = rng.uniform(0.035, 0.055)
        for i in range(t):
            delta = target - pos
            dist = np.linalg.norm(delta)
            if dist < speed:
                target = np.array([rng.uniform(0.30, 0.70), rng.uniform(0.30, 0.62)])
                delta = target - pos
                dist = np.linalg.norm(delta)
            pos = pos + delta / max(dist, 1e-9) * speed
            mid[i] = pos
        obj = None
    elif class_id == REACH:
        target = np.array([rng.uniform(0.30, 0.70), SHELF_Y + rng.uniform(-0.015, 0.015)])
        mid = entry + (target - entry) * ((np.arange(t) + 1) / t)[:, None]
        obj = _carried(mid) if rng.uniform() < 0.5 else None
    elif class_id == RETRACT:
        target = np.array([np.clip(entry[0] + rng.normal(0, 0.05), 0.25, 0.75),
                           REST_Y + rng.uniform(-0.02, 0.02)])
        mid = entry + (target - entry) * ((np.arange(t) + 1) / t)[:, None]
        obj = _carried(mid) if rng.uniform() < 0.5 else None
    elif class_id == HAND_IN:
        anchor = np.array([np.clip(entry[0], 0.30, 0.70), SHELF_Y])
        mid = _approach(entry, anchor, 4, t)
        # rhythmic poking past the shelf line, a border-proximity oscillation
        poke = -0.05 * (0.5 + 0.5 * np.sin(0.9 * np.arange(t)))
        mid = mid + np.stack([np.zeros(t), poke], axis=1)
        obj = _carried(mid) if rng.uniform() < 0.5 else None
    elif class_id == INSPECT_PRODUCT:
        anchor = np.array([np.clip(entry[0], 0.30, 0.70), MID_Y])
        mid = _approach(entry, anchor, 4, t)
        sway = 0.02 * np.sin(0.3 * np.arange(t))
        mid = mid + np.stack([sway, np.zeros(t)], axis=1)
        phase = rng.uniform(0, 2 * np.pi)
        angle = 0.8 * np.arange(t) + phase
        obj = mid + 0.11 * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    elif class_id == INSPECT_SHELF:
        anchor = np.array([np.clip(entry[0], 0.30, 0.70), SHELF_INSPECT_Y])
        mid = _approach(entry, anchor, 4, t)
        obj = None
    else:
        raise ContractError(f"class id {class_id} out of range [0,6)")
    return mid, obj


def _carried(mid: np.ndarray) -> np.ndarray:
    return mid + np.array([0.0, -0.045])


def _joints_from_track(mid: np.ndarray, rng, jitter: float) -> np.ndarray:
    """[T,12] joints for a wrist-midpoint track, fixed body proportions."""
    t = mid.shape[0]
    wrist_spread = rng.uniform(0.10, 0.16)
    shoulder_spread = rng.uniform(0.20, 0.26)
    bow = rng.uniform(0.03, 0.06)
    body_x = np.clip(mid[:, 0], 0.35, 0.65)
    shoulder_y = np.clip(mid[:, 1] + 0.30, 0.45, 0.88)
    joints = np.empty((t, 6, 2))
    for side, sign in ((0, -1.0), (1, 1.0)):
        shoulder = np.stack([body_x + sign * shoulder_spread / 2, shoulder_y], axis=1)
        wrist = np.stack([mid[:, 0] + sign * wrist_spread / 2, mid[:, 1]], axis=1)
        elbow = (shoulder + wrist) / 2 + np.array([sign * bow, 0.0])
        joints[:, side] = shoulder
        joints[:, 2 + side] = elbow
        joints[:, 4 + side] = wrist
    joints += rng.normal(0.0, jitter, size=joints.shape)
    return np.clip(joints, 0.01, 0.99).reshape(t, 12)


def _render(joints: np.ndarray, obj_centers, cfg: SynthConfig) -> tuple:
    """frames [T,3,H,W], joint maps, object maps for a joint track."""
    h, w = cfg.height, cfg.width
    t = joints.shape[0]
    frames = np.empty((t, 3, h, w), dtype=np.float32)
    jmaps = np.empty((t, 1, h, w), dtype=np.float32)
    omaps = np.empty((t, 1, h, w), dtype=np.float32)
    for i in range(t):
        img = render_pose_image(JointSet(joints[i]), h, w)
        centers = [] if obj_centers[i] is None else [np.clip(obj_centers[i], 0.02, 0.98)]
        if centers:
            blob = gaussian_bumps(np.array(centers) * [w - 1, h - 1], h, w, sigma=2.2)
            img = np.clip(img + OBJECT_TINT[:, None, None] * blob[None], 0.0, 1.0).astype(np.float32)
        frames[i] = img
        jmaps[i] = build_joint_map(joints[i], h, w, cfg.joint_radius)
        omaps[i] = build_object_map(centers, h, w, cfg.object_box)
    return frames, jmaps, omaps


def gen_sequence(class_id: int, cfg: SynthConfig | None = None, seed: int = 0,
                 return_joints: bool = False):
    """One trimmed activity clip, deterministic per (class, seed).

    Length is drawn from ``cfg.len_range`` and then subsampled to the hard
    40-frame limit (a no-op at the default range).
    """
    cfg = cfg or SynthConfig()
    if not 0 <= class_id < cfg.num_classes:
        raise ContractError(f"class id {class_id} out of range [0,{cfg.num_classes})")
    rng = np.random.default_rng(seed)
    t = int(rng.integers(cfg.len_range[0], cfg.len_range[1] + 1))
    entry = _entry_anchor(class_id, rng)
    mid, obj = _trajectory(class_id, entry, t, rng)
    joints = _joints_from_track(mid, rng, cfg.jitter_px / cfg.width)
    obj_list = [None] * t if obj is None else list(obj)

    keep = subsample_sequence(np.arange(t), FRAME_LIMIT)
    joints = joints[keep]
    obj_list = [obj_list[i] for i in keep]
    frames, jmaps, omaps = _render(joints, obj_list, cfg)
    sample = VideoSample(frames, jmaps, omaps, class_id, cfg.fps).validate()
    if return_joints:
        return sample, joints
    return sample


def gen_untrimmed(script: ActivityScript, cfg: SynthConfig | None = None, seed: int = 0):
    """One long video from a script, wrist track continuous across segment
    boundaries. Returns (VideoSample with label -1, truth segments)."""
    from .evaluation import Segment

    cfg = cfg or SynthConfig()
    if not script.entries:
        raise ContractError("script is empty")
    rng = np.random.default_rng(seed)
    entry = _entry_anchor(script.entries[0][0], rng)
    tracks, objs, segments = [], [], []
    cursor = 0
    for class_id, duration in script.entries:
        mid, obj = _trajectory(class_id, entry, duration, rng)
        tracks.append(mid)
        objs.extend([None] * duration if obj is None else list(obj))
        segments.append(Segment(cursor, cursor + duration, class_id))
        cursor += duration
        entry = mid[-1]
    mid = np.concatenate(tracks, axis=0)
    joints = _joints_from_track(mid, rng, cfg.jitter_px / cfg.width)
    frames, jmaps, omaps = _render(joints, objs, cfg)
    return VideoSample(frames, jmaps, omaps, -1, cfg.fps), segments


def random_script(rng, n_segments: int, duration_range=(10, 20),
                  transitions: np.ndarray | None = None,
                  num_classes: int = 6) -> ActivityScript:
    """Sample a script; class-to-class steps follow ``transitions`` (rows
    normalized, zero diagonal) or a uniform no-repeat rule."""
    if transitions is not None:
        trans = np.array(transitions, dtype=np.float64)
        np.fill_diagonal(trans, 0.0)
        trans /= trans.sum(axis=1, keepdims=True)
    entries = []
    prev = None
    for _ in range(n_segments):
        if prev is None:
            cls = int(rng.integers(0, num_classes))
        elif transitions is not None:
            cls = int(rng.choice(num_classes, p=trans[prev]))
        else:
            cls = int(rng.choice([c for c in range(num_classes) if c != prev]))
        dur = int(rng.integers(duration_range[0], duration_range[1] + 1))
        entries.append((cls, dur))
        prev = cls
    return ActivityScript(entries)


# -- persisted datasets ----------------------------------------------------

def _split_seed(master_seed: int, index: int, test: bool) -> int:
    # disjoint integer ranges keep train/test draws independent
    return master_seed * 1_000_000 + (500_000 if test else 0) + index


def gen_dataset(cfg: SynthConfig, n_train: int, n_test: int, out_dir,
                master_seed: int = 7, log=None) -> tuple:
    """Write balanced train/test splits in the on-disk sample format.

    Class counts are balanced to within one sample; the two splits draw
    from disjoint seed ranges. Regeneration with the same master seed is
    byte-identical.
    """
    if n_train < 1 or n_test < 1:
        raise ContractError("need n_train >= 1 and n_test >= 1")
    out_dir = Path(out_dir)
    for split, count, test in [("train", n_train, False), ("test", n_test, True)]:
        split_dir = out_dir / split
        for i in range(count):
            class_id = i % cfg.num_classes
            sample = gen_sequence(class_id, cfg, seed=_split_seed(master_seed, i, test))
            save_sample(split_dir / f"sample_{i:05d}", sample)
        if log:
            log(f"wrote {count} samples to {split_dir}")
    atomic_write_text(out_dir / "config.txt",
                      cfg.to_text() + f"master_seed={master_seed}\n"
                      f"n_train={n_train}\nn_test={n_test}\n")
    return out_dir / "train", out_dir / "test"


def gen_trimmed_set(cfg: SynthConfig, n: int, master_seed: int = 7, test: bool = False) -> list:
    """In-memory balanced sample list (same seeds as gen_dataset)."""
    return [gen_sequence(i % cfg.num_classes, cfg, seed=_split_seed(master_seed, i, test))
            for i in range(n)]


def sample_pose(rng, spread=((0.2, 0.8), (0.08, 0.62))) -> JointSet:
    """A random articulated arm configuration (pose prior for the
    heatmap-regression data; the y cap keeps the six joints separated)."""
    mid = np.array([rng.uniform(*spread[0]), rng.uniform(*spread[1])])
    joints = _joints_from_track(mid[None], rng, 0.0)
    return JointSet(joints[0])


def gen_heatmap_set(n: int, noise: NoiseConfig | None = None, seed: int = 7,
                    h: int = 64, w: int = 64) -> list:
    """Noisy heatmap-regression samples over the synthetic pose prior."""
    noise = noise or NoiseConfig()
    out = []
    for i in range(n):
        rng = np.random.default_rng(seed * 1_000_000 + i)
        truth = sample_pose(rng)
        out.append(synth_heatmap(truth, noise, seed=rng, h=h, w=w))
    return out
