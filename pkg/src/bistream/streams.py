"""Bi-stream recurrent recognizer and its data plumbing.

One stream looks at RGB frames stacked with a binary joint-location map,
the other at a binary object-location map. Each is a small three-stage
conv stack with two non-local attention blocks; per-frame pooled features
are concatenated and fed to a shared LSTM, a temporal-attention average
of the hidden states feeds the class head.

Also here: binary joint/object map construction, the halve-until-limit
frame subsampling rule, and the on-disk sample format.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import NonLocalBlock, TemporalAttention, gamma_schedule
from .io import atomic_write_text, load_checkpoint, read_fgt, save_checkpoint, write_fgt
from .layers import Adam, Conv2d, Linear, LstmCell, accumulate_gradients, softmax_cross_entropy
from .tensor import ContractError, Tensor

NUM_CLASSES = 6
FRAME_LIMIT = 40

CLASS_NAMES = ["background", "reach", "retract", "hand_in", "inspect_product", "inspect_shelf"]


# -- data types ----------------------------------------------------------

@dataclass
class VideoSample:
    """One activity clip: frames [T,3,H,W], binary maps [T,1,H,W], class label."""

    frames: np.ndarray
    joint_map: np.ndarray
    object_map: np.ndarray
    label: int
    fps: int = 15

    def validate(self):
        t = self.frames.shape[0]
        if t < 1:
            raise ContractError("sample needs at least one frame")
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ContractError(f"frames must be [T,3,H,W], got {self.frames.shape}")
        for name, m in [("joint_map", self.joint_map), ("object_map", self.object_map)]:
            if m.shape != (t, 1) + self.frames.shape[2:]:
                raise ContractError(f"{name} shape {m.shape} does not match frames {self.frames.shape}")
            vals = np.unique(m)
            if not np.isin(vals, [0.0, 1.0]).all():
                raise ContractError(f"{name} must be binary, found values {vals[:5]}")
        return self

    @property
    def t(self) -> int:
        return self.frames.shape[0]

    @property
    def hw(self) -> tuple:
        return self.frames.shape[2], self.frames.shape[3]

    def window(self, start: int, end: int) -> "VideoSample":
        return VideoSample(self.frames[start:end], self.joint_map[start:end],
                           self.object_map[start:end], self.label, self.fps)

    def subsampled(self, limit: int = FRAME_LIMIT) -> "VideoSample":
        return VideoSample(subsample_sequence(self.frames, limit),
                           subsample_sequence(self.joint_map, limit),
                           subsample_sequence(self.object_map, limit),
                           self.label, self.fps)


def subsample_sequence(frames: np.ndarray, limit: int = FRAME_LIMIT) -> np.ndarray:
    """Halve (keep indices 0,2,4,...) until the sequence fits the hard limit."""
    if frames.shape[0] < 1:
        raise ContractError("cannot subsample an empty sequence")
    out = frames
    while out.shape[0] > limit:
        out = out[::2]
    return out


def build_joint_map(joints, h: int, w: int, radius_px: int = 3) -> np.ndarray:
    """Binary [1,H,W] map: 1 within ``radius_px`` (Euclidean) of any joint.

    ``joints`` is a 12-vector of normalized (x, y) pairs; radius 0 marks a
    single pixel per joint. Joints at borders clip.
    """
    coords = np.asarray(getattr(joints, "coords", joints), dtype=np.float64).reshape(6, 2)
    out = np.zeros((1, h, w), dtype=np.float32)
    r2 = radius_px * radius_px
    for x, y in coords:
        cx = int(round(x * (w - 1)))
        cy = int(round(y * (h - 1)))
        x0, x1 = max(0, cx - radius_px), min(w - 1, cx + radius_px)
        y0, y1 = max(0, cy - radius_px), min(h - 1, cy + radius_px)
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        out[0, y0:y1 + 1, x0:x1 + 1][(xs - cx) ** 2 + (ys - cy) ** 2 <= r2] = 1.0
    return out


def build_object_map(centers, h: int, w: int, box_px: int = 12) -> np.ndarray:
    """Binary [1,H,W] map: 1 inside an axis-aligned ``box_px`` square around
    each normalized (x, y) center, clipped at the borders."""
    if box_px < 1:
        raise ContractError("box_px must be >= 1")
    out = np.zeros((1, h, w), dtype=np.float32)
    half = box_px // 2
    for x, y in centers:
        cx = int(round(x * (w - 1)))
        cy = int(round(y * (h - 1)))
        x0 = max(0, cx - half)
        y0 = max(0, cy - half)
        x1 = min(w, cx - half + box_px)
        y1 = min(h, cy - half + box_px)
        if x1 > x0 and y1 > y0:
            out[0, y0:y1, x0:x1] = 1.0
    return out


# -- network ------------------------------------------------------------

MODES = ("bistream", "pose", "raw", "object")
_STREAM_CHANNELS = {"pose": 4, "raw": 3, "object": 1}


class _Stream:
    """Three conv stages (stride 4, 2, 2) with non-local blocks after the
    second and third, pooled to one feature vector per frame.

    Attention sits at 8x8 / 4x4 for 64x64 inputs: the pairwise space-time
    sum is quadratic in T*H*W, so earlier placement is not tractable here.
    """

    def __init__(self, in_ch: int, widths, rng):
        w1, w2, w3 = widths
        self.conv1 = Conv2d(in_ch, w1, kernel=5, stride=4, padding=2, rng=rng)
        self.conv2 = Conv2d(w1, w2, kernel=3, stride=2, padding=1, rng=rng)
        self.conv3 = Conv2d(w2, w3, kernel=3, stride=2, padding=1, rng=rng)
        self.nl1 = NonLocalBlock(w2, rng=rng)
        self.nl2 = NonLocalBlock(w3, rng=rng)
        self.out_dim = w3

    def __call__(self, x: Tensor) -> Tensor:
        a = T.tanh(self.conv1(x))
        a = self.nl1(T.tanh(self.conv2(a)))
        a = self.nl2(T.tanh(self.conv3(a)))
        return T.global_avg_pool(a)

    def attended_features(self, x: Tensor) -> Tensor:
        """Feature maps right after the first non-local block (for viz)."""
        a = T.tanh(self.conv1(x))
        return self.nl1(T.tanh(self.conv2(a)))

    def set_gamma(self, gamma: float):
        self.nl1.gamma = gamma
        self.nl2.gamma = gamma

    def params(self, prefix: str) -> dict:
        out = {}
        for name, part in [("conv1", self.conv1), ("conv2", self.conv2), ("conv3", self.conv3),
                           ("nl1", self.nl1), ("nl2", self.nl2)]:
            out.update(part.params(f"{prefix}{name}."))
        return out


def _stream_input(kind: str, sample: VideoSample) -> Tensor:
    if kind == "pose":
        return Tensor(np.concatenate([sample.frames, sample.joint_map], axis=1))
    if kind == "raw":
        return Tensor(sample.frames)
    if kind == "object":
        return Tensor(sample.object_map)
    raise ContractError(f"unknown stream kind {kind!r}")


class BiStreamNet:
    """The recognizer. ``mode`` selects the ablation variant:

    - "bistream": pose stream (RGB + joint map) plus object-map stream
    - "pose": pose stream alone
    - "raw": pose-stream architecture fed RGB frames only
    - "object": object-map stream alone
    """

    def __init__(self, mode: str = "bistream", num_classes: int = NUM_CLASSES,
                 widths=(8, 16, 32), lstm_hidden: int = 64, seed: int = 0):
        if mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
        rng = np.random.default_rng(seed)
        self.mode = mode
        self.num_classes = num_classes
        self.widths = tuple(widths)
        self.lstm_hidden = lstm_hidden
        self.seed = seed
        kinds = ["pose", "object"] if mode == "bistream" else [mode]
        self.stream_kinds = kinds
        self.streams = {k: _Stream(_STREAM_CHANNELS[k], widths, rng) for k in kinds}
        fused = sum(s.out_dim for s in self.streams.values())
        self.lstm = LstmCell(fused, lstm_hidden, rng=rng)
        self.temporal = TemporalAttention(lstm_hidden, rng=rng)
        self.head = Linear(lstm_hidden, num_classes, rng=rng)
        self.gamma = 0.0

    # -- gamma plumbing ------------------------------------------------
    @property
    def gamma(self) -> float:
        return self._gamma

    @gamma.setter
    def gamma(self, value: float):
        self._gamma = float(value)
        for s in self.streams.values():
            s.set_gamma(self._gamma)

    # -- forward ---------------------------------------------------------
    def logits(self, sample: VideoSample) -> Tensor:
        feats = [self.streams[k](_stream_input(k, sample)) for k in self.stream_kinds]
        fused = feats[0] if len(feats) == 1 else T.concat(feats, axis=1)  # [T, D]
        h, c = self.lstm.initial_state()
        hidden = []
        for t in range(sample.t):
            h, c = self.lstm.step(fused[t], h, c)
            hidden.append(h)
        return self.head(self.temporal(hidden))

    def loss(self, sample: VideoSample) -> Tensor:
        return softmax_cross_entropy(self.logits(sample), sample.label)

    def classify(self, sample: VideoSample) -> np.ndarray:
        """Class probability vector (deterministic inference, no tape)."""
        with T.no_grad():
            return T.softmax(self.logits(sample)).data

    def attention_features(self, sample: VideoSample) -> np.ndarray:
        """Per-frame feature maps after the first pose-side non-local block."""
        kind = self.stream_kinds[0]
        with T.no_grad():
            return self.streams[kind].attended_features(_stream_input(kind, sample)).data

    # -- persistence -------------------------------------------------------
    def params(self) -> dict:
        out = {}
        for k, s in self.streams.items():
            out.update(s.params(f"{k}."))
        out.update(self.lstm.params("lstm."))
        out.update(self.temporal.params("temporal."))
        out.update(self.head.params("head."))
        return out

    def config(self) -> dict:
        return {"mode": self.mode, "num_classes": self.num_classes,
                "widths": ",".join(map(str, self.widths)),
                "lstm_hidden": self.lstm_hidden, "gamma": self._gamma, "seed": self.seed}

    def save(self, directory):
        directory = Path(directory)
        save_checkpoint(directory, self.params())
        atomic_write_text(directory / "net_config.txt",
                          "".join(f"{k}={v}\n" for k, v in self.config().items()))

    @classmethod
    def load(cls, directory) -> "BiStreamNet":
        directory = Path(directory)
        cfg = {}
        for line in (directory / "net_config.txt").read_text().splitlines():
            if line.strip():
                key, val = line.split("=", 1)
                cfg[key] = val
        net = cls(mode=cfg["mode"], num_classes=int(cfg["num_classes"]),
                  widths=tuple(int(x) for x in cfg["widths"].split(",")),
                  lstm_hidden=int(cfg["lstm_hidden"]), seed=int(cfg.get("seed", 0)))
        stored = load_checkpoint(directory)
        own = net.params()
        if set(stored) != set(own):
            raise ContractError(f"checkpoint parameters do not match architecture: "
                                f"missing {sorted(set(own) - set(stored))[:3]}...")
        for name, arr in stored.items():
            own[name].data = arr.astype(own[name].data.dtype).reshape(own[name].shape)
        net.gamma = float(cfg.get("gamma", 0.0))
        return net


def bistream_classify(net: BiStreamNet, sample: VideoSample) -> np.ndarray:
    return net.classify(sample)


# -- training ----------------------------------------------------------

def evaluate_accuracy(net: BiStreamNet, samples) -> float:
    samples = list(samples)
    hits = sum(int(np.argmax(net.classify(s)) == s.label) for s in samples)
    return hits / len(samples)


def per_class_accuracy(net: BiStreamNet, samples) -> tuple:
    """(overall, per-class ndarray[K]); classes absent from ``samples`` get nan."""
    k = net.num_classes
    hits = np.zeros(k)
    counts = np.zeros(k)
    for s in samples:
        counts[s.label] += 1
        hits[s.label] += int(np.argmax(net.classify(s)) == s.label)
    with np.errstate(invalid="ignore"):
        per_class = np.where(counts > 0, hits / np.maximum(counts, 1), np.nan)
    return hits.sum() / counts.sum(), per_class


def train_recognizer(net: BiStreamNet, dataset, epochs: int, accumulation: int = 12,
                     lr: float = 1e-3, gamma_ramp: int = 0, seed: int = 0,
                     eval_samples=None, target_accuracy: float | None = None,
                     log=None) -> dict:
    """Two-phase training: plain epochs at gamma=0, then the attention ramp.

    Per-sample gradients are averaged over virtual mini-batches of
    ``accumulation`` (sequences have varying length, so there is no padding
    and no real batching). Early-stops phase 1 once ``target_accuracy`` on
    ``eval_samples`` is reached. Returns the loss/accuracy history.
    """
    samples = list(dataset)
    if not samples:
        raise ContractError("training dataset is empty")
    rng = np.random.default_rng(seed)
    opt = Adam(net.params(), lr=lr)
    history = {"phase1_loss": [], "ramp_loss": [], "accuracy": [], "gamma": []}

    def one_epoch():
        order = rng.permutation(len(samples))
        losses = accumulate_gradients((samples[i] for i in order), net.loss, opt,
                                      accumulation_size=accumulation)
        mean_loss = float(np.mean(losses))
        if not np.isfinite(mean_loss):
            raise FloatingPointError(f"training diverged (mean loss {mean_loss})")
        return mean_loss

    net.gamma = 0.0
    for epoch in range(epochs):
        mean_loss = one_epoch()
        history["phase1_loss"].append(mean_loss)
        history["gamma"].append(0.0)
        acc = None
        if eval_samples is not None:
            acc = evaluate_accuracy(net, eval_samples)
            history["accuracy"].append(acc)
        if log:
            log(f"phase1 epoch {epoch + 1}/{epochs} loss {mean_loss:.4f}"
                + (f" acc {acc:.3f}" if acc is not None else ""))
        if target_accuracy is not None and acc is not None and acc >= target_accuracy:
            break

    for epoch in range(gamma_ramp):
        net.gamma = gamma_schedule(epoch, gamma_ramp)
        mean_loss = one_epoch()
        history["ramp_loss"].append(mean_loss)
        history["gamma"].append(net.gamma)
        acc = None
        if eval_samples is not None:
            acc = evaluate_accuracy(net, eval_samples)
            history["accuracy"].append(acc)
        if log:
            log(f"ramp epoch {epoch + 1}/{gamma_ramp} gamma {net.gamma:.2f} "
                f"loss {mean_loss:.4f}" + (f" acc {acc:.3f}" if acc is not None else ""))
    return history


# -- on-disk dataset format ------------------------------------------------

def save_sample(directory, sample: VideoSample, segments=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_fgt(directory / "frames.fgt", sample.frames)
    write_fgt(directory / "jointmap.fgt", sample.joint_map)
    write_fgt(directory / "objmap.fgt", sample.object_map)
    atomic_write_text(directory / "label.txt", f"{sample.label}\n")
    if segments is not None:
        lines = [f"{s.start},{s.end},{s.label}" for s in segments]
        atomic_write_text(directory / "segments.csv", "\n".join(lines) + "\n")


def load_sample(directory, limit: int | None = FRAME_LIMIT) -> VideoSample:
    directory = Path(directory)
    sample = VideoSample(
        frames=read_fgt(directory / "frames.fgt"),
        joint_map=read_fgt(directory / "jointmap.fgt"),
        object_map=read_fgt(directory / "objmap.fgt"),
        label=int((directory / "label.txt").read_text().strip()),
    )
    if limit is not None:
        sample = sample.subsampled(limit)
    return sample.validate()


def load_untrimmed(directory):
    """(VideoSample, truth segments) for a long multi-activity video; no subsampling."""
    from .evaluation import Segment  # local import: evaluation depends on streams

    directory = Path(directory)
    sample = load_sample(directory, limit=None)
    segments = []
    seg_file = directory / "segments.csv"
    if seg_file.exists():
        for line in seg_file.read_text().splitlines():
            if line.strip():
                start, end, label = (int(v) for v in line.split(","))
                segments.append(Segment(start, end, label))
    return sample, segments


class DiskDataset:
    """Lazy list of trimmed samples under ``root`` (one directory each)."""

    def __init__(self, root, limit: int | None = FRAME_LIMIT):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"dataset directory {self.root} does not exist")
        self.dirs = sorted(p for p in self.root.iterdir() if (p / "label.txt").exists())
        if not self.dirs:
            warnings.warn(f"{self.root} contains no samples")
        self.limit = limit

    def __len__(self):
        return len(self.dirs)

    def __getitem__(self, i) -> VideoSample:
        return load_sample(self.dirs[i], self.limit)

    def __iter__(self):
        return (self[i] for i in range(len(self)))
