"""Recognition to detection: sliding windows over an untrimmed video,
per-frame probability averaging, segment extraction, and the window/stride
grid search."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evaluation import Segment, f1_at_iou, pooled_f1
from .streams import FRAME_LIMIT, BiStreamNet, VideoSample
from .tensor import ContractError

WINDOW_MIN = 5
WINDOW_MAX = FRAME_LIMIT


@dataclass(frozen=True)
class DetectorConfig:
    window: int
    stride: int

    def __post_init__(self):
        if not WINDOW_MIN <= self.window <= WINDOW_MAX:
            raise ContractError(f"window must be in [{WINDOW_MIN},{WINDOW_MAX}], got {self.window}")
        if not 1 <= self.stride <= self.window:
            raise ContractError(f"stride must be in [1,{self.window}], got {self.stride}")


def window_spans(t: int, window: int, stride: int) -> list:
    """Window [start, end) spans covering every frame of a length-t video.

    Regular windows start at multiples of the stride; when the last one
    stops short of the end, a final window clamped to end at t is added
    (shrunk to the whole video if t < window).
    """
    if t < 1:
        raise ContractError("video must have at least one frame")
    if t <= window:
        return [(0, t)]
    spans = []
    start = 0
    while start + window <= t:
        spans.append((start, start + window))
        start += stride
    if spans[-1][1] < t:
        spans.append((t - window, t))
    return spans


def slide_and_score(net: BiStreamNet, video: VideoSample, cfg: DetectorConfig,
                    cache: dict | None = None) -> list:
    """Classify every window; returns [(start, end, probability vector)].

    ``cache`` maps (start, end) -> probs and may be shared between calls on
    the same video (grid search reuses windows across strides heavily).
    """
    out = []
    for start, end in window_spans(video.t, cfg.window, cfg.stride):
        if cache is not None and (start, end) in cache:
            probs = cache[(start, end)]
        else:
            probs = net.classify(video.window(start, end))
            if cache is not None:
                cache[(start, end)] = probs
        out.append((start, end, probs))
    return out


def fuse_probs(scored_windows, t: int) -> np.ndarray:
    """Per-frame probability rows: the mean over all windows covering each
    frame. Raises if any frame is uncovered."""
    if not scored_windows:
        raise ContractError("no scored windows")
    k = len(scored_windows[0][2])
    sums = np.zeros((t, k), dtype=np.float64)
    counts = np.zeros(t, dtype=np.int64)
    for start, end, probs in scored_windows:
        sums[start:end] += probs
        counts[start:end] += 1
    if (counts == 0).any():
        missing = int(np.argmax(counts == 0))
        raise ContractError(f"frame {missing} is covered by no window")
    return sums / counts[:, None]


def fuse_labels(scored_windows, t: int) -> np.ndarray:
    """Per-frame labels: argmax of the averaged probabilities, ties broken
    toward the lowest class index."""
    return np.argmax(fuse_probs(scored_windows, t), axis=1)


def extract_segments(labels, drop_background: bool = False,
                     background: int = 0) -> list:
    """Maximal runs of equal label as [start, end) segments."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("empty label sequence")
    segments = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            label = int(labels[start])
            if not (drop_background and label == background):
                segments.append(Segment(start, i, label))
            start = i
    return segments


def detect(net: BiStreamNet, video: VideoSample, cfg: DetectorConfig,
           drop_background: bool = True, background: int = 0,
           cache: dict | None = None) -> tuple:
    """Full pass: slide, fuse, extract. Returns (segments, labels, prob rows)."""
    scored = slide_and_score(net, video, cfg, cache)
    probs = fuse_probs(scored, video.t)
    labels = np.argmax(probs, axis=1)
    return extract_segments(labels, drop_background, background), labels, probs


def grid_search(net: BiStreamNet, videos, windows=None, iou_threshold: float = 0.5,
                drop_background: bool = True, background: int = 0,
                log=None) -> tuple:
    """Exhaustive search over window sizes and strides 1..window.

    ``videos`` is a list of (VideoSample, truth segments). Scores each
    config by pooled F1 at the IoU threshold over all videos; ties go to
    the smaller window, then the smaller stride. Returns
    (best DetectorConfig, best score, surface rows (window, stride, f1)).
    """
    videos = list(videos)
    if not videos:
        raise ContractError("grid search needs at least one validation video")
    windows = sorted(windows) if windows else list(range(WINDOW_MIN, WINDOW_MAX + 1))
    caches = [dict() for _ in videos]
    truth_lists = [[s for s in truth if not (drop_background and s.label == background)]
                   for _, truth in videos]
    best = None
    surface = []
    for window in windows:
        for stride in range(1, window + 1):
            cfg = DetectorConfig(window, stride)
            results = []
            for (video, _), truth, cache in zip(videos, truth_lists, caches):
                segments, _, _ = detect(net, video, cfg, drop_background, background, cache)
                results.append(f1_at_iou(segments, truth, iou_threshold))
            score = pooled_f1(results).f1
            surface.append((window, stride, score))
            if best is None or score > best[1]:
                best = (cfg, score)
        if log:
            log(f"grid search window {window} done (best so far "
                f"w={best[0].window} s={best[0].stride} f1={best[1]:.4f})")
    return best[0], best[1], surface
