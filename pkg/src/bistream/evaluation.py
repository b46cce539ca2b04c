"""Metrics: frame accuracy, segment IoU, F1 at an IoU threshold, transition
matrices, and the ablation harness."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .tensor import ContractError


@dataclass(frozen=True)
class Segment:
    """Half-open frame span [start, end) with a class label."""
    start: int
    end: int
    label: int

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ContractError(f"segment needs 0 <= start < end, got [{self.start},{self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start


def frame_accuracy(pred, truth) -> float:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ContractError(f"label sequences differ in length: {pred.shape} vs {truth.shape}")
    return float((pred == truth).mean())


def segment_iou(a: Segment, b: Segment) -> float:
    """Frame-span intersection over union, ignoring class."""
    inter = max(0, min(a.end, b.end) - max(a.start, b.start))
    union = a.length + b.length - inter
    return inter / union


@dataclass
class MatchResult:
    precision: float
    recall: float
    f1: float
    matches: list        # (pred index, truth index, iou)
    tp: int
    fp: int
    fn: int

    @property
    def mean_matched_iou(self) -> float:
        """Auxiliary statistic: mean IoU over matched pairs (nan if none)."""
        if not self.matches:
            return float("nan")
        return float(np.mean([m[2] for m in self.matches]))


def _scores_from_counts(tp: int, fp: int, fn: int) -> tuple:
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0  # empty prediction against empty truth
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def f1_at_iou(pred, truth, threshold: float = 0.5) -> MatchResult:
    """Greedy one-to-one segment matching at an IoU threshold.

    Candidate pairs require the same class and IoU >= threshold and are
    consumed in descending-IoU order. Empty-vs-empty scores 1, exactly one
    side empty scores 0.
    """
    if not 0.0 < threshold <= 1.0:
        raise ContractError(f"threshold must be in (0,1], got {threshold}")
    pred, truth = list(pred), list(truth)
    candidates = [(segment_iou(p, t), pi, ti)
                  for pi, p in enumerate(pred) for ti, t in enumerate(truth)
                  if p.label == t.label and segment_iou(p, t) >= threshold]
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
    used_p, used_t = set(), set()
    matches = []
    for iou, pi, ti in candidates:
        if pi in used_p or ti in used_t:
            continue
        used_p.add(pi)
        used_t.add(ti)
        matches.append((pi, ti, iou))
    tp = len(matches)
    fp = len(pred) - tp
    fn = len(truth) - tp
    precision, recall, f1 = _scores_from_counts(tp, fp, fn)
    return MatchResult(precision, recall, f1, matches, tp, fp, fn)


def exhaustive_match_count(pred, truth, threshold: float = 0.5) -> int:
    """Brute-force optimal one-to-one match count (test oracle, small inputs)."""
    pred, truth = list(pred), list(truth)
    ok = [[p.label == t.label and segment_iou(p, t) >= threshold for t in truth] for p in pred]
    best = 0
    indices = range(len(truth))
    for r in range(min(len(pred), len(truth)), 0, -1):
        for pred_subset in itertools.combinations(range(len(pred)), r):
            for perm in itertools.permutations(indices, r):
                if all(ok[pi][ti] for pi, ti in zip(pred_subset, perm)):
                    return r
    return best


def pooled_f1(per_video_results) -> MatchResult:
    """Pool TP/FP/FN counts over videos into one score."""
    tp = sum(r.tp for r in per_video_results)
    fp = sum(r.fp for r in per_video_results)
    fn = sum(r.fn for r in per_video_results)
    precision, recall, f1 = _scores_from_counts(tp, fp, fn)
    matches = [m for r in per_video_results for m in r.matches]
    return MatchResult(precision, recall, f1, matches, tp, fp, fn)


# -- transition matrix ------------------------------------------------------

def transition_matrix(video_segments, num_classes: int) -> np.ndarray:
    """Row-percentage matrix of which class follows which.

    ``video_segments`` is a list of per-video segment lists, each sorted by
    start. Counts consecutive (a -> b) pairs within each video; every row
    with at least one outgoing transition is normalized to sum to 100.
    """
    counts = np.zeros((num_classes, num_classes), dtype=np.float64)
    for segments in video_segments:
        ordered = sorted(segments, key=lambda s: s.start)
        for a, b in zip(ordered, ordered[1:]):
            counts[a.label, b.label] += 1
    out = np.zeros_like(counts)
    for i in range(num_classes):
        row_sum = counts[i].sum()
        if row_sum > 0:
            out[i] = 100.0 * counts[i] / row_sum
    return out


def transition_matrix_csv(matrix: np.ndarray, class_names) -> str:
    lines = ["class," + ",".join(class_names)]
    for name, row in zip(class_names, matrix):
        lines.append(name + "," + ",".join(f"{v:.2f}" for v in row))
    return "\n".join(lines) + "\n"


# -- ablation harness ----------------------------------------------------------

ABLATION_VARIANTS = ("raw_frame", "pose_stream", "object_map", "bistream", "bistream_attention")

_VARIANT_MODES = {"raw_frame": "raw", "pose_stream": "pose", "object_map": "object",
                  "bistream": "bistream", "bistream_attention": "bistream"}


@dataclass
class AblationRow:
    variant: str
    per_class: np.ndarray
    overall: float


def ablation_run(train_samples, test_samples, variants=ABLATION_VARIANTS,
                 epochs: int = 10, gamma_ramp: int = 7, accumulation: int = 12,
                 lr: float = 1e-3, seed: int = 7, target_accuracy: float | None = None,
                 log=None) -> list:
    """Train each requested variant on the same split and seed; report
    per-class and overall held-out accuracy.

    All variants share the LSTM + temporal attention; the attention variant
    additionally runs the non-local gamma ramp. When both bistream rows are
    requested the ramped row continues from the plain bistream run instead
    of retraining from scratch (identical seeds make phase 1 identical).
    """
    from .streams import BiStreamNet, per_class_accuracy, train_recognizer

    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise ContractError(f"unknown ablation variants {unknown}; choose from {ABLATION_VARIANTS}")
    train_samples = list(train_samples)
    test_samples = list(test_samples)
    rows = []
    shared_bistream = None
    order = [v for v in ABLATION_VARIANTS if v in variants]
    for variant in order:
        ramp = gamma_ramp if variant == "bistream_attention" else 0
        if variant == "bistream_attention" and shared_bistream is not None:
            net = shared_bistream
            train_recognizer(net, train_samples, epochs=0, accumulation=accumulation,
                             lr=lr, gamma_ramp=ramp, seed=seed + 1,
                             eval_samples=test_samples, log=log)
        else:
            net = BiStreamNet(mode=_VARIANT_MODES[variant], seed=seed)
            train_recognizer(net, train_samples, epochs=epochs, accumulation=accumulation,
                             lr=lr, gamma_ramp=ramp, seed=seed,
                             eval_samples=test_samples, target_accuracy=target_accuracy,
                             log=log)
        if variant == "bistream":
            shared_bistream = net
        overall, per_class = per_class_accuracy(net, test_samples)
        rows.append(AblationRow(variant, per_class, overall))
        if log:
            log(f"ablation {variant}: overall {overall:.3f}")
    return rows


def ablation_csv(rows, class_names) -> str:
    lines = ["variant," + ",".join(class_names) + ",overall"]
    for row in rows:
        cells = ",".join("" if np.isnan(v) else f"{v:.4f}" for v in row.per_class)
        lines.append(f"{row.variant},{cells},{row.overall:.4f}")
    return "\n".join(lines) + "\n"
