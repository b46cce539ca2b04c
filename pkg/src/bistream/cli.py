"""Command-line pipeline driver.

Subcommands: gen-data, train-gan, train, recognize, detect, gridsearch,
eval, viz-attention. Every command takes one --seed that feeds all of its
randomness, accepts an optional key=value --config file (flags override),
and writes an effective-config snapshot next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import detector, evaluation, posegan, streams, synthdata
from .attention import attention_heatmap, write_pgm
from .io import atomic_write_text
from .tensor import ContractError


def _config_overlay(parser: argparse.ArgumentParser, args: argparse.Namespace):
    """Apply key=value file entries for flags the user did not set."""
    if not getattr(args, "config", None):
        return args
    path = Path(args.config)
    if not path.exists():
        parser.error(f"config file {path} does not exist")
    known = {a.dest for a in parser._actions}
    overrides = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            parser.error(f"bad config line (want key=value): {line!r}")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in known:
            parser.error(f"unknown config key {key!r}")
        overrides[key] = value.strip()
    # flags given explicitly on the command line win over the file
    given = {a.dest for a in parser._actions
             if any(opt in sys.argv for opt in a.option_strings)}
    for key, value in overrides.items():
        if key in given:
            continue
        current = getattr(args, key)
        caster = type(current) if current is not None else str
        setattr(args, key, caster(value) if caster is not bool else value.lower() in ("1", "true", "yes"))
    return args


def _snapshot(args: argparse.Namespace, out_dir: Path):
    skip = {"func", "parser", "config"}
    lines = [f"{k}={v}" for k, v in sorted(vars(args).items()) if k not in skip]
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / "effective_config.txt", "\n".join(lines) + "\n")


def _say(msg: str):
    print(msg, flush=True)


# -- commands ------------------------------------------------------------

def cmd_gen_data(args):
    cfg = synthdata.SynthConfig(height=args.height, width=args.width,
                                len_range=(args.len_min, args.len_max),
                                joint_radius=args.joint_radius, object_box=args.object_box)
    out = Path(args.out)
    _snapshot(args, out)
    synthdata.gen_dataset(cfg, args.train, args.test, out, master_seed=args.seed, log=_say)
    if args.untrimmed > 0:
        rng = np.random.default_rng(args.seed * 977 + 13)
        for i in range(args.untrimmed):
            script = synthdata.random_script(rng, args.script_segments,
                                             transitions=synthdata.DEFAULT_TRANSITIONS)
            video, segments = synthdata.gen_untrimmed(script, cfg, seed=args.seed * 10_000 + i)
            streams.save_sample(out / "untrimmed" / f"video_{i:04d}", video, segments)
        _say(f"wrote {args.untrimmed} untrimmed videos to {out / 'untrimmed'}")


def cmd_train_gan(args):
    out = Path(args.out)
    _snapshot(args, out)
    noise = posegan.NoiseConfig()
    samples = synthdata.gen_heatmap_set(args.samples, noise, seed=args.seed,
                                        h=args.height, w=args.width)
    posegan.save_heatmap_set(out / "heatmaps", samples)
    n_pre = max(1, round(args.pretrain_frac * len(samples)))
    gen = posegan.JointRegressor(h=args.height, w=args.width, seed=args.seed)
    posegan.pretrain_generator(gen, samples[:n_pre], epochs=args.pretrain_epochs,
                               seed=args.seed, log=_say)
    cfg = posegan.GanConfig(lambda_gp=args.lambda_gp, epochs=args.epochs)
    gen, critic, history = posegan.train_gan(samples, cfg, generator=gen,
                                             seed=args.seed, log=_say)
    gen.save(out / "generator")
    err = posegan.evaluate_generator(gen, samples)
    base = posegan.evaluate_argmax_baseline(samples)
    atomic_write_text(out / "summary.json", json.dumps(
        {"train_mean_error_px": err, "argmax_baseline_px": base,
         "critic_loss": history["critic_loss"][-1]}, indent=2) + "\n")
    _say(f"generator mean error {err:.2f}px vs argmax baseline {base:.2f}px")


def cmd_train(args):
    out = Path(args.out)
    _snapshot(args, out)
    train_ds = streams.DiskDataset(Path(args.data) / "train")
    test_dir = Path(args.data) / "test"
    eval_samples = list(streams.DiskDataset(test_dir)) if test_dir.is_dir() else None
    net = streams.BiStreamNet(mode=args.variant, seed=args.seed)
    history = streams.train_recognizer(
        net, train_ds, epochs=args.epochs, accumulation=args.accumulation, lr=args.lr,
        gamma_ramp=args.gamma_ramp, seed=args.seed, eval_samples=eval_samples,
        target_accuracy=args.target_accuracy, log=_say)
    net.save(out)
    atomic_write_text(out / "history.json", json.dumps(history, indent=2) + "\n")
    if eval_samples:
        acc, per_class = streams.per_class_accuracy(net, eval_samples)
        _say(f"held-out accuracy {acc:.3f}")
        atomic_write_text(out / "accuracy.json", json.dumps(
            {"overall": acc, "per_class": [None if np.isnan(v) else v for v in per_class]},
            indent=2) + "\n")


def cmd_recognize(args):
    out = Path(args.out)
    _snapshot(args, out)
    net = streams.BiStreamNet.load(args.model)
    dataset = streams.DiskDataset(args.data)
    rows = ["sample,label,predicted,confidence"]
    hits = total = 0
    for path, sample in zip(dataset.dirs, dataset):
        probs = net.classify(sample)
        pred = int(np.argmax(probs))
        rows.append(f"{path.name},{sample.label},{pred},{probs[pred]:.4f}")
        if sample.label >= 0:
            hits += int(pred == sample.label)
            total += 1
    atomic_write_text(out / "predictions.csv", "\n".join(rows) + "\n")
    if total:
        _say(f"accuracy {hits / total:.3f} over {total} labeled samples")


def cmd_detect(args):
    out = Path(args.out)
    _snapshot(args, out)
    net = streams.BiStreamNet.load(args.model)
    video, truth = streams.load_untrimmed(args.video)
    cfg = detector.DetectorConfig(args.window, args.stride)
    segments, labels, _ = detector.detect(net, video, cfg,
                                          drop_background=not args.keep_background)
    rows = ["start,end,class"] + [f"{s.start},{s.end},{s.label}" for s in segments]
    atomic_write_text(out / "segments.csv", "\n".join(rows) + "\n")
    summary = {"window": cfg.window, "stride": cfg.stride, "frames": video.t,
               "num_segments": len(segments),
               "per_class_counts": {streams.CLASS_NAMES[k]: int(sum(1 for s in segments if s.label == k))
                                    for k in range(net.num_classes)}}
    if truth:
        truth_eval = [s for s in truth if args.keep_background or s.label != 0]
        result = evaluation.f1_at_iou(segments, truth_eval, args.iou)
        summary["f1"] = result.f1
        summary["precision"] = result.precision
        summary["recall"] = result.recall
    atomic_write_text(out / "summary.json", json.dumps(summary, indent=2) + "\n")
    _say(f"{len(segments)} segments" + (f", f1@{args.iou}={summary['f1']:.3f}" if truth else ""))


def _parse_windows(spec: str) -> list:
    out = []
    for part in spec.split(","):
        part = part.strip()
        if ":" in part:
            lo, hi = part.split(":")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise ContractError(f"no window sizes in {spec!r}")
    return sorted(set(out))


def cmd_gridsearch(args):
    out = Path(args.out)
    _snapshot(args, out)
    net = streams.BiStreamNet.load(args.model)
    video_dirs = sorted(p for p in Path(args.videos).iterdir() if (p / "frames.fgt").exists())
    videos = [streams.load_untrimmed(d) for d in video_dirs]
    windows = _parse_windows(args.windows)
    best, score, surface = detector.grid_search(net, videos, windows,
                                                iou_threshold=args.iou, log=_say)
    rows = ["window,stride,f1"] + [f"{w},{s},{f:.6f}" for w, s, f in surface]
    atomic_write_text(out / "surface.csv", "\n".join(rows) + "\n")
    atomic_write_text(out / "best.json", json.dumps(
        {"window": best.window, "stride": best.stride, "f1": score}, indent=2) + "\n")
    _say(f"best window={best.window} stride={best.stride} f1@{args.iou}={score:.4f}")


def _read_segments_csv(path) -> list:
    segments = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("start"):
            continue
        start, end, label = (int(v) for v in line.split(","))
        segments.append(evaluation.Segment(start, end, label))
    return segments


def cmd_eval(args):
    out = Path(args.out)
    _snapshot(args, out)
    pred = _read_segments_csv(args.pred)
    truth = _read_segments_csv(args.truth)
    result = evaluation.f1_at_iou(pred, truth, args.iou)
    metrics = {"iou_threshold": args.iou, "precision": result.precision,
               "recall": result.recall, "f1": result.f1, "tp": result.tp,
               "fp": result.fp, "fn": result.fn,
               "mean_matched_iou": None if not result.matches else result.mean_matched_iou}
    if args.frames:
        def labels_of(segs):
            arr = np.zeros(args.frames, dtype=int)
            for s in segs:
                arr[s.start:s.end] = s.label
            return arr
        metrics["frame_accuracy"] = evaluation.frame_accuracy(labels_of(pred), labels_of(truth))
    atomic_write_text(out / "metrics.json", json.dumps(metrics, indent=2) + "\n")
    atomic_write_text(out / "metrics.csv",
                      "metric,value\n" + "\n".join(f"{k},{v}" for k, v in metrics.items()) + "\n")
    matrix = evaluation.transition_matrix([truth], streams.NUM_CLASSES)
    atomic_write_text(out / "truth_transitions.csv",
                      evaluation.transition_matrix_csv(matrix, streams.CLASS_NAMES))
    _say(f"f1@{args.iou}={result.f1:.4f} precision={result.precision:.4f} recall={result.recall:.4f}")


def cmd_viz_attention(args):
    out = Path(args.out)
    _snapshot(args, out)
    net = streams.BiStreamNet.load(args.model)
    if args.gamma is not None:
        net.gamma = args.gamma
    sample = streams.load_sample(args.sample)
    feats = net.attention_features(sample)
    for t in range(feats.shape[0]):
        write_pgm(out / f"frame_{t:03d}.pgm", attention_heatmap(feats[t]))
    _say(f"wrote {feats.shape[0]} attention maps to {out}")


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bistream",
                                     description="bi-stream action recognition and detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=7, help="master seed for all randomness")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="key=value config file; flags override it")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(p)
    p.add_argument("--train", type=int, default=300)
    p.add_argument("--test", type=int, default=60)
    p.add_argument("--untrimmed", type=int, default=0, help="also write N untrimmed videos")
    p.add_argument("--script-segments", type=int, default=8)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--len-min", type=int, default=8)
    p.add_argument("--len-max", type=int, default=40)
    p.add_argument("--joint-radius", type=int, default=3)
    p.add_argument("--object-box", type=int, default=12)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-gan", help="train the heatmap-to-joints WGAN-GP regressor")
    common(p)
    p.add_argument("--samples", type=int, default=600)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--pretrain-frac", type=float, default=0.1,
                   help="labeled fraction for the supervised warm start")
    p.add_argument("--pretrain-epochs", type=int, default=60)
    p.add_argument("--lambda-gp", type=float, default=10.0)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.set_defaults(func=cmd_train_gan)

    p = sub.add_parser("train", help="train the recognizer")
    common(p)
    p.add_argument("--data", required=True, help="dataset root with train/ (and test/)")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--accumulation", type=int, default=12)
    p.add_argument("--gamma-ramp", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--variant", choices=streams.MODES, default="bistream")
    p.add_argument("--target-accuracy", type=float, default=None,
                   help="early-stop phase 1 at this held-out accuracy")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("recognize", help="classify trimmed samples")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="directory of sample directories")
    p.set_defaults(func=cmd_recognize)

    p = sub.add_parser("detect", help="detect segments in one untrimmed video")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--window", type=int, required=True)
    p.add_argument("--stride", type=int, required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--keep-background", action="store_true")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("gridsearch", help="window/stride search on validation videos")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--videos", required=True, help="directory of untrimmed video directories")
    p.add_argument("--windows", default="5:40", help="sizes, e.g. '5:40' or '5,10,20,40'")
    p.add_argument("--iou", type=float, default=0.5)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("eval", help="score predicted segments against truth")
    common(p)
    p.add_argument("--pred", required=True, help="predicted segments CSV")
    p.add_argument("--truth", required=True, help="ground-truth segments CSV")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--frames", type=int, default=0,
                   help="video length; enables frame accuracy")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz-attention", help="export attention heatmaps as PGM")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--gamma", type=float, default=1.0)
    p.set_defaults(func=cmd_viz_attention)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for action in parser._subparsers._group_actions:
        subparser = action.choices.get(args.command)
        if subparser is not None:
            args = _config_overlay(subparser, args)
    try:
        args.func(args)
    except (ContractError, FileNotFoundError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
