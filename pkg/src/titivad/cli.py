"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 bad input data, 3 numeric failure.
Progress goes to stderr; results only to the files named on the command line.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import pipeline
from .audio_io import load_wav, write_wav
from .call_classifier import CallClass, classify_calls, extract_call_embedding, train_call_classifier
from .decoder import CallSegment, DecodeConfig, match_pairs
from .detector import split_by_source, train_detector
from .errors import DataError, NumericError, RateMismatch
from .features import MfccConfig
from .metrics import FileResult, evaluate
from .nnet import BiLstmNet, grad_check
from .persistence import (LabelRow, SegmentRow, load_model, read_labels, read_segments,
                          save_model, write_history, write_labels, write_segments)
from .synthdata import SynthConfig, generate_file
from .training import TrainConfig

log = logging.getLogger("titivad")

GRADCHECK_TOL = 1e-5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# argument definitions
# ---------------------------------------------------------------------------

def _common(p):
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                   help="random seed (default 0)")
    g.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                   help="worker threads for per-file stages (default 1)")
    g.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS,
                   help="only print warnings and errors")


def _training_args(p, epochs=1000):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=40,
                   help="stop after this many epochs without validation gain; 0 disables")
    p.add_argument("--validation-fraction", type=float, default=0.2)


def _decode_args(p):
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--min-duration", type=float, default=0.10)
    p.add_argument("--merge-gap", type=float, default=0.15)
    p.add_argument("--beam-width", type=int, default=8)
    p.add_argument("--k-sigma", type=float, default=1.0, help="energy decoder threshold multiplier")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="titivad", description="Call detection and classification pipeline.")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a labelled synthetic corpus")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--files", type=int, default=50)
    p.add_argument("--duration", type=float, default=60.0)
    p.add_argument("--sample-rate", type=int, default=16000)
    p.add_argument("--calls-per-minute", type=float, default=4.0)
    p.add_argument("--call-duration", type=float, nargs=2, default=(0.3, 1.5), metavar=("MIN", "MAX"))
    p.add_argument("--call-f0", type=float, nargs=2, default=(800.0, 1300.0), metavar=("MIN", "MAX"))
    p.add_argument("--snr-db", type=float, default=10.0)
    p.add_argument("--nlp-fraction", type=float, default=0.3)
    p.add_argument("--distractor-rate", type=float, default=2.0)
    p.add_argument("--noise", choices=("white", "pink"), default="pink")

    p = sub.add_parser("train-detector", help="train the frame-level detector")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="history CSV (default: history.csv next to --out)")
    p.add_argument("--all-windows", action="store_true",
                   help="train on every window, not only windows containing calls")
    _training_args(p)

    p = sub.add_parser("detect", help="detect call segments in a directory of WAVs")
    _common(p)
    p.add_argument("--model", help="detector model (not needed for --decoder energy)")
    p.add_argument("--audio", required=True)
    p.add_argument("--decoder", choices=pipeline.DECODERS, default="beam")
    p.add_argument("--out", required=True)
    _decode_args(p)

    p = sub.add_parser("train-classifier", help="train the stage-2 call classifier")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--detector", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="history CSV (default: history.csv next to --out)")
    p.add_argument("--decoder", choices=("threshold", "beam"), default="threshold",
                   help="decoder used to mine FalseAlarm examples")
    p.add_argument("--mining-threshold", type=float, default=pipeline.MINING_THRESHOLD,
                   help="posterior threshold for mining (threshold decoder)")
    _training_args(p)

    p = sub.add_parser("classify", help="label detected segments with the stage-2 classifier")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--segments", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score segments against labels")
    _common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--segments")
    src.add_argument("--classified")
    p.add_argument("--labels", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--audio", help="WAV directory; enables frame-level accuracies")
    p.add_argument("--rows", help="optional per-file CSV")
    p.add_argument("--iou", type=float, default=0.3)
    p.add_argument("--corr", choices=("pearson", "spearman"), default="pearson")
    p.add_argument("--unit", choices=("file", "window"), default="file")
    p.add_argument("--window-sec", type=float, default=5.0)

    p = sub.add_parser("scaling-exp", help="retrain on growing data fractions")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--fractions", default="0.1,0.25,0.5,1.0")
    p.add_argument("--out", required=True)
    _training_args(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    _common(p)
    p.add_argument("--instances", type=int, default=1)
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--entries", type=int, default=40, help="entries probed per tensor; 0 = all")
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=GRADCHECK_TOL)
    p.add_argument("--richardson", action="store_true",
                   help="extrapolate eps and eps/2 differences to cancel the eps^2 term")

    p = sub.add_parser("export-features", help="average-MFCC vector per segment")
    _common(p)
    p.add_argument("--segments", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--out", required=True)
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _train_config(args, positive_only=True) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch, seed=args.seed,
                       positive_only=positive_only, validation_fraction=args.validation_fraction,
                       lr=args.lr, patience=args.patience or None)


def _decode_config(args) -> DecodeConfig:
    return DecodeConfig(threshold=args.threshold, min_duration_sec=args.min_duration,
                        merge_gap_sec=args.merge_gap, beam_width=args.beam_width)


def _history_path(args) -> Path:
    return Path(args.history) if args.history else Path(args.out).parent / "history.csv"


def _split_files(files, fraction, seed):
    class _Src:
        def __init__(self, f):
            self.f, self.source = f, f.file_id

    train, val = split_by_source([_Src(f) for f in files], fraction, seed)
    return [s.f for s in train], [s.f for s in val]


def _segment_clips(segments, audio_dir, threads):
    """Load the WAV behind every segment file id; returns {file: clip}."""
    paths = {p.stem: p for p in pipeline.wav_paths(audio_dir)}
    missing = sorted(set(segments) - set(paths))
    if missing:
        raise DataError(f"no WAV in {audio_dir} for segment files: {', '.join(missing[:5])}")
    names = sorted(segments)
    clips = pipeline.parallel_map(lambda n: load_wav(paths[n]), names, threads)
    return dict(zip(names, clips))


def _check_rate(clip, mfcc, name):
    if clip.sample_rate_hz != mfcc.sample_rate_hz:
        raise RateMismatch(f"{name}: sample rate {clip.sample_rate_hz} Hz, "
                           f"model expects {mfcc.sample_rate_hz} Hz")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    cfg = SynthConfig(sample_rate_hz=args.sample_rate, file_duration_sec=args.duration,
                      n_files=args.files, calls_per_minute=args.calls_per_minute,
                      call_duration_sec=tuple(args.call_duration), call_f0_hz=tuple(args.call_f0),
                      snr_db=args.snr_db, nlp_fraction=args.nlp_fraction,
                      distractor_rate=args.distractor_rate, noise_kind=args.noise, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def make(i):
        f = generate_file(cfg, i)
        write_wav(f.clip, out / f"{f.file_id}.wav")
        return f

    files = pipeline.parallel_map(make, range(cfg.n_files), args.threads)
    rows = [LabelRow(r.file, r.start_sec, r.end_sec, r.call_class) for f in files for r in f.labels]
    write_labels(out / "labels.csv", rows)
    log.info("wrote %d files and %d labelled calls to %s", len(files), len(rows), out)


def _labelled_corpus(args):
    return pipeline.load_corpus(args.data, read_labels(args.labels), args.threads)


def cmd_train_detector(args):
    files = _labelled_corpus(args)
    config = _train_config(args, positive_only=not args.all_windows)
    train_files, val_files = _split_files(files, config.validation_fraction, config.seed)
    mfcc = MfccConfig(sample_rate_hz=files[0].clip.sample_rate_hz)
    for f in files:
        _check_rate(f.clip, mfcc, f.file_id)
    model, history = train_detector(pipeline.windows_for(train_files, mfcc), config,
                                    pipeline.windows_for(val_files, mfcc) or None, mfcc)
    save_model(model, args.out)
    write_history(_history_path(args), history)
    log.info("saved detector to %s", args.out)


def cmd_detect(args):
    model = None
    if args.model:
        model = load_model(args.model, "detector")
    elif args.decoder != "energy":
        raise UsageError("detect: --model is required unless --decoder energy")
    cfg = _decode_config(args)
    paths = pipeline.wav_paths(args.audio)

    def one(path):
        clip = load_wav(path)
        if model is not None:
            _check_rate(clip, model.mfcc, path.name)
        return pipeline.detect(model, clip, args.decoder, cfg, path.stem, args.k_sigma)

    segs = pipeline.parallel_map(one, paths, args.threads)
    rows = [SegmentRow(p.stem, s.start_sec, s.end_sec, s.score) for p, ss in zip(paths, segs)
            for s in ss]
    write_segments(args.out, rows)
    log.info("wrote %d segments from %d files to %s", len(rows), len(paths), args.out)


def cmd_train_classifier(args):
    files = _labelled_corpus(args)
    detector = load_model(args.detector, "detector")
    for f in files:
        _check_rate(f.clip, detector.mfcc, f.file_id)
    cfg = DecodeConfig(threshold=args.mining_threshold)
    calls = pipeline.stage2_calls(files, detector, cfg, args.decoder, args.threads)
    config = _train_config(args)
    model, history = train_call_classifier(calls, config, mfcc=detector.mfcc)
    save_model(model, args.out)
    write_history(_history_path(args), history)
    log.info("saved call classifier to %s", args.out)


def cmd_classify(args):
    model = load_model(args.model, "call_classifier")
    segments = read_segments(args.segments)
    clips = _segment_clips(segments, args.audio, args.threads)
    for name, clip in clips.items():
        _check_rate(clip, model.mfcc, name)

    def one(name):
        rows = segments[name]
        probs = classify_calls(model, [clips[name].slice_sec(r.start_sec, r.end_sec) for r in rows])
        return [SegmentRow(r.file, r.start_sec, r.end_sec, r.score, CallClass(int(np.argmax(p))),
                           float(np.max(p))) for r, p in zip(rows, probs)]

    out = [r for rows in pipeline.parallel_map(one, sorted(segments), args.threads) for r in rows]
    write_segments(args.out, out)
    log.info("classified %d segments into %s", len(out), args.out)


def cmd_eval(args):
    segments = read_segments(args.segments or args.classified)
    labels = read_labels(args.labels)
    names = sorted(set(segments) | set(labels))
    durations, clips = {}, {}
    if args.audio:
        clips = _segment_clips({n: None for n in names}, args.audio, args.threads)
        durations = {n: c.duration_sec for n, c in clips.items()}
    mfcc = MfccConfig()
    results, class_hits, class_total = [], 0, 0
    for name in names:
        rows = segments.get(name, [])
        kept = [r for r in rows if r.call_class != CallClass.FALSE_ALARM]
        pred = [CallSegment(r.start_sec, r.end_sec, r.score) for r in kept]
        ref = pipeline.label_segments(labels.get(name, []))
        pred_frames = label_frames = None
        if name in clips:
            mfcc = MfccConfig(sample_rate_hz=clips[name].sample_rate_hz)
            pred_frames, _ = pipeline.segment_frames(pred, durations[name], mfcc)
            label_frames, _ = pipeline.segment_frames(ref, durations[name], mfcc)
        results.append(FileResult(name, pred, ref, pred_frames, label_frames))
        for i, j in match_pairs(pred, ref, args.iou):
            want = labels[name][j].call_class
            if kept[i].call_class is not None and want is not None:
                class_total += 1
                class_hits += int(kept[i].call_class == want)
    report = evaluate(results, args.iou, args.corr, args.unit, args.window_sec, durations)
    doc = report.to_dict()
    doc.pop("rows")
    doc["class_accuracy"] = class_hits / class_total if class_total else None
    with open(args.report, "w") as fh:
        json.dump(doc, fh, indent=2, allow_nan=False)
        fh.write("\n")
    if args.rows:
        report.write_rows_csv(args.rows)
    log.info("event precision %.4f recall %.4f hits_corr %s", report.event_precision,
             report.event_recall, report.hits_corr)


def cmd_scaling_exp(args):
    try:
        fractions = sorted({float(x) for x in args.fractions.split(",") if x.strip()})
    except ValueError:
        raise UsageError(f"--fractions must be comma-separated numbers, got {args.fractions!r}")
    if not fractions or not all(0 < f <= 1 for f in fractions):
        raise UsageError("--fractions must lie in (0, 1]")
    files = _labelled_corpus(args)
    config = _train_config(args)
    train_files, val_files = _split_files(files, config.validation_fraction, config.seed)
    rows = pipeline.scaling_experiment(train_files, val_files, fractions, config,
                                       threads=args.threads)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: "" if v is None else (f"{v:.6f}" if isinstance(v, float) else v)
                        for k, v in row.items()})
    for row in rows:
        log.info("fraction %.2f: instance accuracy %.4f", row["fraction"], row["instance_accuracy"])


def gradcheck_instance(seed, frames=12, batch=2, entries=40, epsilon=1e-4, richardson=False):
    """Worst relative error over a random detector and a random classifier."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    lengths = np.array([frames] + [int(rng.integers(2, frames + 1)) for _ in range(batch - 1)])
    x = rng.standard_normal((batch, frames, 40))
    det = BiLstmNet.create(1, pool=False, rng=rng)
    y = (rng.random((batch, frames)) < 0.5).astype(np.float64)
    worst = max(worst, grad_check(det, x, lengths, y, epsilon, entries or None, rng,
                                  richardson=richardson))
    cls = BiLstmNet.create(3, pool=True, rng=rng)
    t = rng.integers(0, 3, size=batch)
    worst = max(worst, grad_check(cls, x, lengths, t, epsilon, entries or None, rng,
                                  richardson=richardson))
    return worst


def cmd_gradcheck(args):
    seeds = [args.seed + k for k in range(args.instances)]
    errs = pipeline.parallel_map(
        lambda s: gradcheck_instance(s, args.frames, args.batch, args.entries, args.epsilon,
                                     args.richardson),
        seeds, args.threads)
    worst = max(errs)
    print(f"max relative error {worst:.3e} over {len(seeds)} instance(s)")
    if not worst < args.tolerance:
        raise NumericError(f"gradient check failed: {worst:.3e} >= {args.tolerance:g}")


def cmd_export_features(args):
    segments = read_segments(args.segments)
    clips = _segment_clips(segments, args.audio, args.threads)

    def one(name):
        clip = clips[name]
        mfcc = MfccConfig(sample_rate_hz=clip.sample_rate_hz)
        return [(r, extract_call_embedding(clip.slice_sec(r.start_sec, r.end_sec), mfcc))
                for r in segments[name]]

    rows = [x for part in pipeline.parallel_map(one, sorted(segments), args.threads) for x in part]
    n = len(rows[0][1]) if rows else MfccConfig().n_mfcc
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["file", "start_sec", "end_sec", "class"] + [f"mfcc_{k}" for k in range(n)])
        for r, emb in rows:
            w.writerow([r.file, f"{r.start_sec:.6f}", f"{r.end_sec:.6f}",
                        "" if r.call_class is None else int(r.call_class)]
                       + ["%.9g" % v for v in emb])
    log.info("wrote %d embeddings to %s", len(rows), args.out)


COMMANDS = {
    "synth": cmd_synth,
    "train-detector": cmd_train_detector,
    "detect": cmd_detect,
    "train-classifier": cmd_train_classifier,
    "classify": cmd_classify,
    "eval": cmd_eval,
    "scaling-exp": cmd_scaling_exp,
    "gradcheck": cmd_gradcheck,
    "export-features": cmd_export_features,
}


OUTPUT_FILE_ARGS = ("out", "history", "report", "rows")


def _make_output_dirs(args):
    """Create parent directories for every output file named on the command line."""
    for name in OUTPUT_FILE_ARGS:
        value = getattr(args, name, None)
        if value and args.command != "synth":
            Path(value).parent.mkdir(parents=True, exist_ok=True)


def _resolved(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items())}


def run_cli(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1

    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr, force=True)
    print("config: " + json.dumps(_resolved(args), sort_keys=True, default=str), file=sys.stderr)
    t0 = time.perf_counter()
    try:
        _make_output_dirs(args)
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except FloatingPointError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError) as exc:
        print(f"data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return 0


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
