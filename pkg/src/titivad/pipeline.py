"""Corpus-level glue: load a labelled directory, detect, mine stage-2 calls, scale data.

These functions sit between the single-file modules and the command line so
that experiments and tests run the exact code path the CLI runs.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import AudioClip, load_wav
from .call_classifier import CallClass, LabeledCall
from .decoder import (CallSegment, DecodeConfig, decode_beam, decode_threshold,
                      energy_band_detect, iou)
from .detector import (DetectorModel, file_posteriors, labeled_windows, train_detector,
                       frame_labels_from_segments)
from .errors import EmptyDataset
from .features import MfccConfig, frame_times
from .metrics import FileResult, evaluate
from .training import TrainConfig

log = logging.getLogger(__name__)

DECODERS = ("threshold", "beam", "energy")
ENERGY_BAND_HZ = (700.0, 1400.0)
MINING_THRESHOLD = 0.1


@dataclass(eq=False)
class CorpusFile:
    file_id: str
    clip: AudioClip
    labels: list = field(default_factory=list)


def parallel_map(fn, items, threads=1):
    """Order-preserving map; every item is processed independently."""
    items = list(items)
    if threads <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def wav_paths(audio_dir) -> list[Path]:
    paths = sorted(Path(audio_dir).glob("*.wav"))
    if not paths:
        raise EmptyDataset(f"no .wav files in {audio_dir}")
    return paths


def load_corpus(audio_dir, labels=None, threads=1) -> list[CorpusFile]:
    """Every WAV in ``audio_dir`` with its label rows (keyed by file stem)."""
    paths = wav_paths(audio_dir)
    clips = parallel_map(load_wav, paths, threads)
    labels = labels or {}
    out = []
    for p, clip in zip(paths, clips):
        rows = labels.get(p.stem, labels.get(p.name, []))
        out.append(CorpusFile(p.stem, clip, list(rows)))
    known = {f.file_id for f in out} | {p.name for p in paths}
    missing = sorted(set(labels) - known)
    if missing:
        log.warning("labels reference %d files not present in %s: %s", len(missing),
                    audio_dir, ", ".join(missing[:5]))
    return out


def detect(model: DetectorModel | None, clip: AudioClip, decoder="beam",
           cfg: DecodeConfig = DecodeConfig(), source="", k_sigma=1.0):
    """Segments for one file; ``model`` may be None for the energy decoder."""
    if decoder == "energy":
        mfcc = model.mfcc if model is not None else MfccConfig(sample_rate_hz=clip.sample_rate_hz)
        return energy_band_detect(clip, *ENERGY_BAND_HZ, k_sigma, cfg, mfcc)
    post = file_posteriors(model, clip, source=source)
    if decoder == "threshold":
        return decode_threshold(post, cfg)
    if decoder == "beam":
        return decode_beam(post, cfg)[1]
    raise ValueError(f"unknown decoder {decoder!r}")


def detect_corpus(model, files, decoder="beam", cfg: DecodeConfig = DecodeConfig(), threads=1):
    return parallel_map(lambda f: detect(model, f.clip, decoder, cfg, f.file_id), files, threads)


def windows_for(files, mfcc: MfccConfig):
    return [lw for f in files for lw in labeled_windows(f.clip, f.labels, mfcc, source=f.file_id)]


def label_segments(rows) -> list[CallSegment]:
    return [CallSegment(r.start_sec, r.end_sec) for r in rows]


# ---------------------------------------------------------------------------
# stage-2 data
# ---------------------------------------------------------------------------

def mine_false_alarms(segments, labels) -> list[CallSegment]:
    """Detected segments that do not overlap any labelled call at all."""
    refs = label_segments(labels)
    return [s for s in segments if all(iou(s, r) == 0.0 for r in refs)]


def stage2_calls(files, detector: DetectorModel,
                 cfg: DecodeConfig = DecodeConfig(threshold=MINING_THRESHOLD),
                 decoder="threshold", threads=1) -> list[LabeledCall]:
    """Labelled calls plus FalseAlarm clips mined from detector false positives.

    By default candidates come from threshold decoding at a permissive
    posterior threshold, so near-miss detections are mined as well as
    outright false positives. Label rows without a class are taken as
    CleanCall. Clips shorter than one MFCC frame are skipped.
    """
    min_len = detector.mfcc.frame_len
    segs_per_file = detect_corpus(detector, files, decoder, cfg, threads)
    out = []
    for f, segs in zip(files, segs_per_file):
        for r in f.labels:
            clip = f.clip.slice_sec(r.start_sec, r.end_sec)
            if len(clip.samples) >= min_len:
                cls = CallClass.CLEAN_CALL if r.call_class is None else CallClass(r.call_class)
                out.append(LabeledCall(clip, cls, f.file_id))
        for s in mine_false_alarms(segs, f.labels):
            clip = f.clip.slice_sec(s.start_sec, s.end_sec)
            if len(clip.samples) >= min_len:
                out.append(LabeledCall(clip, CallClass.FALSE_ALARM, f.file_id))
    counts = {c.label: sum(1 for x in out if x.label == c) for c in CallClass}
    log.info("stage-2 examples: %s", counts)
    return out


# ---------------------------------------------------------------------------
# evaluation and the data-scaling experiment
# ---------------------------------------------------------------------------

def file_results(model: DetectorModel, files, decoder="beam",
                 cfg: DecodeConfig = DecodeConfig(), threads=1) -> list[FileResult]:
    """Segments, frame predictions and posteriors for each labelled file."""

    def one(f):
        post = file_posteriors(model, f.clip, source=f.file_id)
        if decoder == "energy":
            segs = detect(model, f.clip, "energy", cfg)
        elif decoder == "threshold":
            segs = decode_threshold(post, cfg)
        else:
            segs = decode_beam(post, cfg)[1]
        labels = frame_labels_from_segments(label_segments(f.labels), post.frame_times_sec,
                                            model.mfcc.frame_len_sec)
        pred = (post.probs >= model.decision_threshold).astype(np.int8)
        return FileResult(f.file_id, segs, label_segments(f.labels), pred, labels, post)

    return parallel_map(one, files, threads)


def segment_frames(segments, duration_sec, mfcc: MfccConfig) -> tuple[np.ndarray, np.ndarray]:
    """Rasterise segments onto the MFCC frame grid of a file of ``duration_sec``."""
    n = mfcc.num_frames(int(round(duration_sec * mfcc.sample_rate_hz)))
    times = frame_times(n, mfcc)
    return frame_labels_from_segments(segments, times, mfcc.frame_len_sec), times


def nested_subsets(files, fractions, seed):
    """Training subsets per fraction, each a prefix of one seeded permutation."""
    order = np.random.default_rng(seed).permutation(len(files))
    out = {}
    for frac in fractions:
        n = max(1, int(round(frac * len(files))))
        out[frac] = [files[i] for i in sorted(order[:n])]
    return out


def scaling_experiment(train_files, val_files, fractions, config: TrainConfig = TrainConfig(),
                       mfcc: MfccConfig | None = None, cfg: DecodeConfig = DecodeConfig(),
                       threads=1) -> list[dict]:
    """Retrain the detector on growing subsets of the training files.

    Every fraction is scored on the same validation files; rows carry frame
    accuracies, event-count correlation and event precision/recall.
    """
    if not train_files or not val_files:
        raise EmptyDataset("scaling experiment needs training and validation files")
    mfcc = mfcc or MfccConfig(sample_rate_hz=train_files[0].clip.sample_rate_hz)
    val_windows = windows_for(val_files, mfcc)
    rows = []
    for frac, subset in nested_subsets(train_files, sorted(fractions), config.seed).items():
        log.info("scaling: fraction %.3f, %d training files", frac, len(subset))
        model, history = train_detector(windows_for(subset, mfcc), config, val_windows, mfcc)
        report = evaluate(file_results(model, val_files, "beam", cfg, threads))
        rows.append({
            "fraction": frac, "train_files": len(subset), "epochs_run": len(history),
            "instance_accuracy": report.instance_accuracy,
            "conditional_accuracy": report.conditional_accuracy,
            "hits_corr": report.hits_corr, "event_precision": report.event_precision,
            "event_recall": report.event_recall,
        })
    return rows

