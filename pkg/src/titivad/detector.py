"""Stage-1 activity detector: MFCC -> BiLSTM -> per-frame sigmoid posteriors."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .audio_io import AudioClip, Window, window_segments
from .decoder import CallSegment, FramePosterior
from .errors import EmptyDataset, NoPositives, OverlappingSegments, RateMismatch
from .features import (FeatureStats, MfccConfig, compute_mfcc, fit_stats, frame_times,
                       standardize)
from .metrics import conditional_accuracy, instance_accuracy
from .nnet import BiLstmNet, LinearHead, adam_step, AdamState, bce_loss, sigmoid
from .training import TrainConfig, pad_batch, pad_labels, run_training, seed_streams

log = logging.getLogger(__name__)

PROB_EPS = 1e-15
WINDOW_SEC = 5.0
EVAL_BATCH = 64


@dataclass(eq=False)
class DetectorModel:
    mfcc: MfccConfig
    stats: FeatureStats
    net: BiLstmNet
    decision_threshold: float = 0.5

    def __post_init__(self):
        if self.net.pool or self.net.head.weight.shape[0] != 1:
            raise ValueError("detector needs a per-frame head with one output")
        if not 0 < self.decision_threshold < 1:
            raise ValueError("decision_threshold must be in (0, 1)")

    @property
    def stack(self):
        return self.net.stack

    @property
    def head(self) -> LinearHead:
        return self.net.head

    @classmethod
    def zeros(cls, mfcc: MfccConfig = MfccConfig(), bias=0.0, threshold=0.5):
        net = BiLstmNet.zeros(1, input_size=mfcc.n_mfcc)
        net.head.bias[:] = bias
        return cls(mfcc, FeatureStats.identity(mfcc.n_mfcc), net, threshold)


@dataclass(eq=False)
class LabeledWindow:
    window: Window
    frame_labels: np.ndarray
    segments: list[CallSegment] = field(default_factory=list)

    @property
    def source(self) -> str:
        return self.window.source


def check_rate(clip: AudioClip, mfcc: MfccConfig, name: str = "clip"):
    if clip.sample_rate_hz != mfcc.sample_rate_hz:
        raise RateMismatch(
            f"{name}: sample rate {clip.sample_rate_hz} Hz, model expects {mfcc.sample_rate_hz} Hz"
        )


def model_inputs(mfcc: MfccConfig, stats: FeatureStats, clip: AudioClip) -> np.ndarray:
    return standardize(compute_mfcc(clip, mfcc), stats).frames


def _posteriors_for_inputs(net: BiLstmNet, inputs):
    """Sigmoid outputs per sequence, batching equal-length sequences together."""
    out = [None] * len(inputs)
    by_len = {}
    for k, x in enumerate(inputs):
        by_len.setdefault(len(x), []).append(k)
    for _, ks in sorted(by_len.items()):
        for lo in range(0, len(ks), EVAL_BATCH):
            chunk = ks[lo:lo + EVAL_BATCH]
            logits, _ = net.forward(np.stack([inputs[k] for k in chunk]))
            for k, z in zip(chunk, logits[..., 0]):
                out[k] = z
    return out


def to_probs(logits) -> np.ndarray:
    return np.clip(sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS)


def detector_posteriors(model: DetectorModel, clip: AudioClip) -> FramePosterior:
    return detector_posteriors_batch(model, [clip])[0]


def detector_posteriors_batch(model: DetectorModel, clips) -> list[FramePosterior]:
    for clip in clips:
        check_rate(clip, model.mfcc)
    inputs = [model_inputs(model.mfcc, model.stats, c) for c in clips]
    logits = _posteriors_for_inputs(model.net, inputs)
    return [FramePosterior(to_probs(z), frame_times(len(z), model.mfcc), c.duration_sec)
            for z, c in zip(logits, clips)]


def predict_frames(model: DetectorModel, clip: AudioClip) -> np.ndarray:
    probs = detector_posteriors(model, clip).probs
    return (probs >= model.decision_threshold).astype(np.int8)


def file_posteriors(model: DetectorModel, clip: AudioClip, window_sec=WINDOW_SEC,
                    source="") -> FramePosterior:
    """Posteriors for a whole file, computed window by window and concatenated.

    Windows are scored independently; the tail shorter than one second is
    dropped, as in training.
    """
    check_rate(clip, model.mfcc, source or "clip")
    windows = window_segments(clip, window_sec, source)
    if not windows:
        return FramePosterior(np.zeros(0), np.zeros(0), clip.duration_sec)
    posts = detector_posteriors_batch(model, [w.clip for w in windows])
    probs = np.concatenate([p.probs for p in posts])
    times = np.concatenate([p.frame_times_sec + w.source_offset_sec
                            for p, w in zip(posts, windows)])
    end = windows[-1].source_offset_sec + windows[-1].duration_sec
    return FramePosterior(probs, times, end)


def frame_labels_from_segments(segments, frame_times_sec, frame_len_sec) -> np.ndarray:
    """1 where at least half of a frame's span is covered by the segments."""
    segs = sorted(segments, key=lambda s: s.start_sec)
    for a, b in zip(segs, segs[1:]):
        if b.start_sec < a.end_sec:
            raise OverlappingSegments(
                f"segments [{a.start_sec}, {a.end_sec}] and [{b.start_sec}, {b.end_sec}] overlap"
            )
    centers = np.asarray(frame_times_sec, dtype=np.float64)
    lo = centers - frame_len_sec / 2
    hi = centers + frame_len_sec / 2
    covered = np.zeros(len(centers))
    for s in segs:
        covered += np.clip(np.minimum(hi, s.end_sec) - np.maximum(lo, s.start_sec), 0, None)
    return (covered >= 0.5 * frame_len_sec - 1e-12).astype(np.int8)


def labeled_windows(clip: AudioClip, events, mfcc: MfccConfig, window_sec=WINDOW_SEC,
                    source="") -> list[LabeledWindow]:
    """Cut a labelled file into windows with rasterised frame labels.

    ``events`` are file-level objects with ``start_sec``/``end_sec``; they are
    clipped to each window and shifted to window-relative time.
    """
    out = []
    for w in window_segments(clip, window_sec, source):
        t0, t1 = w.source_offset_sec, w.source_offset_sec + w.duration_sec
        segs = [CallSegment(max(e.start_sec, t0) - t0, min(e.end_sec, t1) - t0)
                for e in events if e.end_sec > t0 and e.start_sec < t1]
        n = mfcc.num_frames(len(w.clip.samples))
        labels = frame_labels_from_segments(segs, frame_times(n, mfcc), mfcc.frame_len_sec)
        out.append(LabeledWindow(w, labels, segs))
    return out


def split_by_source(items, fraction, seed):
    """File-level split: a ``fraction`` of distinct sources goes to validation."""
    sources = sorted({it.source for it in items})
    rng = np.random.default_rng(seed)
    n_val = int(round(fraction * len(sources)))
    if fraction > 0 and len(sources) > 1:
        n_val = min(max(n_val, 1), len(sources) - 1)
    else:
        n_val = 0
    val_sources = set(rng.permutation(sources)[:n_val].tolist())
    return ([it for it in items if it.source not in val_sources],
            [it for it in items if it.source in val_sources])


def _frame_metrics(probs_list, labels_list, threshold=0.5):
    probs = np.concatenate(probs_list)
    labels = np.concatenate(labels_list).astype(np.int8)
    pred = (probs >= threshold).astype(np.int8)
    loss, _ = bce_loss(np.log(probs) - np.log1p(-probs), labels)
    cond = conditional_accuracy(pred, labels)
    return {
        "val_loss": loss,
        "instance_accuracy": instance_accuracy(pred, labels),
        "conditional_accuracy": float("nan") if cond is None else cond,
    }


def train_detector(dataset, config: TrainConfig = TrainConfig(), validation=None,
                   mfcc: MfccConfig | None = None):
    """Fit a detector and return ``(model, history)``.

    Without an explicit ``validation`` list, a file-level split of
    ``dataset`` is used. With ``config.positive_only``, training uses only
    windows containing a positive frame; validation keeps every window.
    """
    dataset = list(dataset)
    if not dataset:
        raise EmptyDataset("no labelled windows to train on")
    mfcc = mfcc or MfccConfig(sample_rate_hz=dataset[0].window.clip.sample_rate_hz)
    if validation is None:
        train, validation = split_by_source(dataset, config.validation_fraction, config.seed)
    else:
        train = dataset
    if config.positive_only:
        train = [lw for lw in train if np.any(lw.frame_labels)]
        if not train:
            raise NoPositives("positive_only training needs at least one window with a call")
    if not validation:
        validation = train
    for lw in train + validation:
        check_rate(lw.window.clip, mfcc, lw.source or "window")

    train_feats = [compute_mfcc(lw.window.clip, mfcc) for lw in train]
    stats = fit_stats(train_feats)
    train_x = [standardize(f, stats).frames for f in train_feats]
    train_y = [lw.frame_labels for lw in train]
    val_x = [model_inputs(mfcc, stats, lw.window.clip) for lw in validation]
    val_y = [lw.frame_labels for lw in validation]

    rng_init, rng_shuffle = seed_streams(config.seed)
    net = BiLstmNet.create(1, input_size=mfcc.n_mfcc, hidden_size=config.hidden_size,
                           num_layers=config.num_layers, rng=rng_init)

    def evaluate(current):
        probs = [to_probs(z) for z in _posteriors_for_inputs(current, val_x)]
        return _frame_metrics(probs, val_y)

    log.info("detector: %d training windows, %d validation windows", len(train), len(validation))
    best, history = run_training(net, train_x, train_y, config, evaluate,
                                 "instance_accuracy", rng_shuffle, label="detector",
                                 tie_key="val_loss")
    return DetectorModel(mfcc, stats, best), history


# ---------------------------------------------------------------------------
# frame-independent logistic baseline
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class LogisticFrameModel:
    """Per-frame linear + sigmoid on standardised MFCCs; no temporal context."""

    mfcc: MfccConfig
    stats: FeatureStats
    head: LinearHead


def logistic_posteriors(model: LogisticFrameModel, clip: AudioClip) -> FramePosterior:
    check_rate(clip, model.mfcc)
    x = model_inputs(model.mfcc, model.stats, clip)
    z = (x @ model.head.weight.T + model.head.bias)[:, 0]
    return FramePosterior(to_probs(z), frame_times(len(z), model.mfcc), clip.duration_sec)


def train_logistic_baseline(dataset, config: TrainConfig = TrainConfig(), validation=None,
                            mfcc: MfccConfig | None = None):
    """Train the logistic comparison model with the same data policy as the detector."""
    dataset = list(dataset)
    if not dataset:
        raise EmptyDataset("no labelled windows to train on")
    mfcc = mfcc or MfccConfig(sample_rate_hz=dataset[0].window.clip.sample_rate_hz)
    if validation is None:
        train, validation = split_by_source(dataset, config.validation_fraction, config.seed)
    else:
        train = dataset
    if config.positive_only:
        train = [lw for lw in train if np.any(lw.frame_labels)]
        if not train:
            raise NoPositives("positive_only training needs at least one window with a call")
    validation = validation or train

    feats = [compute_mfcc(lw.window.clip, mfcc) for lw in train]
    stats = fit_stats(feats)
    xs = [standardize(f, stats).frames for f in feats]
    ys = [lw.frame_labels for lw in train]
    val_x = [model_inputs(mfcc, stats, lw.window.clip) for lw in validation]
    val_y = [lw.frame_labels for lw in validation]

    _, rng = seed_streams(config.seed)
    head = LinearHead(np.zeros((1, mfcc.n_mfcc)), np.zeros(1))
    params = {"weight": head.weight, "bias": head.bias}
    state = AdamState(lr=config.lr, clip_norm=config.clip_norm)
    best, best_rank, history = None, (-np.inf, -np.inf), []
    best_acc, since_best = -np.inf, 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(xs))
        for lo in range(0, len(xs), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            x, lengths = pad_batch([xs[i] for i in idx])
            y = pad_labels([ys[i] for i in idx], x.shape[1])
            mask = (np.arange(x.shape[1])[None, :] < lengths[:, None]).astype(np.float64)
            z = x @ head.weight[0] + head.bias[0]
            loss, dz = bce_loss(z, y, mask)
            grads = {"weight": np.einsum("bt,btd->d", dz, x)[None, :],
                     "bias": np.array([dz.sum()])}
            adam_step(params, grads, state)
        probs = [to_probs(x @ head.weight[0] + head.bias[0]) for x in val_x]
        metrics = _frame_metrics(probs, val_y)
        history.append({"epoch": epoch, **metrics})
        rank = (metrics["instance_accuracy"], -metrics["val_loss"])
        if rank > best_rank:
            best, best_rank = LinearHead(head.weight.copy(), head.bias.copy()), rank
        if metrics["instance_accuracy"] > best_acc:
            best_acc, since_best = metrics["instance_accuracy"], 0
        else:
            since_best += 1
            if config.patience is not None and since_best >= config.patience:
                break
    return LogisticFrameModel(mfcc, stats, best), history
