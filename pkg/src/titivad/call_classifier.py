"""Stage-2 classifier over decoded call clips.

Same BiLSTM stack as the detector, but latents are averaged over the clip
before a 3-way linear head, so the output is one label per call.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from .audio_io import AudioClip
from .errors import EmptyDataset, RateMismatch, SingleClass, TooShort
from .features import FeatureStats, MfccConfig, compute_mfcc, fit_stats, standardize
from .nnet import BiLstmNet, LinearHead, cross_entropy_loss, pool_mean, softmax
from .training import TrainConfig, pad_batch, run_training, seed_streams

log = logging.getLogger(__name__)

EVAL_BATCH = 64


class CallClass(enum.IntEnum):
    CLEAN_CALL = 0
    NONLINEAR_CALL = 1
    FALSE_ALARM = 2

    @property
    def label(self) -> str:
        return ("CleanCall", "NonlinearCall", "FalseAlarm")[self]


N_CLASSES = len(CallClass)


@dataclass(eq=False)
class CallClassifierModel:
    mfcc: MfccConfig
    stats: FeatureStats
    net: BiLstmNet

    def __post_init__(self):
        if not self.net.pool or self.net.head.weight.shape[0] != N_CLASSES:
            raise ValueError("call classifier needs a pooled head with three outputs")

    @property
    def stack(self):
        return self.net.stack

    @property
    def head(self) -> LinearHead:
        return self.net.head

    @classmethod
    def zeros(cls, mfcc: MfccConfig = MfccConfig()):
        net = BiLstmNet.zeros(N_CLASSES, input_size=mfcc.n_mfcc, pool=True)
        return cls(mfcc, FeatureStats.identity(mfcc.n_mfcc), net)


@dataclass(eq=False)
class LabeledCall:
    clip: AudioClip
    label: CallClass
    source: str = ""


def _inputs(mfcc, stats, clip, name="call"):
    if clip.sample_rate_hz != mfcc.sample_rate_hz:
        raise RateMismatch(
            f"{name}: sample rate {clip.sample_rate_hz} Hz, model expects {mfcc.sample_rate_hz} Hz"
        )
    if len(clip.samples) < mfcc.frame_len:
        raise TooShort(f"{name}: {clip.duration_sec:.4f} s is shorter than one MFCC frame")
    return standardize(compute_mfcc(clip, mfcc), stats).frames


def _logits_for_inputs(net: BiLstmNet, inputs) -> np.ndarray:
    order = np.argsort([len(x) for x in inputs], kind="stable")
    out = np.empty((len(inputs), net.head.weight.shape[0]))
    for lo in range(0, len(order), EVAL_BATCH):
        idx = order[lo:lo + EVAL_BATCH]
        x, lengths = pad_batch([inputs[i] for i in idx])
        logits, _ = net.forward(x, lengths)
        out[idx] = logits
    return out


def classify_calls(model: CallClassifierModel, clips) -> np.ndarray:
    """Class probabilities, one row per clip."""
    inputs = [_inputs(model.mfcc, model.stats, c) for c in clips]
    if not inputs:
        return np.zeros((0, N_CLASSES))
    return softmax(_logits_for_inputs(model.net, inputs), axis=1)


def classify_call(model: CallClassifierModel, clip: AudioClip):
    """Returns ``(probabilities, CallClass)`` for one call clip."""
    probs = classify_calls(model, [clip])[0]
    return probs, CallClass(int(np.argmax(probs)))


def extract_call_embedding(clip: AudioClip, mfcc: MfccConfig) -> np.ndarray:
    """Time-averaged MFCC vector of a call."""
    if len(clip.samples) < mfcc.frame_len:
        raise TooShort(f"{clip.duration_sec:.4f} s is shorter than one MFCC frame")
    return pool_mean(compute_mfcc(clip, mfcc).frames)


def stratified_split(items, fraction, seed):
    """Per-class random hold-out; every class with two or more items keeps one for training."""
    rng = np.random.default_rng(seed)
    train, val = [], []
    for cls in CallClass:
        group = [it for it in items if it.label == cls]
        order = rng.permutation(len(group))
        n_val = int(round(fraction * len(group)))
        if len(group) > 1:
            n_val = min(n_val, len(group) - 1)
        else:
            n_val = 0
        val.extend(group[i] for i in order[:n_val])
        train.extend(group[i] for i in order[n_val:])
    return train, val


def class_metrics(pred, labels) -> dict:
    """Accuracy and per-class recall; a class absent from ``labels`` gets NaN recall."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    out = {"accuracy": float(np.mean(pred == labels)) if len(labels) else float("nan")}
    for cls in CallClass:
        sel = labels == cls
        out[f"recall_{cls.label}"] = float(np.mean(pred[sel] == cls)) if sel.any() else float("nan")
    return out


def train_call_classifier(dataset, config: TrainConfig = TrainConfig(), validation=None,
                          mfcc: MfccConfig | None = None):
    """Fit the 3-way call classifier; returns ``(model, history)``.

    Without explicit ``validation`` a per-class stratified split of
    ``config.validation_fraction`` is held out. History rows carry accuracy
    and per-class recall on the validation calls.
    """
    dataset = list(dataset)
    if not dataset:
        raise EmptyDataset("no labelled calls to train on")
    if len({c.label for c in dataset}) < 2:
        raise SingleClass("call classifier needs at least two distinct labels")
    mfcc = mfcc or MfccConfig(sample_rate_hz=dataset[0].clip.sample_rate_hz)
    if validation is None:
        train, validation = stratified_split(dataset, config.validation_fraction, config.seed)
    else:
        train = dataset
    validation = validation or train

    identity = FeatureStats.identity(mfcc.n_mfcc)
    feats = [_inputs(mfcc, identity, c.clip, c.source or "call") for c in train]
    stats = fit_stats(feats)
    xs = [(f - stats.mean) / stats.std for f in feats]
    ys = [int(c.label) for c in train]
    val_x = [_inputs(mfcc, stats, c.clip) for c in validation]
    val_y = np.array([int(c.label) for c in validation])

    rng_init, rng_shuffle = seed_streams(config.seed)
    net = BiLstmNet.create(N_CLASSES, input_size=mfcc.n_mfcc, hidden_size=config.hidden_size,
                           num_layers=config.num_layers, pool=True, rng=rng_init)

    def evaluate(current):
        logits = _logits_for_inputs(current, val_x)
        metrics = class_metrics(np.argmax(logits, axis=1), val_y)
        metrics["val_loss"] = cross_entropy_loss(logits, val_y)[0]
        return metrics

    log.info("call classifier: %d training calls, %d validation calls",
             len(train), len(validation))
    best, history = run_training(net, xs, ys, config, evaluate, "accuracy", rng_shuffle,
                                 label="classifier", tie_key="val_loss")
    return CallClassifierModel(mfcc, stats, best), history
