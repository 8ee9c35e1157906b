"""Minibatch Adam loop shared by the detector and the call classifier."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass

import numpy as np

from .errors import BadConfig
from .nnet import AdamState, BiLstmNet, adam_step, objective

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 8
    seed: int = 0
    positive_only: bool = True
    validation_fraction: float = 0.2
    lr: float = 1e-3
    clip_norm: float = 5.0
    patience: int | None = 40
    hidden_size: int = 16
    num_layers: int = 3

    def __post_init__(self):
        if self.epochs < 1:
            raise BadConfig("epochs must be >= 1")
        if self.batch_size < 1:
            raise BadConfig("batch_size must be >= 1")
        if not 0 <= self.validation_fraction < 1:
            raise BadConfig("validation_fraction must be in [0, 1)")
        if self.patience is not None and self.patience < 1:
            raise BadConfig("patience must be >= 1 or None")

    def to_dict(self) -> dict:
        return asdict(self)


def pad_batch(seqs):
    """Stack variable-length ``(T_i, d)`` arrays into ``(B, T_max, d)`` plus lengths."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    T = int(lengths.max())
    d = seqs[0].shape[1]
    x = np.zeros((len(seqs), T, d))
    for k, s in enumerate(seqs):
        x[k, :len(s)] = s
    return x, lengths


def pad_labels(labels, T):
    y = np.zeros((len(labels), T))
    for k, lab in enumerate(labels):
        y[k, :len(lab)] = lab
    return y


def seed_streams(seed):
    """Independent generators for initialisation and shuffling."""
    init_ss, shuffle_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(shuffle_ss)


def run_training(net: BiLstmNet, inputs, targets, config: TrainConfig, evaluate,
                 score_key: str, rng_shuffle, label: str = "train",
                 tie_key: str | None = None):
    """Train ``net`` in place and return ``(best_net, history)``.

    ``evaluate(net)`` returns a dict of validation metrics, recorded every
    epoch; the parameters maximising ``metrics[score_key]`` are returned,
    with ties broken by the lower ``metrics[tie_key]`` when one is given.
    Training stops early after ``config.patience`` epochs without a strict
    gain in ``metrics[score_key]``.
    """
    state = AdamState(lr=config.lr, clip_norm=config.clip_norm)
    params = net.parameters()
    frame_targets = not net.pool
    n = len(inputs)
    best, best_rank = net.copy(), (-np.inf, -np.inf)
    best_score, since_best = -np.inf, 0
    history = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng_shuffle.permutation(n)
        losses, weights = [], []
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            x, lengths = pad_batch([inputs[i] for i in idx])
            if frame_targets:
                y = pad_labels([targets[i] for i in idx], x.shape[1])
            else:
                y = np.array([targets[i] for i in idx], dtype=np.int64)
            loss, grads = objective(net, x, lengths, y)
            adam_step(params, grads, state)
            losses.append(loss)
            weights.append(lengths.sum() if frame_targets else len(idx))
        metrics = evaluate(net)
        row = {"epoch": epoch, "train_loss": float(np.average(losses, weights=weights))}
        row.update(metrics)
        history.append(row)
        score = metrics[score_key]
        ranked = (score, -metrics[tie_key] if tie_key else 0.0)
        if ranked > best_rank:
            best, best_rank = net.copy(), ranked
        # patience counts epochs without a strict gain in the primary score only
        if score > best_score:
            best_score, since_best = score, 0
        else:
            since_best += 1
        log.info("%s epoch %d loss %.4f %s %.4f (%.1fs)", label, epoch, row["train_loss"],
                 score_key, score, time.perf_counter() - t0)
        if config.patience is not None and since_best >= config.patience:
            log.info("%s: no improvement for %d epochs, stopping", label, config.patience)
            break
    return best, history
