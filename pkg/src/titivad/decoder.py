"""Turn per-frame posteriors (or band energy) into call segments.

Segment boundaries fall on frame edges: the midpoint between neighbouring
frame centres, with the outermost edges pinned to 0 and the clip duration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .audio_io import AudioClip
from .errors import BadBand, BadConfig, UnsortedInput
from .features import MfccConfig, power_spectrum, frame_times


@dataclass(frozen=True)
class CallSegment:
    start_sec: float
    end_sec: float
    score: float = 1.0

    @property
    def duration_sec(self) -> float:
        return self.end_sec - self.start_sec


@dataclass(frozen=True, eq=False)
class FramePosterior:
    """Per-frame activity probabilities with frame-centre timestamps."""

    probs: np.ndarray
    frame_times_sec: np.ndarray
    duration_sec: float | None = None

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        times = np.asarray(self.frame_times_sec, dtype=np.float64)
        if probs.shape != times.shape or probs.ndim != 1:
            raise ValueError("probs and frame_times_sec must be equal-length vectors")
        if len(times) > 1 and not np.all(np.diff(times) > 0):
            raise ValueError("frame times must be strictly increasing")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "frame_times_sec", times)
        if self.duration_sec is None and len(times):
            hop = np.median(np.diff(times)) if len(times) > 1 else 2 * times[0]
            object.__setattr__(self, "duration_sec", float(times[-1] + hop / 2))

    def __len__(self):
        return len(self.probs)

    def edges(self) -> np.ndarray:
        t = self.frame_times_sec
        inner = 0.5 * (t[1:] + t[:-1])
        return np.concatenate([[0.0], inner, [self.duration_sec]])


DEFAULT_TRANSITIONS = ((0.99, 0.01), (0.05, 0.95))


@dataclass(frozen=True)
class DecodeConfig:
    threshold: float = 0.5
    min_duration_sec: float = 0.10
    merge_gap_sec: float = 0.15
    beam_width: int = 8
    transition_logprob: np.ndarray = field(
        default_factory=lambda: np.log(np.array(DEFAULT_TRANSITIONS)))

    def __post_init__(self):
        A = np.asarray(self.transition_logprob, dtype=np.float64)
        object.__setattr__(self, "transition_logprob", A)
        if A.shape != (2, 2):
            raise BadConfig("transition_logprob must be 2x2")
        if not np.allclose(np.exp(A).sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise BadConfig("transition rows must sum to 1 in probability space")
        if self.beam_width < 1:
            raise BadConfig("beam_width must be >= 1")
        if self.min_duration_sec < 0 or self.merge_gap_sec < 0:
            raise BadConfig("min_duration_sec and merge_gap_sec must be >= 0")

    @classmethod
    def with_transitions(cls, probs, **kw) -> "DecodeConfig":
        return cls(transition_logprob=np.log(np.asarray(probs, dtype=np.float64)), **kw)


def runs_of(active) -> list[tuple[int, int]]:
    """Maximal runs of truthy entries as inclusive ``(first, last)`` index pairs."""
    a = np.asarray(active, dtype=bool).astype(np.int8)
    d = np.diff(np.concatenate([[0], a, [0]]))
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def post_filter(runs, edges, merge_gap_sec, min_duration_sec):
    """Merge runs separated by less than ``merge_gap_sec``, then drop short ones."""
    merged = []
    for first, last in runs:
        if merged and edges[first] - edges[merged[-1][1] + 1] < merge_gap_sec:
            merged[-1] = (merged[-1][0], last)
        else:
            merged.append((first, last))
    return [(a, b) for a, b in merged if edges[b + 1] - edges[a] >= min_duration_sec]


def runs_to_segments(runs, edges, scores) -> list[CallSegment]:
    return [CallSegment(float(edges[a]), float(edges[b + 1]), float(np.mean(scores[a:b + 1])))
            for a, b in runs]


def decode_threshold(posteriors: FramePosterior, cfg: DecodeConfig = DecodeConfig()):
    edges = posteriors.edges()
    runs = runs_of(posteriors.probs >= cfg.threshold)
    runs = post_filter(runs, edges, cfg.merge_gap_sec, cfg.min_duration_sec)
    return runs_to_segments(runs, edges, posteriors.probs)


def path_score(states, probs, transition_logprob) -> float:
    """Log score of a binary state path, summed left to right."""
    probs = np.asarray(probs, dtype=np.float64)
    A = np.asarray(transition_logprob)
    total = 0.0
    prev = None
    for p, s in zip(probs, states):
        total += np.log(0.5) if prev is None else A[prev, s]
        total += np.log(p) if s else np.log1p(-p)
        prev = s
    return total


def beam_search(probs, transition_logprob, beam_width):
    """Best binary state path under per-frame emissions and a bigram transition model.

    Hypotheses sharing a last state are recombined (only the best survives),
    since their futures score identically; with two states a beam of width 2
    therefore keeps every live hypothesis and the search is exact. Ties prefer
    state 1. Returns ``(states, score)``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    A = np.asarray(transition_logprob, dtype=np.float64)
    T = len(probs)
    if T == 0:
        return np.zeros(0, dtype=np.int8), 0.0
    log_emit = np.stack([np.log1p(-probs), np.log(probs)], axis=1)
    back = np.full((T, 2), -1, dtype=np.int64)
    # beam: list of (score, state) pairs ordered best first
    beam = []
    for s in (1, 0):
        beam.append((np.log(0.5) + log_emit[0, s], s))
    beam = _prune(beam, beam_width)
    for t in range(1, T):
        best = {}
        for score, prev in beam:
            for s in (1, 0):
                cand = score + A[prev, s] + log_emit[t, s]
                if s not in best or cand > best[s][0]:
                    best[s] = (cand, prev)
        beam = []
        for s in (1, 0):
            if s in best:
                back[t, s] = best[s][1]
                beam.append((best[s][0], s))
        beam = _prune(beam, beam_width)
    score, state = beam[0]
    states = np.empty(T, dtype=np.int8)
    for t in range(T - 1, -1, -1):
        states[t] = state
        state = back[t, state]
    return states, float(score)


def _prune(beam, width):
    # stable sort on score only keeps state 1 ahead of state 0 on ties
    return sorted(beam, key=lambda h: -h[0])[:width]


def decode_beam(posteriors: FramePosterior, cfg: DecodeConfig = DecodeConfig()):
    """Returns ``(states, segments)``; segments use the same post-filters as thresholding."""
    probs = np.clip(posteriors.probs, 1e-300, 1.0 - 1e-16)
    states, _ = beam_search(probs, cfg.transition_logprob, cfg.beam_width)
    edges = posteriors.edges()
    runs = post_filter(runs_of(states), edges, cfg.merge_gap_sec, cfg.min_duration_sec)
    return states, runs_to_segments(runs, edges, posteriors.probs)


def band_energy(clip: AudioClip, band_lo_hz, band_hi_hz, mfcc: MfccConfig | None = None):
    """Per-frame power summed over FFT bins in ``[band_lo_hz, band_hi_hz]``."""
    mfcc = mfcc or MfccConfig(sample_rate_hz=clip.sample_rate_hz)
    nyquist = clip.sample_rate_hz / 2
    if not 0 <= band_lo_hz < band_hi_hz <= nyquist:
        raise BadBand(f"need 0 <= band_lo < band_hi <= {nyquist}, got [{band_lo_hz}, {band_hi_hz}]")
    power = power_spectrum(clip, mfcc)
    freqs = np.arange(power.shape[1]) * clip.sample_rate_hz / mfcc.n_fft
    sel = (freqs >= band_lo_hz) & (freqs <= band_hi_hz)
    return power[:, sel].sum(axis=1), frame_times(len(power), mfcc)


def energy_band_detect(clip: AudioClip, band_lo_hz=700.0, band_hi_hz=1400.0, k_sigma=1.0,
                       cfg: DecodeConfig = DecodeConfig(), mfcc: MfccConfig | None = None):
    """Baseline detector: frames whose band energy exceeds mean + k_sigma * std."""
    energy, times = band_energy(clip, band_lo_hz, band_hi_hz, mfcc)
    thresh = energy.mean() + k_sigma * energy.std()
    edges = FramePosterior(np.zeros(len(times)), times, clip.duration_sec).edges()
    runs = post_filter(runs_of(energy > thresh), edges, cfg.merge_gap_sec, cfg.min_duration_sec)
    return runs_to_segments(runs, edges, energy)


class EventMatch(NamedTuple):
    hits: int
    misses: int
    false_alarms: int


def check_sorted(segments, what="segments"):
    for a, b in zip(segments, segments[1:]):
        if b.start_sec < a.end_sec:
            raise UnsortedInput(f"{what} must be sorted and non-overlapping")
    for s in segments:
        if not s.start_sec < s.end_sec:
            raise UnsortedInput(f"{what} must have start < end")


def iou(a: CallSegment, b: CallSegment) -> float:
    inter = min(a.end_sec, b.end_sec) - max(a.start_sec, b.start_sec)
    if inter <= 0:
        return 0.0
    union = max(a.end_sec, b.end_sec) - min(a.start_sec, b.start_sec)
    return inter / union


def match_pairs(predicted, reference, iou_min=0.3) -> list[tuple[int, int]]:
    """Greedy one-to-one matching by descending IoU; pairs are ``(pred_idx, ref_idx)``."""
    check_sorted(predicted, "predicted segments")
    check_sorted(reference, "reference segments")
    cands = []
    for i, p in enumerate(predicted):
        for j, r in enumerate(reference):
            v = iou(p, r)
            if v >= iou_min and v > 0:
                cands.append((-v, i, j))
    cands.sort()
    used_p, used_r, pairs = set(), set(), []
    for _, i, j in cands:
        if i not in used_p and j not in used_r:
            used_p.add(i)
            used_r.add(j)
            pairs.append((i, j))
    return sorted(pairs)


def match_events(predicted, reference, iou_min=0.3) -> EventMatch:
    hits = len(match_pairs(predicted, reference, iou_min))
    return EventMatch(hits, len(reference) - hits, len(predicted) - hits)
