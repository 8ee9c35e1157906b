import itertools
import logging

import numpy as np
import pytest

from conftest import tone
from titivad.audio_io import AudioClip
from titivad.decoder import (CallSegment, DecodeConfig, FramePosterior, beam_search,
                             decode_beam, decode_threshold, energy_band_detect, iou,
                             match_events, match_pairs, path_score, post_filter, runs_of)
from titivad.errors import BadBand, BadConfig, UnsortedInput

log = logging.getLogger(__name__)

HOP = 0.01


def posterior(probs, hop=HOP, duration=None):
    probs = np.asarray(probs, dtype=np.float64)
    times = 0.0125 + hop * np.arange(len(probs))
    return FramePosterior(probs, times, duration)


def random_transitions(rng):
    stay = rng.uniform(0.5, 0.999, size=2)
    return np.log(np.array([[stay[0], 1 - stay[0]], [1 - stay[1], stay[1]]]))


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def exhaustive_best(probs, A):
    best = -np.inf
    for states in itertools.product((0, 1), repeat=len(probs)):
        best = max(best, path_score(states, probs, A))
    return best


def naive_threshold_scan(post: FramePosterior, cfg: DecodeConfig):
    """Literal reading of the three rules, one frame at a time."""
    p = post.probs.tolist()
    t = post.frame_times_sec.tolist()
    edges = [0.0] + [0.5 * (t[i] + t[i + 1]) for i in range(len(t) - 1)] + [post.duration_sec]
    runs, start = [], None
    for i, v in enumerate(p):
        if v >= cfg.threshold and start is None:
            start = i
        if v < cfg.threshold and start is not None:
            runs.append([start, i - 1])
            start = None
    if start is not None:
        runs.append([start, len(p) - 1])
    merged = []
    for r in runs:
        if merged and edges[r[0]] - edges[merged[-1][1] + 1] < cfg.merge_gap_sec:
            merged[-1][1] = r[1]
        else:
            merged.append(r)
    out = []
    for a, b in merged:
        if edges[b + 1] - edges[a] >= cfg.min_duration_sec:
            out.append((edges[a], edges[b + 1], float(np.mean(post.probs[a:b + 1]))))
    return out


def optimal_match_count(pred, ref, iou_min):
    best = 0
    for perm in itertools.permutations(range(len(ref)), min(len(pred), len(ref))):
        pairs = zip(range(len(pred)), perm)
        best = max(best, sum(1 for i, j in pairs if iou(pred[i], ref[j]) >= iou_min))
    if len(pred) > len(ref):
        return max(best, optimal_match_count(ref, pred, iou_min))
    return best


def random_segments(rng, n, span=10.0):
    cuts = np.sort(rng.uniform(0, span, 2 * n))
    return [CallSegment(float(cuts[2 * k]), float(cuts[2 * k + 1])) for k in range(n)
            if cuts[2 * k] < cuts[2 * k + 1]]


# ---------------------------------------------------------------------------
# decode_threshold
# ---------------------------------------------------------------------------

class TestDecodeThreshold:
    def test_all_zero_gives_nothing(self):
        assert decode_threshold(posterior(np.zeros(500))) == []

    def test_all_one_over_five_seconds(self):
        post = posterior(np.ones(498), duration=5.0)
        (seg,) = decode_threshold(post)
        assert (seg.start_sec, seg.end_sec, seg.score) == (0.0, 5.0, 1.0)

    def test_matches_naive_scan_on_1000_instances(self, rng):
        for _ in range(1000):
            T = int(rng.integers(1, 120))
            smooth = rng.uniform() < 0.5
            p = rng.uniform(size=T)
            if smooth:
                p = np.convolve(p, np.ones(5) / 5, mode="same")
            cfg = DecodeConfig(threshold=float(rng.choice([0.5, rng.uniform()])),
                               min_duration_sec=float(rng.choice([0.0, 0.1, rng.uniform(0, 0.3)])),
                               merge_gap_sec=float(rng.choice([0.0, 0.15, rng.uniform(0, 0.3)])))
            post = posterior(p, hop=float(rng.choice([0.01, 0.016])))
            got = [(s.start_sec, s.end_sec, s.score) for s in decode_threshold(post, cfg)]
            assert got == naive_threshold_scan(post, cfg)

    def test_threshold_is_inclusive(self):
        (seg,) = decode_threshold(posterior(np.full(50, 0.5)))
        assert seg.start_sec == 0.0

    def test_scores_recomputed_after_merge(self):
        p = np.r_[np.full(20, 0.9), np.full(5, 0.1), np.full(20, 0.7)]
        (seg,) = decode_threshold(posterior(p), DecodeConfig(merge_gap_sec=0.1))
        assert seg.score == pytest.approx(np.mean(p))

    def test_post_filter_is_idempotent(self, rng):
        for _ in range(200):
            post = posterior(rng.uniform(size=80))
            edges = post.edges()
            gap, dur = rng.uniform(0, 0.2, size=2)
            once = post_filter(runs_of(post.probs >= 0.5), edges, gap, dur)
            assert post_filter(once, edges, gap, dur) == once

    def test_segments_sorted_and_inside_window(self, rng):
        for _ in range(200):
            post = posterior(rng.uniform(size=int(rng.integers(1, 200))))
            segs = decode_threshold(post, DecodeConfig(min_duration_sec=0.0, merge_gap_sec=0.0))
            for s in segs:
                assert 0.0 <= s.start_sec < s.end_sec <= post.duration_sec
            for a, b in zip(segs, segs[1:]):
                assert a.end_sec < b.start_sec


# ---------------------------------------------------------------------------
# beam search
# ---------------------------------------------------------------------------

class TestBeam:
    def test_equals_exhaustive_search_on_200_instances(self, rng):
        for _ in range(200):
            T = int(rng.integers(1, 13))
            p = rng.uniform(0.001, 0.999, size=T)
            if rng.uniform() < 0.3:
                p = np.round(p, 1).clip(0.1, 0.9)
            A = random_transitions(rng)
            width = int(rng.integers(2, 9))
            states, score = beam_search(p, A, width)
            assert score == exhaustive_best(p, A)
            assert score == path_score(states, p, A)

    def test_score_non_decreasing_in_width(self, rng):
        for _ in range(100):
            p = rng.uniform(0.01, 0.99, size=40)
            A = random_transitions(rng)
            scores = [beam_search(p, A, w)[1] for w in (1, 2, 3, 8)]
            assert scores == sorted(scores)
            assert scores[1] == scores[-1]

    def test_uniform_transitions_reduce_to_thresholding(self, rng):
        cfg = DecodeConfig.with_transitions([[0.5, 0.5], [0.5, 0.5]])
        for _ in range(100):
            p = rng.uniform(size=60)
            p[rng.integers(0, 60, size=5)] = 0.5
            states, _ = decode_beam(posterior(p), cfg)
            np.testing.assert_array_equal(states, (p >= 0.5).astype(np.int8))

    def test_isolated_frame_is_suppressed_by_sticky_transitions(self):
        p = [0.1, 0.1, 0.1, 0.9, 0.1, 0.1, 0.1]
        A = DecodeConfig().transition_logprob
        # Viterbi oracle: staying off costs log(0.99) per step, a one-frame
        # excursion pays log(0.01) + log(0.05) in transitions to gain log(9).
        on = [0, 0, 0, 1, 0, 0, 0]
        assert path_score([0] * 7, p, A) > path_score(on, p, A)
        states, segs = decode_beam(posterior(p), DecodeConfig(min_duration_sec=0.0))
        assert states.tolist() == [0] * 7 and segs == []
        loose = DecodeConfig(min_duration_sec=0.0)
        assert len(decode_threshold(posterior(p), loose)) == 1
        assert decode_threshold(posterior(p)) == []

    def test_empty_sequence(self):
        states, score = beam_search(np.zeros(0), DecodeConfig().transition_logprob, 4)
        assert len(states) == 0 and score == 0.0

    def test_extreme_probabilities_are_finite(self):
        states, segs = decode_beam(posterior(np.r_[np.zeros(30), np.ones(30)]))
        assert states.tolist() == [0] * 30 + [1] * 30
        assert len(segs) == 1


class TestDecodeConfig:
    def test_rows_must_be_distributions(self):
        with pytest.raises(BadConfig):
            DecodeConfig.with_transitions([[0.9, 0.2], [0.5, 0.5]])

    def test_bad_shape_and_width(self):
        with pytest.raises(BadConfig):
            DecodeConfig(transition_logprob=np.zeros(3))
        with pytest.raises(BadConfig):
            DecodeConfig(beam_width=0)


# ---------------------------------------------------------------------------
# energy baseline
# ---------------------------------------------------------------------------

class TestEnergyBand:
    def test_silence_gives_nothing(self):
        assert energy_band_detect(AudioClip(np.zeros(16000), 16000)) == []

    def test_tone_burst_in_silence(self):
        rate = 16000
        samples = np.zeros(3 * rate)
        burst = tone(1000.0, 0.5, rate).samples
        samples[rate:rate + len(burst)] = burst
        (seg,) = energy_band_detect(AudioClip(samples, rate))
        assert abs(seg.start_sec - 1.0) <= HOP
        assert abs(seg.end_sec - 1.5) <= HOP

    def test_out_of_band_tone_is_ignored(self, rng):
        rate = 16000
        samples = 0.001 * rng.standard_normal(3 * rate)
        burst = tone(4000.0, 0.5, rate).samples
        samples[rate:rate + len(burst)] += burst
        segs = energy_band_detect(AudioClip(samples, rate))
        assert all(not (s.start_sec < 1.5 and s.end_sec > 1.0) for s in segs)

    def test_bad_band(self):
        with pytest.raises(BadBand):
            energy_band_detect(AudioClip(np.zeros(1600), 16000), 1400.0, 700.0)
        with pytest.raises(BadBand):
            energy_band_detect(AudioClip(np.zeros(1600), 16000), 100.0, 9000.0)


# ---------------------------------------------------------------------------
# event matching
# ---------------------------------------------------------------------------

class TestMatchEvents:
    def test_identity(self, rng):
        segs = random_segments(rng, 6)
        assert match_events(segs, segs) == (len(segs), 0, 0)

    def test_empty_predicted(self, rng):
        segs = random_segments(rng, 4)
        assert match_events([], segs) == (0, len(segs), 0)

    def test_iou(self):
        assert iou(CallSegment(0, 2), CallSegment(1, 3)) == pytest.approx(1 / 3)
        assert iou(CallSegment(0, 1), CallSegment(1, 2)) == 0.0

    def test_greedy_against_exhaustive_optimum(self, rng):
        mismatches = 0
        for _ in range(500):
            ref = random_segments(rng, int(rng.integers(0, 7)))
            pred = random_segments(rng, int(rng.integers(0, 7)))
            greedy = match_events(pred, ref).hits
            best = optimal_match_count(pred, ref, 0.3)
            assert greedy <= best
            if greedy < best:
                mismatches += 1
                log.info("greedy %d < optimal %d for pred=%s ref=%s", greedy, best, pred, ref)
        assert mismatches <= 5

    def test_pairs_are_one_to_one(self, rng):
        for _ in range(200):
            pairs = match_pairs(random_segments(rng, 6), random_segments(rng, 6), 0.1)
            assert len({i for i, _ in pairs}) == len(pairs) == len({j for _, j in pairs})

    def test_unsorted_input_rejected(self):
        with pytest.raises(UnsortedInput):
            match_events([CallSegment(2, 3), CallSegment(0, 1)], [])
