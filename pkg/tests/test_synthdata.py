import numpy as np
import pytest

from titivad.audio_io import encode_wav, load_wav
from titivad.call_classifier import CallClass
from titivad.decoder import CallSegment, energy_band_detect, match_events
from titivad.detector import frame_labels_from_segments
from titivad.errors import BadConfig
from titivad.features import MfccConfig, frame_times
from titivad.persistence import read_labels
from titivad.synthdata import (SynthConfig, generate_dataset, generate_file, standard_benchmark,
                               write_dataset)


@pytest.fixture(scope="module")
def benchmark():
    return standard_benchmark(7)


def small(**kw):
    base = dict(n_files=3, file_duration_sec=10.0, calls_per_minute=12.0, seed=3)
    base.update(kw)
    return SynthConfig(**base)


class TestGenerateDataset:
    def test_no_calls_no_distractors_is_pure_noise(self):
        cfg = small(calls_per_minute=0, distractor_rate=0)
        for f in generate_dataset(cfg):
            assert f.labels == [] and f.distractors == []
            rms = np.sqrt(np.mean(f.clip.samples ** 2))
            assert rms == pytest.approx(cfg.noise_rms, rel=0.01)

    def test_same_seed_same_bytes(self):
        a, b = generate_dataset(small()), generate_dataset(small())
        for fa, fb in zip(a, b):
            assert encode_wav(fa.clip) == encode_wav(fb.clip)
            assert fa.labels == fb.labels and fa.distractors == fb.distractors

    def test_different_seed_differs(self):
        a, b = generate_file(small(), 0), generate_file(small(seed=4), 0)
        assert not np.array_equal(a.clip.samples, b.clip.samples)

    def test_files_do_not_depend_on_generation_order(self):
        cfg = small()
        forward = generate_dataset(cfg)
        alone = generate_file(cfg, 2)
        assert np.array_equal(forward[2].clip.samples, alone.clip.samples)

    def test_labels_inside_file_and_disjoint_from_everything(self):
        cfg = small(n_files=8, distractor_rate=8.0)
        for f in generate_dataset(cfg):
            events = sorted([(r.start_sec, r.end_sec) for r in f.labels]
                            + [(d.start_sec, d.end_sec) for d in f.distractors])
            for s, e in events:
                assert 0 <= s < e <= cfg.file_duration_sec
            for (_, e), (s, _) in zip(events, events[1:]):
                assert e <= s
            assert all(r.call_class in (CallClass.CLEAN_CALL, CallClass.NONLINEAR_CALL)
                       for r in f.labels)

    def test_labels_agree_with_energy_of_clean_track(self):
        cfg = small(n_files=4)
        mfcc = MfccConfig()
        for f in generate_dataset(cfg, keep_tracks=True):
            n = mfcc.num_frames(len(f.call_track))
            rasterised = frame_labels_from_segments(
                [CallSegment(r.start_sec, r.end_sec) for r in f.labels],
                frame_times(n, mfcc), mfcc.frame_len_sec)
            active = f.call_track != 0
            starts = np.arange(n) * mfcc.hop
            oracle = np.array([active[s:s + mfcc.frame_len].sum() * 2 >= mfcc.frame_len
                               for s in starts]).astype(np.int8)
            np.testing.assert_array_equal(rasterised, oracle)

    def test_call_level_matches_snr(self):
        cfg = small(n_files=1, snr_db=6.0)
        f = generate_file(cfg, 0, keep_track=True)
        rate = cfg.sample_rate_hz
        for r in f.labels:
            seg = f.call_track[int(round(r.start_sec * rate)):int(round(r.end_sec * rate))]
            snr = 20 * np.log10(np.sqrt(np.mean(seg ** 2)) / cfg.noise_rms)
            assert snr == pytest.approx(6.0, abs=1e-9)

    def test_written_dataset_round_trips(self, tmp_path):
        files = generate_dataset(small())
        write_dataset(files, tmp_path)
        labels = read_labels(tmp_path / "labels.csv")
        for f in files:
            assert np.array_equal(load_wav(tmp_path / f"{f.file_id}.wav").samples, f.clip.samples)
            got = labels.get(f.file_id, [])
            assert [(r.start_sec, r.end_sec, r.call_class) for r in got] == \
                [(round(r.start_sec, 6), round(r.end_sec, 6), r.call_class) for r in f.labels]

    @pytest.mark.parametrize("bad", [
        dict(call_duration_sec=(1.0, 0.5)), dict(call_f0_hz=(0.0, 100.0)),
        dict(calls_per_minute=-1.0), dict(snr_db=float("inf")), dict(noise_kind="brown"),
        dict(nlp_fraction=1.5), dict(call_f0_hz=(800.0, 4000.0)),
    ])
    def test_bad_config(self, bad):
        with pytest.raises(BadConfig):
            small(**bad)


class TestStandardBenchmark:
    def test_layout(self, benchmark):
        assert len(benchmark.files) == 50
        assert (len(benchmark.train), len(benchmark.validation)) == (40, 10)
        assert not {f.file_id for f in benchmark.train} & {f.file_id for f in benchmark.validation}
        assert all(f.clip.duration_sec == 60.0 for f in benchmark.files)

    def test_event_count_in_poisson_range(self, benchmark):
        assert 120 <= sum(len(f.labels) for f in benchmark.files) <= 280

    def test_nonlinear_share(self, benchmark):
        labels = [r for f in benchmark.files for r in f.labels]
        share = sum(r.call_class == CallClass.NONLINEAR_CALL for r in labels) / len(labels)
        assert 0.2 <= share <= 0.4

    def test_energy_baseline_has_high_recall(self, benchmark):
        hits = refs = 0
        for f in benchmark.files:
            ref = [CallSegment(r.start_sec, r.end_sec) for r in f.labels]
            m = match_events(energy_band_detect(f.clip), ref)
            hits, refs = hits + m.hits, refs + len(ref)
        assert hits / refs >= 0.9
