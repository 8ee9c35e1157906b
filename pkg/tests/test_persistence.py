import json

import numpy as np
import pytest

from titivad.call_classifier import CallClass, CallClassifierModel
from titivad.detector import DetectorModel
from titivad.errors import BadVersion, Corrupt, KindError, OverlapError, ParseError, ShapeMismatch
from titivad.features import FeatureStats, MfccConfig
from titivad.nnet import BiLstmNet
from titivad.persistence import (LabelRow, SegmentRow, dumps_model, format_float, load_model,
                                 loads_model, read_labels, read_segments, save_model,
                                 write_labels, write_segments)


def random_detector(seed):
    rng = np.random.default_rng(seed)
    mfcc = MfccConfig()
    net = BiLstmNet.create(1, input_size=mfcc.n_mfcc, rng=rng)
    for p in net.parameters().values():
        p[...] = rng.standard_normal(p.shape) * 10.0 ** rng.integers(-8, 3, size=p.shape)
    stats = FeatureStats(rng.standard_normal(40), rng.uniform(0.1, 3, 40))
    return DetectorModel(mfcc, stats, net, float(rng.uniform()))


def random_classifier(seed):
    rng = np.random.default_rng(seed)
    mfcc = MfccConfig()
    net = BiLstmNet.create(3, input_size=mfcc.n_mfcc, pool=True, rng=rng)
    return CallClassifierModel(mfcc, FeatureStats(rng.standard_normal(40), np.ones(40)), net)


def same_parameters(a, b):
    pa, pb = a.net.parameters(), b.net.parameters()
    assert pa.keys() == pb.keys()
    for k in pa:
        assert pa[k].shape == pb[k].shape
        assert np.array_equal(pa[k].view(np.int64), pb[k].view(np.int64)), k
    assert np.array_equal(a.stats.mean, b.stats.mean) and np.array_equal(a.stats.std, b.stats.std)


class TestModelFiles:
    @pytest.mark.parametrize("seed", range(5))
    def test_detector_round_trip_is_bit_exact(self, tmp_path, seed):
        model = random_detector(seed)
        save_model(model, tmp_path / "m.json")
        back = load_model(tmp_path / "m.json", "detector")
        same_parameters(model, back)
        assert back.decision_threshold == model.decision_threshold
        assert back.mfcc == model.mfcc

    def test_classifier_round_trip(self, tmp_path):
        model = random_classifier(1)
        save_model(model, tmp_path / "c.json")
        back = load_model(tmp_path / "c.json")
        assert isinstance(back, CallClassifierModel)
        same_parameters(model, back)

    def test_save_load_save_is_byte_identical(self, tmp_path):
        first = dumps_model(random_detector(7))
        assert dumps_model(loads_model(first)) == first

    def test_float_text_round_trips(self, rng):
        values = np.concatenate([rng.standard_normal(2000) * 10.0 ** rng.integers(-300, 300, 2000),
                                 [0.0, -0.0, 5e-324, 1.7976931348623157e308, 1.0, 0.1]])
        for v in values:
            assert float(format_float(float(v))) == v

    def test_wrong_kind(self, tmp_path):
        save_model(random_detector(0), tmp_path / "m.json")
        with pytest.raises(KindError):
            load_model(tmp_path / "m.json", "call_classifier")

    def test_bad_version(self):
        doc = json.loads(dumps_model(random_detector(0)))
        doc["format_version"] = 2
        with pytest.raises(BadVersion):
            loads_model(json.dumps(doc))

    def test_shape_mismatch(self):
        doc = json.loads(dumps_model(random_detector(0)))
        doc["parameters"]["head.bias"]["values"].append(0.0)
        with pytest.raises(ShapeMismatch):
            loads_model(json.dumps(doc))

    def test_architecture_disagreement(self):
        doc = json.loads(dumps_model(random_detector(0)))
        doc["architecture"]["hidden_per_direction"] = 8
        with pytest.raises(ShapeMismatch):
            loads_model(json.dumps(doc))

    @pytest.mark.parametrize("text", ["", "[1, 2]", "{not json"])
    def test_corrupt(self, text):
        with pytest.raises((Corrupt, BadVersion)):
            loads_model(text)

    def test_missing_parameter(self):
        doc = json.loads(dumps_model(random_detector(0)))
        del doc["parameters"]["lstm.2.U"]
        with pytest.raises(Corrupt):
            loads_model(json.dumps(doc))

    def test_file_carries_mfcc_config(self):
        doc = json.loads(dumps_model(random_detector(0)))
        assert doc["mfcc"]["n_mfcc"] == 40 and doc["architecture"]["layers"] == 3


class TestLabelsAndSegments:
    def test_header_only(self, tmp_path):
        path = tmp_path / "l.csv"
        path.write_text("file,start_sec,end_sec,class\n")
        assert read_labels(path) == {}

    def test_round_trip_to_six_decimals(self, tmp_path, rng):
        rows = []
        for f in ("a", "b"):
            t = np.sort(rng.uniform(0, 60, 20))
            rows += [LabelRow(f, float(t[2 * k]), float(t[2 * k + 1]),
                              None if k % 3 == 0 else CallClass(k % 3)) for k in range(10)]
        write_labels(tmp_path / "l.csv", rows)
        back = read_labels(tmp_path / "l.csv")
        flat = [r for f in sorted(back) for r in back[f]]
        assert len(flat) == len(rows)
        for got, want in zip(flat, rows):
            assert got.file == want.file and got.call_class == want.call_class
            assert abs(got.start_sec - want.start_sec) <= 5e-7
            assert abs(got.end_sec - want.end_sec) <= 5e-7

    def test_overlap_names_rows(self, tmp_path):
        path = tmp_path / "l.csv"
        path.write_text("file,start_sec,end_sec,class\na,0,2,0\nb,0,1,\na,1.5,3,1\n")
        with pytest.raises(OverlapError, match="line 2.*line 4"):
            read_labels(path)

    @pytest.mark.parametrize("body,line", [
        ("a,0,x,0\n", 2), ("a,0,1,0\na,2,1,0\n", 3), ("a,0,1,7\n", 2), ("a,0,1\n", 2),
        ("a,0,nan,0\n", 2),
    ])
    def test_parse_errors_report_line(self, tmp_path, body, line):
        path = tmp_path / "l.csv"
        path.write_text("file,start_sec,end_sec,class\n" + body)
        with pytest.raises(ParseError) as err:
            read_labels(path)
        assert err.value.line == line

    def test_bad_header(self, tmp_path):
        path = tmp_path / "l.csv"
        path.write_text("file,start,end,class\n")
        with pytest.raises(ParseError):
            read_labels(path)

    def test_segments_round_trip(self, tmp_path):
        rows = [SegmentRow("a", 0.1234567, 0.5, 0.91), SegmentRow("a", 1.0, 2.0, 0.5, CallClass(2), 0.8)]
        write_segments(tmp_path / "s.csv", rows)
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "file,start_sec,end_sec,score,class,prob"
        back = read_segments(tmp_path / "s.csv")["a"]
        assert back[0].start_sec == 0.123457 and back[0].call_class is None and back[0].prob is None
        assert back[1].call_class == CallClass.FALSE_ALARM and back[1].prob == 0.8
