import csv
import json

import numpy as np
import pytest

from titivad.audio_io import AudioClip, write_wav
from titivad.cli import run_cli

TRAIN = ["--epochs", "3", "--patience", "0"]


def run(*argv):
    return run_cli([str(a) for a in argv])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run("synth", "--out", data, "--files", 4, "--duration", 10, "--calls-per-minute", 18,
               "--nlp-fraction", 0.5, "--seed", 3) == 0
    return root, data


@pytest.fixture(scope="module")
def detector(corpus):
    root, data = corpus
    out = root / "det.json"
    assert run("train-detector", "--data", data, "--labels", data / "labels.csv", "--out", out,
               *TRAIN) == 0
    return out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestPipeline:
    def test_synth_writes_corpus(self, corpus):
        _, data = corpus
        assert len(list(data.glob("*.wav"))) == 4
        assert read_csv(data / "labels.csv")

    def test_train_detector_writes_model_and_history(self, detector):
        assert json.loads(detector.read_text())["kind"] == "detector"
        rows = read_csv(detector.parent / "history.csv")
        assert len(rows) == 3 and {"epoch", "instance_accuracy", "train_loss"} <= set(rows[0])

    @pytest.mark.parametrize("decoder", ["threshold", "beam", "energy"])
    def test_detect(self, corpus, detector, decoder):
        root, data = corpus
        out = root / f"seg_{decoder}.csv"
        model = [] if decoder == "energy" else ["--model", detector]
        assert run("detect", *model, "--audio", data, "--decoder", decoder, "--out", out) == 0
        assert out.read_text().startswith("file,start_sec,end_sec,score,class,prob")

    def test_stage_two_and_evaluation(self, corpus, detector):
        root, data = corpus
        labels = data / "labels.csv"
        clf, seg, classified = root / "clf.json", root / "seg.csv", root / "classified.csv"
        assert run("train-classifier", "--data", data, "--labels", labels,
                   "--detector", detector, "--out", clf, "--epochs", 2) == 0
        assert run("detect", "--model", detector, "--audio", data, "--decoder", "energy",
                   "--out", seg) == 0
        assert run("classify", "--model", clf, "--segments", seg, "--audio", data,
                   "--out", classified) == 0
        rows = read_csv(classified)
        assert len(rows) == len(read_csv(seg))
        assert all(r["class"] in ("0", "1", "2") and 0 <= float(r["prob"]) <= 1 for r in rows)
        report = root / "report.json"
        assert run("eval", "--classified", classified, "--labels", labels, "--report", report,
                   "--audio", data, "--rows", root / "rows.csv") == 0
        doc = json.loads(report.read_text())
        assert {"instance_accuracy", "hits_corr", "event_precision", "defined"} <= set(doc)
        assert len(read_csv(root / "rows.csv")) == 4

    def test_export_features(self, corpus):
        root, data = corpus
        out = root / "emb.csv"
        # a labels file has the wrong header for a segments file
        assert run("export-features", "--segments", data / "labels.csv", "--audio", data,
                   "--out", out) == 2
        seg = root / "labels_as_segments.csv"
        rows = read_csv(data / "labels.csv")
        with open(seg, "w") as fh:
            fh.write("file,start_sec,end_sec,score,class,prob\n")
            for r in rows:
                fh.write(f"{r['file']},{r['start_sec']},{r['end_sec']},1.0,{r['class']},\n")
        assert run("export-features", "--segments", seg, "--audio", data, "--out", out) == 0
        got = read_csv(out)
        assert len(got) == len(rows) and "mfcc_39" in got[0]

    def test_scaling_exp(self, corpus):
        root, data = corpus
        out = root / "curves.csv"
        assert run("scaling-exp", "--data", data, "--labels", data / "labels.csv",
                   "--fractions", "0.5,1.0", "--out", out, *TRAIN) == 0
        rows = read_csv(out)
        assert [float(r["fraction"]) for r in rows] == [0.5, 1.0]
        assert {"instance_accuracy", "conditional_accuracy", "hits_corr"} <= set(rows[0])


class TestReproducibility:
    def test_threads_do_not_change_outputs(self, corpus, tmp_path):
        _, data = corpus
        outputs = {}
        for threads in (1, 4):
            d = tmp_path / f"t{threads}"
            d.mkdir()
            assert run("--threads", threads, "synth", "--out", d / "data", "--files", 3,
                       "--duration", 6, "--seed", 5) == 0
            assert run("train-detector", "--threads", threads, "--data", data,
                       "--labels", data / "labels.csv", "--out", d / "det.json", *TRAIN) == 0
            assert run("detect", "--threads", threads, "--model", d / "det.json", "--audio", data,
                       "--out", d / "seg.csv") == 0
            outputs[threads] = {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*"))
                                if p.is_file()}
        assert outputs[1] == outputs[4]

    def test_gradcheck_seed_zero(self, capsys):
        assert run("gradcheck", "--seed", 0) == 0
        line = [ln for ln in capsys.readouterr().out.splitlines() if "max relative error" in ln][0]
        assert float(line.split()[3]) < 1e-5


class TestErrors:
    def test_usage_errors(self, capsys):
        assert run("frobnicate") == 1
        assert run("synth") == 1
        assert run("synth", "--out", "x", "--bogus") == 1

    def test_rate_mismatch_names_file(self, corpus, detector, tmp_path, capsys):
        write_wav(AudioClip(np.zeros(22050), 22050), tmp_path / "odd.wav")
        assert run("detect", "--model", detector, "--audio", tmp_path, "--out",
                   tmp_path / "s.csv") == 2
        assert "odd" in capsys.readouterr().err

    def test_missing_data(self, tmp_path, detector):
        assert run("detect", "--model", detector, "--audio", tmp_path, "--out", tmp_path / "s") == 2
        assert run("detect", "--model", tmp_path / "none.json", "--audio", tmp_path,
                   "--out", tmp_path / "s") == 2

    def test_wrong_model_kind(self, corpus, detector, tmp_path):
        _, data = corpus
        assert run("classify", "--model", detector, "--segments", data / "labels.csv",
                   "--audio", data, "--out", tmp_path / "c.csv") == 2

    def test_gradcheck_failure_is_numeric(self):
        assert run("gradcheck", "--tolerance", 1e-30) == 3


def test_gradcheck_richardson_flag(capsys):
    assert run_cli(["gradcheck", "--seed", "6", "--richardson", "--quiet"]) == 0
    line = capsys.readouterr().out.strip()
    assert float(line.split()[3]) < 1e-5
