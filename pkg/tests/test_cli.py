import json
import subprocess
import sys

import numpy as np
import pytest

from loopvq import loops, midi
from loopvq import pianoroll as pr
from loopvq.cli import main
from loopvq.models import load_model
from loopvq.models.vqvae import load_codes

import corpus


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Corpus, extracted dataset and a briefly trained vq-vae plus prior."""
    root = tmp_path_factory.mktemp("cli")
    mids = root / "midi"
    mids.mkdir()
    corpus.write_corpus(mids)
    (mids / "zz_garbage.mid").write_bytes(b"MThd\x00\x00\x00\x06junk")
    ds = str(root / "loops.lpd")
    assert main(["extract", "--midi-dir", str(mids), "--out", ds]) == 0
    vq = str(root / "vq.ckpt")
    assert main(["train", "--dataset", ds, "--model", "vq-vae", "--epochs", "2", "--batch", "4",
                 "--seed", "0", "--out", vq]) == 0
    prior = str(root / "prior.ckpt")
    assert main(["train-prior", "--vqvae", vq, "--dataset", ds, "--out", prior, "--epochs", "2"]) == 0
    return {"root": root, "midi": mids, "dataset": ds, "vq": vq, "prior": prior}


def test_extract_yields_exactly_the_hand_enumerated_loops(work, capsys):
    ds = loops.load_dataset(work["dataset"])
    got = {(r.source_id, r.bar_offset): r.pianoroll for r in ds.records}
    want = corpus.expected_loops()
    assert sorted(got) == sorted(want)
    for key, roll in want.items():
        assert np.array_equal(got[key], roll), key
    assert ds.params["skipped"] == {"unreadable": 1, "not_four_four": 1}
    assert ds.params["midi_files"] == 13


def test_extract_is_deterministic(work, tmp_path):
    out = tmp_path / "again.lpd"
    assert main(["extract", "--midi-dir", str(work["midi"]), "--out", str(out)]) == 0
    with open(work["dataset"], "rb") as a, open(out, "rb") as b:
        assert a.read() == b.read()


def test_extract_threshold_flag(work, tmp_path):
    # at 3/1488 + a little, the three-cell song also qualifies
    out = tmp_path / "loose.lpd"
    assert main(["extract", "--midi-dir", str(work["midi"]), "--out", str(out), "--threshold", "0.0021"]) == 0
    keys = {(r.source_id, r.bar_offset) for r in loops.load_dataset(out).records}
    assert ("05_three_cells.mid", 0) in keys


def test_train_writes_checkpoint_and_log(work):
    log = open(work["vq"] + ".log").read().splitlines()
    assert log[0].startswith("epoch=0 ") and "perplexity=" in log[0]
    assert log[-1].startswith("final train_reconstruction_error=")
    model = load_model(work["vq"])
    assert model.kind == "vq-vae"


def test_train_is_deterministic(work, tmp_path):
    out = tmp_path / "vq2.ckpt"
    assert main(["train", "--dataset", work["dataset"], "--model", "vq-vae", "--epochs", "2", "--batch", "4",
                 "--seed", "0", "--out", str(out)]) == 0
    assert open(out, "rb").read() == open(work["vq"], "rb").read()


@pytest.mark.parametrize("model", ["ar-lstm-vae", "nonar-lstm-vae", "cnn-vae"])
def test_train_and_sample_continuous(work, tmp_path, model):
    ckpt = str(tmp_path / "m.ckpt")
    assert main(["train", "--dataset", work["dataset"], "--model", model, "--epochs", "1", "--batch", "8",
                 "--seed", "1", "--out", ckpt]) == 0
    out = tmp_path / "samples"
    assert main(["sample", "--model", ckpt, "--n", "3", "--seed", "2", "--out", str(out)]) == 0
    rolls = loops.load_pianorolls(out / "samples.lpd")
    assert rolls.shape == (3, 128, 93) and set(np.unique(rolls)) <= {0, 1}
    assert main(["sample", "--model", ckpt, "--n", "1", "--seed", "2", "--loop-consistency",
                 "--out", str(out)]) == 1


def test_train_prior_writes_codes_cache(work):
    codes, k = load_codes(work["prior"] + ".codes")
    assert k == 512 and codes.shape == (9, 32)
    assert "teacher_forcing_accuracy" in open(work["prior"] + ".log").read()


def test_sample_modes_and_determinism(work, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["sample", "--model", work["vq"], "--prior", work["prior"], "--n", "5", "--temperature", "1.5",
            "--seed", "7"]
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert (a / "samples.lpd").read_bytes() == (b / "samples.lpd").read_bytes()
    assert (a / "codes.bin").read_bytes() == (b / "codes.bin").read_bytes()

    c = tmp_path / "c"
    assert main(args + ["--loop-consistency", "--out", str(c)]) == 0
    codes = load_codes(c / "codes.bin")[0]
    assert np.array_equal(codes[:, 16:18], codes[:, 0:2])

    g = tmp_path / "g"
    assert main(["sample", "--model", work["vq"], "--prior", work["prior"], "--n", "3", "--argmax",
                 "--seed", "1", "--out", str(g)]) == 0
    greedy = load_codes(g / "codes.bin")[0]
    assert (greedy == greedy[0]).all()


def test_evaluate_reports_all_metrics(work, tmp_path):
    samples = tmp_path / "s"
    assert main(["sample", "--model", work["vq"], "--prior", work["prior"], "--n", "4", "--seed", "3",
                 "--out", str(samples)]) == 0
    out = tmp_path / "metrics.json"
    assert main(["evaluate", "--generated", str(samples), "--train", work["dataset"],
                 "--codes", work["prior"] + ".codes", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert set(report) >= {"hd", "fnd", "fnb", "db", "up", "nd", "os", "us", "n_samples"}
    assert report["n_samples"] == 4


def test_evaluate_training_set_against_itself(work, tmp_path):
    train = tmp_path / "train.lpd"
    loops.save_pianorolls(loops.load_dataset(work["dataset"]).array("train"), train)
    out = tmp_path / "self.json"
    assert main(["evaluate", "--generated", str(train), "--train", work["dataset"],
                 "--codes", work["prior"] + ".codes", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["os"] == 1.0 and report["fnd"] == 1.0 and report["fnb"] == 1.0 and report["db"] == 0.0
    assert report["hd"] < 0.0015


def test_export_midi_round_trip(work, tmp_path):
    rolls = loops.load_dataset(work["dataset"]).array("train")
    src = tmp_path / "loops.lpd"
    loops.save_pianorolls(rolls, src)
    single = tmp_path / "one.mid"
    assert main(["export-midi", "--in", str(src), "--index", "2", "--out", str(single)]) == 0
    song = midi.parse_smf(single.read_bytes())
    assert np.array_equal(midi.song_to_pianoroll(song).window(0), rolls[2])
    folder = tmp_path / "all"
    assert main(["export-midi", "--in", str(src), "--out", str(folder), "--bpm", "96"]) == 0
    assert len(list(folder.glob("loop_*.mid"))) == len(rolls)
    assert main(["export-midi", "--in", str(src), "--index", "99", "--out", str(single)]) == 1


def test_inspect_codes(work, tmp_path):
    out = tmp_path / "inspect"
    assert main(["inspect-codes", "--vqvae", work["vq"], "--dataset", work["dataset"], "--out", str(out)]) == 0
    summary = json.loads((out / "report.json").read_text())
    assert summary["n_sequences"] == 9 and len(summary["most_frequent"]) == 2
    patterns = loops.load_pianorolls(out / "frequent.lpd")
    assert patterns.shape == (4, 128, 93)
    hist = np.loadtxt(out / "histogram.csv", delimiter=",")
    assert hist.shape == (32, 512) and (hist.sum(axis=1) == 9).all()


def test_error_exits(work, tmp_path, capsys):
    assert main(["extract", "--midi-dir", str(tmp_path / "nope"), "--out", str(tmp_path / "x.lpd")]) == 1
    assert "error:" in capsys.readouterr().err
    assert main(["train", "--dataset", str(tmp_path / "missing.lpd"), "--model", "cnn-vae", "--epochs", "1",
                 "--seed", "0", "--out", str(tmp_path / "m.ckpt")]) == 1
    bad = tmp_path / "bad.lpd"
    bad.write_bytes(b"XXXX" + bytes(20))
    assert main(["export-midi", "--in", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert main(["sample", "--model", work["vq"], "--n", "2", "--seed", "0", "--out", str(tmp_path / "s")]) == 1
    assert main(["sample", "--model", work["prior"], "--n", "2", "--seed", "0", "--out", str(tmp_path / "s")]) == 1
    assert main(["inspect-codes", "--vqvae", work["prior"], "--dataset", work["dataset"],
                 "--out", str(tmp_path / "i")]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert all(line.startswith("loopvq ") and "error:" in line for line in err)


def test_bad_arguments_exit_with_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--dataset", "x", "--model", "transformer", "--epochs", "1", "--seed", "0", "--out", "y"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit):
        main(["sample", "--model", "m", "--n", "2", "--seed", "0", "--out", "o", "--temperature", "0"])


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "loopvq", "evaluate", "--generated", str(tmp_path / "none"),
                           "--train", str(tmp_path / "none.lpd"), "--out", str(tmp_path / "r.json")],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and proc.stderr.startswith("loopvq evaluate: error:")
    help_proc = subprocess.run([sys.executable, "-m", "loopvq", "--help"], capture_output=True, text=True)
    assert help_proc.returncode == 0 and "extract" in help_proc.stdout
