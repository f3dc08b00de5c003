"""Run the whole command-line pipeline on a small generated MIDI corpus.

Writes songs built from synthetic loops (with a few filler bars between
them) as MIDI files, then calls extract, train, train-prior, sample,
evaluate, export-midi and inspect-codes in turn.  Everything lands in the
chosen work directory; the run takes a few minutes on one CPU core.

    python3 demos/pipeline.py --work /tmp/loopvq-demo --epochs 20
"""

import argparse
import json
from pathlib import Path

import numpy as np

from loopvq import midi, synthetic
from loopvq.cli import main


def write_songs(directory: Path, n_songs: int, seed: int) -> None:
    rng = np.random.default_rng(seed)
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(n_songs):
        parts = []
        for _ in range(int(rng.integers(1, 4))):
            lead_in = synthetic.random_loop(rng)[: 16 * int(rng.integers(0, 3))]
            lead_in[0:1, :] = 0  # filler bars never open with a crash, so they cannot start a loop
            parts += [lead_in, synthetic.random_loop(rng)]
        (directory / f"song_{i:03d}.mid").write_bytes(midi.export_midi(np.concatenate(parts), bpm=110))


def run(argv):
    print("$ loopvq " + " ".join(argv))
    code = main(argv)
    if code != 0:
        raise SystemExit(code)


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", default="demo-work")
    ap.add_argument("--songs", type=int, default=40)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    return ap.parse_args()


def main_demo():
    args = parse_args()
    work = Path(args.work)
    write_songs(work / "midi", args.songs, args.seed)
    ds, vq, prior = str(work / "loops.lpd"), str(work / "vq.ckpt"), str(work / "prior.ckpt")
    run(["extract", "--midi-dir", str(work / "midi"), "--out", ds])
    run(["train", "--dataset", ds, "--model", "vq-vae", "--epochs", str(args.epochs), "--batch", "16",
         "--lr-max", "3e-3", "--seed", str(args.seed), "--out", vq])
    run(["train-prior", "--vqvae", vq, "--dataset", ds, "--out", prior, "--epochs", "100", "--batch", "16"])
    for label, mode in (("argmax", ["--argmax"]), ("t1.5", ["--temperature", "1.5"])):
        out = str(work / f"samples_{label}")
        run(["sample", "--model", vq, "--prior", prior, "--n", "50", *mode, "--seed", "1", "--out", out])
        run(["evaluate", "--generated", out, "--train", ds, "--codes", prior + ".codes",
             "--out", str(work / f"metrics_{label}.json")])
    run(["export-midi", "--in", str(work / "samples_t1.5" / "samples.lpd"), "--out", str(work / "midi_out")])
    run(["inspect-codes", "--vqvae", vq, "--dataset", ds, "--out", str(work / "codes")])
    for label in ("argmax", "t1.5"):
        report = json.loads((work / f"metrics_{label}.json").read_text())
        print(label, {k: round(v, 4) for k, v in report.items() if isinstance(v, float)})


if __name__ == "__main__":
    main_demo()
