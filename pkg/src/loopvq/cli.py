"""Command-line pipeline: extract, train, train-prior, sample, evaluate, export-midi, inspect-codes.

Each subcommand draws all randomness from one generator seeded by ``--seed``,
so repeating a command with the same inputs reproduces its outputs byte for
byte.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import loops, metrics, midi, nn
from .formats import FileFormatError
from .models import (CONTINUOUS_KINDS, VQVAE, ContinuousVAE, VaeConfig, VaeTrainer, VqConfig, VqTrainer,
                     load_model, manipulate_codes, save_model, train_prior)
from .models.vqvae import code_frequency_report, load_codes, save_codes

MODEL_CHOICES = {
    "ar-lstm-vae": "ar-lstm",
    "nonar-lstm-vae": "nonar-lstm",
    "cnn-vae": "cnn",
    "vq-vae": "vq-vae",
}
SAMPLES_FILE = "samples.lpd"
CODES_FILE = "codes.bin"


class CliError(Exception):
    """A user-facing failure reported as one line on stderr."""


def _positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _non_negative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _require_file(path) -> str:
    if not os.path.isfile(path):
        raise CliError(f"no such file: {path}")
    return os.fspath(path)


def _write_log(path, lines) -> None:
    with open(path, "w") as fh:
        for line in lines:
            fh.write(line + "\n")


def _training_array(dataset_path, split="train") -> np.ndarray:
    ds = loops.load_dataset(_require_file(dataset_path))
    data = ds.array(split)
    if len(data) == 0:
        raise CliError(f"{dataset_path}: the {split} split is empty")
    return data


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_extract(args) -> int:
    midi_dir = Path(args.midi_dir)
    if not midi_dir.is_dir():
        raise CliError(f"not a directory: {midi_dir}")
    files = sorted(p for p in midi_dir.rglob("*") if p.suffix.lower() in (".mid", ".midi") and p.is_file())
    records = []
    skipped = {"unreadable": 0, "not_four_four": 0}
    for path in files:
        source_id = path.relative_to(midi_dir).as_posix()
        try:
            song = midi.parse_smf(path.read_bytes(), source_id)
        except midi.MidiParseError as exc:
            print(f"skipping {source_id}: {exc}", file=sys.stderr)
            skipped["unreadable"] += 1
            continue
        if not midi.is_four_four(song):
            skipped["not_four_four"] += 1
            continue
        records.extend(loops.scan_song(midi.song_to_pianoroll(song), args.threshold))
    params = {"midi_files": len(files), "skipped": skipped}
    ds = loops.build_dataset(records, threshold=args.threshold, params=params)
    loops.save_dataset(ds, args.out)
    sizes = ds.split_sizes()
    print(f"{len(ds)} loops from {len(files)} files "
          f"(train={sizes['train']} valid={sizes['valid']} test={sizes['test']})")
    return 0


def cmd_train(args) -> int:
    data = _training_array(args.dataset)
    kind = MODEL_CHOICES[args.model]
    rng = np.random.default_rng(args.seed)
    lines = []

    def log(rep):
        lines.append(rep.line())
        if args.verbose:
            print(rep.line())

    if kind == "vq-vae":
        model = VQVAE(VqConfig(), rng=rng)
        trainer = VqTrainer(model, args.epochs, args.batch, args.lr_max, args.lr_min, rng=rng)
    else:
        model = ContinuousVAE(VaeConfig(kind=kind), rng=rng)
        trainer = VaeTrainer(model, args.epochs, args.batch, args.lr_max, args.lr_min, rng=rng)
    try:
        trainer.fit(data, log)
    except nn.TrainingError as exc:
        _write_log(args.out + ".log", lines + [f"aborted: {exc}"])
        raise CliError(f"training aborted: {exc}") from exc
    model.eval()
    err = metrics.reconstruction_error(model, data)
    lines.append(f"final train_reconstruction_error={err:.6g}")
    valid = loops.load_dataset(args.dataset).array("valid")
    if len(valid):
        lines.append(f"final valid_reconstruction_error={metrics.reconstruction_error(model, valid):.6g}")
    save_model(args.out, model, {"epochs": args.epochs, "batch": args.batch, "seed": args.seed})
    _write_log(args.out + ".log", lines)
    print("; ".join(line.replace("final ", "") for line in lines if line.startswith("final")))
    return 0


def _load_vqvae(path) -> VQVAE:
    model = load_model(_require_file(path))
    if not isinstance(model, VQVAE):
        raise CliError(f"{path} holds a {model.kind} model, expected vq-vae")
    return model


def cmd_train_prior(args) -> int:
    vq = _load_vqvae(args.vqvae)
    data = _training_array(args.dataset)
    codes = vq.encode_to_codes(data)
    rng = np.random.default_rng(args.seed)
    lines = []
    prior, acc = train_prior(codes, vq.config.num_codes, n_epochs=args.epochs, batch_size=args.batch,
                             rng=rng, log=lines.append)
    lines.append(f"final teacher_forcing_accuracy={acc:.6g}")
    save_model(args.out, prior, {"epochs": args.epochs, "seed": args.seed})
    codes_path = args.codes_out or args.out + ".codes"
    save_codes(codes_path, codes, vq.config.num_codes)
    _write_log(args.out + ".log", lines)
    print(f"teacher-forcing accuracy {acc:.4f}; codes cache {codes_path}")
    return 0


def cmd_sample(args) -> int:
    model = load_model(_require_file(args.model))
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    codes = None
    if isinstance(model, VQVAE):
        if not args.prior:
            raise CliError("sampling a vq-vae needs --prior")
        prior = load_model(_require_file(args.prior))
        if prior.kind != "prior":
            raise CliError(f"{args.prior} holds a {prior.kind} model, expected prior")
        if prior.config.num_codes != model.config.num_codes or prior.config.length != model.config.t:
            raise CliError("prior and vq-vae disagree on codebook size or sequence length")
        codes = prior.sample(args.n, None if args.argmax else args.temperature, rng)
        if args.loop_consistency:
            codes = manipulate_codes(codes, model.config.t)
        rolls = model.decode_codes(codes) if args.n else np.zeros((0, 128, 93), np.uint8)
    elif isinstance(model, ContinuousVAE):
        if args.loop_consistency:
            raise CliError("--loop-consistency applies to vq-vae models only")
        if args.argmax or args.prior:
            raise CliError("--argmax and --prior apply to vq-vae models only")
        rolls = model.generate(args.n, rng)
    else:
        raise CliError(f"{args.model} holds a {model.kind} model, which cannot generate loops")
    out.mkdir(parents=True, exist_ok=True)
    loops.save_pianorolls(rolls, out / SAMPLES_FILE)
    if codes is not None:
        save_codes(out / CODES_FILE, codes, model.config.num_codes)
    print(f"wrote {len(rolls)} samples to {out / SAMPLES_FILE}")
    return 0


def _load_generated(path):
    path = Path(path)
    if path.is_dir():
        rolls = loops.load_pianorolls(_require_file(path / SAMPLES_FILE))
        codes = load_codes(path / CODES_FILE)[0] if (path / CODES_FILE).is_file() else None
        return rolls, codes
    return loops.load_pianorolls(_require_file(path)), None


def cmd_evaluate(args) -> int:
    rolls, gen_codes = _load_generated(args.generated)
    if len(rolls) == 0:
        raise CliError(f"{args.generated}: no samples")
    train = _training_array(args.train)
    train_codes = load_codes(_require_file(args.codes))[0] if args.codes else None
    if (gen_codes is None and train_codes is not None and len(train_codes) == len(train)
            and np.array_equal(rolls, train)):
        # the training corpus scored against itself carries its own codes
        gen_codes = train_codes
    report = metrics.evaluate_all(rolls, train, gen_codes, train_codes)
    with open(args.out, "w") as fh:
        fh.write(report.to_json() + "\n")
    print(report.to_json())
    return 0


def cmd_export_midi(args) -> int:
    src = _require_file(args.input)
    rolls = loops.load_pianorolls(src)
    if args.index is not None:
        if not 0 <= args.index < len(rolls):
            raise CliError(f"{src} holds {len(rolls)} loops; index {args.index} is out of range")
        rolls = rolls[args.index:args.index + 1]
    out = Path(args.out)
    if len(rolls) == 1 and out.suffix.lower() in (".mid", ".midi"):
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_bytes(midi.export_midi(rolls[0], bpm=args.bpm))
        print(f"wrote {out}")
        return 0
    out.mkdir(parents=True, exist_ok=True)
    for i, roll in enumerate(rolls):
        (out / f"loop_{i:04d}.mid").write_bytes(midi.export_midi(roll, bpm=args.bpm))
    print(f"wrote {len(rolls)} files to {out}")
    return 0


def cmd_inspect_codes(args) -> int:
    vq = _load_vqvae(args.vqvae)
    data = _training_array(args.dataset)
    codes = vq.encode_to_codes(data)
    report = code_frequency_report(codes, vq.config.num_codes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sequences = np.concatenate([report["most"], report["least"]])
    loops.save_pianorolls(vq.decode_codes(sequences), out / "frequent.lpd", prefix="pattern")
    np.savetxt(out / "histogram.csv", report["histogram"], fmt="%d", delimiter=",")
    summary = {
        "n_sequences": int(len(codes)),
        "codes_used": int(np.unique(codes).size),
        "most_frequent": report["most"].tolist(),
        "least_frequent": report["least"].tolist(),
        "patterns": ["most_1", "most_2", "least_1", "least_2"],
    }
    with open(out / "report.json", "w") as fh:
        json.dump(summary, fh, indent=1)
    print(f"{summary['codes_used']} distinct codes over {len(codes)} sequences; report in {out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loopvq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="mine 8-bar loops from a directory of MIDI files")
    p.add_argument("--midi-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=_positive_float, default=loops.DEFAULT_THRESHOLD)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train a VAE or VQ-VAE on the train split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True, choices=sorted(MODEL_CHOICES))
    p.add_argument("--epochs", type=_positive_int, required=True)
    p.add_argument("--batch", type=_positive_int, default=64)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--lr-max", type=_positive_float, default=1e-3)
    p.add_argument("--lr-min", type=_positive_float, default=5e-6)
    p.add_argument("--out", required=True)
    p.add_argument("--verbose", action="store_true", help="print every epoch line")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-prior", help="fit the code prior of a trained VQ-VAE")
    p.add_argument("--vqvae", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--codes-out", help="codes cache path (default: <out>.codes)")
    p.add_argument("--epochs", type=_positive_int, default=200)
    p.add_argument("--batch", type=_positive_int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_prior)

    p = sub.add_parser("sample", help="generate loops")
    p.add_argument("--model", required=True)
    p.add_argument("--prior")
    p.add_argument("--n", type=_non_negative_int, required=True)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--temperature", type=_positive_float, default=1.0)
    mode.add_argument("--argmax", action="store_true")
    p.add_argument("--loop-consistency", action="store_true",
                   help="copy the opening latent steps onto the fifth bar before decoding")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="score generated loops")
    p.add_argument("--generated", required=True, help="sample directory or loop container")
    p.add_argument("--train", required=True)
    p.add_argument("--codes", help="code cache of the training split (enables os/us)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-midi", help="render loops as MIDI files")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bpm", type=_positive_float, default=120.0)
    p.add_argument("--index", type=int)
    p.set_defaults(func=cmd_export_midi)

    p = sub.add_parser("inspect-codes", help="most and least frequent code patterns")
    p.add_argument("--vqvae", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect_codes)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, FileFormatError, midi.MidiParseError, nn.TrainingError, ValueError, KeyError,
            OSError) as exc:
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"loopvq {args.command}: error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
