"""Command-line driver: simulate, train, denoise, eval, bench.

Every subcommand accepts ``--config FILE`` holding ``key = value`` lines
(``#`` starts a comment); keys are the long option names with or without
dashes.  Flags given on the command line win over the file.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from .imageio import PHANTOM_KINDS, ImageFormatError, make_phantom, read_image, write_image
from .ldct import PHOTON_LEVELS, NoiseConfig, simulate_low_dose
from .matching import MatchConfig
from .metrics import psnr, ssim
from .pipeline import METHODS, Model, denoise_pipeline
from .rng import derive_seed
from .training import (
    DEFAULT_SPLIT,
    Checkpoint,
    CheckpointError,
    Sample,
    TrainConfig,
    fit,
    load_checkpoint,
    save_checkpoint,
    split_dataset,
)

log = logging.getLogger("dubm3d")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST_FIELDS = ("stem", "photons", "seed", "mode")
REPORT_FIELDS = ("photons", "method", "psnr_db", "ssim", "n_images")
TIMING_FIELDS = ("method", "param_count", "mean_inference_ms")
BENCH_METHODS = ("noisy",) + METHODS


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def int_list(text: str) -> list[int]:
    return [int(float(t)) for t in str(text).replace(",", " ").split()]


def str_list(text: str) -> list[str]:
    return [t for t in str(text).replace(",", " ").split()]


def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


# ---------------------------------------------------------------- manifest


def read_manifest(path) -> list[dict]:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
                raise DataError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
            rows = [dict(r, photons=int(r["photons"]), seed=int(r["seed"])) for r in reader]
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    except (ValueError, KeyError) as exc:
        raise DataError(f"{path}: bad manifest row: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: empty manifest")
    return rows


def manifest_stems(rows) -> list[str]:
    return sorted({r["stem"] for r in rows})


def load_pairs(manifest_path, stems, photons: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """(noisy, clean) arrays for ``stems`` at one dose; files sit next to the manifest."""
    root = Path(manifest_path).parent
    rows = {(r["stem"], r["photons"]) for r in read_manifest(manifest_path)}
    pairs = []
    for stem in stems:
        if (stem, photons) not in rows:
            raise DataError(f"manifest has no {photons}-photon entry for {stem}")
        noisy = read_image(root / f"{stem}.n{photons}.f32").pixels
        clean = read_image(root / f"{stem}.clean.f32").pixels
        pairs.append((noisy, clean))
    return pairs


def split_stems(rows, seed: int):
    return split_dataset(manifest_stems(rows), DEFAULT_SPLIT, seed)


# ---------------------------------------------------------------- commands


def cmd_simulate(a) -> int:
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(a.count):
        stem = f"img{i:04d}"
        kind = PHANTOM_KINDS[i % len(PHANTOM_KINDS)]
        clean = make_phantom(kind, a.size, a.size, derive_seed(a.seed, i))
        write_image(clean, out / f"{stem}.clean.f32")
        for n0 in a.photons:
            seed = derive_seed(a.seed + 1, i, n0)
            cfg = NoiseConfig(n0, mu_max=a.mu_max, mode=a.mode, seed=seed)
            write_image(simulate_low_dose(clean, cfg), out / f"{stem}.n{n0}.f32")
            rows.append((stem, n0, seed, a.mode))
    with (out / "manifest.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        w.writerows(rows)
    log.info("wrote %d images x %d doses to %s", a.count, len(a.photons), out)
    return EXIT_OK


def cmd_train(a) -> int:
    rows = read_manifest(a.manifest)
    train_stems, val_stems, _ = split_stems(rows, a.split_seed)
    match = MatchConfig(patch=a.patch, stride=a.stride, window=a.window, group_size=a.group_size)
    model = Model.create(a.mode, seed=a.seed, match=match, width1=a.width1, width2=a.width2)
    cfg = TrainConfig(epochs=a.epochs, batch_size=a.batch_size, lr=a.lr, seed=a.seed, mode=a.mode)
    train = [Sample(n, c) for n, c in load_pairs(a.manifest, train_stems, a.train_photons)]
    val = [Sample(n, c) for n, c in load_pairs(a.manifest, val_stems, a.train_photons)]
    state, history = fit(train, model, cfg, val=val)
    save_checkpoint(a.out, Checkpoint(model, state, steps=state.t))
    last = history[-1]
    print(f"trained {a.mode}: {state.t} steps, train_loss={last['train_loss']:.6g}"
          + (f" val_loss={last['val_loss']:.6g}" if "val_loss" in last else ""))
    return EXIT_OK


def _model_for(method: str, checkpoint) -> Model | None:
    if method == "bm3d-classic":
        return None
    if not checkpoint:
        raise UsageError(f"method {method} needs --checkpoint")
    return load_checkpoint(checkpoint).model


def cmd_denoise(a) -> int:
    if a.method not in METHODS:
        raise UsageError(f"unknown method {a.method!r}; expected one of {', '.join(METHODS)}")
    model = _model_for(a.method, a.checkpoint)
    img = read_image(a.input)
    out = denoise_pipeline(img, a.method, model=model, sigma=a.sigma)
    write_image(out, a.output, a.format)
    return EXIT_OK


def cmd_eval(a) -> int:
    x, ref = read_image(a.input), read_image(a.reference)
    if x.shape != ref.shape:
        raise DataError(f"shape mismatch: {x.shape} vs {ref.shape}")
    print("psnr_db,ssim")
    print(f"{psnr(x, ref, a.peak):.6f},{ssim(x, ref, a.peak):.6f}")
    return EXIT_OK


def bench_tables(manifest, methods, photons, checkpoints: dict, split_seed=0, repeats=3):
    """Quality rows per (photons, method) and timing rows per method, test split only."""
    rows = read_manifest(manifest)
    _, _, test = split_stems(rows, split_seed)
    if not test:
        raise DataError("test split is empty")
    models = {m: _model_for(m, checkpoints.get(m)) for m in methods if m in METHODS}
    for m, model in models.items():
        if model is not None and model.mode != m:
            raise DataError(f"checkpoint for {m} holds a {model.mode} model")

    def run(method, noisy):
        if method == "noisy":
            return noisy
        return denoise_pipeline(noisy, method, model=models[method]).pixels

    report = []
    for n0 in photons:
        pairs = load_pairs(manifest, test, n0)
        for method in methods:
            outs = [run(method, n) for n, _ in pairs]
            p = [psnr(o, c) for o, (_, c) in zip(outs, pairs)]
            s = [ssim(o, c) for o, (_, c) in zip(outs, pairs)]
            report.append((n0, method, float(np.mean(p)), float(np.mean(s)), len(pairs)))

    timing = []
    pairs = load_pairs(manifest, test, photons[len(photons) // 2])
    for method in methods:
        if method == "noisy":
            continue
        model = models[method]
        per_repeat = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            for noisy, _ in pairs:
                run(method, noisy)
            per_repeat.append((time.perf_counter() - t0) * 1e3 / len(pairs))
        timing.append((method, model.param_count() if model else 0, statistics.median(per_repeat)))
    return report, timing


def cmd_bench(a) -> int:
    for m in a.methods:
        if m not in BENCH_METHODS:
            raise UsageError(f"unknown bench method {m!r}; expected some of {', '.join(BENCH_METHODS)}")
    checkpoints = {"du-bm3d": a.du_checkpoint, "unet-image": a.unet_checkpoint}
    report, timing = bench_tables(a.manifest, a.methods, a.photons, checkpoints, a.split_seed, a.repeats)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "report.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        w.writerows((n, m, f"{p:.4f}", f"{s:.4f}", k) for n, m, p, s, k in report)
    with (out / "timing.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMING_FIELDS)
        w.writerows((m, c, f"{t:.3f}") for m, c, t in timing)
    for n, m, p, s, k in report:
        print(f"{n:>7} {m:<13} psnr={p:7.3f} ssim={s:.4f} n={k}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dubm3d", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="key = value file; command-line flags override it")
        sp.set_defaults(func=func)
        return sp

    s = command("simulate", cmd_simulate, "generate phantom pairs at several doses")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=64)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--photons", type=int_list, default=list(PHOTON_LEVELS))
    s.add_argument("--mode", choices=("image", "projection"), default="image")
    s.add_argument("--mu-max", type=float, default=4.0)
    s.add_argument("--seed", type=int, default=0)

    t = command("train", cmd_train, "train du-bm3d or unet-image on one dose")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--mode", choices=("du-bm3d", "unet-image"), default="du-bm3d")
    t.add_argument("--train-photons", type=int, default=100_000)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--split-seed", type=int, default=0)
    t.add_argument("--patch", type=int, default=8)
    t.add_argument("--stride", type=int, default=4)
    t.add_argument("--window", type=int, default=12)
    t.add_argument("--group-size", type=int, default=8)
    t.add_argument("--width1", type=int, default=16)
    t.add_argument("--width2", type=int, default=32)

    d = command("denoise", cmd_denoise, "denoise one image")
    d.add_argument("--input", required=True)
    d.add_argument("--output", required=True)
    d.add_argument("--method", default="bm3d-classic")
    d.add_argument("--checkpoint")
    d.add_argument("--sigma", type=float, help="noise level for bm3d-classic (estimated if absent)")
    d.add_argument("--format", choices=("f32raw", "pgm8", "pgm16"), default="f32raw")

    e = command("eval", cmd_eval, "PSNR and SSIM of an image against a reference")
    e.add_argument("--input", required=True)
    e.add_argument("--reference", required=True)
    e.add_argument("--peak", type=float, default=1.0)

    b = command("bench", cmd_bench, "quality and timing tables over the test split")
    b.add_argument("--manifest", required=True)
    b.add_argument("--out", required=True, help="directory for report.csv and timing.csv")
    b.add_argument("--methods", type=str_list, default=list(BENCH_METHODS))
    b.add_argument("--photons", type=int_list, default=list(PHOTON_LEVELS))
    b.add_argument("--du-checkpoint")
    b.add_argument("--unet-checkpoint")
    b.add_argument("--split-seed", type=int, default=0)
    b.add_argument("--repeats", type=int, default=3)
    return p


def _config_path(argv) -> tuple[str | None, str | None]:
    """(subcommand, --config value) found by a plain scan of ``argv``."""
    command = next((t for t in argv if not t.startswith("-") and t in COMMANDS), None)
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return command, argv[i + 1]
        if tok.startswith("--config="):
            return command, tok.split("=", 1)[1]
    return command, None


COMMANDS = ("simulate", "train", "denoise", "eval", "bench")


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    command, config = _config_path(argv)
    if config and command:
        sub = parser._subparsers._group_actions[0].choices[command]
        actions = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, raw in read_config(config).items():
            action = actions.get(key)
            if action is None or key in ("config", "help", "func"):
                raise UsageError(f"{config}: unknown key {key!r} for {command}")
            try:
                value = action.type(raw) if action.type else raw
            except (TypeError, ValueError) as exc:
                raise UsageError(f"{config}: bad value for {key}: {raw!r}") from exc
            if action.choices and value not in action.choices:
                raise UsageError(f"{config}: {key} must be one of {list(action.choices)}")
            defaults[key] = value
            action.required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"dubm3d: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dubm3d: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"dubm3d: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ImageFormatError, CheckpointError, OSError) as exc:
        print(f"dubm3d: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # invalid parameter combinations surface from the library as ValueError
        print(f"dubm3d: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
