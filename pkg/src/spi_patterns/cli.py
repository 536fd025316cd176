"""Command-line interface: ``spi-patterns <command> --seed S [--out-dir D] [--config F] ...``."""

from __future__ import annotations

import argparse
import configparser
import csv
import sys
from pathlib import Path

import numpy as np

from . import io
from .core import psnr, simulate_measurements, ssim
from .experiments import (
    FAMILIES, SweepConfig, baseline_pattern, recon_for, run_sweep, table_row, write_rows_csv,
)
from .patterns import EpsilonSchedule, identity_matrix
from .regularizers import PretrainConfig, make_regulariser, pretrain_filters
from .solvers import ReconConfig, SolverError
from .trainer import (
    TrainConfig, TrainingError, default_alpha_grid, evaluate, select_alpha_grid, solve_rows, train,
    write_history_csv,
)


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration files

def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple:
    return tuple(int(t) for t in v.replace(" ", "").split(",") if t)


def _words(v: str) -> tuple:
    return tuple(t for t in v.replace(" ", "").split(",") if t)


def _opt_float(v: str):
    return None if v.strip().lower() in ("", "none") else float(v)


CONFIG_SCHEMA = {
    "train": {
        "method": str, "m": int, "epochs": int, "batch_size": int, "lr_z": float, "lr_logalpha": float,
        "optimizer": str, "noise_level": float, "penalty_weight": float, "init_scale": float, "beta": float,
        "learn_alpha": _bool, "alpha0": _opt_float, "resample_noise": _bool, "parameterisation": str,
        "eps0": float, "eps_decay": float, "eps_period": int, "eps_min": float, "alpha_grid_points": int,
        "corpus_size": int,
    },
    "recon": {"max_iters": int, "tol": float, "eval_max_iters": int, "eval_tol": float},
    "pretrain": {"n_filters": int, "kernel_size": int, "penalty": str, "weight": float, "noise_sigma": float,
                 "unroll_steps": int, "epochs": int, "lr": float},
    "data": {"train_corpus": str, "test_corpus": str, "size": str, "prior": str},
    "eval": {"regulariser": str, "grid_points": int, "noise_level": float, "ms": _ints, "families": _words,
             "seeds": _ints, "delta": float},
}


def load_config(path) -> dict:
    """Parse an INI-style experiment file; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise UsageError(f"config {path}: {exc}") from None
    out: dict = {}
    for section in parser.sections():
        if section not in CONFIG_SCHEMA:
            raise UsageError(f"config {path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            conv = CONFIG_SCHEMA[section].get(key)
            if conv is None:
                raise UsageError(f"config {path}: unknown key {key!r} in [{section}]")
            try:
                out[(section, key)] = conv(raw)
            except ValueError as exc:
                raise UsageError(f"config {path}: bad value for {section}.{key}: {exc}") from None
    return out


def _size(text: str) -> tuple:
    try:
        h, w = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"size must look like 32x32, got {text!r}") from None
    if h < 1 or w < 1:
        raise UsageError("image size must be positive")
    return h, w


class Settings:
    """Flag values layered over config-file values layered over defaults."""

    def __init__(self, args, config: dict):
        self.args = args
        self.config = config

    def get(self, attr, section, key=None, default=None):
        v = getattr(self.args, attr, None)
        if v is not None:
            return v
        return self.config.get((section, key or attr), default)

    def recon(self, evaluation: bool) -> ReconConfig:
        if evaluation:
            return ReconConfig.evaluation(max_iters=self.config.get(("recon", "eval_max_iters"), 2000),
                                          tol=self.config.get(("recon", "eval_tol"), 1e-7))
        return ReconConfig.training(max_iters=self.config.get(("recon", "max_iters"), 500),
                                    tol=self.config.get(("recon", "tol"), 1e-5))

    def train_config(self, seed: int) -> TrainConfig:
        c = self.config
        sched = None
        if any(("train", k) in c for k in ("eps0", "eps_decay", "eps_period", "eps_min")):
            d = EpsilonSchedule()
            sched = EpsilonSchedule(c.get(("train", "eps0"), d.eps0), c.get(("train", "eps_decay"), d.decay),
                                    c.get(("train", "eps_period"), 1), c.get(("train", "eps_min"), d.eps_min))
        return TrainConfig(
            method=self.get("method", "train", default="ste"),
            M=self.get("m", "train", default=64),
            epochs=self.get("epochs", "train", default=30),
            batch_size=self.get("batch_size", "train", default=8),
            lr_Z=self.get("lr_z", "train", default=1e-2),
            lr_logalpha=self.get("lr_logalpha", "train", default=1e-2),
            optimizer=c.get(("train", "optimizer"), "adam"),
            noise_level=self.get("noise", "train", "noise_level", 0.05),
            seed=seed,
            recon=self.recon(False),
            eps_schedule=sched,
            parameterisation=c.get(("train", "parameterisation")),
            penalty_weight=c.get(("train", "penalty_weight"), 1.0),
            init_scale=c.get(("train", "init_scale"), 0.1),
            beta=c.get(("train", "beta"), 1.0),
            learn_alpha=c.get(("train", "learn_alpha"), True),
            alpha0=c.get(("train", "alpha0")),
            alpha_grid_points=c.get(("train", "alpha_grid_points"), 5),
            resample_noise=c.get(("train", "resample_noise"), True),
        )

    def regulariser(self, default="huber"):
        kind = self.get("regulariser", "eval", default=default)
        prior = self.get("prior", "data", default=None)
        delta = self.config.get(("eval", "delta"), 0.01)
        if kind == "learned" and prior is None:
            raise UsageError("the learned regulariser needs --prior")
        filters = io.read_filterbank(prior) if kind == "learned" else None
        return make_regulariser(kind, delta=delta, filters=filters)

    def corpus(self, attr, key):
        path = self.get(attr, "data", key)
        if path is None:
            raise UsageError(f"--{attr.replace('_', '-')} is required")
        size = self.get("size", "data", default=None)
        return io.load_corpus(path, _size(size) if size else None)


# ---------------------------------------------------------------------------
# commands


def cmd_phantoms(s: Settings, out: Path):
    size = _size(s.get("size", "data", default="32x32"))
    images = io.generate_phantoms(s.args.count, size, s.args.seed)
    paths = io.save_corpus(images, out / s.args.name, s.args.format)
    print(f"wrote {len(paths)} phantoms to {out / s.args.name}")


def cmd_gen_pattern(s: Settings, out: Path):
    a = s.args
    if a.kind == "identity":
        A = identity_matrix(a.n)
    else:
        if a.m is None:
            raise UsageError("--m is required for this pattern kind")
        A = baseline_pattern({"gaussian": "gaussian", "sh": "sh"}[a.kind], a.m, a.n, a.seed)
    path = Path(a.output) if a.output else out / f"pattern_{a.kind}_M{A.M}.spip"
    io.write_pattern(path, A)
    print(f"wrote {A.M}x{A.N} {A.kind} pattern to {path}")


def cmd_pretrain(s: Settings, out: Path):
    images = s.corpus("corpus", "train_corpus")
    c = s.config
    d = PretrainConfig()
    cfg = PretrainConfig(
        n_filters=s.get("filters", "pretrain", "n_filters", d.n_filters),
        kernel_size=s.get("kernel", "pretrain", "kernel_size", d.kernel_size),
        penalty=c.get(("pretrain", "penalty"), d.penalty),
        weight=c.get(("pretrain", "weight"), d.weight),
        noise_sigma=c.get(("pretrain", "noise_sigma"), d.noise_sigma),
        unroll_steps=c.get(("pretrain", "unroll_steps"), d.unroll_steps),
        epochs=s.get("epochs", "pretrain", default=d.epochs),
        lr=c.get(("pretrain", "lr"), d.lr),
        seed=s.args.seed,
    )
    history: list = []
    fb = pretrain_filters(images, cfg, history=history)
    path = Path(s.args.output) if s.args.output else out / "prior.spif"
    io.write_filterbank(path, fb)
    with open(out / "pretrain_history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "denoise_mse"])
        for i, v in enumerate(history):
            w.writerow([i, repr(float(v))])
    print(f"wrote {fb.n_filters} filters to {path}")


def cmd_grid_alpha(s: Settings, out: Path):
    A = io.read_pattern(s.args.pattern)
    images = s.corpus("corpus", "train_corpus")[:s.args.batch]
    J = s.regulariser()
    recon = recon_for(J, s.recon(True))
    grid = default_alpha_grid(A, J, s.get("points", "eval", "grid_points", 9))
    scores: list = []
    alpha = select_alpha_grid(A, images, grid, recon, J, s.get("noise", "eval", "noise_level", 0.05),
                              s.args.seed, scores=scores)
    with open(out / "alpha_grid.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "mean_ssim", "selected"])
        for a, sc in scores:
            w.writerow([repr(a), repr(sc), int(a == alpha)])
    print(repr(alpha))


def cmd_train(s: Settings, out: Path):
    images = s.corpus("corpus", "train_corpus")
    n = s.config.get(("train", "corpus_size"))
    if n is not None:
        images = images[:n]
    J = s.regulariser(default="learned" if s.get("prior", "data") else "huber")
    cfg = s.train_config(s.args.seed)
    ckpt = out / "checkpoint.npz"
    res = train(images, cfg, J, checkpoint_path=ckpt, resume_from=s.args.resume)
    path = out / f"pattern_{cfg.method}_M{cfg.M}.spip"
    io.write_pattern(path, res.pattern)
    write_history_csv(res.history, out / "train_history.csv")
    with open(out / "train_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "M", "alpha", "rnp_diagnostic"])
        w.writerow([cfg.method, cfg.M, repr(res.alpha), "" if res.rnp_diagnostic is None else repr(res.rnp_diagnostic)])
    print(f"wrote {path}; alpha={res.alpha!r}")


def _read_measurements(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([float(row[0]) for row in csv.reader(fh) if row and row[0].strip()])


def cmd_reconstruct(s: Settings, out: Path):
    a = s.args
    A = io.read_pattern(a.pattern)
    J = s.regulariser()
    recon = recon_for(J, s.recon(True))
    if a.measurements:
        y = _read_measurements(a.measurements)
        if y.size != A.M:
            raise UsageError(f"{a.measurements}: expected {A.M} measurements, found {y.size}")
        if a.shape is None:
            raise UsageError("--shape is required with --measurements")
        shape = _size(a.shape)
        x_true = None
    elif a.image:
        x_true = io.read_image(a.image)
        shape = x_true.shape
        y = simulate_measurements(A, x_true, s.get("noise", "eval", "noise_level", 0.05), a.seed).y
    else:
        raise UsageError("give --image or --measurements")
    if shape[0] * shape[1] != A.N:
        raise UsageError(f"image shape {shape} does not match pattern N={A.N}")
    x = solve_rows(A, y[None], a.alpha, J, recon, shape)[0].reshape(shape)
    io.write_raw(out / "recon.spir", x)
    io.write_pgm(out / "recon.pgm", np.clip(x, 0, 1))
    if x_true is not None:
        xc = np.clip(x, 0, 1)
        print(f"psnr={psnr(x_true, xc)!r} ssim={ssim(x_true, xc)!r}")


def cmd_evaluate(s: Settings, out: Path):
    a = s.args
    images = s.corpus("corpus", "test_corpus")
    J = s.regulariser()
    recon = recon_for(J, s.recon(True))
    noise = s.get("noise", "eval", "noise_level", 0.05)
    rows = []
    for p in a.pattern:
        A = io.read_pattern(p)
        if a.alpha == "grid":
            grid_imgs = io.load_corpus(a.grid_corpus, images[0].shape) if a.grid_corpus else images
            grid = default_alpha_grid(A, J, s.get("points", "eval", "grid_points", 9))
            alpha = select_alpha_grid(A, grid_imgs[:8], grid, recon, J, noise, a.seed)
        else:
            try:
                alpha = float(a.alpha)
            except ValueError:
                raise UsageError(f"--alpha must be a number or 'grid', got {a.alpha!r}") from None
        table = evaluate(A, alpha, images, recon, J, noise, a.seed)
        rows.append(table_row(Path(p).stem, A.M, J, a.seed, alpha, table))
    path = out / "evaluation.csv"
    write_rows_csv(rows, path)
    print(f"wrote {path}")


def cmd_report(s: Settings, out: Path):
    train_imgs = s.corpus("train_corpus", "train_corpus")
    test_imgs = s.corpus("test_corpus", "test_corpus")
    c = s.config
    J_eval = s.regulariser(default="learned" if s.get("prior", "data") else "huber")
    J_train = J_eval if J_eval.smooth else make_regulariser("huber", delta=c.get(("eval", "delta"), 0.01))
    families = s.get("families", "eval", default=("gaussian", "sh", "ste"))
    bad = [f for f in families if f not in FAMILIES]
    if bad:
        raise UsageError(f"unknown pattern families {bad}")
    cfg = SweepConfig(
        Ms=s.get("ms", "eval", default=(32, 64, 128, 256)),
        families=tuple(families),
        seeds=s.get("seeds", "eval", default=(s.args.seed,)),
        noise_level=s.get("noise", "eval", "noise_level", 0.05),
        grid_points=c.get(("eval", "grid_points"), 9),
        train=s.train_config(s.args.seed),
        eval_recon=s.recon(True),
    )
    rows = run_sweep(train_imgs, test_imgs, J_train, cfg, J_eval)
    path = out / "report.csv"
    write_rows_csv(rows, path)
    print(f"wrote {path}")


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, required=True, help="seed for all randomness")
    common.add_argument("--out-dir", default=".", help="directory for all outputs")
    common.add_argument("--config", help="INI experiment file")

    p = argparse.ArgumentParser(prog="spi-patterns", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("phantoms", parents=[common], help="write a synthetic phantom corpus")
    q.add_argument("--count", type=int, default=64)
    q.add_argument("--size")
    q.add_argument("--format", choices=("spir", "pgm"), default="spir")
    q.add_argument("--name", default="phantoms", help="subdirectory of --out-dir")
    q.set_defaults(func=cmd_phantoms)

    q = sub.add_parser("gen-pattern", parents=[common], help="write a baseline pattern file")
    q.add_argument("--kind", choices=("gaussian", "sh", "identity"), required=True)
    q.add_argument("--m", type=int)
    q.add_argument("--n", type=int, required=True)
    q.add_argument("-o", "--output")
    q.set_defaults(func=cmd_gen_pattern)

    q = sub.add_parser("pretrain-prior", parents=[common], help="fit the convolutional prior by unrolled denoising")
    q.add_argument("--corpus")
    q.add_argument("--size")
    q.add_argument("--filters", type=int)
    q.add_argument("--kernel", type=int)
    q.add_argument("--epochs", type=int)
    q.add_argument("-o", "--output")
    q.set_defaults(func=cmd_pretrain)

    def recon_flags(q):
        q.add_argument("--regulariser", choices=("tv", "huber", "learned"))
        q.add_argument("--prior", help="filter-bank file for the learned regulariser")
        q.add_argument("--noise", type=float)
        q.add_argument("--size")

    q = sub.add_parser("grid-alpha", parents=[common], help="select alpha by mean SSIM on a grid")
    q.add_argument("--pattern", required=True)
    q.add_argument("--corpus")
    q.add_argument("--batch", type=int, default=8)
    q.add_argument("--points", type=int)
    recon_flags(q)
    q.set_defaults(func=cmd_grid_alpha)

    q = sub.add_parser("train", parents=[common], help="learn a binary pattern")
    q.add_argument("--method", choices=("ste", "rnp"))
    q.add_argument("--corpus")
    q.add_argument("--m", type=int)
    q.add_argument("--epochs", type=int)
    q.add_argument("--batch-size", type=int)
    q.add_argument("--lr-z", type=float)
    q.add_argument("--lr-logalpha", type=float)
    q.add_argument("--resume", help="checkpoint to continue from")
    recon_flags(q)
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("reconstruct", parents=[common], help="reconstruct one image")
    q.add_argument("--pattern", required=True)
    q.add_argument("--alpha", type=float, required=True)
    q.add_argument("--image", help="ground-truth image to simulate measurements from")
    q.add_argument("--measurements", help="CSV with one measurement per line")
    q.add_argument("--shape", help="image shape HxW when reading measurements")
    recon_flags(q)
    q.set_defaults(func=cmd_reconstruct)

    q = sub.add_parser("evaluate", parents=[common], help="score patterns on a test corpus")
    q.add_argument("--pattern", required=True, nargs="+")
    q.add_argument("--alpha", default="grid", help="number, or 'grid' to select by SSIM")
    q.add_argument("--corpus")
    q.add_argument("--grid-corpus", help="images used for alpha selection (default: the test corpus)")
    q.add_argument("--points", type=int)
    recon_flags(q)
    q.set_defaults(func=cmd_evaluate)

    q = sub.add_parser("report", parents=[common], help="per-M sweep over pattern families")
    q.add_argument("--train-corpus")
    q.add_argument("--test-corpus")
    q.add_argument("--ms", type=_ints)
    q.add_argument("--families", type=_words)
    q.add_argument("--seeds", type=_ints)
    q.add_argument("--method", choices=("ste", "rnp"))
    q.add_argument("--epochs", type=int)
    q.add_argument("--batch-size", type=int)
    recon_flags(q)
    q.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    try:
        config = load_config(args.config) if args.config else {}
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        args.func(Settings(args, config), out)
    except (UsageError, ValueError, FileNotFoundError, io.FormatError, TrainingError, SolverError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
