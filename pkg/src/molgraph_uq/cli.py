"""``molgraph-uq`` command line: gen, train, predict and the three experiments.

Exit codes: 0 success, 2 usage, 3 I/O or input format, 4 numeric failure.
"""

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import datagen as D
from . import experiments as E
from . import model as M
from . import train as TR
from . import uq
from .errors import CheckpointFormatError, MolGraphUQError, NonFiniteLoss, TooSmall
from .graph import featurize, parse_smiles, read_dataset, write_dataset

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
SEED_ENV = "MOLGRAPH_UQ_SEED"


class UsageError(Exception):
    pass


# TrainConfig fields exposed as --kebab-case flags
_TRAIN_FLAGS = [
    ("epochs", int),
    ("batch_size", int),
    ("lr0", float),
    ("lr_halving", int),
    ("train_frac", float),
    ("valid_frac", float),
    ("test_frac", float),
    ("mc_samples", int),
    ("length_scale", float),
    ("clip_norm", float),
    ("valid_mode", str),
]


def _seed(args):
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None
    return args.seed


def _add_train_flags(p, task_default=None):
    p.add_argument("--config", help="file of 'key = value' training settings")
    p.add_argument("--task", choices=M.TASKS, default=task_default)
    for name, kind in _TRAIN_FLAGS:
        p.add_argument("--" + name.replace("_", "-"), type=kind, default=None)


def _train_config(args, seed, task=None):
    base = TR.TrainConfig(task=task or args.task or "regression", seed=seed)
    if args.config:
        try:
            base = TR.load_config(args.config, base)
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc.strerror}") from exc
    values = dataclasses.asdict(base)
    for name, _ in _TRAIN_FLAGS:
        v = getattr(args, name)
        if v is not None:
            values[name] = v
    if args.task:
        values["task"] = args.task
    values["seed"] = seed
    try:
        return TR.TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _positive(kind):
    def conv(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value

    return conv


def _sigma_list(text):
    try:
        values = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad sigma list {text!r}") from None
    if not values or any(v < 0 for v in values):
        raise argparse.ArgumentTypeError("sigmas must be a non-empty list of non-negative numbers")
    return values


def _echo(log_fn):
    return lambda row: log_fn(
        f"epoch {row['epoch']:3d}  lr {row['lr']:.3g}  train {row['train_loss']:.4f}"
        f"  valid {row['valid_loss']:.4f}  metric {row['valid_metric']:.4f}"
    )


def _stderr(msg):
    print(msg, file=sys.stderr, flush=True)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen(args):
    seed = _seed(args)
    if args.task == "classification" and (args.noise_sigma or args.corrupt_frac):
        raise UsageError("--noise-sigma and --corrupt-frac apply to regression corpora only")
    if not 0.0 <= args.corrupt_frac <= 1.0:
        raise UsageError("--corrupt-frac must lie in [0, 1]")
    if not 0.0 <= args.flip_rate < 0.5:
        raise UsageError("--flip-rate must lie in [0, 0.5)")
    if args.noise_sigma < 0:
        raise UsageError("--noise-sigma must be non-negative")
    ss = np.random.SeedSequence(seed)
    mol_rng, noise_rng, corrupt_rng, class_rng = (np.random.default_rng(s) for s in ss.spawn(4))
    records = D.make_records(D.generate_molecules(args.n, mol_rng, args.max_atoms))
    threshold = args.threshold
    if args.task == "regression":
        records = D.inject_noise(records, args.noise_sigma, noise_rng)
        records = D.inject_corruption(records, args.corrupt_frac, corrupt_rng, mode=args.corrupt_mode)
    else:
        if threshold is None:
            threshold = float(np.median([r.clean_label for r in records]))
        records = D.make_class_labels(records, threshold, args.flip_rate, class_rng)

    out = Path(args.out)
    sidecar = Path(args.sidecar) if args.sidecar else out.with_suffix(".sidecar.csv")
    write_dataset(out, [(r.smiles, r.label) for r in records], task=args.task)
    D.write_sidecar(sidecar, records)

    labels = np.array([r.label for r in records])
    print(f"wrote {len(records)} records to {out} (sidecar {sidecar})")
    print(f"task={args.task} seed={seed} max_atoms={args.max_atoms}")
    if args.task == "regression":
        print(f"label mean {labels.mean():.4f} std {labels.std():.4f}; corrupted {sum(r.corrupted for r in records)}")
    else:
        print(f"threshold {threshold:.4f}; positive share {labels.mean():.4f}")
    return EXIT_OK


def _load_records(path):
    pairs = read_dataset(path)
    if not pairs:
        raise ValueError(f"{path}: no records")
    return pairs


def cmd_train(args):
    seed = _seed(args)
    cfg = _train_config(args, seed)
    pairs = _load_records(args.data)
    smiles = [s for s, _ in pairs]
    labels = [y for _, y in pairs]
    compacts = TR.compact_graphs(smiles)
    print(
        f"training task={cfg.task} epochs={cfg.epochs} batch={cfg.batch_size} lr0={cfg.lr0:g}"
        f" splits={cfg.train_frac:g}/{cfg.valid_frac:g}/{cfg.test_frac:g} seed={cfg.seed}"
    )
    res = TR.fit(cfg, smiles, labels, compacts, log=_echo(_stderr) if args.verbose else None)
    M.save_checkpoint(args.checkpoint, res.best_params)
    TR.write_history(args.history, res.history)
    n_tr, n_va, n_te = (len(x) for x in res.split)
    print(f"split train/valid/test = {n_tr}/{n_va}/{n_te}; best epoch {res.best_epoch}")
    print(f"checkpoint {args.checkpoint}; history {args.history}")
    return EXIT_OK


def cmd_predict(args):
    seed = _seed(args)
    params = M.load_checkpoint(args.checkpoint)
    pairs = _load_records(args.data)
    compacts = [M.compact(featurize(parse_smiles(s))) for s, _ in pairs]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    reports = uq.mc_predict(params, compacts, args.mc_samples, rng)
    rows = uq.report_rows(params.task, range(len(pairs)), [s for s, _ in pairs], [y for _, y in pairs], reports)
    uq.write_report_csv(args.out, params.task, rows)
    print(f"wrote {len(rows)} {params.task} reports (T={args.mc_samples}) to {args.out}")
    return EXIT_OK


def _emit(report, args, stem):
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
    E.write_report(report, csv_path, json_path)
    print(f"wrote {csv_path} and {json_path}")


def _fmt(x, spec=".4f"):
    return "n/a" if x is None else format(x, spec)


def cmd_exp_noise(args):
    seed = _seed(args)
    cfg = _train_config(args, seed, task="regression")
    if cfg.task != "regression":
        raise UsageError("exp-noise trains a regression model")
    report = E.run_noise(args.sigmas, args.n, seed, args.max_atoms, cfg, log=_echo(_stderr) if args.verbose else None)
    for s in report.summaries:
        print(
            f"sigma {s['sigma']:g}: aleatoric {_fmt(s['mean_aleatoric'])}"
            f"  epistemic {_fmt(s['mean_epistemic'])}  total {_fmt(s['mean_total'])}"
        )
    _emit(report, args, "exp-noise")
    return EXIT_OK


def cmd_exp_corrupt(args):
    seed = _seed(args)
    if not 0.0 <= args.corrupt_frac < 0.5:
        raise UsageError("--corrupt-frac must lie in [0, 0.5)")
    cfg = _train_config(args, seed, task="regression")
    if cfg.task != "regression":
        raise UsageError("exp-corrupt trains a regression model")
    report = E.run_corruption(
        args.corrupt_frac, args.n, seed, args.max_atoms, cfg, mode=args.corrupt_mode,
        log=_echo(_stderr) if args.verbose else None,
    )
    s = report.summaries[0]
    print(
        f"corrupted {s['n_corrupted']}/{s['n']} test rows; ROC area {_fmt(s['roc_auc'])};"
        f" aleatoric corrupted {_fmt(s['mean_aleatoric_corrupted'])} vs clean {_fmt(s['mean_aleatoric_clean'])}"
    )
    _emit(report, args, "exp-corrupt")
    return EXIT_OK


def cmd_exp_confidence(args):
    seed = _seed(args)
    if not 0.0 <= args.flip_rate < 0.5:
        raise UsageError("--flip-rate must lie in [0, 0.5)")
    cfg = _train_config(args, seed, task="classification")
    if cfg.task != "classification":
        raise UsageError("exp-confidence trains a classification model")
    report = E.run_confidence(
        args.flip_rate, args.threshold, args.n, seed, args.max_atoms, cfg,
        log=_echo(_stderr) if args.verbose else None,
    )
    s = report.summaries[0]
    print(f"test accuracy {_fmt(s['accuracy'])}")
    for b in s["bins"]:
        print(f"  uncertainty ({b['lo']:.1f}, {b['hi']:.1f}]: n={b['count']} accuracy {_fmt(b['accuracy'])}")
    print(f"total uncertainty peaks in probability decile {s['peak_decile']}")
    _emit(report, args, "exp-confidence")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _corpus_flags(p, n_default=2500):
    p.add_argument("--n", type=_positive(int), default=n_default)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-atoms", type=int, default=24, choices=range(1, 76), metavar="1..75")


def build_parser():
    parser = argparse.ArgumentParser(prog="molgraph-uq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset and sidecar")
    _corpus_flags(p)
    p.add_argument("--task", choices=M.TASKS, default="regression")
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--corrupt-frac", type=float, default=0.0)
    p.add_argument("--corrupt-mode", choices=("clustered", "uniform"), default="clustered")
    p.add_argument("--threshold", type=float, default=None, help="class threshold (default: median label)")
    p.add_argument("--flip-rate", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.add_argument("--sidecar", default=None, help="default: <out>.sidecar.csv")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--history", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="MC-dropout uncertainty reports for a dataset file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mc-samples", type=int, default=uq.DEFAULT_T)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("exp-noise", help="aleatoric/epistemic response to label noise")
    _corpus_flags(p)
    p.add_argument("--sigmas", type=_sigma_list, default=[0.0, 0.5, 1.0])
    _add_train_flags(p)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_exp_noise)

    p = sub.add_parser("exp-corrupt", help="retrieve zero-labelled samples by aleatoric rank")
    _corpus_flags(p)
    p.add_argument("--corrupt-frac", type=float, default=0.05)
    p.add_argument("--corrupt-mode", choices=("clustered", "uniform"), default="clustered")
    _add_train_flags(p)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_exp_corrupt)

    p = sub.add_parser("exp-confidence", help="accuracy per uncertainty bin for a classifier")
    _corpus_flags(p)
    p.add_argument("--flip-rate", type=float, default=0.2)
    p.add_argument("--threshold", type=float, default=None)
    _add_train_flags(p)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_exp_confidence)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"molgraph-uq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLoss as exc:
        print(f"molgraph-uq: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointFormatError, ValueError, TooSmall, MolGraphUQError) as exc:
        print(f"molgraph-uq: input error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
