"""Command-line entry point: ``radssl <subcommand> [flags]``.

Every run writes its results as delimited text under ``--out`` plus one
``run.json`` manifest (inputs, config hash, seed, emitted files, timestamp).
Timestamps live only in the manifest, so results files from two runs with
the same inputs are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__, bregman, checks
from .config import KEYS, ConfigError, RunConfig, load_config
from .encoder import load_checkpoint, save_checkpoint
from .features import DatasetError, load_dataset, save_dataset
from .metrics import MetricsReport
from .pipeline import SWEEPS, ablate, finetune, nested_cv, predict, pretrain, task_of
from .plotting import render, write_plot_data
from .simulator import SimConfig, estimate_moments, generate, reference_spec

log = logging.getLogger("radssl")

SUBCOMMANDS = ("simulate", "pretrain", "finetune", "evaluate", "ablate", "verify")


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    subcommand: str
    config_path: str | None
    output_dir: str
    seed: int
    config_hash: str | None = None
    inputs: dict[str, str] = field(default_factory=dict)
    emitted_files: list[tuple[str, str]] = field(default_factory=list)

    def emit(self, role: str, path: Path) -> Path:
        self.emitted_files.append((role, path.name))
        return path

    def write(self, argv: Sequence[str]) -> Path:
        path = Path(self.output_dir) / "run.json"
        body = {
            "subcommand": self.subcommand,
            "argv": list(argv),
            "config_path": self.config_path,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "inputs": self.inputs,
            "output_dir": self.output_dir,
            "emitted_files": [list(e) for e in self.emitted_files],
            "version": __version__,
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }
        path.write_text(json.dumps(body, indent=2) + "\n")
        return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence], delimiter: str = ",") -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


# -- argument parsing ---------------------------------------------------------------


def _config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides (take precedence over --config)")
    defaults = dict(RunConfig().items())
    for key in KEYS:
        if key in ("seed", "dataset"):
            continue
        g.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar=key.upper(), default=None,
                       help=f"default: {defaults[key]}")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", default=None, help="key = value run config file (default: none)")
    p.add_argument("--seed", type=int, default=None, help="random seed (default: 0)")
    p.add_argument("--out", required=out_required, default=None if out_required else "radssl-verify",
                   help="output directory" + ("" if out_required else " (default: radssl-verify)"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="radssl", description="Self-supervised pretraining on radiomic feature maps.")
    parser.add_argument("--version", action="version", version=f"radssl {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("simulate", help="generate a labeled synthetic dataset", formatter_class=fmt)
    _common(p)
    p.add_argument("--n", type=int, required=True, help="number of subjects (even)")
    p.add_argument("--theta", type=float, required=True, help="class-separation difficulty; small is easy")
    p.add_argument("--separated-rois", type=int, default=5, help="number of ROIs that carry the class shift")
    p.add_argument("--noise-sd", type=float, default=1.0, help="sd of the additive Gaussian noise")
    p.add_argument("--n-roi", type=int, default=10, help="ROIs per map when no --moments dataset is given")
    p.add_argument("--n-features", type=int, default=8, help="features per ROI when no --moments dataset is given")
    p.add_argument("--moments", default=None, help="manifest of a dataset to take target moments from")
    p.add_argument("--moment-mode", choices=("block", "full"), default="block", help="correlation structure")

    p = sub.add_parser("pretrain", help="self-supervised pretraining of the encoder", formatter_class=fmt)
    _common(p)
    p.add_argument("--dataset", default=None, help="dataset manifest (or 'dataset' in --config)")
    _config_flags(p)

    p = sub.add_parser("finetune", help="supervised fine-tuning on a labeled dataset", formatter_class=fmt)
    _common(p)
    p.add_argument("--dataset", default=None, help="labeled dataset manifest (or 'dataset' in --config)")
    p.add_argument("--encoder", default=None, help="pretrained encoder checkpoint; none trains from scratch")
    p.add_argument("--predict", default=None, help="dataset manifest to write predictions for")
    _config_flags(p)

    p = sub.add_parser("evaluate", help="nested cross-validation of pretraining + fine-tuning", formatter_class=fmt)
    _common(p)
    p.add_argument("--dataset", default=None, help="labeled dataset manifest (or 'dataset' in --config)")
    p.add_argument("--sizes", default=None, help="comma-separated subject counts for an AUC-vs-N curve")
    _config_flags(p)

    p = sub.add_parser("ablate", help="sweep one or more settings under nested CV", formatter_class=fmt)
    _common(p)
    p.add_argument("--dataset", default=None, help="labeled dataset manifest (or 'dataset' in --config)")
    p.add_argument("--sweep", action="append", required=True, metavar="NAME=V1,V2,...",
                   help=f"grid to sweep; NAME in {', '.join(SWEEPS)}; repeatable")
    _config_flags(p)

    p = sub.add_parser("verify", help="run the divergence identities and loss property checks", formatter_class=fmt)
    _common(p, out_required=False)
    p.add_argument("--trials", type=int, default=1000, help="random trials per check")
    return parser


# -- shared helpers ---------------------------------------------------------------------


def _run_config(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "dataset", None):
        overrides["dataset"] = args.dataset
    return load_config(args.config, overrides)


def _dataset(cfg: RunConfig, manifest: RunManifest):
    if not cfg.dataset:
        raise UsageError("--dataset is required (or set 'dataset' in --config)")
    path = Path(cfg.dataset)
    if not path.exists():
        raise UsageError(f"--dataset: manifest not found: {path}")
    manifest.inputs["dataset"] = str(path)
    manifest.inputs["dataset_sha256"] = _sha256(path)
    return load_dataset(path, delimiter=cfg.delimiter)


def _summary_rows(report: MetricsReport) -> list[tuple]:
    return [(m, report.mean(m), report.std(m)) for m in report.metric_names]


def _headline(report: MetricsReport) -> str:
    return "auc" if report.task == "classification" else "mae"


def _runs_rows(report: MetricsReport, folds: int) -> list[tuple]:
    return [(i // folds, i % folds, *(r[m] for m in report.metric_names)) for i, r in enumerate(report.runs)]


def _stratified_subset(labels: np.ndarray, n: int, rng: np.random.Generator, classification: bool) -> np.ndarray:
    if n > len(labels):
        raise UsageError(f"--sizes: {n} exceeds the {len(labels)} subjects in the dataset")
    if not classification:
        return np.sort(rng.choice(len(labels), size=n, replace=False))
    ones = np.flatnonzero(labels == 1)
    zeros = np.flatnonzero(labels == 0)
    n1 = int(round(n * len(ones) / len(labels)))
    return np.sort(np.concatenate([rng.choice(ones, n1, replace=False), rng.choice(zeros, n - n1, replace=False)]))


# -- subcommands --------------------------------------------------------------------------


def cmd_simulate(args, out: Path, manifest: RunManifest) -> int:
    seed = 0 if args.seed is None else args.seed
    manifest.seed = seed
    if args.moments:
        src = Path(args.moments)
        if not src.exists():
            raise UsageError(f"--moments: manifest not found: {src}")
        spec = estimate_moments(load_dataset(src), mode=args.moment_mode)
        manifest.inputs["moments"] = str(src)
        manifest.inputs["moments_sha256"] = _sha256(src)
    else:
        spec = reference_spec(args.n_roi, args.n_features, seed=seed)
    n_roi = spec.shape[0]
    if not 1 <= args.separated_rois <= n_roi:
        raise UsageError(f"--separated-rois must be in [1, {n_roi}]")
    cfg = SimConfig(args.n, args.theta, tuple(range(args.separated_rois)), args.noise_sd, seed)
    d = generate(spec, cfg)
    path = save_dataset(d, out)
    manifest.emit("dataset", path)
    manifest.config_hash = hashlib.sha256(repr(cfg).encode()).hexdigest()
    print(f"wrote {len(d)} subjects ({n_roi} ROIs x {spec.shape[1]} features) to {path}")
    return 0


def cmd_pretrain(args, out: Path, manifest: RunManifest) -> int:
    cfg = _run_config(args)
    manifest.seed, manifest.config_hash = cfg.train.seed, cfg.hash()
    d = _dataset(cfg, manifest)
    enc_cfg = cfg.encoder_config(d.n_features)
    from .features import zscore_normalize

    dn, _ = zscore_normalize(d)
    enc, history = pretrain(dn, enc_cfg, cfg.train)
    ckpt = out / "encoder.ckpt"
    save_checkpoint(enc, ckpt)
    manifest.emit("encoder", ckpt)
    hist = _write_rows(out / "pretrain_loss.csv", ("epoch", "loss"), [(i + 1, v) for i, v in enumerate(history)])
    manifest.emit("loss_history", hist)
    print(f"pretrained {len(history)} epochs; final loss {history[-1]:.6g}; checkpoint {ckpt}")
    return 0


def cmd_finetune(args, out: Path, manifest: RunManifest) -> int:
    cfg = _run_config(args)
    manifest.seed, manifest.config_hash = cfg.train.seed, cfg.hash()
    d = _dataset(cfg, manifest)
    task = task_of(d)
    from .features import fit_normalization

    stats = fit_normalization(d)
    enc = None
    if args.encoder:
        if not Path(args.encoder).exists():
            raise UsageError(f"--encoder: checkpoint not found: {args.encoder}")
        enc = load_checkpoint(args.encoder)
        manifest.inputs["encoder_sha256"] = _sha256(Path(args.encoder))
    enc_cfg = enc.config if enc is not None else cfg.encoder_config(d.n_features)
    model, history = finetune(enc, stats.transform(d), task, cfg.train, enc_cfg=enc_cfg)
    manifest.emit("loss_history", _write_rows(out / "finetune_loss.csv", ("epoch", "loss"),
                                              [(i + 1, v) for i, v in enumerate(history)]))
    ckpt = out / "finetuned_encoder.ckpt"
    save_checkpoint(model.encoder, ckpt)
    manifest.emit("encoder", ckpt)
    from .metrics import evaluate as score

    train_report = score(predict(model, stats.transform(d)), d.labels, task)
    manifest.emit("results", _write_rows(out / "train_metrics.csv", ("metric", "value"),
                                         [(m, train_report.mean(m)) for m in train_report.metric_names]))
    if args.predict:
        p = Path(args.predict)
        if not p.exists():
            raise UsageError(f"--predict: manifest not found: {p}")
        target = load_dataset(p, delimiter=cfg.delimiter)
        preds = predict(model, stats.transform(target))
        manifest.inputs["predict_sha256"] = _sha256(p)
        manifest.emit("predictions", _write_rows(out / "predictions.csv", ("subject_id", "prediction"),
                                                 list(zip(target.subject_ids, preds))))
    print(f"fine-tuned {task} model on {len(d)} subjects; training {_headline(train_report)} "
          f"{train_report.mean(_headline(train_report)):.4f}")
    return 0


def cmd_evaluate(args, out: Path, manifest: RunManifest) -> int:
    cfg = _run_config(args)
    manifest.seed, manifest.config_hash = cfg.train.seed, cfg.hash()
    d = _dataset(cfg, manifest)
    enc_cfg = cfg.encoder_config(d.n_features)
    report = nested_cv(d, enc_cfg, cfg.train, folds=cfg.folds, repetitions=cfg.repetitions)
    names = report.metric_names
    manifest.emit("runs", _write_rows(out / "runs.csv", ("repetition", "fold", *names), _runs_rows(report, cfg.folds)))
    manifest.emit("results", _write_rows(out / "results.csv", ("metric", "mean", "sd"), _summary_rows(report)))
    head = _headline(report)
    if args.sizes:
        try:
            sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
        except ValueError:
            raise UsageError(f"--sizes: expected comma-separated integers, got {args.sizes!r}") from None
        rng = np.random.default_rng(cfg.train.seed)
        rows = []
        for n in sizes:
            sub = d.subset(_stratified_subset(d.labels, n, rng, report.task == "classification"))
            r = nested_cv(sub, enc_cfg, cfg.train, folds=cfg.folds, repetitions=cfg.repetitions)
            rows.append((n, r.mean(head), r.std(head)))
        data = manifest.emit("plot_data", write_plot_data(out / f"{head}_vs_n.csv", rows))
        manifest.emit("figure", render(data, xlabel="training subjects N", ylabel=head.upper()))
    print(f"{report.task}: {head} {report.mean(head):.4f} +/- {report.std(head):.4f} "
          f"over {len(report.runs)} folds")
    return 0


def _parse_sweep(items: Sequence[str]) -> dict[str, list]:
    sweep: dict[str, list] = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--sweep: expected NAME=V1,V2,..., got {item!r}")
        name, values = item.split("=", 1)
        name = name.strip()
        if name not in SWEEPS:
            raise UsageError(f"--sweep: unknown name {name!r}; expected one of {', '.join(SWEEPS)}")
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise UsageError(f"--sweep {name}: empty grid")
        sweep[name] = vals if name == "task_mode" else [int(v) if name == "k" else float(v) for v in vals]
    return sweep


def cmd_ablate(args, out: Path, manifest: RunManifest) -> int:
    cfg = _run_config(args)
    manifest.seed, manifest.config_hash = cfg.train.seed, cfg.hash()
    try:
        sweep = _parse_sweep(args.sweep)
    except ValueError as exc:
        raise UsageError(f"--sweep: {exc}") from None
    manifest.inputs["sweep"] = ";".join(args.sweep)
    d = _dataset(cfg, manifest)
    enc_cfg = cfg.encoder_config(d.n_features)
    rows = ablate(d, enc_cfg, cfg.train, sweep, folds=cfg.folds, repetitions=cfg.repetitions)
    names = rows[0].report.metric_names
    table = [(r.sweep, r.value, *(v for m in names for v in (r.report.mean(m), r.report.std(m)))) for r in rows]
    header = ("sweep", "value", *(f"{m}_{s}" for m in names for s in ("mean", "sd")))
    manifest.emit("results", _write_rows(out / "ablation.csv", header, table))
    head = _headline(rows[0].report)
    for name in sweep:
        pts = [(r.value, r.report.mean(head), r.report.std(head)) for r in rows if r.sweep == name]
        data = manifest.emit("plot_data", write_plot_data(out / f"{name}_{head}.csv", pts))
        manifest.emit("figure", render(data, xlabel=name.replace("_", " "), ylabel=head.upper()))
    for r in rows:
        print(f"{r.sweep}={r.value}: {head} {r.report.mean(head):.4f} +/- {r.report.std(head):.4f}")
    return 0


def cmd_verify(args, out: Path, manifest: RunManifest) -> int:
    seed = 0 if args.seed is None else args.seed
    manifest.seed = seed
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    reports = bregman.run_suite(args.trials, seed) + checks.run_suite(args.trials, seed)
    lines = [r.line() for r in reports]
    report = out / "verify.txt"
    report.write_text("\n".join(lines) + "\n")
    manifest.emit("report", report)
    print("\n".join(lines))
    failed = sum(not r.passed for r in reports)
    print(f"{len(reports) - failed}/{len(reports)} checks passed")
    return 1 if failed else 0


COMMANDS = {
    "simulate": cmd_simulate,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "verify": cmd_verify,
}


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("radssl: error: a subcommand is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    torch.set_num_threads(1)
    out = Path(args.out)
    manifest = RunManifest(args.command, getattr(args, "config", None), str(out), 0)
    try:
        out.mkdir(parents=True, exist_ok=True)
        status = COMMANDS[args.command](args, out, manifest)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"radssl {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, ValueError, FloatingPointError, OSError) as exc:
        print(f"radssl {args.command}: error: {exc}", file=sys.stderr)
        return 1
    manifest.write(argv)
    return status


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
