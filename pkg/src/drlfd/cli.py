"""Command-line entry point: ``drlfd <subcommand> ...``.

Exit codes: 0 success, 1 validation/data/checkpoint failure, 2 usage error.
Config files override built-in defaults and explicit flags override config
files. All randomness derives from ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from drlfd import dataset as ds
from drlfd import nnkernel as nk
from drlfd.evaluate import evaluate, report_table
from drlfd.models import VARIANTS, ModelConfig, build_model, transfer_encoder, with_variant
from drlfd.synthgen import SynthConfig, gen_dataset
from drlfd.train import Hyperparams, load_checkpoint, train
from drlfd.validation import CheckpointError, ValidationError

log = logging.getLogger("drlfd")

DATA_ENV = "DRLFD_DATA"
PROTOCOLS = ("random", "leave-camera-out")


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    pass


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def _common(p, suppress):
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice in this run")
    p.add_argument("--threads", type=int, default=1, help="upper bound on BLAS/OpenMP threads")
    p.add_argument("--json", action="store_true", help="print the run summary as JSON on stdout")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    if suppress:
        for a in p._actions:
            if a.dest != "help":
                a.default = argparse.SUPPRESS


def _data_arg(p):
    p.add_argument("data", nargs="?", default=os.environ.get(DATA_ENV),
                   help=f"dataset root (env {DATA_ENV} when omitted)")


def _split_args(p):
    p.add_argument("--protocol", choices=PROTOCOLS, default="random", help="split protocol")
    p.add_argument("--camera", type=int, default=None, help="held-out camera for leave-camera-out (1..6)")
    p.add_argument("--split", default=None, help="split manifest JSON (overrides --protocol/--camera)")


def _model_args(p):
    p.add_argument("--model-config", default=None, help="model config JSON")
    p.add_argument("--hyperparams", default=None, help="hyperparameter JSON")
    p.add_argument("--image-size", type=int, default=64, help="square model input size in pixels")
    p.add_argument("--with-calib", action="store_true", help="concatenate the camera calibration vector")
    p.add_argument("--residual", action=argparse.BooleanOptionalAction, default=True,
                   help="predict the pose change relative to the current Arm-2 pose")
    p.add_argument("--window", type=int, default=5, help="sequence length L for recurrent variants")
    p.add_argument("--hidden-size", type=int, default=64, help="recurrent hidden units")
    p.add_argument("--epochs", type=int, default=50, help="maximum training epochs")
    p.add_argument("--batch-size", type=int, default=32, help="minibatch size")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    p.add_argument("--loss", choices=("pose", "mae"), default="pose", help="training loss")
    p.add_argument("--w-pos", type=float, default=1e6, help="position weight of the pose loss (1/m^2)")
    p.add_argument("--w-ori", type=float, default=1.0, help="orientation weight of the pose loss")
    p.add_argument("--patience", type=int, default=8, help="early-stopping patience in epochs")


def build_parser(suppress: bool = False) -> argparse.ArgumentParser:
    """Full parser; ``suppress=True`` drops defaults so only explicit flags remain."""
    parser = argparse.ArgumentParser(prog="drlfd", formatter_class=_Formatter,
                                     description="Needle-insertion learning-from-demonstration pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic dataset", formatter_class=_Formatter)
    p.add_argument("--out", required=True, help="output dataset root")
    p.add_argument("--trials", type=int, default=10, help="number of trials")
    p.add_argument("--cells-min", type=int, default=140, help="minimum cells per trial")
    p.add_argument("--cells-max", type=int, default=200, help="maximum cells per trial")
    p.add_argument("--image-size", type=int, default=64, help="square frame size in pixels")
    p.add_argument("--stiffness", type=float, default=0.4, help="tissue deformation gain")
    p.add_argument("--needle-radius", type=float, default=0.012, help="needle radius in meters")
    _common(p, suppress)

    p = sub.add_parser("validate", help="parse trials and report every violation", formatter_class=_Formatter)
    _data_arg(p)
    _common(p, suppress)

    p = sub.add_parser("split", help="write a split manifest", formatter_class=_Formatter)
    _data_arg(p)
    _split_args(p)
    p.add_argument("--out", default="split.json", help="manifest path")
    _common(p, suppress)

    p = sub.add_parser("train", help="train one model and write a run directory", formatter_class=_Formatter)
    _data_arg(p)
    _split_args(p)
    _model_args(p)
    p.add_argument("--variant", choices=VARIANTS, default="feedforward", help="model variant")
    p.add_argument("--encoder-from", default=None, help="checkpoint whose CNN encoder is copied and frozen")
    p.add_argument("--out", default="run", help="run directory")
    _common(p, suppress)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write a report", formatter_class=_Formatter)
    _data_arg(p)
    _split_args(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--label", default=None, help="report row label (default: protocol label)")
    p.add_argument("--out", default=None, help="report path prefix; writes PREFIX.txt and PREFIX.csv")
    _common(p, suppress)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer kind", formatter_class=_Formatter)
    p.add_argument("--kinds", nargs="+", default=list(nk.LAYER_KINDS), help="layer kinds to check")
    p.add_argument("--trials", type=int, default=20, help="random shapes per kind")
    p.add_argument("--tol", type=float, default=1e-4, help="relative error tolerance")
    _common(p, suppress)

    p = sub.add_parser("experiment", help="train and evaluate a table-style protocol", formatter_class=_Formatter)
    _data_arg(p)
    p.add_argument("--config", default=None, help="experiment JSON whose keys mirror these flags")
    p.add_argument("--protocol", choices=PROTOCOLS, default="random", help="split protocol")
    p.add_argument("--camera", type=int, nargs="+", default=[6], help="held-out camera(s) for leave-camera-out")
    p.add_argument("--variants", nargs="+", choices=VARIANTS, default=["feedforward"], help="variants to train")
    _model_args(p)
    p.add_argument("--out", default="experiment", help="output directory")
    _common(p, suppress)
    return parser


def _parse(argv):
    args = build_parser().parse_args(argv)
    explicit = set(vars(build_parser(suppress=True).parse_args(argv)))
    return args, explicit


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------

def _emit(args, summary: dict, text: str = "") -> None:
    if args.json:
        print(json.dumps(summary, indent=2, sort_keys=True))
    elif text:
        print(text, end="" if text.endswith("\n") else "\n")


def _data_root(args) -> Path:
    if not args.data:
        raise ValidationError(f"no dataset given and {DATA_ENV} is unset", field="data", rule="missing")
    root = Path(args.data)
    if not root.is_dir():
        raise ValidationError(f"dataset root not found: {root}", field="data", rule="missing")
    return root


def _sample_keys(trials):
    """Per-sample (trial_id, camera_id, t) in :func:`make_samples` order, without loading images."""
    return [SimpleNamespace(trial_id=tr.trial_id, camera_id=cam, t=c.t)
            for tr in trials for cam in range(1, ds.N_CAMERAS + 1) for c in tr.cells]


def _load_samples(root, image_size, with_calib):
    trials = ds.load_dataset(root)
    if not trials:
        raise ValidationError(f"no trials under {root}", field="data", rule="nonempty")
    samples = [s for tr in trials for s in ds.make_samples(tr, (image_size, image_size), with_calib)]
    return trials, samples


def _make_split(args, samples, camera=None):
    if getattr(args, "split", None):
        path = Path(args.split)
        if not path.is_file():
            raise ValidationError(f"split manifest not found: {path}", field="split", rule="missing")
        split = ds.Split.from_dict(json.loads(path.read_text()))
    elif args.protocol == "random":
        split = ds.split_random(samples, args.seed)
    else:
        cam = args.camera if camera is None else camera
        if cam is None:
            raise ValidationError("leave-camera-out needs --camera", field="camera", rule="missing")
        split = ds.split_leave_camera_out(samples, cam, seed=args.seed)
    split.check_partition(len(samples))
    return split


def _load_json(path, what):
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{what} not found: {p}", field=what, rule="missing")
    return json.loads(p.read_text())


_MODEL_FLAGS = {"image_size": "image_size", "with_calib": "use_calibration", "residual": "residual",
                "hidden_size": "hidden_size"}
_HP_FLAGS = ("epochs", "batch_size", "lr", "loss", "w_pos", "w_ori", "patience")


def _configs(args, explicit):
    """(ModelConfig, Hyperparams) with defaults < config files < explicit flags."""
    m = {"image_size": (args.image_size, args.image_size), "use_calibration": args.with_calib,
         "residual": args.residual, "hidden_size": args.hidden_size}
    if args.model_config:
        m.update(_load_json(args.model_config, "model_config"))
    for flag, key in _MODEL_FLAGS.items():
        if flag in explicit:
            m[key] = (args.image_size, args.image_size) if flag == "image_size" else getattr(args, flag)
    h = {k: getattr(args, k) for k in _HP_FLAGS}
    if args.hyperparams:
        h.update(_load_json(args.hyperparams, "hyperparams"))
    h.update({k: getattr(args, k) for k in _HP_FLAGS if k in explicit})
    h["seed"] = args.seed
    cfg = ModelConfig.from_dict({**ModelConfig().to_dict(), **m})
    return cfg, Hyperparams.from_dict(h)


def _variant_config(cfg, variant, args, explicit):
    window = args.window if ("window" in explicit or cfg.window == 1) else cfg.window
    return with_variant(cfg, variant, window)


def _write_report(prefix, text, csv_text):
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{prefix}.txt").write_text(text)
    Path(f"{prefix}.csv").write_text(csv_text)


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_synth(args, explicit):
    cfg = SynthConfig(n_trials=args.trials, cells_per_trial=(args.cells_min, args.cells_max),
                      image_size=(args.image_size, args.image_size), needle_radius=args.needle_radius,
                      stiffness=args.stiffness, seed=args.seed)
    summary = gen_dataset(cfg, args.out)
    _emit(args, summary, f"wrote {summary['n_trials']} trials ({summary['total_frames']} frames) to {args.out}")
    return 0


def cmd_validate(args, explicit):
    root = _data_root(args)
    paths = ds.list_trials(root)
    if not paths:
        raise ValidationError(f"no trials under {root}", field="data", rule="nonempty")
    report, lines = {}, []
    for p in paths:
        _, violations = ds.check_trial(p)
        report[p.name] = [v.to_dict() for v in violations]
        lines += [str(v) for v in violations]
    total = sum(len(v) for v in report.values())
    lines.append(f"{len(paths)} trials, {total} violations")
    _emit(args, {"trials": len(paths), "violations": total, "per_trial": report}, "\n".join(lines))
    return 1 if total else 0


def cmd_split(args, explicit):
    trials = ds.load_dataset(_data_root(args))
    keys = _sample_keys(trials)
    split = _make_split(args, keys)
    out = Path(args.out)
    out.write_text(json.dumps(split.to_dict(), indent=1) + "\n")
    summary = {"manifest": str(out), "protocol": split.protocol, "camera": split.camera, "seed": split.seed,
               "train": len(split.train), "val": len(split.val), "test": len(split.test)}
    _emit(args, summary, f"{split.label}: train {len(split.train)}, val {len(split.val)}, "
                         f"test {len(split.test)} -> {out}")
    return 0


def cmd_train(args, explicit):
    cfg, hp = _configs(args, explicit)
    cfg = _variant_config(cfg, args.variant, args, explicit)
    _, samples = _load_samples(_data_root(args), cfg.image_size[0], cfg.use_calibration)
    split = _make_split(args, samples)
    model = build_model(cfg, args.seed)
    if args.encoder_from:
        src, _ = load_checkpoint(args.encoder_from)
        transfer_encoder(src, model, freeze=True)
    best, history = train(model, split, samples, hp, run_dir=args.out)
    summary = {"run_dir": str(args.out), "config_hash": cfg.hash(), "variant": cfg.variant,
               "epochs_run": history.epochs_run, "best_epoch": history.best_epoch,
               "best_val_loss": history.val_loss[history.best_epoch], "checksum": best.checksum()}
    Path(args.out, "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _emit(args, summary, f"best epoch {history.best_epoch} of {history.epochs_run}; "
                         f"checkpoints in {args.out}")
    return 0


def cmd_eval(args, explicit):
    model, _ = load_checkpoint(args.checkpoint)
    _, samples = _load_samples(_data_root(args), model.config.image_size[0], model.config.use_calibration)
    split = _make_split(args, samples)
    report = evaluate(model, split.test, samples, protocol={"protocol": split.protocol, "camera": split.camera})
    text, csv_text = report_table([report], [args.label or split.label], baseline_row=True)
    if args.out:
        _write_report(args.out, text, csv_text)
    problems = report.violations()
    _emit(args, {**report.to_dict(), "violations": problems}, text)
    for p in problems:
        print(f"invariant violated: {p}", file=sys.stderr)
    return 1 if problems else 0


def cmd_gradcheck(args, explicit):
    res = nk.check_layer_kinds(args.kinds, args.trials, args.seed, args.tol)
    lines = [f"{'kind':<12}{'max rel err':>14}  param"]
    for k, r in res.items():
        lines.append(f"{k:<12}{r['max_rel_error']:>14.3e}  {r['worst_param']}  {'ok' if r['passed'] else 'FAIL'}")
    ok = all(r["passed"] for r in res.values())
    _emit(args, {"passed": ok, "kinds": res}, "\n".join(lines))
    return 0 if ok else 1


def _apply_config_file(args, explicit):
    if not args.config:
        return args
    cfg = _load_json(args.config, "config")
    known = set(vars(args))
    unknown = set(cfg) - known
    if unknown:
        raise ValidationError(f"unknown experiment config keys: {sorted(unknown)}", field="config", rule="keys")
    for k, v in cfg.items():
        if k not in explicit:
            setattr(args, k, v)
            explicit.add(k)
    return args


def cmd_experiment(args, explicit):
    args = _apply_config_file(args, explicit)
    cfg, hp = _configs(args, explicit)
    _, samples = _load_samples(_data_root(args), cfg.image_size[0], cfg.use_calibration)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cameras = [None] if args.protocol == "random" else list(args.camera)
    variants = sorted(set(args.variants), key=VARIANTS.index)
    reports, labels, runs = [], [], []
    for cam in cameras:
        split = _make_split(args, samples, camera=cam)
        encoder = None
        for variant in variants:
            vcfg = _variant_config(cfg, variant, args, explicit)
            model = build_model(vcfg, args.seed)
            if variant != "feedforward" and encoder is not None:
                transfer_encoder(encoder, model, freeze=True)
            if args.protocol == "random":
                label = variant
            else:
                label = split.label if len(variants) == 1 else f"{split.label}/{variant}"
            run_dir = out / "runs" / label.replace("/", "_")
            log.info("training %s", label)
            best, history = train(model, split, samples, hp, run_dir=run_dir)
            if variant == "feedforward":
                encoder = best
            rep = evaluate(best, split.test, samples, protocol={"protocol": split.protocol, "camera": split.camera,
                                                                "variant": variant,
                                                                "with_calib": vcfg.use_calibration})
            reports.append(rep)
            labels.append(label)
            runs.append({"label": label, "run_dir": str(run_dir), "best_epoch": history.best_epoch,
                         "epochs_run": history.epochs_run, "checksum": best.checksum(),
                         "metrics": rep.aggregate.to_dict(), "baseline": rep.baseline.to_dict()})
    text, csv_text = report_table(reports, labels, baseline_row=len(cameras) == 1)
    _write_report(out / "report", text, csv_text)
    problems = [f"{lbl}: {p}" for lbl, r in zip(labels, reports) for p in r.violations()]
    summary = {"protocol": args.protocol, "cameras": cameras, "variants": variants,
               "with_calib": cfg.use_calibration, "seed": args.seed, "runs": runs, "violations": problems}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _emit(args, summary, text)
    for p in problems:
        print(f"invariant violated: {p}", file=sys.stderr)
    return 1 if problems else 0


COMMANDS = {"synth": cmd_synth, "validate": cmd_validate, "split": cmd_split, "train": cmd_train,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck, "experiment": cmd_experiment}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, explicit = _parse(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("drlfd: error: --threads must be >= 1", file=sys.stderr)
        return 2
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args, explicit)
    except (ValidationError, CheckpointError, FileNotFoundError) as exc:
        print(f"drlfd {args.command}: error: {exc}", file=sys.stderr)
        return 1
