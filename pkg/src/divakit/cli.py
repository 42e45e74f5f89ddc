"""Command line entry point: ``python -m divakit <command> ...``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical fault.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import adapt, data, defend, experiment, metrics, surrogate
from .attack import VARIANTS, AttackConfig
from .checkpoint import CheckpointError
from .nn import NumericalError, accuracy

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _config(args):
    cfg = experiment.load_config(args.config) if args.config else experiment.reference_config()
    cfg["seed"] = args.seed if args.seed is not None else cfg.get("seed", 0)
    return cfg


def _out(args, name):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = out / name
    if p.exists() and not args.force:
        raise experiment.ConfigError(f"{p} exists; pass --force to overwrite")
    return p


def _write_text(args, name, text):
    p = _out(args, name)
    tmp = p.with_suffix(p.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(p)
    return p


def _load_model(path):
    models, _ = adapt.load_models(path)
    if "original" not in models:
        raise CheckpointError(f"{path}: no 'original' model")
    return models["original"]


def cmd_train(args):
    cfg = _config(args)
    if args.epochs is not None:
        cfg.setdefault("train", {})["epochs"] = args.epochs
    if args.lr is not None:
        cfg.setdefault("train", {})["lr"] = args.lr
    train, _, val = experiment.load_data(cfg)
    model = experiment.train_original(cfg, train)
    p = _out(args, "original.diva")
    adapt.save_models(p, {"original": model}, {"stage": "train", "seed": cfg["seed"]})
    print(json.dumps({"checkpoint": str(p), "val_accuracy": accuracy(model, *val.xy)}))


def _adapt_cmd(args, mode):
    cfg = _config(args)
    a = cfg.setdefault("adapt", {})
    a["mode"] = mode
    for k in ("bits", "epochs", "lr", "sparsity"):
        v = getattr(args, k, None)
        if v is not None:
            a[k] = v
    train, _, val = experiment.load_data(cfg)
    pair = experiment.adapt_model(cfg, _load_model(args.model), train)
    p = _out(args, "pair.diva")
    adapt.save_pair(p, pair, {"stage": mode, "seed": cfg["seed"]})
    print(json.dumps({"checkpoint": str(p), "instability": adapt.instability(pair, val.xy)}))


def cmd_quantize(args):
    _adapt_cmd(args, "pruned+quantized" if args.sparsity is not None else "quantized")


def cmd_prune(args):
    _adapt_cmd(args, "pruned+quantized" if args.quantize else "pruned")


def cmd_distill(args):
    cfg = _config(args)
    cfg["threat"] = args.threat
    if args.epochs is not None:
        cfg.setdefault("distill", {})["epochs"] = args.epochs
    train, transfer, val = experiment.load_data(cfg)
    pair = adapt.load_pair(args.pair)
    sp = experiment.build_attack_pair(cfg, pair, train, transfer)
    p = _out(args, "surrogate.diva")
    adapt.save_pair(p, sp, {"stage": "distill", "threat": args.threat})
    print(json.dumps({"checkpoint": str(p),
                      "agreement": surrogate.agreement(sp.original, pair.adapted, val.inputs)}))


def _attack_cfg(args, cfg):
    kw = {"variant": args.variant, "seed": cfg["seed"]}
    for k in ("epsilon", "alpha", "steps", "c"):
        v = getattr(args, k, None)
        if v is not None:
            kw[k] = v
    try:
        return AttackConfig(**kw)
    except ValueError as exc:
        raise experiment.ConfigError(str(exc)) from None


def _evaluate(args):
    cfg = _config(args)
    _, _, val = experiment.load_data(cfg)
    pair = adapt.load_pair(args.pair)
    attack_pair = adapt.load_pair(args.surrogate) if args.surrogate else pair
    filt = data.filter_correct(pair, val)
    ds = filt.subset(np.arange(min(args.n, len(filt))))
    return metrics.evaluate(attack_pair, pair, ds, _attack_cfg(args, cfg), return_adversarial=True,
                            instability_data=val.xy)


def cmd_attack(args):
    report, x_adv = _evaluate(args)
    _write_text(args, f"samples_{args.variant}.csv", experiment.samples_csv(report.samples))
    img_dir = Path(args.out_dir) / "images"
    img_dir.mkdir(exist_ok=True)
    for i in range(min(args.dump_images, len(x_adv))):
        (img_dir / f"{args.variant}_{i:04d}.pgm").write_bytes(experiment.pgm_bytes(x_adv[i]))
    print(json.dumps(report.summary(), sort_keys=True))


def cmd_eval(args):
    report, _ = _evaluate(args)
    p = _write_text(args, f"report_{args.variant}.json", experiment.dump_json(report.to_dict()))
    print(json.dumps({"report": str(p), **{k: v for k, v in report.summary().items() if k.endswith("rate")}},
                     sort_keys=True))


def cmd_defend(args):
    cfg = _config(args)
    d = dict(cfg.get("defend") or {})
    d["variant"] = args.variant
    if args.epochs is not None:
        d["epochs"] = args.epochs
    if args.n_distill is not None:
        d["n_distill"] = args.n_distill
    dcfg = experiment._dataclass_from(defend.DefenseConfig, {"seed": cfg["seed"], **d}, "defend")
    train, _, val = experiment.load_data(cfg)
    pair = adapt.load_pair(args.pair)
    out = defend.defend(pair, train.xy, dcfg)
    p = _out(args, "defended.diva")
    defend.export_defended(p, out, dcfg)
    print(json.dumps({"checkpoint": str(p), "instability": adapt.instability(out, val.xy)}))


def cmd_report(args):
    text = experiment.report_table(args.run_dir)
    if args.csv:
        _write_text(args, args.csv, text)
    else:
        sys.stdout.write(text)


def cmd_run(args):
    if not args.config:
        raise experiment.ConfigError("run needs --config")
    report, run_dir, status = experiment.run_experiment(args.config, args.out_dir, args.force, args.seed)
    print(json.dumps({"run_dir": str(run_dir), "status": status}))


def build_parser():
    p = argparse.ArgumentParser(prog="divakit", description="Differential attacks on adapted models.")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--out-dir", default="runs")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs / rerun finished configs")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train the full-precision model")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.set_defaults(fn=cmd_train)

    for name, fn in (("quantize", cmd_quantize), ("prune", cmd_prune)):
        s = sub.add_parser(name, help=f"{name} a trained model into an adapted twin")
        s.add_argument("--model", required=True)
        s.add_argument("--bits", type=int)
        s.add_argument("--epochs", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--sparsity", type=float, required=name == "prune")
        if name == "prune":
            s.add_argument("--quantize", action="store_true")
        s.set_defaults(fn=fn)

    s = sub.add_parser("distill", help="reconstruct surrogate models by distillation")
    s.add_argument("--pair", required=True)
    s.add_argument("--threat", choices=("semi_blackbox", "blackbox"), default="semi_blackbox")
    s.add_argument("--epochs", type=int)
    s.set_defaults(fn=cmd_distill)

    for name, fn in (("attack", cmd_attack), ("eval", cmd_eval)):
        s = sub.add_parser(name, help="attack a pair and score it" if name == "attack" else "write a metrics report")
        s.add_argument("--pair", required=True, help="victim pair (judged)")
        s.add_argument("--surrogate", help="pair used to generate attacks (default: the victim pair)")
        s.add_argument("--variant", choices=[v for v in VARIANTS if v != "diva_targeted"], default="diva")
        s.add_argument("--n", type=int, default=200)
        s.add_argument("--epsilon", type=float)
        s.add_argument("--alpha", type=float)
        s.add_argument("--steps", type=int)
        s.add_argument("--c", type=float)
        if name == "attack":
            s.add_argument("--dump-images", type=int, default=4)
        s.set_defaults(fn=fn)

    s = sub.add_parser("defend", help="train a defended pair")
    s.add_argument("--pair", required=True)
    s.add_argument("--variant", choices=defend.DEFENSES, default="minimax_diva_qat")
    s.add_argument("--epochs", type=int)
    s.add_argument("--n-distill", type=int)
    s.set_defaults(fn=cmd_defend)

    s = sub.add_parser("report", help="plot-ready CSV from a finished run directory")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--csv", help="write to this file under --out-dir instead of stdout")
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("run", help="execute a full config pipeline")
    s.set_defaults(fn=cmd_run)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        args.fn(args)
    except (experiment.ConfigError, experiment.HashCollisionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (data.DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK
