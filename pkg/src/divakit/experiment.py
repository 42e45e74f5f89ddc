"""Config-driven experiment pipelines and their on-disk artifacts.

A config is a JSON object. Stages run in a fixed order
(train, adapt, distill, defend, eval, sweep_c); the ``stages`` list says
which of them are executed. Everything lands in ``<out_dir>/<config hash>/``:
``config.json``, ``report.json`` (deterministic), ``samples_<attack>.csv``,
``sweep_c.csv``, model checkpoints and ``images/*.pgm``. Wall-clock timings go
to ``timings.json``, outside the deterministic report.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import os
import shutil
import tempfile
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import adapt, data, defend, diva, metrics, nn, surrogate
from .attack import AttackConfig

STAGE_ORDER = ("train", "adapt", "distill", "defend", "eval", "sweep_c")
THREATS = ("whitebox", "semi_blackbox", "blackbox")


class ConfigError(ValueError):
    pass


class HashCollisionError(RuntimeError):
    pass


def reference_config(seed=0):
    """The desk-scale reference setup used by the acceptance checks and demos."""
    return {
        "seed": seed,
        "data": {"source": "synth", "n_train": 3000, "n_transfer": 600, "n_val": 1500, "classes": 10,
                 "noise": 0.08, "contrast": [0.06, 0.12], "jitter_deg": 4.0},
        "model": {"arch": "lenet", "channels": [8, 16], "hidden": 64},
        "train": {"epochs": 6, "lr": 0.01, "batch_size": 32, "momentum": 0.9},
        "adapt": {"mode": "quantized", "bits": 8, "epochs": 2, "lr": 0.02, "label_smoothing": 0.1},
        "threat": "whitebox",
        "attacks": {"pgd": {"variant": "pgd"}, "diva": {"variant": "diva"}},
        "eval": {"n_samples": 200, "batch_size": 50, "dssim_threshold": 0.01, "dump_images": 4},
        "sweep_c": {"c_values": [0, 0.001, 0.1, 1, 5, 10]},
        "stages": ["train", "adapt", "eval"],
    }


# ------------------------------------------------------------------ config


def load_config(path):
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    cfg.setdefault("base_dir", str(path.parent.resolve()))
    return cfg


def canonical(cfg) -> str:
    c = {k: v for k, v in cfg.items() if k != "base_dir"}
    return json.dumps(c, sort_keys=True, indent=2) + "\n"


def run_hash(cfg) -> str:
    return metrics.config_hash(json.loads(canonical(cfg)))


def _dataclass_from(cls, d, where):
    d = dict(d or {})
    if cls is AttackConfig:
        d = {"variant": "pgd", **d}
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    if cls is defend.DefenseConfig and "inner" in d:
        d["inner"] = _dataclass_from(AttackConfig, d["inner"], f"{where}.inner")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def attack_configs(cfg):
    attacks = cfg.get("attacks") or {}
    seed = int(cfg.get("seed", 0))
    return {name: _dataclass_from(AttackConfig, {"seed": seed, **a}, f"attacks.{name}") for name, a in attacks.items()}


def validate(cfg):
    stages = cfg.get("stages")
    if not isinstance(stages, list) or not stages:
        raise ConfigError("config needs a non-empty 'stages' list")
    for s in stages:
        if s not in STAGE_ORDER:
            raise ConfigError(f"unknown stage {s!r}; expected one of {list(STAGE_ORDER)}")
    threat = cfg.get("threat", "whitebox")
    if threat not in THREATS:
        raise ConfigError(f"unknown threat model {threat!r}")
    if "adapt" in stages and "train" not in stages and "model" not in cfg.get("checkpoints", {}):
        raise ConfigError("stage 'adapt' needs stage 'train' or checkpoints.model")
    needs_pair = any(s in stages for s in ("distill", "defend", "eval", "sweep_c"))
    if needs_pair and "adapt" not in stages and "pair" not in cfg.get("checkpoints", {}):
        raise ConfigError("evaluation stages need stage 'adapt' or checkpoints.pair")
    if threat != "whitebox" and any(s in stages for s in ("eval", "sweep_c")) \
            and "distill" not in stages and "surrogate" not in cfg.get("checkpoints", {}):
        raise ConfigError(f"threat {threat!r} needs stage 'distill' or checkpoints.surrogate")
    attack_configs(cfg)
    if "defend" in stages:
        _dataclass_from(defend.DefenseConfig, cfg.get("defend"), "defend")
    if "distill" in stages:
        _distill_config(cfg)


def _distill_config(cfg):
    d = dict(cfg.get("distill") or {})
    d.pop("qat", None)
    return _dataclass_from(surrogate.DistillConfig, {"seed": int(cfg.get("seed", 0)), **d}, "distill")


# -------------------------------------------------------------------- data


def _resolve(cfg, p):
    p = Path(p)
    return p if p.is_absolute() else Path(cfg.get("base_dir", ".")) / p


def load_data(cfg):
    """Return ``(train, transfer, validation)`` datasets for a config."""
    d = dict(cfg.get("data") or {"source": "synth"})
    seed = int(cfg.get("seed", 0))
    source = d.pop("source", "synth")
    if source == "synth":
        kw = {k: d[k] for k in ("noise", "jitter_deg") if k in d}
        if "contrast" in d:
            kw["contrast"] = tuple(d["contrast"])
        return data.synth_splits(seed, int(d.get("n_train", 3000)), int(d.get("n_transfer", 600)),
                                 int(d.get("n_val", 1500)), int(d.get("classes", 10)), **kw)
    if source == "idx":
        out = []
        for split in ("train", "transfer", "validation"):
            if split not in d:
                raise ConfigError(f"data.{split} must list [images, labels] IDX paths")
            img, lab = d[split]
            out.append(data.load_idx(_resolve(cfg, img), _resolve(cfg, lab), split, f"idx-{split}"))
        data.check_disjoint(*out)
        return tuple(out)
    raise ConfigError(f"unknown data source {source!r}")


def build_model(cfg, input_shape, num_classes):
    m = dict(cfg.get("model") or {})
    arch = m.get("arch", "lenet")
    seed = int(cfg.get("seed", 0))
    if arch == "lenet":
        return nn.lenet(tuple(input_shape), num_classes, tuple(m.get("channels", (8, 16))), m.get("hidden", 64), seed)
    raise ConfigError(f"unknown architecture {arch!r}")


def train_original(cfg, train):
    t = dict(cfg.get("train") or {})
    model = build_model(cfg, train.inputs.shape[1:], int(train.labels.max()) + 1)
    return nn.sgd_train(model, train.xy, t.get("lr", 0.01), t.get("epochs", 6), t.get("batch_size", 32),
                        t.get("momentum", 0.9), t.get("weight_decay", 0.0), t.get("label_smoothing", 0.0),
                        seed=int(cfg.get("seed", 0)))


def adapt_model(cfg, model, train):
    a = dict(cfg.get("adapt") or {})
    seed = int(cfg.get("seed", 0))
    mode = a.get("mode", "quantized")
    kw = dict(lr=a.get("lr", 0.02), epochs=a.get("epochs", 2), bits=a.get("bits", 8), seed=seed,
              label_smoothing=a.get("label_smoothing", 0.1))
    if mode == "quantized":
        return adapt.ModelPair(model, adapt.qat_train(model, train.xy, **kw))
    if mode == "pruned":
        pruned = adapt.prune_magnitude(model, a.get("sparsity", 0.5), train.xy, a.get("finetune_epochs", 1),
                                       lr=a.get("lr", 0.01), seed=seed)
        return adapt.ModelPair(model, pruned)
    if mode == "pruned+quantized":
        masks = adapt.magnitude_masks(model, a.get("sparsity", 0.5))
        return adapt.ModelPair(model, adapt.qat_train(model, train.xy, masks=masks, **kw))
    raise ConfigError(f"unknown adaptation mode {mode!r}")


def build_attack_pair(cfg, pair, train, transfer):
    threat = cfg.get("threat", "whitebox")
    if threat == "whitebox":
        return pair
    dc = _distill_config(cfg)
    if threat == "semi_blackbox":
        return surrogate.build_semi_blackbox(pair.adapted, dc, transfer, victim_train=train)
    q = dict((cfg.get("distill") or {}).get("qat") or {})
    a = dict(cfg.get("adapt") or {})
    return surrogate.build_blackbox(surrogate.query_access(pair.adapted), pair.adapted.architecture(), dc, transfer,
                                    victim_train=train, qat_epochs=q.get("epochs", a.get("epochs", 2)),
                                    qat_lr=q.get("lr", a.get("lr", 0.02)), bits=a.get("bits", 8),
                                    qat_label_smoothing=q.get("label_smoothing", a.get("label_smoothing", 0.1)))


# ----------------------------------------------------------------- outputs


def pgm_bytes(image) -> bytes:
    """Binary 8-bit PGM of a single-channel image in [0, 1]."""
    img = np.asarray(image)
    if img.ndim == 3:
        if img.shape[-1] != 1:
            raise ValueError("PGM export needs single-channel images")
        img = img[..., 0]
    u8 = np.floor(np.clip(img.astype(np.float64), 0, 1) * 255 + 0.5).astype(np.uint8)
    h, w = u8.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + u8.tobytes()


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def samples_csv(samples) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=metrics.SAMPLE_FIELDS, lineterminator="\n")
    w.writeheader()
    for s in samples:
        w.writerow({k: (int(v) if isinstance(v, bool) else repr(v) if isinstance(v, float) else v)
                    for k, v in s.items()})
    return buf.getvalue()


def rows_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


class RunWriter:
    """Single writer for a run: stages files in a scratch dir, publishes atomically."""

    def __init__(self, out_dir, name):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.final = self.out_dir / name
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{name}.", dir=self.out_dir))

    def path(self, rel):
        p = self.tmp / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def text(self, rel, s):
        self.path(rel).write_text(s)

    def bytes(self, rel, b):
        self.path(rel).write_bytes(b)

    def publish(self):
        if self.final.exists():
            shutil.rmtree(self.final)
        os.replace(self.tmp, self.final)
        return self.final

    def abort(self):
        shutil.rmtree(self.tmp, ignore_errors=True)


# ------------------------------------------------------------------ runner


def run_experiment(config, out_dir="runs", force=False, seed=None):
    """Execute a config (path or dict); return ``(report dict, run dir, status)``.

    ``status`` is ``"ran"`` or ``"skipped"`` (identical config already complete).
    """
    cfg = load_config(config) if isinstance(config, (str, os.PathLike)) else copy.deepcopy(config)
    if seed is not None:
        cfg["seed"] = int(seed)
    cfg.setdefault("seed", 0)
    validate(cfg)
    h = run_hash(cfg)
    run_dir = Path(out_dir) / h
    cfg_text = canonical(cfg)
    if run_dir.exists():
        stored = (run_dir / "config.json").read_text() if (run_dir / "config.json").exists() else None
        if stored is not None and stored != cfg_text:
            raise HashCollisionError(f"{run_dir} holds a different config with the same hash")
        if not force and (run_dir / "report.json").exists():
            return json.loads((run_dir / "report.json").read_text()), run_dir, "skipped"
    writer = RunWriter(out_dir, h)
    try:
        report = _execute(cfg, h, writer)
        writer.text("config.json", cfg_text)
        writer.text("report.json", dump_json(report))
        writer.publish()
    except BaseException:
        writer.abort()
        raise
    return report, run_dir, "ran"


def _execute(cfg, h, w: RunWriter):
    stages = [s for s in STAGE_ORDER if s in cfg["stages"]]
    seed = int(cfg["seed"])
    ckpt = {k: _resolve(cfg, v) for k, v in (cfg.get("checkpoints") or {}).items()}
    timings = {}
    report = {"config_hash": h, "seed": seed, "stages": stages}

    # load referenced artifacts first so a bad checkpoint fails before any work
    pair = adapt.load_pair(ckpt["pair"]) if "pair" in ckpt else None
    model = adapt.load_models(ckpt["model"])[0]["original"] if "model" in ckpt else None
    attack_pair = adapt.load_pair(ckpt["surrogate"]) if "surrogate" in ckpt else None
    train, transfer, val = load_data(cfg)
    report["data"] = {"n_train": len(train), "n_transfer": len(transfer), "n_val": len(val)}

    def timed(name, fn, *a):
        t = time.perf_counter()
        out = fn(*a)
        timings[name] = time.perf_counter() - t
        return out

    if "train" in stages:
        model = timed("train", train_original, cfg, train)
        adapt.save_models(w.path("original.diva"), {"original": model}, {"stage": "train", "config_hash": h})
    if "adapt" in stages:
        pair = timed("adapt", adapt_model, cfg, model, train)
        adapt.save_pair(w.path("pair.diva"), pair, {"stage": "adapt", "config_hash": h})
    if pair is not None:
        report["accuracy"] = {"original": nn.accuracy(pair.original, *val.xy),
                              "adapted": nn.accuracy(pair.adapted, *val.xy)}
        report["instability"] = adapt.instability(pair, val.xy)
    if "distill" in stages:
        attack_pair = timed("distill", build_attack_pair, cfg, pair, train, transfer)
        adapt.save_pair(w.path("surrogate.diva"), attack_pair, {"stage": "distill", "threat": cfg.get("threat")})
        report["surrogate_agreement"] = {
            "original": surrogate.agreement(attack_pair.original, pair.adapted, val.inputs),
            "adapted": surrogate.agreement(attack_pair.adapted, pair.adapted, val.inputs)}
    if "defend" in stages:
        dcfg = _dataclass_from(defend.DefenseConfig, cfg.get("defend"), "defend")
        undefended = pair
        pair = timed("defend", defend.defend, pair, train.xy, dcfg)
        defend.export_defended(w.path("defended.diva"), pair, dcfg)
        report["defense"] = {"variant": dcfg.variant, "config_hash": metrics.config_hash(dcfg.to_dict()),
                             "original_unchanged": defend.params_checksum(pair.original)
                             == defend.params_checksum(undefended.original),
                             "accuracy_adapted": nn.accuracy(pair.adapted, *val.xy),
                             "instability": adapt.instability(pair, val.xy)}
    if attack_pair is None or cfg.get("threat", "whitebox") == "whitebox":
        attack_pair = pair

    if "eval" in stages or "sweep_c" in stages:
        ev = dict(cfg.get("eval") or {})
        filt = data.filter_correct(pair, val)
        n = int(ev.get("n_samples", 200))
        eval_set = filt.subset(np.arange(min(n, len(filt))))
        report["eval_set"] = {"retention": filt.provenance["retention"], "n_samples": len(eval_set)}
    if "eval" in stages:
        report["attacks"] = {}
        for name, acfg in attack_configs(cfg).items():
            r, x_adv = timed(f"eval:{name}", lambda: metrics.evaluate(
                attack_pair, pair, eval_set, acfg, batch_size=int(ev.get("batch_size", 50)),
                dssim_threshold=float(ev.get("dssim_threshold", 0.01)), instability_data=val.xy,
                return_adversarial=True))
            report["attacks"][name] = r.summary()
            w.text(f"samples_{name}.csv", samples_csv(r.samples))
            for i in range(min(int(ev.get("dump_images", 4)), len(x_adv))):
                w.bytes(f"images/{name}_{i:04d}.pgm", pgm_bytes(x_adv[i]))
    if "sweep_c" in stages:
        s = dict(cfg.get("sweep_c") or {})
        base = _dataclass_from(AttackConfig, {"seed": seed, **{k: v for k, v in s.items() if k != "c_values"},
                                              "variant": "diva"}, "sweep_c")
        rows = timed("sweep_c", diva.sweep_c, pair, eval_set.inputs, eval_set.labels, base,
                     s.get("c_values", [0, 0.001, 0.1, 1, 5, 10]))
        report["sweep_c"] = rows
        w.text("sweep_c.csv", rows_csv(rows, ["c", "evasive_rate", "attack_rate", "n"]))
    w.text("timings.json", dump_json(timings))
    return report


def report_table(run_dir) -> str:
    """Plot-ready CSV (one row per attack) from a finished run."""
    report = json.loads((Path(run_dir) / "report.json").read_text())
    cols = ["attack", "n_samples", "top1_evasive_rate", "top5_evasive_rate", "top5_orig_only_rate",
            "attack_only_rate", "confidence_delta_mean", "instability", "dssim_max", "dssim_mean", "n_rejected"]
    rows = [{"attack": name, **{c: r[c] for c in cols[1:]}} for name, r in sorted(report.get("attacks", {}).items())]
    return rows_csv(rows, cols)
