"""``fusionlab`` command line: gen, train, eval, selftrain, ablate, gradcheck.

Exit codes: 0 success, 1 failed check, 2 usage or data error.

Settings come from an optional flat ``key = value`` file (``--config``) and
are overridden by flags. Keys are the lower_snake field names of the
architecture, training and self-training configs plus a few run-level keys;
see ``CONFIG_KEYS``.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .crossval import ablate_image_noise, check_combo, evaluate_cv, make_fitter
from .dataio import SynthConfig, atomic_write, generate_synthetic, load_corpus, save_corpus, split_labeled
from .exceptions import FusionLabError, LeakageError
from .fusion import ArchConfig, gradient_check, init_model, save_model
from .numcore import SeededRng
from .selftrain import SelfTrainConfig, export_decisions
from .train import TrainConfig, fit

log = logging.getLogger("fusionlab")

GRAD_TOL = 1e-4

ARCH_KEYS = ("d", "n_layers", "n_heads", "ff_mult", "dropout")
TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig) if f.name != "seed")
SELF_KEYS = ("strategy", "tau", "rounds", "sample_fraction", "teacher", "n_trees", "max_depth")
RUN_KEYS = ("data", "unlabeled", "out_dir", "out", "seed", "preset", "model", "setting", "k", "standardize")
CONFIG_KEYS = ARCH_KEYS + TRAIN_KEYS + SELF_KEYS + RUN_KEYS

DEFAULTS = {"seed": 0, "preset": "desk", "model": "svm", "setting": "multimodal", "k": 5, "standardize": True}


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


def _coerce(text: str):
    low = text.strip().lower()
    if low in ("none", "null", ""):
        return None
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text.strip()


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {path}") from None
    for no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{no}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{no}: unknown key {key!r}")
        out[key] = _coerce(value)
    return out


def effective_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(read_config(args.config))
    for key, value in vars(args).items():
        if key in CONFIG_KEYS and value is not None:
            cfg[key] = value
    return cfg


def _pick(cfg: dict, keys) -> dict:
    return {k: cfg[k] for k in keys if k in cfg and cfg[k] is not None}


def arch_config(cfg: dict, d_T: int, d_I: int) -> ArchConfig:
    if cfg.get("preset") == "desk":
        return ArchConfig.desk(d_T, d_I, **_pick(cfg, ARCH_KEYS))
    if cfg.get("preset") == "full":
        return ArchConfig(d_T=d_T, d_I=d_I, **_pick(cfg, ARCH_KEYS))
    raise UsageError(f"preset must be desk or full, got {cfg.get('preset')!r}")


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**_pick(cfg, TRAIN_KEYS), seed=int(cfg["seed"]))


def selftrain_config(cfg: dict, seed: int) -> SelfTrainConfig:
    return SelfTrainConfig(**_pick(cfg, SELF_KEYS), seed=seed)


def streams(seed: int) -> dict:
    root = SeededRng(seed)
    return {name: root.spawn(name) for name in ("data", "init", "batching", "selftrain")}


def fitter_params(cfg: dict, model: str) -> dict:
    if model == "fusion":
        arch = arch_config(cfg, 1, 1)
        params = {"d": arch.d, "n_layers": arch.n_layers, "n_heads": arch.n_heads, "ff_mult": arch.ff_mult, "dropout": arch.dropout}
        tc = train_config(cfg)
        for k in ("optimizer", "lr", "weight_decay", "batch_size", "max_epochs", "patience", "schedule",
                  "step_gamma", "step_every", "lam", "oversample", "aug_sigma", "aug_mask"):
            params[k] = getattr(tc, k)
        return params
    if model in ("forest", "stacking"):
        return {"n_estimators": cfg.get("n_trees") or 300, "max_depth": cfg.get("max_depth") or 15}
    return {}


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path, obj):
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_manifest(out_dir: Path, command: str, cfg: dict, artifacts: list):
    # output locations are left out so identical runs in different directories match
    cfg = {k: v for k, v in cfg.items() if k not in ("out", "out_dir")}
    write_json(
        out_dir / "manifest.json",
        {
            "command": command,
            "config": {k: cfg[k] for k in sorted(cfg)},
            "artifacts": {Path(a).name: _sha256(a) for a in artifacts},
        },
    )


def _out_dir(cfg: dict) -> Path:
    if not cfg.get("out_dir"):
        raise UsageError("--out-dir is required")
    path = Path(cfg["out_dir"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require(cfg: dict, key: str, flag: str):
    if not cfg.get(key):
        raise UsageError(f"{flag} is required")
    return cfg[key]


# commands -------------------------------------------------------------------------


def cmd_gen(args) -> int:
    for name in ("sep", "sigma"):
        if getattr(args, name) <= 0:
            raise UsageError(f"--{name} must be > 0")
    s = streams(args.seed)
    cfg = SynthConfig(
        n_per_class=args.n_per_class, d_T=args.dt, d_I=args.di, separation=args.sep,
        sigma=args.sigma, labeled_fraction=args.labeled_frac, seed=s["data"].seed,
    )
    save_corpus(generate_synthetic(cfg), args.out)
    print(f"wrote {3 * args.n_per_class} records to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = effective_config(args)
    corpus = load_corpus(_require(cfg, "data", "--data"))
    corpus.require_images()
    labeled, _ = split_labeled(corpus)
    s = streams(int(cfg["seed"]))
    arch = arch_config(cfg, corpus.d_T, corpus.d_I)
    tcfg = train_config(cfg)
    out = _out_dir(cfg)
    model = init_model(arch, s["init"])
    report = fit(model, labeled, None, tcfg, s["batching"])
    save_model(model, out / "model.bin")
    write_json(out / "fit_report.json", report.to_dict())
    cfg_out = dict(cfg, arch=dataclasses.asdict(arch), train=dataclasses.asdict(tcfg))
    write_manifest(out, "train", cfg_out, [out / "model.bin", out / "fit_report.json"])
    print(f"trained {arch.d}-wide model on {len(labeled)} records; best epoch {report.best_epoch}")
    return 0


def _labeled_corpus(cfg):
    corpus = load_corpus(_require(cfg, "data", "--data"))
    labeled, unlabeled = split_labeled(corpus)
    return corpus, labeled, unlabeled


def _report_path(cfg, default_name):
    if cfg.get("out"):
        return Path(cfg["out"])
    return _out_dir(cfg) / default_name


def cmd_eval(args) -> int:
    cfg = effective_config(args)
    check_combo(cfg["model"], cfg["setting"])
    _, labeled, _ = _labeled_corpus(cfg)
    if cfg["setting"] != "text":
        labeled.require_images()
    fit_fn = make_fitter(cfg["model"], cfg["setting"], fitter_params(cfg, cfg["model"]), bool(cfg["standardize"]))
    report = evaluate_cv(fit_fn, labeled, int(cfg["k"]), int(cfg["seed"]))
    report.extra["config"] = {k: cfg[k] for k in sorted(cfg) if k not in ("out", "out_dir")}
    path = _report_path(cfg, "metrics.json")
    atomic_write(path, report.to_json())
    print(f"{cfg['model']}/{cfg['setting']}: accuracy {report.accuracy:.4f} -> {path}")
    return 0


def cmd_selftrain(args) -> int:
    cfg = effective_config(args)
    check_combo(cfg["model"], cfg["setting"])
    corpus, labeled, pool = _labeled_corpus(cfg)
    if cfg.get("unlabeled"):
        extra = load_corpus(cfg["unlabeled"])
        overlap = set(extra.ids) & set(corpus.ids)
        if overlap:
            raise LeakageError(f"unlabeled pool overlaps labeled data, e.g. id {sorted(overlap)[0]!r}")
        pool = pool.concat(split_labeled(extra)[1]) if len(pool) else split_labeled(extra)[1]
    labeled.require_images()
    s = streams(int(cfg["seed"]))
    st = selftrain_config(cfg, s["selftrain"].seed)
    fit_fn = make_fitter(cfg["model"], cfg["setting"], fitter_params(cfg, cfg["model"]), bool(cfg["standardize"]))
    report = evaluate_cv(fit_fn, labeled, int(cfg["k"]), int(cfg["seed"]), selftrain=st, unlabeled=pool)
    report.setting = f"{cfg['setting']}+selftrain"
    report.extra["config"] = {k: cfg[k] for k in sorted(cfg) if k not in ("out", "out_dir")}
    out = _out_dir(cfg)
    atomic_write(out / "metrics.json", report.to_json())
    rounds = report.extra["selftrain"]["round_logs"]
    lines = [json.dumps(dict(log, fold=f), sort_keys=True) for f, logs in enumerate(rounds) for log in logs]
    atomic_write(out / "rounds.jsonl", "".join(line + "\n" for line in lines))
    write_manifest(out, "selftrain", cfg, [out / "metrics.json", out / "rounds.jsonl"])
    print(f"self-trained {cfg['model']}/{cfg['setting']}: accuracy {report.accuracy:.4f} -> {out / 'metrics.json'}")
    return 0


def cmd_ablate(args) -> int:
    cfg = effective_config(args)
    check_combo(cfg["model"], cfg["setting"])
    _, labeled, _ = _labeled_corpus(cfg)
    labeled.require_images()
    s = streams(int(cfg["seed"]))
    fit_fn = make_fitter(cfg["model"], cfg["setting"], fitter_params(cfg, cfg["model"]), bool(cfg["standardize"]))
    report = ablate_image_noise(labeled, fit_fn, int(cfg["k"]), int(cfg["seed"]), s["data"])
    report.extra["config"] = {k: cfg[k] for k in sorted(cfg) if k not in ("out", "out_dir")}
    path = _report_path(cfg, "metrics.json")
    atomic_write(path, report.to_json())
    print(f"{cfg['model']}/{report.setting}: accuracy {report.accuracy:.4f} -> {path}")
    return 0


def cmd_gradcheck(args) -> int:
    arch = ArchConfig.desk(args.dt, args.di)
    started = time.perf_counter()
    errors = gradient_check(arch, batch_size=args.batch_size, seed=args.seed, frozen_bn=args.bn == "frozen", perturb=args.perturb)
    elapsed = time.perf_counter() - started
    groups = {}
    for name, err in errors.items():
        group = name.rsplit(".", 1)[0]
        groups[group] = max(groups.get(group, 0.0), err)
    width = max(len(n) for n in errors)
    for name, err in errors.items():
        print(f"{name:<{width}}  {err:.3e}  {'ok' if err < GRAD_TOL else 'FAIL'}")
    worst = max(errors.values())
    print(f"max relative error {worst:.3e} over {len(errors)} tensors in {elapsed:.1f}s")
    if args.report:
        write_json(args.report, {"tolerance": GRAD_TOL, "max_error": worst, "per_tensor": errors, "per_group": groups})
    if worst >= GRAD_TOL:
        raise CheckFailed(f"gradient check failed: {worst:.3e} >= {GRAD_TOL}")
    return 0


# parser ---------------------------------------------------------------------------


def _run_flags(p, model_default=None):
    p.add_argument("--data", help="corpus CSV")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--preset", choices=("desk", "full"))
    p.add_argument("--no-standardize", dest="standardize", action="store_const", const=False)
    for key in ARCH_KEYS + ("optimizer", "lr", "weight_decay", "batch_size", "max_epochs", "patience", "lam"):
        kind = {"optimizer": str, "dropout": float, "lr": float, "weight_decay": float, "lam": float}.get(key, int)
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=kind)


def _eval_flags(p):
    p.add_argument("--model", choices=("svm", "logreg", "forest", "stacking", "fusion"))
    p.add_argument("--setting", choices=("text", "image", "fusion", "multimodal"))
    p.add_argument("--k", type=int)
    p.add_argument("--n-trees", dest="n_trees", type=int)
    p.add_argument("--max-depth", dest="max_depth", type=int)
    p.add_argument("--out", help="metrics JSON path (default <out-dir>/metrics.json)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusionlab", description="multimodal fusion classification lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic corpus")
    g.add_argument("--n-per-class", dest="n_per_class", type=int, default=200)
    g.add_argument("--dt", type=int, default=8)
    g.add_argument("--di", type=int, default=8)
    g.add_argument("--sep", type=float, default=4.0)
    g.add_argument("--sigma", type=float, default=1.0)
    g.add_argument("--labeled-frac", dest="labeled_frac", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the fusion model")
    _run_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="cross-validated metrics")
    _run_flags(e)
    _eval_flags(e)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("selftrain", help="cross-validated metrics with in-fold self-training")
    _run_flags(s)
    _eval_flags(s)
    s.add_argument("--unlabeled", help="extra unlabeled corpus CSV")
    s.add_argument("--strategy", choices=("ensemble_consistency", "stacking_teacher"))
    s.add_argument("--teacher", choices=("stacking", "fusion"))
    s.add_argument("--tau", type=float)
    s.add_argument("--rounds", type=int)
    s.add_argument("--sample-frac", dest="sample_fraction", type=float)
    s.set_defaults(func=cmd_selftrain)

    a = sub.add_parser("ablate", help="cross-validated metrics with image vectors replaced by noise")
    _run_flags(a)
    _eval_flags(a)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--dt", type=int, default=8)
    c.add_argument("--di", type=int, default=8)
    c.add_argument("--batch-size", dest="batch_size", type=int, default=4)
    c.add_argument("--bn", choices=("frozen", "batch"), default="frozen")
    c.add_argument("--report", help="optional JSON report path")
    c.add_argument("--perturb", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CheckFailed as exc:
        print(f"fusionlab: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        path = exc.filename or str(exc)
        print(f"fusionlab: file not found: {path}", file=sys.stderr)
        return 2
    except (UsageError, FusionLabError, ValueError, LeakageError) as exc:
        print(f"fusionlab: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
