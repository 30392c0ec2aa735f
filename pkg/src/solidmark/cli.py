"""``solidmark`` command line.

Every command writes its resolved configuration (``config.json``) next to
its outputs.  Data files carry no timestamps; those go to ``run.log``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import diffusion as dif
from . import experiments as exp
from . import imgdata as img
from .errors import ConfigurationError, SolidMarkError
from .memorization import EvalConfig, evaluate_model, fp_rate
from .outpaint import IdentityAutoencoder, OutpaintConfig

log = logging.getLogger("solidmark")

EXPERIMENTS = ("duplication", "augmentation", "mitigation", "ablation", "pathology", "monobias", "calibrate")


# --------------------------------------------------------------------------
# config resolution


def _load_config(path) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc


def _resolve(args, defaults: dict, keys) -> dict:
    """File config overridden by explicitly given CLI flags."""
    cfg = dict(defaults)
    cfg.update(_load_config(getattr(args, "config", None)))
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _prepare_out(out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    return out


def _dump_config(out: Path, command: str, cfg: dict) -> None:
    doc = {"command": command, "version": __version__, "config": cfg}
    (out / "config.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _set_workers(workers):
    import torch

    n = workers if workers else (os.cpu_count() or 1)
    torch.set_num_threads(max(1, int(n)))


def _pattern(cfg: dict) -> img.PatternSpec:
    return img.PatternSpec(cfg.get("placement", "border"), int(cfg.get("thickness", 4)),
                           cfg.get("color_mode", "grayscale"))


def _eval_config(cfg: dict, pattern: img.PatternSpec) -> EvalConfig:
    oc = OutpaintConfig(remask_period=int(cfg.get("remask_period", 10)), steps=cfg.get("steps", 50),
                        seed=int(cfg.get("seed", 0)),
                        literal_known_noise=bool(cfg.get("literal_known_noise", False)))
    return EvalConfig(thresholds=tuple(cfg.get("delta") or (0.1, 0.05, 0.005)),
                      subset_size=cfg.get("subset_size"), repeats=int(cfg.get("repeats", 1)),
                      seed=int(cfg.get("seed", 0)), pattern=pattern, variant=cfg.get("variant", "pixel"),
                      outpaint=oc)


def _train_config(cfg: dict) -> dif.TrainConfig:
    fields = {f.name for f in dataclasses.fields(dif.TrainConfig)}
    return dif.TrainConfig(**{k: v for k, v in cfg.items() if k in fields})


# --------------------------------------------------------------------------
# dataset


def cmd_dataset(args) -> int:
    out = _prepare_out(args.out)
    if args.action == "generate":
        cfg = _resolve(args, {"count": 300, "base_size": 32, "num_classes": 3, "seed": 0, "key_seed": None,
                              "color_mode": "grayscale"},
                       ["count", "base_size", "num_classes", "seed", "key_seed", "color_mode"])
        ds = img.gen_synthetic_dataset(int(cfg["count"]), int(cfg["base_size"]), int(cfg["num_classes"]),
                                       int(cfg["seed"]))
        key_seed = cfg["key_seed"] if cfg["key_seed"] is not None else int(cfg["seed"]) + 1
        ds = ds.replace(keymap=img.assign_keys(ds, int(key_seed), cfg["color_mode"]))
    elif args.action == "augment":
        cfg = _resolve(args, {"placement": "border", "thickness": 4, "color_mode": None},
                       ["input", "placement", "thickness", "color_mode"])
        ds = img.load_dataset(cfg["input"], require_keymap=True)
        cfg["color_mode"] = cfg["color_mode"] or ds.keymap.color_mode
        ds = img.augment_dataset(ds, _pattern(cfg))
    else:
        cfg = _resolve(args, {"count": 2, "shared_keys": False, "key_seed": None},
                       ["input", "ids", "first", "count", "shared_keys", "key_seed"])
        ds = img.load_dataset(cfg["input"])
        if ds.pattern is not None:
            raise ConfigurationError("duplicate before augmenting: the input already carries patterns")
        ids = cfg.get("ids") or ds.ids()[:int(cfg.get("first") or 0)]
        if not ids:
            raise ConfigurationError("duplicate needs --ids or --first")
        cfg["ids"] = list(ids)
        ds = img.inject_duplicates(ds, ids, int(cfg["count"]), independent_keys=not cfg["shared_keys"],
                                   key_seed=cfg["key_seed"])
    img.save_dataset(ds, out)
    _dump_config(out, f"dataset {args.action}", cfg)
    log.info("wrote %d items to %s", len(ds), out)
    print(f"wrote {len(ds)} items to {out}")
    return 0


# --------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    out = _prepare_out(args.out)
    _set_workers(args.workers)
    cfg = _resolve(args, {"placement": "border", "thickness": 4, "color_mode": "grayscale"},
                   ["data", "epochs", "batch_size", "lr", "seed", "channels", "T", "unconditional",
                    "placement", "thickness", "resume"])
    if cfg.get("unconditional"):
        cfg["conditional"] = False
    ds = img.load_dataset(cfg["data"], require_keymap=True)
    state = dif.load_checkpoint(cfg["resume"]) if cfg.get("resume") else None
    if ds.pattern is None and state is not None and "pattern" in state.extra and args.thickness is None:
        # a resumed run keeps the pattern it was trained with
        spec = img.PatternSpec(**state.extra["pattern"])
    else:
        spec = ds.pattern or _pattern(cfg)
    if ds.pattern is None and ds.keymap.color_mode != spec.color_mode:
        spec = dataclasses.replace(spec, color_mode=ds.keymap.color_mode)
    x = img.training_images(ds, spec)
    ckpt = out / "checkpoint.pt"
    if state is not None:
        if tuple(state.image_shape) != tuple(x.shape[1:]):
            raise ConfigurationError(f"checkpoint dims {state.image_shape} differ from data dims {x.shape[1:]}")
        target = int(cfg.get("epochs") or state.config.epochs)
        state.config = dataclasses.replace(state.config, epochs=target)
    else:
        tc = _train_config(cfg)
        state = dif.new_state(tc, x.shape[1:])
        target = tc.epochs
    state.extra["pattern"] = spec.to_json()
    dif.train(state, x, [it.caption for it in ds.items], epochs=target, log=log.info)
    digest = dif.save_checkpoint(state, ckpt)
    (out / "train_report.json").write_text(dif.run_report(state))
    _dump_config(out, "train", {**cfg, "resolved_train": state.config.to_json()})
    print(f"checkpoint {ckpt} sha256 {digest}")
    return 0


# --------------------------------------------------------------------------
# evaluate


def _write_report(out: Path, report, prefix: str = "") -> None:
    (out / f"{prefix}rows.csv").write_text(report.to_csv(), newline="")
    (out / f"{prefix}summary.json").write_text(report.summary_text())


def cmd_evaluate(args) -> int:
    out = _prepare_out(args.out)
    _set_workers(args.workers)
    cfg = _resolve(args, {"seed": 0, "repeats": 1, "steps": 50, "remask_period": 10, "variant": "pixel"},
                   ["data", "checkpoint", "seed", "delta", "repeats", "subset_size", "variant",
                    "remask_period", "steps"])
    ds = img.load_dataset(cfg["data"], require_keymap=True)
    state = dif.load_checkpoint(cfg["checkpoint"])
    spec = ds.pattern or img.PatternSpec(**state.extra.get("pattern", img.PatternSpec().to_json()))
    ec = _eval_config(cfg, spec)
    if ec.subset_size is not None and ec.subset_size > len(ds):
        raise ConfigurationError(f"subset size {ec.subset_size} exceeds dataset size {len(ds)}")
    ae = IdentityAutoencoder(state.image_shape) if ec.variant == "latent" else None
    report = evaluate_model(state.denoiser(), state.schedule, ds, ec, autoencoder=ae)
    _write_report(out, report)
    _dump_config(out, "evaluate", {**cfg, "resolved_eval": ec.to_json()})
    print(report.table())
    return 0


# --------------------------------------------------------------------------
# experiments


def _model_for(cfg: dict):
    """(denoiser, schedule, dataset) from a checkpoint + dataset, or trained from config."""
    if cfg.get("checkpoint") and cfg.get("data"):
        state = dif.load_checkpoint(cfg["checkpoint"])
        ds = img.load_dataset(cfg["data"], require_keymap=True)
        spec = ds.pattern or img.PatternSpec(**state.extra.get("pattern", img.PatternSpec().to_json()))
        return state.denoiser(), state.schedule, ds, spec
    base = cfg.get("base", {})
    ds = img.gen_synthetic_dataset(int(base.get("count", 300)), int(base.get("base_size", 32)),
                                   int(base.get("num_classes", 3)), int(base.get("seed", 0)))
    ds = ds.replace(keymap=img.assign_keys(ds, int(base.get("key_seed", 1))))
    spec = _pattern(cfg.get("eval", {}))
    model, sched = exp.diffusion_trainer(_train_config(cfg.get("train", {})), log=log.info)(ds, spec)
    return model, sched, ds, spec


def _write_run(out: Path, run) -> None:
    (out / "arms.csv").write_text(run.to_csv(), newline="")
    (out / "summary.json").write_text(run.summary_text())
    for name, rep in run.reports.items():
        safe = name.replace(":", "_").replace("=", "_").replace("/", "_")
        arm_dir = out / "arms" / safe
        arm_dir.mkdir(parents=True, exist_ok=True)
        _write_report(arm_dir, rep)
    for d in run.thresholds:
        (out / f"plot_delta_{d:g}.csv").write_text(run.plot_data(d))


def cmd_experiment(args) -> int:
    if args.name not in EXPERIMENTS:
        print(f"unknown experiment {args.name!r}; available: {', '.join(EXPERIMENTS)}", file=sys.stderr)
        return 2
    out = _prepare_out(args.out)
    _set_workers(args.workers)
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.setdefault("eval", {})["seed"] = args.seed
    for flag in ("delta", "repeats", "subset_size", "variant", "remask_period", "steps"):
        v = getattr(args, flag, None)
        if v is not None:
            cfg.setdefault("eval", {})[flag] = v
    if args.checkpoint:
        cfg["checkpoint"] = args.checkpoint
    if args.data:
        cfg["data"] = args.data
    name = args.name
    if name == "pathology":
        demo = exp.percentile_pathology_fixture(int(cfg.get("seed", args.seed or 0)))
        (out / "summary.json").write_text(json.dumps(demo.demonstration, indent=1, sort_keys=True) + "\n")
        np.savetxt(out / "dist_a.csv", demo.dist_a, delimiter=",", fmt="%.17g")
        np.savetxt(out / "dist_b.csv", demo.dist_b, delimiter=",", fmt="%.17g")
        print(json.dumps(demo.demonstration, indent=1, sort_keys=True))
    elif name == "monobias":
        demo = exp.monochrome_bias_fixture(int(cfg.get("seed", args.seed or 0)))
        (out / "summary.json").write_text(json.dumps(demo.demonstration, indent=1, sort_keys=True) + "\n")
        print(json.dumps(demo.demonstration, indent=1, sort_keys=True))
    elif name == "calibrate":
        summary = run_calibration(int(cfg.get("n", 5000)), cfg.get("eval", {}))
        (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
        print(json.dumps(summary, indent=1, sort_keys=True))
    else:
        run = _dispatch(name, cfg)
        _write_run(out, run)
        print(run.to_csv())
    _dump_config(out, f"experiment {name}", cfg)
    return 0


def run_calibration(n: int, ecfg: dict) -> dict:
    """Unmemorized and memorizing oracle runs against the analytic chance rate."""
    ecfg = {"steps": 10, **ecfg}
    spec = img.PatternSpec("border", int(ecfg.get("thickness", 2)))
    ds = exp.oracle_dataset(n, 8, seed=int(ecfg.get("seed", 0)))
    ec = _eval_config({**ecfg, "subset_size": n}, spec)
    model, sched = exp.oracle_trainer("unmemorized", seed=ec.seed)(ds, spec)
    rep = evaluate_model(model, sched, ds, ec)
    rows = []
    for d in ec.thresholds:
        p = fp_rate(d)
        se = exp.binomial_se(p, n)
        rows.append({"delta": d, "fraction": rep.fraction(d), "fp_grid": p,
                     "fp_continuous": exp.fp_rate_closed_form(d), "z": (rep.fraction(d) - p) / se})
    mem_ids = ds.ids()[: min(100, n)]
    mm, _ = exp.oracle_trainer("memorizing", memorized_ids=mem_ids)(ds, spec)
    mrep = evaluate_model(mm, sched, ds, ec, ids=mem_ids)
    return {"n": n, "unmemorized": rows,
            "memorizing": {"n": len(mem_ids), "detected": {repr(d): c for d, c in mrep.counts.items()},
                           "max_distance": max(r.min_distance for r in mrep.rows)}}


def _dispatch(name: str, cfg: dict):
    if name == "duplication":
        base = cfg.get("base", {})
        ds = img.gen_synthetic_dataset(int(base.get("count", 300)), int(base.get("base_size", 32)),
                                       int(base.get("num_classes", 3)), int(base.get("seed", 0)))
        ds = ds.replace(keymap=img.assign_keys(ds, int(base.get("key_seed", 11))))
        spec = _pattern(cfg.get("eval", {}))
        trainer = exp.diffusion_trainer(_train_config(cfg.get("train", {})), log=log.info)
        return exp.run_duplication_study(ds, cfg.get("levels", [1, 4, 16]), trainer,
                                         _eval_config(cfg.get("eval", {}), spec),
                                         per_level=int(cfg.get("per_level", 10)),
                                         independent_keys=not cfg.get("shared_keys", False))
    if name == "ablation":
        base = cfg.get("base", {})
        ds = img.gen_synthetic_dataset(int(base.get("count", 300)), int(base.get("base_size", 32)),
                                       int(base.get("num_classes", 3)), int(base.get("seed", 0)))
        kind = cfg.get("kind", "thickness")
        configs = cfg.get("configs") or {"thickness": [4, 8, 16], "placement": [["border", 4], ["center", 16]],
                                         "color": ["grayscale", "rgb"]}[kind]
        configs = [tuple(c) if isinstance(c, list) else c for c in configs]
        trainer = exp.diffusion_trainer(_train_config(cfg.get("train", {})), log=log.info)
        return exp.run_ablation(kind, configs, ds, trainer, _eval_config(cfg.get("eval", {}), _pattern(cfg.get("eval", {}))))
    model, sched, ds, spec = _model_for(cfg)
    ec = _eval_config(cfg.get("eval", {}), spec)
    if name == "augmentation":
        transforms = cfg.get("transforms") or ["crop:1", "crop:2", "blur:1", "blur:2", "rotate:2", "rotate:180"]
        return exp.run_augmentation_study(model, sched, ds, ec, transforms)
    methods = cfg.get("methods") or {"gni": [0.0, 0.1, 0.5], "rt": [1], "cwr": [1], "rna": [1]}
    return exp.run_mitigation_study(model, sched, ds, ec, methods)


# --------------------------------------------------------------------------
# report


def cmd_report(args) -> int:
    path = Path(args.input)
    summary = json.loads((path / "summary.json").read_text())
    if "eidetic" in summary:
        for row in summary["eidetic"]:
            print(f"delta={row['delta']:<6g} count={row['count']:<6d} fraction={row['fraction']:.4f} "
                  f"chance={row['fp_baseline']:.4f}")
    elif "arms" in summary:
        print((path / "arms.csv").read_text())
    else:
        print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="solidmark", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON config file; CLI flags override it")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int, help="torch threads (default: all cores)")

    ds = sub.add_parser("dataset", help="generate, augment or duplicate datasets")
    dsub = ds.add_subparsers(dest="action", required=True)
    g = dsub.add_parser("generate")
    common(g)
    g.add_argument("--count", type=int)
    g.add_argument("--base-size", dest="base_size", type=int)
    g.add_argument("--num-classes", dest="num_classes", type=int)
    g.add_argument("--key-seed", dest="key_seed", type=int)
    g.add_argument("--color-mode", dest="color_mode", choices=["grayscale", "rgb"])
    a = dsub.add_parser("augment")
    common(a)
    a.add_argument("--in", dest="input", required=True)
    a.add_argument("--placement", choices=["border", "center"])
    a.add_argument("--thickness", type=int)
    a.add_argument("--color-mode", dest="color_mode", choices=["grayscale", "rgb"])
    d = dsub.add_parser("duplicate")
    common(d)
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--ids", nargs="+")
    d.add_argument("--first", type=int, help="duplicate the first N ids")
    d.add_argument("--count", type=int, help="total instances per duplicated image")
    d.add_argument("--shared-keys", dest="shared_keys", action="store_true", default=None)
    d.add_argument("--key-seed", dest="key_seed", type=int)

    t = sub.add_parser("train", help="train the denoiser on a keyed dataset")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--channels", type=int)
    t.add_argument("--T", type=int)
    t.add_argument("--unconditional", action="store_true", default=None)
    t.add_argument("--placement", choices=["border", "center"])
    t.add_argument("--thickness", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")

    def eval_flags(sp):
        sp.add_argument("--delta", type=float, action="append", help="eidetic threshold (repeatable)")
        sp.add_argument("--repeats", type=int)
        sp.add_argument("--subset-size", dest="subset_size", type=int)
        sp.add_argument("--variant", choices=["pixel", "latent"])
        sp.add_argument("--remask-period", dest="remask_period", type=int)
        sp.add_argument("--steps", type=int, help="sampling steps (strided)")

    e = sub.add_parser("evaluate", help="SolidMark evaluation of a checkpoint")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    eval_flags(e)

    x = sub.add_parser("experiment", help=f"run an experiment: {', '.join(EXPERIMENTS)}")
    x.add_argument("name")
    common(x)
    x.add_argument("--checkpoint")
    x.add_argument("--data")
    eval_flags(x)

    r = sub.add_parser("report", help="print the summary of an output directory")
    r.add_argument("input")
    return p


COMMANDS = {"dataset": cmd_dataset, "train": cmd_train, "evaluate": cmd_evaluate,
            "experiment": cmd_experiment, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    log.setLevel(logging.INFO)
    started = time.time()
    try:
        code = COMMANDS[args.command](args)
    except (SolidMarkError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        log.info("%s finished in %.1fs", args.command, time.time() - started)
        for h in list(log.handlers):
            log.removeHandler(h)
            h.close()
    return code


if __name__ == "__main__":
    sys.exit(main())
