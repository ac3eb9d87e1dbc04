"""Command line entry point: ``octanet <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import dump_config, layered, load_config, parse_overrides
from .core import DEFAULT_THRESHOLD, ConfigError, DataError, OctaError, binarize
from .data.dataset import DatasetManifest, load_dataset
from .data.synth import BUNDLED_SPLIT, SynthParams, bundled_split, write_synthetic_dataset
from .fractal import box_count_fd, compare_groups, write_fd_csv, write_quantiles_csv
from .io import load_mask, read_cmap, save_confidence, save_overlay
from .metrics import roc_auc, tolerance_region
from .nn.coarse import PRESETS, CoarseNetConfig
from .nn.fine import SrsConfig
from .pipeline import (
    Model,
    evaluate_maps,
    evaluation_target,
    run_ablation,
    time_inference,
    tolerance_for,
    write_ablation_csv,
)
from .training import (
    TrainConfig,
    load_checkpoint,
    restore_coarse,
    restore_srs,
    save_checkpoint,
    train_coarse,
    train_fine,
    write_log,
)

log = logging.getLogger("octanet")

DEFAULTS = {
    "seed": 0,
    "preset": "full",
    "coarse.shared_stages": 3,
    "coarse.centerline_blocks": 2,
    "srs.m": 3,
    "srs.hidden": [32, 32],
    "srs.init_sigma": 1e-4,
    "train.epochs": 200,
    "train.lr": 5e-4,
    "train.weight_decay": 1e-4,
    "train.batch_size": 2,
    "train.poly_power": 0.9,
    "train.rotation": 10.0,
    "train.dice_eps": 1e-6,
    "train.pixel_weight": 1.0,
    "train.centerline_weight": 1.0,
    "train.joint": False,
    "eval.threshold": DEFAULT_THRESHOLD,
    "eval.pooling": "macro",
    "eval.tolerance": "auto",
    "fd.anchors": 1,
    "fd.test": "student",
    "synth.train": BUNDLED_SPLIT["train"],
    "synth.test": BUNDLED_SPLIT["test"],
    "synth.size": BUNDLED_SPLIT["size"],
    "synth.noise": BUNDLED_SPLIT["noise"],
    "synth.trees": 3,
}
OPTIONAL = {"coarse.base_width", "coarse.dual_branch"}
PROVENANCE = "run."  # keys written for the record and ignored when a frozen config is reloaded


# ------------------------------------------------------------------ config plumbing

def effective_config(args) -> dict:
    layers = [DEFAULTS]
    for path in args.config or []:
        layers.append(load_config(path))
    layers.append(parse_overrides(args.set))
    cfg = {k: v for k, v in layered(*layers).items() if not k.startswith(PROVENANCE)}
    if args.seed is not None:
        cfg["seed"] = args.seed
    for flag in ("train", "test", "size", "noise", "trees"):
        value = getattr(args, f"synth_{flag}", None)
        if value is not None:
            cfg[f"synth.{flag}"] = value
    unknown = sorted(set(cfg) - set(DEFAULTS) - OPTIONAL)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    d = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("train.")}
    return TrainConfig.from_dict({**d, "seed": int(cfg["seed"])})


def coarse_config(cfg: dict, dual: bool) -> CoarseNetConfig:
    preset = cfg["preset"]
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    return CoarseNetConfig(
        base_width=int(cfg.get("coarse.base_width", PRESETS[preset])),
        dual_branch=bool(cfg.get("coarse.dual_branch", dual)),
        shared_stages=int(cfg["coarse.shared_stages"]),
        centerline_blocks=int(cfg["coarse.centerline_blocks"]),
    )


def srs_config(cfg: dict, dual: bool) -> SrsConfig:
    hidden = cfg["srs.hidden"]
    if not isinstance(hidden, list) or len(hidden) != 2:
        raise ConfigError("srs.hidden must list two channel counts")
    return SrsConfig(
        m=int(cfg["srs.m"]),
        hidden_channels=(int(hidden[0]), int(hidden[1]), None),
        refine_centerline_branch=dual,
        init_sigma=float(cfg["srs.init_sigma"]),
    )


def prepare_out(path, resume: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not resume:
        raise ConfigError(f"output directory {out} is not empty (use --resume to reuse it)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def freeze(out: Path, cfg: dict, args, extra: dict | None = None) -> None:
    record = dict(cfg)
    record[PROVENANCE + "command"] = args.command
    record[PROVENANCE + "version"] = __version__
    for k, v in (extra or {}).items():
        record[PROVENANCE + k] = v
    (out / "effective_config.txt").write_text(dump_config(record))


def _manifest(args) -> DatasetManifest:
    if not args.data:
        raise ConfigError("--data MANIFEST is required")
    return DatasetManifest.from_file(args.data)


def _tolerance(cfg: dict, subset: str):
    mode = cfg["eval.tolerance"]
    if mode == "auto":
        return tolerance_for(subset)
    if mode in (True, "on"):
        return tolerance_for(subset, True)
    if mode in (False, "off"):
        return None
    raise ConfigError(f"eval.tolerance must be auto, on or off, got {mode!r}")


# ----------------------------------------------------------------------- commands

def cmd_train_coarse(args, cfg, out):
    manifest = _manifest(args)
    samples = load_dataset(manifest, "train")
    net_cfg = coarse_config(cfg, manifest.mode == "dual")
    freeze(out, cfg, args, {"data": str(Path(args.data).resolve())})
    res = train_coarse(train_config(cfg), samples, net_cfg, verbose=True)
    save_checkpoint(out / "coarse.ckpt", res.checkpoint)
    write_log(out / "train_log.csv", res.log)
    return {"checkpoint": "coarse.ckpt", "final_loss": res.log[-1]["loss"]}


def cmd_train_fine(args, cfg, out):
    manifest = _manifest(args)
    if not args.coarse:
        raise ConfigError("--coarse CHECKPOINT is required")
    ckpt = load_checkpoint(args.coarse)
    if ckpt.stage != "coarse":
        raise ConfigError(f"{args.coarse} is a {ckpt.stage}-stage checkpoint, expected coarse")
    coarse = restore_coarse(ckpt)
    samples = load_dataset(manifest, "train")
    if coarse.cfg.dual_branch and manifest.mode != "dual":
        raise ConfigError("dual-branch coarse checkpoint needs a dataset with both annotation levels")
    ref = hashlib.sha256(Path(args.coarse).read_bytes()).hexdigest()
    freeze(out, cfg, args, {"data": str(Path(args.data).resolve()), "coarse": ref})
    res = train_fine(
        train_config(cfg), samples, coarse, srs_config(cfg, coarse.cfg.dual_branch), ref, verbose=True
    )
    save_checkpoint(out / "fine.ckpt", res.checkpoint)
    write_log(out / "train_log.csv", res.log)
    return {"checkpoint": "fine.ckpt", "final_loss": res.log[-1]["loss"]}


def load_model(path) -> Model:
    ckpt = load_checkpoint(path)
    coarse = restore_coarse(ckpt)
    srs = restore_srs(ckpt) if ckpt.stage == "fine" else None
    return Model(coarse, srs)


def cmd_predict(args, cfg, out):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    model = load_model(args.checkpoint)
    samples = load_dataset(_manifest(args), args.split)
    freeze(out, cfg, args, {"checkpoint": str(Path(args.checkpoint).resolve())})
    maps_dir = out / "maps"
    maps_dir.mkdir(exist_ok=True)
    timing = []
    for s in samples:
        pred = model.predict(s.image)
        save_confidence(maps_dir / f"{s.name}_final", pred.final)
        for kind in ("pixel", "centerline"):
            m = getattr(pred.coarse, f"{kind}_map")
            if m is not None:
                save_confidence(maps_dir / f"{s.name}_coarse_{kind}", m)
        if args.overlay:
            (out / "overlays").mkdir(exist_ok=True)
            ann = s.annotations
            save_overlay(out / "overlays" / f"{s.name}.png", s.image,
                         ann.centerline_mask, binarize(pred.final, float(cfg["eval.threshold"])))
        if args.timing_runs > 0:
            timing.append((s.name, time_inference(model, s.image, args.timing_runs)))
    if timing:
        with open(out / "timing.csv", "w") as fh:
            fh.write("# wall-clock seconds per image, mean of warm runs; hardware dependent\n")
            fh.write("image,seconds\n")
            fh.writelines(f"{n},{t:.6f}\n" for n, t in timing)
    return {"images": len(samples), "maps": "maps/"}


def _svg_roc(path, curves: dict) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    for label, curve in curves.items():
        ax.plot(curve.fpr, curve.tpr, label=f"{label} (AUC {curve.auc:.4f})")
    ax.plot([0, 1], [0, 1], ":", color="grey")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_evaluate(args, cfg, out):
    if not args.pred:
        raise ConfigError("--pred PREDICT_DIR is required")
    manifest = _manifest(args)
    samples = load_dataset(manifest, args.split)
    tol = _tolerance(cfg, manifest.subset)
    maps = []
    for s in samples:
        path = Path(args.pred) / "maps" / f"{s.name}_{args.map}.cmap"
        if not path.exists():
            raise DataError(f"missing prediction {path}")
        maps.append(read_cmap(path))
    freeze(out, cfg, args, {"pred": str(Path(args.pred).resolve())})
    report = evaluate_maps(maps, samples, float(cfg["eval.threshold"]), tol, cfg["eval.pooling"])
    report.to_csv(out / "metrics.csv")
    report.to_json(out / "metrics.json")
    roc_dir = out / "roc"
    roc_dir.mkdir(exist_ok=True)
    scores, truths = [], []
    for cmap, s in zip(maps, samples):
        target = evaluation_target(s.annotations, tol)
        truth = tolerance_region(target, tol) if tol is not None else target
        try:
            roc_auc(cmap, truth).to_csv(roc_dir / f"{s.name}.csv")
        except DataError:
            pass
        scores.append(cmap.values.ravel())
        truths.append(np.asarray(truth).ravel())
    pooled = roc_auc(np.concatenate(scores), np.concatenate(truths))
    pooled.to_csv(out / "roc_pooled.csv")
    _svg_roc(out / "roc.svg", {args.map: pooled})
    return report.summary()


def _fd_inputs(arg: str, threshold: float):
    if "=" not in arg:
        raise ConfigError(f"group must be LABEL=DIR, got {arg!r}")
    label, folder = arg.split("=", 1)
    folder = Path(folder)
    if not folder.is_dir():
        raise DataError(f"group folder {folder} does not exist")
    items = []
    for path in sorted(folder.iterdir()):
        if path.suffix == ".cmap":
            items.append((path.stem, binarize(read_cmap(path), threshold).values))
        elif path.suffix.lower() == ".png" and not (path.with_suffix(".cmap")).exists():
            items.append((path.stem, load_mask(path).values))
    if len(items) < 2:
        raise DataError(f"group {label} needs at least 2 masks in {folder}")
    return label, items


def _svg_box(path, cmp) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.boxplot(list(cmp.values))
    ax.set_xticks(range(1, len(cmp.labels) + 1), list(cmp.labels))
    ax.set_ylabel("fractal dimension")
    ax.set_title(f"p = {cmp.p:.3g}")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_analyze_fd(args, cfg, out):
    if not args.group or len(args.group) != 2:
        raise ConfigError("analyze-fd needs exactly two --group LABEL=DIR arguments")
    threshold = float(cfg["eval.threshold"])
    groups = [_fd_inputs(g, threshold) for g in args.group]
    freeze(out, cfg, args, {"groups": " ".join(args.group)})
    rows, values = [], []
    for label, items in groups:
        fds = []
        for name, mask in items:
            res = box_count_fd(mask, anchors=int(cfg["fd.anchors"]))
            rows.append((label, name, res))
            fds.append(res.fd)
        values.append(fds)
    cmp = compare_groups(values[0], values[1], (groups[0][0], groups[1][0]), cfg["fd.test"])
    write_fd_csv(out / "fd.csv", rows)
    write_quantiles_csv(out / "boxplot.csv", cmp)
    _svg_box(out / "boxplot.svg", cmp)
    summary = {
        "test": cmp.test, "t": cmp.t, "p": cmp.p, "tie": cmp.tie,
        "labels": list(cmp.labels), "means": list(cmp.means), "stds": list(cmp.stds),
        "n": [len(v) for v in values],
    }
    (out / "ttest.json").write_text(json.dumps(summary, indent=2))
    return summary


def cmd_synth(args, cfg, out):
    params = SynthParams(size=int(cfg["synth.size"]), noise=float(cfg["synth.noise"]),
                         trees=int(cfg["synth.trees"]), seed=int(cfg["seed"]))
    freeze(out, cfg, args)
    n_train, n_test = int(cfg["synth.train"]), int(cfg["synth.test"])
    write_synthetic_dataset(out, n_train, n_test, params, seed=int(cfg["seed"]))
    return {"manifest": "manifest.txt", "train": n_train, "test": n_test}


def cmd_ablate(args, cfg, out):
    if args.data:
        manifest = _manifest(args)
        train, test = load_dataset(manifest, "train"), load_dataset(manifest, "test")
        subset, source = manifest.subset, str(Path(args.data).resolve())
    else:
        train, test = bundled_split()
        subset, source = "synthetic", f"bundled synthetic split {BUNDLED_SPLIT}"
    freeze(out, cfg, args, {"data": source})
    tol = _tolerance(cfg, subset)
    table, reports = run_ablation(
        train, test, train_config(cfg), coarse_config(cfg, True), srs_config(cfg, True),
        float(cfg["eval.threshold"]), tol,
    )
    write_ablation_csv(out / "ablation.csv", table)
    for name, rep in reports.items():
        rep.to_csv(out / f"metrics_{name}.csv")
    (out / "ablation.json").write_text(json.dumps({"tolerance": tol, "rows": table}, indent=2))
    return {"rows": table, "tolerance": tol}


def cmd_reproduce(args, cfg, out):
    """Full two-stage run on a ROSE-format tree with a Table-I-shaped report."""
    manifest = _manifest(args)
    train = load_dataset(manifest, "train")
    test = load_dataset(manifest, "test")
    expected = {"rose1": (90, 27), "rose2": (90, 22)}.get(manifest.subset.split("-")[0])
    if expected and (len(train), len(test)) != expected:
        log.warning("split sizes %s differ from the published %s", (len(train), len(test)), expected)
    freeze(out, cfg, args, {"data": str(Path(args.data).resolve())})
    dual = manifest.mode == "dual"
    tcfg = train_config(cfg)
    coarse = train_coarse(tcfg, train, coarse_config(cfg, dual), verbose=True)
    ref = save_checkpoint(out / "coarse.ckpt", coarse.checkpoint)
    write_log(out / "train_coarse_log.csv", coarse.log)
    fine = train_fine(tcfg, train, coarse.coarse, srs_config(cfg, dual), ref, verbose=True)
    save_checkpoint(out / "fine.ckpt", fine.checkpoint)
    write_log(out / "train_fine_log.csv", fine.log)
    model = Model(coarse.coarse, fine.srs)
    tol = _tolerance(cfg, manifest.subset)
    preds = [model.predict(s.image) for s in test]
    report = evaluate_maps([p.final for p in preds], test, float(cfg["eval.threshold"]), tol,
                           cfg["eval.pooling"])
    report.to_csv(out / "metrics.csv")
    seconds = time_inference(model, test[0].image, args.timing_runs) if args.timing_runs else None
    agg = report.aggregate
    cols = ["AUC", "ACC", "G-mean", "Kappa", "Dice", "FDR", "Time (s)", "p-value"]
    vals = [agg[k] for k in ("auc", "acc", "gmean", "kappa", "dice", "fdr")]
    with open(out / "table.csv", "w") as fh:
        fh.write("Methods," + ",".join(cols) + "\n")
        fh.write("OCTA-Net," + ",".join("n/a" if v is None else f"{v:.4f}" for v in vals))
        fh.write(f",{'-' if seconds is None else f'{seconds:.3f}'},-\n")
    return {"subset": manifest.subset, "n_train": len(train), "n_test": len(test), **report.summary()}


COMMANDS = {
    "train-coarse": cmd_train_coarse,
    "train-fine": cmd_train_fine,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "analyze-fd": cmd_analyze_fd,
    "synth": cmd_synth,
    "ablate": cmd_ablate,
    "reproduce": cmd_reproduce,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="octanet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", action="append", help="key = value file (repeatable, later wins)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one key")
        p.add_argument("--seed", type=int)
        p.add_argument("--resume", action="store_true", help="allow a non-empty output directory")
        p.add_argument("--data", help="dataset manifest file")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train-fine":
            p.add_argument("--coarse", help="coarse-stage checkpoint")
        if name == "predict":
            p.add_argument("--checkpoint")
        if name in ("predict", "evaluate"):
            p.add_argument("--split", default="test")
        if name in ("predict", "reproduce"):
            p.add_argument("--timing-runs", type=int, default=10)
        if name == "predict":
            p.add_argument("--overlay", action="store_true",
                           help="also write RGB figures with the centerline widened for display")
        if name == "evaluate":
            p.add_argument("--pred", help="directory written by predict")
            p.add_argument("--map", default="final",
                           choices=["final", "coarse_pixel", "coarse_centerline"])
        if name == "analyze-fd":
            p.add_argument("--group", action="append", metavar="LABEL=DIR")
        if name == "synth":
            p.add_argument("--train", dest="synth_train", type=int, help="training images")
            p.add_argument("--test", dest="synth_test", type=int, help="test images")
            p.add_argument("--size", dest="synth_size", type=int, help="image edge in pixels")
            p.add_argument("--noise", dest="synth_noise", type=float)
            p.add_argument("--trees", dest="synth_trees", type=int)
    return parser


def error_record(exc: BaseException, code: int) -> dict:
    kind = exc.kind if isinstance(exc, OctaError) else "internal"
    return {"status": "error", "exit_code": code, "kind": kind, "message": str(exc)}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    out = None
    try:
        cfg = effective_config(args)
        out = prepare_out(args.out, args.resume)
        torch.manual_seed(int(cfg["seed"]))
        result = COMMANDS[args.command](args, cfg, out)
        record = {"status": "ok", "command": args.command, "result": result}
        (out / "result.json").write_text(json.dumps(record, indent=2, default=str))
        print(json.dumps(record, default=str))
        return 0
    except Exception as exc:  # every failure leaves a machine-readable record
        if isinstance(exc, OctaError):
            code = exc.exit_code
        elif isinstance(exc, FloatingPointError):
            code = 4
        elif isinstance(exc, ValueError):
            code = 2
        else:
            code = 1
        record = error_record(exc, code)
        if args.verbose:
            traceback.print_exc()
        print(json.dumps(record), file=sys.stderr)
        if out is not None:
            (out / "error.json").write_text(json.dumps(record, indent=2))
        return code


if __name__ == "__main__":
    sys.exit(main())
