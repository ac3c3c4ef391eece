"""Command-line entry point: ``liafkd <subcommand> [--config PATH] [--out DIR] ...``.

Exit status 0 on success, 2 for usage or configuration errors, 1 for any
runtime failure. Failures print one JSON line on stderr.
"""
import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import filelock
import numpy as np
import yaml

from . import pipeline as P
from .config import VARIANTS, ConfigError, dump_config, from_mapping, load_config
from .config import env_overrides
from .selector import load_ensemble, save_ensemble

log = logging.getLogger("liafkd")

LOCK_NAME = ".liafkd.lock"


class UsageError(Exception):
    """Bad command-line input that argparse itself cannot detect."""


def _parse_set(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value
    return out


def _config(args, base_mapping=None):
    """Config file (or ``base_mapping``), then ``LIAFKD_*`` env vars, then ``--set``/``--seed``."""
    sets = _parse_set(args.set)
    if args.seed is not None:
        sets["seed"] = args.seed
    if base_mapping is not None and args.config is None:
        cfg = from_mapping(base_mapping)
        env = env_overrides()
        if env:
            cfg = from_mapping(env, base=cfg)
    else:
        cfg = load_config(args.config)
    return from_mapping(sets, base=cfg) if sets else cfg


def _check_outputs(inputs, outputs):
    ins = {Path(p).resolve() for p in inputs if p}
    for out in outputs:
        if Path(out).resolve() in ins:
            raise UsageError(f"refusing to overwrite input file {out}")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _write_run(record, out: Path, stem: str, plots: bool = True):
    record.write_jsonl(out / f"{stem}.jsonl")
    record.write_summary_csv(out / f"{stem}_summary.csv")
    if plots:
        from .plotting import loss_figure

        loss_figure(record, out / f"{stem}_loss.png")


def _load_teacher(path):
    model, _, meta = P.load_detector(path)
    if meta.get("stage") != "teacher":
        raise UsageError(f"{path} holds a {meta.get('stage')!r} checkpoint, expected a teacher")
    return model


def _load_selectors(path, teacher, cfg):
    ensemble, meta = load_ensemble(path)
    expected = teacher.width * cfg.pool_h * cfg.pool_w
    if ensemble.dim != expected:
        raise UsageError(f"selector width {ensemble.dim} does not match teacher width x pool size = {expected}")
    return ensemble


# ------------------------------------------------------------ subcommands


def cmd_gen_data(args, cfg, out):
    data = P.make_data(cfg)
    data.train.corpus.write_manifest(out / "train_manifest.jsonl")
    data.eval.corpus.write_manifest(out / "eval_manifest.jsonl")
    result = {"train_scenes": len(data.train), "eval_scenes": len(data.eval),
              "train_instances": int(sum(len(b) for b in data.train.corpus.boxes)),
              "eval_instances": int(sum(len(b) for b in data.eval.corpus.boxes))}
    _write_json(out / "data.json", result)
    return result


def cmd_train_teacher(args, cfg, out):
    data = P.make_data(cfg)
    res = P.train_teacher(data, cfg)
    steps = len(res.record.curve("task"))
    P.save_detector(out / "teacher.npz", res.model, cfg, "teacher", steps, extra={"metrics": res.metrics})
    _write_run(res.record, out, "teacher")
    return {"checkpoint": str(out / "teacher.npz"), **res.metrics}


def cmd_train_selectors(args, cfg, out):
    _check_outputs([args.teacher], [out / "selectors.npz"])
    teacher = _load_teacher(args.teacher)
    data = P.make_data(cfg)
    res = P.train_selectors(teacher, data, cfg)
    save_ensemble(out / "selectors.npz", res.ensemble, {
        "C": teacher.width, "h": cfg.pool_h, "w": cfg.pool_w, "seed": cfg.teacher_seed,
        "step": len(res.record.curve("task")), "config_hash": cfg.digest(),
        "initial_diversity": res.initial_diversity, "final_diversity": res.final_diversity,
    })
    _write_run(res.record, out, "selectors", plots=False)
    return {"checkpoint": str(out / "selectors.npz"), "K": res.ensemble.K,
            "initial_diversity": res.initial_diversity, "final_diversity": res.final_diversity}


def _run_student(args, cfg, out, variant):
    stem = f"{variant}_seed{cfg.seed}"
    ckpt = out / f"student_{stem}.npz"
    _check_outputs([args.teacher, getattr(args, "selectors", None)], [ckpt])
    teacher = _load_teacher(args.teacher)
    ensemble = None
    if variant in ("liaf", "teacher_only_mask"):
        if not args.selectors:
            raise UsageError(f"variant {variant!r} needs --selectors")
        ensemble = _load_selectors(args.selectors, teacher, cfg)
    data = P.make_data(cfg)
    res = P.distill(teacher, ensemble, data, cfg, variant)
    steps = len(res.record.curve("task"))
    P.save_detector(ckpt, res.student, cfg, "distill", steps, proj=res.proj,
                    extra={"variant": variant, "metrics": res.metrics})
    _write_run(res.record, out, stem)
    return {"checkpoint": str(ckpt), "variant": variant, "seed": cfg.seed, **res.metrics}


def cmd_distill(args, cfg, out):
    return _run_student(args, cfg, out, args.variant)


def cmd_baseline(args, cfg, out):
    return _run_student(args, cfg, out, args.variant)


def cmd_ablate(args, cfg, out):
    from .plotting import summary_bar_chart

    teacher = _load_teacher(args.teacher)
    grid_text = Path(args.grid).read_text() if Path(args.grid).is_file() else args.grid
    grid = yaml.safe_load(grid_text)
    if not isinstance(grid, dict) or not all(isinstance(v, list) for v in grid.values()):
        raise ConfigError("--grid must map ablation keys to lists of values")
    try:
        P.expand_grid(grid)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    seeds = [int(s) for s in args.seeds.split(",")]
    data = P.make_data(cfg)
    rows = P.ablate(teacher, data, cfg, grid, seeds,
                    progress=lambda r: log.info("cell %s", {k: r[k] for k in r if k != "status"}))
    P.write_rows_csv(rows, out / "ablation.csv")
    keys = tuple(grid)
    summary = P.summarize(rows, keys)
    table = [{**dict(zip(keys, k)), "map_mean": m, "map_std": s, "n": n} for k, (m, s, n) in summary.items()]
    P.write_rows_csv(table, out / "ablation_summary.csv")
    summary_bar_chart(summary, out / "ablation.png", title=", ".join(keys))
    return {"rows": len(rows), "failed": sum(r["status"] != "ok" for r in rows),
            "summary": str(out / "ablation_summary.csv")}


def cmd_eval(args, cfg, out):
    model, _, meta = P.load_detector(args.checkpoint)
    data = P.make_data(cfg)
    metrics = P.evaluate(model, data.eval, cfg)
    record = {"checkpoint": str(args.checkpoint), "stage": meta.get("stage"),
              "variant": meta.get("variant"), **metrics}
    _write_json(out / f"eval_{Path(args.checkpoint).stem}.json", record)
    return record


def cmd_viz_masks(args, cfg, out):
    from .plotting import mask_figure, save_mask_png

    teacher = _load_teacher(args.teacher)
    ensemble = _load_selectors(args.selectors, teacher, cfg)
    student = proj = None
    if args.student:
        student, proj, _ = P.load_detector(args.student)
        if proj is None:
            raise UsageError(f"{args.student} has no projection layer; use a distilled student")
    data = P.make_data(cfg)
    idx = [int(i) for i in args.images.split(",")]
    if any(not 0 <= i < len(data.eval) for i in idx):
        raise UsageError(f"image indices must lie in [0, {len(data.eval)})")
    snap = P.mask_snapshot(teacher, ensemble, data.eval, idx, cfg, student, proj)
    t_masks = snap["teacher_mask"][:, 0].numpy()
    s_masks = snap["student_mask"][:, 0].numpy() if "student_mask" in snap else None
    files = []
    for j, i in enumerate(idx):
        path = out / f"mask_teacher_{i:04d}.png"
        save_mask_png(t_masks[j], path)
        files.append(path.name)
        if s_masks is not None:
            path = out / f"mask_student_{i:04d}.png"
            save_mask_png(s_masks[j], path)
            files.append(path.name)
    mask_figure(snap["images"].numpy(), t_masks, s_masks, out / "masks.png", titles=[f"scene {i}" for i in idx])
    inst = snap["instances"]
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "instance", "label", "x1", "y1", "x2", "y2", "teacher_score", "student_score"])
        for r in range(inst.count):
            n = int(inst.batch_index[r])
            box = [f"{v:.4f}" for v in inst.boxes[r].tolist()]
            student_score = f"{snap['student_scores'][r].item():.8f}" if "student_scores" in snap else ""
            w.writerow([idx[n], r, int(inst.labels[r]), *box, f"{snap['teacher_scores'][r].item():.8f}",
                        student_score])
    np.save(out / "masks.npy", t_masks if s_masks is None else np.stack([t_masks, s_masks]))
    return {"images": idx, "files": files, "scores": str(out / "scores.csv")}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "train-selectors": cmd_train_selectors,
    "distill": cmd_distill,
    "baseline": cmd_baseline,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "viz-masks": cmd_viz_masks,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML config file")
    common.add_argument("--out", type=Path, default=Path("runs"), help="output directory (created if absent)")
    common.add_argument("--seed", type=int, help="override the student seed")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--quiet", action="store_true", help="only print the result line")

    parser = argparse.ArgumentParser(prog="liafkd", description="Instance-adaptive detector distillation runs.")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", required=True)
    sub.add_parser("gen-data", parents=[common], help="write scene manifests for the configured corpus")
    sub.add_parser("train-teacher", parents=[common], help="train and save the wide detector")
    p = sub.add_parser("train-selectors", parents=[common], help="learn the selector ensemble")
    p.add_argument("--teacher", type=Path, required=True)
    p = sub.add_parser("distill", parents=[common], help="distill a student")
    p.add_argument("--teacher", type=Path, required=True)
    p.add_argument("--selectors", type=Path)
    p.add_argument("--variant", choices=["liaf", "teacher_only_mask"], default="liaf")
    p = sub.add_parser("baseline", parents=[common], help="train a baseline student")
    p.add_argument("--teacher", type=Path, required=True)
    p.add_argument("--selectors", type=Path)
    p.add_argument("--variant", choices=[v for v in VARIANTS if v != "liaf"], required=True)
    p = sub.add_parser("ablate", parents=[common], help="distill over a grid of settings")
    p.add_argument("--teacher", type=Path, required=True)
    p.add_argument("--grid", required=True, help="YAML/JSON mapping or a file holding one")
    p.add_argument("--seeds", default="0")
    p = sub.add_parser("eval", parents=[common], help="evaluate a saved detector on the held-out corpus")
    p.add_argument("--checkpoint", type=Path, required=True)
    p = sub.add_parser("viz-masks", parents=[common], help="render teacher/student soft masks")
    p.add_argument("--teacher", type=Path, required=True)
    p.add_argument("--selectors", type=Path, required=True)
    p.add_argument("--student", type=Path)
    p.add_argument("--images", default="0,1,2,3", help="comma-separated held-out scene indices")
    return parser


def _fail(kind: str, exc, code: int) -> int:
    print(json.dumps({"status": "error", "error": kind, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 with usage on unknown subcommands
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        base = None
        if args.command == "eval" and args.config is None:
            # re-evaluate on exactly the corpus the checkpoint was trained with
            base = P.load_checkpoint(args.checkpoint)[1].get("config")
        cfg = _config(args, base)
    except (ConfigError, yaml.YAMLError) as exc:
        return _fail("config", exc, 2)
    except OSError as exc:
        return _fail("io", exc, 1)

    out = args.out
    try:
        out.mkdir(parents=True, exist_ok=True)
        with filelock.FileLock(str(out / LOCK_NAME), timeout=0):
            dump_config(cfg, out / "config.yaml")
            result = COMMANDS[args.command](args, cfg, out)
    except filelock.Timeout:
        return _fail("locked", f"output directory {out} is in use by another run", 1)
    except ConfigError as exc:
        return _fail("config", exc, 2)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    except P.TrainingDiverged as exc:
        return _fail("diverged", exc, 1)
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("failure", exc_info=True)
        return _fail(type(exc).__name__, exc, 1)
    print(json.dumps({"status": "ok", "command": args.command, **result}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
