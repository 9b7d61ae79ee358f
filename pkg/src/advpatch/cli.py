"""``advpatch`` command line.

Exit codes: 0 success, 1 configuration or usage error, 2 I/O or format error.
Every command writes a manifest next to its outputs (``manifest.json`` in an
output directory, ``<name>.manifest.json`` beside a single output file) holding the
resolved configuration, the seed and SHA-256 hashes of inputs and of the
deterministic outputs. Worker counts and timings are deliberately left out.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .attack import PRESETS, AttackConfig, default_suite, preset, universal_attack
from .config import SUITE_NAMES, ExperimentConfig
from .data_io import load_checkpoint, load_dataset, make_synthetic, save_checkpoint, save_dataset
from .errors import ConfigError, FormatError, InputError
from .evaluation import ablation_grid, location_heatmap, patch_size_sweep, robust_test_error
from .model import build_model, predict_batch, small_cnn
from .patches import PatchState, apply_patches
from .training import MODES, normalized_cost_configs, train, write_metrics_csv

log = logging.getLogger("advpatch")

HEATMAP_BUDGET = (10, 1000)
_BUDGET_KEYS = {"fixed-location": "fixed", "none": "random", "random-one": "random-one",
                "full-four": "full-four"}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, args, cfg: ExperimentConfig, inputs: dict,
                    outputs: list, extra: dict | None = None, unhashed: list = (),
                    name: str = "manifest.json") -> None:
    resolved = {k: v for k, v in vars(args).items()
                if k not in ("workers", "verbose", "func", "command", "config", "out")}
    manifest = {
        "command": command,
        "version": __version__,
        "seed": args.seed,
        "arguments": resolved,
        "config": cfg.to_dict(),
        "inputs": {str(k): sha256(v) for k, v in inputs.items() if v is not None},
        "outputs": {Path(p).name: sha256(p) for p in outputs},
        "logs": sorted(Path(p).name for p in unhashed),
        **(extra or {}),
    }
    (out_dir / name).write_text(json.dumps(manifest, indent=2, sort_keys=True,
                                                      default=str) + "\n")


def _config(args) -> ExperimentConfig:
    return ExperimentConfig.load(args.config) if args.config else ExperimentConfig()


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _data_path(args, cfg: ExperimentConfig, key: str):
    path = args.data or cfg.data.get(key)
    if path is None:
        raise ConfigError(f"no dataset given: pass --data or set data.{key} in the config")
    return path


def resolve_suite(args, cfg: ExperimentConfig) -> list[AttackConfig]:
    """Named suite (or the config's attack list) with command-line overrides applied."""
    geo = {k: getattr(args, k) for k in ("patch_side", "center_side", "step_size", "stride")
           if getattr(args, k, None) is not None}
    budget = {k: getattr(args, k) for k in ("iterations", "restarts")
              if getattr(args, k, None) is not None}
    name = args.suite or cfg.eval.get("suite")
    if name is None and cfg.attack:
        suite = [replace(c, **geo, **budget) for c in cfg.attack_suite()]
    else:
        name = name or "default"
        template = cfg.attack_suite()[0] if cfg.attack else None
        base = {k: getattr(template, k) for k in ("patch_side", "center_side", "step_size",
                                                  "stride")} if template else {}
        geo = {**base, **geo}
        if name == "default":
            if budget:
                raise ConfigError("--iterations/--restarts cannot modify the default suite")
            suite = default_suite("ap-fulllo", **geo)
        elif name == "heatmap":
            t, r = HEATMAP_BUDGET
            suite = [preset("ap-fulllo", **geo, **{"iterations": t, "restarts": r, **budget})]
        elif name in PRESETS:
            suite = [preset(name, **geo, **budget)]
        else:
            raise ConfigError(f"unknown suite {name!r}; expected one of {SUITE_NAMES}")
    if getattr(args, "budget", None) is not None:
        costs = normalized_cost_configs(args.budget)
        suite = [replace(c, iterations=costs[_BUDGET_KEYS[c.scheme]]) for c in suite]
    return suite


# --------------------------------------------------------------------------- #
# commands
# --------------------------------------------------------------------------- #

def cmd_make_synth(args) -> None:
    cfg = _config(args)
    overrides = {k: v for k, v in (("per_class", args.per_class), ("classes", args.classes))
                 if v is not None}
    spec = cfg.synth_spec(seed=args.seed, **overrides)
    batch, meta = make_synthetic(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(batch, meta, out)
    _write_manifest(out.parent, "make-synth", args, cfg, {}, [out],
                    {"synth": {**asdict(spec), "families": list(spec.resolved_families())}},
                    name=f"{out.stem}.manifest.json")
    log.info("wrote %d images to %s", len(batch), out)


def cmd_train(args) -> None:
    cfg = _config(args)
    data_path = _data_path(args, cfg, "train")
    dataset, meta = load_dataset(data_path)
    arch = cfg.arch() or small_cnn(meta.height, meta.width, meta.channels, meta.classes)
    if arch.input_shape != (meta.height, meta.width, meta.channels) or arch.classes != meta.classes:
        raise ConfigError(f"architecture {arch.input_shape}/{arch.classes} classes does not match "
                          f"dataset {meta.height}x{meta.width}x{meta.channels}/{meta.classes}")
    overrides = {k: v for k, v in (("epochs", args.epochs), ("batch_size", args.batch_size))
                 if v is not None}
    tcfg = cfg.train_config(seed=args.seed, **overrides)
    mode = cfg.train_mode(args.mode)
    geo = {k: getattr(args, k) for k in ("patch_side", "center_side", "step_size",
                                         "iterations", "restarts") if getattr(args, k) is not None}
    if geo:
        mode = replace(mode, attack=replace(mode.attack, **geo))
    params = build_model(arch, cfg.model.get("seed", args.seed))
    rows: list[dict] = []
    params = train(params, dataset, mode, tcfg, cfg.augment(), seed=args.seed, log=rows,
                   verbose=args.verbose)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out)
    metrics = out.with_suffix(".csv")
    write_metrics_csv(rows, metrics)
    _write_manifest(out.parent, "train", args, cfg, {"data": data_path}, [out],
                    {"train": asdict(tcfg), "mode": mode.kind, "attack": mode.attack.to_dict(),
                     "augment": asdict(cfg.augment())}, unhashed=[metrics],
                    name=f"{out.stem}.manifest.json")


def _load_eval_inputs(args, cfg):
    data_path = _data_path(args, cfg, "test")
    params = load_checkpoint(args.model)
    dataset, meta = load_dataset(data_path)
    if params.arch.input_shape != (meta.height, meta.width, meta.channels):
        raise InputError(f"model expects {params.arch.input_shape} images, dataset has "
                         f"{(meta.height, meta.width, meta.channels)}")
    if args.limit is not None:
        dataset = dataset[np.arange(min(args.limit, len(dataset)))]
    return params, dataset, meta, data_path


def _chunk_size(n: int, workers: int) -> int:
    return 64 if workers <= 1 else max(1, min(64, math.ceil(n / (4 * workers))))


def cmd_eval(args) -> None:
    cfg = _config(args)
    params, dataset, _, data_path = _load_eval_inputs(args, cfg)
    suite = resolve_suite(args, cfg)
    attack_all = args.attack_all or cfg.eval.get("attack_all", False)
    t0 = time.perf_counter()
    report = robust_test_error(params, dataset, suite, args.seed, attack_all=attack_all,
                               workers=args.workers,
                               chunk_size=_chunk_size(len(dataset), args.workers))
    out = _out_dir(args.out)
    report.write_csv(out / "report.csv")
    report.write_json(out / "summary.json")
    _write_manifest(out, "eval", args, cfg, {"model": args.model, "data": data_path},
                    [out / "report.csv", out / "summary.json"])
    print(f"TE {report.te:.4f}  RTE {report.rte:.4f}  ({report.n} examples, "
          f"{time.perf_counter() - t0:.1f}s)")


def cmd_attack(args) -> None:
    cfg = _config(args)
    params, dataset, _, data_path = _load_eval_inputs(args, cfg)
    suite = resolve_suite(args, cfg)
    report = robust_test_error(params, dataset, suite, args.seed, attack_all=True,
                               workers=args.workers,
                               chunk_size=_chunk_size(len(dataset), args.workers))
    out = _out_dir(args.out)
    report.write_attack_log(out / "attacks.jsonl")
    _write_manifest(out, "attack", args, cfg, {"model": args.model, "data": data_path},
                    [out / "attacks.jsonl"], {"suite": [c.to_dict() for c in suite]})
    done = sum(r.success for r in report.records)
    print(f"{done}/{report.n} attacks succeeded")


def cmd_sweep_size(args) -> None:
    cfg = _config(args)
    params, dataset, _, data_path = _load_eval_inputs(args, cfg)
    suite = resolve_suite(args, cfg)
    result = patch_size_sweep(params, dataset, args.sides, suite, args.seed, args.workers)
    out = _out_dir(args.out)
    with open(out / "sweep_size.csv", "w") as f:
        f.write("patch_side,rte\n")
        f.writelines(f"{s},{v:.6f}\n" for s, v in result.items())
    _write_manifest(out, "sweep-size", args, cfg, {"model": args.model, "data": data_path},
                    [out / "sweep_size.csv"], {"suite": [c.to_dict() for c in suite]})
    for s, v in result.items():
        print(f"side {s:3d}  RTE {v:.4f}")


def cmd_sweep_ablation(args) -> None:
    cfg = _config(args)
    params, dataset, _, data_path = _load_eval_inputs(args, cfg)
    template = resolve_suite(args, cfg)[0]
    result = ablation_grid(params, dataset, args.iteration_grid, args.restart_grid, template,
                           args.seed, args.workers)
    out = _out_dir(args.out)
    with open(out / "ablation.csv", "w") as f:
        f.write("iterations,restarts,rte\n")
        f.writelines(f"{t},{r},{v:.6f}\n" for (t, r), v in result.items())
    _write_manifest(out, "sweep-ablation", args, cfg, {"model": args.model, "data": data_path},
                    [out / "ablation.csv"], {"template": template.to_dict()})
    for (t, r), v in result.items():
        print(f"T={t:5d} r={r:5d}  RTE {v:.4f}")


def cmd_heatmap(args) -> None:
    cfg = _config(args)
    params, dataset, meta, data_path = _load_eval_inputs(args, cfg)
    suite = resolve_suite(args, cfg)
    if len(suite) != 1:
        raise ConfigError("heatmaps take a single attack config")
    c = suite[0]
    report = robust_test_error(params, dataset, suite, args.seed, attack_all=args.attack_all,
                               keep_restarts=True, workers=args.workers,
                               chunk_size=_chunk_size(len(dataset), args.workers))
    grid = location_heatmap(report, meta.height, meta.width, c.patch_side, c.center_side)
    out = _out_dir(args.out)
    files = []
    for which in ("all", "success"):
        grid.write_csv(out / f"{which}.csv", which)
        grid.write_pgm(out / f"{which}.pgm", which)
        files += [out / f"{which}.csv", out / f"{which}.pgm"]
    _write_manifest(out, "heatmap", args, cfg, {"model": args.model, "data": data_path}, files,
                    {"suite": [c.to_dict()]})
    print(f"{int(grid.all_counts.sum())} final locations, "
          f"{int(grid.success_counts.sum())} successful")


def cmd_universal(args) -> None:
    cfg = _config(args)
    params, dataset, _, data_path = _load_eval_inputs(args, cfg)
    if args.suite is None and not cfg.attack:
        args.suite = "ap-rand"
    c = resolve_suite(args, cfg)[0]
    if c.scheme not in ("none", "fixed-location"):
        c = replace(c, scheme="none")
    n = len(dataset)
    held = args.held_out if args.held_out is not None else n // 3
    if not 0 < held < n:
        raise ConfigError(f"--held-out must lie in (0, {n})")
    src, test = dataset[np.arange(n - held)], dataset[np.arange(n - held, n)]
    patch = universal_attack(params, src, args.target, c, seed=args.seed)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 1]))
    random_patch = PatchState(patch.location, rng.random(patch.values.shape, dtype=np.float32))
    rates = {name: targeted_success(params, test, p, args.target)
             for name, p in (("universal", patch), ("random", random_patch))}
    out = _out_dir(args.out)
    result = {"target": args.target, "row": patch.location.row, "col": patch.location.col,
              "side": patch.location.side, "held_out": held, "success_rate": rates["universal"],
              "random_success_rate": rates["random"], "values": patch.values.tolist(),
              "config": c.to_dict()}
    (out / "universal.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "universal", args, cfg, {"model": args.model, "data": data_path},
                    [out / "universal.json"])
    print(f"target {args.target}: universal {rates['universal']:.4f}  "
          f"random {rates['random']:.4f}")


def targeted_success(params, dataset, patch: PatchState, target: int) -> float:
    """Fraction of images not labelled ``target`` that the patch flips to ``target``."""
    keep = dataset.labels != target
    x = dataset.pixels[keep]
    if len(x) == 0:
        return 0.0
    k = len(x)
    patched = apply_patches(x, np.full(k, patch.location.row), np.full(k, patch.location.col),
                            np.broadcast_to(patch.values, (k,) + patch.values.shape))
    return float(np.mean(predict_batch(params, patched) == target))


# --------------------------------------------------------------------------- #
# parser
# --------------------------------------------------------------------------- #

def _common(p, model=True):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int, default=0, help="controls all randomness (default 0)")
    p.add_argument("--out", required=True, help="output file or directory")
    p.add_argument("--verbose", "-v", action="store_true")
    if model:
        p.add_argument("--model", required=True, help="APCK checkpoint")
        p.add_argument("--data", help="APTD dataset (else data.test from the config)")
        p.add_argument("--workers", type=int, default=1, help="processes; never changes output")
        p.add_argument("--limit", type=int, help="use only the first N examples")


def _attack_flags(p, suite=True):
    if suite:
        p.add_argument("--suite", choices=SUITE_NAMES,
                       help="attack preset; default = (T=100,r=30)+(T=1000,r=3)")
        p.add_argument("--budget", type=int,
                       help="forward-pass budget; sets T per scheme for equal cost")
    p.add_argument("--iterations", "-T", type=int)
    p.add_argument("--restarts", "-r", type=int)
    p.add_argument("--patch-side", type=int)
    p.add_argument("--center-side", type=int)
    p.add_argument("--step-size", type=float, help="signed-gradient step on patch values")
    if suite:
        p.add_argument("--stride", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="advpatch", description="Location-optimized adversarial patches.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-synth", help="write a synthetic shape dataset (APTD)")
    _common(p, model=False)
    p.add_argument("--per-class", type=int)
    p.add_argument("--classes", type=int)
    p.set_defaults(func=cmd_make_synth)

    p = sub.add_parser("train", help="train a classifier (normal / occlusion / adversarial)")
    _common(p, model=False)
    p.add_argument("--data", help="APTD training set (else data.train from the config)")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    _attack_flags(p, suite=False)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
            ("attack", cmd_attack, "attack every example; write a JSONL attack log"),
            ("eval", cmd_eval, "clean and robust test error"),
            ("heatmap", cmd_heatmap, "grids of final patch locations"),
            ("sweep-size", cmd_sweep_size, "robust test error per patch side"),
            ("sweep-ablation", cmd_sweep_ablation, "robust test error per (T, r)"),
            ("universal", cmd_universal, "targeted universal patch")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        _attack_flags(p)
        if name in ("eval", "heatmap"):
            p.add_argument("--attack-all", action="store_true",
                           help="also attack misclassified clean examples")
        p.set_defaults(func=func)
    sub.choices["sweep-size"].add_argument("--sides", type=_int_list, required=True)
    sub.choices["sweep-ablation"].add_argument("--iteration-grid", type=_int_list, required=True)
    sub.choices["sweep-ablation"].add_argument("--restart-grid", type=_int_list, required=True)
    sub.choices["universal"].add_argument("--target", type=int, required=True)
    sub.choices["universal"].add_argument("--held-out", type=int,
                                          help="images kept back for scoring (default N//3)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if getattr(args, "workers", 1) < 1:
        print("advpatch: error: --workers must be >= 1", file=sys.stderr)
        return 1
    try:
        args.func(args)
    except (ConfigError, InputError) as e:
        print(f"advpatch: configuration error: {e}", file=sys.stderr)
        return 1
    except (FormatError, OSError) as e:
        print(f"advpatch: I/O error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
