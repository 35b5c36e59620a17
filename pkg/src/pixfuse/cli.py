"""Command-line entry point.

Subcommands: synth, pretrain, pseudolabel, probe, selftrain, eval,
export-map, gradcheck.  Every command validates its configuration before
touching data; all randomness flows from --seed (or the config seeds);
logs go to stderr and artifacts to --out.  Exit codes: 0 success,
1 validation error, 2 runtime failure.  PIXFUSE_DETERMINISTIC=1 forces
fully deterministic execution.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .errors import ConfigError, FormatError, PixfuseError
from .pipeline import (
    evaluate, linear_probe, pretrain, pseudo_label_scene, selftrain,
    write_metrics_csv, write_report_json,
)
from .pseudolabel import save_pseudo_labels
from .scenes import (
    Scene, generate_synthetic, load_scene, save_scene,
    split_dataset, write_legend, write_pgm, write_ppm,
)
from .spectral import compute_indices

log = logging.getLogger("pixfuse")


def _load_scenes_dir(path: Path) -> list[Scene]:
    if not path.is_dir():
        raise ConfigError(f"scene directory {path} does not exist")
    dirs = sorted(p for p in path.iterdir() if (p / "manifest.json").is_file())
    if not dirs:
        raise ConfigError(f"no scene directories under {path}")
    return [load_scene(d) for d in dirs]


def _resolve_scenes(args, cfg) -> list[Scene]:
    data_dir = getattr(args, "data", None) or cfg["data"]["dir"]
    if data_dir:
        return _load_scenes_dir(Path(data_dir))
    synth = cfg["data"]["synth"]
    seed = args.seed if args.seed is not None else synth["seed"]
    return generate_synthetic(seed=seed, n_scenes=synth["n"], size=synth["size"],
                              cloud_fraction=synth["cloud_fraction"])


def _splits(scenes, cfg):
    groups = split_dataset(scenes, cfg["data"]["split_seed"],
                           cfg["data"]["split_fractions"])
    while len(groups) < 3:
        groups.append([])
    return groups[0], groups[1], groups[2]  # train, probe, eval


def cmd_synth(args) -> int:
    out = Path(args.out)
    scenes = generate_synthetic(seed=args.seed if args.seed is not None else 7,
                                n_scenes=args.n, size=args.size,
                                cloud_fraction=args.cloud_fraction)
    for scene in scenes:
        save_scene(scene, out / scene.id)
    log.info("wrote %d scenes to %s", len(scenes), out)
    return 0


def cmd_pretrain(args) -> int:
    cfg = cfgmod.load_config(args.config)
    net_cfg = cfgmod.network_config(cfg, fusion_mode=args.fusion, modality=args.modality)
    loss_cfg = cfgmod.loss_config(cfg)
    train_cfg = cfgmod.train_config(cfg, "pretrain", seed=args.seed, epochs=args.epochs)
    scenes = _resolve_scenes(args, cfg)
    train, _, _ = _splits(scenes, cfg)
    result = pretrain(train or scenes, net_cfg, loss_cfg, train_cfg, args.out)
    log.info("final checkpoint: %s", result.checkpoint_dir)
    return 0


def cmd_pseudolabel(args) -> int:
    cfg = cfgmod.load_config(args.config)
    pcfg = cfgmod.pseudo_config(cfg)
    data_dir = Path(args.data)
    scenes = _load_scenes_dir(data_dir)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    dirs = sorted(p for p in data_dir.iterdir() if (p / "manifest.json").is_file())
    for scene, sdir in zip(scenes, dirs):
        labels = pseudo_label_scene(scene, pcfg, rng, sparsify_labels=not args.dense)
        save_pseudo_labels(sdir, labels)
    log.info("pseudo labels written for %d scenes", len(scenes))
    return 0


def cmd_probe(args) -> int:
    cfg = cfgmod.load_config(args.config)
    train_cfg = cfgmod.train_config(cfg, "linear", seed=args.seed, epochs=args.epochs)
    scenes = _resolve_scenes(args, cfg)
    _, probe_pool, eval_scenes = _splits(scenes, cfg)
    n_labeled = args.labels or cfg["eval"]["probe_scenes"]
    pool = probe_pool or scenes
    if len(pool) < n_labeled:
        raise ConfigError(f"probe pool has {len(pool)} scenes, need {n_labeled}")
    result = linear_probe(args.checkpoint, pool[:n_labeled],
                          eval_scenes or pool[n_labeled:] or pool, train_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "probe_metrics.csv", [{
        "epoch": train_cfg.epochs, "phase": "linear",
        "aa": result.metrics.aa, "miou": result.metrics.miou,
    }])
    write_report_json(out / "probe_report.json", result.metrics,
                      scenes[0].class_scheme)
    log.info("probe AA %.4f mIoU %.4f", result.metrics.aa, result.metrics.miou)
    return 0


def cmd_selftrain(args) -> int:
    cfg = cfgmod.load_config(args.config)
    scenes = _resolve_scenes(args, cfg)
    train, _, eval_scenes = _splits(scenes, cfg)
    result = selftrain(
        args.checkpoint, train or scenes, eval_scenes or scenes,
        cfgmod.pseudo_config(cfg),
        cfgmod.train_config(cfg, "selftrain1", seed=args.seed),
        cfgmod.train_config(cfg, "selftrain2-finetune", seed=args.seed),
        out_dir=args.out,
    )
    log.info("step1 mIoU %.4f step2 mIoU %.4f",
             result.step1_metrics.miou, result.step2_metrics.miou)
    return 0


def cmd_eval(args) -> int:
    scenes = _load_scenes_dir(Path(args.data))
    preds = []
    for scene in scenes:
        pred_path = Path(args.pred) / f"{scene.id}.bin"
        raw = pred_path.read_bytes()
        expected = scene.height * scene.width
        if len(raw) != expected:
            raise FormatError(f"{pred_path}: {len(raw)} bytes, expected {expected}")
        preds.append(np.frombuffer(raw, dtype=np.uint8).reshape(scene.height, scene.width))
    result = evaluate(preds, [s.gt for s in scenes], scenes[0].class_scheme)
    write_report_json(Path(args.out), result, scenes[0].class_scheme)
    log.info("AA %.4f mIoU %.4f", result.aa, result.miou)
    return 0


def cmd_export_map(args) -> int:
    scene = load_scene(args.scene)
    if args.labels == "gt":
        if scene.gt is None:
            raise ConfigError("scene has no ground truth to export")
        labels = scene.gt
    else:
        raw = Path(args.labels).read_bytes()
        expected = scene.height * scene.width
        if len(raw) != expected:
            raise FormatError(f"{args.labels}: {len(raw)} bytes, expected {expected}")
        labels = np.frombuffer(raw, dtype=np.uint8).reshape(scene.height, scene.width)
    out = Path(args.out)
    write_ppm(out, labels, scene.class_scheme)
    write_legend(out.with_suffix(".legend.txt"), scene.class_scheme)
    if args.indices:
        idx = compute_indices(scene)
        for name, arr, lo, hi in (("ndvi", idx.ndvi, -1, 1), ("ndwi", idx.ndwi, -1, 1),
                                  ("bi", idx.bi, -1, 1), ("bs", idx.bs, -30, 0)):
            write_pgm(out.with_suffix(f".{name}.pgm"), arr, lo, hi)
    log.info("wrote %s", out)
    return 0


def cmd_gradcheck(args) -> int:
    from .tools import composite_gradcheck
    report = composite_gradcheck(fusion_mode=args.fusion, seed=args.seed or 0,
                                 n_samples=args.samples, eps=args.eps, tol=args.tol)
    payload = {
        "fusion_mode": args.fusion, "max_rel_err": report.max_rel_err,
        "mean_rel_err": report.mean_rel_err, "n_checked": report.n_checked,
        "passed": report.passed, "worst_param": report.worst_param,
    }
    Path(args.out).write_text(json.dumps(payload, indent=1, sort_keys=True))
    log.info("gradcheck %s: max rel err %.3g (%s)", args.fusion,
             report.max_rel_err, "pass" if report.passed else "FAIL")
    return 0 if report.passed else 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pixfuse",
        description="Self-supervised SAR-optical fusion and land-cover mapping toolkit",
    )
    parser.add_argument("--workers", type=int, default=None,
                        help="torch intra-op threads (ignored in deterministic mode)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene corpus")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--n", type=int, required=True, help="number of scenes")
    p.add_argument("--size", type=int, default=64, help="tile size (multiple of 8)")
    p.add_argument("--cloud-fraction", type=float, default=0.0, dest="cloud_fraction")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    p.add_argument("--config", default=None, help="JSON run config")
    p.add_argument("--fusion", choices=["pixef", "pixif", "pixlf", "mcl"], default=None)
    p.add_argument("--modality", choices=["both", "sar", "opt"], default=None)
    p.add_argument("--data", default=None, help="scene directory (else synthetic)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("pseudolabel", help="write rule-based pseudo labels into scene dirs")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dense", action="store_true",
                   help="skip the per-class cap (keep every fired rule)")
    p.set_defaults(fn=cmd_pseudolabel)

    p = sub.add_parser("probe", help="linear protocol on frozen features")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--labels", type=int, default=None,
                   help="number of labeled scenes for the probe")
    p.add_argument("--data", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("selftrain", help="two-step self-training land-cover mapping")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_selftrain)

    p = sub.add_parser("eval", help="evaluate dense label maps against ground truth")
    p.add_argument("--data", required=True, help="scene directory with gt")
    p.add_argument("--pred", required=True, help="directory of <scene-id>.bin label maps")
    p.add_argument("--out", required=True, help="JSON report path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("export-map", help="export a label map as P6 PPM (+legend)")
    p.add_argument("--scene", required=True)
    p.add_argument("--labels", required=True,
                   help="u8 label map .bin, or 'gt' for the scene's ground truth")
    p.add_argument("--indices", action="store_true", help="also export PGM index maps")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_map)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training loss")
    p.add_argument("--fusion", choices=["pixef", "pixif", "pixlf", "mcl"], default="pixif")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    if args.workers is not None and args.workers > 0:
        torch.set_num_threads(args.workers)
    try:
        return args.fn(args)
    except (ConfigError, FormatError) as exc:
        log.error("%s", exc)
        return 1
    except PixfuseError as exc:
        log.error("runtime failure: %s", exc)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
