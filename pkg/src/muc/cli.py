"""Command-line entry point (``muc``).

Subcommands share ``--config``, ``--seed``, ``--cameras`` and ``--out``.
The run directory given by ``--out`` (default: the config's ``out_dir``)
holds the asset, datasets, checkpoint and CSV reports::

    muc gen-data --config run.json
    muc train    --config run.json
    muc eval     --config run.json --cameras 1,2,3,4
    muc fuse     --config run.json --scene test-00000 --cameras 2
    muc export   --config run.json --scene test-00000
    muc gradcheck

Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 IO error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError
from .body_model import AssetError, load_asset, save_asset
from .camera import BehindCameraError
from .config import RunConfig, load_config, save_config
from .metrics import AlignmentDegenerateError, write_reports_csv
from .pipeline import (MucModel, TrainingNumericError, export_obj, make_asset, run_eval_sweep, run_gradcheck,
                       run_inference, run_training, write_gradcheck_csv, write_sweep_csv)
from .synth import DatasetError, SceneSamplingError, generate_dataset, load_dataset, save_dataset

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
log = logging.getLogger("muc")


class UsageError(ValueError):
    pass


def _run_dir(args, cfg: RunConfig) -> Path:
    return Path(args.out if args.out else cfg.out_dir)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _asset(run: Path, cfg: RunConfig):
    path = run / "asset.muca"
    return load_asset(path) if path.exists() else make_asset(cfg)


def _count(args, default: int) -> int:
    if not args.cameras:
        return default
    try:
        k = int(args.cameras)
    except ValueError as e:
        raise UsageError(f"--cameras must be an integer here, got {args.cameras!r}") from e
    if k < 1:
        raise UsageError("--cameras must be positive")
    return k


def _k_list(args, default: int) -> list[int]:
    if not args.cameras:
        return list(range(1, default + 1))
    try:
        ks = [int(x) for x in str(args.cameras).split(",")]
    except ValueError as e:
        raise UsageError(f"--cameras must be a comma-separated list of integers, got {args.cameras!r}") from e
    if not ks or min(ks) < 1:
        raise UsageError("--cameras values must be positive")
    return ks


def _find_scene(run: Path, asset, scene_id: str | None):
    scenes = load_dataset(run / "test.jsonl", asset)
    if not scenes:
        raise DatasetError("test set is empty")
    if scene_id is None:
        return scenes[0]
    for s in scenes:
        if s.scene_id == scene_id:
            return s
    raise UsageError(f"no scene {scene_id!r} in the test set")


def cmd_gen_data(args, cfg: RunConfig) -> int:
    run = _run_dir(args, cfg)
    run.mkdir(parents=True, exist_ok=True)
    asset = make_asset(cfg)
    save_asset(asset, run / "asset.muca")
    save_config(cfg, run / "config.json")
    n = _count(args, cfg.data.n_cameras)
    d = cfg.data
    base = d.seed + cfg.seed * 1_000_000
    for split, count, offset in (("train", d.train_scenes, 0), ("val", d.val_scenes, 100_000),
                                 ("test", d.test_scenes, 200_000)):
        scenes = generate_dataset(asset, count, n, cfg.noise, base + offset, split)
        save_dataset(scenes, run / f"{split}.jsonl", asset)
        log.info("wrote %d %s scenes", count, split)
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    run = _run_dir(args, cfg)
    asset = _asset(run, cfg)
    train = load_dataset(run / "train.jsonl", asset)
    val = load_dataset(run / "val.jsonl", asset)
    res = run_training(cfg, train, val, asset, run, log=log.info)
    log.info("best validation PA-MPJPE %.3f mm at epoch %d; checkpoint %s", res.best_val, res.best_epoch,
             res.checkpoint)
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    run = _run_dir(args, cfg)
    asset = _asset(run, cfg)
    model, _ = MucModel.load(run / "checkpoint.mucw", asset)
    test = load_dataset(run / "test.jsonl", asset)
    per_scene = []
    rows = run_eval_sweep(model, test, _k_list(args, cfg.data.n_cameras), per_scene)
    write_sweep_csv(run / "eval_sweep.csv", rows)
    write_reports_csv(run / "eval_scenes.csv", per_scene)
    for r in rows:
        log.info("k=%d PA-MPJPE %.3f (uniform %.3f) PA-MPVPE %.3f (JRN only %.3f)", r.n_cameras,
                 r.full.pa_mpjpe, r.uniform.pa_mpjpe, r.full.pa_mpvpe, r.jrn_only.pa_mpvpe)
    return EXIT_OK


def cmd_fuse(args, cfg: RunConfig) -> int:
    run = _run_dir(args, cfg)
    asset = _asset(run, cfg)
    model, _ = MucModel.load(run / "checkpoint.mucw", asset)
    scene = _find_scene(run, asset, args.scene)
    k = _count(args, scene.n_cameras)
    params, body = run_inference(model, scene, k)
    out = run / f"fused_{scene.scene_id}_k{k}.obj"
    export_obj(body, asset, out)
    np.savez(run / f"fused_{scene.scene_id}_k{k}.npz", p_body=params.p_body, p_hand=params.p_hand,
             p_shape=params.p_shape, p_face=params.p_face)
    log.info("fused %d views of %s -> %s", k, scene.scene_id, out)
    return EXIT_OK


def cmd_export(args, cfg: RunConfig) -> int:
    from .body_model import lbs_forward
    run = _run_dir(args, cfg)
    run.mkdir(parents=True, exist_ok=True)
    asset = _asset(run, cfg)
    if args.scene is None and not (run / "test.jsonl").exists():
        from .body_model import ParamSet
        body, name = lbs_forward(asset, ParamSet.zeros(asset)), "template"
    else:
        scene = _find_scene(run, asset, args.scene)
        body, name = lbs_forward(asset, scene.gt_params), f"gt_{scene.scene_id}"
    export_obj(body, asset, run / f"{name}.obj")
    log.info("wrote %s", run / f"{name}.obj")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    entries = run_gradcheck(cfg, seed=cfg.seed)
    run = _run_dir(args, cfg)
    run.mkdir(parents=True, exist_ok=True)
    write_gradcheck_csv(run / "gradcheck.csv", entries)
    for e in entries:
        log.info("%-24s %.3e %s", e.block, e.max_rel_error, "ok" if e.passed else "FAIL")
    return EXIT_OK if all(e.passed for e in entries) else EXIT_NUMERIC


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "fuse": cmd_fuse, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "export": cmd_export}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="muc", description="Multi-camera body fusion pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--cameras", help="camera count (gen-data, fuse) or comma-separated list (eval)")
        p.add_argument("--out", help="run directory (default: config out_dir)")
        if name in ("fuse", "export"):
            p.add_argument("--scene", help="test scene id (default: first test scene)")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except (TrainingNumericError, NonFiniteError, BehindCameraError, SceneSamplingError,
            AlignmentDegenerateError) as e:
        log.error("numeric failure: %s", e)
        return EXIT_NUMERIC
    except (OSError, AssetError) as e:
        log.error("io error: %s", e)
        return EXIT_IO
    except ValueError as e:
        # ConfigError, UsageError and out-of-range options such as k > cameras
        log.error("config error: %s", e)
        return EXIT_CONFIG


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
