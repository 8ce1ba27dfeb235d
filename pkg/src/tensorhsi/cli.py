"""Experiment driver.

Usage::

    python -m tensorhsi decompose|train|evaluate|gradcheck --config cfg.json
        [--out DIR] [--checkpoint PATH] [--seed N]

Exit codes: 0 success, 1 gradient check failure, 2 bad config, 3 data error,
4 numeric divergence, 5 checkpoint/config mismatch.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import archive, config, hsi_data, metrics, sdtn, trn
from .archive import ArchiveError
from .config import ConfigError, ExperimentConfig
from .hsi_data import DataError
from .sdtn import DivergenceError
from .tensor_core import rank_matrix

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGE, EXIT_CHECKPOINT = 0, 1, 2, 3, 4, 5

LOG_NAME = "train_log.jsonl"
CHECKPOINT_NAME = "checkpoint.zip"


class CheckpointMismatch(Exception):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def load_data(cfg: ExperimentConfig) -> hsi_data.HsiScene:
    ds = cfg.dataset
    if ds.synthetic is not None:
        scene = hsi_data.synthetic_scene(**ds.synthetic)
    else:
        scene = hsi_data.load_scene(ds.cube, ds.labels, ds.n_classes)
    if ds.normalize is not None:
        scene = hsi_data.normalize(scene, ds.normalize)
    return scene


def _training_set(cfg: ExperimentConfig, scene: hsi_data.HsiScene):
    tcfg = cfg.trn_config(scene.shape[2], scene.n_classes)
    split = hsi_data.make_split(scene, cfg.n_per_class, cfg.seed)
    batch = trn.TrnBatch(hsi_data.extract_patches(scene, split.train, tcfg.patch_size),
                         split.train_labels)
    return tcfg, split, batch


# -- commands --------------------------------------------------------------------


def cmd_decompose(cfg: ExperimentConfig, out_dir: str) -> dict:
    """Fit the decomposition to the configured patches (or the whole cube)."""
    scene = load_data(cfg)
    dc = cfg.decompose
    if dc.patches is None:
        targets = [("cube", scene.cube)]
    else:
        p = cfg.trn_config(scene.shape[2], scene.n_classes).patch_size
        targets = [(f"patch_{r}_{c}", hsi_data.extract_patch(scene, r, c, p)) for r, c in dc.patches]
    hp = cfg.hyperparams.replace(step_mode=dc.step_mode, beta=0.0)
    fits, arrays = [], {}
    for name, X in targets:
        ranks = rank_matrix(X.ndim, dc.rank)
        glr = sdtn.clip_glr_ranks(X.shape, ranks, dc.glr_rank)
        state = sdtn.fit(X, ranks, glr, hp, n_starts=dc.n_starts, probe_iters=dc.probe_iters)
        terms = sdtn.sdtn_loss_terms(state, X, hp=hp)
        fits.append({
            "target": name,
            "shape": list(X.shape),
            "ranks": state.ranks.tolist(),
            "glr_ranks": state.glr_ranks,
            "iterations": state.iter,
            "loss_history_length": len(state.loss_history),
            "initial_loss": state.loss_history[0],
            "terms": terms,
            "relative_error": sdtn.relative_error(state, X),
        })
        arrays.update({f"{name}.{k}": v for k, v in archive.state_arrays(state).items()})
    report = {"command": "decompose", "config_digest": archive.digest(cfg.canonical()),
              "seed": cfg.seed, "fits": fits}
    archive.save(os.path.join(out_dir, "factors.zip"), "factors", arrays,
                 {"targets": [f["target"] for f in fits]})
    archive.atomic_write(os.path.join(out_dir, "decompose_report.json"), _dump(report))
    return report


def cmd_train(cfg: ExperimentConfig, out_dir: str) -> dict:
    scene = load_data(cfg)
    tcfg, split, batch = _training_set(cfg, scene)
    trained, log = trn.train(batch, tcfg)
    lines = "".join(json.dumps(r, sort_keys=True, allow_nan=False) + "\n" for r in log)
    meta = {"experiment_digest": archive.digest(cfg.canonical()), "seed": cfg.seed,
            "train": [list(rc) for rc in split.train]}
    archive.save_trained(os.path.join(out_dir, CHECKPOINT_NAME), trained, meta)
    archive.atomic_write(os.path.join(out_dir, LOG_NAME), lines)
    return log[-1]


def cmd_evaluate(cfg: ExperimentConfig, out_dir: str, checkpoint: str | None) -> dict:
    path = checkpoint or os.path.join(out_dir, CHECKPOINT_NAME)
    try:
        trained, meta = archive.load_trained(path)
    except ArchiveError as e:
        raise CheckpointMismatch(str(e)) from e
    if meta.get("experiment_digest") != archive.digest(cfg.canonical()):
        raise CheckpointMismatch(f"checkpoint {path} was trained with a different config")
    scene = load_data(cfg)
    split = hsi_data.make_split(scene, cfg.n_per_class, cfg.seed)
    labels = trn.predict_map(trained, scene.cube)
    rows = np.array([r for r, _ in split.test], dtype=np.int64)
    cols = np.array([c for _, c in split.test], dtype=np.int64)
    cm = metrics.accumulate(labels[rows, cols], split.test_labels, scene.n_classes)
    doc = metrics.report(cm, meta["experiment_digest"], cfg.seed)
    archive.atomic_write(os.path.join(out_dir, "metrics.json"), metrics.report_json(doc))
    archive.atomic_write(os.path.join(out_dir, "map.ppm"), metrics.render_map(labels))
    return doc


def cmd_gradcheck(cfg: ExperimentConfig | None, out_dir: str | None, seed: int) -> dict:
    from .gradcheck import run_suites

    gc = cfg.gradcheck if cfg is not None else config.GradcheckConfig()
    results = run_suites(gc.suites, gc.instances, seed)
    doc = {
        "command": "gradcheck",
        "seed": seed,
        "passed": all(r.passed for r in results),
        "suites": [{"name": r.name, "max_rel_error": r.max_rel_error, "tol": r.tol,
                    "instances": r.instances, "passed": r.passed} for r in results],
    }
    if out_dir is not None:
        archive.atomic_write(os.path.join(out_dir, "gradcheck.json"), _dump(doc))
    return doc


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tensorhsi", description=__doc__.split("\n")[0])
    ap.add_argument("command", choices=["decompose", "train", "evaluate", "gradcheck"])
    ap.add_argument("--config", help="experiment JSON (optional for gradcheck)")
    ap.add_argument("--out", help="output directory (overrides out_dir)")
    ap.add_argument("--checkpoint", help="checkpoint for evaluate")
    ap.add_argument("--seed", type=int, help="overrides the config seed")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    try:
        cfg = config.load(args.config) if args.config else None
        if cfg is None and args.command != "gradcheck":
            raise ConfigError(f"{args.command} needs --config")
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("seed must fit in an unsigned 64-bit integer")
            if cfg is not None:
                cfg = cfg.with_seed(args.seed)
        out_dir = args.out or (cfg.out_dir if cfg is not None else None)
        if args.command == "decompose":
            result = cmd_decompose(cfg, out_dir)
        elif args.command == "train":
            result = cmd_train(cfg, out_dir)
        elif args.command == "evaluate":
            result = cmd_evaluate(cfg, out_dir, args.checkpoint)
        else:
            seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
            result = cmd_gradcheck(cfg, out_dir, seed)
            for s in result["suites"]:
                print(f"{'PASS' if s['passed'] else 'FAIL'} {s['name']} "
                      f"max_rel_error={s['max_rel_error']:.3e}")
            return EXIT_OK if result["passed"] else EXIT_GRADCHECK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGE
    except CheckpointMismatch as e:
        print(f"checkpoint mismatch: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ValueError as e:
        # remaining validation failures come from data-dependent checks
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
