"""Command-line interface: synth, solve, gradcheck, eval.

Exit codes form a stable contract: 0 success, 1 check failure, 2 invalid
input, 3 numerical divergence.  Settings resolve as flags over config
file over built-in defaults; config files are plain ``key = value`` lines
and unknown keys are rejected.  ``GEOLOSS_THREADS`` caps the BLAS worker
pool (it must be set before numpy is first imported to take effect).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .errors import (
    EmptyMask,
    GeolossError,
    InvalidConfig,
    NonFiniteLoss,
    ResolutionMismatch,
)
from . import fileio
from .grids import InverseDepthMap, NormalMap, depth_from_inverse
from .gradcheck import run_gradcheck
from .losses import LossWeights
from .metrics import (
    build_mask,
    depth_metrics,
    format_depth_row,
    format_normal_row,
    normal_metrics,
)
from .solver import SolverConfig, solve
from .synth import render, scene_by_name

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INVALID_INPUT = 2
EXIT_DIVERGED = 3

# config-file keys accepted by the solve command, mapped to flag names
CONFIG_KEYS = {
    "lambda1": "lambda1",
    "lambda2": "lambda2",
    "lambda3": "lambda3",
    "lambda4": "lambda4",
    "lambda5": "lambda5",
    "lambda6": "lambda6",
    "lr": "lr",
    "iters": "iters",
    "levels": "levels",
    "seed": "seed",
    "dinv_init": "dinv_init",
    "dinv_max": "dinv_max",
    "alpha": "alpha",
    "beta": "beta",
    "tol": "tol",
}
INT_KEYS = {"iters", "levels", "seed"}


def _fail(message, code):
    print(f"error: {message}", file=sys.stderr)
    return code


def build_parser():
    parser = argparse.ArgumentParser(
        prog="geoloss",
        description="Multi-view geometry losses, solver, and evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser(
        "synth", help="render a synthetic instance with ground truth"
    )
    p_synth.add_argument("--scene", required=True,
                         help="scene name (wall, road, corridor)")
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument("--seed", type=int, default=None,
                         help="override the texture seed")

    p_solve = sub.add_parser(
        "solve", help="recover depth, normals and ego-motion for an instance"
    )
    p_solve.add_argument("--instance", required=True,
                         help="instance directory (from synth)")
    p_solve.add_argument("--out", required=True, help="output directory")
    p_solve.add_argument("--config", default=None,
                         help="key=value config file")
    for i in range(1, 7):
        p_solve.add_argument(f"--lambda{i}", type=float, default=None,
                             help=f"weight of loss term {i}")
    p_solve.add_argument("--lr", type=float, default=None,
                         help="initial learning rate (default 0.001)")
    p_solve.add_argument("--iters", type=int, default=None,
                         help="max iterations per level (default 2000)")
    p_solve.add_argument("--levels", type=int, default=None,
                         help="pyramid levels (default 3)")
    p_solve.add_argument("--seed", type=int, default=None,
                         help="solver seed (default 0)")
    p_solve.add_argument("--dinv-init", dest="dinv_init", type=float,
                         default=None, help="initial inverse depth")
    p_solve.add_argument("--dinv-max", dest="dinv_max", type=float,
                         default=None, help="inverse depth clamp")
    p_solve.add_argument("--alpha", type=float, default=None,
                         help="edge weight alpha (default 1)")
    p_solve.add_argument("--beta", type=float, default=None,
                         help="edge weight beta (default 1)")
    p_solve.add_argument("--tol", type=float, default=None,
                         help="relative plateau tolerance (default 1e-6)")

    p_grad = sub.add_parser(
        "gradcheck",
        help="verify analytic loss gradients against finite differences",
    )
    p_grad.add_argument("--seed", type=int, default=0,
                        help="base seed; three consecutive seeds are used")
    p_grad.add_argument("--tolerance", type=float, default=1e-4,
                        help="max relative error (default 1e-4)")

    p_eval = sub.add_parser(
        "eval", help="depth and normal metrics of a prediction directory"
    )
    p_eval.add_argument("--pred", required=True, help="prediction directory")
    p_eval.add_argument("--gt", required=True, help="ground-truth directory")
    p_eval.add_argument("--cap", type=float, default=80.0,
                        help="depth cap in meters (default 80)")
    p_eval.add_argument("--crop", default=None,
                        help="x0,y0,x1,y1 crop fractions (default full frame)")
    p_eval.add_argument("--median-scale", action="store_true",
                        help="median-scale predictions before depth metrics")
    p_eval.add_argument("--out", default=None,
                        help="metrics CSV path (default <pred>/metrics.csv)")
    return parser


def _load_config_file(path):
    values = {}
    raw = fileio.read_keyvalues(path)
    for key, text in raw.items():
        if key not in CONFIG_KEYS:
            raise InvalidConfig(f"unknown config key '{key}'")
        try:
            values[key] = int(text) if key in INT_KEYS else float(text)
        except ValueError as exc:
            raise InvalidConfig(f"bad value for '{key}': {text}") from exc
    return values


def _resolve_solver_config(args):
    settings = {}
    if args.config:
        settings.update(_load_config_file(args.config))
    for key in CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            settings[key] = flag

    defaults = LossWeights()
    weights = LossWeights(
        photometric=settings.get("lambda1", defaults.photometric),
        depth_normal=settings.get("lambda2", defaults.depth_normal),
        normal_direction=settings.get("lambda3", defaults.normal_direction),
        normal_smoothness=settings.get("lambda4", defaults.normal_smoothness),
        depth_consistency=settings.get("lambda5", defaults.depth_consistency),
        normal_consistency=settings.get(
            "lambda6", defaults.normal_consistency
        ),
    )
    return SolverConfig(
        learning_rate=settings.get("lr", 0.001),
        max_iterations=settings.get("iters", 2000),
        pyramid_levels=settings.get("levels", 3),
        weights=weights,
        convergence_tol=settings.get("tol", 1e-6),
        seed=settings.get("seed", 0),
        dinv_init=settings.get("dinv_init", 0.1),
        dinv_max=settings.get("dinv_max", 2.0),
        alpha=settings.get("alpha", 1.0),
        beta=settings.get("beta", 1.0),
    )


def cmd_synth(args):
    try:
        spec = scene_by_name(args.scene, texture_seed=args.seed)
    except KeyError as exc:
        return _fail(exc.args[0], EXIT_INVALID_INPUT)
    instance = render(spec)
    fileio.write_instance(args.out, instance)
    print(f"wrote instance '{spec.name}' to {args.out}")
    return EXIT_OK


def cmd_solve(args):
    try:
        cfg = _resolve_solver_config(args)
    except (InvalidConfig, ValueError) as exc:
        return _fail(str(exc), EXIT_INVALID_INPUT)
    try:
        instance = fileio.read_instance(args.instance)
    except (InvalidConfig, OSError) as exc:
        return _fail(f"cannot load instance: {exc}", EXIT_INVALID_INPUT)

    try:
        state, trace = solve(instance, cfg)
    except NonFiniteLoss as exc:
        return _fail(f"solve diverged: {exc}", EXIT_DIVERGED)
    except GeolossError as exc:
        return _fail(str(exc), EXIT_INVALID_INPUT)

    os.makedirs(args.out, exist_ok=True)
    fileio.write_pfm(os.path.join(args.out, fileio.DINV_FILE), state.dinv)
    fileio.write_pfm(os.path.join(args.out, fileio.NORMAL_FILE), state.normal)
    fileio.write_pose(os.path.join(args.out, fileio.POSE_FILE), state.pose())
    fileio.write_loss_trace_csv(
        os.path.join(args.out, fileio.TRACE_FILE), trace
    )
    total = trace[-1].total if trace else float("nan")
    print(
        f"solved {args.instance}: {state.iteration} iterations, "
        f"final total loss {total:.6g}"
    )
    return EXIT_OK


def cmd_gradcheck(args):
    seeds = (args.seed, args.seed + 1, args.seed + 2)
    results = run_gradcheck(seeds=seeds, tolerance=args.tolerance)
    failed = False
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        line = (
            f"{r.name:5s} {status} max_rel_err={r.max_rel_error:.3e} "
            f"probes={r.probes}"
        )
        if not r.passed:
            line += f" worst={r.worst_probe}"
            failed = True
        print(line)
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def _parse_crop(text):
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 4:
        raise InvalidConfig("crop must be x0,y0,x1,y1 fractions")
    return tuple(parts)


def _load_prediction(directory):
    dinv = InverseDepthMap(
        np.maximum(fileio.read_pfm(os.path.join(directory, fileio.DINV_FILE)), 0.0)
    )
    normal_path = os.path.join(directory, fileio.NORMAL_FILE)
    normal = None
    if os.path.exists(normal_path):
        normal = NormalMap(
            fileio._renormalize_normals(fileio.read_pfm(normal_path))
        )
    return dinv, normal


def cmd_eval(args):
    try:
        crop = _parse_crop(args.crop) if args.crop else (0.0, 0.0, 1.0, 1.0)
        pred_dinv, pred_normal = _load_prediction(args.pred)
        gt_dinv, gt_normal = _load_prediction(args.gt)
    except (InvalidConfig, OSError, ValueError) as exc:
        return _fail(str(exc), EXIT_INVALID_INPUT)

    pred_depth = depth_from_inverse(pred_dinv.values)
    gt_depth = depth_from_inverse(gt_dinv.values)
    try:
        if pred_depth.shape != gt_depth.shape:
            raise ResolutionMismatch(
                f"prediction {pred_depth.shape} vs gt {gt_depth.shape}"
            )
        mask = build_mask(gt_depth, cap=args.cap, crop=crop)
        dm = depth_metrics(
            pred_depth, gt_depth, mask, median_scale=args.median_scale
        )
        nm = None
        if pred_normal is not None and gt_normal is not None:
            nm = normal_metrics(pred_normal, gt_normal, mask)
    except (EmptyMask, ResolutionMismatch, GeolossError, ValueError) as exc:
        return _fail(str(exc), EXIT_INVALID_INPUT)

    print(format_depth_row(dm))
    if nm is not None:
        print(format_normal_row(nm))
    out = args.out or os.path.join(args.pred, fileio.METRICS_FILE)
    fileio.write_metrics_csv(out, depth=dm, normal=nm)
    print(f"wrote {out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "synth": cmd_synth,
        "solve": cmd_solve,
        "gradcheck": cmd_gradcheck,
        "eval": cmd_eval,
    }
    return handlers[args.command](args)


def console_main():
    sys.exit(main())
