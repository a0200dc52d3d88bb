"""Variational recovery of inverse depth, normals, and ego-motion.

The solver performs Adam descent directly on per-pixel geometry variables
(no learned predictor) under the weighted six-term objective, with a
coarse-to-fine pyramid.  A training instance consists of two stereo
pairs; the reference (left, t) maps are the primary output, and the
previous frame's maps are optimized as auxiliary variables so that the
temporal consistency terms compare two independently photometrically
constrained estimates, mirroring a predictor that sees both frames.  The
auxiliary frame contributes its own stereo-photometric and regularizer
terms, folded into the same six loss columns with the same weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from .camera import Intrinsics, RigidTransform, pixel_rays, se3_exp
from .errors import GridTooSmall, NonFiniteLoss
from .grids import (
    ImageGrid,
    InverseDepthMap,
    NormalMap,
    normalize_vectors,
    orient_camera_facing,
    sample_bilinear,
)
from .losses import (
    Gradients,
    LossReport,
    LossWeights,
    depth_normal_consistency_loss,
    normal_direction_loss,
    normal_from_depth,
    normal_smoothness_loss,
    stereo_photometric_loss,
    total_loss,
)
from .synth import OracleInstance

# Pyramid levels may not shrink an image below this side length.
MIN_LEVEL_SIDE = 16


@dataclass(frozen=True)
class SolverConfig:
    """Optimization settings; defaults follow the reference training setup
    (Adam 0.9/0.999/1e-8, learning rate 1e-3 dropped tenfold on plateau)."""

    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    max_iterations: int = 2000
    pyramid_levels: int = 3
    weights: LossWeights = field(default_factory=LossWeights)
    convergence_tol: float = 1e-6
    convergence_window: int = 50
    seed: int = 0
    dinv_init: float = 0.1
    dinv_max: float = 2.0
    alpha: float = 1.0
    beta: float = 1.0
    optimize_depth: bool = True
    optimize_normals: bool = True
    optimize_pose: bool = True
    init_from_oracle: bool = False
    max_lr_drops: int = 2

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ValueError("adam betas must lie in [0, 1)")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")


@dataclass(frozen=True)
class TraceRow:
    """One optimizer iteration: raw term sums, weighted total, and lr."""

    iteration: int
    values: tuple
    total: float
    learning_rate: float


@dataclass
class SolveState:
    """Mutable optimization state for one instance.

    ``dinv``/``normal`` are the reference-frame estimates (the primary
    output); ``dinv_prev``/``normal_prev`` the auxiliary previous-frame
    estimates; ``xi`` the frame-t to frame-(t-1) twist.  Normals are
    re-normalized and re-oriented camera-facing after every step, inverse
    depths clamped to [0, dinv_max].
    """

    dinv: np.ndarray
    normal: np.ndarray
    dinv_prev: np.ndarray
    normal_prev: np.ndarray
    xi: np.ndarray
    moments: dict
    iteration: int = 0
    adam_step: int = 0
    learning_rate: float = 0.001
    lr_drops: int = 0
    last_drop_iteration: int = 0
    loss_history: List[float] = field(default_factory=list)
    trace: List[TraceRow] = field(default_factory=list)
    last_report: Optional[LossReport] = None

    def pose(self) -> RigidTransform:
        return se3_exp(self.xi)


def _zero_moments(height, width):
    shapes = {
        "dinv": (height, width),
        "normal": (height, width, 3),
        "dinv_prev": (height, width),
        "normal_prev": (height, width, 3),
        "xi": (6,),
    }
    return {k: (np.zeros(s), np.zeros(s)) for k, s in shapes.items()}


def initialize(instance: OracleInstance, cfg: SolverConfig) -> SolveState:
    """Deterministic starting state: uniform inverse depth, fronto-parallel
    normals, zero motion (or the oracle maps when requested)."""
    height, width = instance.height, instance.width
    if cfg.init_from_oracle:
        if instance.gt_dinv is None or instance.gt_normal is None:
            raise ValueError("instance carries no oracle maps to init from")
        dinv = instance.gt_dinv.values.copy()
        normal = instance.gt_normal.vectors.copy()
        if instance.gt_dinv_prev is not None:
            dinv_prev = instance.gt_dinv_prev.values.copy()
            normal_prev = instance.gt_normal_prev.vectors.copy()
        else:
            dinv_prev = dinv.copy()
            normal_prev = normal.copy()
    else:
        dinv = np.full((height, width), cfg.dinv_init)
        normal = np.zeros((height, width, 3))
        normal[..., 2] = -1.0
        dinv_prev = dinv.copy()
        normal_prev = normal.copy()
    return SolveState(
        dinv=dinv,
        normal=normal,
        dinv_prev=dinv_prev,
        normal_prev=normal_prev,
        xi=np.zeros(6),
        moments=_zero_moments(height, width),
        learning_rate=cfg.learning_rate,
    )


def _objective(state: SolveState, instance: OracleInstance,
               cfg: SolverConfig) -> Tuple[LossReport, Gradients]:
    """Six-term objective over both reference frames of the instance.

    The reference frame contributes all six terms; the previous frame
    contributes its stereo-photometric and regularizer terms (no temporal
    re-count), accumulated into the same columns with the same weights.
    """
    w = cfg.weights
    dinv = InverseDepthMap(state.dinv)
    normal = NormalMap(state.normal)
    dinv_prev = InverseDepthMap(state.dinv_prev)
    normal_prev = NormalMap(state.normal_prev)

    report, grads = total_loss(
        instance.left_t,
        instance.right_t,
        instance.left_prev,
        dinv,
        normal,
        dinv_prev,
        normal_prev,
        instance.intrinsics,
        instance.baseline,
        state.pose(),
        w,
        cfg.alpha,
        cfg.beta,
    )

    values = list(report.values)
    counts = list(report.counts)
    if grads.d_dinv_prev is None:
        grads.d_dinv_prev = np.zeros_like(state.dinv_prev)
        grads.d_normal_prev = np.zeros_like(state.normal_prev)

    if w.photometric > 0.0:
        v, g, m = stereo_photometric_loss(
            instance.left_prev,
            instance.right_prev,
            dinv_prev,
            instance.intrinsics,
            instance.baseline,
        )
        values[0] += v
        counts[0] += m.count
        grads.d_dinv_prev += w.photometric * g.d_dinv
    if w.depth_normal > 0.0:
        v, g = depth_normal_consistency_loss(
            dinv_prev, normal_prev, instance.left_prev,
            instance.intrinsics, cfg.alpha, cfg.beta,
        )
        values[1] += v
        counts[1] += report.counts[1]
        grads.d_dinv_prev += w.depth_normal * g.d_dinv
        grads.d_normal_prev += w.depth_normal * g.d_normal
    if w.normal_direction > 0.0:
        approx = normal_from_depth(dinv_prev, instance.intrinsics)
        v, g = normal_direction_loss(normal_prev, approx)
        values[2] += v
        counts[2] += report.counts[2]
        grads.d_normal_prev += w.normal_direction * g.d_normal
    if w.normal_smoothness > 0.0:
        v, g = normal_smoothness_loss(normal_prev, instance.left_prev)
        values[3] += v
        counts[3] += report.counts[3]
        grads.d_normal_prev += w.normal_smoothness * g.d_normal

    return LossReport.build(values, counts, w), grads


def _adam_update(state: SolveState, name: str, grad: np.ndarray,
                 cfg: SolverConfig):
    m, v = state.moments[name]
    m *= cfg.adam_beta1
    m += (1.0 - cfg.adam_beta1) * grad
    v *= cfg.adam_beta2
    v += (1.0 - cfg.adam_beta2) * grad * grad
    m_hat = m / (1.0 - cfg.adam_beta1**state.adam_step)
    v_hat = v / (1.0 - cfg.adam_beta2**state.adam_step)
    return state.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_epsilon)


def _project_state(state: SolveState, instance: OracleInstance,
                   cfg: SolverConfig):
    rays = pixel_rays(instance.width, instance.height, instance.intrinsics)
    np.clip(state.dinv, 0.0, cfg.dinv_max, out=state.dinv)
    np.clip(state.dinv_prev, 0.0, cfg.dinv_max, out=state.dinv_prev)
    state.normal = orient_camera_facing(
        normalize_vectors(state.normal), rays
    )
    state.normal_prev = orient_camera_facing(
        normalize_vectors(state.normal_prev), rays
    )


def step(state: SolveState, instance: OracleInstance,
         cfg: SolverConfig) -> SolveState:
    """One Adam update of every unfrozen variable block, then projection.

    Raises :class:`NonFiniteLoss` when the objective or its gradients stop
    being finite.
    """
    report, grads = _objective(state, instance, cfg)
    if not np.isfinite(report.total) or not grads.all_finite():
        raise NonFiniteLoss(
            f"non-finite objective at iteration {state.iteration}",
            iteration=state.iteration,
        )

    state.adam_step += 1
    if cfg.optimize_depth:
        state.dinv -= _adam_update(state, "dinv", grads.d_dinv, cfg)
        state.dinv_prev -= _adam_update(
            state, "dinv_prev", grads.d_dinv_prev, cfg
        )
    if cfg.optimize_normals:
        state.normal -= _adam_update(state, "normal", grads.d_normal, cfg)
        state.normal_prev -= _adam_update(
            state, "normal_prev", grads.d_normal_prev, cfg
        )
    if cfg.optimize_pose:
        state.xi = state.xi - _adam_update(state, "xi", grads.d_xi, cfg)
    _project_state(state, instance, cfg)

    state.loss_history.append(report.total)
    state.trace.append(
        TraceRow(state.iteration, report.values, report.total,
                 state.learning_rate)
    )
    state.last_report = report
    state.iteration += 1
    return state


def _plateaued(state: SolveState, cfg: SolverConfig, level_start: int):
    """Windowed moving averages show no meaningful loss decrease.

    Point samples of an L1 objective under Adam oscillate, so the plateau
    test compares the means of the two most recent windows.
    """
    window = cfg.convergence_window
    hist = state.loss_history
    anchor = max(level_start, state.last_drop_iteration)
    if len(hist) - anchor < 2 * window:
        return False
    recent = float(np.mean(hist[-window:]))
    previous = float(np.mean(hist[-2 * window : -window]))
    return (previous - recent) < cfg.convergence_tol * max(
        abs(previous), 1e-12
    )


def _box_downsample(data):
    """2x2 box filter; trailing odd row/column is dropped."""
    h, w = data.shape[0] // 2 * 2, data.shape[1] // 2 * 2
    d = data[:h, :w]
    return 0.25 * (d[0::2, 0::2] + d[1::2, 0::2] + d[0::2, 1::2] + d[1::2, 1::2])


def _half_intrinsics(intr: Intrinsics) -> Intrinsics:
    # pixel centers shift by half a pixel when 2x2 blocks merge
    return Intrinsics(
        fx=intr.fx * 0.5,
        fy=intr.fy * 0.5,
        cx=(intr.cx - 0.5) * 0.5,
        cy=(intr.cy - 0.5) * 0.5,
    )


def downsample_instance(instance: OracleInstance, level: int) -> OracleInstance:
    """Instance at pyramid level ``level`` (0 = identity): images are 2x2
    box filtered per level and the calibration is halved with the
    half-pixel center correction.  Oracle maps are dropped at coarse
    levels."""
    if level < 0:
        raise ValueError("level must be >= 0")
    if level == 0:
        return instance
    out = instance
    for _ in range(level):
        new_w, new_h = out.width // 2, out.height // 2
        if new_w < MIN_LEVEL_SIDE or new_h < MIN_LEVEL_SIDE:
            raise GridTooSmall(
                f"downsampling to {new_w}x{new_h} goes below "
                f"{MIN_LEVEL_SIDE}x{MIN_LEVEL_SIDE}"
            )
        out = OracleInstance(
            left_t=ImageGrid(_box_downsample(out.left_t.data)),
            right_t=ImageGrid(_box_downsample(out.right_t.data)),
            left_prev=ImageGrid(_box_downsample(out.left_prev.data)),
            right_prev=ImageGrid(_box_downsample(out.right_prev.data)),
            intrinsics=_half_intrinsics(out.intrinsics),
            baseline=out.baseline,
            pose=out.pose,
        )
    return out


def _upsample(data, new_h, new_w):
    """Bilinear resize aligning pixel centers, clamped at the borders."""
    src_h, src_w = data.shape[:2]
    xs = (np.arange(new_w) + 0.5) * (src_w / new_w) - 0.5
    ys = (np.arange(new_h) + 0.5) * (src_h / new_h) - 0.5
    qx = np.clip(np.broadcast_to(xs[None, :], (new_h, new_w)), 0, src_w - 1)
    qy = np.clip(np.broadcast_to(ys[:, None], (new_h, new_w)), 0, src_h - 1)
    taps = sample_bilinear(data, qx, qy)
    values = taps.values
    return values[..., 0] if data.ndim == 2 else values


def _promote_state(state: SolveState, fine: OracleInstance,
                   cfg: SolverConfig) -> SolveState:
    """Carry a solved level up to the next finer one.

    Inverse depth is scale-free under image resize with matching K
    scaling, so values are upsampled unchanged; normals are upsampled and
    re-normalized; Adam moments restart.
    """
    h, w = fine.height, fine.width
    rays = pixel_rays(w, h, fine.intrinsics)

    def up_normal(n):
        return orient_camera_facing(
            normalize_vectors(_upsample(n, h, w)), rays
        )

    return SolveState(
        dinv=_upsample(state.dinv, h, w),
        normal=up_normal(state.normal),
        dinv_prev=_upsample(state.dinv_prev, h, w),
        normal_prev=up_normal(state.normal_prev),
        xi=state.xi.copy(),
        moments=_zero_moments(h, w),
        iteration=state.iteration,
        learning_rate=cfg.learning_rate,
        loss_history=state.loss_history,
        trace=state.trace,
    )


def solve(instance: OracleInstance, cfg: SolverConfig):
    """Coarse-to-fine optimization; returns (state, per-iteration trace).

    Each level runs until its iteration budget or until the relative loss
    decrease over the convergence window falls below tolerance; a plateau
    first drops the learning rate tenfold (at most twice per level) and
    only then ends the level.
    """
    pyramid = [
        downsample_instance(instance, lvl)
        for lvl in range(cfg.pyramid_levels)
    ]
    state = initialize(pyramid[-1], cfg)

    for level_idx in range(cfg.pyramid_levels - 1, -1, -1):
        level_instance = pyramid[level_idx]
        level_start = state.iteration
        state.learning_rate = cfg.learning_rate
        state.lr_drops = 0
        state.last_drop_iteration = level_start
        state.adam_step = 0
        for _ in range(cfg.max_iterations):
            state = step(state, level_instance, cfg)
            if _plateaued(state, cfg, level_start):
                if state.lr_drops < cfg.max_lr_drops:
                    state.learning_rate *= 0.1
                    state.lr_drops += 1
                    state.last_drop_iteration = state.iteration
                else:
                    break
        if level_idx > 0:
            state = _promote_state(state, pyramid[level_idx - 1], cfg)

    return state, list(state.trace)
