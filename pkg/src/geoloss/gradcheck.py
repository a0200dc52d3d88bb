"""Finite-difference verification of every analytic loss gradient.

Central differences (default step 1e-5) are compared against the analytic
gradients on random smooth instances.  L1 losses and bilinear warps are
only piecewise smooth; a probe whose finite difference straddles a kink
is detected by comparing the estimate at step h against step 2h (a clean
quotient is h-independent to ~1e-8 relative, a contaminated one is not).
Contaminated per-pixel probes are discarded and redrawn; for the 6 twist
components, which sum over every pixel and cannot be redrawn, the step is
shrunk tenfold instead (kink contamination scales linearly with the
step).  The detector never looks at the analytic value, so the finite
difference remains an independent oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .camera import Intrinsics, se3_exp
from .grids import ImageGrid, InverseDepthMap, NormalMap, normalize_vectors
from .losses import (
    depth_normal_consistency_loss,
    normal_direction_loss,
    normal_from_depth,
    normal_smoothness_loss,
    photometric_loss,
    temporal_consistency_weighted,
)

LOSS_NAMES = ("L_P", "L_DN", "L_N", "L_NS", "L_DC", "L_NC")

DEFAULT_STEP = 1e-5
# finite differences at h and 2h must agree this well or the probe is
# considered kink-contaminated
CONSISTENCY_RTOL = 1e-5
CONSISTENCY_ATOL = 1e-9


@dataclass
class ProbePoint:
    """Base variables of one random check instance."""

    images: tuple
    dinv: InverseDepthMap
    dinv_prev: InverseDepthMap
    normal: NormalMap
    normal_prev: NormalMap
    intrinsics: Intrinsics
    t_lr: object
    xi: np.ndarray


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    probes: int
    passed: bool
    worst_probe: str = ""


def _smooth_field(rng, height, width, components=4, amplitude=1.0):
    ys, xs = np.mgrid[0:height, 0:width]
    out = np.zeros((height, width))
    for _ in range(components):
        fx, fy = rng.uniform(0.3, 1.8, 2) / max(height, width)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        out += rng.uniform(0.3, 1.0) * np.sin(
            2.0 * np.pi * (fx * xs + fy * ys) + phase
        )
    return amplitude * out / components


def make_probe_point(seed, height=28, width=36) -> ProbePoint:
    """Random smooth images, depth, normals and pose for gradient probes."""
    rng = np.random.default_rng(seed)
    intr = Intrinsics(
        fx=rng.uniform(40.0, 55.0),
        fy=rng.uniform(40.0, 55.0),
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
    )
    images = tuple(
        ImageGrid(
            np.clip(
                np.stack(
                    [
                        0.5 + 0.4 * _smooth_field(rng, height, width)
                        for _ in range(3)
                    ],
                    axis=-1,
                ),
                0.01,
                0.99,
            )
        )
        for _ in range(3)
    )

    def random_dinv():
        return InverseDepthMap(
            0.18 + 0.08 * _smooth_field(rng, height, width)
        )

    def random_normals():
        a = 0.35 * _smooth_field(rng, height, width, amplitude=1.5)
        b = 0.35 * _smooth_field(rng, height, width, amplitude=1.5)
        stacked = np.stack([a, b, -np.ones_like(a)], axis=-1)
        return NormalMap(normalize_vectors(stacked))

    xi = np.concatenate(
        [rng.uniform(-0.15, 0.15, 3), rng.uniform(-0.03, 0.03, 3)]
    )
    return ProbePoint(
        images=images,
        dinv=random_dinv(),
        dinv_prev=random_dinv(),
        normal=random_normals(),
        normal_prev=random_normals(),
        intrinsics=intr,
        t_lr=se3_exp(np.array([-0.3, 0.0, 0.0, 0.0, 0.0, 0.0])),
        xi=xi,
    )


def _loss_bundle(name, point: ProbePoint):
    """(value function over variable overrides, analytic gradients)."""
    i0, i1, i2 = point.images
    k = point.intrinsics

    if name == "L_P":
        def value(p):
            return photometric_loss(
                i0, i1, i2, p.dinv, k, p.t_lr, se3_exp(p.xi)
            )[0]

        _, grads, _ = photometric_loss(
            i0, i1, i2, point.dinv, k, point.t_lr, se3_exp(point.xi)
        )
        targets = ("dinv", "xi")
    elif name == "L_DN":
        def value(p):
            return depth_normal_consistency_loss(p.dinv, p.normal, i0, k)[0]

        _, grads = depth_normal_consistency_loss(
            point.dinv, point.normal, i0, k
        )
        targets = ("dinv", "normal")
    elif name == "L_N":
        approx = normal_from_depth(point.dinv, k)

        def value(p):
            return normal_direction_loss(p.normal, approx)[0]

        _, grads = normal_direction_loss(point.normal, approx)
        targets = ("normal",)
    elif name == "L_NS":
        def value(p):
            return normal_smoothness_loss(p.normal, i0)[0]

        _, grads = normal_smoothness_loss(point.normal, i0)
        targets = ("normal",)
    elif name == "L_DC":
        def value(p):
            return temporal_consistency_weighted(
                p.dinv, p.dinv_prev, p.normal, p.normal_prev, k,
                se3_exp(p.xi), 1.0, 0.0,
            )[0]

        _, _, grads, _ = temporal_consistency_weighted(
            point.dinv, point.dinv_prev, point.normal, point.normal_prev,
            k, se3_exp(point.xi), 1.0, 0.0,
        )
        targets = ("dinv", "dinv_prev", "xi")
    elif name == "L_NC":
        def value(p):
            return temporal_consistency_weighted(
                p.dinv, p.dinv_prev, p.normal, p.normal_prev, k,
                se3_exp(p.xi), 0.0, 1.0,
            )[1]

        _, _, grads, _ = temporal_consistency_weighted(
            point.dinv, point.dinv_prev, point.normal, point.normal_prev,
            k, se3_exp(point.xi), 0.0, 1.0,
        )
        targets = ("normal", "normal_prev", "dinv", "xi")
    else:
        raise ValueError(f"unknown loss {name!r}")
    return value, grads, targets


def _rel_error(analytic, fd):
    return abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-6)


def _consistent(f_h, f_2h):
    return abs(f_h - f_2h) <= CONSISTENCY_RTOL * max(
        abs(f_h), abs(f_2h)
    ) + CONSISTENCY_ATOL


def _central(value_fn, make_point, h):
    return (value_fn(make_point(h)) - value_fn(make_point(-h))) / (2.0 * h)


def _tangent_basis(n):
    helper = (
        np.array([1.0, 0.0, 0.0])
        if abs(n[0]) < 0.9
        else np.array([0.0, 1.0, 0.0])
    )
    t1 = np.cross(n, helper)
    t1 /= np.linalg.norm(t1)
    return t1, np.cross(n, t1)


def _probe_dinv(point, attr, value_fn, grad, rng, probes, step, errors):
    base = getattr(point, attr)
    height, width = base.values.shape
    order = rng.permutation(height * width)
    collected = 0
    for flat in order:
        if collected >= probes:
            break
        y, x = divmod(int(flat), width)

        def perturbed(h):
            arr = base.values.copy()
            arr[y, x] += h
            return replace(point, **{attr: InverseDepthMap(arr)})

        f_h = _central(value_fn, perturbed, step)
        f_2h = _central(value_fn, perturbed, 2.0 * step)
        if not _consistent(f_h, f_2h):
            continue  # straddles a kink; redraw
        errors.append((_rel_error(grad[y, x], f_h), f"d_{attr}@({y},{x})"))
        if max(abs(grad[y, x]), abs(f_h)) > 1e-9:
            collected += 1  # vacuous zero-zero probes do not fill the quota
    return collected


def _probe_normal(point, attr, value_fn, grad, rng, probes, step, errors):
    base = getattr(point, attr)
    height, width = base.vectors.shape[:2]
    order = rng.permutation(height * width)
    collected = 0
    for flat in order:
        if collected >= probes:
            break
        y, x = divmod(int(flat), width)
        n = base.vectors[y, x]
        for direction in _tangent_basis(n):
            analytic = float(grad[y, x] @ direction)

            def perturbed(h):
                arr = base.vectors.copy()
                vec = arr[y, x] + h * direction
                arr[y, x] = vec / np.linalg.norm(vec)
                return replace(point, **{attr: NormalMap(arr)})

            f_h = _central(value_fn, perturbed, step)
            f_2h = _central(value_fn, perturbed, 2.0 * step)
            if not _consistent(f_h, f_2h):
                continue
            errors.append(
                (_rel_error(analytic, f_h), f"d_{attr}@({y},{x})")
            )
            if max(abs(analytic), abs(f_h)) > 1e-9:
                collected += 1
    return collected


def _probe_xi(point, value_fn, grad, step, errors):
    for i in range(6):
        def perturbed(h):
            xi = point.xi.copy()
            xi[i] += h
            return replace(point, xi=xi)

        h = step
        f_h = _central(value_fn, perturbed, h)
        # shrink the step off kinks; contamination scales linearly with h
        for _ in range(2):
            f_2h = _central(value_fn, perturbed, 2.0 * h)
            if _consistent(f_h, f_2h):
                break
            h *= 0.1
            f_h = _central(value_fn, perturbed, h)
        errors.append((_rel_error(float(grad[i]), f_h), f"d_xi[{i}]"))
    return 6


def check_loss(name, seed, probes=30, step=DEFAULT_STEP):
    """Max relative FD error over the probe set of one loss.

    Returns (max_rel_error, probe_count, worst_probe_label).
    """
    point = make_probe_point(seed)
    value_fn, grads, targets = _loss_bundle(name, point)
    rng = np.random.default_rng(seed + 977)
    errors = []
    count = 0
    for target in targets:
        if target == "dinv":
            count += _probe_dinv(
                point, "dinv", value_fn, grads.d_dinv, rng, probes, step,
                errors,
            )
        elif target == "dinv_prev":
            count += _probe_dinv(
                point, "dinv_prev", value_fn, grads.d_dinv_prev, rng,
                probes, step, errors,
            )
        elif target == "normal":
            count += _probe_normal(
                point, "normal", value_fn, grads.d_normal, rng, probes,
                step, errors,
            )
        elif target == "normal_prev":
            count += _probe_normal(
                point, "normal_prev", value_fn, grads.d_normal_prev, rng,
                probes, step, errors,
            )
        elif target == "xi":
            count += _probe_xi(point, value_fn, grads.d_xi, step, errors)
    if not errors:
        return float("inf"), count, "no probes collected"
    worst, label = max(errors, key=lambda item: item[0])
    return worst, count, label


def run_gradcheck(seeds=(0, 1, 2), tolerance=1e-4, probes=30,
                  step=DEFAULT_STEP):
    """Check all six losses over several seeds; one result per loss."""
    results = []
    for name in LOSS_NAMES:
        worst = 0.0
        total = 0
        worst_label = ""
        for seed in seeds:
            err, count, label = check_loss(
                name, seed, probes=probes, step=step
            )
            if err > worst:
                worst, worst_label = err, f"seed {seed}: {label}"
            total += count
        results.append(
            CheckResult(name, worst, total, worst < tolerance, worst_label)
        )
    return results
