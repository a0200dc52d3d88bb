"""The six self-supervised geometry losses with analytic gradients.

Every loss returns a raw sum over valid pixels (masked pixels contribute
exactly zero to values and gradients) together with gradients w.r.t. the
optimized quantities:

* ``d_dinv``   -- per-pixel inverse depth of the reference frame;
* ``d_normal`` -- per-pixel normals, projected onto the tangent space of
  the unit sphere (descent then re-normalizes);
* ``d_xi``     -- the 6-vector twist of the frame-t to frame-(t-1) pose,
  differentiated through the exponential map via the SE(3) left Jacobian,
  so finite differences on the twist components match it directly.

The temporal consistency terms additionally produce gradients for the
previous frame's maps (``d_dinv_prev``/``d_normal_prev``), which the
solver optimizes as auxiliary variables.

L1 subgradients use sign(0) = 0 throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .camera import (
    Intrinsics,
    RigidTransform,
    pixel_rays,
    project_points,
    se3_left_jacobian,
)
from .errors import GridTooSmall
from .grids import (
    INV_DEPTH_EPS,
    cross3,
    ImageGrid,
    InverseDepthMap,
    NormalMap,
    ValidityMask,
    check_same_resolution,
    depth_from_inverse,
    edge_weight,
    forward_differences,
    gather_all_taps_true,
    normalize_vectors,
    orient_camera_facing,
    sample_bilinear,
    scatter_sample_gradient,
)

# Minimum forward depth for a warp target to count as in front of the camera.
Z_MIN = 1e-6

TERM_NAMES = (
    "photometric",
    "depth_normal",
    "normal_direction",
    "normal_smoothness",
    "depth_consistency",
    "normal_consistency",
)


@dataclass(frozen=True)
class LossWeights:
    """Relative weights of the six loss terms (all non-negative)."""

    photometric: float = 1.0
    depth_normal: float = 13.0
    normal_direction: float = 1.0
    normal_smoothness: float = 0.7
    depth_consistency: float = 1.0
    normal_consistency: float = 0.01

    def __post_init__(self):
        if any(v < 0.0 for v in self.as_tuple()):
            raise ValueError("loss weights must be non-negative")

    def as_tuple(self):
        return (
            self.photometric,
            self.depth_normal,
            self.normal_direction,
            self.normal_smoothness,
            self.depth_consistency,
            self.normal_consistency,
        )


@dataclass(frozen=True)
class LossReport:
    """Per-term raw sums, valid-pixel counts, and the weighted total."""

    values: tuple
    counts: tuple
    weights: LossWeights
    total: float

    @classmethod
    def build(cls, values, counts, weights: LossWeights):
        values = tuple(float(v) for v in values)
        counts = tuple(int(c) for c in counts)
        total = float(
            np.dot(np.asarray(weights.as_tuple()), np.asarray(values))
        )
        return cls(values, counts, weights, total)

    def value(self, name):
        return self.values[TERM_NAMES.index(name)]

    def count(self, name):
        return self.counts[TERM_NAMES.index(name)]

    def per_valid_pixel(self):
        """Resolution-independent per-term means (value / valid count)."""
        return tuple(
            v / c if c > 0 else 0.0 for v, c in zip(self.values, self.counts)
        )


@dataclass
class Gradients:
    """Gradient block for one loss evaluation.

    ``d_normal`` (and ``d_normal_prev``) live in the tangent space of the
    unit sphere at the current normals.  The previous-frame fields are
    populated only by the temporal consistency terms.
    """

    d_dinv: np.ndarray
    d_normal: np.ndarray
    d_xi: np.ndarray
    d_dinv_prev: Optional[np.ndarray] = None
    d_normal_prev: Optional[np.ndarray] = None

    @classmethod
    def zeros(cls, height, width, with_prev=False):
        return cls(
            d_dinv=np.zeros((height, width)),
            d_normal=np.zeros((height, width, 3)),
            d_xi=np.zeros(6),
            d_dinv_prev=np.zeros((height, width)) if with_prev else None,
            d_normal_prev=np.zeros((height, width, 3)) if with_prev else None,
        )

    def add_scaled(self, other: "Gradients", scale: float):
        self.d_dinv += scale * other.d_dinv
        self.d_normal += scale * other.d_normal
        self.d_xi += scale * other.d_xi
        if other.d_dinv_prev is not None:
            if self.d_dinv_prev is None:
                self.d_dinv_prev = np.zeros_like(other.d_dinv_prev)
                self.d_normal_prev = np.zeros_like(other.d_normal_prev)
            self.d_dinv_prev += scale * other.d_dinv_prev
            self.d_normal_prev += scale * other.d_normal_prev

    def all_finite(self):
        parts = [self.d_dinv, self.d_normal, self.d_xi]
        if self.d_dinv_prev is not None:
            parts += [self.d_dinv_prev, self.d_normal_prev]
        return all(np.all(np.isfinite(p)) for p in parts)


def _tangent_project(grad, normals):
    """Remove the radial component of per-pixel normal gradients."""
    radial = np.einsum("...k,...k->...", grad, normals)
    return grad - radial[..., None] * normals


def _backprop_projection(ax, ay, points, intrinsics, valid):
    """Pull dL/d(pixel coords) back to dL/d(3D point) through projection."""
    z = np.where(valid, points[..., 2], 1.0)
    g = np.empty_like(points)
    g[..., 0] = ax * intrinsics.fx / z
    g[..., 1] = ay * intrinsics.fy / z
    g[..., 2] = -(
        ax * intrinsics.fx * points[..., 0]
        + ay * intrinsics.fy * points[..., 1]
    ) / (z * z)
    g *= valid[..., None]
    return g


def _warp_l1_branch(ref_data, src_data, dinv, rays, intrinsics, transform,
                    want_pose):
    """One image-alignment branch of the photometric loss.

    Warps ``src`` onto the reference via the reprojection of the reference
    inverse depth through ``transform`` and accumulates the L1 residual.
    Returns (value, d_dinv, d_delta, valid) where ``d_delta`` is the
    gradient w.r.t. a left-multiplicative pose perturbation (None unless
    requested).
    """
    depth = depth_from_inverse(dinv)
    points = depth[..., None] * rays
    moved = points @ transform.rotation.T + transform.translation
    px, py, in_front = project_points(moved, intrinsics, Z_MIN)
    taps = sample_bilinear(src_data, px, py)
    valid = in_front & taps.valid

    resid = np.where(valid[..., None], ref_data - taps.values, 0.0)
    value = float(np.abs(resid).sum())

    upstream = -np.sign(resid)
    ax = (upstream * taps.dx).sum(axis=-1)
    ay = (upstream * taps.dy).sum(axis=-1)
    g_point = _backprop_projection(ax, ay, moved, intrinsics, valid)

    rot_rays = rays @ transform.rotation.T
    d_depth = -(depth * depth)
    d_dinv = np.einsum("hwk,hwk->hw", g_point, rot_rays) * d_depth

    d_delta = None
    if want_pose:
        d_rho = g_point.sum(axis=(0, 1))
        d_omega = cross3(moved, g_point).sum(axis=(0, 1))
        d_delta = np.concatenate([d_rho, d_omega])
    return value, d_dinv, d_delta, valid


def stereo_photometric_loss(i_ref: ImageGrid, i_src: ImageGrid,
                            dinv: InverseDepthMap, intrinsics: Intrinsics,
                            transform: RigidTransform):
    """Spatial (fixed-baseline) half of the photometric objective.

    Same machinery as :func:`photometric_loss` restricted to a single
    source view with a known transform; no pose gradient.
    """
    check_same_resolution(i_ref.data, i_src.data, dinv.values)
    height, width = dinv.values.shape
    rays = pixel_rays(width, height, intrinsics)
    value, d_dinv, _, valid = _warp_l1_branch(
        i_ref.data, i_src.data, dinv.values, rays, intrinsics, transform,
        want_pose=False,
    )
    grads = Gradients.zeros(height, width)
    grads.d_dinv = d_dinv
    return value, grads, ValidityMask(valid)


def photometric_loss(i_left_t: ImageGrid, i_right_t: ImageGrid,
                     i_left_prev: ImageGrid, dinv: InverseDepthMap,
                     intrinsics: Intrinsics, t_lr: RigidTransform,
                     t_pose: RigidTransform):
    """Dense L1 image-alignment loss against the stereo and temporal views.

    The reference image is warp-compared against the right image via the
    fixed stereo baseline and against the previous left image via the
    estimated ego-motion; gradients chain through the inverse-depth
    conversion, the reprojections, and the bilinear sampler.  The pose
    gradient comes from the temporal branch only.
    """
    check_same_resolution(
        i_left_t.data, i_right_t.data, i_left_prev.data, dinv.values
    )
    height, width = dinv.values.shape
    rays = pixel_rays(width, height, intrinsics)

    v_stereo, g_stereo, _, m_stereo = _warp_l1_branch(
        i_left_t.data, i_right_t.data, dinv.values, rays, intrinsics, t_lr,
        want_pose=False,
    )
    v_temp, g_temp, d_delta, m_temp = _warp_l1_branch(
        i_left_t.data, i_left_prev.data, dinv.values, rays, intrinsics,
        t_pose, want_pose=True,
    )

    grads = Gradients.zeros(height, width)
    grads.d_dinv = g_stereo + g_temp
    grads.d_xi = se3_left_jacobian(t_pose.xi).T @ d_delta
    return (
        v_stereo + v_temp,
        grads,
        (ValidityMask(m_stereo), ValidityMask(m_temp)),
    )


def normal_smoothness_loss(normal: NormalMap, image: ImageGrid):
    """Edge-aware L1 smoothness of the normal field.

    Sum over pixels of |dx N| e^{-|dx I|} + |dy N| e^{-|dy I|}, with
    forward differences, channel-L1 normal gradients and the channel-mean
    of |dI| in the exponent.
    """
    check_same_resolution(normal.grid.data, image.data)
    n = normal.vectors
    dxn, dyn = forward_differences(n)
    dxi, dyi = forward_differences(image.data)
    wx = np.exp(-np.abs(dxi).mean(axis=2))
    wy = np.exp(-np.abs(dyi).mean(axis=2))

    value = float(
        (np.abs(dxn).sum(axis=2) * wx).sum()
        + (np.abs(dyn).sum(axis=2) * wy).sum()
    )

    sx = np.sign(dxn) * wx[..., None]
    sy = np.sign(dyn) * wy[..., None]
    d_n = np.zeros_like(n)
    d_n[:, :-1] -= sx[:, :-1]
    d_n[:, 1:] += sx[:, :-1]
    d_n[:-1, :] -= sy[:-1, :]
    d_n[1:, :] += sy[:-1, :]

    grads = Gradients.zeros(*n.shape[:2])
    grads.d_normal = _tangent_project(d_n, n)
    return value, grads


def depth_normal_consistency_loss(dinv: InverseDepthMap, normal: NormalMap,
                                  image: ImageGrid, intrinsics: Intrinsics,
                                  alpha=1.0, beta=1.0):
    """Consistency between inverse depths and normals over a neighborhood.

    For each pixel p and its neighbors q (itself, right, below):
    ``|d_inv(p) <N(p), ray(q)> - d_inv(q) <N(p), ray(p)>|`` weighted by the
    edge weight G(p).  The q = p term is identically zero and therefore
    not accumulated; border pixels skip missing neighbors.  With a
    fronto-parallel normal field this reduces exactly to the edge-weighted
    L1 inverse-depth smoothness prior.
    """
    check_same_resolution(dinv.values, normal.grid.data, image.data)
    d = dinv.values
    n = normal.vectors
    height, width = d.shape
    rays = pixel_rays(width, height, intrinsics)
    weight = edge_weight(image, alpha, beta).plane
    c_pp = np.einsum("hwk,hwk->hw", n, rays)

    value = 0.0
    d_dinv = np.zeros_like(d)
    d_n = np.zeros_like(n)

    def accumulate(sp, sq):
        """Add the pair terms for p = arr[sp], q = arr[sq]."""
        nonlocal value
        c_pq = np.einsum("hwk,hwk->hw", n[sp], rays[sq])
        resid = d[sp] * c_pq - d[sq] * c_pp[sp]
        w = weight[sp]
        value += float((w * np.abs(resid)).sum())
        s = w * np.sign(resid)
        d_dinv[sp] += s * c_pq
        d_dinv[sq] -= s * c_pp[sp]
        d_n[sp] += s[..., None] * (
            d[sp][..., None] * rays[sq] - d[sq][..., None] * rays[sp]
        )

    if width >= 2:
        accumulate(np.s_[:, :-1], np.s_[:, 1:])
    if height >= 2:
        accumulate(np.s_[:-1, :], np.s_[1:, :])

    grads = Gradients.zeros(height, width)
    grads.d_dinv = d_dinv
    grads.d_normal = _tangent_project(d_n, n)
    return value, grads


def normal_from_depth(dinv: InverseDepthMap, intrinsics: Intrinsics):
    """Approximate camera-facing normals from depth by mean cross product.

    Backprojects the four cardinal neighbors of each interior pixel and
    averages the cross products of the consecutive orthogonal difference
    pairs (right x down, down x left, left x up, up x right); degenerate
    neighborhoods (cross-product norm below 1e-12) fall back to the
    fronto-parallel normal and borders replicate the nearest interior
    result.  Treated as a constant (no gradient to depth) wherever it
    feeds another loss.
    """
    d = dinv.values
    height, width = d.shape
    if height < 3 or width < 3:
        raise GridTooSmall("normal_from_depth needs at least a 3x3 grid")
    rays = pixel_rays(width, height, intrinsics)
    points = depth_from_inverse(d)[..., None] * rays

    center = points[1:-1, 1:-1]
    v_r = points[1:-1, 2:] - center
    v_d = points[2:, 1:-1] - center
    v_l = points[1:-1, :-2] - center
    v_u = points[:-2, 1:-1] - center
    mean_cross = 0.25 * (
        cross3(v_r, v_d)
        + cross3(v_d, v_l)
        + cross3(v_l, v_u)
        + cross3(v_u, v_r)
    )
    interior = normalize_vectors(mean_cross)
    interior = orient_camera_facing(interior, rays[1:-1, 1:-1])

    normals = np.empty((height, width, 3))
    normals[1:-1, 1:-1] = interior
    normals[0, 1:-1] = interior[0]
    normals[-1, 1:-1] = interior[-1]
    normals[:, 0] = normals[:, 1]
    normals[:, -1] = normals[:, -2]
    return NormalMap(normals)


def normal_direction_loss(normal: NormalMap, approx: NormalMap):
    """Half mean squared distance between the normals and the depth-derived
    reference field (which is held constant)."""
    check_same_resolution(normal.grid.data, approx.grid.data)
    n = normal.vectors
    diff = n - approx.vectors
    npix = n.shape[0] * n.shape[1]
    value = float((diff * diff).sum() / (2.0 * npix))
    grads = Gradients.zeros(*n.shape[:2])
    grads.d_normal = _tangent_project(diff / npix, n)
    return value, grads


def _temporal_pair(dinv_t, dinv_prev, n_t, n_prev, intrinsics, t_pose,
                   weight_dc, weight_nc):
    """Shared evaluation of the temporal depth/normal consistency pair.

    Residual upstreams are scaled by the given weights so the returned
    gradients equal ``weight_dc * grad(L_DC) + weight_nc * grad(L_NC)``
    while the two values stay unweighted.
    """
    check_same_resolution(
        dinv_t.values, dinv_prev.values, n_t.grid.data, n_prev.grid.data
    )
    height, width = dinv_t.values.shape
    rays = pixel_rays(width, height, intrinsics)
    rot = t_pose.rotation
    r3 = rot[:, 2]

    # previous-frame geometry transported into the current frame
    depth_prev = depth_from_inverse(dinv_prev.values)
    p_prev = depth_prev[..., None] * rays
    moved_prev = (p_prev - t_pose.translation) @ rot
    z_prev = moved_prev[..., 2]
    prev_ok = z_prev > Z_MIN
    safe_z = np.where(prev_ok, z_prev, 1.0)
    # re-encode with the library's inverse-depth convention so the
    # comparison against the predicted maps is offset-free
    dinv_transported = np.where(
        prev_ok, 1.0 / safe_z - INV_DEPTH_EPS, 0.0
    )
    n_transported = n_prev.vectors @ rot  # R^T n per pixel

    fields = np.concatenate(
        [dinv_transported[..., None], n_transported], axis=-1
    )

    # temporal reprojection of the current geometry
    depth_t = depth_from_inverse(dinv_t.values)
    points = depth_t[..., None] * rays
    moved = points @ rot.T + t_pose.translation
    px, py, in_front = project_points(moved, intrinsics, Z_MIN)
    taps = sample_bilinear(fields, px, py)
    mask = in_front & taps.valid & gather_all_taps_true(prev_ok, taps)

    # depth consistency
    sampled_dinv = taps.values[..., 0]
    resid_d = np.where(mask, dinv_t.values - sampled_dinv, 0.0)
    value_dc = float(np.abs(resid_d).sum())

    # normal consistency (bilinear warp + re-normalization)
    raw = taps.values[..., 1:4]
    raw_norm = np.linalg.norm(raw, axis=-1)
    mask_n = mask & (raw_norm > 1e-6)
    safe_norm = np.where(mask_n, raw_norm, 1.0)[..., None]
    warped_n = np.where(mask_n[..., None], raw / safe_norm, 0.0)
    resid_n = np.where(mask_n[..., None], n_t.vectors - warped_n, 0.0)
    value_nc = float(np.abs(resid_n).sum())

    grads = Gradients.zeros(height, width, with_prev=True)

    # direct terms
    grads.d_dinv += weight_dc * np.sign(resid_d)
    d_n_t = weight_nc * np.sign(resid_n)

    # upstream gradients on the sampled fields
    up_d = -weight_dc * np.sign(resid_d)
    up_hat = -weight_nc * np.sign(resid_n)
    radial = np.einsum("hwk,hwk->hw", warped_n, up_hat)
    up_raw = (up_hat - radial[..., None] * warped_n) / safe_norm
    up_raw = np.where(mask_n[..., None], up_raw, 0.0)
    upstream = np.concatenate([up_d[..., None], up_raw], axis=-1)

    # position gradient through the warp coordinates
    ax = (upstream * taps.dx).sum(axis=-1)
    ay = (upstream * taps.dy).sum(axis=-1)
    g_point = _backprop_projection(ax, ay, moved, intrinsics, mask)
    rot_rays = rays @ rot.T
    grads.d_dinv += np.einsum("hwk,hwk->hw", g_point, rot_rays) * -(
        depth_t * depth_t
    )
    d_rho = g_point.sum(axis=(0, 1))
    d_omega = cross3(moved, g_point).sum(axis=(0, 1))

    # scatter through the sampled fields onto the previous frame's pixels
    g_fields = scatter_sample_gradient(fields.shape, taps, upstream)
    gz = np.where(prev_ok, g_fields[..., 0] * -(1.0 / (safe_z * safe_z)), 0.0)
    grads.d_dinv_prev += gz * (rays @ r3) * -(depth_prev * depth_prev)
    g_trans_n = g_fields[..., 1:4]
    d_n_prev = g_trans_n @ rot.T  # R @ g per pixel

    # pose paths through the transported fields
    d_rho += -r3 * gz.sum()
    d_omega += np.cross(r3, (gz[..., None] * p_prev).sum(axis=(0, 1)))
    d_omega += cross3(g_trans_n @ rot.T, n_prev.vectors).sum(axis=(0, 1))

    grads.d_normal = _tangent_project(d_n_t, n_t.vectors)
    grads.d_normal_prev = _tangent_project(d_n_prev, n_prev.vectors)
    grads.d_xi = se3_left_jacobian(t_pose.xi).T @ np.concatenate(
        [d_rho, d_omega]
    )
    return value_dc, value_nc, grads, ValidityMask(mask)


def temporal_consistency_losses(dinv_t: InverseDepthMap,
                                dinv_prev: InverseDepthMap,
                                n_t: NormalMap, n_prev: NormalMap,
                                intrinsics: Intrinsics,
                                t_pose: RigidTransform):
    """Rigid-scene consistency of geometry across consecutive frames.

    The previous frame's points are transported into the current frame
    with the inverse pose (normals with the inverse rotation), re-encoded
    as an inverse-depth map and a normal map over the previous frame's
    pixels, then warped at the temporal reprojection of the current
    geometry and compared L1 against the current maps.  Warped normals
    are bilinearly interpolated and re-normalized before the comparison.

    Returns (depth term, normal term, gradients, validity mask); the
    returned gradients are for the unweighted sum of the two terms and
    cover the current maps, the pose twist, and the previous frame's maps
    (``d_dinv_prev``/``d_normal_prev``).
    """
    return _temporal_pair(
        dinv_t, dinv_prev, n_t, n_prev, intrinsics, t_pose, 1.0, 1.0
    )


def temporal_consistency_weighted(dinv_t, dinv_prev, n_t, n_prev, intrinsics,
                                  t_pose, weight_dc, weight_nc):
    """Temporal pair with separately weighted gradients (values raw)."""
    return _temporal_pair(
        dinv_t, dinv_prev, n_t, n_prev, intrinsics, t_pose, weight_dc,
        weight_nc,
    )


def total_loss(i_left_t: ImageGrid, i_right_t: ImageGrid,
               i_left_prev: ImageGrid, dinv: InverseDepthMap,
               normal: NormalMap, dinv_prev: Optional[InverseDepthMap],
               normal_prev: Optional[NormalMap], intrinsics: Intrinsics,
               t_lr: RigidTransform, t_pose: RigidTransform,
               weights: LossWeights, alpha=1.0, beta=1.0):
    """Weighted sum of the six terms with accumulated gradients.

    Terms are evaluated in the fixed order photometric, depth-normal,
    normal-direction, normal-smoothness, depth-consistency,
    normal-consistency; terms with zero weight are skipped and reported
    as zero with a zero count.  The previous-frame maps may be None when
    both temporal weights are zero.
    """
    height, width = dinv.values.shape
    values = [0.0] * 6
    counts = [0] * 6
    total_grads = Gradients.zeros(height, width, with_prev=True)
    w = weights.as_tuple()

    if w[0] > 0.0:
        value, grads, (m_s, m_t) = photometric_loss(
            i_left_t, i_right_t, i_left_prev, dinv, intrinsics, t_lr, t_pose
        )
        values[0] = value
        counts[0] = m_s.count + m_t.count
        total_grads.add_scaled(grads, w[0])

    if w[1] > 0.0:
        value, grads = depth_normal_consistency_loss(
            dinv, normal, i_left_t, intrinsics, alpha, beta
        )
        values[1] = value
        counts[1] = max(width - 1, 0) * height + width * max(height - 1, 0)
        total_grads.add_scaled(grads, w[1])

    if w[2] > 0.0:
        approx = normal_from_depth(dinv, intrinsics)
        value, grads = normal_direction_loss(normal, approx)
        values[2] = value
        counts[2] = height * width
        total_grads.add_scaled(grads, w[2])

    if w[3] > 0.0:
        value, grads = normal_smoothness_loss(normal, i_left_t)
        values[3] = value
        counts[3] = height * width
        total_grads.add_scaled(grads, w[3])

    if w[4] > 0.0 or w[5] > 0.0:
        if dinv_prev is None or normal_prev is None:
            raise ValueError(
                "temporal terms require previous-frame geometry maps"
            )
        v_dc, v_nc, grads, mask = _temporal_pair(
            dinv, dinv_prev, normal, normal_prev, intrinsics, t_pose,
            w[4], w[5],
        )
        if w[4] > 0.0:
            values[4] = v_dc
            counts[4] = mask.count
        if w[5] > 0.0:
            values[5] = v_nc
            counts[5] = mask.count
        total_grads.add_scaled(grads, 1.0)

    report = LossReport.build(values, counts, weights)
    return report, total_grads


__all__ = [
    "Gradients",
    "LossReport",
    "LossWeights",
    "TERM_NAMES",
    "depth_normal_consistency_loss",
    "normal_direction_loss",
    "normal_from_depth",
    "normal_smoothness_loss",
    "photometric_loss",
    "stereo_photometric_loss",
    "temporal_consistency_losses",
    "temporal_consistency_weighted",
    "total_loss",
]
