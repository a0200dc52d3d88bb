"""Synthetic stereo-sequence generator with exact ground truth.

Scenes are unions of textured infinite planes; every camera ray takes the
nearest positive ray-plane intersection.  Textures are analytic sums of
sinusoids evaluated in plane-local coordinates of the 3D hit point, so
all four rendered views are exactly multi-view consistent and the only
resampling error in any downstream warp comes from the sampler under
test, never from the renderer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .camera import Intrinsics, RigidTransform, pixel_rays, se3_exp
from .errors import NoIntersection
from .grids import (
    ImageGrid,
    InverseDepthMap,
    NormalMap,
    inverse_from_depth,
)

# Minimum usable intersection distance (meters).
MIN_HIT_DEPTH = 1e-6


@dataclass(frozen=True)
class SinusoidTexture:
    """Sum of sinusoids over plane-local (u, v) coordinates.

    Channel c of the texture is
    ``0.5 + sum_i a_i * sin(2*pi*(fu_i*u + fv_i*v) + phase_i + c*shift_i)``;
    amplitudes are chosen so values stay inside [0, 1].
    """

    amplitudes: np.ndarray
    freq_u: np.ndarray
    freq_v: np.ndarray
    phases: np.ndarray
    channel_shifts: np.ndarray

    @classmethod
    def random(cls, rng, freq_u_range=(0.08, 0.3), freq_v_range=None,
               components=3):
        """Random texture with axis-wise frequency bounds (cycles/meter).

        Separate u/v bounds let slanted planes stay smooth along the
        direction that compresses in image space (anti-aliasing) while
        keeping contrast along the other axis.
        """
        if freq_v_range is None:
            freq_v_range = freq_u_range
        sign_u = rng.choice([-1.0, 1.0], size=components)
        sign_v = rng.choice([-1.0, 1.0], size=components)
        amplitudes = np.full(components, 0.45 / components)
        return cls(
            amplitudes=amplitudes,
            freq_u=sign_u * rng.uniform(*freq_u_range, size=components),
            freq_v=sign_v * rng.uniform(*freq_v_range, size=components),
            phases=rng.uniform(0.0, 2.0 * np.pi, size=components),
            channel_shifts=rng.uniform(0.5, 2.5, size=components),
        )

    def value(self, u, v, channels=3):
        u = np.asarray(u, dtype=float)[..., None]
        v = np.asarray(v, dtype=float)[..., None]
        base = 2.0 * np.pi * (self.freq_u * u + self.freq_v * v) + self.phases
        out = np.empty(u.shape[:-1] + (channels,))
        for c in range(channels):
            out[..., c] = 0.5 + np.sum(
                self.amplitudes * np.sin(base + c * self.channel_shifts),
                axis=-1,
            )
        return out


@dataclass(frozen=True)
class PlaneSpec:
    """Infinite textured plane <n, X> = h in the reference camera frame.

    ``normal`` must be unit and camera-facing over the region where the
    plane is visible (which, together with positive hit depth, forces
    ``offset`` < 0).  Earlier planes in a scene win exact depth ties.
    """

    normal: np.ndarray
    offset: float
    texture: SinusoidTexture

    def basis(self):
        """Deterministic orthonormal (e1, e2) spanning the plane."""
        n = self.normal
        up = np.array([0.0, 1.0, 0.0])
        if abs(n @ up) > 0.9:
            up = np.array([1.0, 0.0, 0.0])
        e1 = np.cross(n, up)
        e1 = e1 / np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        return e1, e2


@dataclass(frozen=True)
class SceneSpec:
    """Full description of a synthetic stereo-sequence instance."""

    name: str
    planes: tuple
    intrinsics: Intrinsics
    width: int
    height: int
    baseline_m: float
    ego_motion: np.ndarray  # twist of T_{t -> t-1}
    seed: int


@dataclass
class OracleInstance:
    """Two stereo pairs plus exact geometry for the reference (left, t)
    view and for the previous left view.

    ``pose`` is the ground-truth frame-t to frame-(t-1) transform.  Fields
    may be None when an instance is loaded from a directory that lacks
    them.  ``seam_free`` is True away from plane seams (more than 1 px
    from a plane-identity change); oracle comparisons exclude seam pixels.
    """

    left_t: ImageGrid
    right_t: ImageGrid
    left_prev: ImageGrid
    right_prev: ImageGrid
    intrinsics: Intrinsics
    baseline: RigidTransform
    gt_dinv: Optional[InverseDepthMap] = None
    gt_normal: Optional[NormalMap] = None
    gt_dinv_prev: Optional[InverseDepthMap] = None
    gt_normal_prev: Optional[NormalMap] = None
    pose: Optional[RigidTransform] = None
    seam_free: Optional[np.ndarray] = None

    @property
    def width(self):
        return self.left_t.width

    @property
    def height(self):
        return self.left_t.height


def baseline_transform(baseline_m):
    """Left-to-right transform of a rectified pure-x stereo rig."""
    return RigidTransform.from_rt(np.eye(3), np.array([-baseline_m, 0.0, 0.0]))


def _render_view(spec: SceneSpec, to_view: RigidTransform):
    """Render one camera: image, view-frame depth, winning plane index."""
    rays = pixel_rays(spec.width, spec.height, spec.intrinsics)
    rot, trans = to_view.rotation, to_view.translation

    depths = np.full((len(spec.planes), spec.height, spec.width), np.inf)
    for i, plane in enumerate(spec.planes):
        n_view = rot @ plane.normal
        denom = rays @ n_view
        numer = plane.offset + n_view @ trans
        with np.errstate(divide="ignore", invalid="ignore"):
            d = numer / denom
        d = np.where(np.isfinite(d) & (d > MIN_HIT_DEPTH), d, np.inf)
        depths[i] = d

    winner = np.argmin(depths, axis=0)  # ties -> lowest index (priority)
    depth = np.take_along_axis(depths, winner[None], axis=0)[0]
    if not np.all(np.isfinite(depth)):
        bad = int((~np.isfinite(depth)).sum())
        raise NoIntersection(f"{bad} rays miss every plane in '{spec.name}'")

    points_view = depth[..., None] * rays
    points_ref = to_view.apply_inverse(points_view)

    image = np.zeros((spec.height, spec.width, 3))
    for i, plane in enumerate(spec.planes):
        sel = winner == i
        if not np.any(sel):
            continue
        e1, e2 = plane.basis()
        u = points_ref[sel] @ e1
        v = points_ref[sel] @ e2
        image[sel] = plane.texture.value(u, v)
    return image, depth, winner


def _seam_free_mask(plane_index):
    """True where the 8-neighborhood (1 px) has a single plane identity."""
    same = np.ones(plane_index.shape, dtype=bool)
    h, w = plane_index.shape
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            shifted = plane_index[
                max(dy, 0) : h + min(dy, 0), max(dx, 0) : w + min(dx, 0)
            ]
            center = plane_index[
                max(-dy, 0) : h + min(-dy, 0), max(-dx, 0) : w + min(-dx, 0)
            ]
            eq = shifted == center
            same[max(-dy, 0) : h + min(-dy, 0), max(-dx, 0) : w + min(-dx, 0)] &= eq
    return same


def render(spec: SceneSpec) -> OracleInstance:
    """Render the four views of a scene with exact ground truth."""
    pose = se3_exp(spec.ego_motion)
    t_lr = baseline_transform(spec.baseline_m)
    identity = RigidTransform.identity()

    left_t, depth_t, winner_t = _render_view(spec, identity)
    right_t, _, _ = _render_view(spec, t_lr)
    left_prev, depth_prev, winner_prev = _render_view(spec, pose)
    right_prev, _, _ = _render_view(spec, t_lr @ pose)

    normals_ref = np.empty((spec.height, spec.width, 3))
    normals_prev = np.empty((spec.height, spec.width, 3))
    for i, plane in enumerate(spec.planes):
        normals_ref[winner_t == i] = plane.normal
        normals_prev[winner_prev == i] = pose.rotation @ plane.normal

    return OracleInstance(
        left_t=ImageGrid(left_t),
        right_t=ImageGrid(right_t),
        left_prev=ImageGrid(left_prev),
        right_prev=ImageGrid(right_prev),
        intrinsics=spec.intrinsics,
        baseline=t_lr,
        gt_dinv=InverseDepthMap(inverse_from_depth(depth_t)),
        gt_normal=NormalMap(normals_ref),
        gt_dinv_prev=InverseDepthMap(inverse_from_depth(depth_prev)),
        gt_normal_prev=NormalMap(normals_prev),
        pose=pose,
        seam_free=_seam_free_mask(winner_t),
    )


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def default_scenes(texture_seed=None) -> Sequence[SceneSpec]:
    """The three canonical test scenes (fixed seeds, 128x96).

    wall:      single fronto-parallel plane 10 m ahead.
    road:      ground plane 1.5 m below the camera plus a wall at 15 m.
    corridor:  ground plane and two inward-angled walls, depths 2.5-7.5 m.

    ``texture_seed`` re-draws the plane textures while keeping the
    geometry; with the default None each scene uses its fixed seed.
    """
    intr = Intrinsics(fx=100.0, fy=100.0, cx=63.5, cy=47.5)
    width, height, baseline = 128, 96, 0.54

    def planes(seed, specs):
        # per-plane frequency bounds keep the rendered texture below the
        # aliasing limit of the most compressed visible image region
        if texture_seed is not None:
            seed = seed + 100003 * texture_seed
        rng = np.random.default_rng(seed)
        return tuple(
            PlaneSpec(
                normal=_unit(n),
                offset=float(h),
                texture=SinusoidTexture.random(
                    rng, freq_u_range=u_range, freq_v_range=v_range
                ),
            )
            for n, h, u_range, v_range in specs
        )

    wall = SceneSpec(
        name="wall",
        planes=planes(
            11, [((0.0, 0.0, -1.0), -10.0, (0.06, 0.18), (0.06, 0.18))]
        ),
        intrinsics=intr,
        width=width,
        height=height,
        baseline_m=baseline,
        ego_motion=np.array([0.12, -0.06, 0.30, 0.004, -0.003, 0.002]),
        seed=11,
    )
    road = SceneSpec(
        name="road",
        planes=planes(
            23,
            [
                # ground: u axis runs along depth and compresses near the
                # wall junction; keep it very smooth, contrast is lateral
                ((0.0, -1.0, 0.0), -1.5, (0.008, 0.022), (0.05, 0.15)),
                ((0.0, 0.0, -1.0), -15.0, (0.04, 0.12), (0.04, 0.12)),
            ],
        ),
        intrinsics=intr,
        width=width,
        height=height,
        baseline_m=baseline,
        ego_motion=np.array([0.10, -0.04, 0.40, 0.003, 0.005, -0.002]),
        seed=23,
    )
    corridor = SceneSpec(
        name="corridor",
        planes=planes(
            37,
            [
                ((0.0, -1.0, 0.0), -1.6, (0.015, 0.06), (0.08, 0.20)),
                ((0.94, 0.0, -0.342), -2.5, (0.02, 0.08), (0.08, 0.20)),
                ((-0.94, 0.0, -0.342), -2.5, (0.02, 0.08), (0.08, 0.20)),
            ],
        ),
        intrinsics=intr,
        width=width,
        height=height,
        baseline_m=baseline,
        ego_motion=np.array([0.08, -0.05, 0.35, 0.004, -0.006, 0.003]),
        seed=37,
    )
    return [wall, road, corridor]


def scene_by_name(name: str, texture_seed=None) -> SceneSpec:
    for spec in default_scenes(texture_seed):
        if spec.name == name:
            return spec
    known = ", ".join(s.name for s in default_scenes())
    raise KeyError(f"unknown scene '{name}' (known: {known})")
