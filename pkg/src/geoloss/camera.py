"""Pinhole camera model and SE(3) rigid transforms.

Conventions, fixed once for the whole library:

* Pixel coordinates are (x = column, y = row) with the origin at the
  center of the top-left pixel.
* Camera frame: x right, y down, z forward (along the optical axis).
* A twist ``xi`` is a 6-vector ``(t1, t2, t3, w1, w2, w3)``: translation
  first (meters), rotation second (radians, axis-angle).
* ``RigidTransform`` maps points from the current frame into the target
  frame: ``X_target = R @ X + t``.  Transport of target-frame geometry
  back into the current frame uses the inverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonPositiveDepth, NotUnit

# Below this rotation angle the exp/log maps switch to Taylor expansions.
SMALL_ANGLE = 1e-6

# Orthonormality tolerance for rotation matrices.
ROTATION_TOL = 1e-9


def skew(v):
    """3x3 skew-symmetric matrix of a 3-vector (cross-product operator)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega):
    """Rodrigues rotation matrix from an axis-angle 3-vector."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    w = skew(omega)
    ww = w @ w
    if theta < SMALL_ANGLE:
        # second-order Taylor; avoids division by theta
        return np.eye(3) + w + 0.5 * ww
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * w + b * ww


def so3_log(rotation):
    """Axis-angle 3-vector from a rotation matrix (angle in [0, pi])."""
    rotation = np.asarray(rotation, dtype=float)
    trace = np.clip((np.trace(rotation) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(trace)
    if theta < SMALL_ANGLE:
        # vee of the skew part, first-order
        return 0.5 * np.array(
            [
                rotation[2, 1] - rotation[1, 2],
                rotation[0, 2] - rotation[2, 0],
                rotation[1, 0] - rotation[0, 1],
            ]
        )
    if theta > np.pi - 1e-6:
        # near pi the skew part vanishes; recover the axis from the
        # symmetric part R ~ 2*axis*axis^T - I
        diag = np.clip((np.diag(rotation) + 1.0) * 0.5, 0.0, None)
        axis = np.sqrt(diag)
        k = int(np.argmax(axis))
        if axis[k] > 0.0:
            for j in range(3):
                if j != k:
                    axis[j] = np.copysign(
                        axis[j], rotation[k, j] + rotation[j, k]
                    )
        norm = np.linalg.norm(axis)
        if norm > 0.0:
            axis = axis / norm
        return theta * axis
    vee = 0.5 * np.array(
        [
            rotation[2, 1] - rotation[1, 2],
            rotation[0, 2] - rotation[2, 0],
            rotation[1, 0] - rotation[0, 1],
        ]
    )
    return theta / np.sin(theta) * vee


def so3_left_jacobian(omega):
    """Left Jacobian of SO(3); maps twists to the translation of exp."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    w = skew(omega)
    ww = w @ w
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * w + ww / 6.0
    b = (1.0 - np.cos(theta)) / theta**2
    c = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + b * w + c * ww


def so3_left_jacobian_inverse(omega):
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    w = skew(omega)
    ww = w @ w
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * w + ww / 12.0
    coef = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (
        2.0 * theta * np.sin(theta)
    )
    return np.eye(3) - 0.5 * w + coef * ww


def _se3_q_matrix(rho, omega):
    """Barfoot Q block coupling rotation perturbations into translation."""
    theta = np.linalg.norm(omega)
    rx = skew(rho)
    wx = skew(omega)
    wrx = wx @ rx
    rwx = rx @ wx
    wrwx = wx @ rx @ wx
    wwrx = wx @ wx @ rx
    rwwx = rx @ wx @ wx
    wrwwx = wrwx @ wx
    wwrwx = wx @ wrwx
    if theta < 1e-3:
        t2 = theta * theta
        c1 = 1.0 / 6.0 - t2 / 120.0
        c2 = 1.0 / 24.0 - t2 / 720.0
        c3 = 1.0 / 120.0 - t2 / 2520.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        c1 = (theta - s) / theta**3
        c2 = (0.5 * theta**2 + c - 1.0) / theta**4
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta**5)
    return (
        0.5 * rx
        + c1 * (wrx + rwx + wrwx)
        + c2 * (wwrx + rwwx - 3.0 * wrwx)
        + c3 * (wrwwx + wwrwx)
    )


def se3_left_jacobian(xi):
    """6x6 left Jacobian of SE(3) at ``xi = (rho, omega)``.

    Satisfies exp(xi + d) ~ exp(J @ d) . exp(xi) to first order, which is
    the chain rule used to express loss gradients w.r.t. the global twist.
    """
    xi = np.asarray(xi, dtype=float)
    rho, omega = xi[:3], xi[3:]
    j = so3_left_jacobian(omega)
    out = np.zeros((6, 6))
    out[:3, :3] = j
    out[3:, 3:] = j
    out[:3, 3:] = _se3_q_matrix(rho, omega)
    return out


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole calibration: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0.0 and self.fy > 0.0):
            raise ValueError("focal lengths must be positive")
        if not np.all(np.isfinite([self.fx, self.fy, self.cx, self.cy])):
            raise ValueError("intrinsics must be finite")

    def matrix(self):
        return np.array(
            [
                [self.fx, 0.0, self.cx],
                [0.0, self.fy, self.cy],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True)
class Ray:
    """Backprojected pixel direction K^-1 p, normalized so that z = 1."""

    xtilde: np.ndarray

    def __post_init__(self):
        if self.xtilde.shape != (3,) or self.xtilde[2] != 1.0:
            raise ValueError("ray must be a 3-vector with third component 1")


class RigidTransform:
    """SE(3) element: cached rotation/translation plus its twist vector.

    Construct via :meth:`from_xi` (exponential map), :meth:`from_rt`, or
    :meth:`identity`.  Instances are immutable; all methods return new
    objects or arrays.
    """

    __slots__ = ("rotation", "translation", "xi")

    def __init__(self, rotation, translation, xi=None):
        rotation = np.asarray(rotation, dtype=float).reshape(3, 3)
        translation = np.asarray(translation, dtype=float).reshape(3)
        err = np.abs(rotation.T @ rotation - np.eye(3)).max()
        if err > 1e-7:
            raise ValueError(f"rotation is not orthonormal (err={err:.2e})")
        if np.linalg.det(rotation) < 0.0:
            raise ValueError("rotation has negative determinant")
        self.rotation = rotation
        self.translation = translation
        if xi is None:
            omega = so3_log(rotation)
            rho = so3_left_jacobian_inverse(omega) @ translation
            xi = np.concatenate([rho, omega])
        self.xi = np.asarray(xi, dtype=float).reshape(6)
        self.rotation.setflags(write=False)
        self.translation.setflags(write=False)
        self.xi.setflags(write=False)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3), np.zeros(6))

    @classmethod
    def from_xi(cls, xi):
        xi = np.asarray(xi, dtype=float).reshape(6)
        if not np.all(np.isfinite(xi)):
            raise ValueError("twist must be finite")
        rho, omega = xi[:3], xi[3:]
        rotation = so3_exp(omega)
        translation = so3_left_jacobian(omega) @ rho
        return cls(rotation, translation, xi)

    @classmethod
    def from_rt(cls, rotation, translation):
        return cls(rotation, translation)

    def inverse(self):
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other):
        """Transform equal to applying ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other):
        return self.compose(other)

    def matrix(self):
        """4x4 homogeneous matrix."""
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def apply(self, points):
        """R @ X + t for points of shape (..., 3)."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def apply_inverse(self, points):
        """R^T (X - t): transport from the target frame back."""
        points = np.asarray(points, dtype=float)
        return (points - self.translation) @ self.rotation

    def __repr__(self):
        return f"RigidTransform(xi={np.array2string(self.xi, precision=6)})"


def se3_exp(xi) -> RigidTransform:
    """Exponential map from a 6-vector twist to a rigid transform."""
    return RigidTransform.from_xi(xi)


def se3_log(transform: RigidTransform):
    """Twist vector of a transform (inverse of :func:`se3_exp`)."""
    return np.array(transform.xi)


def backproject(p, intrinsics: Intrinsics) -> Ray:
    """Homogeneous ray K^-1 p of a pixel, with unit z component."""
    px, py = float(p[0]), float(p[1])
    if not (np.isfinite(px) and np.isfinite(py)):
        raise ValueError("pixel coordinates must be finite")
    return Ray(
        np.array(
            [
                (px - intrinsics.cx) / intrinsics.fx,
                (py - intrinsics.cy) / intrinsics.fy,
                1.0,
            ]
        )
    )


def pixel_rays(width, height, intrinsics: Intrinsics):
    """(H, W, 3) grid of backprojected rays for every integer pixel."""
    xs = (np.arange(width, dtype=float) - intrinsics.cx) / intrinsics.fx
    ys = (np.arange(height, dtype=float) - intrinsics.cy) / intrinsics.fy
    rays = np.empty((height, width, 3))
    rays[..., 0] = xs[None, :]
    rays[..., 1] = ys[:, None]
    rays[..., 2] = 1.0
    return rays


def project(point, intrinsics: Intrinsics):
    """Pixel coordinates of a camera-frame 3D point.

    Raises :class:`NonPositiveDepth` for points at or behind the camera;
    callers working on dense grids should use :func:`project_points` and
    mask instead.
    """
    point = np.asarray(point, dtype=float).reshape(3)
    if point[2] <= 0.0:
        raise NonPositiveDepth(f"point depth {point[2]} is not positive")
    return np.array(
        [
            intrinsics.fx * point[0] / point[2] + intrinsics.cx,
            intrinsics.fy * point[1] / point[2] + intrinsics.cy,
        ]
    )


def project_points(points, intrinsics: Intrinsics, z_min=1e-6):
    """Dense projection of (..., 3) points.

    Returns (px, py, valid); invalid entries (z <= z_min) project to 0 and
    must be masked by the caller.
    """
    points = np.asarray(points, dtype=float)
    z = points[..., 2]
    valid = z > z_min
    safe_z = np.where(valid, z, 1.0)
    px = np.where(
        valid, intrinsics.fx * points[..., 0] / safe_z + intrinsics.cx, 0.0
    )
    py = np.where(
        valid, intrinsics.fy * points[..., 1] / safe_z + intrinsics.cy, 0.0
    )
    return px, py, valid


def transform_point(transform: RigidTransform, point):
    """R @ X + t for a single 3-vector."""
    return transform.apply(np.asarray(point, dtype=float).reshape(3))


def transform_normal(rotation, normal):
    """Transport a unit normal with the inverse rotation, R^T n.

    The forward transform maps points from the present frame into the
    target frame; normals estimated in the target frame are brought back
    with the transposed rotation, which preserves the norm.
    """
    if isinstance(rotation, RigidTransform):
        rotation = rotation.rotation
    rotation = np.asarray(rotation, dtype=float).reshape(3, 3)
    normal = np.asarray(normal, dtype=float).reshape(3)
    norm = np.linalg.norm(normal)
    if abs(norm - 1.0) > 1e-6:
        raise NotUnit(f"normal has norm {norm}")
    return rotation.T @ normal
