"""Dense grid storage, bilinear sampling, finite differences, edge weights.

Grids store row-major float64 data of shape (H, W, C) and are treated as
immutable after construction.  Shared value conventions:

* images: intensities in [0, 1];
* inverse depth: 1/meters, recovered depth is ``1 / (d_inv + 1e-4)``;
* normals: unit 3-vectors in the camera frame, camera-facing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GridTooSmall, NotUnit, ResolutionMismatch

# Offset in the inverse-depth-to-depth conversion; keeps depth finite when
# the inverse depth hits zero (points at infinity).
INV_DEPTH_EPS = 1e-4


class ImageGrid:
    """Dense H x W x C grid of finite real values."""

    __slots__ = ("data",)

    def __init__(self, data):
        data = np.asarray(data, dtype=float)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.size == 0:
            raise ValueError("grid data must be a non-empty HxWxC array")
        if not np.all(np.isfinite(data)):
            raise ValueError("grid data must be finite")
        self.data = np.ascontiguousarray(data)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    @property
    def plane(self):
        """(H, W) view of a single-channel grid."""
        if self.channels != 1:
            raise ValueError("plane is only defined for 1-channel grids")
        return self.data[:, :, 0]

    def same_resolution(self, other):
        return self.height == other.height and self.width == other.width

    def __repr__(self):
        return f"ImageGrid({self.height}x{self.width}x{self.channels})"


class InverseDepthMap:
    """Single-channel grid of per-pixel inverse depth (1/meters, >= 0)."""

    __slots__ = ("grid",)

    def __init__(self, grid):
        if isinstance(grid, np.ndarray):
            grid = ImageGrid(grid)
        if grid.channels != 1:
            raise ValueError("inverse depth map must have one channel")
        if grid.data.min() < -1e-12:
            raise ValueError("inverse depth must be non-negative")
        self.grid = grid

    @property
    def values(self):
        return self.grid.plane

    @property
    def depth(self):
        """Per-pixel metric depth, 1 / (d_inv + 1e-4)."""
        return depth_from_inverse(self.values)


class NormalMap:
    """Three-channel grid of per-pixel unit normals in the camera frame."""

    __slots__ = ("grid",)

    def __init__(self, grid):
        if isinstance(grid, np.ndarray):
            grid = ImageGrid(grid)
        if grid.channels != 3:
            raise ValueError("normal map must have three channels")
        norms = np.linalg.norm(grid.data, axis=-1)
        err = np.abs(norms - 1.0).max()
        if err > 1e-6:
            raise NotUnit(f"normals deviate from unit norm by {err:.2e}")
        self.grid = grid

    @property
    def vectors(self):
        return self.grid.data


@dataclass(frozen=True)
class ValidityMask:
    """Per-pixel boolean mask; False pixels contribute exactly zero to
    losses and gradients."""

    mask: np.ndarray

    @property
    def count(self):
        return int(self.mask.sum())

    @property
    def fraction(self):
        return float(self.mask.mean()) if self.mask.size else 0.0


def depth_from_inverse(d_inv):
    """Metric depth from inverse depth: 1 / (d_inv + 1e-4)."""
    return 1.0 / (np.asarray(d_inv, dtype=float) + INV_DEPTH_EPS)


def inverse_from_depth(depth):
    """Inverse of :func:`depth_from_inverse`: d_inv = 1/depth - 1e-4."""
    return 1.0 / np.asarray(depth, dtype=float) - INV_DEPTH_EPS


@dataclass
class SampleTaps:
    """Vectorized bilinear sample with everything needed for chain rules.

    ``values``/``dx``/``dy`` carry the interpolated value and its analytic
    derivative w.r.t. the sample coordinates, per channel.  ``ix0/iy0`` are
    the top-left tap indices (clipped) and ``tx/ty`` the cell fractions,
    so downstream code can scatter gradients back onto the source grid.
    Out-of-bounds samples have ``valid`` False and zero values/derivatives.
    """

    values: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    valid: np.ndarray
    ix0: np.ndarray
    iy0: np.ndarray
    tx: np.ndarray
    ty: np.ndarray

    def weights(self):
        """The four tap weights (w00, w10, w01, w11)."""
        tx, ty = self.tx, self.ty
        return (
            (1.0 - tx) * (1.0 - ty),
            tx * (1.0 - ty),
            (1.0 - tx) * ty,
            tx * ty,
        )


def sample_bilinear(data, qx, qy):
    """Bilinear interpolation of (H, W, C) data at continuous coordinates.

    ``qx``/``qy`` may have any matching shape.  Samples outside
    [0, W-1] x [0, H-1] return zeros with ``valid`` False.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim == 2:
        data = data[:, :, None]
    height, width, channels = data.shape
    qx = np.asarray(qx, dtype=float)
    qy = np.asarray(qy, dtype=float)

    valid = (qx >= 0.0) & (qx <= width - 1.0) & (qy >= 0.0) & (qy <= height - 1.0)
    cx = np.where(valid, qx, 0.0)
    cy = np.where(valid, qy, 0.0)

    ix0 = np.clip(np.floor(cx).astype(np.int64), 0, max(width - 2, 0))
    iy0 = np.clip(np.floor(cy).astype(np.int64), 0, max(height - 2, 0))
    tx = cx - ix0
    ty = cy - iy0

    flat = data.reshape(-1, channels)
    base = (iy0 * width + ix0).ravel()
    shape = qx.shape + (channels,)
    f00 = np.take(flat, base, axis=0).reshape(shape)
    f10 = np.take(flat, base + (1 if width > 1 else 0), axis=0).reshape(shape)
    f01 = np.take(flat, base + (width if height > 1 else 0), axis=0).reshape(shape)
    f11 = np.take(
        flat,
        base + ((width if height > 1 else 0) + (1 if width > 1 else 0)),
        axis=0,
    ).reshape(shape)

    txe = tx[..., None]
    tye = ty[..., None]
    top = f00 + txe * (f10 - f00)
    bot = f01 + txe * (f11 - f01)
    values = top + tye * (bot - top)
    dx = (f10 - f00) + tye * ((f11 - f01) - (f10 - f00))
    dy = bot - top

    ve = valid[..., None]
    values = np.where(ve, values, 0.0)
    dx = np.where(ve, dx, 0.0)
    dy = np.where(ve, dy, 0.0)
    return SampleTaps(values, dx, dy, valid, ix0, iy0, tx, ty)


def scatter_sample_gradient(shape, taps: SampleTaps, upstream):
    """Accumulate d(loss)/d(source grid) for a bilinear sample.

    ``upstream`` is d(loss)/d(values) with the same shape as
    ``taps.values``; returns an array of ``shape`` (H, W, C).  Invalid
    samples contribute nothing.
    """
    height, width, channels = shape
    size = height * width * channels
    up = np.where(taps.valid[..., None], upstream, 0.0)
    w00, w10, w01, w11 = taps.weights()
    base = (
        (taps.iy0 * width + taps.ix0)[..., None] * channels
        + np.arange(channels)
    ).ravel()
    dx = channels if width > 1 else 0
    dy = width * channels if height > 1 else 0

    grad = np.bincount(base, (w00[..., None] * up).ravel(), minlength=size)
    grad += np.bincount(
        base + dx, (w10[..., None] * up).ravel(), minlength=size
    )
    grad += np.bincount(
        base + dy, (w01[..., None] * up).ravel(), minlength=size
    )
    grad += np.bincount(
        base + dy + dx, (w11[..., None] * up).ravel(), minlength=size
    )
    return grad.reshape(height, width, channels)


def gather_all_taps_true(flags, taps: SampleTaps):
    """True where every tap of a sample lands on a True flag pixel."""
    height, width = flags.shape
    flat = flags.ravel()
    base = (taps.iy0 * width + taps.ix0).ravel()
    dx = 1 if width > 1 else 0
    dy = width if height > 1 else 0
    out = (
        flat[base]
        & flat[base + dx]
        & flat[base + dy]
        & flat[base + dy + dx]
    )
    return out.reshape(taps.ix0.shape)


def cross3(a, b):
    """Per-row cross product of (..., 3) arrays (faster than np.cross)."""
    a = np.asarray(a)
    b = np.asarray(b)
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    out[..., 0] = a1 * b2 - a2 * b1
    out[..., 1] = a2 * b0 - a0 * b2
    out[..., 2] = a0 * b1 - a1 * b0
    return out


def bilinear_sample(src: ImageGrid, q):
    """Sample one continuous pixel location from a grid.

    Returns (value, d_value_d_q, valid): per-channel values, their (C, 2)
    analytic derivative w.r.t. (qx, qy), and an in-bounds flag.
    """
    taps = sample_bilinear(src.data, np.asarray([q[0]], dtype=float), np.asarray([q[1]], dtype=float))
    value = taps.values[0]
    grad = np.stack([taps.dx[0], taps.dy[0]], axis=1)
    return value, grad, bool(taps.valid[0])


def forward_differences(data):
    """Forward differences along x and y; the last column/row is zero.

    Accepts (H, W) or (H, W, C); axes of size 1 yield all-zero gradients.
    """
    data = np.asarray(data, dtype=float)
    dx = np.zeros_like(data)
    dy = np.zeros_like(data)
    if data.shape[1] > 1:
        dx[:, :-1] = data[:, 1:] - data[:, :-1]
    if data.shape[0] > 1:
        dy[:-1, :] = data[1:, :] - data[:-1, :]
    return dx, dy


def spatial_gradients(grid: ImageGrid):
    """Per-channel forward-difference gradients (d/dx, d/dy) of a grid."""
    if grid.width < 2 or grid.height < 2:
        raise GridTooSmall("spatial gradients need at least a 2x2 grid")
    dx, dy = forward_differences(grid.data)
    return ImageGrid(dx), ImageGrid(dy)


def edge_weight(image: ImageGrid, alpha=1.0, beta=1.0):
    """Edge-aware weight G = exp(-alpha * |grad I|^beta), one channel.

    The image gradient magnitude is the Euclidean norm of the forward
    differences after averaging them across channels; weights lie in
    (0, 1] and shrink at strong image edges.
    """
    dx, dy = forward_differences(image.data)
    gx = dx.mean(axis=2)
    gy = dy.mean(axis=2)
    mag = np.hypot(gx, gy)
    return ImageGrid(np.exp(-alpha * mag**beta))


def normalize_vectors(vectors, fallback=(0.0, 0.0, -1.0), min_norm=1e-12):
    """Normalize (..., 3) vectors; near-zero rows become ``fallback``."""
    vectors = np.asarray(vectors, dtype=float)
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    ok = norms[..., 0] > min_norm
    safe = np.where(norms > min_norm, norms, 1.0)
    out = vectors / safe
    out[~ok] = np.asarray(fallback, dtype=float)
    return out


def orient_camera_facing(normals, rays):
    """Flip normals so that <n, ray> < 0 at every pixel (camera-facing)."""
    normals = np.asarray(normals, dtype=float)
    dots = np.einsum("...k,...k->...", normals, rays)
    flip = dots >= 0.0
    out = normals.copy()
    out[flip] *= -1.0
    return out


def check_same_resolution(*grids):
    """Raise ResolutionMismatch unless all grids share H and W."""
    shapes = set()
    for g in grids:
        data = g.data if isinstance(g, ImageGrid) else g
        shapes.add((data.shape[0], data.shape[1]))
    if len(shapes) > 1:
        raise ResolutionMismatch(f"grid resolutions differ: {sorted(shapes)}")
