"""Pinhole camera, rigid motions and target-to-source reprojection.

Pixel coordinates are ``(u, v)`` with ``u`` along columns and ``v`` along rows;
arrays are indexed ``[v, u]``. Poses map points from one camera frame into
another: ``X' = R(rotation) @ X + translation``, with the rotation stored as an
axis-angle vector.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from ._validation import check_field, check_vector
from .exceptions import DimensionError, DomainError

Z_EPS = 1e-6
DEPTH_MIN = 0.1
DEPTH_MAX = 100.0

# Below this angle the rotation coefficients switch to their Taylor series.
_SMALL_ANGLE = 1e-4


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError("principal point must lie inside the image")

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse_matrix(self):
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def scaled(self, factor):
        """Intrinsics for an image resampled by ``factor`` in both axes."""
        return Intrinsics(
            self.fx * factor,
            self.fy * factor,
            (self.cx + 0.5) * factor - 0.5,
            (self.cy + 0.5) * factor - 0.5,
            int(round(self.width * factor)),
            int(round(self.height * factor)),
        )

    def to_dict(self):
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


@dataclass(frozen=True, eq=False)
class Pose6:
    """6-DOF rigid motion: axis-angle ``rotation`` and ``translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_vector(self.rotation, 3, "rotation"))
        object.__setattr__(self, "translation", check_vector(self.translation, 3, "translation"))

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, vec):
        vec = check_vector(vec, 6, "pose vector")
        return cls(vec[:3], vec[3:])

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=np.float64)
        return cls(rotation_log(T[:3, :3]), T[:3, 3])

    @property
    def vector(self):
        return np.concatenate([self.rotation, self.translation])

    @property
    def rotation_matrix(self):
        return rotation_exp(self.rotation)

    def as_matrix(self):
        T = np.eye(4)
        T[:3, :3] = rotation_exp(self.rotation)
        T[:3, 3] = self.translation
        return T

    def apply(self, points):
        """Transform ``(..., 3)`` points."""
        return np.asarray(points) @ self.rotation_matrix.T + self.translation

    def __repr__(self):
        return f"Pose6(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


@dataclass(frozen=True)
class PixelGrid:
    """Continuous ``(u, v)`` coordinates per output pixel plus a validity flag."""

    coords: np.ndarray
    valid: np.ndarray

    @property
    def u(self):
        return self.coords[..., 0]

    @property
    def v(self):
        return self.coords[..., 1]

    @property
    def shape(self):
        return self.coords.shape[:2]


@dataclass(frozen=True, eq=False)
class DepthField:
    """Depth map stored as inverse depth; ``depth`` reports clamped metric depth."""

    inv_depth: np.ndarray
    d_min: float = DEPTH_MIN
    d_max: float = DEPTH_MAX

    def __post_init__(self):
        object.__setattr__(self, "inv_depth", check_field(self.inv_depth, "inv_depth", positive=True))

    @classmethod
    def from_depth(cls, depth, d_min=DEPTH_MIN, d_max=DEPTH_MAX):
        depth = np.clip(check_field(depth, "depth", positive=True), d_min, d_max)
        return cls(1.0 / depth, d_min, d_max)

    @property
    def depth(self):
        return np.clip(1.0 / self.inv_depth, self.d_min, self.d_max)

    @property
    def shape(self):
        return self.inv_depth.shape


@dataclass(frozen=True)
class ProjectionJacobian:
    """Derivatives of ``(u_s, v_s, z_s)`` per target pixel.

    ``d_depth[v, u, k]`` is the derivative of output ``k`` with respect to the
    depth at the same pixel (the Jacobian is diagonal across pixels);
    ``d_pose[v, u, k, j]`` is the derivative with respect to pose parameter
    ``j`` ordered ``(rx, ry, rz, tx, ty, tz)``.
    """

    d_depth: np.ndarray
    d_pose: np.ndarray

    def vjp(self, g_u, g_v, g_z):
        """Pull upstream gradients on ``(u_s, v_s, z_s)`` back to depth and pose."""
        g = np.stack([g_u, g_v, g_z], axis=-1)
        g_depth = np.einsum("hwk,hwk->hw", g, self.d_depth)
        g_pose = np.einsum("hwk,hwkj->j", g, self.d_pose)
        return g_depth, g_pose


def skew(w):
    w = np.asarray(w, dtype=np.float64)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def _rotation_coefficients(theta):
    """Return sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3."""
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0 + t2 * t2 / 120.0, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    s, c = np.sin(theta), np.cos(theta)
    return s / theta, (1.0 - c) / theta**2, (theta - s) / theta**3


def rotation_exp(w):
    """Rodrigues formula: axis-angle vector to rotation matrix."""
    w = np.asarray(w, dtype=np.float64)
    a, b, _ = _rotation_coefficients(float(np.linalg.norm(w)))
    W = skew(w)
    return np.eye(3) + a * W + b * (W @ W)


def left_jacobian(w):
    """Left Jacobian of SO(3): ``exp(w + d) ~= exp(J_l(w) d) exp(w)``."""
    w = np.asarray(w, dtype=np.float64)
    _, b, c = _rotation_coefficients(float(np.linalg.norm(w)))
    W = skew(w)
    return np.eye(3) + b * W + c * (W @ W)


def rotation_log(R):
    """Rotation matrix to canonical axis-angle vector (norm in [0, pi])."""
    return Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_rotvec()


def compose(a, b):
    """Return ``a * b``: apply ``b`` first, then ``a``."""
    Ra, Rb = rotation_exp(a.rotation), rotation_exp(b.rotation)
    return Pose6(rotation_log(Ra @ Rb), Ra @ b.translation + a.translation)


def invert(a):
    R = rotation_exp(a.rotation)
    return Pose6(-a.rotation, -R.T @ a.translation)


def pixel_lattice(height, width):
    """Integer pixel coordinates as an (H, W, 2) array of ``(u, v)``."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([u, v], axis=-1)


def _as_depth_array(depth):
    if isinstance(depth, DepthField):
        return depth.depth
    return check_field(depth, "depth")


def project_points(pixels, depth, pose, K, jacobian=False):
    """Back-project ``pixels`` at ``depth``, move by ``pose`` and re-project.

    ``pixels`` is ``(..., 2)`` and ``depth`` has the matching leading shape.
    Returns ``(coords, z, ok)`` and, with ``jacobian=True``, a
    :class:`ProjectionJacobian`. ``ok`` is False where the transformed point
    has ``z <= Z_EPS``; coordinates there are set to ``-1``.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if pixels.shape[:-1] != depth.shape or pixels.shape[-1] != 2:
        raise DimensionError(f"pixels {pixels.shape} do not match depth {depth.shape}")
    if not np.all(np.isfinite(depth)):
        raise DomainError("depth contains non-finite values")

    R = rotation_exp(pose.rotation)
    rays = np.stack(
        [(pixels[..., 0] - K.cx) / K.fx, (pixels[..., 1] - K.cy) / K.fy, np.ones_like(depth)],
        axis=-1,
    )
    rotated_rays = rays @ R.T
    Y = depth[..., None] * rotated_rays + pose.translation
    z = Y[..., 2]
    ok = z > Z_EPS
    z_safe = np.where(ok, z, 1.0)
    # Offsets from the input pixel, written so that they vanish exactly under
    # the identity motion (no K K^-1 round-off at the image border).
    u = pixels[..., 0] + K.fx * (Y[..., 0] - z * rays[..., 0]) / z_safe
    v = pixels[..., 1] + K.fy * (Y[..., 1] - z * rays[..., 1]) / z_safe
    coords = np.where(ok[..., None], np.stack([u, v], axis=-1), -1.0)
    if not jacobian:
        return coords, z, ok

    # d(u, v, z)/dY per point, shape (..., 3, 3)
    inv_z = np.where(ok, 1.0 / z_safe, 0.0)
    dY = np.zeros(depth.shape + (3, 3))
    dY[..., 0, 0] = K.fx * inv_z
    dY[..., 0, 2] = -K.fx * Y[..., 0] * inv_z**2
    dY[..., 1, 1] = K.fy * inv_z
    dY[..., 1, 2] = -K.fy * Y[..., 1] * inv_z**2
    dY[..., 2, 2] = 1.0

    d_depth = np.einsum("...kj,...j->...k", dY, rotated_rays)

    # dY/d(rotation) = -[R X]_x J_l(w), with R X = Y - t
    RX = Y - pose.translation
    J_l = left_jacobian(pose.rotation)
    neg_skew = np.zeros(depth.shape + (3, 3))
    neg_skew[..., 0, 1] = RX[..., 2]
    neg_skew[..., 0, 2] = -RX[..., 1]
    neg_skew[..., 1, 0] = -RX[..., 2]
    neg_skew[..., 1, 2] = RX[..., 0]
    neg_skew[..., 2, 0] = RX[..., 1]
    neg_skew[..., 2, 1] = -RX[..., 0]
    dY_dw = neg_skew @ J_l
    d_pose = np.concatenate([dY @ dY_dw, dY], axis=-1)
    d_depth[..., :2] *= ok[..., None]
    d_pose[..., :2, :] *= ok[..., None, None]
    return coords, z, ok, ProjectionJacobian(d_depth, d_pose)


def _check_grid_size(depth, K):
    if depth.shape != K.shape:
        raise DimensionError(f"depth has shape {depth.shape} but intrinsics describe {K.shape}")


def in_bounds(coords, height, width):
    u, v = coords[..., 0], coords[..., 1]
    return (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1)


def project(depth, pose, K):
    """Map every target pixel into the source view.

    Returns ``(grid, projected_depth)``: ``grid.coords`` holds the continuous
    source coordinates, ``grid.valid`` is True where the point lies in front
    of the source camera and inside the image, and ``projected_depth`` is the
    z-coordinate of the transformed point (the target depth expressed in the
    source frame).
    """
    depth = _as_depth_array(depth)
    _check_grid_size(depth, K)
    coords, z, ok = project_points(pixel_lattice(K.height, K.width), depth, pose, K)
    return PixelGrid(coords, ok & in_bounds(coords, K.height, K.width)), z


def project_grad(depth, pose, K):
    """Like :func:`project` but also returns the :class:`ProjectionJacobian`."""
    depth = _as_depth_array(depth)
    _check_grid_size(depth, K)
    coords, z, ok, jac = project_points(pixel_lattice(K.height, K.width), depth, pose, K, jacobian=True)
    return PixelGrid(coords, ok & in_bounds(coords, K.height, K.width)), z, jac
