"""Bilinear resampling at continuous coordinates and inverse warping."""

from dataclasses import dataclass

import numpy as np

from ._validation import check_image
from .exceptions import DimensionError
from .geometry import PixelGrid, in_bounds, project


@dataclass(frozen=True)
class WarpResult:
    """Synthesized image (zero where invalid) and its validity map."""

    image: np.ndarray
    validity: np.ndarray


@dataclass(frozen=True)
class BilinearJacobian:
    """Derivatives of a bilinear sample.

    ``du`` and ``dv`` are ``(H, W, C)`` derivatives of the output with respect
    to the sampling coordinates. ``index``/``weight`` hold, for each output
    pixel, the four flat source indices and their interpolation weights, so
    the derivative with respect to source intensities is the sparse matrix
    they describe.
    """

    du: np.ndarray
    dv: np.ndarray
    index: np.ndarray
    weight: np.ndarray
    src_shape: tuple

    def grid_vjp(self, upstream):
        """Upstream ``(H, W, C)`` gradient to per-pixel gradients on ``u`` and ``v``."""
        return (upstream * self.du).sum(axis=-1), (upstream * self.dv).sum(axis=-1)

    def src_vjp(self, upstream):
        """Upstream ``(H, W, C)`` gradient to a gradient on the source image."""
        hs, ws, c = self.src_shape
        out = np.empty((hs * ws, c))
        idx = self.index.reshape(-1, 4)
        w = self.weight.reshape(-1, 4)
        up = upstream.reshape(-1, c)
        flat_idx = idx.T.reshape(-1)
        for ch in range(c):
            contrib = (w * up[:, ch : ch + 1]).T.reshape(-1)
            out[:, ch] = np.bincount(flat_idx, weights=contrib, minlength=hs * ws)
        return out.reshape(hs, ws, c)


def _neighbours(grid, hs, ws):
    """Corner indices and fractional offsets; right-limit convention at lattice lines."""
    valid = grid.valid & in_bounds(grid.coords, hs, ws)
    u = np.where(valid, grid.coords[..., 0], 0.0)
    v = np.where(valid, grid.coords[..., 1], 0.0)
    u0 = np.floor(u).astype(np.intp)
    v0 = np.floor(v).astype(np.intp)
    a = u - u0
    b = v - v0
    # Coordinates exactly on the last row/column: keep the corner inside the image.
    u1 = np.minimum(u0 + 1, ws - 1)
    v1 = np.minimum(v0 + 1, hs - 1)
    return valid, u0, v0, u1, v1, a, b


def _as_grid(grid):
    if not isinstance(grid, PixelGrid):
        coords = np.asarray(grid, dtype=np.float64)
        grid = PixelGrid(coords, np.ones(coords.shape[:2], dtype=bool))
    return grid


def bilinear_sample(src, grid):
    """Sample ``src`` (H_s, W_s[, C]) at ``grid`` coordinates.

    Points that are flagged invalid or fall outside ``[0, W_s-1] x [0, H_s-1]``
    produce zeros and ``validity=False``.
    """
    src = check_image(src, "src")
    grid = _as_grid(grid)
    hs, ws, _ = src.shape
    valid, u0, v0, u1, v1, a, b = _neighbours(grid, hs, ws)
    a = a[..., None]
    b = b[..., None]
    out = (
        (1 - a) * (1 - b) * src[v0, u0]
        + a * (1 - b) * src[v0, u1]
        + (1 - a) * b * src[v1, u0]
        + a * b * src[v1, u1]
    )
    out = np.where(valid[..., None], out, 0.0)
    return WarpResult(out, valid)


def bilinear_sample_grad(src, grid):
    """Return ``(WarpResult, BilinearJacobian)`` for a bilinear sample."""
    src = check_image(src, "src")
    grid = _as_grid(grid)
    hs, ws, _ = src.shape
    valid, u0, v0, u1, v1, a, b = _neighbours(grid, hs, ws)
    i00, i01, i10, i11 = src[v0, u0], src[v0, u1], src[v1, u0], src[v1, u1]
    a3, b3, m = a[..., None], b[..., None], valid[..., None]
    out = (1 - a3) * (1 - b3) * i00 + a3 * (1 - b3) * i01 + (1 - a3) * b3 * i10 + a3 * b3 * i11
    du = (1 - b3) * (i01 - i00) + b3 * (i11 - i10)
    dv = (1 - a3) * (i10 - i00) + a3 * (i11 - i01)
    index = np.stack([v0 * ws + u0, v0 * ws + u1, v1 * ws + u0, v1 * ws + u1], axis=-1)
    weight = np.stack([(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b], axis=-1) * valid[..., None]
    jac = BilinearJacobian(np.where(m, du, 0.0), np.where(m, dv, 0.0), index, weight, src.shape)
    return WarpResult(np.where(m, out, 0.0), valid), jac


def warp_image(src, depth, pose, K):
    """Synthesize the target view by sampling ``src`` through depth and pose."""
    src = check_image(src, "src")
    if src.shape[:2] != K.shape:
        raise DimensionError(f"source image {src.shape[:2]} does not match intrinsics {K.shape}")
    grid, _ = project(depth, pose, K)
    return bilinear_sample(src, grid)
