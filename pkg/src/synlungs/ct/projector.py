"""Ray-driven fan-beam projector (Siddon traversal) and its adjoint."""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from ..volume import VolumeKind, VoxelVolume
from .geometry import ScannerConfig, Sinogram

_EPS = 1e-12


@njit(cache=True, nogil=True)
def _traverse(img, out, x_edge0, y_edge0, dx, dy, sx, sy, ex, ey, weight, adjoint):
    """Walk the segment (sx, sy) -> (ex, ey) through the pixel grid.

    Forward mode returns the exact line integral of ``img``. Adjoint mode
    adds ``weight * segment_length`` into ``out`` and returns 0.
    """
    ny, nx = img.shape
    rx = ex - sx
    ry = ey - sy
    length = math.sqrt(rx * rx + ry * ry)
    x_edge1 = x_edge0 + nx * dx
    y_edge1 = y_edge0 + ny * dy

    a_min = 0.0
    a_max = 1.0
    if abs(rx) > _EPS:
        a1 = (x_edge0 - sx) / rx
        a2 = (x_edge1 - sx) / rx
        a_min = max(a_min, min(a1, a2))
        a_max = min(a_max, max(a1, a2))
    elif sx <= x_edge0 or sx >= x_edge1:
        return 0.0
    if abs(ry) > _EPS:
        a1 = (y_edge0 - sy) / ry
        a2 = (y_edge1 - sy) / ry
        a_min = max(a_min, min(a1, a2))
        a_max = min(a_max, max(a1, a2))
    elif sy <= y_edge0 or sy >= y_edge1:
        return 0.0
    if a_min >= a_max:
        return 0.0

    px = (sx + a_min * rx - x_edge0) / dx
    py = (sy + a_min * ry - y_edge0) / dy
    if rx >= 0:
        ix = int(math.floor(px))
    else:
        ix = int(math.ceil(px)) - 1
    if ry >= 0:
        iy = int(math.floor(py))
    else:
        iy = int(math.ceil(py)) - 1
    ix = min(max(ix, 0), nx - 1)
    iy = min(max(iy, 0), ny - 1)

    if rx > _EPS:
        ax_next = (x_edge0 + (ix + 1) * dx - sx) / rx
        ax_step = dx / rx
        step_x = 1
    elif rx < -_EPS:
        ax_next = (x_edge0 + ix * dx - sx) / rx
        ax_step = -dx / rx
        step_x = -1
    else:
        ax_next = math.inf
        ax_step = math.inf
        step_x = 0
    if ry > _EPS:
        ay_next = (y_edge0 + (iy + 1) * dy - sy) / ry
        ay_step = dy / ry
        step_y = 1
    elif ry < -_EPS:
        ay_next = (y_edge0 + iy * dy - sy) / ry
        ay_step = -dy / ry
        step_y = -1
    else:
        ay_next = math.inf
        ay_step = math.inf
        step_y = 0

    total = 0.0
    a = a_min
    while a < a_max:
        if ax_next <= ay_next:
            a_next = min(ax_next, a_max)
            seg = a_next - a
            if adjoint:
                out[iy, ix] += weight * seg * length
            else:
                total += seg * img[iy, ix]
            ix += step_x
            ax_next += ax_step
        else:
            a_next = min(ay_next, a_max)
            seg = a_next - a
            if adjoint:
                out[iy, ix] += weight * seg * length
            else:
                total += seg * img[iy, ix]
            iy += step_y
            ay_next += ay_step
        a = a_next
        if ix < 0 or ix >= nx or iy < 0 or iy >= ny:
            break
    return total * length


@njit(cache=True, nogil=True)
def _fan_rays(angles, u, siso_d, sid, v):
    c = math.cos(angles[v])
    s = math.sin(angles[v])
    sx = siso_d * c
    sy = siso_d * s
    back = sid - siso_d
    dx0 = -back * c
    dy0 = -back * s
    return sx, sy, dx0, dy0, -s, c


@njit(cache=True, nogil=True)
def _project_fan(img, x_edge0, y_edge0, dx, dy, angles, u, siso_d, sid):
    n_views = angles.shape[0]
    n_cols = u.shape[0]
    sino = np.zeros((n_views, n_cols))
    dummy = np.zeros((1, 1))
    for v in range(n_views):
        sx, sy, dx0, dy0, eux, euy = _fan_rays(angles, u, siso_d, sid, v)
        for k in range(n_cols):
            ex = dx0 + u[k] * eux
            ey = dy0 + u[k] * euy
            sino[v, k] = _traverse(img, dummy, x_edge0, y_edge0, dx, dy, sx, sy, ex, ey, 0.0, False)
    return sino


@njit(cache=True, nogil=True)
def _backproject_fan(sino, shape_y, shape_x, x_edge0, y_edge0, dx, dy, angles, u, siso_d, sid):
    out = np.zeros((shape_y, shape_x))
    for v in range(angles.shape[0]):
        sx, sy, dx0, dy0, eux, euy = _fan_rays(angles, u, siso_d, sid, v)
        for k in range(u.shape[0]):
            w = sino[v, k]
            if w == 0.0:
                continue
            ex = dx0 + u[k] * eux
            ey = dy0 + u[k] * euy
            _traverse(out, out, x_edge0, y_edge0, dx, dy, sx, sy, ex, ey, w, True)
    return out


def line_integral(image: np.ndarray, spacing_xy, origin_xy, start, end) -> float:
    """Exact integral of a 2D pixel image (``image[y, x]``) along a segment.

    ``origin_xy`` is the world position of pixel (0, 0)'s center.
    """
    img = np.ascontiguousarray(image, dtype=np.float64)
    dx, dy = (float(s) for s in spacing_xy)
    x0 = float(origin_xy[0]) - dx / 2.0
    y0 = float(origin_xy[1]) - dy / 2.0
    return float(_traverse(img, np.zeros((1, 1)), x0, y0, dx, dy,
                           float(start[0]), float(start[1]), float(end[0]), float(end[1]), 0.0, False))


def slice_index(mu: VoxelVolume, slice_z: float) -> int:
    """Nearest z layer for a world z position; error if outside the volume."""
    k = (slice_z - mu.origin[2]) / mu.spacing[2]
    nz = mu.dims[2]
    if not -0.5 <= k <= nz - 0.5:
        raise ValueError(f"slice z={slice_z} mm lies outside the volume")
    return int(min(max(round(k), 0), nz - 1))


def iso_frame(mu: VoxelVolume) -> tuple[float, float, float, float]:
    """Pixel-edge offsets (x0, y0) relative to isocenter plus iso world x, y.

    The isocenter sits at the in-plane center of the volume.
    """
    nx, ny, _ = mu.dims
    sx, sy, _ = mu.spacing
    iso_x = mu.origin[0] + (nx - 1) * sx / 2.0
    iso_y = mu.origin[1] + (ny - 1) * sy / 2.0
    return -nx * sx / 2.0, -ny * sy / 2.0, iso_x, iso_y


def forward_project(mu: VoxelVolume, cfg: ScannerConfig, slice_z: float) -> Sinogram:
    """Fan-beam projection of the z layer nearest ``slice_z``.

    Each detector cell gets the exact line integral of mu along the ray
    from the source to the cell center.
    """
    if mu.kind != VolumeKind.ATTENUATION:
        raise ValueError("forward projection needs an attenuation volume")
    k = slice_index(mu, slice_z)
    img = np.ascontiguousarray(mu.values[k], dtype=np.float64)
    x0, y0, _, _ = iso_frame(mu)
    angles = cfg.view_angles()
    sino = _project_fan(img, x0, y0, mu.spacing[0], mu.spacing[1], angles,
                        cfg.column_positions(), cfg.siso_d, cfg.sid)
    return Sinogram(sino[:, None, :], angles, cfg, (float(slice_z),))


def project_image(image: np.ndarray, spacing_xy, cfg: ScannerConfig) -> np.ndarray:
    """Project an iso-centered 2D image; returns (views, cols)."""
    img = np.ascontiguousarray(image, dtype=np.float64)
    ny, nx = img.shape
    dx, dy = spacing_xy
    return _project_fan(img, -nx * dx / 2.0, -ny * dy / 2.0, float(dx), float(dy),
                        cfg.view_angles(), cfg.column_positions(), cfg.siso_d, cfg.sid)


def backproject_adjoint(sino: np.ndarray, shape_yx, spacing_xy, cfg: ScannerConfig) -> np.ndarray:
    """Exact transpose of :func:`project_image` (unfiltered, unweighted)."""
    dx, dy = spacing_xy
    ny, nx = shape_yx
    return _backproject_fan(np.ascontiguousarray(sino, dtype=np.float64), ny, nx,
                            -nx * dx / 2.0, -ny * dy / 2.0, float(dx), float(dy),
                            cfg.view_angles(), cfg.column_positions(), cfg.siso_d, cfg.sid)
