"""Hann-apodized ramp filtering and fan-beam filtered back-projection."""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from ..volume import VolumeKind, VoxelVolume
from .geometry import ScannerConfig, Sinogram


def hann_ramp_filter(n_cols: int, detector_pitch_at_iso: float, cutoff: float) -> np.ndarray:
    """Frequency-domain taps ``|f| * hann(f)`` in ``np.fft.fftfreq`` order.

    The Hann window ``0.5 * (1 + cos(pi f / (cutoff f_N)))`` reaches zero at
    ``cutoff`` times the Nyquist frequency ``f_N``; a cutoff above 1 leaves
    the window partly open at Nyquist, i.e. a sharper kernel.
    """
    if n_cols < 2:
        raise ValueError("n_cols must be >= 2")
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    f = np.abs(np.fft.fftfreq(n_cols, d=detector_pitch_at_iso))
    f_nyq = 0.5 / detector_pitch_at_iso
    arg = np.minimum(f / (cutoff * f_nyq), 1.0)
    window = 0.5 * (1.0 + np.cos(np.pi * arg))
    return f * window


def mu_to_hu(mu_vol: VoxelVolume, mu_water: float) -> VoxelVolume:
    if mu_water <= 0:
        raise ValueError("mu_water must be positive")
    hu = 1000.0 * (np.asarray(mu_vol.values, dtype=np.float64) - mu_water) / mu_water
    return mu_vol.with_values(hu, VolumeKind.HU)


def hu_to_mu_volume(hu_vol: VoxelVolume, mu_water: float) -> np.ndarray:
    """Inverse of :func:`mu_to_hu` (values only; may be negative)."""
    return mu_water * (1.0 + np.asarray(hu_vol.values, dtype=np.float64) / 1000.0)


def parker_weights(beta: np.ndarray, gamma: np.ndarray, half_fan: float) -> np.ndarray:
    """Short-scan weights over ``beta`` in [0, pi + 2*half_fan]; (views, cols)."""
    b = beta[:, None]
    g = gamma[None, :]
    w = np.ones((beta.size, gamma.size))
    with np.errstate(divide="ignore", invalid="ignore"):
        rise = b < 2 * half_fan - 2 * g
        w = np.where(rise, np.sin(np.pi / 4 * b / (half_fan - g)) ** 2, w)
        fall = b > np.pi - 2 * g
        w = np.where(fall, np.sin(np.pi / 4 * (np.pi + 2 * half_fan - b) / (half_fan + g)) ** 2, w)
    w = np.where(b > np.pi + 2 * half_fan, 0.0, w)
    return np.nan_to_num(w)


@njit(cache=True, nogil=True)
def _backproject_pixels(q, angles, xs, ys, siso_d, sid, pitch, scale):
    n_views, n_cols = q.shape
    ny = ys.shape[0]
    nx = xs.shape[0]
    out = np.zeros((ny, nx))
    center = (n_cols - 1) / 2.0
    for v in range(n_views):
        c = math.cos(angles[v])
        s = math.sin(angles[v])
        for j in range(ny):
            y = ys[j]
            for i in range(nx):
                x = xs[i]
                dist = siso_d - (x * c + y * s)
                t = -x * s + y * c
                k = sid * t / dist / pitch + center
                k0 = int(math.floor(k))
                if k0 < 0 or k0 + 1 >= n_cols:
                    if k0 == n_cols - 1 and k == k0:
                        val = q[v, k0]
                    else:
                        continue
                else:
                    fr = k - k0
                    val = (1.0 - fr) * q[v, k0] + fr * q[v, k0 + 1]
                w = siso_d / dist
                out[j, i] += w * w * val
    return out * scale


def filter_projections(s: Sinogram, cfg: ScannerConfig, cutoff: float | None = None) -> np.ndarray:
    """Cosine-weight (and short-scan weight) then ramp-filter each row.

    Returns filtered projections on the virtual detector at isocenter,
    shape (views, rows, cols), with the redundancy weights folded in.
    """
    cutoff = cfg.cutoff if cutoff is None else cutoff
    n_views, n_rows, n_cols = s.data.shape
    D = cfg.siso_d
    u = cfg.column_positions()
    sv = u * D / cfg.sid
    pitch = cfg.pitch_at_iso
    weighted = s.data * (D / np.sqrt(D * D + sv * sv))[None, None, :]
    weighted = weighted * scan_weights(s, cfg)[:, None, :]
    n_fft = 1 << int(math.ceil(math.log2(4 * n_cols)))
    taps = hann_ramp_filter(n_fft, pitch, cutoff)
    spec = np.fft.rfft(weighted, n=n_fft, axis=2)
    filtered = np.fft.irfft(spec * taps[: n_fft // 2 + 1], n=n_fft, axis=2)[:, :, :n_cols]
    return filtered


def angular_coverage(angles: np.ndarray) -> float:
    if angles.size < 2:
        return 0.0
    step = (angles[-1] - angles[0]) / (angles.size - 1)
    return float(step * angles.size)


def scan_weights(s: Sinogram, cfg: ScannerConfig) -> np.ndarray:
    """Per (view, col) redundancy weights: 1/2 for full scans, Parker otherwise."""
    coverage = angular_coverage(s.view_angles)
    half_fan = cfg.half_fan_angle
    if coverage >= 2 * np.pi * (1 - 1e-9):
        return np.full((s.n_views, s.n_cols), 0.5)
    if coverage < np.pi + 2 * half_fan - 1e-9:
        raise ValueError(
            f"angular coverage {np.degrees(coverage):.1f} deg is below 180 deg + fan angle "
            f"({np.degrees(np.pi + 2 * half_fan):.1f} deg)"
        )
    beta = s.view_angles - s.view_angles[0]
    # positive detector u rotates the ray clockwise, i.e. negative fan angle
    gamma = -np.arctan(cfg.column_positions() / cfg.sid)
    return parker_weights(beta, gamma, half_fan)


def fbp_reconstruct_mu(
    s: Sinogram,
    cfg: ScannerConfig,
    out_dims: tuple[int, int],
    out_spacing: float,
    center_xy: tuple[float, float] = (0.0, 0.0),
    cutoff: float | None = None,
) -> np.ndarray:
    """FBP of every sinogram row; returns attenuation images (rows, ny, nx).

    ``center_xy`` is the image center relative to isocenter (mm).
    """
    nx, ny = out_dims
    xs = center_xy[0] + (np.arange(nx) - (nx - 1) / 2.0) * out_spacing
    ys = center_xy[1] + (np.arange(ny) - (ny - 1) / 2.0) * out_spacing
    q = filter_projections(s, cfg, cutoff)
    coverage = angular_coverage(s.view_angles)
    d_beta = coverage / s.n_views
    images = np.empty((s.n_rows, ny, nx))
    for r in range(s.n_rows):
        images[r] = _backproject_pixels(np.ascontiguousarray(q[:, r, :]), s.view_angles, xs, ys,
                                        cfg.siso_d, cfg.sid, cfg.channel_width, d_beta)
    return images


def fbp_reconstruct(
    s: Sinogram,
    cfg: ScannerConfig,
    out_dims: tuple[int, int],
    out_spacing: float,
    mu_water: float,
    cutoff: float | None = None,
    origin_xy: tuple[float, float] | None = None,
    z_spacing: float = 1.0,
) -> VoxelVolume:
    """Reconstruct an HU volume with one z layer per sinogram row.

    ``origin_xy`` is the world position of the isocenter; the output grid
    is centered on it.
    """
    images = fbp_reconstruct_mu(s, cfg, out_dims, out_spacing, cutoff=cutoff)
    iso = (0.0, 0.0) if origin_xy is None else origin_xy
    nx, ny = out_dims
    z0 = s.slice_z[0] if s.slice_z else 0.0
    origin = (iso[0] - (nx - 1) / 2.0 * out_spacing, iso[1] - (ny - 1) / 2.0 * out_spacing, z0)
    mu = VoxelVolume(images, (out_spacing, out_spacing, z_spacing), origin, VolumeKind.HU)
    return mu_to_hu(mu, mu_water)
