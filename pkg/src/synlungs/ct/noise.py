"""Photon statistics and a parametric scatter estimate."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..seeding import stream
from .geometry import ScannerConfig, Sinogram


def triangular_kernel(half_width: int) -> np.ndarray:
    h = max(int(half_width), 1)
    k = h + 1 - np.abs(np.arange(-h, h + 1))
    return k / k.sum()


def estimate_scatter(s: Sinogram, spr: float, i0: float | None = None) -> np.ndarray:
    """Expected scatter counts per element.

    Primary counts ``i0 * exp(-p)`` are smoothed across detector columns with
    a triangular kernel of half-width ``n_cols / 4`` (edge-replicated) and
    scaled by the scatter-to-primary ratio ``spr``.
    """
    if spr < 0:
        raise ValueError("spr must be non-negative")
    if spr == 0:
        return np.zeros_like(s.data)
    i0 = s.geometry.i0 if i0 is None else i0
    primary = i0 * np.exp(-s.data)
    kernel = triangular_kernel(s.n_cols // 4)
    return spr * ndimage.convolve1d(primary, kernel, axis=2, mode="nearest")


def apply_quantum_noise(
    s: Sinogram,
    cfg: ScannerConfig,
    seed: int,
    scatter: np.ndarray | None = None,
    stream_key: tuple = (),
    correct_scatter: bool = True,
) -> Sinogram:
    """Poisson-sample detector counts and return noisy line integrals.

    Expected counts are ``i0 * exp(-p) + scatter``. Each view draws from its
    own Philox stream keyed by ``(seed, *stream_key, view)``, so the result
    does not depend on evaluation order. With ``correct_scatter`` the known
    scatter expectation is subtracted before the log (ideal correction).
    """
    i0 = cfg.i0
    primary = i0 * np.exp(-s.data)
    lam = primary if scatter is None else primary + scatter
    out = np.empty_like(s.data)
    for v in range(s.n_views):
        rng = stream(seed, *stream_key, "quantum", v)
        counts = rng.poisson(lam[v]).astype(np.float64)
        if scatter is not None and correct_scatter:
            counts -= scatter[v]
        out[v] = -np.log(np.maximum(counts, 1.0) / i0)
    return s.with_data(out)
