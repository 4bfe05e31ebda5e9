"""Slice-by-slice acquisition and reconstruction of attenuation volumes."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..volume import MaterialTable, VolumeKind, VoxelVolume
from .geometry import ScannerConfig, Sinogram
from .noise import apply_quantum_noise, estimate_scatter
from .projector import forward_project, iso_frame
from .recon import fbp_reconstruct_mu, mu_to_hu

log = logging.getLogger(__name__)

DEFAULT_SPR = 0.05


@dataclass(frozen=True)
class ReconVolume:
    volume: VoxelVolume  # HU
    scanner: str
    cutoff: float
    i0: float
    seed: int
    spr: float

    def provenance(self) -> dict:
        return {"scanner": self.scanner, "cutoff": self.cutoff, "i0": self.i0, "seed": self.seed, "spr": self.spr}


def _map(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _slice_pitch(slices, mu: VoxelVolume) -> float:
    if len(slices) == 1:
        return mu.spacing[2]
    steps = np.diff(slices)
    if steps.min() <= 0 or not np.allclose(steps, steps[0], rtol=1e-6, atol=1e-9):
        raise ValueError("slice positions must be strictly increasing and evenly spaced")
    return float(steps[0])


def _check_fov(mu: VoxelVolume, cfg: ScannerConfig) -> None:
    nz_any = np.nonzero(np.asarray(mu.values).max(axis=0))
    if nz_any[0].size == 0:
        return
    x0, y0, _, _ = iso_frame(mu)
    xs = x0 + (nz_any[1] + 0.5) * mu.spacing[0]
    ys = y0 + (nz_any[0] + 0.5) * mu.spacing[1]
    if np.hypot(xs, ys).max() > cfg.fov_radius:
        log.warning("object extends beyond the %.0f mm scan field of %s; projections are truncated",
                    cfg.fov_radius, cfg.name)


def acquire(
    mu: VoxelVolume,
    cfg: ScannerConfig,
    slices,
    seed: int,
    spr: float = DEFAULT_SPR,
    noise: bool = True,
    threads: int = 1,
) -> Sinogram:
    """Project, add scatter and quantum noise; one sinogram row per slice.

    Noise for slice ``i`` draws from streams keyed by ``(seed, i, view)``.
    """
    slices = [float(z) for z in slices]
    if not slices:
        raise ValueError("at least one slice position is required")
    _check_fov(mu, cfg)

    def one(item):
        index, z = item
        s = forward_project(mu, cfg, z)
        if noise:
            scatter = estimate_scatter(s, spr, cfg.i0) if spr > 0 else None
            s = apply_quantum_noise(s, cfg, seed, scatter, stream_key=(index,))
        return s.data[:, 0, :]

    rows = _map(one, list(enumerate(slices)), threads)
    return Sinogram(np.stack(rows, axis=1), cfg.view_angles(), cfg, tuple(slices))


def reconstruct(
    sino: Sinogram,
    like: VoxelVolume,
    out_spacing: float | None = None,
    out_dims: tuple[int, int] | None = None,
    cutoff: float | None = None,
    mu_water: float | None = None,
    threads: int = 1,
) -> VoxelVolume:
    """FBP every row onto a grid centered on ``like``'s isocenter, in HU."""
    cfg = sino.geometry
    cutoff = cfg.cutoff if cutoff is None else cutoff
    mu_water = MaterialTable.default().mu_water if mu_water is None else mu_water
    out_spacing = like.spacing[0] if out_spacing is None else float(out_spacing)
    if out_dims is None:
        nx, ny, _ = like.dims
        out_dims = (
            int(math.ceil(nx * like.spacing[0] / out_spacing - 1e-9)),
            int(math.ceil(ny * like.spacing[1] / out_spacing - 1e-9)),
        )
    _, _, iso_x, iso_y = iso_frame(like)

    def one(r):
        row = Sinogram(sino.data[:, r : r + 1, :], sino.view_angles, cfg, sino.slice_z[r : r + 1])
        return fbp_reconstruct_mu(row, cfg, out_dims, out_spacing, cutoff=cutoff)[0]

    images = np.stack(_map(one, range(sino.n_rows), threads))
    z_pitch = _slice_pitch(sino.slice_z, like) if sino.slice_z else like.spacing[2]
    nx, ny = out_dims
    origin = (
        iso_x - (nx - 1) / 2.0 * out_spacing,
        iso_y - (ny - 1) / 2.0 * out_spacing,
        sino.slice_z[0] if sino.slice_z else like.origin[2],
    )
    mu_img = VoxelVolume(images, (out_spacing, out_spacing, z_pitch), origin, VolumeKind.HU)
    hu = mu_to_hu(mu_img, mu_water)
    return hu.with_values(hu.values.astype(np.float32))


def default_slices(mu: VoxelVolume, pitch: float | None = None) -> list[float]:
    """Slice positions covering the volume, one per z layer by default."""
    zs = mu.world_coords(2)
    if pitch is None:
        return [float(z) for z in zs]
    n = int(math.floor((zs[-1] - zs[0]) / pitch + 1e-9)) + 1
    return [float(zs[0] + i * pitch) for i in range(n)]


def simulate_scan(
    mu: VoxelVolume,
    cfg: ScannerConfig,
    slices=None,
    seed: int = 0,
    spr: float = DEFAULT_SPR,
    out_spacing: float | None = None,
    out_dims: tuple[int, int] | None = None,
    noise: bool = True,
    mu_water: float | None = None,
    threads: int = 1,
) -> ReconVolume:
    """Acquire and reconstruct ``mu`` with ``cfg``'s Hann cutoff.

    Bit-identical for a fixed ``seed`` regardless of ``threads``.
    """
    slices = default_slices(mu) if slices is None else list(slices)
    sino = acquire(mu, cfg, slices, seed, spr, noise, threads)
    vol = reconstruct(sino, mu, out_spacing, out_dims, cfg.cutoff, mu_water, threads)
    return ReconVolume(vol, cfg.name, cfg.cutoff, cfg.i0, seed, spr if noise else 0.0)
