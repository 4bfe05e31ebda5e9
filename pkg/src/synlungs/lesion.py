"""Nodule synthesis: gamma size sampling, stochastic shapes, clustered
lumpy background texture, placement in the lung and embedding."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from numba import njit
from scipy import ndimage, special, stats

from .seeding import stream
from .volume import MaterialTable, VolumeKind, VoxelVolume

LESION_SPACING = 0.1  # mm, isotropic
LESION_PADDING = 2  # transparent voxels around the mask
TRANSPARENT = np.float32(np.nan)
MIN_ACCEPTANCE = 1e-6


class Margin(str, Enum):
    SMOOTH = "Smooth"
    LOBULATED = "Lobulated"
    SPICULATED = "Spiculated"


class NoduleType(str, Enum):
    SOLID = "Solid"


class NoValidPlacement(RuntimeError):
    """No center satisfying the clearance and overlap rules was found."""


@dataclass(frozen=True)
class GammaParams:
    """Gamma size law ``b**a / Gamma(a) * l**(a-1) * exp(-b*l)``.

    ``b`` is a rate (1/mm), so the untruncated mean is ``a / b``.
    """

    a: float = 2.5
    b: float = 0.35
    min_size: float = 4.0
    max_size: float = 30.0

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError("gamma shape a and rate b must be positive")
        if not 0 < self.min_size < self.max_size:
            raise ValueError("need 0 < min_size < max_size")

    def density(self, size):
        size = np.asarray(size, dtype=float)
        with np.errstate(divide="ignore"):
            log_f = self.a * math.log(self.b) - special.gammaln(self.a) + (self.a - 1) * np.log(size) - self.b * size
        return np.where(size > 0, np.exp(log_f), 0.0)

    def acceptance(self) -> float:
        dist = stats.gamma(self.a, scale=1.0 / self.b)
        return float(dist.cdf(self.max_size) - dist.cdf(self.min_size))


@dataclass(frozen=True)
class ClbParams:
    mean_clusters_per_cm3: float = 40.0
    mean_lumps_per_cluster: float = 6.0
    cluster_sigma: float = 1.0
    lump_radius: float = 0.6
    lump_amplitude: float = 15.0
    background_hu: float = 20.0

    def __post_init__(self):
        if self.mean_clusters_per_cm3 < 0 or self.mean_lumps_per_cluster < 0:
            raise ValueError("CLB rates must be non-negative")
        if self.cluster_sigma <= 0 or self.lump_radius <= 0:
            raise ValueError("cluster_sigma and lump_radius must be positive")

    def expected_mean(self) -> float:
        """Stationary mean of the texture (HU), by Campbell's theorem."""
        rate_mm3 = self.mean_clusters_per_cm3 / 1000.0
        lump_integral = self.lump_amplitude * (2 * np.pi) ** 1.5 * self.lump_radius**3
        return self.background_hu + rate_mm3 * self.mean_lumps_per_cluster * lump_integral


@dataclass(frozen=True)
class LesionSpec:
    lesion_id: str
    diameter: float
    shape_seed: int = 0
    texture_seed: int = 0
    shape_irregularity: float = 0.0
    nodule_type: NoduleType = NoduleType.SOLID
    margin: Margin = Margin.SMOOTH

    def __post_init__(self):
        if self.diameter <= 0:
            raise ValueError("diameter must be positive")
        if not 0.0 <= self.shape_irregularity <= 1.0:
            raise ValueError("shape_irregularity must lie in [0, 1]")
        object.__setattr__(self, "margin", Margin(self.margin))
        object.__setattr__(self, "nodule_type", NoduleType(self.nodule_type))

    def check_bounds(self, gamma: GammaParams) -> None:
        if not gamma.min_size <= self.diameter <= gamma.max_size:
            raise ValueError(f"diameter {self.diameter} outside [{gamma.min_size}, {gamma.max_size}]")


@dataclass(frozen=True)
class LesionVolume:
    hu: VoxelVolume
    mask: VoxelVolume
    diameter_measured: float
    spec: LesionSpec | None = None

    @property
    def center_index(self) -> tuple[int, int, int]:
        """(z, y, x) array index of the grid center."""
        return tuple(n // 2 for n in self.mask.values.shape)


@dataclass(frozen=True)
class PlacementResult:
    center_voxel: tuple[int, int, int]  # (x, y, z) index in the phantom grid
    center_mm: tuple[float, float, float]
    attempts_used: int
    radius_mm: float  # bounding-sphere radius of the placed lesion


# ----------------------------------------------------------------------------
# size sampling
# ----------------------------------------------------------------------------


def sample_sizes(p: GammaParams, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` sizes from the gamma law, rejection-truncated to [min_size, max_size]."""
    acc = p.acceptance()
    if acc < MIN_ACCEPTANCE:
        raise ValueError(f"truncation interval holds only {acc:.3g} of the gamma mass")
    out = np.empty(n)
    filled = 0
    while filled < n:
        batch = int(min(max((n - filled) / acc * 1.1 + 16, 16), 10_000_000))
        draws = rng.gamma(p.a, 1.0 / p.b, size=batch)
        draws = draws[(draws >= p.min_size) & (draws <= p.max_size)]
        take = min(draws.size, n - filled)
        out[filled : filled + take] = draws[:take]
        filled += take
    return out


def sample_size(p: GammaParams, rng: np.random.Generator) -> float:
    return float(sample_sizes(p, rng, 1)[0])


# ----------------------------------------------------------------------------
# shape
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class _RadialModel:
    """Radius as a function of direction: zonal harmonics plus spikes."""

    radius: float
    axes: np.ndarray  # (K, 3) unit vectors
    degrees: np.ndarray  # (K,) Legendre degree per term
    coefs: np.ndarray  # (K,) relative amplitude
    spike_dirs: np.ndarray  # (S, 3)
    spike_heights: np.ndarray  # (S,) relative to radius
    spike_width: float  # radians

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return _radius_many(u, self.radius, self.axes, self.degrees, self.coefs,
                            self.spike_dirs, self.spike_heights, self.spike_width)


@njit(cache=True, nogil=True)
def _legendre(l, t):
    p0, p1 = 1.0, t
    if l == 0:
        return p0
    for k in range(2, l + 1):
        p0, p1 = p1, ((2 * k - 1) * t * p1 - (k - 1) * p0) / k
    return p1


@njit(cache=True, nogil=True)
def _harmonic(ux, uy, uz, axes, degrees, coefs):
    rel = 1.0
    for k in range(axes.shape[0]):
        t = ux * axes[k, 0] + uy * axes[k, 1] + uz * axes[k, 2]
        rel += coefs[k] * _legendre(degrees[k], t)
    return rel


@njit(cache=True, nogil=True)
def _spike(ux, uy, uz, spike_dirs, spike_heights, spike_width):
    spike = 0.0
    cos_width = math.cos(spike_width)
    for s in range(spike_dirs.shape[0]):
        t = ux * spike_dirs[s, 0] + uy * spike_dirs[s, 1] + uz * spike_dirs[s, 2]
        if t <= cos_width:
            continue
        ang = math.acos(min(1.0, t))
        if ang < spike_width:
            spike = max(spike, spike_heights[s] * (1.0 - ang / spike_width))
    return spike


@njit(cache=True, nogil=True)
def _radius_many(u, radius, axes, degrees, coefs, spike_dirs, spike_heights, spike_width):
    out = np.empty(u.shape[0])
    for i in range(u.shape[0]):
        ux, uy, uz = u[i, 0], u[i, 1], u[i, 2]
        out[i] = radius * (_harmonic(ux, uy, uz, axes, degrees, coefs)
                           + _spike(ux, uy, uz, spike_dirs, spike_heights, spike_width))
    return out


@njit(cache=True, nogil=True)
def _voxelize(n_half, h, radius, axes, degrees, coefs, spike_dirs, spike_heights, spike_width, rel_lo, rel_hi):
    # rel_lo/rel_hi bound the harmonic part, so it is only evaluated near the surface
    n = 2 * n_half + 1
    mask = np.zeros((n, n, n), dtype=np.uint8)
    r_inner = radius * rel_lo
    r_outer = radius * (rel_hi + (spike_heights.max() if spike_heights.shape[0] else 0.0))
    for k in range(n):
        z = (k - n_half) * h
        for j in range(n):
            y = (j - n_half) * h
            for i in range(n):
                x = (i - n_half) * h
                d = math.sqrt(x * x + y * y + z * z)
                if d <= r_inner:
                    mask[k, j, i] = 1
                    continue
                if d > r_outer:
                    continue
                ux, uy, uz = x / d, y / d, z / d
                sp = _spike(ux, uy, uz, spike_dirs, spike_heights, spike_width)
                if d > radius * (rel_hi + sp):
                    continue
                if d <= radius * (rel_lo + sp) or d <= radius * (_harmonic(ux, uy, uz, axes, degrees, coefs) + sp):
                    mask[k, j, i] = 1
    return mask


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5**0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


_QUAD_DIRS = _fibonacci_sphere(20_000)
_TERMS_PER_DEGREE = 4
MAX_PERTURBATION = 0.35  # peak relative radial displacement at irregularity 1
LOBULATION = 0.15
SPIKE_COUNT = (6, 12)
SPIKE_HEIGHT = (0.3, 0.7)
SPIKE_WIDTH = 0.15


def _radial_model(spec: LesionSpec) -> _RadialModel:
    rng = stream(spec.shape_seed, "shape")
    axes, degrees, coefs = [], [], []
    # both draws always happen so the stream layout is independent of the margin
    base_axes = _unit_vectors(rng, 3 * _TERMS_PER_DEGREE)
    base_coefs = rng.normal(size=3 * _TERMS_PER_DEGREE)
    lobe_axes = _unit_vectors(rng, 3 * _TERMS_PER_DEGREE)
    lobe_coefs = rng.normal(size=3 * _TERMS_PER_DEGREE)
    n_spikes = int(rng.integers(SPIKE_COUNT[0], SPIKE_COUNT[1] + 1))
    spike_dirs = _unit_vectors(rng, n_spikes)
    spike_heights = rng.uniform(*SPIKE_HEIGHT, size=n_spikes)

    def add(term_axes, term_coefs, lo, amplitude):
        if amplitude <= 0:
            return
        deg = np.repeat(np.arange(lo, lo + 3), _TERMS_PER_DEGREE)
        raw = np.zeros(len(_QUAD_DIRS))
        for ax, c, l in zip(term_axes, term_coefs, deg):
            raw += c * special.eval_legendre(l, _QUAD_DIRS @ ax)
        scale = amplitude / np.abs(raw).max()
        axes.extend(term_axes)
        degrees.extend(deg)
        coefs.extend(term_coefs * scale)

    add(base_axes, base_coefs, 2, MAX_PERTURBATION * spec.shape_irregularity)
    if spec.margin == Margin.LOBULATED:
        add(lobe_axes, lobe_coefs, 3, LOBULATION)
    if spec.margin != Margin.SPICULATED:
        spike_dirs = np.zeros((0, 3))
        spike_heights = np.zeros(0)

    model = _RadialModel(
        1.0,
        np.array(axes, dtype=float).reshape(-1, 3),
        np.array(degrees, dtype=np.int64),
        np.array(coefs, dtype=float),
        np.asarray(spike_dirs, dtype=float),
        np.asarray(spike_heights, dtype=float),
        SPIKE_WIDTH,
    )
    # rescale so the enclosed volume equals the nominal sphere's
    mean_r3 = np.mean(model(_QUAD_DIRS) ** 3)
    radius = spec.diameter / 2.0 / mean_r3 ** (1.0 / 3.0)
    return _RadialModel(radius, model.axes, model.degrees, model.coefs,
                        model.spike_dirs, model.spike_heights, model.spike_width)


def _lesion_grid(mask: np.ndarray, kind: VolumeKind) -> VoxelVolume:
    n_half = mask.shape[0] // 2
    origin = (-n_half * LESION_SPACING,) * 3
    return VoxelVolume(mask, (LESION_SPACING,) * 3, origin, kind)


def generate_shape(spec: LesionSpec) -> VoxelVolume:
    """Binary nodule mask on a 0.1 mm grid centered on the nodule.

    A sphere of the nominal diameter is displaced radially by random zonal
    harmonics (degrees 2-4) scaled by ``shape_irregularity``; lobulated
    margins add degrees 3-5, spiculated margins add conical spikes. The
    result is rescaled to the nominal volume and reduced to the
    6-connected component containing the center.
    """
    model = _radial_model(spec)
    rel = _radius_many(_QUAD_DIRS, 1.0, model.axes, model.degrees, model.coefs,
                       np.zeros((0, 3)), np.zeros(0), model.spike_width)
    slack = 0.02 * (rel.max() - rel.min()) + 1e-9
    rel_lo, rel_hi = rel.min() - slack, rel.max() + slack
    spike_max = model.spike_heights.max() if model.spike_heights.size else 0.0
    n_half = int(math.ceil(model.radius * (rel_hi + spike_max) / LESION_SPACING)) + LESION_PADDING
    while True:
        mask = _voxelize(n_half, LESION_SPACING, model.radius, model.axes, model.degrees, model.coefs,
                         model.spike_dirs, model.spike_heights, model.spike_width, rel_lo, rel_hi)
        inner = mask[LESION_PADDING:-LESION_PADDING, LESION_PADDING:-LESION_PADDING, LESION_PADDING:-LESION_PADDING]
        if np.count_nonzero(inner) == np.count_nonzero(mask):
            break
        n_half = int(n_half * 1.1) + 1
    labeled, _ = ndimage.label(mask)
    center = labeled[n_half, n_half, n_half]
    mask = (labeled == center).astype(np.uint8)
    del labeled
    return _lesion_grid(mask, VolumeKind.BINARY)


# ----------------------------------------------------------------------------
# clustered lumpy background texture
# ----------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _splat_lumps(field, origin, h, centers, radius, amplitude, support):
    # the isotropic Gaussian factorizes, so each lump costs one multiply-add per voxel
    nz, ny, nx = field.shape
    inv = 1.0 / (2.0 * radius * radius)
    reach = support * radius
    for c in range(centers.shape[0]):
        cx, cy, cz = centers[c, 0], centers[c, 1], centers[c, 2]
        i0 = max(0, int(math.ceil((cx - reach - origin) / h)))
        i1 = min(nx - 1, int(math.floor((cx + reach - origin) / h)))
        j0 = max(0, int(math.ceil((cy - reach - origin) / h)))
        j1 = min(ny - 1, int(math.floor((cy + reach - origin) / h)))
        k0 = max(0, int(math.ceil((cz - reach - origin) / h)))
        k1 = min(nz - 1, int(math.floor((cz + reach - origin) / h)))
        if i0 > i1 or j0 > j1 or k0 > k1:
            continue
        ex = np.empty(i1 - i0 + 1)
        for i in range(i0, i1 + 1):
            d = origin + i * h - cx
            ex[i - i0] = math.exp(-d * d * inv)
        ey = np.empty(j1 - j0 + 1)
        for j in range(j0, j1 + 1):
            d = origin + j * h - cy
            ey[j - j0] = math.exp(-d * d * inv)
        for k in range(k0, k1 + 1):
            d = origin + k * h - cz
            az = amplitude * math.exp(-d * d * inv)
            for j in range(j0, j1 + 1):
                azy = az * ey[j - j0]
                for i in range(i0, i1 + 1):
                    field[k, j, i] += azy * ex[i - i0]


LUMP_SUPPORT = 4.0  # lumps truncated at this many radii


def clb_lump_centers(mask: VoxelVolume, p: ClbParams, rng: np.random.Generator) -> np.ndarray:
    """Lump centers (mm, lesion frame) of a two-level clustered Poisson process.

    Parents are uniform over the mask's bounding box padded by the reach of
    a cluster, with count ~ Poisson(density * window volume), so the
    process is stationary over the mask.
    """
    idx = np.nonzero(mask.values)
    if idx[0].size == 0:
        return np.zeros((0, 3))
    h = mask.spacing[0]
    lo = np.array([idx[2].min(), idx[1].min(), idx[0].min()]) * h + mask.origin[0] - h / 2
    hi = np.array([idx[2].max(), idx[1].max(), idx[0].max()]) * h + mask.origin[0] + h / 2
    pad = LUMP_SUPPORT * (p.cluster_sigma + p.lump_radius)
    lo, hi = lo - pad, hi + pad
    window_cm3 = float(np.prod(hi - lo)) / 1000.0
    n_clusters = rng.poisson(p.mean_clusters_per_cm3 * window_cm3)
    parents = rng.uniform(lo, hi, size=(n_clusters, 3))
    n_lumps = rng.poisson(p.mean_lumps_per_cluster, size=n_clusters)
    offsets = rng.normal(0.0, p.cluster_sigma, size=(int(n_lumps.sum()), 3))
    return np.repeat(parents, n_lumps, axis=0) + offsets


def generate_clb_texture(spec: LesionSpec, p: ClbParams, mask: VoxelVolume) -> VoxelVolume:
    """Texture in HU: background plus Gaussian lumps at clustered centers.

    Values outside the mask are ``TRANSPARENT`` (NaN).
    """
    rng = stream(spec.texture_seed, "clb")
    centers = clb_lump_centers(mask, p, rng)
    hu = np.full(mask.values.shape, p.background_hu, dtype=np.float32)
    if centers.shape[0] and p.lump_amplitude != 0:
        _splat_lumps(hu, mask.origin[0], mask.spacing[0], np.ascontiguousarray(centers),
                     p.lump_radius, p.lump_amplitude, LUMP_SUPPORT)
    hu[mask.values == 0] = TRANSPARENT
    return mask.with_values(hu, VolumeKind.HU)


def equivalent_diameter(mask: VoxelVolume) -> float:
    volume = np.count_nonzero(mask.values) * mask.voxel_volume
    return 2.0 * (3.0 * volume / (4.0 * np.pi)) ** (1.0 / 3.0)


def synthesize_lesion(spec: LesionSpec, clb: ClbParams) -> LesionVolume:
    mask = generate_shape(spec)
    hu = generate_clb_texture(spec, clb, mask)
    return LesionVolume(hu, mask, equivalent_diameter(mask), spec)


# ----------------------------------------------------------------------------
# placement
# ----------------------------------------------------------------------------


def ball_offsets(radius_mm: float, spacing) -> np.ndarray:
    """Integer (x, y, z) offsets whose physical length is <= radius_mm."""
    reach = [int(math.floor(radius_mm / s)) for s in spacing]
    grids = np.meshgrid(*[np.arange(-r, r + 1) for r in reach], indexing="ij")
    off = np.stack([g.ravel() for g in grids], axis=1)
    dist2 = ((off * np.asarray(spacing)) ** 2).sum(axis=1)
    return off[dist2 <= radius_mm**2 + 1e-9]


def _ball_inside(lung: np.ndarray, center_xyz, offsets: np.ndarray) -> bool:
    pts = offsets + np.asarray(center_xyz)
    nz, ny, nx = lung.shape
    if (pts < 0).any() or (pts[:, 0] >= nx).any() or (pts[:, 1] >= ny).any() or (pts[:, 2] >= nz).any():
        return False
    return bool(lung[pts[:, 2], pts[:, 1], pts[:, 0]].all())


def _clear_of(existing, center_mm, radius_mm) -> bool:
    for prev in existing:
        if np.linalg.norm(np.subtract(center_mm, prev.center_mm)) < radius_mm + prev.radius_mm:
            return False
    return True


def is_valid_center(lung: VoxelVolume, center_xyz, radius_mm: float, clearance_mm: float,
                    existing=()) -> bool:
    """Acceptance rule used by :func:`place_lesion` for one voxel."""
    offsets = ball_offsets(radius_mm + clearance_mm, lung.spacing)
    center_mm = tuple(lung.index_to_world(center_xyz))
    return _ball_inside(lung.values, center_xyz, offsets) and _clear_of(existing, center_mm, radius_mm)


def place_lesion(
    lung: VoxelVolume,
    lesion: LesionVolume,
    existing: list[PlacementResult],
    rng: np.random.Generator,
    wall_clearance: float = 2.0,
    max_attempts: int = 1000,
) -> PlacementResult:
    """Rejection-sample a lung voxel whose clearance ball stays inside the lung."""
    candidates = np.flatnonzero(lung.values)
    if candidates.size == 0:
        raise ValueError("lung mask is empty")
    radius = lesion.diameter_measured / 2.0
    offsets = ball_offsets(radius + wall_clearance, lung.spacing)
    nz, ny, nx = lung.values.shape
    for attempt in range(1, max_attempts + 1):
        flat = int(candidates[rng.integers(candidates.size)])
        z, rem = divmod(flat, ny * nx)
        y, x = divmod(rem, nx)
        center_mm = tuple(float(c) for c in lung.index_to_world((x, y, z)))
        if _ball_inside(lung.values, (x, y, z), offsets) and _clear_of(existing, center_mm, radius):
            return PlacementResult((x, y, z), center_mm, attempt, radius)
    raise NoValidPlacement(
        f"no valid center for a {lesion.diameter_measured:.1f} mm lesion after {max_attempts} attempts"
    )


# ----------------------------------------------------------------------------
# embedding
# ----------------------------------------------------------------------------


def hu_to_mu(hu, mu_water: float):
    return mu_water * (1.0 + np.asarray(hu) / 1000.0)


def downsample_lesion(lesion: LesionVolume, phantom: VoxelVolume, center_mm) -> tuple[tuple[slice, ...], np.ndarray, np.ndarray]:
    """Box-average the lesion onto the phantom grid.

    Each 0.1 mm voxel is assigned to the phantom voxel containing its
    center. Returns the phantom-array slices of the touched box, the
    occupancy fraction and the mean lesion HU per phantom voxel there.
    """
    mask = lesion.mask.values
    n = np.array(mask.shape[::-1])  # x, y, z
    half = n // 2
    h = lesion.mask.spacing[0]
    axes = []
    for a in range(3):
        world = center_mm[a] + (np.arange(n[a]) - half[a]) * h
        axes.append(np.rint((world - phantom.origin[a]) / phantom.spacing[a]).astype(np.int64))
    lo = [int(ax.min()) for ax in axes]
    hi = [int(ax.max()) for ax in axes]
    dims = phantom.dims
    if any(hi[a] < 0 or lo[a] >= dims[a] for a in range(3)):
        raise ValueError("lesion placement lies outside the phantom volume")
    box = [hi[a] - lo[a] + 1 for a in range(3)]
    count = np.zeros(box[::-1], dtype=np.int64)
    total = np.zeros(box[::-1], dtype=np.float64)
    bx = axes[0] - lo[0]
    by = axes[1] - lo[1]
    flat_xy = (by[:, None] * box[0] + bx[None, :]).ravel()
    hu = lesion.hu.values
    for k in range(n[2]):
        m = mask[k].ravel().astype(bool)
        if not m.any():
            continue
        bz = axes[2][k] - lo[2]
        idx = flat_xy[m]
        count[bz] += np.bincount(idx, minlength=box[0] * box[1]).reshape(box[1], box[0])
        total[bz] += np.bincount(idx, weights=hu[k].ravel()[m], minlength=box[0] * box[1]).reshape(box[1], box[0])
    # crop to the phantom
    src = []
    dst = []
    for a in (2, 1, 0):
        s0 = max(0, -lo[a])
        s1 = min(box[a], dims[a] - lo[a])
        src.append(slice(s0, s1))
        dst.append(slice(lo[a] + s0, lo[a] + s1))
    count = count[tuple(src)]
    total = total[tuple(src)]
    if count.sum() == 0:
        raise ValueError("lesion placement lies outside the phantom volume")
    ratio = lesion.mask.voxel_volume / phantom.voxel_volume
    occupancy = np.minimum(count * ratio, 1.0)
    mean_hu = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return tuple(dst), occupancy, mean_hu


def embed_lesion(
    phantom: VoxelVolume,
    table: MaterialTable,
    lesion: LesionVolume,
    placement: PlacementResult,
) -> tuple[VoxelVolume, VoxelVolume]:
    """Blend the lesion into an HU or attenuation phantom.

    Each phantom voxel moves toward the lesion's mean value by its occupancy
    fraction, so fully covered voxels are replaced outright. The returned
    mask marks voxels with occupancy > 0.5.
    """
    if phantom.kind not in (VolumeKind.HU, VolumeKind.ATTENUATION):
        raise ValueError(f"cannot embed into a {phantom.kind.value} volume")
    box, occupancy, mean_hu = downsample_lesion(lesion, phantom, placement.center_mm)
    if phantom.kind == VolumeKind.ATTENUATION:
        target = hu_to_mu(mean_hu, table.mu_water)
    else:
        target = mean_hu
    values = np.array(phantom.values, dtype=np.float32, copy=True)
    old = values[box].astype(np.float64)
    values[box] = (old + occupancy * (target - old)).astype(np.float32)
    if phantom.kind == VolumeKind.ATTENUATION:
        np.maximum(values, 0.0, out=values)
    gt = np.zeros(values.shape, dtype=np.uint8)
    gt[box] = (occupancy > 0.5).astype(np.uint8)
    return phantom.with_values(values), phantom.with_values(gt, VolumeKind.BINARY)
