"""Procedural chest phantom and label -> attenuation mapping."""

from __future__ import annotations

import numpy as np

from .volume import (
    AIR,
    BONE,
    LUNG,
    SOFT_TISSUE,
    MaterialTable,
    PhantomMetadata,
    VolumeKind,
    VoxelVolume,
)

MIN_PHANTOM_DIMS = 32

# Geometry as fractions of the field extent (body) or of the body semi-axes
# (everything inside it). Each is jittered by +/- JITTER relative.
BODY_SEMI_X = 0.44
BODY_SEMI_Y = 0.32
BODY_SEMI_Z = 0.75
LUNG_CENTER_X = 0.48
LUNG_CENTER_Y = 0.08
LUNG_SEMI_X = 0.34
LUNG_SEMI_Y = 0.62
LUNG_SEMI_Z = 0.62
LUNG_BODY_MARGIN = 0.9  # lungs are clipped to this fraction of the body ellipsoid
SPINE_CENTER_Y = -0.76
SPINE_RADIUS = 0.12
VESSELS_PER_LUNG = (5, 10)
VESSEL_RADIUS_MM = (0.8, 2.0)
JITTER = 0.05


def _grid(dims, spacing):
    """World coordinates (mm) of voxel centers, iso-centered, broadcastable (z, y, x)."""
    axes = [(np.arange(n) - (n - 1) / 2.0) * s for n, s in zip(dims, spacing)]
    x = axes[0][None, None, :]
    y = axes[1][None, :, None]
    z = axes[2][:, None, None]
    return x, y, z


def _segment_distance(x, y, z, p0, p1):
    d = p1 - p0
    t = ((x - p0[0]) * d[0] + (y - p0[1]) * d[1] + (z - p0[2]) * d[2]) / float(d @ d)
    t = np.clip(t, 0.0, 1.0)
    return np.sqrt((x - p0[0] - t * d[0]) ** 2 + (y - p0[1] - t * d[1]) ** 2 + (z - p0[2] - t * d[2]) ** 2)


def generate_chest_phantom(
    seed: int,
    dims: tuple[int, int, int] = (128, 128, 48),
    spacing: tuple[float, float, float] = (2.5, 2.5, 2.5),
    twin_id: str | None = None,
) -> tuple[VoxelVolume, MaterialTable, PhantomMetadata]:
    """Build a labeled chest phantom: body, two lungs with vessels, spine.

    The volume is centered on world (0, 0, 0). Output is a pure function of
    ``(seed, dims, spacing)``.
    """
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    if len(dims) != 3 or min(dims) < MIN_PHANTOM_DIMS:
        raise ValueError(f"phantom dims must be >= {MIN_PHANTOM_DIMS} per axis, got {dims}")
    rng = np.random.default_rng(seed)

    def jit(value):
        return value * (1.0 + rng.uniform(-JITTER, JITTER))

    extent = np.array(dims) * np.array(spacing)
    x, y, z = _grid(dims, spacing)
    labels = np.full(dims[::-1], AIR, dtype=np.uint8)

    ax, ay, az = jit(BODY_SEMI_X) * extent[0], jit(BODY_SEMI_Y) * extent[1], jit(BODY_SEMI_Z) * extent[2]
    body_r2 = (x / ax) ** 2 + (y / ay) ** 2 + (z / az) ** 2
    labels[body_r2 <= 1.0] = SOFT_TISSUE

    lungs = np.zeros(labels.shape, dtype=bool)
    lung_frames = []
    for side in (-1.0, 1.0):
        cx, cy = side * jit(LUNG_CENTER_X) * ax, jit(LUNG_CENTER_Y) * ay
        sx, sy, sz = jit(LUNG_SEMI_X) * ax, jit(LUNG_SEMI_Y) * ay, jit(LUNG_SEMI_Z) * extent[2]
        lungs |= ((x - cx) / sx) ** 2 + ((y - cy) / sy) ** 2 + (z / sz) ** 2 <= 1.0
        lung_frames.append((side, np.array([cx, cy, 0.0]), np.array([sx, sy, sz])))
    lungs &= body_r2 <= LUNG_BODY_MARGIN**2
    if not lungs.any():
        raise ValueError(f"dims {dims} at spacing {spacing} too small to contain the lungs")
    labels[lungs] = LUNG

    r = jit(SPINE_RADIUS) * ay
    spine = (x**2 + (y - jit(SPINE_CENTER_Y) * ay) ** 2 <= r**2) & (body_r2 <= 1.0)
    spine = np.broadcast_to(spine, labels.shape)
    if not spine.any():
        raise ValueError(f"dims {dims} at spacing {spacing} too small to contain the spine")
    labels[spine] = BONE

    # vessels fan out from a medial hilum point toward random lung points
    min_radius = 0.6 * min(spacing[:2])
    for side, center, semi in lung_frames:
        hilum = center + np.array([-side * 0.6 * semi[0], 0.0, 0.0])
        for _ in range(rng.integers(VESSELS_PER_LUNG[0], VESSELS_PER_LUNG[1] + 1)):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            tip = center + 0.8 * semi * direction * rng.uniform(0.5, 1.0)
            radius = max(rng.uniform(*VESSEL_RADIUS_MM), min_radius)
            vessel = _segment_distance(x, y, z, hilum, tip) <= radius
            labels[vessel & lungs] = SOFT_TISSUE

    meta = PhantomMetadata(
        twin_id=twin_id if twin_id is not None else f"twin_{seed}",
        age=float(np.clip(rng.normal(59.0, 15.0), 25.0, 90.0)),
        sex="M" if rng.random() < 0.546 else "F",
        bmi=float(np.clip(rng.normal(26.0, 6.0), 16.0, 45.0)),
        lung_mask_label_set=frozenset({LUNG}),
    )
    origin = tuple(-(n - 1) / 2.0 * s for n, s in zip(dims, spacing))
    volume = VoxelVolume(labels, spacing, origin, VolumeKind.MATERIAL_LABEL)
    return volume, MaterialTable.default(), meta


def materialize_attenuation(labels: VoxelVolume, table: MaterialTable) -> VoxelVolume:
    """Replace each material label with its linear attenuation (1/mm)."""
    present = np.unique(labels.values)
    known = set(table.labels)
    unknown = [int(v) for v in present if int(v) not in known or v != int(v)]
    if unknown:
        raise KeyError(f"labels not in material table: {unknown}")
    lut = np.zeros(int(max(max(known), present.max())) + 1, dtype=np.float32)
    for m in table.entries:
        lut[m.label] = m.mu
    mu = lut[labels.values.astype(np.int64)]
    return labels.with_values(mu, VolumeKind.ATTENUATION)


def lung_mask(labels: VoxelVolume, meta: PhantomMetadata) -> VoxelVolume:
    """Binary mask of voxels whose label is in ``meta.lung_mask_label_set``."""
    members = np.array(sorted(meta.lung_mask_label_set), dtype=labels.values.dtype)
    mask = np.isin(labels.values, members).astype(np.uint8)
    return labels.with_values(mask, VolumeKind.BINARY)
