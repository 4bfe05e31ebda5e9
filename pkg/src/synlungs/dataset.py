"""Dataset export: volumes, instance masks, CSV manifest, training patches."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .ct.simulate import ReconVolume
from .volume import VolumeKind, VoxelVolume, save_volume

MANIFEST_COLUMNS = (
    "scan_id", "lesion_id", "coordX", "coordY", "coordZ", "diameter_mm",
    "bbox_min_x", "bbox_min_y", "bbox_min_z", "bbox_max_x", "bbox_max_y", "bbox_max_z",
    "mask_path", "probability", "label", "scanner", "filter_cutoff",
)
FLOAT_FORMAT = "{:.6g}"

PREPROCESS_SPACING = (0.7, 0.7, 1.25)
PATCH_DIMS = (64, 64, 64)
HU_CLIP = (-1000.0, 500.0)
PAD_HU = -1000.0
STD_FLOOR = 1e-6


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Annotation:
    scan_id: str
    lesion_id: str
    center_mm: tuple[float, float, float]
    diameter_mm: float
    bbox_mm: tuple[tuple[float, float, float], tuple[float, float, float]]
    mask_path: str = ""
    probability: float = 0.0
    label: str = "benign"
    scanner: str = ""
    filter_cutoff: float = 0.0

    def __post_init__(self):
        if self.diameter_mm <= 0:
            raise ValueError("diameter must be positive")
        lo, hi = (np.asarray(c, dtype=float) for c in self.bbox_mm)
        c = np.asarray(self.center_mm, dtype=float)
        # compare at the manifest's printed precision
        tol = 1e-5 * np.maximum(1.0, np.abs(np.concatenate([lo, hi, c])).max())
        if (c < lo - tol).any() or (c > hi + tol).any():
            raise ValueError(f"bbox {self.bbox_mm} does not contain center {self.center_mm}")
        if ((hi - lo) < self.diameter_mm - tol).any():
            raise ValueError("bbox edges must be at least the diameter")
        if self.label not in ("benign", "malignant"):
            raise ValueError(f"label must be benign or malignant, got {self.label!r}")

    @property
    def key(self) -> tuple[str, str]:
        return self.scan_id, self.lesion_id


@dataclass(frozen=True)
class Manifest:
    rows: tuple[Annotation, ...] = ()
    dataset_seed: int = 0
    tool_version: str = __version__

    def __post_init__(self):
        rows = tuple(sorted(self.rows, key=lambda a: a.key))
        keys = [a.key for a in rows]
        if len(set(keys)) != len(keys):
            dup = next(k for k in keys if keys.count(k) > 1)
            raise ManifestError(f"duplicate (scan_id, lesion_id) {dup}")
        object.__setattr__(self, "rows", rows)

    @property
    def scan_ids(self) -> list[str]:
        return sorted({a.scan_id for a in self.rows})

    def merged(self, rows) -> Manifest:
        return replace(self, rows=self.rows + tuple(rows))


def bbox_for(center_mm, diameter: float, mask: VoxelVolume | None = None, instance: int | None = None):
    """World-mm box around the lesion's mask voxels, widened to >= diameter."""
    c = np.asarray(center_mm, dtype=float)
    lo, hi = c - diameter / 2.0, c + diameter / 2.0
    if mask is not None:
        sel = mask.values == instance if instance is not None else mask.values != 0
        idx = np.nonzero(sel)
        if idx[0].size:
            sp = np.asarray(mask.spacing)
            vmin = mask.index_to_world([idx[2].min(), idx[1].min(), idx[0].min()]) - sp / 2
            vmax = mask.index_to_world([idx[2].max(), idx[1].max(), idx[0].max()]) + sp / 2
            lo, hi = np.minimum(lo, vmin), np.maximum(hi, vmax)
    return tuple(float(x) for x in lo), tuple(float(x) for x in hi)


def export_scan(recon: ReconVolume | VoxelVolume, mask: VoxelVolume, annotations, out_dir: str | Path,
                scan_id: str | None = None) -> list[Annotation]:
    """Write ``volumes/<scan_id>`` and ``masks/<scan_id>``; return the rows.

    Annotation ``mask_path`` values are set relative to ``out_dir``.
    """
    volume = recon.volume if isinstance(recon, ReconVolume) else recon
    annotations = list(annotations)
    if scan_id is None:
        ids = {a.scan_id for a in annotations}
        if len(ids) != 1:
            raise ValueError("scan_id is ambiguous; pass it explicitly")
        scan_id = ids.pop()
    if not volume.same_grid(mask):
        raise ValueError("mask grid does not match the reconstructed volume")
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    extra = recon.provenance() if isinstance(recon, ReconVolume) else None
    save_volume(volume, out_dir / "volumes" / f"{scan_id}.mhd", extra=extra)
    mask_rel = f"masks/{scan_id}.mhd"
    save_volume(mask, out_dir / mask_rel)
    return [replace(a, scan_id=scan_id, mask_path=mask_rel) for a in annotations]


def _fmt(x: float) -> str:
    return FLOAT_FORMAT.format(float(x))


def manifest_to_csv(m: Manifest) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for a in m.rows:
        lo, hi = a.bbox_mm
        writer.writerow([
            a.scan_id, a.lesion_id, *map(_fmt, a.center_mm), _fmt(a.diameter_mm),
            *map(_fmt, lo), *map(_fmt, hi), a.mask_path, _fmt(a.probability), a.label,
            a.scanner, _fmt(a.filter_cutoff),
        ])
    return buf.getvalue()


def write_manifest(m: Manifest, path: str | Path) -> None:
    Path(path).write_text(manifest_to_csv(m), encoding="utf-8")


def read_manifest(path: str | Path, dataset_seed: int = 0) -> Manifest:
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestError(f"{path} is empty") from None
    if tuple(header) != MANIFEST_COLUMNS:
        raise ManifestError(f"unexpected manifest header {header}")
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(MANIFEST_COLUMNS):
            raise ManifestError(f"line {lineno}: expected {len(MANIFEST_COLUMNS)} fields, got {len(rec)}")
        d = dict(zip(MANIFEST_COLUMNS, rec))
        try:
            f = {k: float(d[k]) for k in MANIFEST_COLUMNS if k not in ("scan_id", "lesion_id", "mask_path", "label", "scanner")}
            rows.append(Annotation(
                scan_id=d["scan_id"],
                lesion_id=d["lesion_id"],
                center_mm=(f["coordX"], f["coordY"], f["coordZ"]),
                diameter_mm=f["diameter_mm"],
                bbox_mm=((f["bbox_min_x"], f["bbox_min_y"], f["bbox_min_z"]),
                         (f["bbox_max_x"], f["bbox_max_y"], f["bbox_max_z"])),
                mask_path=d["mask_path"],
                probability=f["probability"],
                label=d["label"],
                scanner=d["scanner"],
                filter_cutoff=f["filter_cutoff"],
            ))
        except ValueError as exc:
            raise ManifestError(f"line {lineno}: {exc}") from exc
    return Manifest(tuple(rows), dataset_seed)


def write_dataset_json(out_dir: str | Path, seed: int, scanners: dict, extra: dict | None = None) -> None:
    doc = {"dataset_seed": seed, "tool_version": __version__, "scanners": scanners}
    if extra:
        doc.update(extra)
    Path(out_dir, "dataset.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ----------------------------------------------------------------------------
# preprocessing
# ----------------------------------------------------------------------------


def _linear_axis(values: np.ndarray, t: np.ndarray, axis: int) -> np.ndarray:
    n = values.shape[axis]
    if n == 1:
        return np.take(values, np.zeros(t.size, dtype=np.int64), axis=axis)
    i0 = np.clip(np.floor(t).astype(np.int64), 0, n - 2)
    frac = t - i0  # may fall outside [0, 1] at the edges: linear extrapolation
    shape = [1] * values.ndim
    shape[axis] = t.size
    frac = frac.reshape(shape)
    return np.take(values, i0, axis=axis) * (1.0 - frac) + np.take(values, i0 + 1, axis=axis) * frac


def resample_volume(v: VoxelVolume, target_spacing) -> VoxelVolume:
    """Trilinear resampling onto ``target_spacing`` over the same world extent.

    The first voxel center is kept; ``dims = ceil(extent / target_spacing)``.
    Affine intensity fields are reproduced exactly (edges extrapolate
    linearly).
    """
    target = tuple(float(s) for s in target_spacing)
    if min(target) <= 0:
        raise ValueError("target spacing must be positive")
    values = np.asarray(v.values, dtype=np.float64)
    dims = []
    for axis in range(3):  # x, y, z
        extent = v.dims[axis] * v.spacing[axis]
        n = max(1, int(math.ceil(extent / target[axis] - 1e-9)))
        dims.append(n)
        t = np.arange(n) * target[axis] / v.spacing[axis]
        if np.allclose(t, np.round(t)) and n == v.dims[axis]:
            continue
        values = _linear_axis(values, t, axis=2 - axis)
    out_dtype = np.float32 if v.values.dtype.kind != "f" else v.values.dtype
    return VoxelVolume(values.astype(out_dtype), target, v.origin, v.kind)


def extract_patch(
    v: VoxelVolume,
    center_mm,
    patch_dims=PATCH_DIMS,
    clip=HU_CLIP,
    standardize: bool = True,
) -> VoxelVolume:
    """Fixed-size HU patch around ``center_mm``, padded at -1000 HU."""
    nx, ny, nz = (int(d) for d in patch_dims)
    c = np.rint(v.world_to_index(center_mm)).astype(np.int64)
    start = c - np.array([nx, ny, nz]) // 2
    patch = np.full((nz, ny, nx), PAD_HU, dtype=np.float64)
    src, dst = [], []
    for ax, n in enumerate((nz, ny, nx)):  # array axis order z, y, x
        a = 2 - ax
        s0 = max(start[a], 0)
        s1 = min(start[a] + n, v.dims[a])
        if s1 <= s0:
            src = None
            break
        src.append(slice(s0, s1))
        dst.append(slice(s0 - start[a], s1 - start[a]))
    if src is not None:
        patch[tuple(dst)] = v.values[tuple(src)]
    if clip is not None:
        np.clip(patch, clip[0], clip[1], out=patch)
    if standardize:
        patch = (patch - patch.mean()) / max(patch.std(), STD_FLOOR)
    origin = v.index_to_world(start)
    return VoxelVolume(patch.astype(np.float32), v.spacing, tuple(origin), VolumeKind.HU)
