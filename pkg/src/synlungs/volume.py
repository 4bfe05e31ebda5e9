"""Voxel volumes, material tables and MetaImage (.mhd/.raw) I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np


class VolumeKind(str, Enum):
    MATERIAL_LABEL = "MaterialLabel"
    ATTENUATION = "Attenuation_per_mm"
    HU = "HU"
    BINARY = "Binary"
    INSTANCE_MASK = "InstanceMask"
    SINOGRAM = "sinogram"


class VolumeFormatError(ValueError):
    """Raised for malformed or unsupported MetaImage files."""


@dataclass(frozen=True, eq=False)
class VoxelVolume:
    """Dense 3D scalar grid with physical metadata.

    ``values`` is stored with shape ``(nz, ny, nx)`` so that the flattened
    C-order buffer is x-fastest, matching the raw payload layout. ``origin``
    is the world position (mm) of the center of voxel ``(0, 0, 0)``.
    """

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    kind: VolumeKind = VolumeKind.HU

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ValueError(f"values must be a non-empty 3D array, got shape {values.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        origin = tuple(float(o) for o in self.origin)
        kind = VolumeKind(self.kind)
        if kind == VolumeKind.ATTENUATION and np.any(values < 0):
            raise ValueError("attenuation volumes must be non-negative")
        if kind == VolumeKind.MATERIAL_LABEL and values.dtype.kind not in "iub":
            if not np.array_equal(values, np.round(values)):
                raise ValueError("material labels must be integers")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "kind", kind)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.values.shape
        return nx, ny, nz

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def with_values(self, values: np.ndarray, kind: VolumeKind | None = None) -> VoxelVolume:
        return replace(self, values=np.asarray(values), kind=self.kind if kind is None else kind)

    def world_coords(self, axis: int) -> np.ndarray:
        """Voxel-center world coordinates (mm) along axis 0=x, 1=y, 2=z."""
        n = self.dims[axis]
        return self.origin[axis] + self.spacing[axis] * np.arange(n)

    def world_to_index(self, point_mm) -> np.ndarray:
        """Continuous (x, y, z) voxel index of a world point."""
        p = np.asarray(point_mm, dtype=float)
        return (p - np.asarray(self.origin)) / np.asarray(self.spacing)

    def index_to_world(self, index_xyz) -> np.ndarray:
        i = np.asarray(index_xyz, dtype=float)
        return np.asarray(self.origin) + i * np.asarray(self.spacing)

    def same_grid(self, other: VoxelVolume, atol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=atol)
            and np.allclose(self.origin, other.origin, atol=atol)
        )

    def __eq__(self, other):
        if not isinstance(other, VoxelVolume):
            return NotImplemented
        return (
            self.same_grid(other, atol=0.0)
            and self.kind == other.kind
            and self.values.dtype == other.values.dtype
            and np.array_equal(self.values, other.values, equal_nan=self.values.dtype.kind == "f")
        )

    __hash__ = None


@dataclass(frozen=True)
class Material:
    label: int
    name: str
    mu: float  # per mm
    hu_nominal: float


# Mass attenuation coefficients (cm^2/g), NIST XCOM tabulations.
_ENERGIES_KEV = np.array([40.0, 50.0, 60.0, 80.0, 100.0])
_MU_RHO = {
    "water": [0.2683, 0.2269, 0.2059, 0.1837, 0.1707],
    "air": [0.2485, 0.2080, 0.1875, 0.1662, 0.1541],
    "soft_tissue": [0.2688, 0.2264, 0.2048, 0.1823, 0.1693],
    "bone": [0.6655, 0.4242, 0.3148, 0.2229, 0.1855],
}
_DENSITY = {"water": 1.0, "air": 0.001205, "soft_tissue": 1.06, "bone": 1.92}
# inflated parenchyma modeled as soft tissue at reduced density
LUNG_DENSITY = 0.15

AIR, LUNG, SOFT_TISSUE, BONE, WATER = 0, 1, 2, 3, 4


def mass_attenuation(material: str, kev: float) -> float:
    """Log-log interpolated mass attenuation coefficient in cm^2/g."""
    if not _ENERGIES_KEV[0] <= kev <= _ENERGIES_KEV[-1]:
        raise ValueError(f"effective energy {kev} keV outside tabulated range 40-100 keV")
    table = np.log(np.asarray(_MU_RHO[material]))
    return float(np.exp(np.interp(np.log(kev), np.log(_ENERGIES_KEV), table)))


@dataclass(frozen=True)
class MaterialTable:
    entries: tuple[Material, ...]
    kev: float = 60.0

    def __post_init__(self):
        labels = [m.label for m in self.entries]
        if len(set(labels)) != len(labels):
            raise ValueError("material labels must be unique")
        if any(m.mu < 0 for m in self.entries):
            raise ValueError("material mu must be non-negative")
        names = {m.name for m in self.entries}
        missing = {"air", "lung", "soft_tissue", "bone", "water"} - names
        if missing:
            raise ValueError(f"material table missing required materials: {sorted(missing)}")

    @classmethod
    def default(cls, kev: float = 60.0) -> MaterialTable:
        """Monochromatic table at ``kev``; mu in 1/mm."""
        mu = {name: mass_attenuation(name, kev) * _DENSITY[name] / 10.0 for name in _DENSITY}
        mu["lung"] = mass_attenuation("soft_tissue", kev) * LUNG_DENSITY / 10.0
        mu["air"] = 0.0  # ~2e-6/mm; zeroed so the exterior projects to nothing
        water = mu["water"]
        order = [(AIR, "air"), (LUNG, "lung"), (SOFT_TISSUE, "soft_tissue"), (BONE, "bone"), (WATER, "water")]
        entries = tuple(
            Material(label, name, mu[name], 1000.0 * (mu[name] - water) / water) for label, name in order
        )
        return cls(entries, kev)

    def by_label(self, label: int) -> Material:
        for m in self.entries:
            if m.label == label:
                return m
        raise KeyError(f"unknown material label {label}")

    def by_name(self, name: str) -> Material:
        for m in self.entries:
            if m.name == name:
                return m
        raise KeyError(f"unknown material {name!r}")

    @property
    def mu_water(self) -> float:
        return self.by_name("water").mu

    @property
    def labels(self) -> list[int]:
        return [m.label for m in self.entries]

    def to_dict(self) -> dict:
        return {
            "kev": self.kev,
            "entries": [
                {"label": m.label, "name": m.name, "mu": m.mu, "hu_nominal": m.hu_nominal} for m in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> MaterialTable:
        return cls(tuple(Material(**e) for e in d["entries"]), d.get("kev", 60.0))


@dataclass(frozen=True)
class PhantomMetadata:
    twin_id: str
    age: float
    sex: str
    bmi: float
    lung_mask_label_set: frozenset[int] = field(default_factory=lambda: frozenset({LUNG}))

    def __post_init__(self):
        if self.age <= 0 or self.bmi <= 0:
            raise ValueError("age and bmi must be positive")
        if self.sex not in ("M", "F"):
            raise ValueError(f"sex must be 'M' or 'F', got {self.sex!r}")
        object.__setattr__(self, "lung_mask_label_set", frozenset(int(x) for x in self.lung_mask_label_set))

    def to_dict(self) -> dict:
        return {
            "twin_id": self.twin_id,
            "age": self.age,
            "sex": self.sex,
            "bmi": self.bmi,
            "lung_labels": sorted(self.lung_mask_label_set),
        }

    @classmethod
    def from_dict(cls, d: dict) -> PhantomMetadata:
        return cls(d["twin_id"], float(d["age"]), d["sex"], float(d["bmi"]), frozenset(d.get("lung_labels", [LUNG])))


# ----------------------------------------------------------------------------
# MetaImage I/O
# ----------------------------------------------------------------------------

_MET_TYPES = {
    "MET_UCHAR": np.dtype("<u1"),
    "MET_SHORT": np.dtype("<i2"),
    "MET_FLOAT": np.dtype("<f4"),
    "MET_DOUBLE": np.dtype("<f8"),
}
_NP_TO_MET = {np.dtype(v).newbyteorder("="): k for k, v in _MET_TYPES.items()}


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def _parse_header(path: Path) -> dict[str, str]:
    header = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise VolumeFormatError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        header[key.strip()] = value.strip()
    return header


def _floats(header: dict, key: str, default=None) -> tuple[float, ...]:
    if key not in header:
        if default is None:
            raise VolumeFormatError(f"missing header field {key}")
        return default
    try:
        vals = tuple(float(x) for x in header[key].split())
    except ValueError as exc:
        raise VolumeFormatError(f"bad {key}: {header[key]!r}") from exc
    if len(vals) != 3:
        raise VolumeFormatError(f"{key} must have 3 components")
    return vals


def load_volume(path: str | Path) -> VoxelVolume:
    """Read a MetaImage header and its raw payload.

    The kind is taken from the JSON sidecar when present, else inferred from
    the element type (integers as labels, floats as HU).
    """
    path = Path(path)
    header = _parse_header(path)
    if header.get("NDims", "3") != "3":
        raise VolumeFormatError("only NDims = 3 is supported")
    if header.get("ByteOrderMSB", "False").lower() == "true":
        raise VolumeFormatError("big-endian payloads are not supported")
    try:
        dims = tuple(int(x) for x in header["DimSize"].split())
    except (KeyError, ValueError) as exc:
        raise VolumeFormatError("missing or malformed DimSize") from exc
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeFormatError(f"invalid DimSize {dims}")
    spacing = _floats(header, "ElementSpacing", (1.0, 1.0, 1.0))
    origin = _floats(header, "Offset", (0.0, 0.0, 0.0))
    etype = header.get("ElementType")
    if etype not in _MET_TYPES:
        raise VolumeFormatError(f"unsupported ElementType {etype!r}")
    data_file = header.get("ElementDataFile")
    if not data_file or data_file == "LOCAL":
        raise VolumeFormatError("ElementDataFile must name a companion raw file")
    raw = np.fromfile(path.parent / data_file, dtype=_MET_TYPES[etype])
    n = dims[0] * dims[1] * dims[2]
    if raw.size != n:
        raise VolumeFormatError(f"header declares {n} voxels but payload holds {raw.size}")
    values = raw.astype(raw.dtype.newbyteorder("="), copy=False).reshape(dims[2], dims[1], dims[0])

    kind = VolumeKind.MATERIAL_LABEL if values.dtype.kind in "iu" else VolumeKind.HU
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text(encoding="utf-8"))
        kind = VolumeKind(meta.get("kind", kind))
    return VoxelVolume(values, spacing, origin, kind)


def load_sidecar(path: str | Path) -> dict:
    side = sidecar_path(path)
    return json.loads(side.read_text(encoding="utf-8")) if side.exists() else {}


def save_volume(v: VoxelVolume, path: str | Path, extra: dict | None = None) -> None:
    """Write ``v`` as ``<name>.mhd`` + ``<name>.raw`` plus a JSON sidecar.

    ``extra`` entries (e.g. phantom metadata) are merged into the sidecar.
    """
    path = Path(path)
    dtype = v.values.dtype.newbyteorder("=")
    if dtype not in _NP_TO_MET:
        raise VolumeFormatError(f"no MetaImage element type for dtype {v.values.dtype}")
    met = _NP_TO_MET[dtype]
    raw_path = path.with_suffix(".raw")
    nx, ny, nz = v.dims
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "ByteOrderMSB = False",
        "CompressedData = False",
        f"Offset = {' '.join(repr(o) for o in v.origin)}",
        f"ElementSpacing = {' '.join(repr(s) for s in v.spacing)}",
        f"DimSize = {nx} {ny} {nz}",
        f"ElementType = {met}",
        f"ElementDataFile = {raw_path.name}",
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    np.ascontiguousarray(v.values, dtype=_MET_TYPES[met]).tofile(raw_path)
    sidecar = {"kind": v.kind.value}
    if extra:
        sidecar.update(extra)
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
