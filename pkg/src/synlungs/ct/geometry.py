"""Scanner configurations and sinogram containers."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..volume import VolumeKind, VoxelVolume, load_sidecar, load_volume, save_volume


@dataclass(frozen=True)
class ScannerConfig:
    """Axial fan-beam acquisition geometry.

    Detector columns are equispaced on a flat detector with pitch
    ``channel_width`` at the source-to-detector distance. ``n_channels``
    and ``collimation`` describe the z extent and are kept for provenance,
    as is ``anode_angle`` (no heel effect is modeled).
    """

    name: str
    collimation: float
    siso_d: float
    sid: float
    n_channels: int
    channel_width: float
    anode_angle: float
    n_views: int = 1000
    n_detector_cols: int = 672
    i0: float = 2.0e5
    recon_filter: str = "Hann"
    cutoff: float = 1.0

    def __post_init__(self):
        if not self.sid > self.siso_d > 0:
            raise ValueError("need sid > siso_d > 0")
        if self.n_views < 4 or self.n_detector_cols < 2:
            raise ValueError("need n_views >= 4 and n_detector_cols >= 2")
        if self.i0 <= 0 or self.cutoff <= 0:
            raise ValueError("i0 and cutoff must be positive")
        if self.recon_filter != "Hann":
            raise ValueError(f"unsupported reconstruction filter {self.recon_filter!r}")

    @property
    def magnification(self) -> float:
        return self.sid / self.siso_d

    @property
    def pitch_at_iso(self) -> float:
        return self.channel_width / self.magnification

    @property
    def half_fan_angle(self) -> float:
        half_width = self.n_detector_cols / 2.0 * self.channel_width
        return float(np.arctan(half_width / self.sid))

    @property
    def fov_radius(self) -> float:
        """Radius of the circle at isocenter seen by every view."""
        return self.siso_d * float(np.sin(self.half_fan_angle))

    def column_positions(self) -> np.ndarray:
        """Detector-cell centers (mm) along the flat detector."""
        return (np.arange(self.n_detector_cols) - (self.n_detector_cols - 1) / 2.0) * self.channel_width

    def view_angles(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_views) / self.n_views

    def with_(self, **changes) -> ScannerConfig:
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ScannerConfig:
        return cls(**d)


_BUILTIN = {
    "W12": dict(collimation=12.0, siso_d=570.0, sid=1040.0, n_channels=16, channel_width=1.5,
                anode_angle=7.0, n_views=1000, n_detector_cols=672),
    "W20": dict(collimation=20.0, siso_d=541.0, sid=949.0, n_channels=16, channel_width=2.19,
                anode_angle=8.0, n_views=1000, n_detector_cols=448),
}


def builtin_scanner(name: str, **overrides) -> ScannerConfig:
    """The two reference scanner geometries, ``W12`` and ``W20``."""
    try:
        params = dict(_BUILTIN[name])
    except KeyError:
        raise ValueError(f"unknown scanner {name!r}; choose from {sorted(_BUILTIN)}") from None
    params.update(overrides)
    return ScannerConfig(name=name, **params)


@dataclass(frozen=True, eq=False)
class Sinogram:
    """Line integrals (mu * mm) indexed ``data[view, row, col]``."""

    data: np.ndarray
    view_angles: np.ndarray
    geometry: ScannerConfig
    slice_z: tuple[float, ...] = field(default=())

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError("sinogram data must be (views, rows, cols)")
        if data.shape[0] != len(self.view_angles) or data.shape[2] != self.geometry.n_detector_cols:
            raise ValueError("sinogram shape does not match its geometry")
        if not np.isfinite(data).all():
            raise ValueError("sinogram values must be finite")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "view_angles", np.asarray(self.view_angles, dtype=np.float64))
        object.__setattr__(self, "slice_z", tuple(float(z) for z in self.slice_z))

    @property
    def n_views(self) -> int:
        return self.data.shape[0]

    @property
    def n_rows(self) -> int:
        return self.data.shape[1]

    @property
    def n_cols(self) -> int:
        return self.data.shape[2]

    def with_data(self, data: np.ndarray) -> Sinogram:
        return replace(self, data=data)


def save_sinogram(s: Sinogram, path: str | Path) -> None:
    """Store as (cols, views, rows) MetaImage with kind ``sinogram``."""
    vol = VoxelVolume(
        np.ascontiguousarray(s.data.transpose(1, 0, 2), dtype=np.float64),
        spacing=(s.geometry.channel_width, 1.0, 1.0),
        kind=VolumeKind.SINOGRAM,
    )
    save_volume(vol, path, extra={
        "geometry": s.geometry.to_dict(),
        "view_angles": s.view_angles.tolist(),
        "slice_z": list(s.slice_z),
    })


def load_sinogram(path: str | Path) -> Sinogram:
    vol = load_volume(path)
    meta = load_sidecar(path)
    if vol.kind != VolumeKind.SINOGRAM:
        raise ValueError(f"{path} is not a sinogram (kind {vol.kind.value})")
    return Sinogram(
        np.asarray(vol.values).transpose(1, 0, 2),
        np.asarray(meta["view_angles"]),
        ScannerConfig.from_dict(meta["geometry"]),
        tuple(meta.get("slice_z", ())),
    )


def scanner_json(cfg: ScannerConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
