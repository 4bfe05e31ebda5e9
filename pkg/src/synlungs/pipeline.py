"""End-to-end dataset generation: config parsing and the per-twin pipeline."""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .ct.geometry import ScannerConfig, builtin_scanner
from .ct.simulate import DEFAULT_SPR, ReconVolume, acquire, default_slices, reconstruct
from .dataset import Annotation, Manifest, bbox_for, export_scan, write_dataset_json, write_manifest
from .labeler import LogisticModel, NoduleFeatures, assign_label, default_model, load_model, lobe_from_position
from .lesion import (
    ClbParams,
    GammaParams,
    LesionSpec,
    Margin,
    NoValidPlacement,
    embed_lesion,
    place_lesion,
    sample_size,
    synthesize_lesion,
)
from .phantom import MIN_PHANTOM_DIMS, generate_chest_phantom, lung_mask, materialize_attenuation
from .seeding import derive_seed, stream
from .volume import MaterialTable, VolumeKind, VoxelVolume

log = logging.getLogger(__name__)

ALLOWED_CUTOFFS = (0.5, 0.6, 1.2)
SCANNER_NAMES = ("W12", "W20")
MAX_LESIONS_PER_TWIN = 255  # instance labels are stored as uint8


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of a dataset run. Field comments give the defaults' meaning."""

    output_dir: str = "synlungs_out"
    seed: int = 0
    n_twins: int = 1
    lesions_per_twin: tuple[int, int] = (1, 3)  # inclusive range
    gamma: GammaParams = field(default_factory=GammaParams)
    clb: ClbParams = field(default_factory=ClbParams)
    scanners: tuple[str, ...] = ("W12",)
    filter_cutoffs: tuple[float, ...] = (0.6,)
    i0: float = 2e5
    spr: float = DEFAULT_SPR
    n_views: int | None = None  # None keeps the scanner's 1000 views
    out_spacing: float | None = None  # None reconstructs at the phantom's in-plane spacing
    phantom_dims: tuple[int, int, int] = (128, 128, 48)
    phantom_spacing: tuple[float, float, float] = (2.5, 2.5, 2.5)
    kev: float = 60.0
    label_model_path: str | None = None  # None uses the built-in coefficients
    threshold: float = 0.5
    label_mode: str = "Deterministic"
    wall_clearance: float = 2.0
    max_attempts: int = 1000
    margin_weights: tuple[float, float, float] = (0.6, 0.25, 0.15)  # Smooth, Lobulated, Spiculated
    irregularity: tuple[float, float] = (0.0, 0.4)

    def __post_init__(self):
        if self.n_twins < 1:
            raise ConfigError("n_twins must be >= 1")
        lo, hi = self.lesions_per_twin
        if lo < 0 or hi < lo or hi > MAX_LESIONS_PER_TWIN:
            raise ConfigError(f"lesions_per_twin must satisfy 0 <= min <= max <= {MAX_LESIONS_PER_TWIN}")
        if not self.scanners:
            raise ConfigError("at least one scanner is required")
        for name in self.scanners:
            if name not in SCANNER_NAMES:
                raise ConfigError(f"scanner must be one of {SCANNER_NAMES}, got {name!r}")
        if not self.filter_cutoffs:
            raise ConfigError("filter_cutoffs must be nonempty")
        for c in self.filter_cutoffs:
            if c not in ALLOWED_CUTOFFS:
                raise ConfigError(f"filter cutoff must be one of {ALLOWED_CUTOFFS}, got {c}")
        if len(set(self.scanners)) != len(self.scanners) or len(set(self.filter_cutoffs)) != len(self.filter_cutoffs):
            raise ConfigError("scanners and filter_cutoffs must not repeat")
        if self.i0 <= 0:
            raise ConfigError("i0 must be positive")
        if self.spr < 0:
            raise ConfigError("spr must be non-negative")
        if self.n_views is not None and self.n_views < 4:
            raise ConfigError("n_views must be >= 4")
        if self.out_spacing is not None and self.out_spacing <= 0:
            raise ConfigError("out_spacing must be positive")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]")
        if self.label_mode not in ("Deterministic", "Bernoulli"):
            raise ConfigError("label_mode must be Deterministic or Bernoulli")
        if self.wall_clearance < 0 or self.max_attempts < 1:
            raise ConfigError("wall_clearance must be >= 0 and max_attempts >= 1")
        if len(self.margin_weights) != 3 or min(self.margin_weights) < 0 or sum(self.margin_weights) <= 0:
            raise ConfigError("margin_weights needs three non-negative weights with a positive sum")
        ilo, ihi = self.irregularity
        if not 0.0 <= ilo <= ihi <= 1.0:
            raise ConfigError("irregularity range must lie within [0, 1]")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if len(self.phantom_dims) != 3 or min(self.phantom_dims) < MIN_PHANTOM_DIMS:
            raise ConfigError(f"phantom_dims must be three sizes >= {MIN_PHANTOM_DIMS}")
        if len(self.phantom_spacing) != 3 or min(self.phantom_spacing) <= 0:
            raise ConfigError("phantom_spacing must be three positive values")

    def scanner_configs(self) -> list[ScannerConfig]:
        overrides = {"i0": self.i0}
        if self.n_views is not None:
            overrides["n_views"] = self.n_views
        return [builtin_scanner(name, **overrides) for name in self.scanners]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


_ALIASES = {"scanner": "scanners", "mode": "label_mode"}
_NESTED = {"gamma": GammaParams, "clb": ClbParams}


def config_from_dict(raw: dict, strict: bool = True) -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    known = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    kwargs = {}
    for key, value in raw.items():
        name = _ALIASES.get(key, key)
        if name not in known:
            if strict:
                raise ConfigError(f"unknown config key {key!r}")
            log.warning("ignoring unknown config key %r", key)
            continue
        if name in _NESTED:
            cls = _NESTED[name]
            sub = {f.name for f in dataclasses.fields(cls)}
            value = value or {}
            for k in value:
                if k not in sub:
                    if strict:
                        raise ConfigError(f"unknown config key {key}.{k!r}")
            try:
                value = cls(**{k: float(v) for k, v in value.items() if k in sub})
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        elif name in ("scanners",) and isinstance(value, str):
            value = (value,)
        elif name == "filter_cutoffs" and not isinstance(value, (list, tuple)):
            value = (value,)
        if isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        if "filter_cutoffs" in kwargs:
            kwargs["filter_cutoffs"] = tuple(float(c) for c in kwargs["filter_cutoffs"])
        for k in ("phantom_dims", "lesions_per_twin"):
            if k in kwargs:
                kwargs[k] = tuple(int(v) for v in kwargs[k])
        for k in ("phantom_spacing", "margin_weights", "irregularity"):
            if k in kwargs:
                kwargs[k] = tuple(float(v) for v in kwargs[k])
        for k in ("seed", "n_twins", "max_attempts"):
            if k in kwargs:
                kwargs[k] = int(kwargs[k])
        if kwargs.get("n_views") is not None:
            kwargs["n_views"] = int(kwargs["n_views"])
        for k in ("i0", "spr", "threshold", "wall_clearance", "kev"):
            if k in kwargs:
                kwargs[k] = float(kwargs[k])
        if kwargs.get("out_spacing") is not None:
            kwargs["out_spacing"] = float(kwargs["out_spacing"])
        if "label_mode" in kwargs:
            kwargs["label_mode"] = {"det": "Deterministic", "bern": "Bernoulli"}.get(kwargs["label_mode"], kwargs["label_mode"])
        return PipelineConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def parse_config(path: str | Path, strict: bool = True) -> PipelineConfig:
    """Read a YAML config. Unknown keys are errors when ``strict``."""
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(raw or {}, strict=strict)


# ----------------------------------------------------------------------------
# pipeline
# ----------------------------------------------------------------------------


@dataclass
class TwinResult:
    index: int
    rows: list[Annotation] = field(default_factory=list)
    n_scans: int = 0
    n_lesions: int = 0
    error: str | None = None


@dataclass
class PipelineResult:
    manifest: Manifest
    n_scans: int
    failed_twins: list[int]

    @property
    def ok(self) -> bool:
        return not self.failed_twins


def twin_id(index: int) -> str:
    return f"twin{index:04d}"


def scan_id(index: int, scanner: str, cutoff: float) -> str:
    return f"{twin_id(index)}_{scanner}_hann{cutoff:g}"


def _lesion_specs(cfg: PipelineConfig, index: int) -> list[LesionSpec]:
    rng = stream(cfg.seed, index, "lesions")
    count = int(rng.integers(cfg.lesions_per_twin[0], cfg.lesions_per_twin[1] + 1))
    weights = np.asarray(cfg.margin_weights) / sum(cfg.margin_weights)
    margins = list(Margin)
    specs = []
    for k in range(count):
        diameter = sample_size(cfg.gamma, rng)
        margin = margins[int(rng.choice(len(margins), p=weights))]
        irregularity = float(rng.uniform(*cfg.irregularity)) if cfg.irregularity[1] > cfg.irregularity[0] else cfg.irregularity[0]
        specs.append(LesionSpec(
            lesion_id=f"L{k:02d}",
            diameter=round(diameter, 3),
            shape_seed=derive_seed(cfg.seed, index, "shape", k),
            texture_seed=derive_seed(cfg.seed, index, "texture", k),
            shape_irregularity=round(irregularity, 4),
            margin=margin,
        ))
    return specs


def _resample_nearest(mask: VoxelVolume, like: VoxelVolume) -> VoxelVolume:
    """Sample a label volume at ``like``'s voxel centers."""
    if mask.same_grid(like):
        return mask
    idx = []
    for axis in range(3):
        world = like.world_coords(axis)
        i = np.rint((world - mask.origin[axis]) / mask.spacing[axis]).astype(np.int64)
        idx.append(i)
    out = np.zeros(like.values.shape, dtype=mask.values.dtype)
    valid = [(i >= 0) & (i < mask.dims[a]) for a, i in enumerate(idx)]
    iz, iy, ix = (np.clip(idx[a], 0, mask.dims[a] - 1) for a in (2, 1, 0))
    block = mask.values[np.ix_(iz, iy, ix)]
    keep = valid[2][:, None, None] & valid[1][None, :, None] & valid[0][None, None, :]
    out[keep] = block[keep]
    return like.with_values(out, mask.kind)


def run_twin(cfg: PipelineConfig, index: int, model: LogisticModel, out_dir: Path) -> TwinResult:
    result = TwinResult(index)
    tid = twin_id(index)
    labels, table, meta = generate_chest_phantom(
        derive_seed(cfg.seed, index, "phantom"), cfg.phantom_dims, cfg.phantom_spacing, twin_id=tid
    )
    table = MaterialTable.default(cfg.kev) if cfg.kev != table.kev else table
    lung = lung_mask(labels, meta)
    mu = materialize_attenuation(labels, table)

    instances = np.zeros(labels.values.shape, dtype=np.uint8)
    placed = []
    lesions = []
    place_rng = stream(cfg.seed, index, "placement")
    for spec in _lesion_specs(cfg, index):
        lesion = synthesize_lesion(spec, cfg.clb)
        try:
            placement = place_lesion(lung, lesion, placed, place_rng, cfg.wall_clearance, cfg.max_attempts)
        except NoValidPlacement as exc:
            log.warning("%s: dropping lesion %s: %s", tid, spec.lesion_id, exc)
            continue
        mu, gt = embed_lesion(mu, table, lesion, placement)
        inside = gt.values.astype(bool)
        if not inside.any():
            # lesion smaller than one phantom voxel: keep its center voxel
            x, y, z = placement.center_voxel
            inside[z, y, x] = True
        instances[inside & (instances == 0)] = len(placed) + 1
        placed.append(placement)
        lesions.append((spec, lesion, placement))
    instance_vol = labels.with_values(instances, VolumeKind.INSTANCE_MASK)

    labeled = []
    for k, (spec, lesion, placement) in enumerate(lesions):
        features = NoduleFeatures(
            age=meta.age,
            sex=meta.sex,
            size=lesion.diameter_measured,
            margin=spec.margin.value,
            location=lobe_from_position(lung, placement.center_voxel[2]),
            nodule_type="Solid",
        )
        rng = stream(cfg.seed, index, "label", k) if cfg.label_mode == "Bernoulli" else None
        labeled.append(assign_label(features, model, cfg.threshold, rng, cfg.label_mode))

    scans = []
    for scanner in cfg.scanner_configs():
        noise_seed = derive_seed(cfg.seed, index, "scan", scanner.name)
        slices = default_slices(mu)
        sino = acquire(mu, scanner, slices, noise_seed, cfg.spr, noise=True, threads=1)
        for cutoff in cfg.filter_cutoffs:
            vol = reconstruct(sino, mu, cfg.out_spacing, cutoff=cutoff, mu_water=table.mu_water)
            recon = ReconVolume(vol, scanner.name, cutoff, scanner.i0, noise_seed, cfg.spr)
            scans.append((scanner.name, cutoff, recon))

    for scanner_name, cutoff, recon in scans:
        sid = scan_id(index, scanner_name, cutoff)
        mask = _resample_nearest(instance_vol, recon.volume)
        rows = []
        for k, ((spec, lesion, placement), lab) in enumerate(zip(lesions, labeled)):
            lo, hi = bbox_for(placement.center_mm, lesion.diameter_measured, mask, k + 1)
            rows.append(Annotation(
                scan_id=sid,
                lesion_id=spec.lesion_id,
                center_mm=placement.center_mm,
                diameter_mm=lesion.diameter_measured,
                bbox_mm=(lo, hi),
                probability=lab.probability,
                label=lab.label,
                scanner=scanner_name,
                filter_cutoff=cutoff,
            ))
        result.rows.extend(export_scan(recon, mask, rows, out_dir, scan_id=sid))
        result.n_scans += 1
    result.n_lesions = len(lesions)
    return result


def run_pipeline(cfg: PipelineConfig, threads: int = 1) -> PipelineResult:
    """Generate, image, label and export every twin; write manifest and dataset.json.

    Twins are independent and may run on ``threads`` workers; outputs are
    byte-identical for any thread count. A failing twin is logged and
    skipped.
    """
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = load_model(cfg.label_model_path) if cfg.label_model_path else default_model()

    def one(index: int) -> TwinResult:
        try:
            return run_twin(cfg, index, model, out_dir)
        except Exception as exc:  # failure isolation per twin
            log.error("%s failed: %s: %s", twin_id(index), type(exc).__name__, exc)
            return TwinResult(index, error=f"{type(exc).__name__}: {exc}")

    indices = range(cfg.n_twins)
    if threads <= 1:
        results = [one(i) for i in indices]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, indices))

    rows = [row for r in results for row in r.rows]
    manifest = Manifest(tuple(rows), cfg.seed)
    write_manifest(manifest, out_dir / "manifest.csv")
    failed = [r.index for r in results if r.error]
    write_dataset_json(
        out_dir,
        cfg.seed,
        {s.name: s.to_dict() for s in cfg.scanner_configs()},
        extra={
            # output_dir is left out so relocated runs stay byte-identical
            "config": {k: v for k, v in cfg.to_dict().items() if k != "output_dir"},
            "n_scans": sum(r.n_scans for r in results),
            "n_lesions": sum(r.n_lesions for r in results),
            "failed_twins": failed,
        },
    )
    return PipelineResult(manifest, sum(r.n_scans for r in results), failed)


def expected_scan_count(cfg: PipelineConfig, n_successful: int | None = None) -> int:
    n = cfg.n_twins if n_successful is None else n_successful
    return n * len(cfg.scanners) * len(cfg.filter_cutoffs)


def desk_config(output_dir: str | Path, seed: int = 0, n_twins: int = 3, **changes) -> PipelineConfig:
    """Small, fast settings: 64x64x40 phantom at 5 mm, 360 views, two lesions."""
    base = dict(
        output_dir=str(output_dir),
        seed=seed,
        n_twins=n_twins,
        lesions_per_twin=(2, 2),
        phantom_dims=(64, 64, 40),
        phantom_spacing=(5.0, 5.0, 5.0),
        n_views=360,
    )
    base.update(changes)
    return PipelineConfig(**base)


__all__ = [
    "ConfigError",
    "PipelineConfig",
    "PipelineResult",
    "config_from_dict",
    "desk_config",
    "expected_scan_count",
    "parse_config",
    "run_pipeline",
    "scan_id",
]
