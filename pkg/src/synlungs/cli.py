"""``synlungs`` command line: each pipeline stage as a subcommand.

Exit codes: 0 success, 1 runtime or partial failure, 2 invalid config or usage.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import __version__
from .ct.geometry import builtin_scanner
from .ct.simulate import DEFAULT_SPR, simulate_scan
from .dataset import Annotation, Manifest, bbox_for, export_scan, read_manifest, write_manifest
from .labeler import NoduleFeatures, assign_label, default_model, load_model
from .lesion import (
    LESION_SPACING,
    ClbParams,
    LesionSpec,
    LesionVolume,
    Margin,
    embed_lesion,
    equivalent_diameter,
    place_lesion,
    synthesize_lesion,
)
from .metrics import dice
from .phantom import generate_chest_phantom, lung_mask, materialize_attenuation
from .pipeline import ConfigError, PipelineConfig, parse_config, run_pipeline
from .seeding import derive_seed, stream
from .volume import MaterialTable, PhantomMetadata, VolumeKind, VoxelVolume, load_sidecar, load_volume, save_volume

log = logging.getLogger("synlungs")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


def _mask_path(path: Path) -> Path:
    return path.with_name(path.stem + "_mask.mhd")


def _load_phantom(path: str) -> tuple[VoxelVolume, MaterialTable, PhantomMetadata | None]:
    vol = load_volume(path)
    side = load_sidecar(path)
    table = MaterialTable.from_dict(side["materials"]) if "materials" in side else MaterialTable.default()
    meta = PhantomMetadata.from_dict(side["metadata"]) if "metadata" in side else None
    return vol, table, meta


def _attenuation(vol: VoxelVolume, table: MaterialTable) -> VoxelVolume:
    if vol.kind == VolumeKind.MATERIAL_LABEL:
        return materialize_attenuation(vol, table)
    if vol.kind != VolumeKind.ATTENUATION:
        raise ValueError(f"expected a material-label or attenuation volume, got {vol.kind.value}")
    return vol


def cmd_phantom_gen(args) -> int:
    labels, table, meta = generate_chest_phantom(args.seed, tuple(args.dims), tuple(args.spacing))
    extra = {"metadata": meta.to_dict(), "materials": table.to_dict()}
    save_volume(labels, args.out, extra=extra)
    if args.mu_out:
        save_volume(materialize_attenuation(labels, table), args.mu_out, extra=extra)
    print(json.dumps(meta.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_lesion_synth(args) -> int:
    spec = LesionSpec(
        lesion_id=args.lesion_id,
        diameter=args.diameter,
        shape_seed=derive_seed(args.seed, "shape"),
        texture_seed=derive_seed(args.seed, "texture"),
        shape_irregularity=args.irregularity,
        margin=Margin(args.margin),
    )
    lesion = synthesize_lesion(spec, ClbParams())
    out = Path(args.out)
    extra = {"spec": {k: getattr(v, "value", v) for k, v in dataclasses.asdict(spec).items()}}
    save_volume(lesion.hu, out, extra=extra)
    save_volume(lesion.mask, _mask_path(out), extra=extra)
    print(json.dumps({"diameter_measured": lesion.diameter_measured, "dims": lesion.mask.dims}))
    return EXIT_OK


def cmd_lesion_embed(args) -> int:
    labels, table, meta = _load_phantom(args.phantom)
    if labels.kind != VolumeKind.MATERIAL_LABEL:
        raise ValueError("lesion embed needs a material-label phantom (for the lung mask)")
    hu = load_volume(args.lesion)
    mask = load_volume(_mask_path(Path(args.lesion)))
    lesion = LesionVolume(hu, mask, equivalent_diameter(mask))
    if abs(hu.spacing[0] - LESION_SPACING) > 1e-9:
        raise ValueError(f"lesion volumes must have {LESION_SPACING} mm spacing")
    meta = meta or PhantomMetadata("external", 60.0, "F", 25.0, frozenset({1}))
    lung = lung_mask(labels, meta)
    placement = place_lesion(lung, lesion, [], stream(args.seed, "placement"), args.wall_clearance)
    mu, gt = embed_lesion(materialize_attenuation(labels, table), table, lesion, placement)
    extra = {"metadata": meta.to_dict(), "materials": table.to_dict(), "center_mm": list(placement.center_mm)}
    save_volume(mu, args.out, extra=extra)
    save_volume(gt, args.mask_out)
    print(json.dumps({"center_mm": placement.center_mm, "attempts": placement.attempts_used}))
    return EXIT_OK


def _parse_filter(text: str) -> float:
    kind, _, value = text.partition(":")
    if kind.lower() != "hann" or not value:
        raise argparse.ArgumentTypeError(f"filter must look like hann:<cutoff>, got {text!r}")
    cutoff = float(value)
    if cutoff <= 0:
        raise argparse.ArgumentTypeError("filter cutoff must be positive")
    return cutoff


def cmd_ct_simulate(args) -> int:
    vol, table, _ = _load_phantom(args.input)
    mu = _attenuation(vol, table)
    overrides = {"cutoff": args.filter, "i0": args.i0}
    if args.views:
        overrides["n_views"] = args.views
    cfg = builtin_scanner(args.scanner, **overrides)
    recon = simulate_scan(
        mu, cfg, seed=args.seed, spr=args.spr, out_spacing=args.out_spacing,
        noise=not args.noise_free, mu_water=table.mu_water, threads=args.threads,
    )
    save_volume(recon.volume, args.out, extra=recon.provenance())
    return EXIT_OK


FEATURE_COLUMNS = ("age", "sex", "size", "margin", "location", "nodule_type")


def cmd_label(args) -> int:
    model = load_model(args.model) if args.model else default_model()
    with open(args.features, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow([*FEATURE_COLUMNS, "probability", "label", "threshold_used"])
        for i, row in enumerate(rows):
            f = NoduleFeatures(
                age=float(row["age"]), sex=row["sex"], size=float(row["size"]),
                margin=row.get("margin") or "Smooth", location=row.get("location") or "LowerLobe",
                nodule_type=row.get("nodule_type") or "Solid",
            )
            rng = stream(args.seed, "label", i) if args.mode == "bern" else None
            lab = assign_label(f, model, args.threshold, rng, args.mode)
            writer.writerow([*(row.get(c, "") for c in FEATURE_COLUMNS), f"{lab.probability:.6g}", lab.label,
                             f"{lab.threshold_used:.6g}"])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_export(args) -> int:
    """Add one scan to a dataset directory, deriving rows from mask instances."""
    volume = load_volume(args.volume)
    mask = load_volume(args.mask)
    if mask.kind == VolumeKind.BINARY:
        lab, _ = ndimage.label(mask.values, structure=ndimage.generate_binary_structure(3, 1))
        mask = mask.with_values(lab.astype(np.uint8), VolumeKind.INSTANCE_MASK)
    labels = {}
    if args.labels:
        with open(args.labels, newline="", encoding="utf-8") as fh:
            for i, row in enumerate(csv.DictReader(fh), start=1):
                labels[i] = (float(row["probability"]), row["label"])
    side = load_sidecar(args.volume)
    rows = []
    for k in (int(v) for v in np.unique(mask.values) if v != 0):
        sel = mask.values == k
        idx = np.argwhere(sel)[:, ::-1].mean(axis=0)  # x, y, z
        center = tuple(float(c) for c in mask.index_to_world(idx))
        diameter = float((6.0 * sel.sum() * mask.voxel_volume / np.pi) ** (1.0 / 3.0))
        lo, hi = bbox_for(center, diameter, mask, k)
        prob, label = labels.get(k, (0.0, "benign"))
        rows.append(Annotation(
            scan_id=args.scan_id, lesion_id=f"L{k - 1:02d}", center_mm=center, diameter_mm=diameter,
            bbox_mm=(lo, hi), probability=prob, label=label, scanner=str(side.get("scanner", "")),
            filter_cutoff=float(side.get("cutoff", 0.0)),
        ))
    out_dir = Path(args.out_dir)
    rows = export_scan(volume, mask, rows, out_dir, scan_id=args.scan_id)
    manifest_path = out_dir / "manifest.csv"
    existing = read_manifest(manifest_path) if manifest_path.exists() else Manifest()
    kept = [r for r in existing.rows if r.scan_id != args.scan_id]
    write_manifest(Manifest(tuple(kept) + tuple(rows), existing.dataset_seed), manifest_path)
    print(f"{len(rows)} annotations written for {args.scan_id}")
    return EXIT_OK


def cmd_qc_dice(args) -> int:
    report = dice(load_volume(args.pred), load_volume(args.truth))
    print(json.dumps(dataclasses.asdict(report)))
    return EXIT_OK


def cmd_pipeline_run(args) -> int:
    if not args.config:
        raise ConfigError("pipeline run needs --config")
    cfg = parse_config(args.config, strict=not args.lenient)
    changes = {}
    if args.seed_given:
        changes["seed"] = args.seed
    if args.output_dir:
        changes["output_dir"] = args.output_dir
    if changes:
        cfg = dataclasses.replace(cfg, **changes)
    result = run_pipeline(cfg, threads=args.threads)
    print(json.dumps({"scans": result.n_scans, "annotations": len(result.manifest.rows),
                      "failed_twins": result.failed_twins, "output_dir": cfg.output_dir}))
    return EXIT_OK if result.ok else EXIT_FAILURE


def _config_defaults_text() -> str:
    lines = ["config keys and defaults:"]
    for f in dataclasses.fields(PipelineConfig):
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if dataclasses.is_dataclass(default):
            default = dataclasses.asdict(default)
        lines.append(f"  {f.name}: {default}")
    return "\n".join(lines)


class _SeedAction(argparse.Action):
    def __call__(self, parser, namespace, values, option_string=None):
        setattr(namespace, self.dest, values)
        namespace.seed_given = True


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, action=_SeedAction,
                        help="64-bit seed for every random stream (default 0)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads (default 1)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="pipeline YAML config")

    p = argparse.ArgumentParser(prog="synlungs", description="Synthetic lung-CT dataset generator.", parents=[common])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    groups = p.add_subparsers(dest="group", required=True)

    def sub(group_parser, name, fn, help_text, **kw):
        sp = group_parser.add_parser(name, help=help_text, parents=[common], **kw)
        sp.set_defaults(func=fn)
        return sp

    phantom = groups.add_parser("phantom", help="procedural chest phantoms").add_subparsers(dest="cmd", required=True)
    sp = sub(phantom, "gen", cmd_phantom_gen, "generate a material-label phantom")
    sp.add_argument("--out", required=True, help="output .mhd path")
    sp.add_argument("--dims", type=int, nargs=3, default=(128, 128, 48), metavar=("NX", "NY", "NZ"))
    sp.add_argument("--spacing", type=float, nargs=3, default=(2.5, 2.5, 2.5), metavar=("SX", "SY", "SZ"))
    sp.add_argument("--mu-out", help="also write the attenuation volume here")

    lesion = groups.add_parser("lesion", help="nodule synthesis and embedding").add_subparsers(dest="cmd", required=True)
    sp = sub(lesion, "synth", cmd_lesion_synth, "synthesize a textured nodule at 0.1 mm")
    sp.add_argument("--out", required=True, help="HU .mhd path; the mask goes to <stem>_mask.mhd")
    sp.add_argument("--diameter", type=float, default=10.0, help="mm (default 10)")
    sp.add_argument("--margin", choices=[m.value for m in Margin], default="Smooth")
    sp.add_argument("--irregularity", type=float, default=0.0, help="0..1 (default 0)")
    sp.add_argument("--lesion-id", default="L00")
    sp = sub(lesion, "embed", cmd_lesion_embed, "place and embed a nodule in a phantom")
    sp.add_argument("--phantom", required=True, help="material-label phantom .mhd")
    sp.add_argument("--lesion", required=True, help="lesion HU .mhd from 'lesion synth'")
    sp.add_argument("--out", required=True, help="output attenuation .mhd")
    sp.add_argument("--mask-out", required=True, help="output ground-truth mask .mhd")
    sp.add_argument("--wall-clearance", type=float, default=2.0, help="mm (default 2)")

    ct = groups.add_parser("ct", help="CT acquisition and reconstruction").add_subparsers(dest="cmd", required=True)
    sp = sub(ct, "simulate", cmd_ct_simulate, "scan and reconstruct a phantom to HU")
    sp.add_argument("--input", required=True, help="material-label or attenuation .mhd")
    sp.add_argument("--out", required=True, help="output HU .mhd")
    sp.add_argument("--scanner", choices=["W12", "W20"], default="W12")
    sp.add_argument("--filter", type=_parse_filter, default=1.0, help="hann:<cutoff> (default hann:1.0)")
    sp.add_argument("--i0", type=float, default=2e5, help="counts per detector element (default 2e5)")
    sp.add_argument("--spr", type=float, default=DEFAULT_SPR, help=f"scatter-to-primary ratio (default {DEFAULT_SPR})")
    sp.add_argument("--views", type=int, help="override the scanner's 1000 views")
    sp.add_argument("--out-spacing", type=float, help="in-plane recon spacing, mm (default: input spacing)")
    sp.add_argument("--noise-free", action="store_true")

    sp = groups.add_parser("label", help="malignancy probabilities and labels", parents=[common])
    sp.set_defaults(func=cmd_label)
    sp.add_argument("--features", required=True, help=f"CSV with columns {','.join(FEATURE_COLUMNS)}")
    sp.add_argument("--model", help="model JSON (default: built-in coefficients)")
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--mode", choices=["det", "bern"], default="det")
    sp.add_argument("--out", help="output CSV (default stdout)")

    sp = groups.add_parser("export", help="add a scan and its mask to a dataset", parents=[common])
    sp.set_defaults(func=cmd_export)
    sp.add_argument("--volume", required=True, help="HU .mhd")
    sp.add_argument("--mask", required=True, help="binary or instance mask .mhd on the same grid")
    sp.add_argument("--scan-id", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--labels", help="CSV from 'label' with one row per mask instance")

    qc = groups.add_parser("qc", help="dataset quality checks").add_subparsers(dest="cmd", required=True)
    sp = sub(qc, "dice", cmd_qc_dice, "Dice overlap of two masks")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True)

    pipe = groups.add_parser("pipeline", help="full dataset generation").add_subparsers(dest="cmd", required=True)
    sp = sub(pipe, "run", cmd_pipeline_run, "run every stage from a config file",
             epilog=_config_defaults_text(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sp.add_argument("--output-dir", help="override the config's output_dir")
    sp.add_argument("--lenient", action="store_true", help="warn on unknown config keys instead of failing")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("seed", 0), ("threads", 1), ("config", None), ("seed_given", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("invalid config: %s", exc)
        return EXIT_CONFIG
    except Exception as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
