import json
from pathlib import Path

import numpy as np
import pytest

from synlungs import pipeline
from synlungs.dataset import manifest_to_csv, read_manifest
from synlungs.pipeline import (
    ConfigError,
    PipelineConfig,
    config_from_dict,
    desk_config,
    expected_scan_count,
    parse_config,
    run_pipeline,
)
from synlungs.volume import VolumeKind, load_volume

SMALL = dict(phantom_dims=(48, 48, 32), phantom_spacing=(6.0, 6.0, 6.0), n_views=180)


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestConfig:
    def test_minimal_file_gets_defaults(self, tmp_path):
        (tmp_path / "c.yaml").write_text("seed: 7\noutput_dir: out\n")
        cfg = parse_config(tmp_path / "c.yaml")
        assert cfg.seed == 7 and cfg.output_dir == "out"
        defaults = PipelineConfig()
        for key in ("n_twins", "lesions_per_twin", "scanners", "filter_cutoffs", "i0", "spr", "threshold", "gamma", "clb"):
            assert getattr(cfg, key) == getattr(defaults, key)

    def test_negative_cutoff(self, tmp_path):
        (tmp_path / "c.yaml").write_text("filter_cutoffs: [-1]\n")
        with pytest.raises(ConfigError):
            parse_config(tmp_path / "c.yaml")

    def test_unknown_key_named(self, tmp_path):
        (tmp_path / "c.yaml").write_text("seed: 1\nnum_twins: 4\n")
        with pytest.raises(ConfigError, match="num_twins"):
            parse_config(tmp_path / "c.yaml")
        assert parse_config(tmp_path / "c.yaml", strict=False).seed == 1

    def test_nested_and_aliases(self):
        cfg = config_from_dict({
            "scanner": ["W20", "W12"], "filter_cutoffs": [0.5, 1.2], "gamma": {"a": 3.0},
            "lesions_per_twin": [0, 4], "mode": "bern",
        })
        assert cfg.scanners == ("W20", "W12")
        assert cfg.gamma.a == 3.0 and cfg.label_mode == "Bernoulli"
        with pytest.raises(ConfigError, match="gamma"):
            config_from_dict({"gamma": {"shape": 3.0}})

    @pytest.mark.parametrize("raw", [
        {"n_twins": 0},
        {"lesions_per_twin": [3, 1]},
        {"scanners": []},
        {"scanners": ["W16"]},
        {"filter_cutoffs": []},
        {"filter_cutoffs": [0.7]},
        {"i0": 0},
        {"spr": -0.1},
        {"threshold": 2.0},
        {"phantom_dims": [16, 64, 64]},
    ])
    def test_invalid(self, raw):
        with pytest.raises(ConfigError):
            config_from_dict(raw)

    def test_not_a_mapping(self, tmp_path):
        (tmp_path / "c.yaml").write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError):
            parse_config(tmp_path / "c.yaml")


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg_a = desk_config(root / "a", n_twins=2, scanners=("W12", "W20"), **SMALL)
    cfg_b = desk_config(root / "b", n_twins=2, scanners=("W12", "W20"), **SMALL)
    return (cfg_a, run_pipeline(cfg_a)), (cfg_b, run_pipeline(cfg_b, threads=2))


class TestRun:
    def test_scan_count(self, two_runs):
        (cfg, result), _ = two_runs
        assert result.ok
        assert result.n_scans == 4 == expected_scan_count(cfg)
        assert len(result.manifest.scan_ids) == 4
        assert {sid.split("_")[1] for sid in result.manifest.scan_ids} == {"W12", "W20"}

    def test_byte_identical(self, two_runs):
        (cfg_a, _), (cfg_b, _) = two_runs
        a, b = tree_bytes(Path(cfg_a.output_dir)), tree_bytes(Path(cfg_b.output_dir))
        assert a.keys() == b.keys()
        for name in a:
            assert a[name] == b[name], name

    def test_rows_match_masks(self, two_runs):
        (cfg, result), _ = two_runs
        out = Path(cfg.output_dir)
        manifest = read_manifest(out / "manifest.csv")
        assert manifest_to_csv(manifest) == manifest_to_csv(result.manifest)
        for sid in manifest.scan_ids:
            rows = [r for r in manifest.rows if r.scan_id == sid]
            mask = load_volume(out / rows[0].mask_path)
            vol = load_volume(out / "volumes" / f"{sid}.mhd")
            assert mask.kind == VolumeKind.INSTANCE_MASK and vol.kind == VolumeKind.HU
            assert mask.same_grid(vol)
            assert len(np.unique(mask.values)) - 1 == len(rows)
            for r in rows:
                assert r.scanner == sid.split("_")[1]

    def test_dataset_json(self, two_runs):
        (cfg, result), _ = two_runs
        doc = json.loads((Path(cfg.output_dir) / "dataset.json").read_text())
        assert doc["dataset_seed"] == cfg.seed
        assert set(doc["scanners"]) == {"W12", "W20"}
        assert doc["n_scans"] == 4 and doc["failed_twins"] == []

    def test_seed_changes_output(self, two_runs, tmp_path):
        (cfg, result), _ = two_runs
        other = run_pipeline(desk_config(tmp_path, seed=1, n_twins=1, **SMALL))
        first = [r for r in result.manifest.rows if r.scan_id.startswith("twin0000_W12")]
        assert [r.center_mm for r in other.manifest.rows] != [r.center_mm for r in first]

    def test_failure_isolation(self, tmp_path, monkeypatch):
        real = pipeline.run_twin

        def flaky(cfg, index, model, out_dir):
            if index == 1:
                raise RuntimeError("injected")
            return real(cfg, index, model, out_dir)

        monkeypatch.setattr(pipeline, "run_twin", flaky)
        cfg = desk_config(tmp_path, n_twins=2, lesions_per_twin=(1, 1), **SMALL)
        result = run_pipeline(cfg)
        assert not result.ok and result.failed_twins == [1]
        assert result.n_scans == expected_scan_count(cfg, n_successful=1) == 1
        assert all(r.scan_id.startswith("twin0000") for r in result.manifest.rows)
        assert (tmp_path / "manifest.csv").exists()
