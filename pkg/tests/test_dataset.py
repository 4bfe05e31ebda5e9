import pathlib
import tempfile

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from synlungs.dataset import (
    MANIFEST_COLUMNS,
    Annotation,
    Manifest,
    ManifestError,
    bbox_for,
    export_scan,
    extract_patch,
    manifest_to_csv,
    read_manifest,
    resample_volume,
    write_manifest,
)
from synlungs.volume import VolumeKind, VoxelVolume, load_volume


def hu_volume(values, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    return VoxelVolume(np.asarray(values, dtype=np.float32), spacing, origin, VolumeKind.HU)


def ann(scan="s0", lesion="l0", center=(0.0, 0.0, 0.0), d=5.0, **kw):
    c = np.asarray(center, dtype=float)
    return Annotation(scan, lesion, tuple(c), d, (tuple(c - d / 2), tuple(c + d / 2)), **kw)


@pytest.fixture
def two_lesion_scan():
    vol = hu_volume(np.full((16, 16, 16), -800.0))
    mask = np.zeros((16, 16, 16), np.uint8)
    mask[3:6, 3:6, 3:6] = 1
    mask[10:14, 10:14, 10:14] = 2
    mvol = VoxelVolume(mask, vol.spacing, vol.origin, VolumeKind.INSTANCE_MASK)
    rows = [
        ann("scanA", "L01", bbox_center(mvol, 1), 3.0, label="benign", probability=0.2),
        ann("scanA", "L02", bbox_center(mvol, 2), 4.0, label="malignant", probability=0.8),
    ]
    return vol, mvol, rows


def bbox_center(mask, k):
    idx = np.argwhere(mask.values == k).mean(axis=0)[::-1]
    return tuple(mask.index_to_world(idx))


class TestAnnotation:
    def test_invariants(self):
        with pytest.raises(ValueError):
            ann(d=0.0)
        with pytest.raises(ValueError):
            Annotation("s", "l", (0, 0, 0), 4.0, ((1, 1, 1), (5, 5, 5)))
        with pytest.raises(ValueError):
            Annotation("s", "l", (0, 0, 0), 4.0, ((-1, -1, -1), (1, 1, 1)))
        with pytest.raises(ValueError):
            ann(label="unknown")

    def test_bbox_for_covers_mask(self, two_lesion_scan):
        _, mask, _ = two_lesion_scan
        lo, hi = bbox_for((11.5, 11.5, 11.5), 1.0, mask, 2)
        assert lo == (9.5, 9.5, 9.5) and hi == (13.5, 13.5, 13.5)
        Annotation("s", "l", (11.5,) * 3, 1.0, (lo, hi))


class TestExport:
    def test_two_lesions(self, two_lesion_scan, tmp_path):
        vol, mask, rows = two_lesion_scan
        out = export_scan(vol, mask, rows, tmp_path)
        assert len(out) == 2
        # one header/raw pair (plus its JSON sidecar) per volume
        for sub in ("volumes", "masks"):
            assert sorted(p.name for p in (tmp_path / sub).iterdir()) == ["scanA.json", "scanA.mhd", "scanA.raw"]
        back = load_volume(tmp_path / out[0].mask_path)
        _, n = ndimage.label(back.values > 0)
        assert n == 2
        assert set(np.unique(back.values)) == {0, 1, 2}
        assert all(r.mask_path == "masks/scanA.mhd" for r in out)

    def test_reexport_identical(self, two_lesion_scan, tmp_path):
        vol, mask, rows = two_lesion_scan
        export_scan(vol, mask, rows, tmp_path / "a")
        export_scan(vol, mask, rows, tmp_path / "b")
        for sub in ("volumes/scanA.mhd", "volumes/scanA.raw", "masks/scanA.mhd", "masks/scanA.raw"):
            assert (tmp_path / "a" / sub).read_bytes() == (tmp_path / "b" / sub).read_bytes()

    def test_grid_mismatch(self, two_lesion_scan, tmp_path):
        vol, mask, rows = two_lesion_scan
        small = VoxelVolume(mask.values[:8], mask.spacing, mask.origin, mask.kind)
        with pytest.raises(ValueError):
            export_scan(vol, small, rows, tmp_path)

    def test_closure(self, two_lesion_scan, tmp_path):
        vol, mask, rows = two_lesion_scan
        m = Manifest(tuple(export_scan(vol, mask, rows, tmp_path)))
        write_manifest(m, tmp_path / "manifest.csv")
        for row in read_manifest(tmp_path / "manifest.csv").rows:
            assert load_volume(tmp_path / row.mask_path).dims == vol.dims


finite = st.floats(-400, 400, allow_nan=False, allow_infinity=False)
text_id = st.text("abcdefXYZ0123456789_-", min_size=1, max_size=12)


@st.composite
def annotations(draw):
    c = np.array([draw(finite) for _ in range(3)])
    d = draw(st.floats(0.5, 40.0))
    pad = np.array([draw(st.floats(0.0, 5.0)) for _ in range(6)])
    return Annotation(
        draw(text_id), draw(text_id), tuple(c), d,
        (tuple(c - d / 2 - pad[:3]), tuple(c + d / 2 + pad[3:])),
        mask_path="masks/x.mhd",
        probability=draw(st.floats(0.0, 1.0)),
        label=draw(st.sampled_from(["benign", "malignant"])),
        scanner=draw(st.sampled_from(["W12", "W20"])),
        filter_cutoff=draw(st.sampled_from([0.5, 0.6, 1.2])),
    )


class TestManifest:
    @settings(max_examples=60, deadline=None)
    @given(st.lists(annotations(), max_size=8, unique_by=lambda a: a.key))
    def test_round_trip(self, rows):
        m = Manifest(tuple(rows))
        text = manifest_to_csv(m)
        with tempfile.TemporaryDirectory() as d:
            p = pathlib.Path(d, "m.csv")
            p.write_text(text)
            back = read_manifest(p)
        assert manifest_to_csv(back) == text
        assert [a.key for a in back.rows] == [a.key for a in m.rows]
        for a, b in zip(m.rows, back.rows):
            np.testing.assert_allclose(a.center_mm, b.center_mm, rtol=1e-5, atol=1e-4)
            np.testing.assert_allclose(a.diameter_mm, b.diameter_mm, rtol=1e-5)
            assert (a.label, a.scanner, a.mask_path) == (b.label, b.scanner, b.mask_path)

    def test_rows_sorted(self):
        m = Manifest((ann("b", "2"), ann("a", "9"), ann("b", "1")))
        assert [a.key for a in m.rows] == [("a", "9"), ("b", "1"), ("b", "2")]

    def test_duplicate_in_memory(self):
        with pytest.raises(ManifestError):
            Manifest((ann(), ann()))

    def test_duplicate_on_read(self, tmp_path):
        text = manifest_to_csv(Manifest((ann(),)))
        row = text.splitlines()[1]
        (tmp_path / "m.csv").write_text(text + row + "\n")
        with pytest.raises(ManifestError):
            read_manifest(tmp_path / "m.csv")

    def test_empty_is_header_only(self, tmp_path):
        write_manifest(Manifest(), tmp_path / "m.csv")
        assert (tmp_path / "m.csv").read_text() == ",".join(MANIFEST_COLUMNS) + "\n"
        assert read_manifest(tmp_path / "m.csv").rows == ()

    @pytest.mark.parametrize("text", [
        "",
        "scan_id,lesion_id\n",
        ",".join(MANIFEST_COLUMNS) + "\ns,l,1,2\n",
        ",".join(MANIFEST_COLUMNS) + "\ns,l,a,0,0,5,-2.5,-2.5,-2.5,2.5,2.5,2.5,m,0,benign,W12,0.6\n",
        ",".join(MANIFEST_COLUMNS) + "\ns,l,0,0,0,5,-2.5,-2.5,-2.5,2.5,2.5,2.5,m,0,unsure,W12,0.6\n",
    ])
    def test_malformed(self, tmp_path, text):
        (tmp_path / "m.csv").write_text(text)
        with pytest.raises(ManifestError):
            read_manifest(tmp_path / "m.csv")


class TestResample:
    def test_identity(self, rng):
        v = hu_volume(rng.normal(size=(5, 6, 7)), spacing=(0.7, 0.7, 1.25), origin=(1, 2, 3))
        out = resample_volume(v, (0.7, 0.7, 1.25))
        assert out.same_grid(v)
        np.testing.assert_array_equal(out.values, v.values)

    def test_constant(self):
        v = hu_volume(np.full((6, 7, 8), 42.0), spacing=(1.0, 0.9, 2.0))
        out = resample_volume(v, (0.7, 0.7, 1.25))
        np.testing.assert_allclose(out.values, 42.0, rtol=1e-6)

    def test_dims_cover_extent(self):
        v = hu_volume(np.zeros((10, 10, 10)), spacing=(1.0, 1.0, 1.0))
        out = resample_volume(v, (0.7, 0.7, 1.25))
        assert out.dims == (15, 15, 8)
        assert out.origin == v.origin

    def test_linear_ramp_exact(self):
        nz, ny, nx = 4, 5, 20
        x = np.arange(nx) * 1.0
        v = hu_volume(np.broadcast_to(3.0 * x - 50.0, (nz, ny, nx)), spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0))
        out = resample_volume(v, (0.7, 0.7, 1.25))
        xw = out.origin[0] + np.arange(out.dims[0]) * 0.7
        np.testing.assert_allclose(out.values[0, 0], 3.0 * xw - 50.0, rtol=1e-5, atol=1e-3)
        np.testing.assert_allclose(out.values, np.broadcast_to(out.values[:1, :1], out.values.shape), atol=1e-3)

    def test_sphere_diameter_change_below_one_voxel(self):
        # 12 mm sphere: at least 6 target voxels across along every axis
        sp, n, d = 0.5, 40, 12.0
        idx = (np.indices((n, n, n)) - (n - 1) / 2) * sp
        mask = (np.sqrt((idx**2).sum(axis=0)) <= d / 2).astype(np.float32)
        v = VoxelVolume(mask, (sp,) * 3, kind=VolumeKind.BINARY)
        out = resample_volume(v, (0.7, 0.7, 1.25))

        def eq_diam(values, spacing):
            vol = np.count_nonzero(values >= 0.5) * np.prod(spacing)
            return (6 * vol / np.pi) ** (1 / 3)

        assert abs(eq_diam(out.values, out.spacing) - eq_diam(mask, v.spacing)) < 0.7

    def test_bad_spacing(self):
        with pytest.raises(ValueError):
            resample_volume(hu_volume(np.zeros((2, 2, 2))), (0.0, 1.0, 1.0))


class TestExtractPatch:
    def test_constant_inside(self):
        v = hu_volume(np.zeros((80, 80, 80)))
        p = extract_patch(v, (40.0, 40.0, 40.0), standardize=False)
        assert p.dims == (64, 64, 64)
        assert not p.values.any()

    def test_clip(self):
        v = hu_volume(np.full((10, 10, 10), 700.0))
        p = extract_patch(v, (5.0, 5.0, 5.0), patch_dims=(4, 4, 4), standardize=False)
        assert (p.values == 500.0).all()

    def test_outside_padding(self):
        v = hu_volume(np.full((10, 10, 10), 100.0))
        p = extract_patch(v, (500.0, 0.0, 0.0), standardize=False)
        assert (p.values == -1000.0).all()

    def test_standardize(self, rng):
        v = hu_volume(rng.normal(-300, 200, size=(20, 20, 20)))
        p = extract_patch(v, (10.0, 10.0, 10.0), patch_dims=(8, 8, 8))
        assert abs(float(p.values.mean())) < 1e-5
        assert float(p.values.std()) == pytest.approx(1.0, abs=1e-5)

    def test_standardize_constant_uses_floor(self):
        v = hu_volume(np.zeros((10, 10, 10)))
        p = extract_patch(v, (5.0, 5.0, 5.0), patch_dims=(4, 4, 4))
        assert np.isfinite(p.values).all() and not p.values.any()

    def test_patch_geometry(self):
        v = hu_volume(np.arange(1000, dtype=float).reshape(10, 10, 10) - 500, origin=(-5, -5, -5))
        p = extract_patch(v, (0.0, 0.0, 0.0), patch_dims=(3, 3, 3), clip=None, standardize=False)
        # center voxel of the patch is the voxel nearest the requested point
        k = np.rint(v.world_to_index((0.0, 0.0, 0.0))).astype(int)
        assert p.values[1, 1, 1] == v.values[k[2], k[1], k[0]]
        np.testing.assert_allclose(p.index_to_world((1, 1, 1)), v.index_to_world(k))

    @settings(max_examples=40, deadline=None)
    @given(
        st.tuples(*[st.floats(-60, 60) for _ in range(3)]),
        st.tuples(*[st.integers(1, 17) for _ in range(3)]),
    )
    def test_dims_always_match(self, center, dims):
        v = hu_volume(np.zeros((9, 11, 13)), origin=(-6, -5, -4))
        assert extract_patch(v, center, patch_dims=dims).dims == dims
