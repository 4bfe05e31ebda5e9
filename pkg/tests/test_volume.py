import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from synlungs.phantom import generate_chest_phantom, lung_mask, materialize_attenuation
from synlungs.volume import (
    AIR,
    BONE,
    LUNG,
    SOFT_TISSUE,
    WATER,
    Material,
    MaterialTable,
    PhantomMetadata,
    VolumeFormatError,
    VolumeKind,
    VoxelVolume,
    load_sidecar,
    load_volume,
    save_volume,
)


def write_mhd(path, dims, etype="MET_FLOAT", data_file=None, extra=""):
    data_file = data_file or path.with_suffix(".raw").name
    path.write_text(
        f"NDims = 3\nDimSize = {' '.join(map(str, dims))}\nElementSpacing = 1 1 1\nOffset = 0 0 0\n"
        f"ElementType = {etype}\nElementDataFile = {data_file}\n{extra}"
    )


class TestVoxelVolume:
    def test_invariants(self):
        with pytest.raises(ValueError):
            VoxelVolume(np.zeros((2, 2, 2)), (1, 0, 1))
        with pytest.raises(ValueError):
            VoxelVolume(-np.ones((2, 2, 2)), (1, 1, 1), kind=VolumeKind.ATTENUATION)
        with pytest.raises(ValueError):
            VoxelVolume(np.full((1, 1, 1), 0.5), (1, 1, 1), kind=VolumeKind.MATERIAL_LABEL)

    def test_dims_are_xyz(self):
        v = VoxelVolume(np.zeros((4, 3, 2)), (1, 1, 1))
        assert v.dims == (2, 3, 4)

    def test_world_index_round_trip(self):
        v = VoxelVolume(np.zeros((4, 3, 2)), (0.5, 1.0, 2.0), (10.0, -3.0, 1.0))
        idx = np.array([1, 2, 3])
        np.testing.assert_allclose(v.world_to_index(v.index_to_world(idx)), idx)
        np.testing.assert_allclose(v.index_to_world((0, 0, 0)), v.origin)


class TestLoadVolume:
    def test_decodes_x_fastest(self, tmp_path):
        path = tmp_path / "v.mhd"
        write_mhd(path, (2, 2, 2))
        np.arange(8, dtype="<f4").tofile(tmp_path / "v.raw")
        v = load_volume(path)
        assert v.dims == (2, 2, 2)
        assert v.values.size == 8
        # x varies fastest: flat index 1 is (x=1, y=0, z=0)
        assert v.values[0, 0, 1] == 1.0
        assert v.values[0, 1, 0] == 2.0
        assert v.values[1, 0, 0] == 4.0

    def test_size_mismatch(self, tmp_path):
        path = tmp_path / "v.mhd"
        write_mhd(path, (2, 2, 2))
        np.arange(7, dtype="<f4").tofile(tmp_path / "v.raw")
        with pytest.raises(VolumeFormatError, match="8 voxels"):
            load_volume(path)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "v.mhd"
        path.write_text("NDims 3\n")
        with pytest.raises(VolumeFormatError):
            load_volume(path)
        write_mhd(path, ("a", 2, 2))
        with pytest.raises(VolumeFormatError):
            load_volume(path)

    def test_unsupported_element_type(self, tmp_path):
        path = tmp_path / "v.mhd"
        write_mhd(path, (2, 2, 2), etype="MET_LONG")
        np.zeros(8, dtype="<i8").tofile(tmp_path / "v.raw")
        with pytest.raises(VolumeFormatError, match="ElementType"):
            load_volume(path)

    def test_big_endian_rejected(self, tmp_path):
        path = tmp_path / "v.mhd"
        write_mhd(path, (2, 2, 2), extra="ByteOrderMSB = True\n")
        np.zeros(8, dtype="<f4").tofile(tmp_path / "v.raw")
        with pytest.raises(VolumeFormatError):
            load_volume(path)


class TestSaveVolume:
    @pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.float32, np.float64])
    def test_round_trip_bit_exact(self, tmp_path, dtype, rng):
        values = (rng.normal(size=(3, 4, 5)) * 100).astype(dtype)
        if np.dtype(dtype).kind == "u":
            values = rng.integers(0, 5, size=(3, 4, 5)).astype(dtype)
            kind = VolumeKind.MATERIAL_LABEL
        else:
            kind = VolumeKind.HU
        v = VoxelVolume(values, (0.7, 0.7, 1.25), (-1.5, 2.25, 100.0), kind)
        save_volume(v, tmp_path / "v.mhd")
        w = load_volume(tmp_path / "v.mhd")
        assert w == v
        assert w.values.dtype == values.dtype
        assert w.values.tobytes() == values.tobytes()

    def test_single_voxel(self, tmp_path):
        v = VoxelVolume(np.array([[[3.5]]], dtype=np.float32), (1, 1, 1))
        save_volume(v, tmp_path / "one.mhd")
        assert (tmp_path / "one.raw").stat().st_size == 4
        assert load_volume(tmp_path / "one.mhd") == v

    def test_kind_in_sidecar(self, tmp_path):
        v = VoxelVolume(np.zeros((2, 2, 2), dtype=np.float32), (1, 1, 1), kind=VolumeKind.HU)
        save_volume(v, tmp_path / "hu.mhd", extra={"note": "x"})
        side = json.loads((tmp_path / "hu.json").read_text())
        assert side["kind"] == "HU"
        assert load_sidecar(tmp_path / "hu.mhd")["note"] == "x"
        assert load_volume(tmp_path / "hu.mhd").kind == VolumeKind.HU

    def test_unwritable_path(self, tmp_path):
        v = VoxelVolume(np.zeros((2, 2, 2), dtype=np.float32), (1, 1, 1))
        with pytest.raises(OSError):
            save_volume(v, tmp_path / "missing" / "v.mhd")

    @settings(max_examples=30, deadline=None)
    @given(
        values=hnp.arrays(
            dtype=st.sampled_from([np.float32, np.float64, np.int16]),
            shape=hnp.array_shapes(min_dims=3, max_dims=3, min_side=1, max_side=5),
        ),
    )
    def test_round_trip_property(self, tmp_path_factory, values):
        path = tmp_path_factory.mktemp("prop") / "v.mhd"
        v = VoxelVolume(values, (1.0, 2.0, 3.0), (0.5, -0.5, 0.0), VolumeKind.HU)
        save_volume(v, path)
        assert load_volume(path).values.tobytes() == values.tobytes()


class TestMaterialTable:
    def test_default_has_required_materials(self):
        t = MaterialTable.default()
        for name in ("air", "lung", "soft_tissue", "bone", "water"):
            t.by_name(name)
        assert [t.by_name(n).label for n in ("air", "lung", "soft_tissue", "bone", "water")] == [
            AIR, LUNG, SOFT_TISSUE, BONE, WATER]

    def test_water_mu_at_60_kev(self):
        # NIST water mu/rho at 60 keV is 0.2059 cm^2/g
        assert MaterialTable.default().mu_water == pytest.approx(0.02059, rel=1e-3)

    def test_ordering(self):
        t = MaterialTable.default()
        mu = [t.by_name(n).mu for n in ("air", "lung", "water", "soft_tissue", "bone")]
        assert mu == sorted(mu)
        assert mu[0] == 0.0

    def test_missing_required_material(self):
        t = MaterialTable.default()
        with pytest.raises(ValueError):
            MaterialTable(tuple(m for m in t.entries if m.name != "bone"))

    def test_duplicate_labels(self):
        t = MaterialTable.default()
        with pytest.raises(ValueError):
            MaterialTable(t.entries + (Material(0, "extra", 0.1, 0.0),))

    def test_dict_round_trip(self):
        t = MaterialTable.default(kev=70)
        assert MaterialTable.from_dict(t.to_dict()) == t


@pytest.fixture(scope="module")
def phantom():
    return generate_chest_phantom(42, (64, 64, 40), (5.0, 5.0, 5.0))


class TestPhantom:
    def test_deterministic(self, phantom):
        again = generate_chest_phantom(42, (64, 64, 40), (5.0, 5.0, 5.0))
        assert again[0] == phantom[0]
        assert again[2] == phantom[2]
        assert generate_chest_phantom(43, (64, 64, 40), (5.0, 5.0, 5.0))[0] != phantom[0]

    def test_structures(self, phantom):
        labels, table, meta = phantom
        v = labels.values
        n_lung = np.count_nonzero(v == LUNG)
        assert 0 < n_lung < v.size
        assert v[0, 0, 0] == AIR
        assert np.count_nonzero(v == BONE) > 0
        assert np.count_nonzero(v == SOFT_TISSUE) > 0
        assert set(np.unique(v)) <= set(table.labels)

    def test_two_lung_components(self, phantom):
        from scipy import ndimage

        labels, _, meta = phantom
        _, n = ndimage.label(lung_mask(labels, meta).values)
        assert n == 2

    def test_vessels_inside_lungs(self):
        # vessels only ever replace lung voxels, so the lungs lose voxels to them
        labels, _, _ = generate_chest_phantom(7, (96, 96, 48), (3.0, 3.0, 3.0))
        v = labels.values
        assert np.count_nonzero(v == LUNG) > 0
        soft_in_lung_box = v[:, :, : v.shape[2] // 2]
        assert np.count_nonzero(soft_in_lung_box == SOFT_TISSUE) > 0

    def test_metadata_ranges(self):
        for seed in range(20):
            _, _, meta = generate_chest_phantom(seed, (32, 32, 32), (10.0, 10.0, 10.0))
            assert 25 <= meta.age <= 90
            assert 16 <= meta.bmi <= 45
            assert meta.sex in ("M", "F")

    def test_too_small(self):
        with pytest.raises(ValueError):
            generate_chest_phantom(0, (31, 64, 64), (1, 1, 1))


class TestMaterialize:
    def test_all_air_is_zero(self):
        labels = VoxelVolume(np.zeros((3, 3, 3), dtype=np.uint8), (1, 1, 1), kind=VolumeKind.MATERIAL_LABEL)
        mu = materialize_attenuation(labels, MaterialTable.default())
        assert mu.kind == VolumeKind.ATTENUATION
        assert not mu.values.any()

    def test_single_water_voxel(self):
        labels = VoxelVolume(np.full((1, 1, 1), WATER, dtype=np.uint8), (1, 1, 1), kind=VolumeKind.MATERIAL_LABEL)
        mu = materialize_attenuation(labels, MaterialTable.default())
        assert mu.values[0, 0, 0] == pytest.approx(0.0206, abs=1e-4)

    def test_unknown_label(self):
        labels = VoxelVolume(np.full((1, 1, 1), 99, dtype=np.uint8), (1, 1, 1), kind=VolumeKind.MATERIAL_LABEL)
        with pytest.raises(KeyError):
            materialize_attenuation(labels, MaterialTable.default())

    def test_preserves_grid_and_is_monotone(self):
        labels, table, _ = generate_chest_phantom(3, (48, 48, 32), (6.0, 6.0, 6.0))
        mu = materialize_attenuation(labels, table)
        assert mu.same_grid(labels)
        order = sorted(table.labels, key=lambda lab: table.by_label(lab).mu)
        present = [lab for lab in order if (labels.values == lab).any()]
        for a, b in zip(present, present[1:]):
            assert mu.values[labels.values == a].max() <= mu.values[labels.values == b].min()


class TestLungMask:
    def test_equals_lung_label(self):
        labels, _, meta = generate_chest_phantom(5, (48, 48, 32), (6.0, 6.0, 6.0))
        mask = lung_mask(labels, meta)
        np.testing.assert_array_equal(mask.values.astype(bool), labels.values == LUNG)

    def test_empty_label_set(self):
        labels, _, meta = generate_chest_phantom(5, (32, 32, 32), (8.0, 8.0, 8.0))
        empty = PhantomMetadata(meta.twin_id, meta.age, meta.sex, meta.bmi, frozenset())
        assert not lung_mask(labels, empty).values.any()

    def test_idempotent(self):
        labels, _, meta = generate_chest_phantom(5, (32, 32, 32), (8.0, 8.0, 8.0))
        once = lung_mask(labels, meta)
        as_labels = once.with_values(once.values, VolumeKind.MATERIAL_LABEL)
        twice = lung_mask(as_labels, meta)
        np.testing.assert_array_equal(once.values, twice.values)

    def test_relabeling_invariance(self):
        labels, _, meta = generate_chest_phantom(5, (32, 32, 32), (8.0, 8.0, 8.0))
        # swap bone and soft tissue: neither is lung, so the count is unchanged
        v = labels.values.copy()
        v[labels.values == BONE] = SOFT_TISSUE
        v[labels.values == SOFT_TISSUE] = BONE
        swapped = labels.with_values(v)
        assert lung_mask(swapped, meta).values.sum() == lung_mask(labels, meta).values.sum()
