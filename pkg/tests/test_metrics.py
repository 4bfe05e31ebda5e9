import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays

from synlungs.metrics import auc, dice
from synlungs.volume import VolumeKind, VoxelVolume


def binary(values, spacing=(1.0, 1.0, 1.0)):
    return VoxelVolume(np.asarray(values, dtype=np.uint8), spacing, kind=VolumeKind.BINARY)


class TestDice:
    def test_identical(self):
        a = np.zeros((4, 4, 4), np.uint8)
        a[1:3, 1:3, 1:3] = 1
        assert dice(binary(a), binary(a)).dice == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4, 4), np.uint8)
        b = a.copy()
        a[0] = 1
        b[3] = 1
        assert dice(binary(a), binary(b)).dice == 0.0

    def test_half_overlap(self):
        a = np.zeros((2, 2, 2), np.uint8)
        a[0] = 1
        b = np.zeros_like(a)
        b[0, 0] = 1
        report = dice(binary(a), binary(b))
        assert report.dice == pytest.approx(2 / 3)
        assert (report.intersection_voxels, report.a_voxels, report.b_voxels) == (2, 4, 2)

    def test_empty_pair(self):
        e = binary(np.zeros((3, 3, 3)))
        assert dice(e, e).dice == 1.0

    def test_instance_labels_count_as_foreground(self):
        a = np.zeros((3, 3, 3), np.uint8)
        a[0, 0, 0], a[2, 2, 2] = 1, 2
        inst = VoxelVolume(a, (1, 1, 1), kind=VolumeKind.INSTANCE_MASK)
        assert dice(inst, binary(a > 0)).dice == 1.0

    def test_grid_mismatch(self):
        with pytest.raises(ValueError):
            dice(binary(np.ones((2, 2, 2))), binary(np.ones((2, 2, 2)), spacing=(2, 1, 1)))
        with pytest.raises(ValueError):
            dice(np.ones((2, 2, 2)), np.ones((2, 2, 3)))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.bool_, (3, 4, 5)), arrays(np.bool_, (3, 4, 5)))
    def test_symmetric_and_bounded(self, a, b):
        ab, ba = dice(a, b).dice, dice(b, a).dice
        assert ab == ba
        assert 0.0 <= ab <= 1.0
        assert dice(a, a).dice == 1.0


class TestAuc:
    def test_separated(self):
        assert auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_all_ties(self):
        assert auc([0.4] * 6, [1, 0, 1, 0, 1, 0]) == 0.5

    def test_three_of_four_pairs(self):
        assert auc([(0.9, 1), (0.8, 1), (0.85, 0), (0.1, 0)]) == 0.75

    def test_brute_force_pairs(self, rng):
        scores = np.round(rng.random(60), 1)  # rounding forces ties
        truth = rng.random(60) < 0.4
        pos, neg = scores[truth], scores[~truth]
        diff = pos[:, None] - neg[None, :]
        expected = (np.count_nonzero(diff > 0) + 0.5 * np.count_nonzero(diff == 0)) / diff.size
        assert auc(scores, truth) == pytest.approx(expected, abs=1e-12)

    def test_monotone_transform_invariance(self, rng):
        scores = rng.normal(size=200)
        truth = rng.random(200) < 0.5
        base = auc(scores, truth)
        assert auc(np.exp(scores), truth) == base
        assert auc(3 * scores + 7, truth) == base

    def test_single_class(self):
        with pytest.raises(ValueError):
            auc([0.1, 0.2], [1, 1])
        with pytest.raises(ValueError):
            auc([])
