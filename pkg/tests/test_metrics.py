import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skadapter.acceptance import brute_force_chamfer
from skadapter.data import make_samples, rasterize_capsules
from skadapter.errors import EmptyOccupancy, EmptySet, ResolutionMismatch
from skadapter.metrics import (
    chamfer,
    is_simple,
    occupancy_iou,
    rerigging_score,
    sample_bone_points,
    thin,
)
from skadapter.skeleton import validate_skeleton

points = st.lists(st.tuples(*[st.floats(-1, 1, allow_nan=False)] * 3), min_size=1, max_size=6)


def components26(occ):
    """Connected components by explicit flood fill over the 26 neighbours."""
    occ = np.asarray(occ, bool)
    seen = np.zeros_like(occ)
    offsets = [o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0)]
    count = 0
    for start in map(tuple, np.argwhere(occ)):
        if seen[start]:
            continue
        count += 1
        stack = [start]
        seen[start] = True
        while stack:
            p = stack.pop()
            for o in offsets:
                q = tuple(a + b for a, b in zip(p, o))
                if all(0 <= c < occ.shape[0] for c in q) and occ[q] and not seen[q]:
                    seen[q] = True
                    stack.append(q)
    return count


class TestChamfer:
    @settings(max_examples=100, deadline=None)
    @given(points, points)
    def test_brute_force(self, a, b):
        a, b = np.array(a), np.array(b)
        assert chamfer(a, b) == brute_force_chamfer(a, b)

    def test_identity_and_symmetry(self):
        a = np.random.default_rng(0).random((7, 3))
        b = np.random.default_rng(1).random((4, 3))
        assert chamfer(a, a) == 0.0
        assert chamfer(a, b) == pytest.approx(chamfer(b, a))

    def test_known_value(self):
        assert chamfer([[0, 0, 0]], [[3, 4, 0]]) == 10.0

    def test_empty(self):
        with pytest.raises(EmptySet):
            chamfer(np.zeros((0, 3)), [[0, 0, 0]])


class TestIoU:
    def test_values(self):
        a = np.zeros((4, 4, 4), bool)
        b = np.zeros((4, 4, 4), bool)
        a[0, 0, :2] = True
        b[0, 0, 1:3] = True
        assert occupancy_iou(a, b) == pytest.approx(1 / 3)
        assert occupancy_iou(a, a) == 1.0
        assert occupancy_iou(np.zeros_like(a), np.zeros_like(a)) == 1.0

    def test_resolution_mismatch(self):
        with pytest.raises(ResolutionMismatch):
            occupancy_iou(np.zeros((4, 4, 4)), np.zeros((8, 8, 8)))


class TestBonePoints:
    def test_spacing_bound(self):
        skel = validate_skeleton([[0, 0, 0], [0.3, 0, 0], [0.3, 0.05, 0]], [-1, 0, 1])
        pts = sample_bone_points(skel, 0.07)
        xs = np.sort(pts[np.isclose(pts[:, 1], 0) & np.isclose(pts[:, 2], 0), 0])
        assert np.all(np.diff(xs) <= 0.07 + 1e-12)
        assert len(pts) == 3 + (5 - 1) + 0


class TestSimplePoints:
    def test_isolated_and_interior_are_not_simple(self):
        assert not is_simple(1 << 13)
        assert not is_simple((1 << 27) - 1)

    def test_line_end_is_simple_middle_is_not(self):
        end = (1 << 13) | (1 << 14)
        middle = (1 << 12) | (1 << 13) | (1 << 14)
        assert is_simple(end)
        assert not is_simple(middle)

    def test_face_bridge_is_not_simple(self):
        # two opposite face neighbours joined only through the centre
        assert not is_simple((1 << 4) | (1 << 13) | (1 << 22))

    def test_corner_of_a_cube_is_simple(self):
        block = sum(1 << k for k in range(27) if all(c >= 1 for c in (k // 9, k // 3 % 3, k % 3)))
        assert is_simple(block)


class TestThinning:
    @pytest.mark.parametrize("width", [1, 2, 3])
    def test_bar_thins_to_a_line(self, width):
        occ = np.zeros((16, 16, 16), bool)
        occ[2:14, 6 : 6 + width, 6 : 6 + width] = True
        out = thin(occ)
        assert np.all(out <= occ)
        assert components26(out) == 1
        # one voxel per cross-section along the length, give or take the ends
        per_slice = out.sum(axis=(1, 2))
        assert np.all(per_slice <= 1)
        assert per_slice.sum() >= 12 - 2 * width

    def test_one_voxel_sheet_is_not_eaten_from_the_edge(self):
        occ = np.zeros((16, 16, 16), bool)
        occ[2:14, 6, 6:8] = True
        out = thin(occ)
        assert out.sum() >= 10 and np.all(out.sum(axis=(1, 2)) <= 1)

    def test_subset_and_components_on_dataset(self):
        for s in make_samples(4, 12):
            out = thin(s.occupancy)
            assert np.all(out <= s.occupancy)
            assert components26(out) == components26(s.occupancy)
            assert out.sum() < s.occupancy.sum()

    def test_two_blobs_stay_two(self):
        occ = np.zeros((12, 12, 12), bool)
        occ[1:4, 1:4, 1:4] = True
        occ[7:10, 7:10, 7:10] = True
        assert components26(thin(occ)) == 2

    def test_empty(self):
        with pytest.raises(EmptyOccupancy):
            thin(np.zeros((4, 4, 4), bool))


class TestRerigging:
    def test_rasterized_skeleton_scores_low(self):
        for s in make_samples(11, 20):
            assert rerigging_score(s.occupancy, s.skeleton) < 2.0 / 16

    def test_wrong_skeleton_scores_higher(self):
        a, b = make_samples(3, 2)
        assert rerigging_score(a.occupancy, a.skeleton) < rerigging_score(b.occupancy, a.skeleton)

    def test_translation_increases_score(self):
        skel = validate_skeleton([[-0.3, 0, 0], [0.3, 0, 0]], [-1, 0])
        occ = rasterize_capsules(skel, 16, 1.5)
        moved = rasterize_capsules(skel.translated([0, 0.25, 0]), 16, 1.5)
        assert rerigging_score(occ, skel) < rerigging_score(moved, skel)
