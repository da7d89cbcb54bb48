"""Geometry kernels vs brute-force oracles."""

import numpy as np
import pytest

from seformer.exceptions import ContractError, NumericError, ShapeError
from seformer.geometry import (
    IDW_EPS,
    OFFSETS_8,
    OFFSETS_27,
    GridOffset,
    PointCloud,
    VoxelGrid,
    ball_query,
    downsample_grid,
    farthest_point_sample,
    generate_virtual_keys,
    multi_radii_keysets,
    trilinear_plan,
    voxelize,
)


def rng(seed=0):
    return np.random.default_rng(seed)


def random_cloud(r, n, c=4, extent=2.0):
    return PointCloud(r.uniform(-extent, extent, size=(n, 3)),
                      r.normal(size=(n, c)))


class TestPointCloud:
    def test_row_counts_must_agree(self):
        with pytest.raises(ShapeError):
            PointCloud(np.zeros((3, 3)), np.zeros((2, 4)))

    def test_nonfinite_rejected(self):
        with pytest.raises(NumericError):
            PointCloud(np.array([[0.0, 0.0, np.inf]]), np.zeros((1, 1)))

    def test_empty_cloud_allowed(self):
        pc = PointCloud(np.zeros((0, 3)), np.zeros((0, 4)))
        assert pc.n == 0


class TestGridOffset:
    def test_bijection(self):
        seen = set()
        for flat in range(27):
            off = GridOffset.from_flat(flat)
            assert off.flat == flat
            seen.add((off.i, off.j, off.k))
        assert len(seen) == 27

    def test_center_is_query_cell(self):
        assert GridOffset(0, 0, 0).flat == 13
        assert GridOffset.from_flat(13) == GridOffset(0, 0, 0)

    def test_corner_layout(self):
        assert OFFSETS_8.shape == (8, 3)
        assert np.all(np.abs(OFFSETS_8) == 1)
        assert OFFSETS_27.shape == (27, 3)


class TestVoxelize:
    def test_single_point_at_origin(self):
        pc = PointCloud(np.zeros((1, 3)), np.array([[2.0, 5.0]]))
        vg = voxelize(pc, origin=(0, 0, 0), step=(0.5, 0.5, 0.5),
                      range_lo=(-1, -1, -1), range_hi=(1, 1, 1))
        assert vg.n_cells == 1
        assert tuple(vg.indices[0]) == (0, 0, 0)
        np.testing.assert_array_equal(vg.feats[0], [2.0, 5.0])

    def test_mean_of_two(self):
        pc = PointCloud(np.array([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2]]),
                        np.array([[1.0], [3.0]]))
        vg = voxelize(pc, (0, 0, 0), (1, 1, 1), (-1, -1, -1), (1, 1, 1))
        assert vg.n_cells == 1
        np.testing.assert_allclose(vg.feats[0], [2.0])
        assert vg.counts[0] == 2

    def test_out_of_range_dropped_and_counted(self):
        pc = PointCloud(np.array([[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]]),
                        np.ones((2, 1)))
        vg = voxelize(pc, (0, 0, 0), (1, 1, 1), (-1, -1, -1), (1, 1, 1))
        assert vg.dropped == 1
        assert vg.counts.sum() == 1

    def test_matches_brute_force_grouping(self):
        r = rng(1)
        pc = random_cloud(r, 200, c=3)
        origin, step = np.array([-2.0, -2.0, -2.0]), np.array([0.7, 0.5, 0.9])
        vg = voxelize(pc, origin, step, (-2, -2, -2), (2, 2, 2))
        groups = {}
        for p, f in zip(pc.coords, pc.feats):
            if np.any(p < -2) or np.any(p >= 2):
                continue
            cell = tuple(int(np.floor((p[a] - origin[a]) / step[a])) for a in range(3))
            groups.setdefault(cell, []).append(f)
        assert set(map(tuple, vg.indices)) == set(groups)
        for cell, fs in groups.items():
            row = vg.index_of[cell]
            np.testing.assert_allclose(vg.feats[row], np.mean(fs, axis=0),
                                       rtol=0, atol=1e-12)
            assert vg.counts[row] == len(fs)

    def test_stored_indices_inside_range(self):
        r = rng(2)
        pc = random_cloud(r, 100)
        vg = voxelize(pc, (-2, -2, -2), (0.5, 0.5, 0.5), (-2, -2, -2), (2, 2, 2))
        centers = vg.cell_centers()
        assert np.all(centers >= vg.range_lo) and np.all(centers <= vg.range_hi)


class TestDownsample:
    def test_single_cell_no_merge(self):
        vg = VoxelGrid(np.zeros(3), np.ones(3), np.array([[3, 3, 3]]),
                       np.array([1]), np.array([[1.0, 2.0]]),
                       np.full(3, -8.0), np.full(3, 8.0))
        out = downsample_grid(vg)
        assert out.n_cells == 1
        assert tuple(out.indices[0]) == (1, 1, 1)
        np.testing.assert_array_equal(out.feats[0], [1.0, 2.0])
        np.testing.assert_array_equal(out.step, [2.0, 2.0, 2.0])

    def test_weighted_mean_of_siblings(self):
        u, v = np.array([1.0, 0.0]), np.array([0.0, 2.0])
        vg = VoxelGrid(np.zeros(3), np.ones(3), np.array([[0, 0, 0], [1, 0, 0]]),
                       np.array([1, 3]), np.stack([u, v]),
                       np.full(3, -8.0), np.full(3, 8.0))
        out = downsample_grid(vg)
        assert out.n_cells == 1
        np.testing.assert_allclose(out.feats[0], (u + 3 * v) / 4, atol=1e-15)
        assert out.counts[0] == 4

    def test_factor_must_be_two(self):
        vg = VoxelGrid(np.zeros(3), np.ones(3), np.zeros((0, 3), dtype=np.int64),
                       np.zeros(0, dtype=np.int64), np.zeros((0, 2)),
                       np.full(3, -8.0), np.full(3, 8.0))
        with pytest.raises(ContractError):
            downsample_grid(vg, factor=4)

    def test_occupancy_matches_index_halving(self):
        r = rng(3)
        pc = random_cloud(r, 300)
        vg = voxelize(pc, (-2, -2, -2), (0.25, 0.25, 0.25), (-2, -2, -2), (2, 2, 2))
        out = downsample_grid(vg)
        expected = {tuple(np.floor_divide(ix, 2)) for ix in vg.indices}
        assert set(map(tuple, out.indices)) == expected
        # counts conserved
        assert out.counts.sum() == vg.counts.sum()


class TestFPS:
    def test_k_equals_n_returns_all(self):
        r = rng(4)
        pc = random_cloud(r, 12)
        out = farthest_point_sample(pc, 12, seed=0)
        assert sorted(out.tolist()) == list(range(12))

    def test_colinear_extremes(self):
        coords = np.stack([np.arange(10.0), np.zeros(10), np.zeros(10)], axis=1)
        pc = PointCloud(coords, np.zeros((10, 1)))
        out = farthest_point_sample(pc, 2, seed=0, start=0)
        assert set(out.tolist()) == {0, 9}

    def test_k_too_large(self):
        pc = random_cloud(rng(5), 4)
        with pytest.raises(ContractError):
            farthest_point_sample(pc, 5, seed=0)

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_brute_force_oracle(self, seed):
        r = rng(100 + seed)
        pc = random_cloud(r, 50)
        got = farthest_point_sample(pc, 5, seed=seed)

        start = int(np.random.default_rng(seed).integers(0, 50))
        chosen = [start]
        while len(chosen) < 5:
            best_i, best_d = -1, -1.0
            for i in range(50):
                d = min(float(np.linalg.norm(pc.coords[i] - pc.coords[j]))
                        for j in chosen)
                if d > best_d:
                    best_i, best_d = i, d
            chosen.append(best_i)
        assert got.tolist() == chosen

    def test_deterministic(self):
        pc = random_cloud(rng(6), 40)
        a = farthest_point_sample(pc, 7, seed=3)
        b = farthest_point_sample(pc, 7, seed=3)
        assert np.array_equal(a, b)


class TestBallQuery:
    def test_center_on_point_tiny_radius(self):
        r = rng(7)
        pc = random_cloud(r, 20)
        out = ball_query(pc, pc.coords[4], radius=1e-9, max_k=5, seed=0)
        assert out.tolist() == [4]

    def test_empty_result_allowed(self):
        pc = random_cloud(rng(8), 10)
        out = ball_query(pc, np.array([50.0, 50.0, 50.0]), radius=0.5, max_k=3, seed=0)
        assert out.size == 0

    @pytest.mark.parametrize("seed", range(8))
    def test_subset_of_brute_force_filter(self, seed):
        r = rng(200 + seed)
        pc = random_cloud(r, 60)
        center = r.uniform(-1, 1, size=3)
        radius, max_k = 1.2, 7
        out = ball_query(pc, center, radius, max_k, seed=seed)
        inside = {i for i in range(60)
                  if np.linalg.norm(pc.coords[i] - center) <= radius}
        assert set(out.tolist()) <= inside
        assert out.size == min(len(inside), max_k)
        # determinism
        again = ball_query(pc, center, radius, max_k, seed=seed)
        assert np.array_equal(out, again)


def oracle_virtual_keys(pc, query, d, k_interp, layout=27):
    """Per-entry brute-force interpolation, independent of the library path."""
    from seformer.geometry import grid_layout
    offs = grid_layout(layout)
    feats, valid, counts = [], [], []
    for off in offs:
        vp = np.asarray(query, dtype=float) + d * off
        dists = [(float(np.linalg.norm(pc.coords[i] - vp)), i) for i in range(pc.n)]
        near = sorted([t for t in dists if t[0] <= d])[:k_interp]
        if not near:
            feats.append(np.zeros(pc.width))
            valid.append(False)
            counts.append(0)
            continue
        ws = np.array([1.0 / (t[0] + IDW_EPS) for t in near])
        ws = ws / ws.sum()
        feats.append(sum(wi * pc.feats[i] for wi, (_, i) in zip(ws, near)))
        valid.append(True)
        counts.append(len(near))
    return np.array(feats), np.array(valid), np.array(counts)


class TestVirtualKeys:
    def test_coincident_source_exact(self):
        query = np.array([0.5, 0.5, 0.5])
        d = 0.4
        vp = query + d * np.array([1, 0, 0])
        pc = PointCloud(vp[None, :], np.array([[7.0, -3.0]]))
        ks = generate_virtual_keys(pc, query, d, k_interp=3)
        slot = GridOffset(1, 0, 0).flat
        np.testing.assert_array_equal(ks.features[slot], [7.0, -3.0])
        assert ks.valid[slot]

    def test_empty_cloud_all_invalid(self):
        pc = PointCloud(np.zeros((0, 3)), np.zeros((0, 5)))
        ks = generate_virtual_keys(pc, np.zeros(3), 0.5, 3)
        assert ks.n_entries == 27
        assert not ks.valid.any()
        np.testing.assert_array_equal(ks.features, np.zeros((27, 5)))

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_brute_force_oracle(self, seed):
        r = rng(300 + seed)
        pc = random_cloud(r, 30, c=3, extent=1.0)
        query = r.uniform(-0.5, 0.5, size=3)
        ks = generate_virtual_keys(pc, query, d=0.5, k_interp=3)
        feats, valid, counts = oracle_virtual_keys(pc, query, 0.5, 3)
        np.testing.assert_allclose(ks.features, feats, rtol=0, atol=1e-12)
        assert np.array_equal(ks.valid, valid)
        assert np.array_equal(ks.counts, counts)

    def test_lattice_exactness(self):
        r = rng(9)
        pc = random_cloud(r, 25)
        query = r.uniform(-1, 1, size=3)
        ks = generate_virtual_keys(pc, query, d=0.37, k_interp=2)
        center = ks.positions[GridOffset(0, 0, 0).flat]
        for off, pos, _f, _v, _c in ks.entries():
            np.testing.assert_allclose(pos - center, 0.37 * off.as_array(),
                                       rtol=0, atol=1e-15)

    def test_convex_hull_property(self):
        r = rng(10)
        pc = random_cloud(r, 40, c=4, extent=1.0)
        query = r.uniform(-0.5, 0.5, size=3)
        ks = generate_virtual_keys(pc, query, d=0.6, k_interp=3)
        lo, hi = pc.feats.min(axis=0), pc.feats.max(axis=0)
        for s in range(27):
            if ks.valid[s]:
                assert np.all(ks.features[s] >= lo - 1e-12)
                assert np.all(ks.features[s] <= hi + 1e-12)

    def test_translation_invariance(self):
        r = rng(11)
        pc = random_cloud(r, 35, c=3)
        query = r.uniform(-1, 1, size=3)
        shift = np.array([3.1, -2.7, 0.9])
        a = generate_virtual_keys(pc, query, 0.5, 3)
        b = generate_virtual_keys(pc.translated(shift), query + shift, 0.5, 3)
        assert np.array_equal(a.valid, b.valid)
        np.testing.assert_allclose(a.features, b.features, rtol=0, atol=1e-9)

    def test_corner_layout_has_eight_entries(self):
        pc = random_cloud(rng(12), 20)
        ks = generate_virtual_keys(pc, np.zeros(3), 0.5, 3, layout=8)
        assert ks.n_entries == 8
        assert np.all(np.abs(ks.offsets) == 1)


class TestMultiRadii:
    def test_single_radius_reduces(self):
        r = rng(13)
        pc = random_cloud(r, 30)
        query = np.zeros(3)
        [only] = multi_radii_keysets(pc, query, [0.5], 3)
        direct = generate_virtual_keys(pc, query, 0.5, 3)
        np.testing.assert_array_equal(only.features, direct.features)

    def test_doubled_radii_positions(self):
        pc = random_cloud(rng(14), 30)
        query = np.array([1.0, 2.0, 3.0])
        sets = multi_radii_keysets(pc, query, [0.4, 0.8], 3)
        for ks, d in zip(sets, (0.4, 0.8)):
            np.testing.assert_array_equal(ks.positions, query + d * ks.offsets)

    def test_composition_equals_per_radius_calls(self):
        r = rng(15)
        pc = random_cloud(r, 40)
        query = r.uniform(-1, 1, size=3)
        radii = [0.3, 0.6, 1.2]
        sets = multi_radii_keysets(pc, query, radii, 2)
        for ks, d in zip(sets, radii):
            single = generate_virtual_keys(pc, query, d, 2)
            np.testing.assert_array_equal(ks.features, single.features)
            assert np.array_equal(ks.valid, single.valid)

    def test_empty_or_unsorted_radii_rejected(self):
        pc = random_cloud(rng(16), 10)
        with pytest.raises(ContractError):
            multi_radii_keysets(pc, np.zeros(3), [], 3)
        with pytest.raises(ContractError):
            multi_radii_keysets(pc, np.zeros(3), [0.8, 0.4], 3)


class TestTrilinearPlan:
    def test_exact_hit_at_cell_center(self):
        pc = PointCloud(np.array([[0.25, 0.25, 0.25]]), np.array([[4.0, 2.0]]))
        vg = voxelize(pc, (0, 0, 0), (0.5, 0.5, 0.5), (0, 0, 0), (2, 2, 2))
        idx, w = trilinear_plan(vg, vg.cell_centers())
        sampled = np.einsum("tj,tjc->tc", w, vg.feats[idx])
        np.testing.assert_allclose(sampled[0], [4.0, 2.0], atol=1e-12)

    def test_empty_region_samples_zero(self):
        pc = PointCloud(np.array([[0.25, 0.25, 0.25]]), np.array([[4.0]]))
        vg = voxelize(pc, (0, 0, 0), (0.5, 0.5, 0.5), (0, 0, 0), (4, 4, 4))
        idx, w = trilinear_plan(vg, np.array([[3.0, 3.0, 3.0]]))
        assert np.all(w == 0.0)

    def test_matches_brute_force_oracle(self):
        r = rng(17)
        pc = random_cloud(r, 120, c=2)
        vg = voxelize(pc, (-2, -2, -2), (0.5, 0.5, 0.5), (-2, -2, -2), (2, 2, 2))
        targets = r.uniform(-1.5, 1.5, size=(25, 3))
        idx, w = trilinear_plan(vg, targets)
        sampled = np.einsum("tj,tjc->tc", w, vg.feats[idx])
        for t in range(25):
            u = (targets[t] - vg.origin) / vg.step - 0.5
            base = np.floor(u).astype(int)
            frac = u - base
            expected = np.zeros(2)
            for di in (0, 1):
                for dj in (0, 1):
                    for dk in (0, 1):
                        cell = (base[0] + di, base[1] + dj, base[2] + dk)
                        row = vg.index_of.get(cell)
                        if row is None:
                            continue
                        wt = ((frac[0] if di else 1 - frac[0])
                              * (frac[1] if dj else 1 - frac[1])
                              * (frac[2] if dk else 1 - frac[2]))
                        expected += wt * vg.feats[row]
            np.testing.assert_allclose(sampled[t], expected, rtol=0, atol=1e-12)
