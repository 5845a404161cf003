import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _oracles import march_rays
from occflow.geometry import GridSpec
from occflow.metrics import (FlowErrors, RayConfig, RayCounts, VoxelCounts, build_report, dda_raycast,
                             flow_errors, generate_query_rays, make_ray, mave, miou, raycast_batch, ray_match,
                             rayiou, voxel_counts)
from occflow.voxelgrid import DimMismatch

SPEC = GridSpec((16, 16, 16), 0.5, (-4.0, -4.0, -4.0))


def wall_grid(x_lo, cls=2, spec=SPEC):
    g = np.zeros(spec.dims, np.uint8)
    i = int(round((x_lo - spec.origin[0]) / spec.voxel_size))
    g[i:i + 2] = cls
    return g


class TestRaycast:
    def test_axis_ray_box_depth(self):
        g = np.zeros(SPEC.dims, np.uint8)
        g[14:, 7:9, 7:9] = 3  # near face at x = 3.0
        hit = dda_raycast(g, SPEC, make_ray((0.0, 0.25, -0.25), (1, 0, 0)), 40.0)
        assert hit.cls == 3 and hit.voxel == (14, 8, 7)
        assert abs(hit.depth - 3.0) < 1e-9

    def test_empty(self):
        assert dda_raycast(np.zeros(SPEC.dims, np.uint8), SPEC, make_ray((0, 0, 0), (1, 1, 0)), 40.0) is None

    def test_origin_inside_occupied(self):
        g = np.zeros(SPEC.dims, np.uint8)
        g[8, 8, 8] = 5
        hit = dda_raycast(g, SPEC, make_ray((0.1, 0.2, 0.3), (0, 0, 1)), 40.0)
        assert hit.depth == 0.0 and hit.cls == 5

    def test_origin_outside_grid(self):
        g = np.zeros(SPEC.dims, np.uint8)
        g[0, 8, 8] = 1
        hit = dda_raycast(g, SPEC, make_ray((-10.0, 0.1, 0.1), (1, 0, 0)), 40.0)
        assert hit.depth == pytest.approx(6.0, abs=1e-12)

    def test_max_range(self):
        g = wall_grid(3.0)
        assert dda_raycast(g, SPEC, make_ray((0, 0.1, 0.1), (1, 0, 0)), 2.5) is None

    def test_diagonal_depth(self):
        g = np.zeros(SPEC.dims, np.uint8)
        g[12, 12, 8] = 1  # cell spanning [2, 2.5) in x and y
        hit = dda_raycast(g, SPEC, make_ray((0.0, 0.0, 0.2), (1, 1, 0)), 40.0)
        assert hit.depth == pytest.approx(2.0 * math.sqrt(2), abs=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_axis_rays_match_marcher(self, seed):
        # an axis-aligned ray crosses every visited cell along a full voxel, so any
        # marcher step below the voxel size must find the same cell
        rng = np.random.default_rng(seed)
        spec = GridSpec((32, 32, 32), 1.0)
        g = (rng.random(spec.dims) < 0.05).astype(np.uint8) * rng.integers(1, 7, spec.dims).astype(np.uint8)
        o = rng.uniform(0, 32, (1000, 3))
        axes = np.vstack([np.eye(3), -np.eye(3)])
        d = axes[rng.integers(0, 6, 1000)]
        hits = raycast_batch(g, spec, o, d, 60.0)
        np.testing.assert_array_equal(hits.voxel, march_rays(g, spec, o, d, 60.0))


class TestQueryRays:
    def test_four_axis_directions(self):
        _, d = generate_query_rays(RayConfig(azimuths=4, rings=1, elevation_min_deg=0, elevation_max_deg=0))
        np.testing.assert_allclose(d, [[1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0]], atol=1e-15)

    def test_unit_norm_and_determinism(self):
        o1, d1 = generate_query_rays(RayConfig())
        o2, d2 = generate_query_rays(RayConfig())
        assert d1.shape == (360 * 32, 3)
        np.testing.assert_allclose(np.linalg.norm(d1, axis=1), 1.0, atol=1e-9)
        np.testing.assert_array_equal(d1, d2)
        np.testing.assert_array_equal(o1, o2)


def parallel_rays(n=25):
    ys, zs = np.meshgrid(np.linspace(-3.7, 3.7, n), np.linspace(-3.7, 3.7, n), indexing="ij")
    origins = np.stack([np.full(ys.size, -3.9), ys.ravel(), zs.ravel()], axis=1)
    return origins, np.tile([1.0, 0.0, 0.0], (ys.size, 1))


class TestRayIoU:
    def test_perfect(self, rng):
        g = (rng.random(SPEC.dims) < 0.05).astype(np.uint8) * rng.integers(1, 7, SPEC.dims).astype(np.uint8)
        o, d = generate_query_rays(RayConfig(azimuths=36, rings=8, origin=(0, 0, 0)))
        scores, *_ = rayiou(g, g, SPEC, o, d, 6)
        np.testing.assert_array_equal(scores, 1.0)

    def test_all_empty_prediction(self):
        o, d = parallel_rays()
        scores, *_ = rayiou(np.zeros(SPEC.dims, np.uint8), wall_grid(0.0), SPEC, o, d, 6)
        np.testing.assert_array_equal(scores, 0.0)

    def test_shifted_box(self):
        o, d = parallel_rays()
        gt = wall_grid(-1.5)
        pred = wall_grid(1.5)  # 3 m further along every ray
        scores, counts, ph, gh = rayiou(pred, gt, SPEC, o, d, 6)
        np.testing.assert_allclose(ph.depth - gh.depth, 3.0, atol=1e-9)
        assert scores[2] > scores[1] == scores[0]
        assert counts.tp[0].sum() == 0 and counts.tp[2, 2] == o.shape[0]

    def test_dims_mismatch(self):
        o, d = parallel_rays(2)
        with pytest.raises(DimMismatch):
            rayiou(np.zeros((2, 2, 2), np.uint8), np.zeros(SPEC.dims, np.uint8), SPEC, o, d, 6)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_symmetry_and_monotonicity(self, seed):
        rng = np.random.default_rng(seed)
        a = (rng.random(SPEC.dims) < 0.03).astype(np.uint8) * rng.integers(1, 4, SPEC.dims).astype(np.uint8)
        b = (rng.random(SPEC.dims) < 0.03).astype(np.uint8) * rng.integers(1, 4, SPEC.dims).astype(np.uint8)
        o, d = generate_query_rays(RayConfig(azimuths=24, rings=4, origin=(0.1, 0.2, 0.3)))
        sab, cab, *_ = rayiou(a, b, SPEC, o, d, 3)
        sba, cba, *_ = rayiou(b, a, SPEC, o, d, 3)
        np.testing.assert_array_equal(cab.tp, cba.tp)
        np.testing.assert_array_equal(cab.fp, cba.fn)
        np.testing.assert_allclose(sab, sba, equal_nan=True)
        assert np.all(np.diff(cab.tp.sum(axis=1)) >= 0)

    def test_counts_accumulate(self):
        o, d = parallel_rays(4)
        g = wall_grid(0.0)
        _, c, *_ = rayiou(g, g, SPEC, o, d, 6)
        total = RayCounts.zeros(6)
        total += c
        total += c
        assert total.tp[0, 2] == 2 * c.tp[0, 2]


class TestMave:
    def setup_rays(self):
        o, d = parallel_rays(6)
        g = wall_grid(0.0, cls=2)
        hits = raycast_batch(g, SPEC, o, d, 40.0)
        flow = np.zeros((2,) + SPEC.dims)
        flow[0][g == 2] = 1.0
        return hits, flow

    def test_equal_flow(self):
        hits, flow = self.setup_rays()
        value, per = mave(hits, hits, flow, flow, (2, 3, 4))
        assert value == 0.0 and per == {2: 0.0}

    def test_constant_offset(self):
        hits, flow = self.setup_rays()
        off = flow.copy()
        off[0] += 0.3
        off[1] -= 0.4
        value, _ = mave(hits, hits, off, flow, (2, 3, 4))
        assert value == pytest.approx(0.5, abs=1e-12)

    def test_no_true_positive(self):
        hits, flow = self.setup_rays()
        miss = raycast_batch(np.zeros(SPEC.dims, np.uint8), SPEC, *parallel_rays(6), 40.0)
        value, per = mave(miss, hits, flow, flow, (2, 3, 4))
        assert value is None and per == {}

    def test_category_average(self):
        fe = FlowErrors({2: 4.0, 4: 1.0}, {2: 4, 4: 2})
        assert fe.mave() == pytest.approx(0.75)


class TestMiou:
    def test_perfect(self, rng):
        g = rng.integers(0, 4, (4, 4, 4))
        per, m = miou(g, g, 3)
        assert m == 1.0

    def test_disjoint(self):
        gt = np.zeros((2, 2, 1), int)
        pred = np.zeros((2, 2, 1), int)
        gt[0, 0, 0] = 1
        pred[1, 1, 0] = 1
        per, m = miou(pred, gt, 2)
        assert per[1] == 0.0 and m == 0.0

    def test_half_overlap(self):
        gt = np.zeros((2, 2, 1), int)
        pred = np.zeros((2, 2, 1), int)
        gt[0, :, 0] = 2  # voxels a, b
        pred[:, 0, 0] = 2  # voxels a, c
        vc = voxel_counts(pred, gt, 2)
        assert (vc.tp[2], vc.fp[2], vc.fn[2]) == (1, 1, 1)
        per, m = miou(pred, gt, 2)
        assert per[2] == pytest.approx(1 / 3) and m == pytest.approx(1 / 3)
        assert math.isnan(per[1])

    def test_mask(self):
        gt = np.array([[[1, 2]]])
        pred = np.array([[[1, 1]]])
        _, m = miou(pred, gt, 2, mask=np.array([[[True, False]]]))
        assert m == 1.0


class TestReport:
    def test_json_keys_and_flags(self):
        counts = RayCounts.zeros(2)
        counts.tp[:, 1] = [1, 2, 3]
        counts.fn[:, 1] = [2, 1, 0]
        report = build_report(counts, VoxelCounts.zeros(2), None)
        doc = json.loads(report.to_json())
        assert list(doc)[:5] == ["rayiou_1m", "rayiou_2m", "rayiou_4m", "rayiou_mean", "miou"]
        assert doc["rayiou_1m"] == pytest.approx(1 / 3) and doc["rayiou_4m"] == 1.0
        assert doc["mave"] is None and doc["mave_absent"] is True
        assert doc["miou"] is None  # NaN written as null
        assert list(doc["counts"]["rays"]) == ["1m", "2m", "4m"]
