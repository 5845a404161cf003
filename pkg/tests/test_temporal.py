import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _oracles import dense_fusion
from occflow.geometry import GridSpec, Pose
from occflow.temporal import (BankEntry, FusionMlp, KTooLarge, MemoryBank, SeedSet, StreamConfig,
                              StreamParams, WeightEmbed, WidthMismatch, bank_update, fuse_seeds,
                              retrieve_history, scatter_add, sparse_temporal_fusion, topk_sample,
                              trilinear_sample)

SPEC = GridSpec((4, 3, 2), 0.5, (-1.0, -0.75, 0.0))


def embed(dim=2):
    return WeightEmbed(np.ones(dim), np.zeros(dim))


class TestTopk:
    def test_hot_voxel(self, rng):
        w = np.zeros(SPEC.dims)
        w[2, 1, 0] = 1.0
        s = topk_sample(rng.standard_normal((3,) + SPEC.dims), w, 1, "non-empty", SPEC, embed())
        assert s.indices.tolist() == [SPEC.linear_index((2, 1, 0))]
        np.testing.assert_allclose(s.positions[:, 0], SPEC.voxel_to_world((2, 1, 0)))

    def test_exhaustive_order(self, rng):
        w = rng.uniform(0, 1, SPEC.dims)
        s = topk_sample(np.zeros((1,) + SPEC.dims), w, SPEC.num_voxels, "non-empty", SPEC, embed())
        assert sorted(s.indices.tolist()) == list(range(SPEC.num_voxels))
        assert np.all(np.diff(s.weights) <= 0)

    def test_tie_break(self):
        spec = GridSpec((3, 1, 1), 1.0)
        w = np.array([0.9, 0.9, 0.1]).reshape(3, 1, 1)
        s = topk_sample(np.zeros((1, 3, 1, 1)), w, 2, "non-empty", spec, embed())
        assert s.indices.tolist() == [0, 1]
        e = topk_sample(np.zeros((1, 3, 1, 1)), w, 2, "empty", spec, embed())
        assert e.indices.tolist() == [2, 0]

    def test_k_too_large(self):
        with pytest.raises(KTooLarge):
            topk_sample(np.zeros((1,) + SPEC.dims), np.zeros(SPEC.dims), SPEC.num_voxels + 1, "empty", SPEC, embed())

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 24))
    def test_selection_dominates_rest(self, seed, k):
        w = np.random.default_rng(seed).uniform(0, 1, SPEC.dims)
        s = topk_sample(np.zeros((1,) + SPEC.dims), w, k, "non-empty", SPEC, embed())
        rest = np.delete(w.reshape(-1), s.indices)
        assert rest.size == 0 or s.weights.min() >= rest.max()


class TestTrilinear:
    def test_cell_centers_exact(self, rng):
        g = rng.standard_normal((2,) + SPEC.dims)
        np.testing.assert_allclose(trilinear_sample(g, SPEC, SPEC.cell_centers().reshape(-1, 3)),
                                   g.reshape(2, -1), atol=1e-12)

    def test_outside_zero(self, rng):
        g = rng.standard_normal((2,) + SPEC.dims)
        pts = np.array([[-1.01, 0.0, 0.5], [0.0, 0.76, 0.5], [0.0, 0.0, 1.0]])
        assert not trilinear_sample(g, SPEC, pts).any()

    def test_midpoint(self):
        g = np.zeros((1,) + SPEC.dims)
        g[0, 1], g[0, 2] = 1.0, 3.0
        p = (SPEC.voxel_to_world((1, 0, 0)) + SPEC.voxel_to_world((2, 0, 0))) / 2
        assert trilinear_sample(g, SPEC, p[None]).item() == pytest.approx(2.0)


def ramp_grid(spec):
    return np.broadcast_to(np.arange(spec.dims[0], dtype=float)[None, :, None, None], (1,) + spec.dims).copy()


class TestRetrieve:
    def seeds(self, grid, k):
        w = np.linspace(1, 0, SPEC.num_voxels).reshape(SPEC.dims)
        return topk_sample(grid, w, k, "non-empty", SPEC, embed())

    def test_identity(self, rng):
        g = rng.standard_normal((3,) + SPEC.dims)
        bank = MemoryBank(2)
        bank.push(BankEntry(g, Pose.identity(), 0.0))
        s = self.seeds(g, 10)
        (h, pad) = retrieve_history(s, bank, Pose.identity(), SPEC, 2)
        np.testing.assert_allclose(h, s.features, atol=1e-12)
        assert not pad.any()

    def test_ramp_shift(self):
        g = ramp_grid(SPEC)
        bank = MemoryBank(1)
        bank.push(BankEntry(g, Pose.identity(), 0.0))
        # the ego moved one voxel forward, so the past frame sees current cells one step further out
        s = self.seeds(g, SPEC.num_voxels)
        (h,) = retrieve_history(s, bank, Pose(np.eye(3), (0.5, 0.0, 0.0)), SPEC, 1)
        ix = np.unravel_index(s.indices, SPEC.dims)[0]
        interior = ix < SPEC.dims[0] - 1
        np.testing.assert_allclose(h[0, interior], ix[interior] + 1.0, atol=1e-12)
        assert not h[0, ~interior].any()  # pushed out of the past grid

    def test_empty_bank(self, rng):
        g = rng.standard_normal((2,) + SPEC.dims)
        hist = retrieve_history(self.seeds(g, 5), MemoryBank(4), Pose.identity(), SPEC, 3)
        assert len(hist) == 3 and all(not h.any() and h.shape == (2, 5) for h in hist)


class TestBank:
    def test_fifo(self):
        bank = MemoryBank(2)
        for t, name in enumerate("abc"):
            bank_update(bank, BankEntry(name, Pose.identity(), float(t)))
        assert [e.grid for e in bank.entries] == ["b", "c"]
        assert [e.grid for e in bank.recent(5)] == ["c", "b"]

    def test_rejects_stale(self):
        bank = MemoryBank(3)
        bank.push(BankEntry(None, Pose.identity(), 1.0))
        with pytest.raises(ValueError):
            bank.push(BankEntry(None, Pose.identity(), 1.0))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 5), st.lists(st.floats(-100, 100), max_size=30))
    def test_timestamps_increase(self, cap, stamps):
        bank = MemoryBank(cap)
        for s in stamps:
            try:
                bank.push(BankEntry(None, Pose.identity(), s))
            except ValueError:
                pass
            ts = [e.timestamp for e in bank.entries]
            assert len(ts) <= cap and all(a < b for a, b in zip(ts, ts[1:]))


def seed_set(features, weights, embed_dim=1):
    n = features.shape[1]
    return SeedSet(np.arange(n), features, np.zeros((3, n)), weights, np.ones((embed_dim, n)) * weights)


class TestFuse:
    def test_identity_k0(self, rng):
        c = 3
        s = seed_set(rng.standard_normal((c, 4)), rng.uniform(0, 1, 4), 2)
        mlp = FusionMlp(np.hstack([np.eye(c), np.zeros((c, 2))]), np.zeros(c), 0, 2)
        np.testing.assert_array_equal(fuse_seeds(s, [], mlp), s.features)

    def test_zero_history_and_weights(self, rng):
        c = 2
        s = seed_set(rng.standard_normal((c, 3)), np.zeros(3), 1)
        mlp = FusionMlp.init(c, 2, 1, rng)
        w_cur = mlp.weight[:, :c]
        np.testing.assert_allclose(fuse_seeds(s, [np.zeros((c, 3))] * 2, mlp), w_cur @ s.features, atol=1e-12)

    def test_hand_row(self):
        s = seed_set(np.array([[1.0], [2.0]]), np.array([0.5]))
        mlp = FusionMlp(np.array([[1.0, -1.0, 0.5, 2.0, 4.0], [0.0, 0.0, 0.0, 0.0, 1.0]]), np.array([0.25, 0.0]), 1, 1)
        out = fuse_seeds(s, [np.array([[3.0], [-1.0]])], mlp)
        # 1*1 - 1*2 + 0.5*3 + 2*(-1) + 4*0.5 + 0.25
        np.testing.assert_allclose(out[:, 0], [0.75, 0.5])

    def test_width_checks(self, rng):
        with pytest.raises(WidthMismatch):
            FusionMlp(np.zeros((2, 7)), np.zeros(2), 1, 2)
        s = seed_set(np.zeros((2, 1)), np.zeros(1))
        with pytest.raises(WidthMismatch):
            fuse_seeds(s, [], FusionMlp.zeros(2, 1, 1))


class TestScatter:
    def test_zero(self, rng):
        v = rng.standard_normal((2, 2, 2, 2))
        np.testing.assert_array_equal(scatter_add(v, np.array([0, 3]), np.zeros((2, 2))), v)

    def test_one_seed(self, rng):
        v = rng.standard_normal((2, 2, 2, 2))
        out = scatter_add(v, np.array([5]), np.array([[1.0], [-2.0]]))
        diff = (out - v).reshape(2, -1)
        np.testing.assert_allclose(diff[:, 5], [1.0, -2.0])
        assert not np.delete(diff, 5, axis=1).any()

    def test_duplicates(self, rng):
        v = np.zeros((1, 2, 2, 1))
        idx = rng.integers(0, 4, 20)
        fused = rng.standard_normal((1, 20))
        want = np.zeros(4)
        for i, f in zip(idx, fused[0]):
            want[i] += f
        np.testing.assert_allclose(scatter_add(v, idx, fused).reshape(-1), want, atol=1e-12)


class TestSparseFusion:
    def test_empty_banks_zero_mlps(self, rng):
        v = rng.standard_normal((2,) + SPEC.dims)
        w = rng.uniform(0, 1, SPEC.dims)
        cfg = StreamConfig(4)
        zero = StreamParams(FusionMlp.zeros(2, 4, 2), WeightEmbed.init(2, rng))
        zshort = StreamParams(FusionMlp.zeros(2, 2, 2), WeightEmbed.init(2, rng))
        out = sparse_temporal_fusion(v, w, MemoryBank(4), Pose.identity(), SPEC, cfg, zero, zshort)
        np.testing.assert_array_equal(out, v)

    def test_static_two_frames(self, rng):
        c = 2
        v = rng.standard_normal((c,) + SPEC.dims)
        w = rng.uniform(0, 1, SPEC.dims)
        bank = MemoryBank(1)
        bank.push(BankEntry(v, Pose.identity(), 0.0))
        long = StreamParams(FusionMlp.init(c, 1, 1, rng), WeightEmbed(np.array([2.0]), np.array([0.1])))
        cfg = StreamConfig(1, 1.0, 0.0)
        out = sparse_temporal_fusion(v, w, bank, Pose.identity(), SPEC, cfg, long, None)
        flat_v, flat_w = v.reshape(c, -1), w.reshape(-1)
        want = flat_v + long.mlp.weight @ np.concatenate([flat_v, flat_v, 2.0 * flat_w[None] + 0.1])
        np.testing.assert_allclose(out.reshape(c, -1), want, atol=1e-12)

    def test_dense_oracle_one_step(self, rng):
        spec = GridSpec((4, 4, 2), 0.5, (-1.0, -1.0, 0.0))
        c = 2
        v = rng.standard_normal((c,) + spec.dims)
        w = rng.uniform(0, 1, spec.dims)
        past = [(rng.standard_normal((c,) + spec.dims), Pose.from_yaw(0.2 * i, (0.1 * i, -0.2, 0.0)), float(i))
                for i in range(2)]
        bank = MemoryBank(2)
        for g, p, t in past:
            bank.push(BankEntry(g, p, t))
        pose_t = Pose.from_yaw(0.5, (0.3, 0.1, 0.0))
        long = StreamParams(FusionMlp.init(c, 2, 1, rng), WeightEmbed.init(1, rng))
        short = StreamParams(FusionMlp.init(c, 1, 1, rng), WeightEmbed.init(1, rng))
        out = sparse_temporal_fusion(v, w, bank, pose_t, spec, StreamConfig(2, 1.0, 1.0), long, short)
        entries = [(g, p) for g, p, _ in reversed(past)]
        streams = [(sp.mlp.weight, sp.mlp.bias, sp.mlp.k, sp.embed.weight, sp.embed.bias) for sp in (long, short)]
        np.testing.assert_allclose(out, dense_fusion(v, w, entries, pose_t, spec, streams), atol=1e-9)

    def test_untouched_outside_seeds(self, rng):
        v = rng.standard_normal((2,) + SPEC.dims)
        w = rng.uniform(0, 1, SPEC.dims)
        long = StreamParams(FusionMlp.init(2, 2, 2, rng), WeightEmbed.init(2, rng))
        cfg = StreamConfig(2, 0.25, 0.0)
        out = sparse_temporal_fusion(v, w, MemoryBank(2), Pose.identity(), SPEC, cfg, long, None)
        n_long, _ = cfg.seed_counts(SPEC.num_voxels)
        hot = np.argsort(-w.reshape(-1), kind="stable")[:n_long]
        changed = np.flatnonzero(np.any((out != v).reshape(2, -1), axis=0))
        assert set(changed) <= set(hot)

    def test_seed_counts(self):
        assert StreamConfig(16).seed_counts(4096) == (410, 205)
        assert StreamConfig(16).short_frames == 8
