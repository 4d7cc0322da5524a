"""Delta statistics, quadratic mappings, zero counting, importance."""

import numpy as np
import pytest

from deltaquant.container import CompatibilityError, TensorMap
from deltaquant.signals import (
    DegenerateDeltasError,
    DeltaStats,
    MappingConfig,
    compute_delta,
    count_zeros_per_channel,
    global_delta_stats,
    importance,
    importance_all,
    importances_from_map,
    importances_to_map,
    map_both_ends,
    map_both_ends_zero,
    map_mid,
)
from deltaquant.toy import TrainConfig, forward, init_model, train

CFG = MappingConfig()  # defaults: both_ends_zero, y 1..10


def _weight_map(arrays: dict[str, np.ndarray]) -> TensorMap:
    return TensorMap({f"{k}.weight": np.asarray(v, np.float32) for k, v in arrays.items()})


def _random_stats(rng) -> DeltaStats:
    # comfortably separated branch anchors
    min_pos = float(rng.uniform(1e-4, 0.2))
    mid = min_pos + float(rng.uniform(0.1, 1.0))
    hi = mid + float(rng.uniform(0.1, 2.0))
    return DeltaStats(
        min_positive=min_pos,
        median_positive=mid,
        max=hi,
        zero_count=int(rng.integers(0, 10)),
        total_count=100,
    )


class TestComputeDelta:
    def test_identical_checkpoints_give_zeros(self):
        a = _weight_map({"m": np.full((3, 3), 0.5)})
        deltas = compute_delta(a, a)
        assert not deltas["m.weight"].any()

    def test_zero_pre_gives_abs_post(self):
        post = np.array([[1.5, -2.0], [0.0, 3.0]], np.float32)
        deltas = compute_delta(
            _weight_map({"m": np.zeros((2, 2))}), _weight_map({"m": post})
        )
        assert np.array_equal(deltas["m.weight"], np.abs(post))

    def test_matches_loop_oracle_exactly(self):
        rng = np.random.default_rng(0)
        pre = rng.standard_normal((4, 4)).astype(np.float32)
        post = rng.standard_normal((4, 4)).astype(np.float32)
        deltas = compute_delta(_weight_map({"m": pre}), _weight_map({"m": post}))
        for r in range(4):
            for c in range(4):
                assert deltas["m.weight"][r, c] == abs(
                    np.float32(post[r, c] - pre[r, c])
                )

    def test_incompatible_checkpoints_rejected(self):
        with pytest.raises(CompatibilityError):
            compute_delta(
                _weight_map({"m": np.zeros((2, 2))}),
                _weight_map({"m": np.zeros((2, 3))}),
            )

    def test_only_weight_tensors_processed(self):
        a = TensorMap(
            {
                "m.weight": np.zeros((2, 2), np.float32),
                "m.bias": np.ones(2, np.float32),
            }
        )
        deltas = compute_delta(a, a)
        assert deltas.names() == ["m.weight"]


class TestGlobalStats:
    def test_sort_and_index_oracle(self):
        deltas = _weight_map({"m": np.array([[0.0, 1.0], [2.0, 3.0]])})
        stats = global_delta_stats(deltas, zero_epsilon=0.0)
        assert stats.min_positive == 1.0
        assert stats.median_positive == 2.0
        assert stats.max == 3.0
        assert stats.zero_count == 1
        assert stats.total_count == 4
        assert stats.zero_fraction == 0.25

    def test_all_zero_is_degenerate(self):
        with pytest.raises(DegenerateDeltasError, match="degenerate"):
            global_delta_stats(_weight_map({"m": np.zeros((3, 3))}))

    def test_single_positive_value(self):
        stats = global_delta_stats(_weight_map({"m": np.array([[0.0, 0.0, 5.0]])}))
        assert stats.min_positive == stats.median_positive == stats.max == 5.0

    def test_even_count_uses_lower_middle(self):
        stats = global_delta_stats(_weight_map({"m": np.array([[1.0, 2.0, 3.0, 4.0]])}))
        assert stats.median_positive == 2.0

    def test_epsilon_reclassifies_small_updates(self):
        deltas = _weight_map({"m": np.array([[0.001, 1.0, 2.0, 3.0]])})
        stats = global_delta_stats(deltas, zero_epsilon=0.01)
        assert stats.zero_count == 1
        assert stats.min_positive == 1.0

    def test_pools_across_modules(self):
        deltas = _weight_map({"a": np.array([[1.0]]), "b": np.array([[3.0, 5.0]])})
        stats = global_delta_stats(deltas)
        assert stats.median_positive == 3.0
        assert stats.max == 5.0

    def test_min_including_zeros(self):
        with_zeros = DeltaStats(1.0, 2.0, 3.0, zero_count=1, total_count=4)
        without = DeltaStats(1.0, 2.0, 3.0, zero_count=0, total_count=3)
        assert with_zeros.min_including_zeros == 0.0
        assert without.min_including_zeros == 1.0


class TestMappings:
    # stats with zeros present, so the no-zero-handling left anchor is 0
    ST = DeltaStats(min_positive=0.5, median_positive=2.0, max=6.0, zero_count=1, total_count=10)
    # stats for the zero-excluded variant example
    ST2 = DeltaStats(min_positive=1.0, median_positive=3.0, max=7.0, zero_count=2, total_count=9)

    def test_both_ends_endpoint_identities(self):
        assert map_both_ends(self.ST.median_positive, self.ST, CFG) == 1.0
        assert map_both_ends(self.ST.max, self.ST, CFG) == 10.0

    def test_both_ends_right_branch_hand_value(self):
        # 1 + 9 * ((4-2)/(6-2))^2
        assert map_both_ends(4.0, self.ST, CFG) == pytest.approx(3.25, abs=1e-12)

    def test_both_ends_zero_at_zero(self):
        assert map_both_ends_zero(0.0, self.ST2, CFG) == 1.0

    def test_both_ends_zero_at_min_positive(self):
        assert map_both_ends_zero(self.ST2.min_positive, self.ST2, CFG) == pytest.approx(
            10.0, abs=1e-9
        )

    def test_both_ends_zero_left_branch_hand_value(self):
        # 1 + 9 * ((3-2)/(3-1))^2
        assert map_both_ends_zero(2.0, self.ST2, CFG) == pytest.approx(3.25, abs=1e-12)

    def test_mid_reflects_endpoints(self):
        assert map_mid(self.ST.median_positive, self.ST, CFG) == 10.0
        assert map_mid(self.ST.max, self.ST, CFG) == 1.0

    def test_mid_reflects_hand_value(self):
        assert map_mid(4.0, self.ST, CFG) == pytest.approx(7.75, abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_reflection_identity(self, seed):
        rng = np.random.default_rng(seed)
        stats = _random_stats(rng)
        deltas = rng.uniform(0, stats.max, size=200)
        total = map_mid(deltas, stats, CFG) + map_both_ends(deltas, stats, CFG)
        assert np.abs(total - (CFG.y_min + CFG.y_max)).max() < 1e-9

    @pytest.mark.parametrize("seed", range(10))
    def test_outputs_stay_in_range(self, seed):
        rng = np.random.default_rng(100 + seed)
        stats = _random_stats(rng)
        deltas = rng.uniform(0, stats.max, size=500)
        for fn in (map_both_ends, map_both_ends_zero, map_mid):
            vals = fn(deltas, stats, CFG)
            assert (vals >= CFG.y_min - 1e-12).all()
            assert (vals <= CFG.y_max + 1e-12).all()

    def test_monotone_on_both_branches(self):
        stats = self.ST2
        left = np.linspace(stats.min_positive, stats.median_positive, 500)
        right = np.linspace(stats.median_positive, stats.max, 500)
        lv = map_both_ends_zero(left, stats, CFG)
        rv = map_both_ends_zero(right, stats, CFG)
        assert (np.diff(lv) < 0).all()
        assert (np.diff(rv) > 0).all()

    def test_out_of_range_deltas_clamped(self):
        assert map_both_ends(100.0, self.ST, CFG) == 10.0
        assert map_both_ends_zero(-1.0, self.ST2, CFG) == 1.0

    def test_collapsed_branch_returns_y_max(self):
        stats = DeltaStats(5.0, 5.0, 5.0, zero_count=2, total_count=3)
        assert map_both_ends_zero(5.0, stats, CFG) == 10.0
        assert map_both_ends_zero(0.0, stats, CFG) == 1.0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MappingConfig(y_min=2.0, y_max=1.0)
        with pytest.raises(ValueError):
            MappingConfig(y_min=0.0)
        with pytest.raises(ValueError):
            MappingConfig(slices=0)
        with pytest.raises(ValueError):
            MappingConfig(signal="sideways")

    def test_default_output_anchors(self):
        assert CFG.y_min == 1.0
        assert CFG.y_max == 10.0


class TestZeroCounting:
    def test_all_zero_matrix(self):
        assert np.array_equal(
            count_zeros_per_channel(np.zeros((4, 3), np.float32)), [4.0, 4.0, 4.0]
        )

    def test_no_zeros(self):
        assert np.array_equal(
            count_zeros_per_channel(np.ones((4, 3), np.float32)), [0.0, 0.0, 0.0]
        )

    def test_two_band_hand_count(self):
        delta = np.ones((4, 2), np.float32)
        delta[0, 0] = 0.0
        delta[1, 0] = 0.0
        assert np.array_equal(count_zeros_per_channel(delta, slices=2), [1.0, 0.0])

    def test_slices_beyond_rows_rejected(self):
        with pytest.raises(ValueError):
            count_zeros_per_channel(np.zeros((4, 2), np.float32), slices=5)

    @pytest.mark.parametrize("seed", range(5))
    def test_single_slice_equals_exhaustive_count(self, seed):
        rng = np.random.default_rng(seed)
        delta = rng.choice([0.0, 1.0], size=(8, 8)).astype(np.float32)
        got = count_zeros_per_channel(delta, slices=1)
        for c in range(8):
            assert got[c] == sum(1 for r in range(8) if delta[r, c] == 0)

    @pytest.mark.parametrize("slices", [1, 2, 4, 8])
    def test_even_bands_scale_back_to_total(self, slices):
        rng = np.random.default_rng(slices)
        delta = rng.choice([0.0, 1.0], size=(8, 8)).astype(np.float32)
        mean_counts = count_zeros_per_channel(delta, slices=slices)
        totals = count_zeros_per_channel(delta, slices=1)
        assert np.allclose(mean_counts * slices, totals)


def _loop_importance(delta, stats, cfg, mean_abs=None, mean_square=None):
    """Independent scalar re-implementation of every importance signal."""
    rows, cols = delta.shape

    def f_zero(d):
        if d <= cfg.zero_epsilon:
            return cfg.y_min
        d = min(max(d, stats.min_positive), stats.max)
        if d <= stats.median_positive:
            lo, mid = stats.min_positive, stats.median_positive
            if mid - lo <= 0:
                return cfg.y_max
            return cfg.y_min + (cfg.y_max - cfg.y_min) * ((mid - d) / (mid - lo)) ** 2
        mid, hi = stats.median_positive, stats.max
        if hi - mid <= 0:
            return cfg.y_max
        return cfg.y_min + (cfg.y_max - cfg.y_min) * ((d - mid) / (hi - mid)) ** 2

    def f_plain(d):
        lo = 0.0 if stats.zero_count else stats.min_positive
        d = min(max(d, lo), stats.max)
        if d <= stats.median_positive:
            mid = stats.median_positive
            if mid - lo <= 0:
                return cfg.y_max
            return cfg.y_min + (cfg.y_max - cfg.y_min) * ((mid - d) / (mid - lo)) ** 2
        mid, hi = stats.median_positive, stats.max
        if hi - mid <= 0:
            return cfg.y_max
        return cfg.y_min + (cfg.y_max - cfg.y_min) * ((d - mid) / (hi - mid)) ** 2

    scores = np.zeros(cols)
    for c in range(cols):
        if cfg.signal == "magnitude":
            scores[c] = sum(delta[r, c] for r in range(rows)) / rows
        elif cfg.signal == "activation_sq":
            scores[c] = mean_square[c]
        elif cfg.signal == "both_ends":
            scores[c] = sum(f_plain(delta[r, c]) for r in range(rows)) / rows
        elif cfg.signal == "mid":
            scores[c] = sum(
                cfg.y_min + cfg.y_max - f_plain(delta[r, c]) for r in range(rows)
            ) / rows
        else:
            mean_f = sum(f_zero(delta[r, c]) for r in range(rows)) / rows
            band_sizes = []
            base, rem = divmod(rows, cfg.slices)
            start = 0
            z_sum = 0.0
            for b in range(cfg.slices):
                size = base + (1 if b < rem else 0)
                band = delta[start : start + size, c]
                z_sum += sum(1 for v in band if v <= cfg.zero_epsilon)
                start += size
            scores[c] = mean_f * (z_sum / cfg.slices + 1.0)
        if cfg.multiply_activation:
            scores[c] *= mean_abs[c]
    return np.maximum(scores, 1e-12)


class TestImportance:
    ST = DeltaStats(min_positive=0.5, median_positive=1.0, max=2.0, zero_count=2, total_count=4)

    def test_worked_column_example(self):
        # column [0, mid, max, 0]: mean f = (1+1+10+1)/4, Z = 2, I = 3.25 * 3
        col = np.array([[0.0], [1.0], [2.0], [0.0]])
        iv = importance("m", col, self.ST, CFG)
        assert iv.scores[0] == pytest.approx(9.75, abs=1e-12)

    def test_all_zero_column_forced_value(self):
        col = np.zeros((5, 1))
        iv = importance("m", col, self.ST, CFG)
        assert iv.scores[0] == pytest.approx(6.0, abs=1e-12)  # y_min * (N + 1)

    @pytest.mark.parametrize("signal", ["magnitude", "both_ends", "both_ends_zero", "mid"])
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_loop_oracle(self, signal, seed):
        rng = np.random.default_rng(seed)
        delta = rng.uniform(0, 1, size=(8, 8))
        delta[rng.uniform(size=(8, 8)) < 0.3] = 0.0
        if not delta.any():
            delta[0, 0] = 0.5
        stats = global_delta_stats(_weight_map({"m": delta}))
        cfg = MappingConfig(signal=signal)
        got = importance("m", delta, stats, cfg).scores
        want = _loop_importance(delta.astype(np.float32).astype(np.float64), stats, cfg)
        assert np.abs(got - want).max() <= 1e-6 * np.abs(want).max()

    @pytest.mark.parametrize("slices", [1, 2, 4])
    def test_sliced_zero_counts_match_oracle(self, slices):
        rng = np.random.default_rng(slices + 10)
        delta = rng.uniform(0, 1, size=(8, 8))
        delta[rng.uniform(size=(8, 8)) < 0.4] = 0.0
        stats = global_delta_stats(_weight_map({"m": delta}))
        cfg = MappingConfig(slices=slices)
        got = importance("m", delta, stats, cfg).scores
        want = _loop_importance(delta.astype(np.float32).astype(np.float64), stats, cfg)
        assert np.abs(got - want).max() <= 1e-6 * np.abs(want).max()

    def test_activation_signals_need_calibration(self):
        with pytest.raises(ValueError, match="calibration"):
            importance("m", np.ones((4, 4)), self.ST, MappingConfig(signal="activation_sq"))
        with pytest.raises(ValueError, match="calibration"):
            importance("m", np.ones((4, 4)), self.ST, MappingConfig(multiply_activation=True))

    def test_activation_sq_and_multiply_match_oracle(self):
        model = init_model([8, 8], seed=0)
        x = np.random.default_rng(1).standard_normal((16, 8), dtype=np.float32)
        _, calib = forward(model, x)
        rng = np.random.default_rng(2)
        delta = rng.uniform(0, 1, size=(8, 8))
        delta[0, 0] = 0.0
        stats = global_delta_stats(_weight_map({"m": delta}))
        for cfg in (
            MappingConfig(signal="activation_sq"),
            MappingConfig(signal="both_ends_zero", multiply_activation=True),
        ):
            calib.inputs["m"] = calib.inputs["layer0"]
            calib.mean_abs["m"] = calib.mean_abs["layer0"]
            calib.mean_square["m"] = calib.mean_square["layer0"]
            got = importance("m", delta, stats, cfg, calib).scores
            want = _loop_importance(
                delta.astype(np.float32).astype(np.float64),
                stats,
                cfg,
                mean_abs=calib.mean_abs["m"].astype(np.float64),
                mean_square=calib.mean_square["m"].astype(np.float64),
            )
            assert np.abs(got - want).max() <= 1e-6 * np.abs(want).max()

    def test_scores_strictly_positive_even_for_dead_channels(self):
        stats = self.ST
        cfg = MappingConfig(signal="magnitude")
        iv = importance("m", np.zeros((4, 4)), stats, cfg)
        assert (iv.scores > 0).all()


class TestImportanceAll:
    def _trained_pair(self):
        model = init_model([6, 10, 4], seed=3)
        _, snaps = train(model, TrainConfig(steps=200, data_seed=5))
        return snaps[0][1], snaps[-1][1]

    def test_identical_checkpoints_surface_degenerate_error(self):
        from deltaquant.toy import checkpoint_map

        ckpt = checkpoint_map(init_model([4, 6, 4], seed=0), 0)
        with pytest.raises(DegenerateDeltasError):
            importance_all(ckpt, ckpt, CFG)

    def test_trained_pair_yields_positive_vectors(self):
        pre, post = self._trained_pair()
        imps = importance_all(pre, post, CFG)
        assert sorted(imps) == ["layer0", "layer1"]
        assert imps["layer0"].scores.shape == (6,)
        assert imps["layer1"].scores.shape == (10,)
        for iv in imps.values():
            assert np.isfinite(iv.scores).all()
            assert (iv.scores > 0).all()

    def test_zero_fraction_is_reported(self):
        pre, post = self._trained_pair()
        stats = global_delta_stats(compute_delta(pre, post))
        # report-only: real fine-tuned models exceed 1%, the toy run may not
        assert 0.0 <= stats.zero_fraction <= 1.0

    def test_container_round_trip_preserves_scores_and_meta(self):
        pre, post = self._trained_pair()
        imps = importance_all(pre, post, MappingConfig(slices=2))
        tmap = importances_to_map(imps)
        assert tmap.meta["signal"] == "both_ends_zero"
        assert tmap.meta["y_min"] == "1.0"
        assert tmap.meta["y_max"] == "10.0"
        assert tmap.meta["slices"] == "2"
        loaded = importances_from_map(tmap)
        assert sorted(loaded) == sorted(imps)
        for name in imps:
            f32 = imps[name].scores.astype(np.float32).astype(np.float64)
            assert np.array_equal(loaded[name].scores, f32)
