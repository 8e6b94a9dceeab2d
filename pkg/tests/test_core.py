import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from collate.core import (
    NormalizationConfig,
    PatchWeights,
    ScoreKind,
    ScoreSeries,
    TimeSeriesWindow,
    normalize_scores,
    patch_weights,
)
from collate.errors import DegenerateRange, NonFiniteInput, WindowTooShort


def raw(values):
    return ScoreSeries(np.asarray(values, float), ScoreKind.RAW_TSADM)


class TestNormalizeScores:
    def test_unit_root_divides_by_range(self):
        out = normalize_scores(raw([0.0, 2.0, 4.0]), NormalizationConfig(1.0))
        np.testing.assert_allclose(out.scores, [0.0, 0.5, 1.0])
        assert out.kind is ScoreKind.SCALED_TSADM

    def test_square_root_can_exceed_one(self):
        out = normalize_scores(raw([0.0, 2.0, 4.0]), NormalizationConfig(2.0))
        np.testing.assert_allclose(out.scores, [0.0, 1.0, 2.0])

    def test_constant_scores_rejected(self):
        with pytest.raises(DegenerateRange):
            normalize_scores(raw([3.0, 3.0, 3.0]), NormalizationConfig(1.0))

    @given(
        st.lists(st.floats(0, 100), min_size=2, max_size=30).filter(
            lambda v: max(v) > min(v)
        ),
        st.floats(0.1, 50),
    )
    @settings(max_examples=50, deadline=None)
    def test_scale_invariant_at_unit_root(self, values, c):
        cfg = NormalizationConfig(1.0)
        a = normalize_scores(raw(values), cfg).scores
        b = normalize_scores(raw([c * v for v in values]), cfg).scores
        np.testing.assert_allclose(a, b, atol=1e-9)


class TestPatchWeights:
    def test_hand_computed_example(self):
        w = TimeSeriesWindow(np.array([[0.0], [0.0], [10.0], [0.0]]))
        pw = patch_weights(w, 2)
        assert pw.d_intra[2] == pytest.approx(10.0)
        assert pw.d_inter[2] == pytest.approx(5.0)
        assert pw.lambda1[2] == pytest.approx(2.0 / 3.0)
        assert pw.lambda2[2] == pytest.approx(1.0 / 3.0)

    def test_constant_window_falls_back_to_equal_weights(self):
        w = TimeSeriesWindow(np.full((8, 2), 3.5))
        pw = patch_weights(w, 2)
        np.testing.assert_allclose(pw.lambda1, 0.5)
        np.testing.assert_allclose(pw.lambda2, 0.5)

    def test_isolated_spike_weights_intra(self):
        vals = np.zeros((20, 1))
        vals[9, 0] = 8.0
        pw = patch_weights(TimeSeriesWindow(vals), 2)
        assert pw.lambda1[9] > pw.lambda2[9]

    def test_shifted_patch_weights_inter(self):
        vals = np.zeros((20, 1))
        vals[8:12, 0] = 4.0  # one whole patch uniformly shifted
        pw = patch_weights(TimeSeriesWindow(vals), 4)
        for t in range(8, 12):
            assert pw.lambda2[t] > pw.lambda1[t]

    def test_ragged_tail_merged_backward(self):
        vals = np.arange(5, dtype=float).reshape(-1, 1)
        pw = patch_weights(TimeSeriesWindow(vals), 2)
        # final patch {4} is a single slot, so it merges into {2, 3}
        assert pw.d_intra[4] == pytest.approx((2.0 + 1.0) / 2.0)

    def test_window_shorter_than_patch(self):
        with pytest.raises(WindowTooShort):
            patch_weights(TimeSeriesWindow(np.zeros((2, 1))), 3)

    @given(
        st.integers(2, 5),
        st.lists(st.floats(-5, 5), min_size=4, max_size=40),
    )
    @settings(max_examples=60, deadline=None)
    def test_weights_always_sum_to_one(self, patch, values):
        if len(values) < patch:
            return
        pw = patch_weights(TimeSeriesWindow(np.array(values)[:, None]), patch)
        assert np.abs(pw.lambda1 + pw.lambda2 - 1.0).max() <= 1e-12


class TestTypes:
    def test_unit_interval_kinds_validated(self):
        with pytest.raises(ValueError):
            ScoreSeries(np.array([0.2, 1.3]), ScoreKind.LLM)

    def test_raw_scores_nonnegative(self):
        with pytest.raises(ValueError):
            ScoreSeries(np.array([-0.1, 0.5]), ScoreKind.RAW_TSADM)

    def test_scaled_scores_may_exceed_one(self):
        s = ScoreSeries(np.array([0.0, 1.7]), ScoreKind.SCALED_TSADM)
        assert s.scores.max() == pytest.approx(1.7)

    def test_window_rejects_nan(self):
        with pytest.raises(NonFiniteInput):
            TimeSeriesWindow(np.array([[np.nan]]))

    def test_window_label_length_checked(self):
        with pytest.raises(Exception):
            TimeSeriesWindow(np.zeros((3, 1)), labels=np.array([1, 0]))

    def test_fixed_weights_bypass_sum_invariant(self):
        fw = PatchWeights.fixed(4, 1.0, 1.0)
        np.testing.assert_allclose(fw.lambda1 + fw.lambda2, 2.0)
