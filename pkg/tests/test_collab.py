import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from collate.benchmark import BenchmarkConfig, build_benchmark
from collate.collab import (
    CollabConfig,
    ConditionalNetParams,
    FusionPipeline,
    LossVariant,
    collaborative_loss,
    collaborative_loss_grad,
    collaborative_loss_naive,
    conditional_forward,
    detect,
    mse_variant_loss,
    mse_variant_loss_grad,
    train_collab,
)
from collate.core import PatchWeights, ScoreKind, ScoreSeries, TimeSeriesWindow
from collate.errors import LengthMismatch, MissingLlmScores


def weights(lam1):
    lam1 = np.asarray(lam1, float)
    return PatchWeights(
        d_intra=np.zeros_like(lam1),
        d_inter=np.zeros_like(lam1),
        lambda1=lam1,
        lambda2=1.0 - lam1,
    )


score_vec = st.lists(st.floats(0, 1), min_size=2, max_size=12)


class TestConditionalNet:
    def test_zero_parameters_emit_half(self):
        net = ConditionalNetParams(rep_dim=3, hidden=4, seed=0)
        net.w1[:] = 0.0
        net.w2[:] = 0.0
        net.b1[:] = 0.0
        net.b2 = 0.0
        assert conditional_forward(net, 0.7, 0.2, np.ones(3)) == pytest.approx(0.5)

    def test_output_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(1)
        net = ConditionalNetParams(rep_dim=2, hidden=8, seed=1)
        out, _ = net.forward(rng.uniform(0, 1, 50), rng.uniform(0, 1, 50),
                             rng.normal(size=(50, 2)) * 100)
        assert out.min() > 0.0 and out.max() < 1.0

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        net = ConditionalNetParams(rep_dim=3, hidden=5, seed=2)
        llm = rng.uniform(0, 1, 7)
        aligned = rng.uniform(0, 1, 7)
        rep = rng.normal(size=(7, 3))
        probe = rng.normal(size=7)
        out, cache = net.forward(llm, aligned, rep)
        grads, dllm, dal, drep = net.backward(probe, cache)
        h = 1e-6

        def value():
            return float(net.forward(llm, aligned, rep)[0] @ probe)

        for name in ("w1", "b1", "w2"):
            arr = getattr(net, name)
            idx = tuple(rng.integers(0, s) for s in arr.shape)
            orig = arr[idx]
            arr[idx] = orig + h
            vp = value()
            arr[idx] = orig - h
            vm = value()
            arr[idx] = orig
            fd = (vp - vm) / (2 * h)
            assert abs(fd - grads[name][idx]) / max(abs(fd), 1e-9) < 1e-4
        # input gradients
        e = np.zeros(7)
        e[3] = h
        fd = (float(net.forward(llm, aligned + e, rep)[0] @ probe)
              - float(net.forward(llm, aligned - e, rep)[0] @ probe)) / (2 * h)
        assert abs(fd - dal[3]) / max(abs(fd), 1e-9) < 1e-4

    def test_roundtrip(self):
        net = ConditionalNetParams(rep_dim=2, hidden=3, seed=5)
        net.set_input_stats(np.arange(4.0), np.arange(1.0, 5.0))
        clone = ConditionalNetParams.from_dict(net.to_dict())
        rng = np.random.default_rng(0)
        args = (rng.uniform(0, 1, 5), rng.uniform(0, 1, 5), rng.normal(size=(5, 2)))
        np.testing.assert_array_equal(net.forward(*args)[0], clone.forward(*args)[0])


class TestCollaborativeLoss:
    def test_two_slot_example(self):
        s = np.array([0.0, 1.0])
        loss = collaborative_loss(s, s, s, weights(np.array([0.5, 0.5])))
        assert loss == pytest.approx(-0.5)

    def test_constant_output_zero_loss(self):
        rng = np.random.default_rng(0)
        s, llm = rng.uniform(0, 1, 9), rng.uniform(0, 1, 9)
        lam = rng.uniform(0, 1, 9)
        loss = collaborative_loss(np.full(9, 0.4), s, llm, weights(lam))
        assert loss == pytest.approx(0.0, abs=1e-15)

    def test_reversal_flips_sign(self):
        rng = np.random.default_rng(1)
        s, llm = rng.uniform(0, 1, 8), rng.uniform(0, 1, 8)
        s_hat = rng.uniform(0, 1, 8)
        lam = weights(rng.uniform(0, 1, 8))
        assert collaborative_loss(1.0 - s_hat, s, llm, lam) == pytest.approx(
            -collaborative_loss(s_hat, s, llm, lam)
        )

    def test_self_alignment_is_negative_spread(self):
        rng = np.random.default_rng(2)
        s = rng.uniform(0, 1, 7)
        lam = weights(np.ones(7))
        loss = collaborative_loss(s, s, np.zeros(7), lam)
        expected = -np.sum((s[:, None] - s[None, :]) ** 2) / 49.0
        assert loss == pytest.approx(expected)
        assert loss <= 0.0
        const = collaborative_loss(np.full(7, 0.3), np.full(7, 0.3), np.zeros(7), lam)
        assert const == pytest.approx(0.0, abs=1e-15)

    @given(score_vec, score_vec, score_vec, score_vec)
    @settings(max_examples=40, deadline=None)
    def test_vectorized_equals_naive(self, s_hat, s, llm, lam):
        n = min(len(s_hat), len(s), len(llm), len(lam))
        if n < 2:
            return
        pw = weights(np.asarray(lam[:n]))
        fast = collaborative_loss(np.asarray(s_hat[:n]), np.asarray(s[:n]),
                                  np.asarray(llm[:n]), pw)
        slow = collaborative_loss_naive(np.asarray(s_hat[:n]), np.asarray(s[:n]),
                                        np.asarray(llm[:n]), pw)
        assert fast == pytest.approx(slow, abs=1e-12)

    @given(score_vec, st.floats(-0.5, 0.5))
    @settings(max_examples=40, deadline=None)
    def test_invariant_to_constant_shift(self, s_hat, c):
        if len(s_hat) < 2:
            return
        rng = np.random.default_rng(0)
        n = len(s_hat)
        s, llm = rng.uniform(0, 1, n), rng.uniform(0, 1, n)
        pw = weights(rng.uniform(0, 1, n))
        a = collaborative_loss(np.asarray(s_hat), s, llm, pw)
        b = collaborative_loss(np.asarray(s_hat) + c, s, llm, pw)
        assert a == pytest.approx(b, abs=1e-10)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        n = 9
        s, llm, s_hat = rng.uniform(0, 1, (3, n))
        pw = weights(rng.uniform(0, 1, n))
        _, grad = collaborative_loss_grad(s_hat, s, llm, pw)
        h = 1e-6
        for i in (0, 4, 8):
            e = np.zeros(n)
            e[i] = h
            fd = (collaborative_loss(s_hat + e, s, llm, pw)
                  - collaborative_loss(s_hat - e, s, llm, pw)) / (2 * h)
            assert abs(fd - grad[i]) / max(abs(fd), 1e-9) < 1e-6

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            collaborative_loss(np.ones(3), np.ones(4), np.ones(3), weights(np.ones(3)))


class TestMseVariant:
    def test_direct_example(self):
        loss = mse_variant_loss(np.array([0.5]), np.array([1.0]), np.array([0.0]),
                                weights(np.array([0.5])))
        assert loss == pytest.approx(0.25)

    def test_zero_at_agreement(self):
        v = np.array([0.3, 0.6, 0.9])
        assert mse_variant_loss(v, v, v, weights(np.full(3, 0.4))) == pytest.approx(0.0)

    def test_weighted_mean_is_stationary(self):
        rng = np.random.default_rng(4)
        n = 6
        s, llm = rng.uniform(0, 1, (2, n))
        lam = rng.uniform(0, 1, n)
        pw = weights(lam)
        s_hat = lam * s + (1 - lam) * llm
        _, grad = mse_variant_loss_grad(s_hat, s, llm, pw)
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)


@pytest.fixture(scope="module")
def small_bench():
    return build_benchmark(BenchmarkConfig(length=2000, seed=3, n_contextual=4,
                                           n_point=4, span_range=(10, 20),
                                           window_len=200))


def small_cfg(seed=0, variant_epochs=25):
    return CollabConfig(colr=0.01, batch_size=200, epochs=variant_epochs, seed=seed,
                        patch_size=2, d=1.0)


class TestTrainCollab:
    def test_deterministic_checkpoints(self, small_bench, tmp_path):
        llm = small_bench.llm_scores_for(small_bench.train_windows)
        outs = []
        for run in range(2):
            pipeline, _ = train_collab(
                small_bench.train_windows, small_bench.scorer, llm,
                LossVariant.COLLABORATIVE, small_cfg(seed=5),
            )
            path = tmp_path / f"p{run}.json"
            pipeline.save(path)
            outs.append(path.read_bytes())
        assert outs[0] == outs[1]

    def test_missing_llm_scores_raise(self, small_bench):
        llm = small_bench.llm_scores_for(small_bench.train_windows)
        llm.pop(small_bench.train_windows[0].window_id())
        with pytest.raises(MissingLlmScores):
            train_collab(small_bench.train_windows, small_bench.scorer, llm,
                         LossVariant.COLLABORATIVE, small_cfg())

    def test_no_alignment_variant_skips_mapping(self, small_bench):
        llm = small_bench.llm_scores_for(small_bench.train_windows)
        pipeline, curves = train_collab(
            small_bench.train_windows, small_bench.scorer, llm,
            LossVariant.NO_ALIGNMENT, small_cfg(),
        )
        assert pipeline.mapping is None
        assert curves.kl_aligned == []
        w = small_bench.test_windows[0]
        out = detect(pipeline, w, small_bench.llm_scores_for([w])[w.window_id()])
        assert len(out) == w.length

    def test_pipeline_roundtrip_bit_exact(self, small_bench, tmp_path):
        llm = small_bench.llm_scores_for(small_bench.train_windows)
        pipeline, _ = train_collab(
            small_bench.train_windows, small_bench.scorer, llm,
            LossVariant.COLLABORATIVE, small_cfg(),
        )
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        pipeline.save(p1)
        FusionPipeline.load(p1).save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_detect_pure_and_bounded(self, small_bench):
        llm = small_bench.llm_scores_for(small_bench.train_windows)
        pipeline, _ = train_collab(
            small_bench.train_windows, small_bench.scorer, llm,
            LossVariant.COLLABORATIVE, small_cfg(),
        )
        w = small_bench.test_windows[0]
        scores = small_bench.llm_scores_for([w])[w.window_id()]
        out1 = detect(pipeline, w, scores)
        out2 = detect(pipeline, w, scores)
        np.testing.assert_array_equal(out1.scores, out2.scores)
        assert out1.kind is ScoreKind.COLLATED
        assert out1.scores.min() > 0.0 and out1.scores.max() < 1.0

    def test_detect_requires_llm_kind_and_length(self, small_bench):
        llm = small_bench.llm_scores_for(small_bench.train_windows)
        pipeline, _ = train_collab(
            small_bench.train_windows, small_bench.scorer, llm,
            LossVariant.COLLABORATIVE, small_cfg(),
        )
        w = small_bench.test_windows[0]
        with pytest.raises(LengthMismatch):
            detect(pipeline, w, ScoreSeries(np.array([0.5]), ScoreKind.LLM))
