import numpy as np
import pytest

from kvevict import (
    SaliencyVector,
    ScoreAccumulator,
    Scorer,
    accumulate,
    aggregate_group,
    gen_random,
    reconstruct_logits,
    run_attention,
    score_attn_l1,
    score_joint,
    score_joint_parts,
    score_key,
    score_value,
)
from kvevict.errors import AccumulatorError, AggregationError, WindowError
from kvevict.oracle import (
    PruneKind,
    PruneMode,
    PruneSemantics,
    exact_eviction_error,
    taylor_residual,
)

import reference


def _single_token_instance(value):
    return run_attention([[1.0, 0.0]], [[1.0, 0.0]], [list(value)], scale=1.0)


class TestScoreValue:
    def test_single_token(self):
        inst = _single_token_instance([3.0, 4.0])
        assert np.allclose(score_value(inst, 1).scores, [25.0])

    def test_zero_value_row_scores_zero(self):
        inst = run_attention(
            np.eye(3), np.eye(3), [[0.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 2.0, 1.0]]
        )
        assert score_value(inst, 1).scores[0] == 0.0

    def test_matches_exact_oracle(self):
        inst = gen_random(12, 4, 6, 5)
        mode = PruneMode(PruneKind.VALUE, PruneSemantics.ZERO_ROW)
        scores = score_value(inst, 1).scores
        for p in range(inst.s):
            exact = exact_eviction_error(inst, p, mode, 1)
            assert abs(scores[p] - exact) <= 1e-9 * max(abs(exact), 1e-30)

    def test_window_out_of_range(self):
        inst = gen_random(4, 2, 4, 0)
        with pytest.raises(WindowError):
            score_value(inst, 5)
        with pytest.raises(WindowError):
            score_value(inst, 0)


class TestScoreKey:
    def test_single_token_is_zero(self):
        inst = _single_token_instance([2.0, 7.0])
        assert np.allclose(score_key(inst, 1).scores, [0.0])

    def test_identical_values_score_zero(self):
        g = np.random.Generator(np.random.Philox(4))
        keys = g.standard_normal((5, 3))
        values = np.tile(g.standard_normal(3), (5, 1))
        inst = run_attention(g.standard_normal((5, 3)), keys, values)
        assert np.allclose(score_key(inst, 1).scores, 0.0, atol=1e-18)

    def test_finite_difference_ratio_stable(self):
        inst = gen_random(10, 4, 10, 9)
        mode = PruneMode(PruneKind.KEY, PruneSemantics.ZERO_ROW)
        pairs = dict(taylor_residual(inst, 3, mode, 1, [1e-3, 1e-4]))
        assert abs(pairs[1e-3] / pairs[1e-4] - 1.0) < 0.05


class TestScoreJoint:
    def test_identical_values_reduce_to_value_score(self):
        # v_p == o_i for every windowed row when all value rows are equal
        g = np.random.Generator(np.random.Philox(8))
        keys = g.standard_normal((4, 3))
        values = np.tile(g.standard_normal(3), (4, 1))
        inst = run_attention(g.standard_normal((4, 3)), keys, values)
        joint = score_joint(inst, 1).scores
        value = score_value(inst, 1).scores
        assert np.allclose(joint, value, atol=1e-15)

    def test_single_token_equals_value(self):
        inst = _single_token_instance([1.0, -2.0])
        assert np.allclose(score_joint(inst, 1).scores, score_value(inst, 1).scores)

    def test_finite_difference_ratio_stable(self):
        inst = gen_random(10, 4, 10, 13)
        mode = PruneMode(PruneKind.JOINT, PruneSemantics.ZERO_ROW)
        pairs = dict(taylor_residual(inst, 2, mode, 1, [1e-3, 1e-4]))
        assert abs(pairs[1e-3] / pairs[1e-4] - 1.0) < 0.05

    def test_decomposition_exact(self):
        inst = gen_random(9, 3, 9, 17)
        parts = score_joint_parts(inst, 2)
        total = score_joint(inst, 2).scores
        assert np.max(np.abs(parts.total - total)) <= 1e-12
        assert np.array_equal(parts.value, score_value(inst, 2).scores)
        assert np.array_equal(parts.key, score_key(inst, 2).scores)

    def test_clamp_flag_floors_at_zero(self):
        # the total is a sum of per-row squared norms, so genuine negatives
        # are impossible; only cancellation noise can dip below zero, and the
        # flag floors exactly that
        for seed in range(20):
            inst = gen_random(8, 4, 8, 9000 + seed)
            raw = score_joint(inst, 1).scores
            clamped = score_joint(inst, 1, clamp_negative=True).scores
            assert np.all(clamped >= 0.0)
            assert np.array_equal(clamped, np.maximum(raw, 0.0))


class TestScoreAttnL1:
    def test_last_row_only_is_final_attention(self):
        inst = gen_random(6, 3, 6, 2)
        got = score_attn_l1(inst, inst.q_len).scores
        assert np.allclose(got, inst.weights[-1], atol=1e-15)

    def test_uniform_two_rows(self):
        weights = np.full((2, 4), 0.25)
        inst = run_attention(np.zeros((2, 4)), np.zeros((4, 4)), np.zeros((4, 4)), causal=False)
        assert np.allclose(inst.weights, weights)
        assert np.allclose(score_attn_l1(inst, 1).scores, [0.5, 0.5, 0.5, 0.5])

    def test_matches_column_sum_oracle(self):
        inst = gen_random(10, 5, 7, 31)
        got = score_attn_l1(inst, 1).scores
        assert np.allclose(got, reference.column_l1_loops(inst.weights, 1), atol=1e-12)


class TestReductionIdentities:
    def test_h2o_tova_snapkv(self):
        for seed in range(10):
            inst = gen_random(12, 4, 12, 200 + seed)
            assert np.allclose(
                score_attn_l1(inst, 1).scores,
                reference.h2o_score_loops(inst.weights),
                atol=1e-12,
            )
            assert np.allclose(
                score_attn_l1(inst, inst.q_len).scores,
                reference.tova_score_loops(inst.weights),
                atol=1e-12,
            )
            window = 4
            assert np.allclose(
                score_attn_l1(inst, inst.q_len - window + 1).scores,
                reference.snapkv_prepool_loops(inst.weights, window),
                atol=1e-12,
            )


class TestWindowMonotonicity:
    @pytest.mark.parametrize("fn", [score_value, score_key, score_attn_l1])
    def test_larger_window_never_decreases(self, fn):
        inst = gen_random(10, 4, 8, 77)
        previous = fn(inst, inst.q_len).scores
        for w in range(inst.q_len - 1, 0, -1):
            wider = fn(inst, w).scores
            assert np.all(wider >= previous - 1e-15)
            previous = wider


class TestFirstOrderVanishing:
    @pytest.mark.parametrize("kind", [PruneKind.VALUE, PruneKind.KEY, PruneKind.JOINT])
    def test_loss_over_eps_vanishes(self, kind):
        inst = gen_random(8, 4, 8, 55)
        closed = {
            PruneKind.VALUE: score_value,
            PruneKind.KEY: score_key,
            PruneKind.JOINT: score_joint,
        }[kind](inst, 1).scores[2]
        pairs = taylor_residual(inst, 2, PruneMode(kind, PruneSemantics.ZERO_ROW), 1,
                                [1e-2, 1e-3, 1e-4])
        loss_over_eps = [ratio * eps * closed for eps, ratio in pairs]
        assert loss_over_eps[0] > loss_over_eps[1] > loss_over_eps[2]
        assert loss_over_eps[-1] < 1e-3 * max(closed, 1.0)


class TestAggregateGroup:
    def test_identity(self):
        sal = SaliencyVector([1.0, 2.0], Scorer.VALUE, 1)
        out = aggregate_group([sal], 1)
        assert np.array_equal(out.scores, sal.scores)

    def test_two_identical_vectors_double(self):
        sal = SaliencyVector([1.0, 2.0], Scorer.KEY, 1)
        out = aggregate_group([sal, sal], 2)
        assert np.array_equal(out.scores, [2.0, 4.0])

    def test_matches_loop_sum_oracle(self):
        g = np.random.Generator(np.random.Philox(2))
        vecs = [SaliencyVector(g.standard_normal(6), Scorer.ATTN_L1, 2) for _ in range(3)]
        out = aggregate_group(vecs, 3)
        expect = reference.elementwise_sum_loops([v.scores for v in vecs])
        assert np.allclose(out.scores, expect, atol=1e-12)

    def test_heterogeneous_inputs_rejected(self):
        a = SaliencyVector([1.0, 2.0], Scorer.VALUE, 1)
        b = SaliencyVector([1.0, 2.0], Scorer.KEY, 1)
        with pytest.raises(AggregationError):
            aggregate_group([a, b], 2)
        with pytest.raises(AggregationError):
            aggregate_group([a], 2)


class TestAccumulate:
    def test_first_step_copies_fresh(self):
        acc = ScoreAccumulator()
        for pos in (0, 1, 2):
            acc.track(pos)
        fresh = SaliencyVector([1.0, 2.0, 3.0], Scorer.VALUE, 1)
        accumulate(acc, fresh, [0, 1, 2])
        assert np.array_equal(acc.running, [1.0, 2.0, 3.0])
        assert acc.steps_seen == 1

    def test_zero_fresh_keeps_running(self):
        acc = ScoreAccumulator()
        acc.track(0)
        accumulate(acc, SaliencyVector([5.0], Scorer.VALUE, 1), [0])
        for _ in range(2):
            accumulate(acc, SaliencyVector([0.0], Scorer.VALUE, 1), [0])
        assert np.array_equal(acc.running, [5.0])

    def test_dropped_positions_removed(self):
        acc = ScoreAccumulator()
        for pos in (0, 1):
            acc.track(pos)
        accumulate(acc, SaliencyVector([1.0, 2.0], Scorer.VALUE, 1), [1])
        assert acc.positions == (1,)
        assert np.array_equal(acc.running, [2.0])

    def test_position_mismatch_rejected(self):
        acc = ScoreAccumulator()
        acc.track(0)
        with pytest.raises(AccumulatorError):
            accumulate(acc, SaliencyVector([1.0, 2.0], Scorer.VALUE, 1), [0])
        with pytest.raises(AccumulatorError):
            accumulate(acc, SaliencyVector([1.0], Scorer.VALUE, 1), [7])

    def test_replay_oracle_five_steps(self):
        g = np.random.Generator(np.random.Philox(4))
        steps = [g.standard_normal(3) for _ in range(5)]
        kept_plan = [[0, 1, 2], [0, 2], [0, 2], [2], [2]]
        acc = ScoreAccumulator()
        for pos in (0, 1, 2):
            acc.track(pos)
        live = [0, 1, 2]
        expected = {p: 0.0 for p in live}
        for fresh_vals, kept in zip(steps, kept_plan):
            fresh = SaliencyVector(fresh_vals[: len(live)], Scorer.KEY, 1)
            for p, x in zip(live, fresh.scores):
                expected[p] += float(x)
            accumulate(acc, fresh, kept)
            live = [p for p in live if p in kept]
            expected = {p: expected[p] for p in live}
        assert acc.positions == tuple(live)
        assert np.allclose(acc.running, [expected[p] for p in live], atol=1e-15)


class TestReconstructLogits:
    def test_max_unmasked_is_zero_and_masked_stay_masked(self):
        inst = gen_random(6, 3, 6, 44)
        rebuilt = reconstruct_logits(inst.weights)
        mask = inst.masked()
        assert np.all(np.isneginf(rebuilt[mask]))
        finite_max = np.max(np.where(mask, -np.inf, rebuilt), axis=1)
        assert np.allclose(finite_max, 0.0, atol=1e-12)

    def test_softmax_of_reconstruction_recovers_weights(self):
        from kvevict import softmax_rows

        inst = gen_random(5, 3, 5, 45)
        rebuilt = reconstruct_logits(inst.weights)
        assert np.allclose(softmax_rows(rebuilt), inst.weights, atol=1e-12)
