import math

import numpy as np
import pytest

from planrank import ltr, nn, plan_ir
from planrank.errors import EmptyList, NonPositiveLatency

from conftest import explain_doc, explain_node

LN2 = 0.6931471805599453  # ln 2
SOFTPLUS_NEG5 = 0.006715348489118069  # ln(1 + e^-5)


class TestLabelMap:
    def test_reciprocal(self):
        assert ltr.label_map(2.0) == 0.5
        assert ltr.label_map(1.0) == 1.0

    def test_order_reversal(self):
        assert ltr.label_map(3.0) > ltr.label_map(5.0)

    def test_nonpositive_rejected(self):
        with pytest.raises(NonPositiveLatency):
            ltr.label_map(0.0)
        with pytest.raises(NonPositiveLatency):
            ltr.label_map(-1.0)


def _plan(op, relation=None):
    return plan_ir.parse_explain(explain_doc(explain_node(op, relation=relation)))


class TestDedup:
    def test_duplicates_average(self):
        plan = _plan("Seq Scan", "a")
        entries = ltr.dedup_plans([(plan, 1.0), (plan, 2.0), (plan, 3.0)])
        assert len(entries) == 1
        assert entries[0].latency == 2.0
        assert entries[0].source_indices == [0, 1, 2]

    def test_all_distinct_unchanged(self):
        plans = [_plan("Seq Scan", "a"), _plan("Seq Scan", "b"), _plan("Index Scan", "c")]
        entries = ltr.dedup_plans([(p, float(i + 1)) for i, p in enumerate(plans)])
        assert len(entries) == 3
        assert [e.latency for e in entries] == [1.0, 2.0, 3.0]

    def test_48_records_7_uniques(self, rng):
        shapes = [_plan("Seq Scan", f"rel_{k}") for k in range(7)]
        records = []
        for i in range(48):
            k = int(rng.integers(0, 7))
            records.append((shapes[k], float(rng.uniform(1, 100))))
        # make sure every shape appears at least once
        for k in range(7):
            records[k] = (shapes[k], records[k][1])
        entries = ltr.dedup_plans(records)
        # grouping oracle: mean latency per structural key
        oracle = {}
        for plan, lat in records:
            oracle.setdefault(plan.root.relation_name, []).append(lat)
        assert len(entries) == len(oracle) == 7
        for e in entries:
            np.testing.assert_allclose(
                e.latency, np.mean(oracle[e.plan.root.relation_name]), rtol=1e-12
            )


class TestRankedList:
    def test_orders_best_first(self):
        rl = ltr.make_ranked_list("q", ["a", "b", "c"], [5.0, 1.0, 3.0])
        assert rl.refs() == ["b", "c", "a"]
        assert rl.labels() == [1.0, 1.0 / 3.0, 0.2]

    def test_ties_ordered_by_tiebreak(self):
        rl = ltr.make_ranked_list("q", ["x", "y"], [2.0, 2.0], tiebreak=[1, 0])
        assert rl.refs() == ["y", "x"]


class TestFullBreaking:
    def test_three_item_worked_example(self):
        rl = ltr.make_ranked_list("q", ["t1", "t2", "t3"], [1.0, 2.0, 3.0])
        pairs = {(p.winner, p.loser) for p in ltr.full_breaking(rl)}
        assert pairs == {("t1", "t2"), ("t1", "t3"), ("t2", "t3")}

    def test_single_item_empty(self):
        rl = ltr.make_ranked_list("q", ["t1"], [1.0])
        assert ltr.full_breaking(rl) == []

    def test_four_items_six_pairs(self):
        rl = ltr.make_ranked_list("q", list("abcd"), [1.0, 2.0, 3.0, 4.0])
        assert len(ltr.full_breaking(rl)) == 6

    def test_ties_emit_no_pair(self):
        rl = ltr.make_ranked_list("q", ["a", "b", "c"], [1.0, 2.0, 2.0])
        pairs = {(p.winner, p.loser) for p in ltr.full_breaking(rl)}
        assert pairs == {("a", "b"), ("a", "c")}

    def test_count_and_transitive_closure(self, rng):
        # brute-force enumerator oracle over random rankings up to n = 12
        for trial in range(30):
            n = int(rng.integers(1, 13))
            latencies = rng.permutation(n) + 1.0
            refs = list(range(n))
            rl = ltr.make_ranked_list("q", refs, list(latencies))
            pairs = ltr.full_breaking(rl)
            assert len(pairs) == n * (n - 1) // 2

            expected_order = [r for r, _ in sorted(zip(refs, latencies), key=lambda t: t[1])]
            expected_pairs = {
                (expected_order[i], expected_order[j])
                for i in range(n)
                for j in range(i + 1, n)
            }
            assert {(p.winner, p.loser) for p in pairs} == expected_pairs

            # transitive closure of the emitted pairs recovers the total order
            beats = {r: set() for r in refs}
            for p in pairs:
                beats[p.winner].add(p.loser)
            changed = True
            while changed:
                changed = False
                for w in refs:
                    extra = set()
                    for l in beats[w]:
                        extra |= beats[l] - beats[w]
                    if extra:
                        beats[w] |= extra
                        changed = True
            for i, r in enumerate(expected_order):
                assert beats[r] == set(expected_order[i + 1 :])


class TestPairProb:
    def test_equal_scores_half(self):
        assert ltr.pl_pair_prob(3.7, 3.7) == 0.5

    def test_large_gap_saturates(self):
        assert ltr.pl_pair_prob(20.0, 0.0) > 1.0 - 1e-8
        assert ltr.pl_pair_prob(0.0, 20.0) < 1e-8

    def test_complement_sums_to_one(self, rng):
        for _ in range(100):
            a, b = rng.uniform(-50, 50, size=2)
            np.testing.assert_allclose(
                ltr.pl_pair_prob(a, b) + ltr.pl_pair_prob(b, a), 1.0, atol=1e-12
            )

    def test_extreme_scores_do_not_overflow(self):
        assert ltr.pl_pair_prob(1e4, -1e4) == 1.0
        assert ltr.pl_pair_prob(-1e4, 1e4) == 0.0


class TestPairwiseLoss:
    def test_equal_scores_ln2(self):
        loss, _ = ltr.pairwise_loss_and_grad([(0, 1)], np.array([1.0, 1.0]))
        assert abs(loss - LN2) < 1e-12

    def test_gap_five(self):
        loss, _ = ltr.pairwise_loss_and_grad([(0, 1)], np.array([5.0, 0.0]))
        assert abs(loss - SOFTPLUS_NEG5) < 1e-12

    def test_gradient_at_zero_gap(self):
        _, grad = ltr.pairwise_loss_and_grad([(0, 1)], np.array([0.0, 0.0]))
        np.testing.assert_allclose(grad, [-0.5, 0.5], atol=1e-15)

    def test_no_pairs(self):
        loss, grad = ltr.pairwise_loss_and_grad([], np.array([1.0, 2.0]))
        assert loss == 0.0
        np.testing.assert_array_equal(grad, [0.0, 0.0])

    def test_accepts_pair_samples(self):
        pair = ltr.PairSample("q", 1, 0)
        loss, grad = ltr.pairwise_loss_and_grad([pair], np.array([0.0, 0.0]))
        assert abs(loss - LN2) < 1e-12
        np.testing.assert_allclose(grad, [0.5, -0.5], atol=1e-15)

    def test_strictly_decreasing_in_delta(self):
        # sign property: d loss / d delta < 0 everywhere on [-10, 10]
        grid = np.linspace(-10.0, 10.0, 2001)
        losses = [
            ltr.pairwise_loss_and_grad([(0, 1)], np.array([d, 0.0]))[0] for d in grid
        ]
        diffs = np.diff(losses)
        assert np.all(diffs < 0.0)

    def test_translation_invariance(self, rng):
        scores = rng.standard_normal(6)
        pairs = [(0, 3), (1, 2), (4, 5), (0, 5)]
        base, _ = ltr.pairwise_loss_and_grad(pairs, scores)
        for shift in (-100.0, -1.0, 0.5, 42.0):
            shifted, _ = ltr.pairwise_loss_and_grad(pairs, scores + shift)
            assert abs(shifted - base) < 1e-9

    def test_gradcheck(self, rng):
        scores = rng.standard_normal(5)
        pairs = [(0, 1), (2, 3), (0, 4), (3, 1)]

        def loss_and_grad(params):
            loss, grad = ltr.pairwise_loss_and_grad(pairs, params["s"])
            return loss, {"s": grad}

        assert nn.finite_diff_check(loss_and_grad, {"s": scores}) < 1e-6


class TestListwiseLoss:
    def test_single_item_zero(self):
        loss, grad = ltr.listwise_loss_and_grad(np.array([3.0]))
        assert loss == 0.0
        np.testing.assert_allclose(grad, [0.0], atol=1e-15)

    def test_two_items_equal_pairwise(self, rng):
        for _ in range(20):
            s = rng.standard_normal(2)
            list_loss, list_grad = ltr.listwise_loss_and_grad(s)
            pair_loss, pair_grad = ltr.pairwise_loss_and_grad([(0, 1)], s)
            assert abs(list_loss - pair_loss) < 1e-12
            np.testing.assert_allclose(list_grad, pair_grad, atol=1e-12)

    def test_equal_scores_log_factorial(self):
        for n in range(1, 21):
            loss, _ = ltr.listwise_loss_and_grad(np.full(n, 1.3))
            assert abs(loss - math.lgamma(n + 1)) < 1e-9

    def test_empty_rejected(self):
        with pytest.raises(EmptyList):
            ltr.listwise_loss_and_grad(np.array([]))

    def test_translation_invariance(self, rng):
        scores = rng.standard_normal(7)
        base, _ = ltr.listwise_loss_and_grad(scores)
        for shift in (-50.0, 0.25, 19.0):
            shifted, _ = ltr.listwise_loss_and_grad(scores + shift)
            assert abs(shifted - base) < 1e-9

    def test_widening_adjacent_gap_decreases_loss(self, rng):
        # sign property: raising every score above gap i strictly helps
        for _ in range(100):
            n = int(rng.integers(2, 11))
            scores = rng.standard_normal(n) * 2.0
            base, _ = ltr.listwise_loss_and_grad(scores)
            for i in range(n - 1):
                for eps in (1e-3, 0.1, 1.0):
                    bumped = scores.copy()
                    bumped[: i + 1] += eps
                    widened, _ = ltr.listwise_loss_and_grad(bumped)
                    assert widened < base

    def test_gradcheck(self, rng):
        for _ in range(10):
            n = int(rng.integers(1, 9))
            scores = rng.standard_normal(n)

            def loss_and_grad(params):
                loss, grad = ltr.listwise_loss_and_grad(params["s"])
                return loss, {"s": grad}

            assert nn.finite_diff_check(loss_and_grad, {"s": scores}) < 1e-6

    def test_extreme_scores_stable(self):
        loss, grad = ltr.listwise_loss_and_grad(np.array([1000.0, 0.0, -1000.0]))
        assert np.isfinite(loss)
        assert np.all(np.isfinite(grad))


class TestRegressionLoss:
    def test_perfect_fit(self, rng):
        y = rng.standard_normal(5)
        loss, grad = ltr.regression_loss_and_grad(y, y.copy())
        assert loss == 0.0
        np.testing.assert_array_equal(grad, np.zeros(5))

    def test_single_item(self):
        loss, grad = ltr.regression_loss_and_grad(np.array([1.0]), np.array([0.0]))
        assert loss == 1.0
        np.testing.assert_allclose(grad, [-2.0])

    def test_gradcheck(self, rng):
        y = rng.standard_normal(6)

        def loss_and_grad(params):
            loss, grad = ltr.regression_loss_and_grad(y, params["s"])
            return loss, {"s": grad}

        assert nn.finite_diff_check(loss_and_grad, {"s": rng.standard_normal(6)}) < 1e-6

    def test_target_normalization(self):
        lo, hi = ltr.fit_regression_range([1.0, math.e - 1.0])
        assert lo == math.log1p(1.0)
        np.testing.assert_allclose(hi, 1.0)
        assert ltr.regression_target(1.0, lo, hi) == 0.0
        np.testing.assert_allclose(ltr.regression_target(math.e - 1.0, lo, hi), 1.0)
        assert ltr.regression_target(100.0, lo, hi) == 1.0  # clamped
        assert ltr.regression_target(5.0, 2.0, 2.0) == 0.0  # degenerate range
