import numpy as np
import pytest

from picktrace import errors
from picktrace.annotate import LabelSequence
from picktrace.evaluate import (
    ConfusionCounts,
    confusion,
    estimation_accuracy,
    ground_truth_efficiency,
    mean_scores,
    precision_recall_f1,
)
from picktrace.ingest import NOPICK, PICK


def seq(bits, sid="a_1"):
    return LabelSequence(sid, np.array(bits, dtype=np.int8))


class TestConfusion:
    def test_perfect_all_pick(self):
        gt = seq([PICK] * 10)
        c = confusion(gt, gt)
        assert (c.tp, c.fp, c.fn, c.tn) == (10, 0, 0, 0)

    def test_all_nopick_vs_all_pick(self):
        c = confusion(seq([NOPICK] * 7), seq([PICK] * 7))
        assert (c.tp, c.fp, c.fn, c.tn) == (0, 0, 7, 0)

    def test_length_mismatch(self):
        with pytest.raises(errors.LengthMismatch):
            confusion(seq([PICK]), seq([PICK, PICK]))

    @pytest.mark.parametrize("trial", range(10))
    def test_matches_naive_counter(self, trial):
        rng = np.random.default_rng(trial)
        pred = rng.integers(0, 2, 500).astype(np.int8)
        gt = rng.integers(0, 2, 500).astype(np.int8)
        c = confusion(seq(pred), seq(gt))
        tp = fp = fn = tn = 0
        for p, g in zip(pred, gt):
            if p == PICK and g == PICK:
                tp += 1
            elif p == PICK:
                fp += 1
            elif g == PICK:
                fn += 1
            else:
                tn += 1
        assert (c.tp, c.fp, c.fn, c.tn) == (tp, fp, fn, tn)
        assert c.total == 500

    def test_swapping_pred_gt_swaps_fp_fn(self):
        rng = np.random.default_rng(3)
        pred = seq(rng.integers(0, 2, 200))
        gt = seq(rng.integers(0, 2, 200))
        a = confusion(pred, gt)
        b = confusion(gt, pred)
        assert (a.tp, a.tn) == (b.tp, b.tn)
        assert (a.fp, a.fn) == (b.fn, b.fp)


class TestPrecisionRecallF1:
    def test_hand_case(self):
        s = precision_recall_f1(ConfusionCounts(tp=2, fp=1, fn=1, tn=0))
        assert s.precision == pytest.approx(2 / 3)
        assert s.recall == pytest.approx(2 / 3)
        assert s.f1 == pytest.approx(2 / 3)
        assert not s.degenerate

    def test_degenerate_flagged_not_raised(self):
        s = precision_recall_f1(ConfusionCounts(tp=0, fp=0, fn=0, tn=5))
        assert (s.precision, s.recall, s.f1) == (0.0, 0.0, 0.0)
        assert s.degenerate

    def test_f1_equals_p_when_p_equals_r(self):
        s = precision_recall_f1(ConfusionCounts(tp=30, fp=10, fn=10, tn=0))
        assert s.f1 == pytest.approx(s.precision)

    def test_f1_bounded_by_sides(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            c = ConfusionCounts(*(int(v) for v in rng.integers(1, 100, 4)))
            s = precision_recall_f1(c)
            assert min(s.precision, s.recall) - 1e-12 <= s.f1 <= max(s.precision, s.recall) + 1e-12


class TestEstimationAccuracy:
    def test_exact_estimates(self):
        assert estimation_accuracy([80.0, 70.0], [80.0, 70.0]).mean == 100.0

    def test_hand_case(self):
        assert estimation_accuracy([80.0], [76.0]).mean == pytest.approx(95.0)

    def test_scale_invariance(self):
        gt = np.array([80.0, 60.0, 75.0])
        est = np.array([78.0, 66.0, 71.0])
        a = estimation_accuracy(gt, est)
        b = estimation_accuracy(3.5 * gt, 3.5 * est)
        assert a.mean == pytest.approx(b.mean)
        assert a.sd == pytest.approx(b.sd)

    def test_zero_ground_truth(self):
        with pytest.raises(errors.ZeroGroundTruth):
            estimation_accuracy([0.0], [1.0])

    def test_stats_over_carts(self):
        report = estimation_accuracy([100.0, 100.0], [90.0, 80.0])
        assert report.per_cart_accuracy.tolist() == [90.0, 80.0]
        assert report.median == 85.0
        assert (report.vmin, report.vmax) == (80.0, 90.0)


class TestMeanScores:
    def test_macro_is_plain_average(self):
        folds = [
            (precision_recall_f1(ConfusionCounts(8, 2, 2, 8)), ConfusionCounts(8, 2, 2, 8)),
            (precision_recall_f1(ConfusionCounts(6, 4, 4, 6)), ConfusionCounts(6, 4, 4, 6)),
        ]
        macro = mean_scores(folds)
        assert macro.precision == pytest.approx((0.8 + 0.6) / 2)

    def test_micro_pools_counts(self):
        folds = [
            (precision_recall_f1(ConfusionCounts(8, 2, 2, 8)), ConfusionCounts(8, 2, 2, 8)),
            (precision_recall_f1(ConfusionCounts(0, 10, 10, 0)), ConfusionCounts(0, 10, 10, 0)),
        ]
        micro = mean_scores(folds, micro=True)
        assert micro.precision == pytest.approx(8 / 20)


class TestGroundTruthEfficiency:
    def test_identical_labels_give_100_percent(self, break_day):
        reports, skipped = ground_truth_efficiency(
            break_day.sessions, break_day.break_records, break_day.tray_records
        )
        assert skipped == []
        effs = [r.efficiency for r in reports]
        accuracy = estimation_accuracy(effs, effs)
        assert accuracy.mean == 100.0

    def test_matches_generator_truth(self, break_day):
        reports, _ = ground_truth_efficiency(
            break_day.sessions, break_day.break_records, break_day.tray_records
        )
        truth = {c.session_id: c for c in break_day.truth.carts}
        for r in reports:
            cart = truth[r.session_id]
            # detected break boundaries differ from the schedule by < 30 s,
            # so the pipeline figure sits within a tight band of the truth
            assert r.efficiency == pytest.approx(cart.true_efficiency_pct, abs=1.5)
            assert r.tray_fill_time == pytest.approx(cart.true_tray_fill_min, abs=0.1)

    def test_unlabeled_sessions_rejected(self, break_day):
        import copy

        bad = copy.deepcopy(break_day.sessions[0])
        bad.activity = np.full(len(bad), -1, dtype=np.int8)
        with pytest.raises(ValueError):
            ground_truth_efficiency([bad])

    def test_label_flips_bounded_effect(self, break_day):
        # 1% label noise inside the harvest window moves Eq. 1 by at most
        # (flipped samples) / (harvest samples), which is 1.1 pp here;
        # flips outside the window would move the trim edges instead.
        import copy

        from picktrace.efficiency import trim_to_harvest

        session = break_day.sessions[0]
        reports, _ = ground_truth_efficiency(
            [session], break_day.break_records, break_day.tray_records
        )
        base = reports[0].efficiency

        lo, hi = trim_to_harvest(LabelSequence(session.session_id, session.activity))
        rng = np.random.default_rng(21)
        flipped = session.activity.copy()
        idx = lo + rng.choice(hi - lo + 1, size=len(flipped) // 100, replace=False)
        flipped[idx] = 1 - flipped[idx]
        noisy = copy.deepcopy(session)
        noisy.activity = flipped
        noisy_reports, _ = ground_truth_efficiency(
            [noisy], break_day.break_records, break_day.tray_records
        )
        assert abs(noisy_reports[0].efficiency - base) <= 1.1
