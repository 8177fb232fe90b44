import numpy as np
import pytest
from hypothesis import given, strategies as st

from mlvae import metrics as mt
from mlvae.core import LocalizationResult, Truth, Utterance, ValidationError


def utt(starts, T, mismatch, uid="u"):
    L = len(starts)
    pron = np.arange(L)
    C = np.where(mismatch, (pron + 1) % 10, pron)
    return Utterance(uid, np.zeros((T, 1)), C, Truth(pron, np.array(starts), np.array(mismatch)))


def pred(spans, flags):
    return LocalizationResult(tuple((0, f, s, e) for (s, e), f in zip(spans, flags)))


class TestIou:
    @pytest.mark.parametrize("a, b, expected", [
        ((10, 20), (12, 22), 8 / 12), ((3, 9), (3, 9), 1.0), ((0, 5), (5, 10), 0.0)])
    def test_examples(self, a, b, expected):
        assert mt.iou(a, b) == pytest.approx(expected, abs=1e-15)

    def test_empty(self):
        with pytest.raises(ValidationError):
            mt.iou((3, 3), (0, 4))

    @given(st.integers(0, 50), st.integers(1, 20), st.integers(0, 50), st.integers(1, 20))
    def test_symmetric_bounded(self, s1, d1, s2, d2):
        a, b = (s1, s1 + d1), (s2, s2 + d2)
        assert mt.iou(a, b) == mt.iou(b, a)
        assert 0 <= mt.iou(a, b) <= 1
        assert mt.iou(a, a) == 1


class TestConfusion:
    def test_worked_example(self):
        c = mt.ConfusionCounts(tp=2, fp=1, fn=2, tn=0, tp_ml=0.3 + 0.6)
        assert c.tp_ml == pytest.approx(0.9, abs=1e-15)
        assert c.pr_ml == pytest.approx(0.9 / 3, abs=1e-12)
        assert c.re_ml == pytest.approx(0.9 / 4, abs=1e-12)
        assert c.f1_ml == pytest.approx(2 * 0.3 * 0.225 / (0.3 + 0.225), abs=1e-12)

    def test_zero_over_zero(self):
        c = mt.ConfusionCounts(tn=5)
        assert (c.pr_ml, c.re_ml, c.f1_ml) == (0.0, 0.0, 0.0)

    def test_score_localization(self):
        truth = utt([0, 10, 20, 30], 40, [True, True, False, False])
        p = pred([(0, 3), (3, 20), (20, 30), (30, 40)], [True, True, True, False])
        c = mt.score_localization(p, truth)
        assert (c.tp, c.fp, c.fn, c.tn) == (2, 1, 0, 1)
        assert c.tp_ml == pytest.approx(0.3 + 10 / 17)
        assert c.pr_ml <= c.precision and c.re_ml <= c.recall

    def test_no_predictions(self):
        truth = utt([0, 4], 8, [False, True])
        c = mt.score_localization(pred([(0, 4), (4, 8)], [False, False]), truth)
        assert (c.pr_ml, c.re_ml, c.f1_ml) == (0.0, 0.0, 0.0)

    def test_perfect(self):
        truth = utt([0, 4, 6], 9, [False, True, True])
        c = mt.score_localization(pred([(0, 4), (4, 6), (6, 9)], [False, True, True]), truth)
        assert (c.pr_ml, c.re_ml, c.f1_ml) == (1.0, 1.0, 1.0)

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            mt.score_localization(pred([(0, 8)], [False]), utt([0, 4], 8, [False, True]))

    @given(st.one_of(st.just(0.0), st.floats(1e-6, 1)), st.one_of(st.just(0.0), st.floats(1e-6, 1)))
    def test_f1_symmetric(self, a, b):
        # F1 from (PR, RE) is the harmonic form; build counts that realise both orders
        f = lambda p, r: 0.0 if p + r == 0 else 2 * p * r / (p + r)
        assert f(a, b) == f(b, a)
        assert (f(a, b) == 0) == (a == 0 or b == 0)


class TestAlignment:
    def test_examples(self):
        truth = utt([0, 4], 8, [False, False])
        assert mt.alignment_avg_iou(pred([(0, 4), (4, 8)], [0, 0]), truth) == 1.0
        truth2 = utt([0, 2], 8, [False, False])
        assert mt.alignment_avg_iou(pred([(0, 4), (4, 8)], [0, 0]), truth2) == pytest.approx((0.5 + 4 / 6) / 2)
        truth3 = utt([0, 4, 8], 12, [False] * 3)
        got = mt.alignment_avg_iou(pred([(0, 4), (4, 6), (6, 12)], [0, 0, 0]), truth3)
        assert got == pytest.approx((1.0 + 0.5 + 4 / 6) / 3)

    def test_far_off_alignment(self):
        truth = utt([0, 9], 10, [False, False])
        assert mt.alignment_avg_iou(pred([(0, 1), (1, 10)], [0, 0]), truth) == pytest.approx(1 / 9)

    def test_boundary_hits(self):
        truth = utt([0, 10, 20], 30, [False] * 3)
        assert mt.boundary_hits([0, 12, 23], truth) == (1, 2)


class TestAggregate:
    def _reports(self):
        t1 = utt([0, 4, 8], 12, [True, False, True], "a")
        t2 = utt([0, 5], 10, [False, True], "b")
        preds = {"a": pred([(0, 4), (4, 8), (8, 12)], [True, True, False]),
                 "b": pred([(0, 6), (6, 10)], [False, True])}
        return mt.evaluate(preds, [t1, t2]), preds, [t1, t2]

    def test_single_equals_utterance(self):
        reports, _, _ = self._reports()
        agg = mt.aggregate(reports[:1])
        assert agg["F1_ML"] == reports[0].counts.f1_ml

    def test_micro_average_duplication(self):
        reports, _, _ = self._reports()
        a, b = mt.aggregate(reports), mt.aggregate(reports + reports)
        for k in ("PR_ML", "RE_ML", "F1_ML", "alignment_avg_iou"):
            assert a[k] == pytest.approx(b[k], abs=1e-15)

    def test_mismatch_free(self):
        t = utt([0, 4], 8, [False, False])
        agg = mt.aggregate(mt.evaluate({"u": pred([(0, 4), (4, 8)], [False, False])}, [t]))
        assert (agg["PR_ML"], agg["RE_ML"], agg["F1_ML"]) == (0, 0, 0) and agg["tn"] == 2

    def test_empty(self):
        with pytest.raises(ValidationError):
            mt.aggregate([])

    def test_report_schema(self):
        reports, _, _ = self._reports()
        doc = mt.build_report(reports, {"model": "x"})
        assert mt.validate_report(doc)["corpus"]["num_utterances"] == 2
        assert '"schema": "mlvae-report"' in mt.dumps_report(doc)
        with pytest.raises(ValidationError):
            mt.validate_report({"schema": "other"})

    def test_missing_prediction(self):
        with pytest.raises(ValidationError):
            mt.evaluate({}, [utt([0], 3, [False])])
