import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import f1_score, roc_auc_score

from dachtic.metrics import (MetricsReport, PredictionRow, PredictionSet, auc_macro, binary_auroc,
                             cfi, confusion_accuracy_f1, css, domain_gap, evaluate, parse_report,
                             percent)


def onehot_rows(labels, preds, C=None, perturbed=None):
    C = C or max(max(labels), max(preds)) + 1
    rows = []
    for i, (y, p) in enumerate(zip(labels, preds)):
        probs = np.full(C, 0.1 / (C - 1))
        probs[p] = 0.9
        pp = None
        if perturbed is not None:
            pp = np.full(C, 0.1 / (C - 1))
            pp[perturbed[i]] = 0.9
        rows.append(PredictionRow(f"s{i}", y, probs, probs_perturbed=pp))
    return PredictionSet(rows)


class TestClassification:
    def test_all_correct(self):
        _, acc, _, macro = confusion_accuracy_f1(onehot_rows([0, 1, 2], [0, 1, 2]))
        assert acc == 1.0 and macro == 1.0

    def test_all_wrong(self):
        _, acc, _, macro = confusion_accuracy_f1(onehot_rows([0, 1], [1, 0]))
        assert acc == 0.0 and macro == 0.0

    def test_hand_example(self):
        confusion, acc, f1, macro = confusion_accuracy_f1(onehot_rows([0, 0, 1], [0, 1, 1]))
        assert acc == pytest.approx(2 / 3)
        np.testing.assert_allclose(f1, [2 / 3, 2 / 3])
        assert macro == pytest.approx(2 / 3)
        np.testing.assert_array_equal(confusion, [[1, 1], [0, 1]])

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40))
    def test_against_sklearn(self, pairs):
        y, p = zip(*pairs)
        confusion, acc, f1, macro = confusion_accuracy_f1(onehot_rows(y, p, C=4))
        assert confusion.sum() == len(y)
        assert acc == pytest.approx(np.mean(np.array(y) == np.array(p)))
        ref = f1_score(y, p, labels=range(4), average=None, zero_division=0)
        np.testing.assert_allclose(f1, ref, atol=1e-12)
        assert macro == pytest.approx(ref.mean())

    def test_not_simplex(self):
        with pytest.raises(ValueError):
            PredictionSet([PredictionRow("x", 0, np.array([0.5, 0.6]))])


class TestAuroc:
    def test_separating(self):
        assert binary_auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_ties(self):
        assert binary_auroc([0.5] * 4, [0, 1, 0, 1]) == 0.5

    def test_inverted(self):
        assert binary_auroc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=50))
    def test_against_sklearn(self, pairs):
        scores, labels = zip(*pairs)
        if all(labels) or not any(labels):
            return
        assert binary_auroc(scores, labels) == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)

    def test_macro_skips_absent_class(self):
        preds = onehot_rows([0, 1, 0, 1], [0, 1, 0, 1], C=3)
        with pytest.warns(UserWarning, match="class 2"):
            assert auc_macro(preds) == 1.0


def salience_rows(relevance, salience):
    return PredictionSet([PredictionRow(f"s{i}", 0, np.array([1.0]), relevance=np.asarray(r, float),
                                        salience=np.asarray(a))
                          for i, (r, a) in enumerate(zip(relevance, salience))])


class TestCounterfactual:
    def test_css_identical(self):
        assert css(onehot_rows([0, 1], [0, 1], perturbed=[0, 1])) == 1.0

    def test_css_all_flip(self):
        assert css(onehot_rows([0, 1], [0, 1], perturbed=[1, 0])) == 0.0

    def test_css_half(self):
        assert css(onehot_rows([0, 1, 0, 1], [0, 1, 0, 1], perturbed=[0, 0, 0, 0])) == 0.5

    def test_css_requires_perturbed(self):
        with pytest.raises(ValueError):
            css(onehot_rows([0], [0], C=2))

    def test_cfi_ranked(self):
        assert cfi(salience_rows([[0.9, 0.1], [0.8, 0.3]], [[1, 0], [1, 0]])) == 1.0

    def test_cfi_constant(self):
        assert cfi(salience_rows([[0.4, 0.4, 0.4]], [[1, 0, 1]])) == 0.5

    def test_cfi_inverted(self):
        assert cfi(salience_rows([[0.1, 0.9]], [[1, 0]])) == 0.0

    def test_cfi_pools_tokens(self):
        # one sample alone would be perfect; pooling across samples exposes the mis-ranking
        value = cfi(salience_rows([[0.9, 0.8], [0.3, 0.2]], [[1, 0], [1, 0]]))
        assert value == pytest.approx(roc_auc_score([1, 0, 1, 0], [0.9, 0.8, 0.3, 0.2]))

    def test_cfi_no_contrast(self):
        with pytest.raises(ValueError, match="no contrast"):
            cfi(salience_rows([[0.2, 0.3]], [[1, 1]]))


class TestDomainGap:
    def test_reported_value(self):
        assert domain_gap(97.6, 95.2) == 2.4

    def test_equal(self):
        assert domain_gap(88.8, 88.8) == 0.0

    def test_round(self):
        assert domain_gap(90, 80) == 10.0

    def test_absolute(self):
        assert domain_gap(80, 90) == 10.0

    def test_range(self):
        with pytest.raises(ValueError):
            domain_gap(101.0, 90.0)


def test_percent_rounds_half_up():
    assert percent(0.9765) == "97.7"
    assert percent(0.5) == "50.0"


class TestReport:
    def full_set(self):
        rows = []
        r = np.random.default_rng(0)
        for i in range(10):
            probs = r.dirichlet(np.ones(3))
            rows.append(PredictionRow(f"s{i}", i % 3, probs, d=i % 2, seen_domain=i % 2 == 0,
                                      relevance=r.random(4), salience=np.array([1, 0, 1, 0]),
                                      probs_perturbed=r.dirichlet(np.ones(3))))
        return PredictionSet(rows)

    def test_evaluate_fills_fields(self):
        rep = evaluate(self.full_set())
        assert rep.n_samples == 10
        for value in (rep.auc, rep.css, rep.cfi, rep.domain_gap):
            assert value is not None

    def test_gap_omitted_without_unseen(self):
        rows = self.full_set().subset(True)
        rep = evaluate(rows)
        assert rep.domain_gap is None
        assert any("domain_gap" in n for n in rep.notes)

    def test_text_round_trip(self):
        rep = evaluate(self.full_set())
        parsed = parse_report(rep.to_text())
        assert parsed["version"] == "dachtic-report/1"
        assert float(parsed["accuracy"]) == rep.accuracy
        assert parsed["domain_probe_accuracy"] == "NA"

    def test_confusion_csv(self):
        rep = MetricsReport(1.0, 1.0, None, np.array([[2, 0], [1, 3]]), np.ones(2))
        assert rep.confusion_csv(["a", "b"]) == "true\\pred,a,b\na,2,0\nb,1,3\n"
