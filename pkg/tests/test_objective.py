import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dachtic import objective as obj
from dachtic.objective import LossWeights, compose, total_loss
from dachtic.tensor import Tensor

PAPER_WEIGHTS = LossWeights(1.0, 0.3, 0.2, 0.2, intensity=0.0)


class TestCrossEntropy:
    @pytest.mark.parametrize("probs,y,expected", [
        ([0.0, 1.0, 0.0], 1, 0.0),
        ([0.5, 0.5], 0, math.log(2)),
        ([0.2] * 5, 3, math.log(5)),
    ])
    def test_class_examples(self, probs, y, expected):
        assert obj.class_loss(probs, y).item() == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("probs,d,expected", [
        ([1.0, 0.0], 0, 0.0),
        ([1 / 3] * 3, 2, math.log(3)),
        ([0.25, 0.75], 0, math.log(4)),
    ])
    def test_domain_examples(self, probs, d, expected):
        assert obj.domain_loss(probs, d).item() == pytest.approx(expected, abs=1e-12)

    def test_zero_probability_is_floored(self):
        assert obj.class_loss([1.0, 0.0], 1).item() == pytest.approx(-math.log(1e-12))

    def test_label_range(self):
        with pytest.raises(ValueError):
            obj.class_loss([0.5, 0.5], 2)

    def test_batch_mean(self):
        loss = obj.class_loss(np.array([[0.5, 0.5], [1.0, 0.0]]), [0, 0]).item()
        assert loss == pytest.approx(math.log(2) / 2)


class TestPerturb:
    @pytest.mark.parametrize("a,b,expected", [
        ([0.3, 0.7], [0.3, 0.7], 0.0),
        ([1.0, 0.0], [0.0, 1.0], 2.0),
        ([0.6, 0.4], [0.5, 0.5], 0.02),
    ])
    def test_examples(self, a, b, expected):
        assert obj.perturb_loss(a, b).item() == pytest.approx(expected, abs=1e-15)

    @given(st.lists(st.floats(0, 1), min_size=2, max_size=6), st.integers(0, 1000))
    def test_symmetric_bounded(self, raw, seed):
        a = np.asarray(raw) + 1e-3
        a = a / a.sum()
        b = np.random.default_rng(seed).dirichlet(np.ones(len(a)))
        ab, ba = obj.perturb_loss(a, b).item(), obj.perturb_loss(b, a).item()
        assert ab == ba
        assert 0.0 <= ab <= 2.0 + 1e-12


class TestCausal:
    def test_exact_match(self):
        assert obj.causal_loss([1.0, 0.0, 1.0], [1, 0, 1]).item() <= 1e-11

    def test_half(self):
        assert obj.causal_loss([0.5] * 4, [1, 0, 0, 1]).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_hand_value(self):
        value = obj.causal_loss([0.9, 0.2], [1, 0]).item()
        assert value == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2, abs=1e-15)
        assert round(value, 6) == 0.164252

    def test_non_binary(self):
        with pytest.raises(ValueError):
            obj.causal_loss([0.5, 0.5], [1, 0.5])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            obj.causal_loss([0.5, 0.5], [1, 0, 1])


class TestTotal:
    def test_unit_weights_all_ones(self):
        assert total_loss(1.0, 1.0, 1.0, 1.0, PAPER_WEIGHTS).total == 1.7

    def test_default_weights_include_intensity(self):
        bd = total_loss(1.0, 1.0, 1.0, 1.0, LossWeights(), intensity=1.0)
        assert bd.total == pytest.approx(1.8)

    def test_class_only(self):
        assert total_loss(0.37, 5.0, 6.0, 7.0, LossWeights(1, 0, 0, 0, 0)).total == 0.37

    def test_zeros(self):
        assert total_loss(0.0, 0.0, 0.0, 0.0, PAPER_WEIGHTS).total == 0.0

    def test_non_finite(self):
        with pytest.raises(ValueError, match="non-finite perturb"):
            total_loss(1.0, math.nan, 0.0, 0.0, PAPER_WEIGHTS)

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            LossWeights(perturb=-0.1)

    @given(st.lists(st.floats(0, 50), min_size=5, max_size=5),
           st.lists(st.floats(0, 2), min_size=5, max_size=5))
    def test_compose_matches_float_total(self, parts, weights):
        w = LossWeights(*weights)
        terms = dict(zip(("class", "perturb", "causal", "domain", "intensity"),
                         (Tensor(p) for p in parts)))
        tensor_total, bd = compose(terms, w)
        assert tensor_total.item() == bd.total
        expected = sum(wi * p for wi, p in zip(weights, parts))
        assert bd.total == pytest.approx(expected, rel=1e-12, abs=1e-12)

    def test_compose_skips_missing_terms(self):
        total, bd = compose({"class": Tensor(2.0)}, PAPER_WEIGHTS)
        assert total.item() == 2.0 and bd.perturb_loss == 0.0
