import dataclasses
from math import comb

import numpy as np
import pytest

from aetransfer import ensemble as ens_mod
from aetransfer import nn
from aetransfer.ensemble import EnsembleError, EnsembleModel
from aetransfer.nn import ModelSpec

from gradcheck import max_rel_error, numeric_grad

SPEC = ModelSpec(blocks_per_stage=(1,), channels=(2,), num_classes=3, input_shape=(3, 4, 4))


def zoo(k, head="softmax"):
    return [nn.build(dataclasses.replace(SPEC, head=head), seed=s) for s in range(k)]


X = np.random.default_rng(0).uniform(0, 255, size=(4, 3, 4, 4))
Y = np.array([0, 1, 2, 1])


class TestGradientLaw:
    @pytest.mark.parametrize("k", [1, 2, 3, 5])
    def test_sum_of_member_gradients(self, k):
        members = zoo(k)
        got = ens_mod.loss_gradient_wrt_input(EnsembleModel(tuple(members)), X, Y)
        expected = sum(nn.input_gradient(m, X, Y) for m in members)
        assert np.max(np.abs(got - expected)) <= 1e-12

    def test_duplicate_doubles(self):
        m = zoo(1)[0]
        single = ens_mod.loss_gradient_wrt_input(EnsembleModel((m,)), X, Y)
        double = ens_mod.loss_gradient_wrt_input(EnsembleModel((m, m)), X, Y)
        np.testing.assert_array_equal(double, 2.0 * single)

    def test_member_order_irrelevant(self):
        a, b, c = zoo(3)
        g1 = ens_mod.loss_gradient_wrt_input(EnsembleModel((a, b, c)), X, Y)
        g2 = ens_mod.loss_gradient_wrt_input(EnsembleModel((c, a, b)), X, Y)
        np.testing.assert_array_equal(g1, g2)

    def test_mixed_heads(self):
        soft, svm = zoo(1)[0], zoo(2, "svm")[1]
        e = EnsembleModel((soft, svm))
        assert e.mixed_heads
        expected = nn.input_gradient(soft, X, Y) + nn.input_gradient(svm, X, Y)
        assert np.max(np.abs(e.loss_gradient(X, Y) - expected)) <= 1e-12

    def test_averaged_output_mode_matches_finite_differences(self):
        members = zoo(2)
        e = EnsembleModel(tuple(members), gradient_mode="averaged-output")
        x, y = X[:2], Y[:2]

        def f(v):
            avg = np.mean([nn.softmax(nn.logits(m, v)) for m in members], axis=0)
            return float(-np.log(avg[np.arange(len(y)), y]).sum())

        g = ens_mod.loss_gradient_wrt_input(e, x, y)
        assert max_rel_error(g, numeric_grad(f, x, h=1e-4)) < 1e-4


class TestPredict:
    def test_average_of_weighted_scores(self):
        members = zoo(3)
        e = EnsembleModel(tuple(members), (1.0, 2.0, 0.5))
        _, avg = e.predict(X)
        expected = (nn.scores(members[0], X) + 2 * nn.scores(members[1], X) + 0.5 * nn.scores(members[2], X)) / 3
        np.testing.assert_allclose(avg, expected, rtol=0, atol=1e-15)
        assert e.predict(X)[0].tolist() == np.argmax(expected, axis=1).tolist()

    def test_singleton_matches_model(self):
        m = zoo(1)[0]
        assert EnsembleModel((m,)).predict(X)[0].tolist() == nn.model_predict(m, X).tolist()

    def test_id_is_order_invariant(self):
        a, b = zoo(2)
        assert EnsembleModel((a, b)).model_id == EnsembleModel((b, a)).model_id
        assert EnsembleModel((a, b)).model_id != EnsembleModel((a, b), (1.0, 2.0)).model_id


class TestValidation:
    def test_empty(self):
        with pytest.raises(EnsembleError):
            EnsembleModel(())

    def test_weight_count_and_sign(self):
        a, b = zoo(2)
        with pytest.raises(EnsembleError):
            EnsembleModel((a, b), (1.0,))
        with pytest.raises(EnsembleError):
            EnsembleModel((a, b), (1.0, 0.0))

    def test_incompatible_members(self):
        other = nn.build(dataclasses.replace(SPEC, num_classes=4), 0)
        with pytest.raises(EnsembleError):
            EnsembleModel((zoo(1)[0], other))


class TestCombinatorics:
    def test_shared_count(self):
        a, b, c, d = zoo(4)
        assert ens_mod.shared_submodel_count(EnsembleModel((a, b, c)), EnsembleModel((b, c, d))) == 2
        assert ens_mod.shared_submodel_count(a, EnsembleModel((b, c))) == 0

    def test_all_subsets_of_six(self):
        pool = list("abcdef")
        total = sum(len(ens_mod.enumerate_subsets(pool, k)) for k in range(1, 7))
        assert total == sum(comb(6, k) for k in range(1, 7)) == 63

    def test_cap_is_seeded(self):
        pool = list(range(18))
        a = ens_mod.enumerate_subsets(pool, 9, cap=3, rng=np.random.default_rng(1))
        b = ens_mod.enumerate_subsets(pool, 9, cap=3, rng=np.random.default_rng(1))
        assert a == b and len(a) == 3 and len(set(a)) == 3
