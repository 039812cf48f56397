import dataclasses

import numpy as np
import pytest

from aetransfer import attacks, metrics, nn
from aetransfer import ensemble as ens_mod
from aetransfer.attacks import AEBatch, AttackConfig
from aetransfer.ensemble import EnsembleModel
from aetransfer.nn import ModelSpec

LINEAR = ModelSpec(blocks_per_stage=(), channels=(), num_classes=2, input_shape=(3, 2, 2))
SMALL = ModelSpec(blocks_per_stage=(1,), channels=(2,), num_classes=3, input_shape=(3, 4, 4))


def linear_model(seed=0, head="softmax"):
    return nn.build(dataclasses.replace(LINEAR, head=head), seed)


def hyperplane(model):
    """(w, c) with f(x) = w . x + c = score_1 - score_0, in pixel units."""
    W, b = model.params["head.w"], model.params["head.b"]
    w = (W[:, 1] - W[:, 0]) / 127.5
    c = (b[1] - b[0]) - (W[:, 1] - W[:, 0]).sum()
    return w, c


def correctly_classified(model, n, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 255, size=(n,) + tuple(model.input_shape))
    return x, nn.model_predict(model, x)


class TestDeepFoolLinearOracle:
    @pytest.mark.parametrize("overshoot", [0.0, 0.02, 0.5])
    def test_norm_is_scaled_hyperplane_distance(self, overshoot):
        m = linear_model(1)
        x, y = correctly_classified(m, 20, seed=2)
        w, c = hyperplane(m)
        dist = np.abs(x.reshape(20, -1) @ w + c) / np.linalg.norm(w)
        q, iters, conv = attacks.deepfool_l2(m, x, y, max_iters=50, overshoot=overshoot)
        norms = np.linalg.norm((q - x).reshape(20, -1), axis=1)
        if overshoot > 0:
            assert np.all(iters == 1) and np.all(conv)
        assert np.max(np.abs(norms - (1 + overshoot) * dist)) <= 1e-9

    def test_near_boundary_converges_in_one_step(self):
        m = linear_model(3)
        w, c = hyperplane(m)
        x0 = np.full((1, 12), 127.0)
        # move onto the boundary, then back a hair to the label-0 side
        f0 = x0 @ w + c
        x = x0 - (f0 / (w @ w))[:, None] * w - 1e-6 * np.sign(w @ w) * w / np.linalg.norm(w)
        x = x.reshape(1, 3, 2, 2)
        y = nn.model_predict(m, x)
        _, iters, conv = attacks.deepfool_l2(m, x, y, overshoot=0.02)
        assert conv[0] and iters[0] == 1

    def test_zero_iterations(self):
        m = linear_model()
        x, y = correctly_classified(m, 4)
        q, iters, conv = attacks.deepfool_l2(m, x, y, max_iters=0)
        np.testing.assert_array_equal(q, x)
        assert not conv.any() and not iters.any()

    def test_degenerate_boundary(self):
        m = linear_model()
        m.params["head.w"][:] = 0.0
        x = np.full((2, 3, 2, 2), 10.0)
        with pytest.raises(attacks.DegenerateBoundaryError):
            attacks.deepfool_l2(m, x, np.zeros(2, dtype=int))


class TestOneStep:
    def test_fgsm_sign_valued(self):
        m = nn.build(SMALL, 0)
        x, y = correctly_classified(m, 5)
        q = attacks.fgsm(m, x, y, epsilon=2.0)
        assert set(np.unique(np.abs(q - x))) <= {0.0, 2.0}

    def test_fgm_unit_norm_step(self):
        m = nn.build(SMALL, 1)
        x, y = correctly_classified(m, 5)
        q = attacks.fgm(m, x, y, epsilon=3.0)
        np.testing.assert_allclose(np.linalg.norm((q - x).reshape(5, -1), axis=1), 3.0, rtol=1e-12)

    def test_zero_gradient_leaves_image(self):
        # linear svm with every margin satisfied has zero hinge gradient
        m = linear_model(head="svm")
        m.params["head.w"][:] = 0.0
        m.params["head.b"][:] = [5.0, 0.0]
        x = np.full((3, 3, 2, 2), 50.0)
        y = np.zeros(3, dtype=int)
        np.testing.assert_array_equal(attacks.fgm(m, x, y, 1.0), x)
        np.testing.assert_array_equal(attacks.fgsm(m, x, y, 1.0), x)

    def test_fgm_and_fgsm_share_signs_on_one_pixel(self):
        m = nn.build(dataclasses.replace(LINEAR, input_shape=(3, 1, 1)), 4)
        x = np.array([[[[40.0]], [[120.0]], [[200.0]]]])
        y = nn.model_predict(m, x)
        d1 = attacks.fgsm(m, x, y, 1.0) - x
        d2 = attacks.fgm(m, x, y, 1.0) - x
        np.testing.assert_array_equal(np.sign(d1), np.sign(d2))
        g = nn.input_gradient(m, x, y)
        np.testing.assert_allclose(d2, g / np.linalg.norm(g), rtol=1e-12)

    def test_epsilon_zero(self):
        m = nn.build(SMALL, 0)
        x, y = correctly_classified(m, 3)
        np.testing.assert_array_equal(attacks.fgsm(m, x, y, 0.0), x)
        np.testing.assert_array_equal(attacks.fgm(m, x, y, 0.0), x)

    def test_clamp(self):
        m = nn.build(SMALL, 0)
        x, y = correctly_classified(m, 3)
        q = attacks.fgsm(m, x, y, 500.0, clamp=True)
        assert q.min() >= 0.0 and q.max() <= 255.0


class TestGenerateBatch:
    def test_misclassified_sources_untouched(self):
        m = linear_model()
        m.params["head.w"][:] = 0.0
        m.params["head.b"][:] = [1.0, 0.0]
        x = np.random.default_rng(0).uniform(0, 255, size=(6, 3, 2, 2))
        y = np.ones(6, dtype=int)
        b = attacks.generate_batch(m, x, y, AttackConfig())
        np.testing.assert_array_equal(b.adversarial, b.source)
        assert b.pre_misclassified.all() and metrics.noise_magnitude(b).value == 0.0

    def test_deterministic(self):
        m = nn.build(SMALL, 2)
        x, y = correctly_classified(m, 6)
        y[::2] = (y[::2] + 1) % 3
        a = attacks.generate_batch(m, x, y, AttackConfig(chunk=4))
        b = attacks.generate_batch(m, x, y, AttackConfig(chunk=4))
        assert a.adversarial.tobytes() == b.adversarial.tobytes()
        assert a.pre_misclassified.tolist() == [True, False] * 3

    def test_chunking_does_not_change_result(self):
        m = nn.build(SMALL, 2)
        x, y = correctly_classified(m, 7)
        a = attacks.generate_batch(m, x, y, AttackConfig(chunk=2))
        b = attacks.generate_batch(m, x, y, AttackConfig(chunk=100))
        np.testing.assert_allclose(a.adversarial, b.adversarial, rtol=0, atol=1e-9)

    def test_error_carries_index_context(self):
        m = linear_model()
        m.params["head.w"][:] = 0.0
        x = np.full((3, 3, 2, 2), 10.0)
        with pytest.raises(attacks.AttackError, match="images 0..2"):
            attacks.generate_batch(m, x, np.zeros(3, dtype=int), AttackConfig())

    def test_unknown_method(self):
        with pytest.raises(attacks.AttackError):
            AttackConfig(method="cw")


class TestEnsembleHook:
    @pytest.mark.parametrize("method", ["fgsm", "fgm"])
    def test_attack_uses_ensemble_gradient(self, monkeypatch, method):
        members = tuple(nn.build(SMALL, s) for s in range(3))
        ens = EnsembleModel(members)
        x, y = correctly_classified(ens, 4)
        calls = []
        real = ens_mod.loss_gradient_wrt_input

        def spy(e, images, labels):
            calls.append(e.model_id)
            return real(e, images, labels)

        monkeypatch.setattr(ens_mod, "loss_gradient_wrt_input", spy)
        q = attacks.generate_batch(ens, x, y, AttackConfig(method=method, epsilon=1.0)).adversarial
        assert calls == [ens.model_id]
        g = real(ens, x, y)
        step = np.sign(g) if method == "fgsm" else g / np.linalg.norm(g.reshape(4, -1), axis=1)[:, None, None, None]
        np.testing.assert_allclose(q, x + step, rtol=0, atol=1e-12)


def toy_batch(seed=0, n=5, pre=(1,)):
    rng = np.random.default_rng(seed)
    p = rng.uniform(50, 200, size=(n, 3, 4, 4))
    q = p + rng.normal(size=p.shape)
    flags = np.zeros(n, dtype=bool)
    flags[list(pre)] = True
    q[flags] = p[flags]
    return AEBatch(p, q, np.zeros(n, dtype=np.int64), "t", AttackConfig(), flags, ~flags, np.ones(n, dtype=np.int64))


class TestAmplify:
    def test_reaches_target_exactly(self):
        b = toy_batch()
        out = attacks.amplify_to_magnitude(b, 2.37)
        assert abs(metrics.noise_magnitude(out).value - 2.37) <= 1e-9

    def test_direction_preserved(self):
        b = toy_batch()
        out = attacks.amplify_to_magnitude(b, 5.0)
        for d0, d1 in zip(b.perturbation, out.perturbation):
            if not d0.any():
                assert not d1.any()
                continue
            s = (d1.ravel() @ d0.ravel()) / (d0.ravel() @ d0.ravel())
            assert s > 0
            np.testing.assert_allclose(d1, s * d0, rtol=1e-12, atol=1e-12)

    def test_identity_and_doubling(self):
        b = toy_batch()
        m = metrics.noise_magnitude(b).value
        np.testing.assert_allclose(attacks.amplify_to_magnitude(b, m).adversarial, b.adversarial, rtol=0, atol=1e-12)
        np.testing.assert_allclose(attacks.amplify_to_magnitude(b, 2 * m).perturbation, 2 * b.perturbation,
                                   rtol=1e-12, atol=1e-12)

    def test_pre_misclassified_unchanged(self):
        b = toy_batch(pre=(0, 3))
        out = attacks.amplify_to_magnitude(b, 4.0)
        np.testing.assert_array_equal(out.adversarial[[0, 3]], b.source[[0, 3]])

    def test_errors(self):
        b = toy_batch()
        with pytest.raises(attacks.AttackError):
            attacks.amplify_to_magnitude(b, 0.1)
        zero = dataclasses.replace(b, adversarial=b.source.copy())
        with pytest.raises(attacks.AttackError):
            attacks.amplify_to_magnitude(zero, 3.0)

    def test_allow_reduce_and_per_image(self):
        b = toy_batch()
        small = attacks.amplify_to_magnitude(b, 0.1, allow_reduce=True)
        assert metrics.noise_magnitude(small).value == pytest.approx(0.1, abs=1e-12)
        per = attacks.amplify_to_magnitude(b, 3.0, mode="per-image")
        mags = metrics.per_image_magnitude(per.source, per.adversarial)
        np.testing.assert_allclose(mags[~b.pre_misclassified], 3.0, rtol=1e-12)
