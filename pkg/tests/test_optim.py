import numpy as np
import pytest

from cpnorm.cp import CpForm
from cpnorm.nn import LayerSpec, build_model
from cpnorm.nn import functional as F
from cpnorm.optim import DivergenceError, NonFiniteGradientError, OptimState, post_step_renormalize, step
from cpnorm.train import TrainConfig, train_step


def one(value):
    return [("p", np.array([value]))]


class TestStep:
    def test_sgd_example(self):
        params = one(1.0)
        step(OptimState("sgd", 0.1), params, one(0.5))
        assert params[0][1][0] == pytest.approx(0.95)

    def test_adam_first_step(self):
        params = [("p", np.array([1.0, -2.0]))]
        step(OptimState("adam", 0.01), params, [("p", np.array([3.0, -0.5]))])
        np.testing.assert_allclose(params[0][1], [0.99, -1.99], atol=1e-8)

    def test_rmsprop_first_step(self):
        params = one(1.0)
        g = 2.0
        step(OptimState("rmsprop", 0.001), params, one(g))
        v = 0.01 * g * g
        assert params[0][1][0] == pytest.approx(1.0 - 0.001 * g / (np.sqrt(v) + 1e-8), abs=1e-15)

    @pytest.mark.parametrize("kind", ["sgd", "rmsprop", "adam"])
    def test_zero_gradient(self, kind):
        params = [("p", np.array([1.0, -3.0]))]
        st = OptimState(kind, 0.1)
        for _ in range(3):
            step(st, params, [("p", np.zeros(2))])
        np.testing.assert_array_equal(params[0][1], [1.0, -3.0])

    @pytest.mark.parametrize("kind", ["rmsprop", "adam"])
    def test_matches_torch(self, kind):
        torch = pytest.importorskip("torch")
        rng = np.random.default_rng(0)
        x0 = rng.standard_normal(5)
        grads = [rng.standard_normal(5) for _ in range(6)]
        params = [("p", x0.copy())]
        st = OptimState(kind, 0.01)
        t = torch.tensor(x0.copy(), requires_grad=True)
        opt = (torch.optim.RMSprop([t], lr=0.01, alpha=0.99, eps=1e-8) if kind == "rmsprop"
               else torch.optim.Adam([t], lr=0.01, betas=(0.9, 0.999), eps=1e-8))
        for g in grads:
            step(st, params, [("p", g)])
            t.grad = torch.tensor(g)
            opt.step()
        np.testing.assert_allclose(params[0][1], t.detach().numpy(), rtol=1e-12, atol=1e-14)

    def test_non_finite_gradient(self):
        params = [("a", np.ones(2)), ("conv2.lambdas", np.ones(3))]
        grads = [("a", np.ones(2)), ("conv2.lambdas", np.array([0.0, np.nan, 1.0]))]
        with pytest.raises(NonFiniteGradientError, match="conv2.lambdas"):
            step(OptimState("sgd", 0.1), params, grads)
        np.testing.assert_array_equal(params[0][1], 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            step(OptimState("sgd", 0.1), one(1.0), [("p", np.ones(2))])

    def test_state_validation(self):
        with pytest.raises(ValueError):
            OptimState("lbfgs", 0.1)
        with pytest.raises(ValueError):
            OptimState("sgd", 0.0)

    def test_accumulators_mirror_params(self):
        params = [("w", np.ones((2, 3))), ("b", np.ones(4))]
        st = OptimState("adam", 0.1)
        step(st, params, [("w", np.ones((2, 3))), ("b", np.ones(4))])
        assert st.slots["w"]["m"].shape == (2, 3) and st.slots["b"]["v"].shape == (4,)


def cp_specs():
    return [
        LayerSpec("conv2d", "c1", in_channels=1, out_channels=3, kernel_size=3, normalization="cp", rank=4),
        LayerSpec("relu", "r"),
        LayerSpec("flatten", "f"),
        LayerSpec("linear", "l", in_features=48, out_features=4, normalization="cp", rank=3),
    ]


def unit_norms_ok(model, atol):
    for l in model.cp_layers():
        for k in range(l.param.order):
            norms = np.linalg.norm(l.param.params[f"factor_{k}"], axis=0)
            if not np.allclose(norms, 1.0, rtol=0, atol=atol):
                return False
    return True


class TestRenormalizeHook:
    def test_no_cp_layers(self, rng):
        specs = [LayerSpec("flatten", "f"), LayerSpec("linear", "l", in_features=4, out_features=2)]
        m = build_model(specs, (4,), seed=0, dtype=np.float64)
        before = [a.copy() for _, a in m.parameters()]
        assert post_step_renormalize(m) is m
        for a, (_, b) in zip(before, m.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_unit_norms_after_sgd(self, rng):
        m = build_model(cp_specs(), (1, 6, 6), seed=1, dtype=np.float64)
        x, y = rng.standard_normal((5, 1, 6, 6)), rng.integers(0, 4, 5)
        st = OptimState("sgd", 0.5)
        for _ in range(3):
            assert unit_norms_ok(m, 1e-12)
            train_step(m, st, x, y)
        assert unit_norms_ok(m, 1e-12)

    def test_loss_unchanged_by_hook(self, rng):
        m = build_model(cp_specs(), (1, 6, 6), seed=2, dtype=np.float64)
        x, y = rng.standard_normal((5, 1, 6, 6)), rng.integers(0, 4, 5)
        train_step(m, OptimState("sgd", 0.5), x, y, renorm=False)
        assert not unit_norms_ok(m, 1e-6)
        before = F.softmax_cross_entropy(m.forward(x), y)[0]
        post_step_renormalize(m)
        after = F.softmax_cross_entropy(m.forward(x), y)[0]
        assert abs(before - after) <= 1e-7

    def test_zero_column_is_divergence(self):
        m = build_model(cp_specs(), (1, 6, 6), seed=0, dtype=np.float64)
        m.layer("l").param.params["factor_1"][:, 2] = 0.0
        with pytest.raises(DivergenceError, match="'l'.*mode 1, rank index 2"):
            post_step_renormalize(m)

    def test_small_step_descends(self, rng):
        m = build_model(cp_specs(), (1, 6, 6), seed=3, dtype=np.float64)
        x, y = rng.standard_normal((8, 1, 6, 6)), rng.integers(0, 4, 8)
        before = F.softmax_cross_entropy(m.forward(x), y)[0]
        train_step(m, OptimState("sgd", 1e-6), x, y)
        after = F.softmax_cross_entropy(m.forward(x), y)[0]
        assert after <= before + 1e-9

    def test_training_reproducible(self, rng):
        x, y = rng.standard_normal((8, 1, 6, 6)), rng.integers(0, 4, 8)
        runs = []
        for _ in range(2):
            m = build_model(cp_specs(), (1, 6, 6), seed=4)
            st = OptimState("rmsprop", 1e-3)
            for _ in range(4):
                train_step(m, st, x, y)
            runs.append([a.copy() for _, a in m.parameters()])
        for a, b in zip(*runs):
            np.testing.assert_array_equal(a, b)

    def test_train_config_defaults(self):
        c = TrainConfig()
        assert (c.optimizer, c.lr, c.batch_size) == ("rmsprop", 1e-3, 64)
