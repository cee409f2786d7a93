import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cpnorm.compress import (
    CompressionError,
    CompressionPlan,
    compress_model,
    fine_tune,
    kept_count,
    paper_lr,
    select_fine_tune_lr,
    select_terms,
    truncate,
)
from cpnorm.cp import CpForm, random_cp
from cpnorm.data import Dataset
from cpnorm.nn import LayerSpec, build_model, param_count
from cpnorm.nn.reparam import CpNormParam, cpnorm_weight
from cpnorm.train import TrainConfig, evaluate


def param(rank, seed=0, shape=(4, 3, 2)):
    cp = random_cp(shape, rank, "kaiming_normal", "standard_normal", seed=seed, dtype=np.float64)
    return CpNormParam(cp, 1.7)


def tiny_specs(normalization="cp"):
    return [
        LayerSpec("conv2d", "c1", in_channels=1, out_channels=3, kernel_size=3, normalization=normalization, rank=8),
        LayerSpec("relu", "r"),
        LayerSpec("flatten", "f"),
        LayerSpec("linear", "l", in_features=48, out_features=4, normalization=normalization, rank=6),
    ]


def tiny_model(normalization="cp", seed=0):
    return build_model(tiny_specs(normalization), (1, 6, 6), lambda_init="standard_normal", seed=seed)


def tiny_data(n=32, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.standard_normal((n, 1, 6, 6)).astype(np.float32), rng.integers(0, 4, n))


class TestKeptCount:
    @pytest.mark.parametrize("rank, keep, expected", [
        (10, 0.5, 5), (11, 0.5, 6), (11, 0.75, 8), (1024, 0.25, 256), (3, 0.1, 1), (7, 1.0, 7), (20, 0.9, 18),
    ])
    def test_values(self, rank, keep, expected):
        assert kept_count(rank, keep) == expected

    @pytest.mark.parametrize("keep", [0.0, -0.1, 1.5])
    def test_invalid(self, keep):
        with pytest.raises(CompressionError):
            kept_count(10, keep)


class TestTruncate:
    def test_example(self):
        cp = CpForm([np.eye(3), np.eye(3)], np.array([3.0, -5.0, 1.0]))
        out = truncate(CpNormParam(cp), 2 / 3)
        np.testing.assert_array_equal(out.cp.lambdas, [3.0, -5.0])
        np.testing.assert_array_equal(out.cp.factors[0], np.eye(3)[:, :2])

    def test_ties_go_to_lower_index(self):
        np.testing.assert_array_equal(select_terms(np.array([1.0, -2.0, 2.0, 1.0]), 2), [1, 2])
        np.testing.assert_array_equal(select_terms(np.array([1.0, 1.0, 1.0]), 2), [0, 1])

    def test_keep_all_is_identity(self):
        p = param(6)
        out = truncate(p, 1.0)
        np.testing.assert_array_equal(cpnorm_weight(out), cpnorm_weight(p))
        assert out.sigma == p.sigma

    @given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=30), st.floats(0.01, 1.0))
    def test_retains_largest(self, lam, keep):
        lam = np.array(lam)
        k = kept_count(len(lam), keep)
        idx = select_terms(lam, k)
        assert len(idx) == k and len(set(idx)) == k
        oracle = sorted(np.abs(lam), reverse=True)[:k]
        np.testing.assert_array_equal(sorted(np.abs(lam[idx]), reverse=True), oracle)

    @given(st.integers(2, 24), st.floats(0.05, 1.0), st.floats(0.05, 1.0), st.integers(0, 10**6))
    def test_composition(self, rank, f1, f2, seed):
        p = param(rank, seed)
        twice = truncate(truncate(p, f1), f2)
        k2 = kept_count(kept_count(rank, f1), f2)
        direct = truncate(p, k2 / rank)
        np.testing.assert_array_equal(twice.cp.lambdas, direct.cp.lambdas)
        for a, b in zip(twice.cp.factors, direct.cp.factors):
            np.testing.assert_array_equal(a, b)

    @given(st.integers(1, 30), st.floats(0.01, 1.0))
    def test_count_closed_form(self, rank, keep):
        shape = (4, 3, 2)
        out = truncate(param(rank, 1, shape), keep)
        k = kept_count(rank, keep)
        assert out.rank == k
        assert sum(f.size for f in out.cp.factors) + out.cp.lambdas.size == k * (sum(shape) + 1)


class TestCompressModel:
    def test_rate_zero_is_identity(self, rng):
        m = tiny_model()
        out, plan = compress_model(m, 0.0)
        x = rng.standard_normal((5, 1, 6, 6)).astype(np.float32)
        np.testing.assert_array_equal(out.forward(x), m.forward(x))
        assert plan.weights_after == plan.weights_before == param_count(m)

    def test_counts_and_plan(self):
        m = tiny_model()
        out, plan = compress_model(m, 0.5, overrides={"l": 1.0})
        assert out.layer("c1").param.rank == 4 and out.layer("l").param.rank == 6
        assert m.layer("c1").param.rank == 8
        c1 = plan.layers[0]
        # factors (3+1+3+3) plus lambda per term, plus sigma
        assert c1.weights_before == 8 * 11 + 1 and c1.weights_after == 4 * 11 + 1
        assert len(c1.lambdas_retained) + len(c1.lambdas_discarded) == 8
        assert min(map(abs, c1.lambdas_retained)) >= max(map(abs, c1.lambdas_discarded))
        assert plan.weights_after == param_count(out)
        assert plan.weights_before_with_bias - plan.weights_before == 3 + 4
        assert [s.rank for s in out.specs if s.has_weight] == [4, 6]

    def test_plan_round_trip(self, tmp_path):
        _, plan = compress_model(tiny_model(), 0.25)
        plan.write(tmp_path / "plan.json")
        d = json.loads((tmp_path / "plan.json").read_text())
        assert d["realized_rate"] == pytest.approx(plan.realized_rate)
        assert CompressionPlan.from_dict(d) == plan

    def test_errors(self):
        with pytest.raises(CompressionError, match="no CP"):
            compress_model(tiny_model("none"), 0.5)
        with pytest.raises(CompressionError):
            compress_model(tiny_model(), 1.0)
        with pytest.raises(CompressionError, match="non-CP"):
            compress_model(tiny_model(), 0.5, overrides={"r": 0.5})


class TestFineTune:
    def test_zero_epochs(self):
        m = tiny_model()
        before = [a.copy() for _, a in m.parameters()]
        fine_tune(m, tiny_data(), TrainConfig("sgd", 1e-2, epochs=0, batch_size=8))
        for a, (_, b) in zip(before, m.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_keeps_unit_columns(self):
        m, _ = compress_model(tiny_model(), 0.5)
        fine_tune(m, tiny_data(), TrainConfig("sgd", 0.1, epochs=1, batch_size=8, renormalize=False))
        for l in m.cp_layers():
            for k in range(l.param.order):
                np.testing.assert_allclose(np.linalg.norm(l.param.params[f"factor_{k}"], axis=0), 1.0, atol=1e-5)

    def test_lr_pattern(self):
        assert [paper_lr(r) for r in (0.1, 0.25, 0.5, 0.75, 0.9)] == [1e-4, 1e-4, 1e-3, 1e-2, 1e-2]

    def test_select_lr(self):
        m, _ = compress_model(tiny_model(), 0.5)
        val = tiny_data(16, 1)
        best, scores, tuned, result = select_fine_tune_lr(m, tiny_data(), val,
                                                          TrainConfig("sgd", 1e-3, epochs=1, batch_size=8))
        assert set(scores) == {1e-4, 1e-3, 1e-2} and scores[best] == max(scores.values())
        assert best == min(lr for lr, s in scores.items() if s == scores[best])
        assert evaluate(tuned, val)[1] == scores[best]
        assert result.epochs_run == 1
        # the input model is left untouched
        m2, _ = compress_model(tiny_model(), 0.5)
        for (_, a), (_, b) in zip(m.parameters(), m2.parameters()):
            np.testing.assert_array_equal(a, b)
