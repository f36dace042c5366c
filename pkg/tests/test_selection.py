from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import all_learning_subsets, mean_estimator_rlt

from capnls.core import Dataset
from capnls.estimators import CDM, OLS, EstimationError, fit_capnls
from capnls.selection import (
    BootstrapConfig,
    RLTConfig,
    SelectionError,
    best_set,
    bootstrap_optimism,
    compare_methods,
    draw_subsets,
    estimate_errors,
    full_set_error,
    learning_size,
    output_variance,
    r2_fs,
    r2_pred,
    rlt_predictive_error,
    rlt_replicates,
    sigma2_from_cnls,
)
from capnls.simlab import DGPSpec, generate


@dataclass(frozen=True)
class ConstantModel:
    value: float

    def predict(self, x):
        return np.full(np.atleast_2d(x).shape[0], self.value)


@dataclass(frozen=True)
class MeanEstimator:
    name: str = "mean"

    def fit(self, data):
        return ConstantModel(float(np.mean(data.outputs)))


@dataclass(frozen=True)
class Broken:
    name: str = "broken"

    def fit(self, data):
        raise EstimationError("boom")


def line(n=10):
    x = np.arange(1.0, n + 1)[:, None]
    return Dataset(x, x[:, 0])


class TestConfigs:
    def test_defaults(self):
        assert RLTConfig().fractions == (0.2, 0.3, 0.4, 0.5) and RLTConfig().V == 100
        assert BootstrapConfig().B == 500 and BootstrapConfig().variance_inflation == 1.0

    @pytest.mark.parametrize("kw", [dict(fractions=(0.0,)), dict(fractions=(1.0,)), dict(V=1)])
    def test_rlt_invalid(self, kw):
        with pytest.raises(ValueError):
            RLTConfig(**kw)

    @pytest.mark.parametrize("kw", [dict(B=1), dict(variance_inflation=0.5)])
    def test_bootstrap_invalid(self, kw):
        with pytest.raises(ValueError):
            BootstrapConfig(**kw)


class TestRLT:
    def test_constant_data(self):
        data = Dataset(np.arange(1.0, 11.0)[:, None], np.full(10, 3.0))
        mse, per = rlt_predictive_error(data, MeanEstimator(), 0.5, RLTConfig(V=5))
        assert mse == 0.0 and len(per) == 5

    def test_exhaustive_subsets_match_brute_force(self):
        data = Dataset(np.arange(1.0, 5.0)[:, None], np.array([0.0, 0.0, 1.0, 1.0]))
        subsets = all_learning_subsets(4, 2)
        results = rlt_replicates(data, MeanEstimator(), subsets)
        expected = mean_estimator_rlt(data.outputs, 2)
        np.testing.assert_allclose([r.mse_test for r in results], expected, atol=1e-15)
        assert np.mean([r.mse_test for r in results]) == pytest.approx(np.mean(expected))

    def test_learning_size_and_subsets(self):
        assert learning_size(10, 0.3) == 3 and learning_size(7, 0.5) == 3
        subs = draw_subsets(20, 6, 4, seed=1)
        assert all(len(s) == 6 and len(set(s)) == 6 for s in subs)
        assert [s.tolist() for s in subs] == [s.tolist() for s in draw_subsets(20, 6, 4, seed=1)]

    def test_fraction_too_small(self):
        with pytest.raises(ValueError):
            rlt_predictive_error(line(4), MeanEstimator(), 0.2, RLTConfig(V=2))

    def test_too_many_failures(self):
        with pytest.raises(SelectionError):
            rlt_predictive_error(line(10), Broken(), 0.5, RLTConfig(V=20))

    def test_parallel_matches_serial(self):
        data = generate(DGPSpec.bivariate(0.2), 40, np.random.default_rng(0))
        a = rlt_predictive_error(data, OLS(), 0.5, RLTConfig(V=8), workers=1)
        b = rlt_predictive_error(data, OLS(), 0.5, RLTConfig(V=8), workers=4)
        assert a == b


class TestOptimism:
    def test_ols_trace_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0.1, 1.0, (100, 1))
        data = Dataset(x, 1.0 + x[:, 0])
        # noise-free fitted values; the bootstrap density supplies the noise
        vals = [
            bootstrap_optimism(data, OLS(), 1.0, BootstrapConfig(B=500, rng_seed=s)).optimism for s in range(20)
        ]
        assert np.mean(vals) == pytest.approx(2 * 1.0 * 2 / 100, rel=0.10)

    def test_zero_variance(self):
        opt = bootstrap_optimism(line(), OLS(), 0.0, BootstrapConfig(B=10))
        assert opt.optimism == 0.0 and np.all(opt.cov == 0)

    def test_variance_inflation_scales_linear_smoother(self):
        data = line(30)
        a = bootstrap_optimism(data, OLS(), 1.0, BootstrapConfig(B=50, rng_seed=3)).optimism
        b = bootstrap_optimism(data, OLS(), 1.0, BootstrapConfig(B=50, variance_inflation=4.0, rng_seed=3)).optimism
        # same normal draws scaled by 2: the covariance of a linear smoother scales by 4
        assert b == pytest.approx(4 * a, rel=1e-9)

    def test_negative_variance(self):
        with pytest.raises(ValueError):
            bootstrap_optimism(line(), OLS(), -1.0)

    def test_sigma2_from_cnls(self):
        x = np.random.default_rng(1).uniform(0.1, 1.0, (30, 2))
        assert sigma2_from_cnls(Dataset(x, np.sqrt(x).sum(axis=1))) <= 1e-8
        noisy = generate(DGPSpec.bivariate(0.2), 40, np.random.default_rng(2))
        s2 = sigma2_from_cnls(noisy)
        _, col = fit_capnls(noisy)
        assert all(s2 <= e.learning_mse + 1e-9 for e in col.entries)


class TestBlends:
    def test_census_case(self):
        assert full_set_error(float("nan"), 0.2, 0.05, 100, 100) == pytest.approx(0.25)

    def test_arithmetic(self):
        assert full_set_error(0.4, 0.2, 0.05, 50, 100) == pytest.approx(0.325)

    @given(st.floats(0, 10), st.integers(1, 99))
    def test_degenerate_equality(self, mse, nL):
        assert full_set_error(mse, mse, 0.0, nL, 100) == pytest.approx(mse, abs=1e-12)

    @given(
        st.lists(st.floats(0, 10), min_size=3, max_size=3),
        st.integers(0, 2),
        st.floats(0, 5),
        st.integers(1, 100),
    )
    def test_linear_and_monotone_in_each_argument(self, args, which, delta, nL):
        n = 100
        base = full_set_error(*args, nL, n)
        bumped = list(args)
        bumped[which] += delta
        weight = (n - nL) / n if which == 0 else nL / n
        assert full_set_error(*bumped, nL, n) == pytest.approx(base + weight * delta, abs=1e-9)
        assert full_set_error(*bumped, nL, n) >= base - 1e-12

    def test_invalid_sizes(self):
        with pytest.raises(ValueError):
            full_set_error(0.1, 0.1, 0.0, 0, 10)
        with pytest.raises(ValueError):
            full_set_error(0.1, 0.1, 0.0, 11, 10)

    def test_r2_examples(self):
        assert r2_fs(2.0, 2.0) == 0.0 and r2_fs(0.0, 2.0) == 1.0
        assert r2_fs(4.0, 2.0) == 0.0
        assert r2_pred(0.5, 2.0) == pytest.approx(0.75)
        assert math.isnan(r2_pred(float("nan"), 1.0))
        with pytest.raises(ValueError):
            r2_fs(0.1, 0.0)

    @given(st.floats(-1e6, 1e6), st.floats(1e-6, 1e6))
    def test_r2_always_in_unit_interval(self, err, var):
        assert 0.0 <= r2_fs(err, var) <= 1.0

    def test_output_variance_is_population_form(self):
        assert output_variance(line(4)) == pytest.approx(1.25)


class TestBestSet:
    def test_examples(self):
        assert best_set({"a": 0.7}) == ("a",)
        assert best_set({"capnls": 0.88, "cda": 0.79}) == ("capnls",)
        assert set(best_set({"a": 0.64, "b": 0.64, "c": 0.63})) == {"a", "b", "c"}

    @settings(max_examples=50)
    @given(st.dictionaries(st.sampled_from("abcdef"), st.floats(0, 1), min_size=1))
    def test_members_within_band(self, r2):
        best = best_set(r2)
        assert best
        top = max(r2.values())
        assert all(r2[k] >= top - 0.02 - 1e-12 for k in best)
        assert all(k in best for k, v in r2.items() if v >= top - 0.02)


class TestEstimateAndCompare:
    def data(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(0.1, 1.0, (40, 2))
        return Dataset(x, x[:, 0] ** 0.4 * x[:, 1] ** 0.5 * np.exp(0.2 * rng.standard_normal(40)))

    def test_census_estimates(self):
        est = estimate_errors(self.data(), OLS(), 1.0, boot=BootstrapConfig(B=20))
        assert math.isnan(est.mse_rlt) and math.isnan(est.r2_pred)
        assert est.err_fullset == pytest.approx(est.mse_learn + est.optimism)
        assert est.err_insample == est.err_fullset

    def test_partial_estimates(self):
        data = self.data()
        est = estimate_errors(data, OLS(), 0.5, RLTConfig(V=6), BootstrapConfig(B=20))
        assert est.n_learn == 20 and len(est.per_replicate) == 6
        assert est.err_fullset == pytest.approx(full_set_error(est.mse_rlt, est.mse_learn, est.optimism, 20, 40))
        assert est.r2_pred == pytest.approx(r2_pred(est.mse_rlt, output_variance(data)))

    def test_compare_methods(self):
        cmp = compare_methods(
            self.data(), [OLS(), CDM(), Broken()], RLTConfig((0.5,), V=4), BootstrapConfig(B=10), dataset_name="toy"
        )
        assert cmp.fractions == [0.5, 1.0]
        assert cmp.estimators == ["OLS", "CDM"] and "broken" in cmp.failures
        for f, members in cmp.best.items():
            assert members
            table = cmp.r2_table()[f]
            assert all(table[m] >= max(table.values()) - 0.02 - 1e-12 for m in members)
        rows = cmp.rows()
        assert len(rows) == 4 and all(r.dataset == "toy" for r in rows)
        assert max(r.ratio_to_best for r in rows if r.fraction == 0.5) == pytest.approx(1.0)
        header = cmp.to_csv().splitlines()[0].split(",")
        assert header[:7] == ["dataset", "fraction", "estimator", "r2_fs", "r2_pred", "k_avg", "best"]
        assert cmp.to_dict()["best_set"]

    def test_single_estimator_is_best(self):
        cmp = compare_methods(self.data(), [OLS()], RLTConfig((0.5,), V=3), BootstrapConfig(B=5))
        assert all(v == ("OLS",) for v in cmp.best.values())

    def test_deterministic_output(self):
        args = (self.data(), [OLS(), CDM()], RLTConfig((0.5,), V=3), BootstrapConfig(B=5))
        assert compare_methods(*args).to_json() == compare_methods(*args).to_json()
