import numpy as np
import pytest

from crowdpulse.errors import NotNegDefinite
from crowdpulse.estimate import (
    VARIANTS,
    FitOptions,
    FitResult,
    contagion_with_ci,
    fit_newton,
    fit_variant,
    information_criteria,
    select_models,
    standard_errors_and_ci,
)
from crowdpulse.events import Event, EventLog, ITEM_END, ITEM_START, REGISTRATION
from crowdpulse.intensity import Params
from crowdpulse.likelihood import build_sufficient_stats, closed_form_rates
from crowdpulse.simulate import SimConfig, run
from tests.conftest import make_random_log

RECOVERY_TRUTH = Params(
    phi=0.4, mu=0.05, sigma=0.8,
    psi=(5e-3, 2e-3, 8e-3, 2e-2),
    gamma=(5e-2, 2e-2, 1e-1, 3e-1),
    kappa=2e-3, delta=0.25,
)


@pytest.fixture(scope="module")
def recovery_stats():
    out = run(RECOVERY_TRUTH, SimConfig(horizon=500.0, seed=7))
    return build_sufficient_stats(out.log)


@pytest.fixture(scope="module")
def recovery_fit(recovery_stats):
    return fit_newton(recovery_stats)


class TestFitNewton:
    def test_flow_only_data_converges_in_zero_iterations(self):
        log = EventLog((
            Event(1.0, ITEM_START, item_id="a"),
            Event(2.0, REGISTRATION, user_id="u"),
            Event(5.0, ITEM_END, item_id="a"),
        ), horizon=8.0)
        fit = fit_newton(build_sufficient_stats(log))
        assert fit.converged and fit.iterations == 0
        assert fit.theta[0] == pytest.approx(3 / 8 / 3)  # one start over T=8
        assert set(fit.frozen) >= {"psi0", "gamma0", "kappa", "delta"}

    def test_recovers_simulated_parameters(self, recovery_fit):
        fit = recovery_fit
        assert fit.converged
        truth = RECOVERY_TRUTH.to_array()
        for i, name in enumerate(fit.param_names):
            assert abs(fit.theta[i] - truth[i]) <= 4 * fit.se[i], name

    def test_flow_rates_equal_closed_forms(self, recovery_stats, recovery_fit):
        phi, mu, sigma = closed_form_rates(recovery_stats)
        np.testing.assert_allclose(recovery_fit.theta[:3], [phi, mu, sigma],
                                   rtol=1e-10)

    def test_converged_gradient_below_tolerance(self, recovery_fit):
        assert recovery_fit.final_grad_norm <= 1e-8

    def test_monotone_ascent(self, recovery_fit):
        path = recovery_fit.ll_path
        assert all(b > a for a, b in zip(path, path[1:]))

    def test_full_variant_params_reconstructs(self, recovery_fit):
        p = recovery_fit.params
        assert isinstance(p, Params)
        assert p.phi == recovery_fit.theta[0]

    def test_freeze_holds_parameters_at_init(self, recovery_stats):
        init = RECOVERY_TRUTH
        fit = fit_newton(recovery_stats,
                         FitOptions(init=init, freeze=("kappa", "delta")))
        names = list(fit.param_names)
        assert fit.theta[names.index("kappa")] == init.kappa
        assert fit.theta[names.index("delta")] == init.delta
        assert np.isnan(fit.se[names.index("kappa")])
        assert fit.converged

    def test_true_init_converges_fast(self, recovery_stats):
        fit = fit_newton(recovery_stats, FitOptions(init=RECOVERY_TRUTH))
        assert fit.converged and fit.iterations <= 10

    def test_empty_regime_is_frozen_not_estimated(self):
        # hand-built log where nobody backs more than two distinct items
        events = [Event(0.5, ITEM_START, item_id="a"),
                  Event(0.6, ITEM_START, item_id="b")]
        t = 1.0
        for j in range(8):
            events.append(Event(t, REGISTRATION, user_id=f"u{j}"))
            t += 0.2
            events.append(Event(t, "contribute", user_id=f"u{j}", item_id="a"))
            t += 0.2
            if j % 2:
                events.append(Event(t, "contribute", user_id=f"u{j}", item_id="b"))
                t += 0.2
        log = EventLog(tuple(events), horizon=t)
        stats = build_sufficient_stats(log)
        assert stats.k_by_regime[3] == 0
        fit = fit_newton(stats)
        assert "psi3" in fit.frozen and "gamma3" in fit.frozen
        assert any("count 3" in w for w in fit.warnings)
        assert np.isnan(fit.se[list(fit.param_names).index("psi3")])

    def test_tiny_dataset_flags_rather_than_lies(self):
        log = make_random_log(seed=3, n_events=30)
        stats = build_sufficient_stats(log)
        fit = fit_newton(stats)
        assert fit.frozen or not fit.converged or fit.warnings


class TestStandardErrors:
    def test_identity_information_gives_unit_se(self):
        hess = -np.eye(4)
        theta = np.array([1.0, 2.0, 3.0, 4.0])
        se, ci, cov = standard_errors_and_ci(hess, theta)
        np.testing.assert_allclose(se, 1.0)
        np.testing.assert_allclose(ci[:, 0], theta - 1.959963984540054)

    def test_published_interval_round_trip(self):
        # the printed psi0 interval implies its standard error; feeding the
        # matching curvature back must reproduce the interval ends
        est = 9.28e-4
        lo, hi = 9.14e-4, 9.43e-4
        se_implied = (hi - lo) / (2 * 1.959963984540054)
        hess = np.array([[-1.0 / se_implied**2]])
        se, ci, _ = standard_errors_and_ci(hess, np.array([est]))
        assert se[0] == pytest.approx(se_implied, rel=1e-12)
        assert ci[0, 0] == pytest.approx(lo, rel=1.5e-3)
        assert ci[0, 1] == pytest.approx(hi, rel=1.5e-3)

    def test_not_negative_definite_raises(self):
        with pytest.raises(NotNegDefinite):
            standard_errors_and_ci(np.eye(2), np.ones(2))

    def test_delta_method_uncorrelated_equal_relative_errors(self):
        # 1% relative SE on psi and gamma, zero covariance: the ratio gets
        # sqrt(2)% relative SE
        names = ("psi0", "psi1", "psi2", "psi3", "gamma0", "gamma1", "gamma2",
                 "gamma3")
        theta = np.array([0.1, 0.2, 0.3, 0.4, 1.0, 2.0, 3.0, 4.0])
        cov = np.diag((0.01 * theta) ** 2)
        beta, beta_se, ci = contagion_with_ci(theta, names, cov)
        np.testing.assert_allclose(beta, 10.0)
        np.testing.assert_allclose(beta_se / beta, np.sqrt(2) * 0.01, rtol=1e-12)

    def test_recovery_fit_beta_covers_truth(self, recovery_fit):
        truth = np.asarray(RECOVERY_TRUTH.gamma) / np.asarray(RECOVERY_TRUTH.psi)
        for c in range(4):
            lo, hi = recovery_fit.beta_ci95[c]
            width = hi - lo
            assert lo - width <= truth[c] <= hi + width


class TestInformationCriteria:
    def test_aic_formula(self):
        aic, _ = information_criteria(-100.0, 3, 50)
        assert aic == 206.0

    def test_bic_formula(self):
        _, bic = information_criteria(-100.0, 3, 50)
        assert bic == pytest.approx(3 * np.log(50) + 200.0, rel=1e-12)

    def test_nested_dominance_in_aic_needs_loglik_gain(self):
        # the unrestricted fit wins exactly when twice its loglik gain
        # exceeds twice the parameter difference
        full_aic, _ = information_criteria(-95.0, 10, 100)
        restricted_aic, _ = information_criteria(-100.0, 7, 100)
        assert full_aic < restricted_aic


class TestVariants:
    @pytest.fixture(scope="class")
    def variant_stats(self):
        out = run(RECOVERY_TRUTH, SimConfig(horizon=300.0, seed=31))
        return build_sufficient_stats(out.log)

    def test_all_variants_converge(self, variant_stats):
        for tag in VARIANTS:
            fit = fit_variant(variant_stats, tag)
            assert fit.converged, tag
            assert np.isfinite(fit.aic)

    def test_full_model_dominates_restrictions_in_loglik(self, variant_stats):
        fits = {tag: fit_variant(variant_stats, tag) for tag in VARIANTS}
        for tag in ("const-gamma", "psi-only", "exp-decay"):
            assert (fits["full"].loglik_contribution
                    >= fits[tag].loglik_contribution - 1e-6), tag

    def test_select_orders_by_aic(self, variant_stats):
        ranked = select_models(variant_stats)
        aics = [fit.aic for fit in ranked]
        assert aics == sorted(aics)
        assert len(ranked) == 4

    def test_data_from_full_model_selects_full(self, variant_stats):
        ranked = select_models(variant_stats)
        assert ranked[0].variant == "full"

    def test_variant_parameter_counts(self):
        assert VARIANTS["full"].n_params == 10
        assert VARIANTS["const-gamma"].n_params == 7
        assert VARIANTS["psi-only"].n_params == 6
        assert VARIANTS["exp-decay"].n_params == 6

    def test_result_serialization_schema(self, variant_stats):
        fit = fit_variant(variant_stats, "const-gamma")
        payload = fit.to_dict()
        for key in ("variant", "theta", "se", "ci95", "beta", "beta_ci95",
                    "loglik", "aic", "bic", "iterations", "converged", "warnings"):
            assert key in payload
        assert len(payload["theta"]) == 3 + 7
