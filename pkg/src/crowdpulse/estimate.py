"""Newton-Raphson maximum likelihood with uncertainty and model selection.

The item-flow rates have closed-form estimates; the contribution block is
maximized by damped Newton steps using the analytic gradient and Hessian.
Standard errors come from the inverse observed information, contagion
ratios get delta-method intervals, and nested variants of the contribution
intensity are compared by AIC/BIC computed on the contribution terms only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFinite, NotNegDefinite, SingularHessian
from .intensity import Params, PowerLawDecay
from .likelihood import (
    ContributionModel,
    SufficientStats,
    closed_form_rates,
    contribution_derivatives,
    flow_loglik,
)

Z_95 = 1.959963984540054  # two-sided 95% normal quantile

FLOW_NAMES = ("phi", "mu", "sigma")


@dataclass(frozen=True)
class ModelVariant:
    """A named restriction of the contribution intensity."""

    tag: str
    model: ContributionModel

    @property
    def n_params(self) -> int:
        return self.model.n_params


VARIANTS = {
    "full": ModelVariant("full", ContributionModel("regimes", "power")),
    "const-gamma": ModelVariant("const-gamma", ContributionModel("single", "power")),
    "psi-only": ModelVariant("psi-only", ContributionModel("none", "power")),
    "exp-decay": ModelVariant("exp-decay", ContributionModel("single", "exp")),
}


@dataclass
class FitOptions:
    init: Params | dict | None = None  # None means data-driven defaults
    max_iter: int = 200
    grad_tol: float = 1e-8
    step_tol: float = 1e-10
    max_halvings: int = 30
    freeze: tuple = ()

    def __post_init__(self):
        if not (self.grad_tol > 0 and self.step_tol > 0):
            raise ValueError("tolerances must be positive")


@dataclass
class FitResult:
    variant: str
    param_names: tuple  # ("phi", "mu", "sigma") + contribution block names
    theta: np.ndarray
    se: np.ndarray  # nan where the parameter was frozen or dropped
    ci95: np.ndarray  # (n, 2)
    beta: np.ndarray | None  # contagion ratios gamma/psi by regime
    beta_se: np.ndarray | None
    beta_ci95: np.ndarray | None
    loglik: float  # full log-likelihood, flow terms included
    loglik_contribution: float
    aic: float
    bic: float
    iterations: int
    converged: bool
    final_grad_norm: float
    warnings: list = field(default_factory=list)
    frozen: tuple = ()
    ll_path: list = field(default_factory=list, repr=False)

    @property
    def params(self) -> Params:
        """Assembled Params; meaningful for the full variant only."""
        if self.variant != "full":
            raise ValueError(f"variant {self.variant!r} is not the 13-parameter model")
        return Params.from_array(self.theta)

    def to_dict(self) -> dict:
        def _clean(arr):
            return None if arr is None else [
                None if not np.isfinite(v) else float(v) for v in np.ravel(arr)
            ]

        return {
            "variant": self.variant,
            "param_names": list(self.param_names),
            "theta": [float(v) for v in self.theta],
            "se": _clean(self.se),
            "ci95": [[None if not np.isfinite(v) else float(v) for v in row]
                     for row in self.ci95],
            "beta": _clean(self.beta),
            "beta_ci95": (None if self.beta_ci95 is None else
                          [[None if not np.isfinite(v) else float(v) for v in row]
                           for row in self.beta_ci95]),
            "loglik": float(self.loglik),
            "loglik_contribution": float(self.loglik_contribution),
            "aic": float(self.aic),
            "bic": float(self.bic),
            "iterations": self.iterations,
            "converged": self.converged,
            "final_grad_norm": float(self.final_grad_norm),
            "warnings": list(self.warnings),
            "frozen": list(self.frozen),
        }


def information_criteria(loglik_contribution, n_params, n_contributions):
    """AIC and BIC of the contribution sub-model."""
    if n_contributions < 1:
        raise ValueError("need at least one contribution")
    aic = 2.0 * n_params - 2.0 * loglik_contribution
    bic = n_params * np.log(n_contributions) - 2.0 * loglik_contribution
    return float(aic), float(bic)


def default_init(stats: SufficientStats, model: ContributionModel) -> np.ndarray:
    """Order-of-magnitude starting block from crude decay-discounted exposure."""
    if model.kernel_name == "power":
        kernel = PowerLawDecay(1e-3, 0.1)
        delta0 = 0.1
    else:
        from .intensity import ExponentialDecay

        # decay rate near the reciprocal mean contribution delay starts the
        # exponential kernel inside its own basin
        mean_elapsed = float(np.mean(stats.ev_elapsed)) if stats.k else 1.0
        delta0 = 1.0 / max(mean_elapsed, 1e-3)
        kernel = ExponentialDecay(delta0)
    exposure = np.bincount(
        stats.ps_count, weights=kernel.segment_terms(stats.ps_lo, stats.ps_hi, 0)["I"],
        minlength=4,
    )
    pooled = stats.k / max(exposure.sum(), 1e-12) if stats.k else 1e-3
    psi = np.where(
        (stats.k_by_regime > 0) & (exposure > 0),
        stats.k_by_regime / np.maximum(exposure, 1e-12),
        max(pooled, 1e-12),
    )
    block = {name: None for name in model.param_names}
    for c in range(4):
        block[f"psi{c}"] = max(psi[c], 1e-12)
    if model.gamma_mode == "regimes":
        for c in range(4):
            block[f"gamma{c}"] = 10.0 * block[f"psi{c}"]
    elif model.gamma_mode == "single":
        block["gamma"] = 10.0 * max(pooled, 1e-12)
    if "kappa" in block:
        block["kappa"] = 1e-3
    block["delta"] = delta0
    return np.array([block[name] for name in model.param_names])


def _init_block(stats, model, init):
    if init is None:
        return default_init(stats, model)
    if isinstance(init, Params):
        values = init.to_dict()
        block = []
        for name in model.param_names:
            if name == "gamma":
                block.append(np.mean([values[f"gamma{c}"] for c in range(4)]))
            else:
                block.append(values[name])
        return np.asarray(block, dtype=float)
    return np.array([float(init[name]) for name in model.param_names])


def _solve_newton_step(hess, grad, warnings):
    """Ascent step from (-H + lambda I) s = g with escalating damping.

    Damping grows until the system is solvable and the step points uphill;
    at large lambda this degrades gracefully into a short gradient step.
    """
    boost = 0.0
    scale = max(np.max(np.abs(np.diag(hess))), 1.0)
    for attempt in range(16):
        try:
            step = np.linalg.solve(-hess + boost * np.eye(len(grad)), grad)
        except np.linalg.LinAlgError:
            step = None
        if step is not None and np.all(np.isfinite(step)) and grad @ step > 0:
            if attempt:
                warnings.append(f"newton system damped with {boost:.3e}")
            return step
        boost = 1e-8 * scale if boost == 0.0 else boost * 10.0
    raise SingularHessian(
        "newton system singular or indefinite after damping retries",
        condition=float(np.linalg.cond(hess)),
    )


def _maximize_block(stats, model, block0, free, opts):
    """Damped Newton ascent of the contribution log-likelihood.

    Uses strict-improvement step halving while the predicted quadratic
    gain is resolvable in floating point; once the predicted gain drops
    below the objective's resolution the full Newton step is taken
    unchecked (a pure polish), which lets quadratic convergence drive the
    gradient to tolerance even though the log-likelihood can no longer
    visibly increase.
    """
    block = block0.copy()
    warnings: list = []
    ll, grad, hess = contribution_derivatives(block, stats, model, order=2)
    ll_path = [ll]
    iterations = 0
    stalled = 0
    converged = not free.any() or float(np.max(np.abs(grad[free]))) <= opts.grad_tol
    for _ in range(opts.max_iter):
        if converged:
            break
        step = _solve_newton_step(hess[np.ix_(free, free)], grad[free], warnings)
        predicted_gain = 0.5 * float(grad[free] @ step)
        resolution = 64.0 * np.finfo(float).eps * (1.0 + abs(ll))
        polish = predicted_gain <= resolution
        stalled = stalled + 1 if polish else 0
        alpha = 1.0
        accepted = None
        for _ in range(opts.max_halvings):
            candidate = block.copy()
            candidate[free] = block[free] + alpha * step
            if np.all(candidate[free] > 0.0):
                try:
                    probe = contribution_derivatives(candidate, stats, model, order=2)
                except NonFinite:
                    probe = None
                # below the objective's resolution no improvement is
                # measurable; take the first feasible step unchecked
                if probe is not None and (polish or probe[0] > ll):
                    accepted = (candidate, probe, alpha)
                    break
            alpha *= 0.5
        if accepted is None:
            if float(np.max(np.abs(grad[free]))) <= opts.grad_tol:
                converged = True
            else:
                warnings.append("step halving exhausted without improvement")
            break
        block, (ll, grad, hess), alpha = accepted
        ll_path.append(ll)
        iterations += 1
        step_size = float(np.linalg.norm(alpha * step))
        grad_norm = float(np.max(np.abs(grad[free])))
        if grad_norm <= opts.grad_tol and (
                polish or step_size <= opts.step_tol * (1.0 + float(np.linalg.norm(block)))):
            converged = True
        if stalled >= 3:
            break
    final_grad = float(np.max(np.abs(grad[free]))) if free.any() else 0.0
    if not converged and final_grad <= opts.grad_tol:
        converged = True
    return block, ll, grad, hess, iterations, converged, final_grad, warnings, ll_path


def standard_errors_and_ci(hessian, theta, free=None):
    """SEs and 95% CIs from the inverse observed information.

    ``hessian`` is the log-likelihood Hessian at the estimate; rows and
    columns outside ``free`` are excluded and reported as nan. Raises
    NotNegDefinite when the negated free block is not positive definite.
    """
    theta = np.asarray(theta, dtype=float)
    n = theta.size
    free = np.ones(n, dtype=bool) if free is None else np.asarray(free, dtype=bool)
    se = np.full(n, np.nan)
    cov = np.full((n, n), np.nan)
    if free.any():
        info = -np.asarray(hessian)[np.ix_(free, free)]
        try:
            chol = np.linalg.cholesky(info)
        except np.linalg.LinAlgError:
            raise NotNegDefinite(
                "observed information is not positive definite on the free block"
            ) from None
        inv = np.linalg.inv(chol)
        cov_free = inv.T @ inv
        cov[np.ix_(free, free)] = cov_free
        se[free] = np.sqrt(np.diag(cov_free))
    ci = np.column_stack([theta - Z_95 * se, theta + Z_95 * se])
    return se, ci, cov


def contagion_with_ci(theta, names, cov):
    """Delta-method intervals for gamma/psi by regime.

    Var(b) = b^2 [Var(g)/g^2 + Var(p)/p^2 - 2 Cov(p, g)/(p g)] for
    b = g / p, using the joint (psi_c, gamma) covariance block.
    """
    index = {name: i for i, name in enumerate(names)}
    beta = np.full(4, np.nan)
    beta_se = np.full(4, np.nan)
    for c in range(4):
        psi_name = f"psi{c}"
        gamma_name = f"gamma{c}" if f"gamma{c}" in index else "gamma"
        if gamma_name not in index:
            return None, None, None
        ip, ig = index[psi_name], index[gamma_name]
        p, g = theta[ip], theta[ig]
        beta[c] = g / p
        vp, vg, cpg = cov[ip, ip], cov[ig, ig], cov[ip, ig]
        if np.isfinite(vp) and np.isfinite(vg):
            var = beta[c] ** 2 * (vg / g**2 + vp / p**2 - 2.0 * cpg / (p * g))
            beta_se[c] = np.sqrt(max(var, 0.0))
    ci = np.column_stack([beta - Z_95 * beta_se, beta + Z_95 * beta_se])
    return beta, beta_se, ci


def fit_variant(stats: SufficientStats, variant, opts: FitOptions | None = None) -> FitResult:
    """Fit one contribution-model variant; flow rates are closed form."""
    if isinstance(variant, str):
        variant = VARIANTS[variant]
    opts = opts or FitOptions()
    model = variant.model
    phi, mu, sigma = closed_form_rates(stats)

    block0 = _init_block(stats, model, opts.init)
    free = np.ones(model.n_params, dtype=bool)
    warnings = []
    frozen = []
    for c in range(4):
        if stats.k_by_regime[c] == 0:
            for name in (f"psi{c}", f"gamma{c}"):
                if name in model.param_names:
                    frozen.append(name)
            warnings.append(
                f"no contributions with count {c}; its rates stay at their start values"
            )
    if stats.k == 0:
        frozen.extend(n for n in model.param_names
                      if n in ("gamma", "kappa", "delta") and n not in frozen)
        warnings.append("no contributions at all; decay parameters not estimable")
    for name in opts.freeze:
        if name in model.param_names and name not in frozen:
            frozen.append(name)
    for name in frozen:
        free[model.param_names.index(name)] = False

    (block, ll_c, grad, hess, iterations, converged, final_grad,
     newton_warnings, ll_path) = _maximize_block(stats, model, block0, free, opts)
    warnings.extend(newton_warnings)
    if not converged:
        warnings.append("newton iteration did not converge; best iterate returned")

    names = FLOW_NAMES + model.param_names
    theta = np.concatenate([[phi, mu, sigma], block])
    full_free = np.concatenate([
        [stats.a > 0, stats.b > 0, stats.d > 0], free]).astype(bool)
    full_hess = np.zeros((3 + model.n_params, 3 + model.n_params))
    with np.errstate(divide="ignore"):
        full_hess[0, 0] = -stats.a / phi**2 if phi > 0 else -np.inf
        full_hess[1, 1] = -stats.b / mu**2 if mu > 0 else -np.inf
        full_hess[2, 2] = -stats.d / sigma**2 if sigma > 0 else -np.inf
    full_hess[3:, 3:] = hess
    try:
        se, ci, cov = standard_errors_and_ci(full_hess, theta, full_free)
    except NotNegDefinite:
        warnings.append("information matrix not positive definite; no standard errors")
        se = np.full(theta.size, np.nan)
        ci = np.column_stack([theta * np.nan, theta * np.nan])
        cov = np.full((theta.size, theta.size), np.nan)
    beta, beta_se, beta_ci = contagion_with_ci(theta, names, cov)

    # clamps keep 0 * log(0) terms at zero when a count is zero
    flow_ll = float(flow_loglik(max(phi, 1e-300), max(mu, 1e-300),
                                max(sigma, 1e-300), stats))
    aic, bic = information_criteria(ll_c, model.n_params, max(stats.k, 1))
    return FitResult(
        variant=variant.tag,
        param_names=names,
        theta=theta,
        se=se,
        ci95=ci,
        beta=beta,
        beta_se=beta_se,
        beta_ci95=beta_ci,
        loglik=flow_ll + ll_c,
        loglik_contribution=ll_c,
        aic=aic,
        bic=bic,
        iterations=iterations,
        converged=converged,
        final_grad_norm=final_grad,
        warnings=warnings,
        frozen=tuple(frozen),
        ll_path=ll_path,
    )


def fit_newton(stats: SufficientStats, opts: FitOptions | None = None) -> FitResult:
    """Fit the full 13-parameter model."""
    return fit_variant(stats, VARIANTS["full"], opts)


def select_models(stats: SufficientStats, tags=None, opts: FitOptions | None = None):
    """Fit the requested variants and rank them by AIC."""
    tags = tags or ("full", "const-gamma", "psi-only", "exp-decay")
    results = [fit_variant(stats, tag, opts) for tag in tags]
    return sorted(results, key=lambda fit: fit.aic)
