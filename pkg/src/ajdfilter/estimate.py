"""QML estimation on top of the collapsed filter.

Parameters are mapped to an unconstrained space (log for positive
parameters, arctanh for correlations and unit-interval probabilities),
where a coarse BFGS stage with numerical gradients is refined by a
Nelder-Mead simplex. Admissibility (Feller, covariance stationarity,
finite jump compensator) is kept by smooth quadratic penalties on the
natural-space margins rather than by reparameterization, so the penalty
vanishes identically on the admissible region.

Standard errors use the sandwich form A^-1 B A^-1 / T with A the
numerical Hessian of the average per-date contribution and B the outer
product of per-date numerical scores, delta-method mapped back to
natural units.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace as dc_replace

import numpy as np
from scipy.optimize import minimize

from .models import PARAM_DOMAINS, ParameterVector
from .spanning import CCFMeasurement
from .statespace import CollapsedPanel, build_system, kalman_pass

__all__ = ["EstOptions", "EstimationResult", "transform", "inverse_transform",
           "qml_estimate", "sandwich_se"]

_CORR_CLAMP = 1.0 - 1e-8
_BAD_OBJECTIVE = -1e10


@dataclass
class EstOptions:
    sbar: float = 1e-7
    maxiter_bfgs: int = 60
    maxiter_nm: int = 800
    grad_eps: float = 1e-5
    nm_fatol: float = 1e-7
    nm_xatol: float = 1e-6
    penalty_weight: float = 1e8
    multi_start: int = 0
    seed: int = 0

    def replace(self, **kw) -> "EstOptions":
        return dc_replace(self, **kw)


@dataclass
class EstimationResult:
    theta_hat: ParameterVector
    sigma_obs: float
    objective: float
    converged: bool
    n_iter: int
    n_eval: int
    grad_norm: float
    message: str
    standard_errors: dict[str, float] | None = None
    scores: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Reparameterization
# ---------------------------------------------------------------------------

def _to_unconstrained(name: str, value: float) -> float:
    kind = PARAM_DOMAINS.get(name, "free")
    if kind == "pos":
        return float(np.log(value))
    if kind == "corr":
        return float(np.arctanh(np.clip(value, -_CORR_CLAMP, _CORR_CLAMP)))
    if kind == "unit":
        return float(np.arctanh(np.clip(2.0 * value - 1.0,
                                        -_CORR_CLAMP, _CORR_CLAMP)))
    return float(value)


def _from_unconstrained(name: str, z: float) -> float:
    kind = PARAM_DOMAINS.get(name, "free")
    if kind == "pos":
        return float(np.exp(z))
    if kind == "corr":
        return float(np.tanh(z))
    if kind == "unit":
        return float(0.5 * (np.tanh(z) + 1.0))
    return float(z)


def _dnatural_dz(name: str, z: float) -> float:
    kind = PARAM_DOMAINS.get(name, "free")
    if kind == "pos":
        return float(np.exp(z))
    if kind == "corr":
        return float(1.0 / np.cosh(z) ** 2)
    if kind == "unit":
        return float(0.5 / np.cosh(z) ** 2)
    return 1.0


def _free_names(params: ParameterVector) -> list[str]:
    return list(params.free_names()) + ["sigma_obs"]


def transform(params: ParameterVector, sigma_obs: float) -> np.ndarray:
    """Free parameters (plus the noise scale) as an unconstrained vector."""
    vals = []
    for name in _free_names(params):
        v = sigma_obs if name == "sigma_obs" else params[name]
        vals.append(_to_unconstrained(name, v))
    return np.array(vals)


def inverse_transform(z: np.ndarray, template: ParameterVector
                      ) -> tuple[ParameterVector, float]:
    names = _free_names(template)
    if len(z) != len(names):
        raise ValueError(f"expected {len(names)} entries, got {len(z)}")
    updates, sigma_obs = {}, None
    for name, zj in zip(names, z):
        v = _from_unconstrained(name, zj)
        if name == "sigma_obs":
            sigma_obs = v
        else:
            updates[name] = v
    return template.replace(**updates), float(sigma_obs)


def _penalty(params: ParameterVector, weight: float) -> float:
    """Smooth quadratic hinges on the admissibility margins."""
    p = params.values
    margins = [p["sigma"] ** 2 - 2.0 * p["kappa"] * p["v_bar"]]
    tag = params.model
    if tag in ("svcdej", "svcdej-ex"):
        drag = p["p_neg"] * p["delta"] * p["mu_v"]
    elif tag == "svcj":
        drag = p["delta"] * p["mu_v"]
    else:
        drag = p["delta1_neg"] * p["mu_v"]
    margins.append(drag - p["kappa"])
    margins.append(drag - (p["kappa"] + p.get("pi_v", 0.0)))
    if "eta_pos" in p:
        margins.append(p["eta_pos"] - 0.999)
    return weight * float(sum(max(g, 0.0) ** 2 for g in margins))


# ---------------------------------------------------------------------------
# Objective and optimizer driver
# ---------------------------------------------------------------------------

def _objective_factory(panel: list[CCFMeasurement], template: ParameterVector,
                       cp: CollapsedPanel, options: EstOptions):
    counter = {"n": 0}

    def loglik_terms(z: np.ndarray) -> np.ndarray:
        params, sigma_obs = inverse_transform(z, template)
        system = build_system(params, panel)
        run = kalman_pass(params, system, cp, sigma_obs)
        pen = _penalty(params, options.penalty_weight)
        return run.loglik_terms - pen / len(panel)

    def neg_objective(z: np.ndarray) -> float:
        counter["n"] += 1
        try:
            params, sigma_obs = inverse_transform(z, template)
            pen = _penalty(params, options.penalty_weight)
            system = build_system(params, panel)
            run = kalman_pass(params, system, cp, sigma_obs)
            val = run.loglik - pen
            if not np.isfinite(val):
                return -_BAD_OBJECTIVE
            return -val
        except (ValueError, ArithmeticError, np.linalg.LinAlgError,
                FloatingPointError):
            return -(_BAD_OBJECTIVE - _penalty(
                inverse_transform(z, template)[0], options.penalty_weight))

    return neg_objective, loglik_terms, counter


def _fd_gradient(f, z: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(z)
    for j in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp[j] += h
        zm[j] -= h
        g[j] = (f(zp) - f(zm)) / (2.0 * h)
    return g


def qml_estimate(panel: list[CCFMeasurement], theta0: ParameterVector,
                 options: EstOptions | None = None,
                 sigma_obs0: float = 0.02) -> EstimationResult:
    """Maximize the collapsed-filter quasi-likelihood in transformed space.

    A coarse BFGS stage (numerical gradients) is refined by Nelder-Mead;
    optional multi-start perturbs the starting point. Covariance blocks
    are pseudo-inverted once per call.
    """
    options = options or EstOptions()
    if not panel:
        raise ValueError("empty panel")
    cp = CollapsedPanel.build(panel, options.sbar)
    neg_obj, _, counter = _objective_factory(panel, theta0, cp, options)

    z0 = transform(theta0, sigma_obs0)
    starts = [z0]
    if options.multi_start > 0:
        rng = np.random.default_rng(options.seed)
        starts += [z0 + 0.05 * rng.standard_normal(z0.size)
                   for _ in range(options.multi_start)]

    best_z, best_val, n_iter, messages = None, np.inf, 0, []
    converged = False
    for z_start in starts:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            stage1 = minimize(neg_obj, z_start, method="BFGS",
                              options={"maxiter": options.maxiter_bfgs,
                                       "eps": options.grad_eps,
                                       "gtol": 1e-5})
            stage2 = minimize(neg_obj, stage1.x, method="Nelder-Mead",
                              options={"maxiter": options.maxiter_nm,
                                       "fatol": options.nm_fatol,
                                       "xatol": options.nm_xatol,
                                       "adaptive": True})
        n_iter += int(stage1.nit) + int(stage2.nit)
        messages.append(stage2.message)
        cand = stage2 if stage2.fun <= stage1.fun else stage1
        if cand.fun < best_val:
            best_val, best_z = float(cand.fun), cand.x.copy()
            converged = bool(stage2.success or stage1.success)

    grad = _fd_gradient(neg_obj, best_z, options.grad_eps)
    theta_hat, sigma_obs = inverse_transform(best_z, theta0)
    return EstimationResult(
        theta_hat=theta_hat, sigma_obs=sigma_obs, objective=-best_val,
        converged=converged, n_iter=n_iter, n_eval=counter["n"],
        grad_norm=float(np.max(np.abs(grad))), message="; ".join(
            str(m) for m in messages))


def sandwich_se(result: EstimationResult, panel: list[CCFMeasurement],
                options: EstOptions | None = None,
                hess_step: float = 1e-4, score_step: float = 1e-5
                ) -> EstimationResult:
    """Attach sandwich standard errors (natural units) to an estimate."""
    options = options or EstOptions()
    cp = CollapsedPanel.build(panel, options.sbar)
    _, loglik_terms, _ = _objective_factory(panel, result.theta_hat, cp,
                                            options)
    z = transform(result.theta_hat, result.sigma_obs)
    n = z.size
    T = len(panel)

    scores = np.zeros((T, n))
    for j in range(n):
        zp, zm = z.copy(), z.copy()
        zp[j] += score_step
        zm[j] -= score_step
        scores[:, j] = (loglik_terms(zp) - loglik_terms(zm)) / (2 * score_step)
    B = scores.T @ scores / T

    def mean_ll(zv):
        return float(np.mean(loglik_terms(zv)))

    f0 = mean_ll(z)
    A = np.zeros((n, n))
    h = hess_step
    for j in range(n):
        zp, zm = z.copy(), z.copy()
        zp[j] += h
        zm[j] -= h
        A[j, j] = -(mean_ll(zp) - 2 * f0 + mean_ll(zm)) / (h * h)
        for k in range(j + 1, n):
            zpp, zpm, zmp, zmm = z.copy(), z.copy(), z.copy(), z.copy()
            zpp[[j, k]] += h
            zmm[[j, k]] -= h
            zpm[j] += h
            zpm[k] -= h
            zmp[j] -= h
            zmp[k] += h
            A[j, k] = A[k, j] = -(mean_ll(zpp) - mean_ll(zpm)
                                  - mean_ll(zmp) + mean_ll(zmm)) / (4 * h * h)

    try:
        A_inv = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        warnings.warn("singular Hessian; ridge-regularizing for the sandwich")
        A_inv = np.linalg.inv(A + 1e-8 * np.eye(n))
    cov_z = A_inv @ B @ A_inv / T

    names = _free_names(result.theta_hat)
    ses = {}
    for j, name in enumerate(names):
        var = max(cov_z[j, j], 0.0)
        ses[name] = _dnatural_dz(name, z[j]) * float(np.sqrt(var))
    result.standard_errors = ses
    result.scores = scores
    return result
