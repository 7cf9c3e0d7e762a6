"""Coefficient ODEs for the exponential-affine conditional characteristic
function of an AJD state vector.

For argument u (applied to the log-forward coordinate) the discounted CCF is

    E[exp(i u log F_{t+tau}) | F_t] * exp(-r tau)
        = exp(alpha(u, tau) + beta(u, tau) . X_t),

where beta solves a generalized Riccati system driven by the affine
coefficients and jump transforms, and alpha integrates beta against the
drift/diffusion intercepts (minus the rate). Initial conditions are
beta(u, 0) = i u e1 and alpha(u, 0) = 0. The log-return version uses
beta_tilde = beta - i u e1, whose first component vanishes for martingale
forward dynamics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .models import AffineModel, PoleError

__all__ = ["CCFCoefficients", "RiccatiError", "riccati_solve", "model_ccf",
           "return_cumulant_coeffs"]


class RiccatiError(RuntimeError):
    """ODE integration failed; message carries the failing (u, tau) context."""


@dataclass
class CCFCoefficients:
    """Solved coefficients on an argument x tenor grid.

    alpha has shape (q, k); beta and beta_tilde have shape (q, k, d_X).
    """

    u_grid: np.ndarray
    tau_grid: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    beta_tilde: np.ndarray
    rate: float

    def tau_index(self, tau: float) -> int:
        j = int(np.argmin(np.abs(self.tau_grid - tau)))
        if abs(self.tau_grid[j] - tau) > 1e-12:
            raise LookupError(f"tau={tau} not on the coefficient grid")
        return j

    def u_index(self, u: complex) -> int:
        j = int(np.argmin(np.abs(self.u_grid - u)))
        if abs(self.u_grid[j] - u) > 1e-12:
            raise LookupError(f"u={u} not on the coefficient grid")
        return j


def _rhs_factory(model: AffineModel, q: int, n: int, last_t: list):
    K0, K1, H0, H1 = model.K0, model.K1, model.H0, model.H1
    rate = model.rate
    jumps = model.jumps
    has_H0 = np.any(H0)

    def rhs(t, y):
        last_t[0] = t
        beta = y[q:].reshape(q, n)
        dbeta = beta @ K1
        dbeta += 0.5 * np.einsum("jkl,qk,ql->qj", H1, beta, beta)
        dalpha = beta @ K0 - rate
        if has_H0:
            dalpha += 0.5 * np.einsum("kl,qk,ql->q", H0, beta, beta)
        for jump in jumps:
            excess = jump.transform(beta) - 1.0
            if jump.l0:
                dalpha += jump.l0 * excess
            dbeta += np.outer(excess, jump.l1)
        return np.concatenate([dalpha, dbeta.ravel()])

    return rhs


def riccati_solve(model: AffineModel, u_grid, tau_grid,
                  rtol: float = 1e-10, atol: float = 1e-10,
                  max_step: float = np.inf, arg_index: int = 0
                  ) -> CCFCoefficients:
    """Integrate the coefficient system for a batch of arguments.

    ``u_grid`` may be real or complex; ``tau_grid`` must be ascending and
    non-negative (a leading zero returns the initial conditions exactly).
    All arguments share one adaptive embedded Runge-Kutta 4(5) pass with
    output captured at each requested tenor. ``arg_index`` selects the
    state coordinate carrying the argument (0 = log forward price; the
    transition-moment machinery points it at a latent coordinate).
    """
    u = np.atleast_1d(np.asarray(u_grid))
    taus = np.atleast_1d(np.asarray(tau_grid, dtype=float))
    if taus.size == 0 or np.any(np.diff(taus) <= 0) or taus[0] < 0:
        raise ValueError("tau_grid must be ascending and non-negative")
    q, n = u.size, model.dim_state

    alpha = np.zeros((q, taus.size), dtype=complex)
    beta = np.zeros((q, taus.size, n), dtype=complex)
    iu_e1 = np.zeros((q, n), dtype=complex)
    iu_e1[:, arg_index] = 1j * u

    positive = taus > 0
    if positive.any():
        y0 = np.concatenate([np.zeros(q, dtype=complex), iu_e1.ravel()])
        last_t = [0.0]
        rhs = _rhs_factory(model, q, n, last_t)
        t_eval = taus[positive]
        try:
            sol = solve_ivp(rhs, (0.0, t_eval[-1]), y0, method="RK45",
                            t_eval=t_eval, rtol=rtol, atol=atol,
                            max_step=max_step)
        except PoleError as exc:
            raise PoleError(
                f"{exc} at tau~{last_t[0]:.6g}, u in "
                f"[{u.real.min():.4g}, {u.real.max():.4g}]") from exc
        if not sol.success:
            worst = u[np.argmax(np.abs(iu_e1[:, 0]))]
            raise RiccatiError(
                f"integration stalled at tau~{last_t[0]:.6g} "
                f"(requested {t_eval[-1]:.6g}), u batch around {worst}: "
                f"{sol.message}")
        ys = sol.y.T  # (k_pos, q*(n+1))
        alpha[:, positive] = ys[:, :q].T
        beta[:, positive, :] = ys[:, q:].reshape(-1, q, n).transpose(1, 0, 2)

    beta[:, ~positive, :] = iu_e1[:, None, :]
    beta_tilde = beta - iu_e1[:, None, :]
    return CCFCoefficients(u, taus, alpha, beta, beta_tilde, model.rate)


def model_ccf(coeffs: CCFCoefficients, model: AffineModel, state,
              u: complex, tau: float) -> complex:
    """Discounted log-return CCF exp(alpha + beta_tilde . X) at one grid node."""
    i, j = coeffs.u_index(u), coeffs.tau_index(tau)
    x = np.asarray(state, dtype=float)
    if x.shape != (model.dim_state,):
        raise ValueError(f"state must have shape ({model.dim_state},)")
    return complex(np.exp(coeffs.alpha[i, j] + coeffs.beta_tilde[i, j] @ x))


def ccf_grid(coeffs: CCFCoefficients, state) -> np.ndarray:
    """Vectorized CCF over the full (u, tau) grid for one state. Shape (q, k)."""
    x = np.asarray(state, dtype=float)
    return np.exp(coeffs.alpha + coeffs.beta_tilde @ x)


def return_cumulant_coeffs(model: AffineModel, tau: float, h: float = 0.5,
                           rtol: float = 1e-10, atol: float = 1e-10
                           ) -> dict[int, tuple[float, np.ndarray]]:
    """Affine coefficients of the log-return cumulants at one tenor.

    Returns {order: (intercept, state loading)} for orders 1, 2, 4 so that
    cumulant_n(X) = intercept + loading . X. Uses five-point central
    differences of the undiscounted log-CCF in the argument; conjugate
    symmetry halves the stencil. Accuracy is ample for truncation-range
    selection.
    """
    coeffs = riccati_solve(model, np.array([h, 2 * h]), np.array([tau]),
                           rtol=rtol, atol=atol)
    # Undiscounted log-CCF pieces; both vanish at u = 0.
    a1, a2 = coeffs.alpha[:, 0] + model.rate * tau
    b1, b2 = coeffs.beta_tilde[:, 0, :]

    def stencil(f1, f2):
        k1 = (8.0 * np.imag(f1) - np.imag(f2)) / (6.0 * h)
        k2 = -(32.0 * np.real(f1) - 2.0 * np.real(f2)) / (12.0 * h * h)
        k4 = (2.0 * np.real(f2) - 8.0 * np.real(f1)) / h**4
        return k1, k2, k4

    ka = stencil(a1, a2)
    kb = stencil(b1, b2)
    return {1: (ka[0], kb[0]), 2: (ka[1], kb[1]), 4: (ka[2], kb[2])}
