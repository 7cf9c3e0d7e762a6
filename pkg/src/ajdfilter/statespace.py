"""Linear state space assembly and the collapsed, modified Kalman filter.

The measurement equation stacks real and imaginary parts of the per-tenor
log-CCF observations: intercepts come from the coefficient ODE solution
(plus loadings on observed exogenous states), the latent loadings form
Z_t, and the error covariance is sigma^2 times precomputed unit-scale
blocks. The collapse projects the p-dimensional observation onto the
d-dimensional GLS estimate of the latent state,

    y*_t = (Z' H~^- Z)^{-1} Z' H~^- y_t,

with the discarded directions entering the likelihood only through the
GLS residual quadratic form. Pseudo-inverses handle (near-)singular
blocks; the transition variance is evaluated at the floored filtered
state, which keeps the affine variance positive semidefinite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import AffineModel, ParameterVector, build_model
from .moments import ConditionalMomentCoeffs, stationary_init, transition_coeffs
from .riccati import riccati_solve
from .spanning import CCFMeasurement

__all__ = ["SystemMatrices", "FilterRun", "PseudoInverse", "CollapsedPanel",
           "build_system", "pseudo_inverse", "collapse", "kalman_pass",
           "RankError", "DegenerateBlockError"]

TRADING_DAYS = 250.0
STATE_FLOOR = 1e-10


class RankError(np.linalg.LinAlgError):
    """Collapse rank condition rank(Z' H^- Z) = d failed."""


class DegenerateBlockError(np.linalg.LinAlgError):
    """Every singular value of a covariance block fell below threshold."""


# ---------------------------------------------------------------------------
# System assembly
# ---------------------------------------------------------------------------

@dataclass
class SystemMatrices:
    """Per-date measurement intercepts/loadings plus transition blocks."""

    dates: list
    d: list[np.ndarray]                    # per date, (p_t,)
    Z: list[np.ndarray]                    # per date, (p_t, d_latent)
    trans: list[ConditionalMomentCoeffs]   # step t -> t+1; last entry reused
    p: np.ndarray                          # per-date observation dims
    dim_latent: int


def build_system(params: ParameterVector, panel: list[CCFMeasurement],
                 dt_sequence: np.ndarray | None = None,
                 rtol: float = 1e-10, atol: float = 1e-10) -> SystemMatrices:
    """Solve the coefficient ODEs once per distinct tenor and stack.

    Discounting is applied per date-tenor as -r tau on the intercept,
    so one rate-free ODE solve serves the whole panel. Calendar gaps set
    the transition steps (day gaps over 250) unless ``dt_sequence``
    overrides them.
    """
    if not panel:
        raise ValueError("empty measurement panel")
    model = build_model(params, rate=0.0)
    model_p = build_model(params, rate=0.0, measure="P")
    latent = list(model.latent_idx)

    u = panel[0].u_grid
    all_taus = np.unique(np.concatenate([m.taus for m in panel]))
    for m in panel:
        if not np.array_equal(m.u_grid, u):
            raise ValueError("u grid varies across the panel")
    sol = riccati_solve(model, u, all_taus, rtol=rtol, atol=atol)
    tau_pos = {tau: j for j, tau in enumerate(all_taus)}

    if np.max(np.abs(sol.beta_tilde[:, :, 0])) > 1e-8:
        raise ValueError("log-forward loading does not cancel; the model is "
                         "not a martingale in the forward")

    obs_idx = [j for j in range(model.dim_state)
               if j not in latent and j != 0]

    d_list, z_list = [], []
    for m in panel:
        d_parts, z_parts = [], []
        for i, tau in enumerate(m.taus):
            j = tau_pos[tau]
            a = sol.alpha[:, j] - m.rates[i] * tau
            if obs_idx:
                if m.w_obs is None:
                    raise ValueError(
                        f"{m.quote_date.date()}: model expects an observed "
                        "exogenous state but the panel carries none")
                a = a + sol.beta_tilde[:, j, obs_idx[0]] * m.w_obs
            bx = sol.beta_tilde[:, j, latent]
            d_parts.append(np.concatenate([np.real(a), np.imag(a)]))
            z_parts.append(np.vstack([np.real(bx), np.imag(bx)]))
        d_list.append(np.concatenate(d_parts))
        z_list.append(np.vstack(z_parts))

    dates = [m.quote_date for m in panel]
    if dt_sequence is None:
        gaps = np.array([(dates[t + 1] - dates[t]).days / TRADING_DAYS
                         for t in range(len(dates) - 1)] or [1.0 / TRADING_DAYS])
    else:
        gaps = np.asarray(dt_sequence, dtype=float)

    cm_cache: dict[tuple, ConditionalMomentCoeffs] = {}
    trans = []
    for t in range(len(panel)):
        dt = gaps[min(t, len(gaps) - 1)]
        w = panel[t].w_obs
        key = (round(dt, 12), w)
        if key not in cm_cache:
            obs_state = None
            if obs_idx and w is not None:
                x = np.zeros(model.dim_state)
                x[obs_idx[0]] = w
                obs_state = x
            cm_cache[key] = transition_coeffs(model_p, dt, obs_state)
        trans.append(cm_cache[key])

    p = np.array([m.y.size for m in panel])
    return SystemMatrices(dates, d_list, z_list, trans, p, len(latent))


# ---------------------------------------------------------------------------
# Pseudo-inversion and collapsing
# ---------------------------------------------------------------------------

@dataclass
class PseudoInverse:
    inv: np.ndarray
    log_pdet: float
    rank: int


def pseudo_inverse(block: np.ndarray, sbar: float = 1e-7) -> PseudoInverse:
    """Moore-Penrose inverse zeroing singular values below the threshold
    sbar * dim * max singular value."""
    block = np.asarray(block, dtype=float)
    n = block.shape[0]
    w, v = np.linalg.eigh(0.5 * (block + block.T))
    s = np.abs(w)
    tol = sbar * n * s.max() if s.size else 0.0
    keep = s > tol
    if not keep.any():
        raise DegenerateBlockError(
            f"all {n} singular values below threshold {tol:.3e}")
    inv = (v[:, keep] / s[keep]) @ v[:, keep].T
    return PseudoInverse(inv=inv, log_pdet=float(np.sum(np.log(s[keep]))),
                         rank=int(keep.sum()))


@dataclass
class CollapseResult:
    y_star: np.ndarray
    d_star: np.ndarray
    h_star: np.ndarray       # unit-scale (Z' H~^- Z)^{-1}
    gls_quad: float          # e' H~^- e (unit scale)
    log_det_h_star: float


def collapse(y: np.ndarray, d: np.ndarray, Z: np.ndarray,
             h_inv: np.ndarray) -> CollapseResult:
    """Project one date's observation onto the latent dimension.

    ``h_inv`` is the (pseudo-)inverse of the unit-scale covariance; the
    noise scale reenters only in the filter. The GLS residual quadratic
    uses the identity e' H^- e = r' H^- r - b' M b with M = Z' H^- Z and
    b the GLS coefficient, so the complement projection is never formed.
    """
    Z = np.atleast_2d(Z)
    if Z.shape[0] != y.size:
        Z = Z.T
    d_lat = Z.shape[1]
    S = Z.T @ h_inv                       # (d, p)
    M = 0.5 * ((S @ Z) + (S @ Z).T)
    w = np.linalg.eigvalsh(M)
    rank = int(np.sum(w > max(w.max(), 0.0) * 1e-12))
    if rank < d_lat:
        raise RankError(f"rank(Z' H^- Z) = {rank} < {d_lat}")
    M_inv = np.linalg.inv(M)
    r = y - d
    Sr = S @ r
    b = M_inv @ Sr
    gls = float(r @ (h_inv @ r) - Sr @ b)
    return CollapseResult(y_star=M_inv @ (S @ y),
                          d_star=M_inv @ (S @ d),
                          h_star=M_inv,
                          gls_quad=max(gls, 0.0),
                          log_det_h_star=float(-np.linalg.slogdet(M)[1]))


# ---------------------------------------------------------------------------
# Precomputed panel quantities
# ---------------------------------------------------------------------------

@dataclass
class CollapsedPanel:
    """Pseudo-inverted covariance blocks and data products for one panel.

    Computed once per (panel, sbar); every likelihood evaluation reuses
    them. ``regular`` marks panels with a common tenor set and uniform
    block sizes, which unlocks the vectorized likelihood path.
    """

    panel: list[CCFMeasurement]
    sbar: float
    h_inv: list[list[np.ndarray]]
    log_pdet_h: np.ndarray     # per date: sum of retained log singulars
    rank: np.ndarray           # per date: total retained rank
    regular: bool
    # Regular-panel stacks (T, k, n, n), (T, k, n), (T,)
    hinv_stack: np.ndarray | None = None
    y_stack: np.ndarray | None = None
    hinv_y: np.ndarray | None = None
    y_hinv_y: np.ndarray | None = None

    @classmethod
    def build(cls, panel: list[CCFMeasurement], sbar: float = 1e-7
              ) -> "CollapsedPanel":
        h_inv, log_pdet, rank = [], [], []
        for m in panel:
            invs, lp, rk = [], 0.0, 0
            for block in m.h_blocks:
                p = pseudo_inverse(block, sbar)
                invs.append(p.inv)
                lp += p.log_pdet
                rk += p.rank
            h_inv.append(invs)
            log_pdet.append(lp)
            rank.append(rk)

        k0 = len(panel[0].h_blocks)
        n0 = panel[0].h_blocks[0].shape[0]
        regular = all(len(m.h_blocks) == k0
                      and all(b.shape[0] == n0 for b in m.h_blocks)
                      and np.array_equal(m.taus, panel[0].taus)
                      for m in panel)
        out = cls(panel, float(sbar), h_inv, np.asarray(log_pdet),
                  np.asarray(rank, dtype=int), regular)
        if regular:
            T = len(panel)
            out.hinv_stack = np.stack([np.stack(h) for h in h_inv])
            q = panel[0].u_grid.size
            y = np.stack([m.y.reshape(k0, 2 * q) for m in panel])
            out.y_stack = y
            out.hinv_y = np.einsum("tkmn,tkn->tkm", out.hinv_stack, y)
            out.y_hinv_y = np.einsum("tkm,tkm->t", y, out.hinv_y)
        return out


# ---------------------------------------------------------------------------
# The filter
# ---------------------------------------------------------------------------

@dataclass
class FilterRun:
    """Filtered/predicted states and per-date likelihood pieces."""

    dates: list
    x_pred: np.ndarray
    p_pred: np.ndarray
    x_filt: np.ndarray
    p_filt: np.ndarray
    omega: np.ndarray             # collapsed innovations
    g_star: np.ndarray            # innovation MSEs (scaled)
    gls_quad: np.ndarray          # unit-scale GLS residual quadratics
    log_det_h_star: np.ndarray    # unit-scale, per date
    log_pdet_h: np.ndarray        # unit-scale pseudo-logdet of the blocks
    rank: np.ndarray
    p_dim: np.ndarray
    loglik_terms: np.ndarray      # per-date proportional contributions
    loglik: float


def _collapse_all(params: ParameterVector, system: SystemMatrices,
                  cp: CollapsedPanel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-date (b_t, M_t, gls_t) with b the collapsed innovation anchor
    y* - d*, M = Z' H~^- Z and gls the unit-scale residual quadratic."""
    T = len(cp.panel)
    d_lat = system.dim_latent
    if cp.regular and d_lat == 1:
        k = len(cp.panel[0].h_blocks)
        n = cp.panel[0].h_blocks[0].shape[0]
        z = np.stack([system.Z[0][i * n:(i + 1) * n, 0] for i in range(k)])
        dd = np.stack([system.d[0][i * n:(i + 1) * n] for i in range(k)])
        # Intercepts are date-varying only through rates or w_obs; detect.
        d_same = all(np.array_equal(system.d[t], system.d[0])
                     and np.array_equal(system.Z[t], system.Z[0])
                     for t in range(1, T))
        if d_same:
            zh = np.einsum("kn,tknm->tkm", z, cp.hinv_stack)
            M = np.einsum("tkm,km->t", zh, z)
            Sy = np.einsum("tkm,tkm->t", zh, cp.y_stack)
            Sd = np.einsum("tkm,km->t", zh, dd)
            hd = np.einsum("tkmn,kn->tkm", cp.hinv_stack, dd)
            dhd = np.einsum("km,tkm->t", dd.reshape(k, n), hd)
            dhy = np.einsum("tkm,km->t", cp.hinv_y, dd)
            quad_r = cp.y_hinv_y - 2.0 * dhy + dhd
            S = Sy - Sd
            b = S / M
            gls = np.maximum(quad_r - S * S / M, 0.0)
            return b[:, None], M[:, None, None], gls

    b = np.zeros((T, d_lat))
    M = np.zeros((T, d_lat, d_lat))
    gls = np.zeros(T)
    for t, m in enumerate(cp.panel):
        q = m.u_grid.size
        n = 2 * q
        Mt = np.zeros((d_lat, d_lat))
        St = np.zeros(d_lat)
        quad = 0.0
        for i, h_inv in enumerate(cp.h_inv[t]):
            sl = slice(i * n, (i + 1) * n)
            Zb = system.Z[t][sl]
            rb = m.y[sl] - system.d[t][sl]
            hr = h_inv @ rb
            Mt += Zb.T @ h_inv @ Zb
            St += Zb.T @ hr
            quad += rb @ hr
        w = np.linalg.eigvalsh(Mt)
        if np.sum(w > max(w.max(), 0) * 1e-12) < d_lat:
            raise RankError(f"collapse rank deficiency on {m.quote_date}")
        bt = np.linalg.solve(Mt, St)
        b[t] = bt
        M[t] = Mt
        gls[t] = max(quad - St @ bt, 0.0)
    return b, M, gls


def kalman_pass(params: ParameterVector, system: SystemMatrices,
                cp: CollapsedPanel, sigma_obs: float,
                init: tuple[np.ndarray, np.ndarray] | None = None
                ) -> FilterRun:
    """Collapsed modified-Kalman recursion and the QML objective.

    The proportional log-likelihood is
    0.5 sum_t(-log|G*| - w*'G*^-1 w* - e'H^-e + log|H*|) - p_t log sigma,
    with H = sigma^2 H~ and all unit-scale pieces precomputed.
    """
    if sigma_obs <= 0:
        raise ValueError("sigma_obs must be positive")
    T = len(cp.panel)
    d_lat = system.dim_latent
    s2 = sigma_obs * sigma_obs

    b, M, gls = _collapse_all(params, system, cp)

    if init is None:
        x, P = stationary_init(system.trans[0])
    else:
        x, P = np.atleast_1d(init[0]).astype(float), np.atleast_2d(init[1])

    x_pred = np.zeros((T, d_lat))
    p_pred = np.zeros((T, d_lat, d_lat))
    x_filt = np.zeros((T, d_lat))
    p_filt = np.zeros((T, d_lat, d_lat))
    omega = np.zeros((T, d_lat))
    g_star = np.zeros((T, d_lat, d_lat))
    ld_hstar = np.zeros(T)
    terms = np.zeros(T)
    eye = np.eye(d_lat)

    for t in range(T):
        x_pred[t], p_pred[t] = x, P
        M_t = M[t]
        sign, logdet_m = np.linalg.slogdet(M_t)
        if sign <= 0:
            raise RankError(f"collapse failed at step {t}")
        h_star = s2 * np.linalg.inv(M_t)
        ld_hstar[t] = -logdet_m  # unit scale
        w = b[t] - x
        G = P + h_star
        G_inv = np.linalg.inv(G)
        sign_g, logdet_g = np.linalg.slogdet(G)
        if sign_g <= 0:
            raise np.linalg.LinAlgError(f"non-PD innovation MSE at step {t}")
        K = P @ G_inv
        x = x + K @ w
        P = P - K @ P
        P = 0.5 * (P + P.T)
        x = np.maximum(x, STATE_FLOOR)
        x_filt[t], p_filt[t] = x, P
        omega[t], g_star[t] = w, G

        terms[t] = 0.5 * (-logdet_g - w @ G_inv @ w - gls[t] / s2
                          + 2 * d_lat * np.log(sigma_obs) - logdet_m) \
            - system.p[t] * np.log(sigma_obs)
        if not np.isfinite(terms[t]):
            raise FloatingPointError(
                f"non-finite likelihood contribution at "
                f"{cp.panel[t].quote_date.date()}")

        cm = system.trans[t]
        Q = cm.variance_at(np.maximum(x, STATE_FLOOR))
        x = cm.c + cm.T @ x
        P = cm.T @ P @ cm.T.T + Q
        P = 0.5 * (P + P.T)

    return FilterRun(
        dates=system.dates, x_pred=x_pred, p_pred=p_pred, x_filt=x_filt,
        p_filt=p_filt, omega=omega, g_star=g_star, gls_quad=gls,
        log_det_h_star=ld_hstar, log_pdet_h=cp.log_pdet_h, rank=cp.rank,
        p_dim=system.p, loglik_terms=terms, loglik=float(terms.sum()))
