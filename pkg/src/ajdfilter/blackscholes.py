"""Black pricing on forwards, implied-volatility inversion and vega.

Prices are discounted Black-76 values. The vega convention follows the
observation-error model: nu = F sqrt(tau) phi(d_plus) with
d_plus = -m / sqrt(w) + sqrt(w) / 2 for total implied variance
w = sigma^2 tau and log-moneyness m = log(K/F). The discount factor is
deliberately not applied to vega so that the same quantity scales both
the injected noise and the measurement covariance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

__all__ = ["QuoteGreeks", "BoundsError", "bs_price", "implied_vol", "vega",
           "implied_vol_vector"]

_SQRT_2PI = np.sqrt(2.0 * np.pi)


class BoundsError(ValueError):
    """Price lies outside its no-arbitrage bounds; message names the side."""


@dataclass
class QuoteGreeks:
    """Implied volatility, vega and total variance of one quote."""

    bsiv: float
    vega: float
    total_variance: float


def _norm_pdf(x):
    return np.exp(-0.5 * x * x) / _SQRT_2PI


def bs_price(F, K, tau, r, sigma, is_call):
    """Discounted Black price on the forward. Vectorized over all inputs."""
    F, K, tau, sigma = (np.asarray(a, dtype=float) for a in (F, K, tau, sigma))
    is_call = np.asarray(is_call, dtype=bool)
    sq = sigma * np.sqrt(tau)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = np.where(sq > 0, (np.log(F / K) + 0.5 * sq * sq) / np.maximum(sq, 1e-300), np.inf)
    d2 = d1 - sq
    disc = np.exp(-np.asarray(r, dtype=float) * tau)
    call = disc * (F * ndtr(d1) - K * ndtr(d2))
    put = disc * (K * ndtr(-d2) - F * ndtr(-d1))
    # Zero-vol limit: discounted intrinsic on the forward.
    call = np.where(sq > 0, call, disc * np.maximum(F - K, 0.0))
    put = np.where(sq > 0, put, disc * np.maximum(K - F, 0.0))
    out = np.where(is_call, call, put)
    return out if out.ndim else float(out)


def vega(F, K, tau, r, sigma):
    """F sqrt(tau) phi(d_plus); the observation-error scale per unit vol."""
    F, K, tau, sigma = (np.asarray(a, dtype=float) for a in (F, K, tau, sigma))
    w = sigma * sigma * tau
    m = np.log(K / F)
    d_plus = -m / np.sqrt(w) + 0.5 * np.sqrt(w)
    out = F * np.sqrt(tau) * _norm_pdf(d_plus)
    return out if out.ndim else float(out)


def greeks_from_vol(F, K, tau, r, sigma) -> QuoteGreeks:
    return QuoteGreeks(bsiv=float(sigma), vega=float(vega(F, K, tau, r, sigma)),
                       total_variance=float(sigma * sigma * tau))


def _price_bounds(F, K, tau, r, is_call):
    disc = np.exp(-r * tau)
    if is_call:
        return disc * max(F - K, 0.0), disc * F
    return disc * max(K - F, 0.0), disc * K


def implied_vol(price, F, K, tau, r, is_call, tol=1e-12, max_iter=100):
    """Invert the Black price for the annualized volatility.

    Newton steps with the analytic derivative; falls back to bisection
    after 8 consecutive non-improving steps. The price must lie strictly
    inside the no-arbitrage bounds.
    """
    lo, hi = _price_bounds(F, K, tau, r, is_call)
    if price <= lo:
        raise BoundsError(f"price {price} at or below intrinsic bound {lo}")
    if price >= hi:
        raise BoundsError(f"price {price} at or above forward bound {hi}")

    disc = np.exp(-r * tau)
    lo_sig, hi_sig = 1e-9, 10.0
    # Expand the bracket upward if extreme vols are needed.
    while bs_price(F, K, tau, r, hi_sig, is_call) < price and hi_sig < 1e4:
        hi_sig *= 2.0
    sig = max(min(np.sqrt(2.0 * np.pi / tau) * price / F, hi_sig), 1e-4)

    best_sig, best_err = sig, np.inf
    stale = 0
    for _ in range(max_iter):
        val = bs_price(F, K, tau, r, sig, is_call)
        err = val - price
        if abs(err) < best_err:
            best_err, best_sig = abs(err), sig
            stale = 0
        else:
            stale += 1
        if abs(err) < tol:
            return float(sig)
        if err > 0:
            hi_sig = sig
        else:
            lo_sig = sig
        dprice = disc * vega(F, K, tau, r, sig)
        if stale >= 8 or dprice <= 1e-100 or not np.isfinite(dprice):
            sig = 0.5 * (lo_sig + hi_sig)
            continue
        nxt = sig - err / dprice
        if not lo_sig < nxt < hi_sig:
            nxt = 0.5 * (lo_sig + hi_sig)
        sig = nxt
    return float(best_sig)


def implied_vol_vector(prices, F, K, tau, r, is_call, tol=1e-12,
                       max_iter=100) -> np.ndarray:
    """Vectorized inversion over a strike slice.

    Same Newton-with-bisection scheme as the scalar solver, run in
    lockstep over the array. Entries whose price violates its bounds
    come back as NaN rather than raising; slice preparation drops them.
    """
    prices = np.asarray(prices, dtype=float)
    K = np.broadcast_to(np.asarray(K, dtype=float), prices.shape).copy()
    is_call = np.broadcast_to(np.asarray(is_call, dtype=bool), prices.shape)
    disc = np.exp(-r * tau)
    intrinsic = np.where(is_call, np.maximum(F - K, 0.0), np.maximum(K - F, 0.0)) * disc
    cap = np.where(is_call, F, K) * disc
    ok = (prices > intrinsic) & (prices < cap)

    lo = np.full(prices.shape, 1e-9)
    hi = np.full(prices.shape, 10.0)
    for _ in range(20):
        need = ok & (bs_price(F, K, tau, r, hi, is_call) < prices)
        if not need.any() or hi.max() > 1e4:
            break
        hi = np.where(need, hi * 2.0, hi)
    sig = np.clip(np.sqrt(2.0 * np.pi / tau) * prices / F, 1e-4, hi)

    best = sig.copy()
    best_err = np.full(prices.shape, np.inf)
    stale = np.zeros(prices.shape, dtype=int)
    active = ok.copy()
    for _ in range(max_iter):
        if not active.any():
            break
        val = bs_price(F, K, tau, r, sig, is_call)
        err = val - prices
        improved = np.abs(err) < best_err
        best = np.where(improved & active, sig, best)
        best_err = np.where(improved & active, np.abs(err), best_err)
        stale = np.where(improved, 0, stale + 1)
        active &= np.abs(err) >= tol
        hi = np.where(active & (err > 0), sig, hi)
        lo = np.where(active & (err <= 0), sig, lo)
        dprice = disc * vega(F, K, tau, r, np.maximum(sig, 1e-12))
        newton = sig - err / np.maximum(dprice, 1e-300)
        bad = (stale >= 8) | (dprice <= 0) | ~np.isfinite(newton) \
            | (newton <= lo) | (newton >= hi)
        sig = np.where(active, np.where(bad, 0.5 * (lo + hi), newton), sig)
    out = np.where(ok, best, np.nan)
    return out
