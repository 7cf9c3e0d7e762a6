"""Quote filtering, forward extraction and total-variance surfaces.

One date-tenor cross-section of OTM quotes is turned into a continuous
total-variance curve: a natural cubic spline through a selected knot
subset of the observed (log-moneyness, total variance) points, extended
beyond the observed strike range by straight lines in log-moneyness.

Knots are chosen so the spline interpolates clean quotes and merely
approximates stale or arbitrage-violating runs (tick-size plateaus in
deep OTM wings). Tail slopes come from the spline's end derivatives,
clamped into the butterfly-arbitrage-free interval; slopes are capped at
2 in magnitude so the wings respect the moment bounds for implied
variance growth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.interpolate import CubicSpline

from .blackscholes import bs_price, implied_vol_vector

__all__ = [
    "QuoteFilterRules", "SliceError", "SurfaceArbitrageError",
    "OptionSlice", "PreparedSurface", "RateCurve",
    "filter_quotes", "extract_forward", "make_slice", "select_knots",
    "fit_surface", "evaluate_surface", "max_wing_slope", "prepare_slice",
]

_EDGE_SHRINK = 1e-10   # keeps clamped slopes strictly inside open bounds


class SliceError(ValueError):
    """A date-tenor slice cannot be prepared."""


class SurfaceArbitrageError(ValueError):
    def __init__(self, m: float):
        super().__init__(f"negative total variance at log-moneyness {m:.6g}")
        self.m = m


# ---------------------------------------------------------------------------
# Quote filtering and rates
# ---------------------------------------------------------------------------

@dataclass
class QuoteFilterRules:
    min_days: int = 2
    max_days: int = 365
    max_ask_bid: float = 10.0
    early_closures: frozenset = field(default_factory=frozenset)


def filter_quotes(quotes: pd.DataFrame, rules: QuoteFilterRules | None = None
                  ) -> pd.DataFrame:
    """Retain quotes with positive bids, sane spreads and eligible tenors.

    Expects columns quote_date, expiry_date, is_call, strike, bid, ask,
    volume with datetime-like date columns.
    """
    rules = rules or QuoteFilterRules()
    df = quotes.copy()
    df["quote_date"] = pd.to_datetime(df["quote_date"])
    df["expiry_date"] = pd.to_datetime(df["expiry_date"])
    days = (df["expiry_date"] - df["quote_date"]).dt.days
    keep = (df["bid"] > 0.0)
    keep &= df["ask"] < rules.max_ask_bid * df["bid"]
    keep &= (days >= rules.min_days) & (days <= rules.max_days)
    if rules.early_closures:
        closures = pd.to_datetime(sorted(rules.early_closures))
        keep &= ~df["quote_date"].isin(closures)
    return df.loc[keep].reset_index(drop=True)


class RateCurve:
    """Zero-rate curve per date; linear in tenor days, flat outside."""

    def __init__(self, rates: pd.DataFrame):
        df = rates.copy()
        df["date"] = pd.to_datetime(df["date"])
        self._by_date = {
            d: (g["tenor_days"].to_numpy(dtype=float),
                g["rate"].to_numpy(dtype=float))
            for d, g in df.sort_values(["date", "tenor_days"]).groupby("date")}
        self._dates = sorted(self._by_date)

    def rate(self, quote_date, tenor_days: float) -> float:
        d = pd.to_datetime(quote_date)
        if d not in self._by_date:
            earlier = [x for x in self._dates if x <= d]
            if not earlier:
                raise KeyError(f"no rates on or before {d.date()}")
            d = earlier[-1]
        days, rates = self._by_date[d]
        return float(np.interp(tenor_days, days, rates))


def extract_forward(strikes, call_mids, put_mids, tau: float, r: float,
                    max_pairs: int = 5) -> float:
    """Median parity-implied forward from the tightest call/put pairs.

    Takes up to ``max_pairs`` strikes with the smallest |C - P| and
    returns the median of K + exp(r tau) (C - P).
    """
    K = np.asarray(strikes, dtype=float)
    C = np.asarray(call_mids, dtype=float)
    P = np.asarray(put_mids, dtype=float)
    both = np.isfinite(C) & np.isfinite(P)
    if not both.any():
        raise SliceError("no strike carries both a call and a put quote")
    K, C, P = K[both], C[both], P[both]
    order = np.argsort(np.abs(C - P), kind="stable")[:max_pairs]
    implied = K[order] + np.exp(r * tau) * (C[order] - P[order])
    return float(np.median(implied))


# ---------------------------------------------------------------------------
# Slices
# ---------------------------------------------------------------------------

@dataclass
class OptionSlice:
    """One date-tenor OTM cross-section (puts for m <= 0, calls above)."""

    quote_date: pd.Timestamp
    tenor_days: float
    tau: float
    forward: float
    rate: float
    m: np.ndarray
    mid: np.ndarray
    bsiv: np.ndarray
    vega: np.ndarray
    volume: np.ndarray
    is_call: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.m) <= 0):
            raise SliceError("log-moneyness grid must be strictly increasing")


def make_slice(quote_date, tenor_days, tau, forward, rate,
               strikes, mids, is_call, volume=None) -> OptionSlice:
    """Build an OTM slice from quotes, inverting implied vols per quote.

    Rows on the wrong side of the forward (in-the-money) are dropped, as
    are quotes whose price violates its Black bounds.
    """
    from .blackscholes import vega as bs_vega

    K = np.asarray(strikes, dtype=float)
    mid = np.asarray(mids, dtype=float)
    call = np.asarray(is_call, dtype=bool)
    vol = (np.full(K.shape, np.nan) if volume is None
           else np.asarray(volume, dtype=float))

    m = np.log(K / forward)
    otm = np.where(m <= 0, ~call, call)
    K, mid, call, vol, m = K[otm], mid[otm], call[otm], vol[otm], m[otm]

    order = np.argsort(m, kind="stable")
    K, mid, call, vol, m = K[order], mid[order], call[order], vol[order], m[order]
    # Collapse duplicate strikes (possible at the ATM boundary).
    uniq = np.concatenate([[True], np.diff(m) > 1e-14])
    K, mid, call, vol, m = K[uniq], mid[uniq], call[uniq], vol[uniq], m[uniq]

    iv = implied_vol_vector(mid, forward, K, tau, rate, call)
    good = np.isfinite(iv) & (iv > 0)
    if good.sum() < 4:
        raise SliceError(
            f"only {int(good.sum())} usable quotes after implied-vol inversion")
    K, mid, call, vol, m, iv = (a[good] for a in (K, mid, call, vol, m, iv))
    veg = bs_vega(forward, K, tau, rate, iv)
    return OptionSlice(pd.to_datetime(quote_date), float(tenor_days),
                       float(tau), float(forward), float(rate),
                       m, mid, iv, veg, vol, call)


# ---------------------------------------------------------------------------
# Knot selection
# ---------------------------------------------------------------------------

def _complement_prices(s: OptionSlice) -> tuple[np.ndarray, np.ndarray]:
    """Put and call prices at every node via parity from the OTM mid."""
    K = s.forward * np.exp(s.m)
    parity = np.exp(-s.rate * s.tau) * (s.forward - K)
    call = np.where(s.is_call, s.mid, s.mid + parity)
    put = np.where(s.is_call, s.mid - parity, s.mid)
    return put, call


def _walk(idx: np.ndarray, put: np.ndarray, call: np.ndarray,
          volume: np.ndarray, primary_put: bool, use_volume: bool) -> list[int]:
    """Walk outward from the ATM-nearest quote applying the knot rules.

    ``idx`` orders the wing from near-ATM to deep OTM. The seed always
    enters. A candidate joins when its primary OTM price strictly falls
    and its parity complement strictly rises versus the adjacent quote on
    the ATM side, the next deeper neighbour does not break monotonicity
    against it, and it traded more than one contract.
    """
    if idx.size == 0:
        return []
    out = [int(idx[0])]
    prim, comp = (put, call) if primary_put else (call, put)
    for pos in range(1, idx.size):
        i, prev = idx[pos], idx[pos - 1]
        if not (prim[i] < prim[prev] and comp[i] > comp[prev]):
            continue
        if pos + 1 < idx.size:
            nxt = idx[pos + 1]
            if not (prim[nxt] <= prim[i] and comp[nxt] >= comp[i]):
                continue
        if use_volume and not volume[i] > 1:
            continue
        out.append(int(i))
    return out


def select_knots(s: OptionSlice, use_volume: bool = True) -> np.ndarray:
    """Indices of the slice quotes serving as spline knots."""
    idx, _ = _select_knots_flagged(s, use_volume)
    return idx


def _select_knots_flagged(s: OptionSlice, use_volume: bool
                          ) -> tuple[np.ndarray, bool]:
    """Knot indices plus a flag marking the monotone-subsequence fallback."""
    put, call = _complement_prices(s)
    volume = s.volume
    if use_volume and not np.isfinite(volume).all():
        use_volume = False

    puts_out = np.nonzero(~s.is_call)[0][::-1]   # near-ATM first, then deeper
    calls_out = np.nonzero(s.is_call)[0]
    knots = sorted(_walk(puts_out, put, call, volume, True, use_volume)
                   + _walk(calls_out, put, call, volume, False, use_volume))
    if len(knots) >= 4:
        return np.asarray(knots, dtype=int), False

    # Fallback: greedy monotone subsequence of the OTM prices per wing
    # (prices must decay moving away from the money).
    keep = []
    for wing in (puts_out, calls_out):
        last = np.inf
        for i in wing:
            if s.mid[i] < last:
                keep.append(int(i))
                last = s.mid[i]
    keep = sorted(set(keep))
    if len(keep) < 4:
        raise SliceError(f"only {len(keep)} monotone quotes; slice dropped")
    return np.asarray(keep, dtype=int), True


# ---------------------------------------------------------------------------
# Wing slope bounds
# ---------------------------------------------------------------------------

def _wing_ok(beta: float, m0: float, w0: float) -> bool:
    """No butterfly arbitrage on the right wing w(m) = w0 + beta (m - m0).

    The normalized density factor g(m) = (1 - m w'/(2w))^2
    - w'^2/4 (1/w + 1/4) (zero curvature on a line) stays nonnegative iff
    the quadratic 4 w^2 g(m) in m is nonnegative on [m0, inf).
    """
    if beta == 0.0:
        return True
    c = w0 - beta * m0
    A = beta * beta * (1.0 - beta * beta / 4.0)
    B = 4.0 * beta * c - beta**3 - 0.5 * beta**3 * c
    Cc = 4.0 * c * c - beta * beta * c - 0.25 * beta * beta * c * c
    G0 = A * m0 * m0 + B * m0 + Cc
    if G0 < 0.0:
        return False
    if A <= 0.0:
        # beta >= 2: the quadratic opens down (or is linear); nonnegativity
        # on an infinite interval needs a nonnegative slope as well.
        return beta <= 2.0 and B >= 0.0
    vertex = -B / (2.0 * A)
    if vertex <= m0:
        return True
    return A * vertex * vertex + B * vertex + Cc >= 0.0


def max_wing_slope(m_edge: float, w_edge: float) -> float:
    """Largest arbitrage-free right-wing slope at the junction point.

    Bisects the butterfly condition over [0, 2]; the left-wing bound is
    the mirror image -max_wing_slope(-m_edge, w_edge).
    """
    if w_edge <= 0:
        raise ValueError("total variance at the edge must be positive")
    lo, hi = 0.0, 2.0
    if _wing_ok(hi, m_edge, w_edge):
        return hi
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if _wing_ok(mid, m_edge, w_edge):
            lo = mid
        else:
            hi = mid
    return lo


# ---------------------------------------------------------------------------
# Surface fitting and evaluation
# ---------------------------------------------------------------------------

@dataclass
class PreparedSurface:
    """Spline-plus-linear-tails total variance curve for one slice.

    Carries the observed quote grid (moneyness, implied vol, vega) since
    the measurement-error covariance sums run over the observed options,
    not the interpolation grid.
    """

    quote_date: pd.Timestamp
    tenor_days: float
    tau: float
    forward: float
    rate: float
    spline: CubicSpline
    m_lo: float
    m_hi: float
    beta_low: float
    beta_up: float
    c_low: float
    c_up: float
    knot_m: np.ndarray
    knot_w: np.ndarray
    quote_m: np.ndarray = None
    quote_bsiv: np.ndarray = None
    quote_vega: np.ndarray = None
    flagged: bool = False

    def total_variance(self, m) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        w = np.empty_like(m)
        left = m < self.m_lo
        right = m > self.m_hi
        mid = ~(left | right)
        w[mid] = self.spline(m[mid])
        w[left] = self.c_low + self.beta_low * m[left]
        w[right] = self.c_up + self.beta_up * m[right]
        return w


def fit_surface(s: OptionSlice, knots: np.ndarray,
                flagged: bool = False) -> PreparedSurface:
    """Natural cubic spline through knot total variances with Lee tails."""
    if knots.size < 4:
        raise SliceError("need at least four knots for the cubic spline")
    km = s.m[knots]
    kw = s.bsiv[knots] ** 2 * s.tau
    spline = CubicSpline(km, kw, bc_type="natural")

    m_lo, m_hi = float(km[0]), float(km[-1])
    w_lo, w_hi = float(kw[0]), float(kw[-1])
    dspl = spline.derivative()

    up_cap = min(max_wing_slope(m_hi, w_hi), 2.0) - _EDGE_SHRINK
    lo_cap = max(-max_wing_slope(-m_lo, w_lo), -2.0) + _EDGE_SHRINK
    beta_up = float(np.clip(dspl(m_hi), 0.0, max(up_cap, 0.0)))
    beta_low = float(np.clip(dspl(m_lo), min(lo_cap, 0.0), 0.0))
    c_low = w_lo - beta_low * m_lo
    c_up = w_hi - beta_up * m_hi

    ps = PreparedSurface(s.quote_date, s.tenor_days, s.tau, s.forward, s.rate,
                         spline, m_lo, m_hi, beta_low, beta_up, c_low, c_up,
                         km.copy(), kw.copy(), s.m.copy(), s.bsiv.copy(),
                         s.vega.copy(), flagged)
    grid = np.linspace(m_lo, m_hi, 2001)
    w = ps.total_variance(grid)
    if np.any(w <= 0.0):
        raise SurfaceArbitrageError(float(grid[np.argmin(w)]))
    return ps


def prepare_slice(s: OptionSlice, use_volume: bool = True) -> PreparedSurface:
    """Knot selection plus surface fit for one slice."""
    knots, flagged = _select_knots_flagged(s, use_volume)
    return fit_surface(s, knots, flagged=flagged)


def evaluate_surface(ps: PreparedSurface, m) -> dict[str, np.ndarray]:
    """Total variance, implied vol, vega and OTM price at arbitrary moneyness."""
    m = np.atleast_1d(np.asarray(m, dtype=float))
    w = ps.total_variance(m)
    neg = w <= 0.0
    if np.any(neg):
        raise SurfaceArbitrageError(float(m[neg][0]))
    bsiv = np.sqrt(w / ps.tau)
    K = ps.forward * np.exp(m)
    price = bs_price(ps.forward, K, ps.tau, ps.rate, bsiv, m > 0)
    d_plus = -m / np.sqrt(w) + 0.5 * np.sqrt(w)
    veg = ps.forward * np.sqrt(ps.tau) \
        * np.exp(-0.5 * d_plus * d_plus) / np.sqrt(2.0 * np.pi)
    return {"total_variance": w, "bsiv": bsiv, "vega": veg, "otm_price": price}


def dump_surface(ps: PreparedSurface) -> str:
    """Plain-text dump: header line, knots, then tail parameters."""
    lines = [f"# surface {ps.quote_date.date()} tenor_days={ps.tenor_days:g} "
             f"tau={ps.tau:.12g} forward={ps.forward:.12g} rate={ps.rate:.12g}",
             "# knots: m total_variance"]
    for m, w in zip(ps.knot_m, ps.knot_w):
        lines.append(f"{m:.12g} {w:.12g}")
    lines.append(f"# tails: beta_low={ps.beta_low:.12g} c_low={ps.c_low:.12g} "
                 f"beta_up={ps.beta_up:.12g} c_up={ps.c_up:.12g}")
    return "\n".join(lines) + "\n"
