"""Option-implied conditional characteristic functions.

A weighted Riemann sum of OTM option prices replicates the discounted
CCF of log returns at any argument u:

    phi_hat(u, tau) = exp(-r tau)
        - (u^2 + i u) / F * sum_j exp((i u - 1) m_j) O(tau, m_j) dm_j

summed over j = 2..n. The complex log of phi_hat is taken sequentially
in u from the origin so the imaginary part never jumps branches. Under
multiplicative implied-vol observation noise, the stacked real/imaginary
measurement errors have a known covariance built from the covariance and
pseudo-covariance of the complex errors; both are weighted sums of
squared (bsiv * vega) over the same summation grid.

The dense summation grid and its complex exponential matrices are cached
per (u_grid, m-range, dm) since they are date-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .surface import PreparedSurface, evaluate_surface

__all__ = ["CCFMeasurement", "span_ccf", "log_ccf_unwrap",
           "measurement_covariance", "build_measurement",
           "write_panel", "read_panel",
           "DEFAULT_DM", "DEFAULT_M_RANGE", "default_u_grid"]

DEFAULT_DM = 1e-4
DEFAULT_M_RANGE = (-6.0, 2.0)

_NEAR_ZERO = 1e-14


def default_u_grid(u_max: int = 20) -> np.ndarray:
    return np.arange(1, u_max + 1, dtype=float)


class NearZeroModulusError(ArithmeticError):
    """CCF modulus too small for a stable complex logarithm."""


# ---------------------------------------------------------------------------
# Cached grid machinery
# ---------------------------------------------------------------------------

@dataclass
class _Grid:
    m_nodes: np.ndarray          # summation nodes m_2..m_n (uniform)
    dm: float
    exp_span: np.ndarray         # exp((i u - 1) m_j), shape (q, n-1)
    s_values: np.ndarray         # unique u_k - u_l and u_k + u_l
    exp_cov: np.ndarray          # exp(i s m_j), shape (len(s), n-1)
    diff_idx: np.ndarray         # (q, q) index of u_k - u_l into s_values
    sum_idx: np.ndarray          # (q, q) index of u_k + u_l into s_values


_GRID_CACHE: dict = {}


def _grid_for(u_grid: np.ndarray, m_range: tuple[float, float],
              dm: float) -> _Grid:
    key = (u_grid.tobytes(), float(m_range[0]), float(m_range[1]), float(dm))
    hit = _GRID_CACHE.get(key)
    if hit is not None:
        return hit
    m_lo, m_hi = m_range
    n = int(round((m_hi - m_lo) / dm))
    nodes = m_lo + dm * np.arange(1, n + 1)
    u = u_grid[:, None]
    exp_span = np.exp((1j * u - 1.0) * nodes[None, :])

    diff = u_grid[:, None] - u_grid[None, :]
    summ = u_grid[:, None] + u_grid[None, :]
    s_values, inv = np.unique(np.concatenate([diff.ravel(), summ.ravel()]),
                              return_inverse=True)
    q = u_grid.size
    diff_idx = inv[:q * q].reshape(q, q)
    sum_idx = inv[q * q:].reshape(q, q)
    exp_cov = np.exp(1j * s_values[:, None] * nodes[None, :])
    grid = _Grid(nodes, float(dm), exp_span, s_values, exp_cov,
                 diff_idx, sum_idx)
    if len(_GRID_CACHE) > 4:
        _GRID_CACHE.clear()
    _GRID_CACHE[key] = grid
    return grid


# ---------------------------------------------------------------------------
# Spanning and the complex log
# ---------------------------------------------------------------------------

def span_ccf(prices_or_surface, u_grid, tau: float | None = None,
             F: float | None = None, r: float | None = None,
             dm: float = DEFAULT_DM,
             m_range: tuple[float, float] = DEFAULT_M_RANGE,
             m_nodes: np.ndarray | None = None) -> np.ndarray:
    """Riemann-sum CCF replication over a prepared surface or price grid.

    Pass a PreparedSurface (tau, F, r inferred; prices evaluated on the
    dense uniform grid), or an array of prices with explicit ``m_nodes``
    for raw-grid experiments where the Riemann weights are the node
    spacings.
    """
    u = np.atleast_1d(np.asarray(u_grid, dtype=float))
    if isinstance(prices_or_surface, PreparedSurface):
        ps = prices_or_surface
        tau, F, r = ps.tau, ps.forward, ps.rate
        grid = _grid_for(u, m_range, dm)
        prices = evaluate_surface(ps, grid.m_nodes)["otm_price"]
        weighted = prices * dm
        sums = grid.exp_span @ weighted
    else:
        if m_nodes is None or tau is None or F is None or r is None:
            raise ValueError("raw-grid spanning needs m_nodes, tau, F and r")
        m = np.asarray(m_nodes, dtype=float)
        prices = np.asarray(prices_or_surface, dtype=float)
        w = np.diff(m)  # weights for nodes m_2..m_n
        ex = np.exp((1j * u[:, None] - 1.0) * m[None, 1:])
        sums = ex @ (prices[1:] * w)
    u_t = (u * u + 1j * u) / F
    return np.exp(-r * tau) - u_t * sums


def log_ccf_unwrap(phi: np.ndarray) -> np.ndarray:
    """Complex log with branch continuity along ascending arguments.

    The first value takes the principal branch; callers anchoring at the
    origin should prepend phi(0) (real positive) and drop it afterwards.
    """
    phi = np.asarray(phi, dtype=complex)
    mod = np.abs(phi)
    if np.any(mod < _NEAR_ZERO):
        bad = int(np.argmax(mod < _NEAR_ZERO))
        raise NearZeroModulusError(
            f"|phi|={mod[bad]:.3e} at position {bad}; phase unidentifiable")
    return np.log(mod) + 1j * np.unwrap(np.angle(phi))


# ---------------------------------------------------------------------------
# Measurement covariance
# ---------------------------------------------------------------------------

def _psd_project(mat: np.ndarray) -> np.ndarray:
    sym = 0.5 * (mat + mat.T)
    w, v = np.linalg.eigh(sym)
    if w[0] >= 0.0:
        return sym
    return (v * np.maximum(w, 0.0)) @ v.T


def measurement_covariance(bsiv, vega, u_grid, phi, F: float,
                           weights=None, m_nodes=None,
                           sigma_scale: float = 1.0,
                           grid: "_Grid | None" = None) -> np.ndarray:
    """Unit-scale covariance block of the stacked log-CCF measurements.

    ``bsiv``/``vega`` live on the summation nodes; ``weights`` are the
    Riemann increments (squared inside the sums). The returned 2q x 2q
    block is the real/imaginary composition of the covariance and
    pseudo-covariance of the log-linearized errors, scaled by
    ``sigma_scale`` squared, symmetrized and eigenvalue-clipped at zero.
    """
    u = np.atleast_1d(np.asarray(u_grid, dtype=float))
    phi = np.asarray(phi, dtype=complex)
    if np.any(np.abs(phi) < _NEAR_ZERO):
        raise NearZeroModulusError("phi value too small in covariance scaling")
    bsiv = np.asarray(bsiv, dtype=float)
    vega = np.asarray(vega, dtype=float)

    if grid is not None:
        nodes = grid.m_nodes
        w_j = (bsiv * vega) ** 2 * grid.dm**2 * np.exp(-2.0 * nodes)
        f_s = grid.exp_cov @ w_j
        f_diff = f_s[grid.diff_idx]
        f_sum = f_s[grid.sum_idx]
    else:
        if weights is None or m_nodes is None:
            raise ValueError("need weights and m_nodes without a cached grid")
        nodes = np.asarray(m_nodes, dtype=float)
        w_j = (bsiv * vega) ** 2 * np.asarray(weights, dtype=float) ** 2 \
            * np.exp(-2.0 * nodes)
        diff = u[:, None] - u[None, :]
        summ = u[:, None] + u[None, :]
        s_values, inv = np.unique(np.concatenate([diff.ravel(), summ.ravel()]),
                                  return_inverse=True)
        f_s = np.exp(1j * s_values[:, None] * nodes[None, :]) @ w_j
        q = u.size
        f_diff = f_s[inv[:q * q].reshape(q, q)]
        f_sum = f_s[inv[q * q:].reshape(q, q)]

    u_t = (u * u + 1j * u) / F
    gamma = (u_t[:, None] * np.conj(u_t)[None, :]) * f_diff \
        / (phi[:, None] * np.conj(phi)[None, :])
    pseudo = (u_t[:, None] * u_t[None, :]) * f_sum \
        / (phi[:, None] * phi[None, :])

    top = np.hstack([0.5 * np.real(gamma + pseudo),
                     0.5 * np.imag(-gamma + pseudo)])
    bot = np.hstack([0.5 * np.imag(gamma + pseudo),
                     0.5 * np.real(gamma - pseudo)])
    block = np.vstack([top, bot]) * sigma_scale**2
    return _psd_project(block)


# ---------------------------------------------------------------------------
# Per-date measurement assembly
# ---------------------------------------------------------------------------

@dataclass
class CCFMeasurement:
    """Stacked log-CCF observations for one date across tenors.

    ``y`` is ordered [Re block, Im block] within each tenor, tenors
    ascending; ``h_blocks`` holds the per-tenor unit-scale covariance
    blocks (block-diagonal across tenors by construction).
    """

    quote_date: pd.Timestamp
    tenor_days: np.ndarray
    taus: np.ndarray
    forwards: np.ndarray
    rates: np.ndarray
    u_grid: np.ndarray
    y: np.ndarray
    h_blocks: list[np.ndarray]
    phi: np.ndarray | None = None      # (k, q) spanned CCF values
    w_obs: float | None = None         # observed exogenous state, if any

    @property
    def dim(self) -> int:
        return self.y.size


def build_measurement(surfaces: list[PreparedSurface], u_grid=None,
                      dm: float = DEFAULT_DM,
                      m_range: tuple[float, float] = DEFAULT_M_RANGE,
                      w_obs: float | None = None) -> CCFMeasurement:
    """Span, unwrap and stack one date's prepared surfaces.

    Any failing tenor aborts the date with context naming it.
    """
    if not surfaces:
        raise ValueError("need at least one prepared surface")
    surfaces = sorted(surfaces, key=lambda s: s.tau)
    date = surfaces[0].quote_date
    u = default_u_grid() if u_grid is None else \
        np.atleast_1d(np.asarray(u_grid, dtype=float))
    grid = _grid_for(u, m_range, dm)

    y_parts, blocks, phis = [], [], []
    for ps in surfaces:
        try:
            vals = evaluate_surface(ps, grid.m_nodes)
            weighted = vals["otm_price"] * dm
            u_t = (u * u + 1j * u) / ps.forward
            disc = np.exp(-ps.rate * ps.tau)
            phi = disc - u_t * (grid.exp_span @ weighted)
            logphi = log_ccf_unwrap(np.concatenate([[disc + 0j], phi]))[1:]
            block = measurement_covariance(vals["bsiv"], vals["vega"], u, phi,
                                           ps.forward, grid=grid)
        except Exception as exc:
            raise type(exc)(
                f"{date.date()} tenor {ps.tenor_days:g}d: {exc}") from exc
        y_parts.append(np.concatenate([np.real(logphi), np.imag(logphi)]))
        blocks.append(block)
        phis.append(phi)

    return CCFMeasurement(
        quote_date=date,
        tenor_days=np.array([s.tenor_days for s in surfaces]),
        taus=np.array([s.tau for s in surfaces]),
        forwards=np.array([s.forward for s in surfaces]),
        rates=np.array([s.rate for s in surfaces]),
        u_grid=u,
        y=np.concatenate(y_parts),
        h_blocks=blocks,
        phi=np.vstack(phis),
        w_obs=w_obs)


# ---------------------------------------------------------------------------
# Panel files
# ---------------------------------------------------------------------------

def write_panel(measurements: list[CCFMeasurement], meas_path, blocks_path
                ) -> None:
    """Persist a measurement panel: one CSV of stacked observations and a
    sidecar of dense covariance blocks (row-major, one line per block)."""
    rows = []
    for m in measurements:
        for i, (td, tau, fw, rt) in enumerate(zip(m.tenor_days, m.taus,
                                                  m.forwards, m.rates)):
            q = m.u_grid.size
            re = m.y[2 * q * i: 2 * q * i + q]
            im = m.y[2 * q * i + q: 2 * q * (i + 1)]
            for j, u in enumerate(m.u_grid):
                rows.append((m.quote_date.date().isoformat(), td, tau, fw, rt,
                             u, re[j], im[j],
                             "" if m.w_obs is None else m.w_obs))
    df = pd.DataFrame(rows, columns=["quote_date", "tenor_days", "tau_years",
                                     "forward", "rate", "u", "y_re", "y_im",
                                     "w_obs"])
    df.to_csv(meas_path, index=False, float_format="%.17g")

    with open(blocks_path, "w") as fh:
        fh.write("# quote_date tenor_days dim values(row-major)\n")
        for m in measurements:
            for td, block in zip(m.tenor_days, m.h_blocks):
                vals = " ".join(f"{v:.17g}" for v in block.ravel())
                fh.write(f"{m.quote_date.date().isoformat()} {td:.17g} "
                         f"{block.shape[0]} {vals}\n")


def read_panel(meas_path, blocks_path) -> list[CCFMeasurement]:
    df = pd.read_csv(meas_path, parse_dates=["quote_date"])
    blocks: dict[tuple, np.ndarray] = {}
    with open(blocks_path) as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            parts = line.split()
            date, td, dim = parts[0], float(parts[1]), int(parts[2])
            vals = np.array(parts[3:], dtype=float).reshape(dim, dim)
            blocks[(date, td)] = vals

    out = []
    for date, g in df.groupby("quote_date", sort=True):
        tenors = np.sort(g["tenor_days"].unique())
        u = np.sort(g["u"].unique())
        y_parts, h_blocks, taus, fwds, rates = [], [], [], [], []
        w_obs = None
        for td in tenors:
            gt = g[g["tenor_days"] == td].sort_values("u")
            if not np.allclose(gt["u"].to_numpy(), u):
                raise ValueError(f"inconsistent u grid on {date} tenor {td}")
            y_parts.append(np.concatenate([gt["y_re"].to_numpy(),
                                           gt["y_im"].to_numpy()]))
            taus.append(gt["tau_years"].iloc[0])
            fwds.append(gt["forward"].iloc[0])
            rates.append(gt["rate"].iloc[0])
            if "w_obs" in gt and not pd.isna(gt["w_obs"].iloc[0]):
                w = gt["w_obs"].iloc[0]
                w_obs = None if w == "" else float(w)
            h_blocks.append(blocks[(date.date().isoformat(), float(td))])
        out.append(CCFMeasurement(
            quote_date=pd.Timestamp(date), tenor_days=np.asarray(tenors, float),
            taus=np.array(taus), forwards=np.array(fwds), rates=np.array(rates),
            u_grid=np.asarray(u, float), y=np.concatenate(y_parts),
            h_blocks=h_blocks, w_obs=w_obs))
    return out
