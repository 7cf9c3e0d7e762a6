"""Quote panel to measurement panel pipeline.

Per date: filter quotes, pick tenors, extract the parity-implied forward,
build the OTM slice with per-quote implied vols, fit the total-variance
surface, then span and stack the option-implied log-CCFs with their
covariance blocks. Slice-level failures are logged and skipped; a date
ships as long as one tenor survives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .spanning import CCFMeasurement, build_measurement, default_u_grid
from .surface import (QuoteFilterRules, RateCurve, SliceError, extract_forward,
                      filter_quotes, make_slice, prepare_slice)

__all__ = ["PrepConfig", "PrepEvent", "prep_panel", "select_tenors"]


@dataclass
class PrepConfig:
    u_grid: np.ndarray = field(default_factory=default_u_grid)
    dm: float = 1e-4
    m_range: tuple[float, float] = (-6.0, 2.0)
    day_count_basis: float = 365.0
    use_volume: bool = True
    target_tenor_days: tuple[float, ...] | None = None
    filter_rules: QuoteFilterRules = field(default_factory=QuoteFilterRules)
    exog: pd.DataFrame | None = None     # columns: date, value


@dataclass
class PrepEvent:
    quote_date: object
    tenor_days: float | None
    code: str
    detail: str


def _otm_stats(g: pd.DataFrame, tau: float, r: float) -> tuple[float, int]:
    """OTM volume and contract count for the tenor-preference rule."""
    piv = _pivot(g)
    try:
        fwd = extract_forward(piv.index.to_numpy(),
                              piv["mid_call"].to_numpy(),
                              piv["mid_put"].to_numpy(), tau, r)
    except SliceError:
        return 0.0, 0
    otm = g[(g["is_call"] & (g["strike"] > fwd))
            | (~g["is_call"] & (g["strike"] <= fwd))]
    return float(otm["volume"].sum()), int(len(otm))


def _pivot(g: pd.DataFrame) -> pd.DataFrame:
    mid = (g["bid"] + g["ask"]) / 2.0
    df = pd.DataFrame({"strike": g["strike"], "is_call": g["is_call"],
                       "mid": mid, "volume": g["volume"]})
    out = df.pivot_table(index="strike", columns="is_call", values="mid",
                         aggfunc="last")
    vol = df.pivot_table(index="strike", columns="is_call", values="volume",
                         aggfunc="sum")
    out = out.rename(columns={True: "mid_call", False: "mid_put"})
    vol = vol.rename(columns={True: "vol_call", False: "vol_put"})
    for col in ("mid_call", "mid_put"):
        if col not in out:
            out[col] = np.nan
    for col in ("vol_call", "vol_put"):
        if col not in vol:
            vol[col] = np.nan
    return out.join(vol)


def select_tenors(available: dict[float, pd.DataFrame],
                  targets, rates: RateCurve, quote_date,
                  basis: float) -> list[float]:
    """Pick one tenor per target: the closest from below, stepping to the
    next shorter slice only when it has both more volume and more quoted
    OTM contracts."""
    days = np.array(sorted(available))
    chosen: list[float] = []
    stats_cache: dict[float, tuple[float, int]] = {}

    def stats(td: float) -> tuple[float, int]:
        if td not in stats_cache:
            r = rates.rate(quote_date, td)
            stats_cache[td] = _otm_stats(available[td], td / basis, r)
        return stats_cache[td]

    for target in targets:
        below = days[days <= target]
        if below.size == 0:
            continue
        current = float(below[-1])
        pos = int(np.searchsorted(days, current))
        while pos > 0:
            shorter = float(days[pos - 1])
            vol_c, n_c = stats(current)
            vol_s, n_s = stats(shorter)
            if vol_s > vol_c and n_s > n_c:
                current, pos = shorter, pos - 1
            else:
                break
        if current not in chosen:
            chosen.append(current)
    return sorted(chosen)


def prep_panel(quotes: pd.DataFrame, rates: pd.DataFrame, config: PrepConfig
               ) -> tuple[list[CCFMeasurement], list[PrepEvent]]:
    """Turn a raw quote panel into per-date CCF measurements."""
    events: list[PrepEvent] = []
    df = filter_quotes(quotes, config.filter_rules)
    if df.empty:
        raise ValueError("no quotes survive the liquidity filters")
    curve = RateCurve(rates)
    exog = None
    if config.exog is not None:
        e = config.exog.copy()
        e["date"] = pd.to_datetime(e["date"])
        exog = dict(zip(e["date"], e["value"]))

    df["tenor_days"] = (df["expiry_date"] - df["quote_date"]).dt.days.astype(float)
    measurements: list[CCFMeasurement] = []

    for date, day_df in df.groupby("quote_date", sort=True):
        by_tenor = {td: g for td, g in day_df.groupby("tenor_days")}
        if config.target_tenor_days is not None:
            tenors = select_tenors(by_tenor, config.target_tenor_days, curve,
                                   date, config.day_count_basis)
        else:
            tenors = sorted(by_tenor)

        surfaces = []
        for td in tenors:
            g = by_tenor[td]
            tau = td / config.day_count_basis
            try:
                r = curve.rate(date, td)
                piv = _pivot(g)
                fwd = extract_forward(piv.index.to_numpy(),
                                      piv["mid_call"].to_numpy(),
                                      piv["mid_put"].to_numpy(), tau, r)
                mid = (g["bid"] + g["ask"]).to_numpy() / 2.0
                sl = make_slice(date, td, tau, fwd, r,
                                g["strike"].to_numpy(), mid,
                                g["is_call"].to_numpy(),
                                g["volume"].to_numpy())
                surfaces.append(prepare_slice(sl, use_volume=config.use_volume))
            except (SliceError, KeyError, ValueError, ArithmeticError) as exc:
                events.append(PrepEvent(date, td, "slice_dropped", str(exc)))

        if not surfaces:
            events.append(PrepEvent(date, None, "date_dropped",
                                    "no tenor survived preparation"))
            continue
        w_obs = exog.get(pd.Timestamp(date)) if exog is not None else None
        try:
            measurements.append(build_measurement(
                surfaces, config.u_grid, config.dm, config.m_range,
                w_obs=w_obs))
        except Exception as exc:  # noqa: BLE001 - date skipped, run continues
            events.append(PrepEvent(date, None, "date_dropped", str(exc)))

    return measurements, events
