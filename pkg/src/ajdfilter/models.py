"""Affine jump-diffusion (AJD) model family.

All models live on a state vector X whose first coordinate is the log
forward price. Drift, diffusion variance and jump intensities are affine
in the state:

    drift(x)      = K0 + K1 x
    diffusion(x)  = H0 + sum_j x_j H1[j]          (one matrix per coordinate)
    intensity_i(x) = l0_i + l1_i . x

Each jump type carries a transform chi(c) = E[exp(c . J)] for complex c,
which fully determines its size distribution for pricing purposes.

Model catalog (string tags):

    svcdej    stochastic volatility, double-exponential return jumps with
              exponential co-jumps in variance on negative return jumps,
              jump intensity delta * v
    svcj      Gaussian return jumps, exponential variance co-jumps on
              every jump
    svcej     separate counting processes for positive (constant
              intensity) and negative (intensity proportional to v)
              exponential jumps; variance co-jumps ride the negative one
    svcdej-ex svcdej augmented with an observed exogenous factor h that
              enters the diffusive variance (q^2 h) and the jump
              intensity (gamma h); h is treated as frozen over the option
              life, so it appears as a state coordinate with zero
              drift/diffusion rows
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "AffineModel",
    "JumpSpec",
    "ParameterVector",
    "PoleError",
    "MODEL_TAGS",
    "PARAM_ORDER",
    "PARAM_DOMAINS",
    "admissible",
    "build_model",
    "default_params",
    "expected_rel_jump",
]

MODEL_TAGS = ("svcdej", "svcj", "svcej", "svcdej-ex")

# Parameters in declaration order per model; estimation appends sigma_obs.
PARAM_ORDER: dict[str, tuple[str, ...]] = {
    "svcdej": ("sigma", "kappa", "v_bar", "rho", "delta",
               "eta_pos", "eta_neg", "mu_v", "p_neg"),
    "svcj": ("sigma", "kappa", "v_bar", "rho", "delta",
             "mu_j", "sigma_j", "mu_v"),
    "svcej": ("sigma", "kappa", "v_bar", "rho", "delta0_pos",
              "delta1_neg", "eta_pos", "eta_neg", "mu_v"),
    "svcdej-ex": ("sigma", "kappa", "v_bar", "rho", "delta",
                  "eta_pos", "eta_neg", "mu_v", "p_neg", "gamma", "q"),
}

# Domain kinds: pos -> (0, inf), corr -> [-1, 1], unit -> (0, 1), free -> R
PARAM_DOMAINS: dict[str, str] = {
    "sigma": "pos", "kappa": "pos", "v_bar": "pos", "rho": "corr",
    "delta": "pos", "eta_pos": "pos", "eta_neg": "pos", "mu_v": "pos",
    "p_neg": "unit", "mu_j": "free", "sigma_j": "pos",
    "delta0_pos": "pos", "delta1_neg": "pos",
    "gamma": "pos", "q": "pos", "pi_v": "free", "sigma_obs": "pos",
}

_POLE_TOL = 1e-12


class PoleError(ArithmeticError):
    """A jump-transform denominator came within tolerance of zero."""


class AdmissibilityError(ValueError):
    """Parameters violate the admissible region; carries the violation list."""

    def __init__(self, violations: list[str]):
        super().__init__("inadmissible parameters: " + "; ".join(violations))
        self.violations = violations


@dataclass
class JumpSpec:
    """One jump type: affine intensity l0 + l1.x and transform chi."""

    l0: float
    l1: np.ndarray
    transform: Callable[[np.ndarray], np.ndarray]
    # Analytic marginal jump moments (mean, second moment) per state
    # coordinate, where available; used by the closed-form transition
    # moments. Missing coordinates fall back to differentiating chi.
    moments: dict[int, tuple[float, float]] = field(default_factory=dict)


@dataclass
class AffineModel:
    """Full coefficient set of one AJD specification."""

    dim_state: int
    latent_idx: tuple[int, ...]
    K0: np.ndarray
    K1: np.ndarray
    H0: np.ndarray
    H1: np.ndarray          # shape (d_X, d_X, d_X); H1[j] multiplies x_j
    jumps: list[JumpSpec]
    rate: float = 0.0
    tag: str = ""

    @property
    def dim_latent(self) -> int:
        return len(self.latent_idx)

    def diffusion_at(self, x: np.ndarray) -> np.ndarray:
        """Instantaneous covariance H0 + sum_j x_j H1[j]."""
        return self.H0 + np.tensordot(np.asarray(x), self.H1, axes=(0, 0))


@dataclass
class ParameterVector:
    """Named parameters for one model tag, with fixed-value overrides.

    ``values`` holds every declared parameter. Names listed in ``fixed``
    keep their value during estimation. ``pi_v`` (variance risk premium,
    physical-measure mean reversion shift) defaults to a fixed zero.
    """

    model: str
    values: dict[str, float]
    fixed: tuple[str, ...] = ("p_neg", "pi_v")

    def __post_init__(self):
        if self.model not in MODEL_TAGS:
            raise ValueError(f"unknown model tag {self.model!r}")
        full = dict(self.values)
        full.setdefault("pi_v", 0.0)
        self.values = full
        missing = [n for n in PARAM_ORDER[self.model] if n not in full]
        if missing:
            raise ValueError(f"missing parameters for {self.model}: {missing}")

    def __getitem__(self, name: str) -> float:
        return self.values[name]

    def get(self, name: str, default: float = 0.0) -> float:
        return self.values.get(name, default)

    def free_names(self) -> tuple[str, ...]:
        names = [n for n in PARAM_ORDER[self.model] if n not in self.fixed]
        if "pi_v" in self.values and "pi_v" not in self.fixed:
            names.append("pi_v")
        return tuple(names)

    def replace(self, **updates: float) -> "ParameterVector":
        vals = dict(self.values)
        vals.update(updates)
        return ParameterVector(self.model, vals, self.fixed)


def default_params(tag: str) -> ParameterVector:
    """Reference parameter set used throughout the synthetic studies."""
    if tag in ("svcdej", "svcdej-ex"):
        vals = {"sigma": 0.45, "kappa": 8.0, "v_bar": 0.015, "rho": -0.95,
                "delta": 100.0, "eta_pos": 0.02, "eta_neg": 0.05,
                "mu_v": 0.05, "p_neg": 0.7}
        if tag == "svcdej-ex":
            vals.update({"gamma": 1.5, "q": 0.05})
        return ParameterVector(tag, vals)
    if tag == "svcj":
        return ParameterVector(tag, {
            "sigma": 0.40, "kappa": 5.0, "v_bar": 0.02, "rho": -0.95,
            "delta": 20.0, "mu_j": -0.10, "sigma_j": 0.04, "mu_v": 0.05})
    if tag == "svcej":
        return ParameterVector(tag, {
            "sigma": 0.45, "kappa": 8.0, "v_bar": 0.015, "rho": -0.95,
            "delta0_pos": 2.0, "delta1_neg": 100.0, "eta_pos": 0.01,
            "eta_neg": 0.05, "mu_v": 0.05})
    raise ValueError(f"unknown model tag {tag!r}")


# ---------------------------------------------------------------------------
# Jump transforms
# ---------------------------------------------------------------------------

def _guard(den: np.ndarray) -> np.ndarray:
    if np.any(np.abs(den) < _POLE_TOL):
        raise PoleError("jump transform denominator below pole tolerance")
    return den


def _chi_double_exp_cojump(p_pos, eta_pos, p_neg, eta_neg, mu_v, iy, iv):
    """Double-exponential return jump; variance co-jump on the negative leg."""

    def chi(c: np.ndarray) -> np.ndarray:
        c = np.asarray(c)
        cy, cv = c[..., iy], c[..., iv]
        pos = p_pos / _guard(1.0 - cy * eta_pos)
        neg = p_neg / (_guard(1.0 + cy * eta_neg) * _guard(1.0 - cv * mu_v))
        return pos + neg

    return chi


def _chi_gauss_cojump(mu_j, sigma_j, mu_v, iy, iv):
    """Gaussian return jump with an independent exponential variance jump."""

    def chi(c: np.ndarray) -> np.ndarray:
        c = np.asarray(c)
        cy, cv = c[..., iy], c[..., iv]
        return np.exp(mu_j * cy + 0.5 * sigma_j**2 * cy**2) / _guard(1.0 - cv * mu_v)

    return chi


def _chi_exp_neg_cojump(eta_neg, mu_v, iy, iv):
    """Negative-exponential return jump with exponential variance co-jump."""

    def chi(c: np.ndarray) -> np.ndarray:
        c = np.asarray(c)
        cy, cv = c[..., iy], c[..., iv]
        return 1.0 / (_guard(1.0 + cy * eta_neg) * _guard(1.0 - cv * mu_v))

    return chi


def _chi_exp_pos(eta_pos, iy):
    """Positive-exponential return jump, no variance effect."""

    def chi(c: np.ndarray) -> np.ndarray:
        c = np.asarray(c)
        return 1.0 / _guard(1.0 - c[..., iy] * eta_pos)

    return chi


def expected_rel_jump(params: ParameterVector) -> float:
    """E[exp(J) - 1] for the return jump(s); the martingale compensator scale."""
    tag = params.model
    if tag in ("svcdej", "svcdej-ex"):
        p_neg = params["p_neg"]
        return ((1.0 - p_neg) / (1.0 - params["eta_pos"])
                + p_neg / (1.0 + params["eta_neg"]) - 1.0)
    if tag == "svcj":
        return float(np.exp(params["mu_j"] + 0.5 * params["sigma_j"]**2) - 1.0)
    raise ValueError(f"no single compensator scale for {tag!r}")


# ---------------------------------------------------------------------------
# Admissibility
# ---------------------------------------------------------------------------

def _domain_violations(params: ParameterVector) -> list[str]:
    out = []
    for name, value in params.values.items():
        kind = PARAM_DOMAINS.get(name, "free")
        if kind == "pos" and not value > 0.0:
            out.append(f"{name} must be positive (got {value})")
        elif kind == "corr" and not -1.0 <= value <= 1.0:
            out.append(f"{name} must lie in [-1, 1] (got {value})")
        elif kind == "unit" and not 0.0 < value < 1.0:
            out.append(f"{name} must lie in (0, 1) (got {value})")
    return out


def admissible(params: ParameterVector) -> tuple[bool, list[str]]:
    """Feller + covariance-stationarity check with a named violation list."""
    v = _domain_violations(params)
    p = params.values
    tag = params.model

    if p["sigma"]**2 >= 2.0 * p["kappa"] * p["v_bar"]:
        v.append("Feller condition 2*kappa*v_bar > sigma^2 violated")

    if tag in ("svcdej", "svcdej-ex"):
        drag = p["p_neg"] * p["delta"] * p["mu_v"]
        if p["kappa"] <= drag:
            v.append("stationarity condition kappa > p_neg*delta*mu_v violated")
        if p["eta_pos"] >= 1.0:
            v.append("eta_pos must be below 1 for a finite jump compensator")
    elif tag == "svcj":
        if p["kappa"] <= p["delta"] * p["mu_v"]:
            v.append("stationarity condition kappa > delta*mu_v violated")
    elif tag == "svcej":
        if p["kappa"] <= p["delta1_neg"] * p["mu_v"]:
            v.append("stationarity condition kappa > delta1_neg*mu_v violated")
        if p["eta_pos"] >= 1.0:
            v.append("eta_pos must be below 1 for a finite jump compensator")

    pi_v = p.get("pi_v", 0.0)
    if pi_v != 0.0:
        drag = {"svcdej": p.get("p_neg", 1.0) * p.get("delta", 0.0) * p["mu_v"],
                "svcdej-ex": p.get("p_neg", 1.0) * p.get("delta", 0.0) * p["mu_v"],
                "svcj": p.get("delta", 0.0) * p["mu_v"],
                "svcej": p.get("delta1_neg", 0.0) * p["mu_v"]}[tag]
        if p["kappa"] + pi_v <= drag:
            v.append("physical-measure mean reversion kappa + pi_v too small")

    return (len(v) == 0), v


# ---------------------------------------------------------------------------
# Model builders
# ---------------------------------------------------------------------------

def build_model(params: ParameterVector, rate: float = 0.0,
                measure: str = "Q") -> AffineModel:
    """Assemble the affine coefficient set for the selected specification.

    ``measure="P"`` shifts the variance mean reversion by pi_v (transition
    side); the risk-neutral coefficients are unchanged otherwise.
    """
    ok, violations = admissible(params)
    if not ok:
        raise AdmissibilityError(violations)
    if measure not in ("Q", "P"):
        raise ValueError("measure must be 'Q' or 'P'")

    p = params.values
    tag = params.model
    kappa_eff = p["kappa"] + (p.get("pi_v", 0.0) if measure == "P" else 0.0)

    if tag in ("svcdej", "svcdej-ex"):
        mu = expected_rel_jump(params)
        with_ex = tag == "svcdej-ex"
        n = 3 if with_ex else 2
        K0 = np.zeros(n)
        K0[1] = kappa_eff * p["v_bar"]
        K1 = np.zeros((n, n))
        K1[0, 1] = -0.5 - mu * p["delta"]
        K1[1, 1] = -kappa_eff
        H1 = np.zeros((n, n, n))
        H1[1, :2, :2] = [[1.0, p["rho"] * p["sigma"]],
                         [p["rho"] * p["sigma"], p["sigma"]**2]]
        l1 = np.zeros(n)
        l1[1] = p["delta"]
        if with_ex:
            K1[0, 2] = -0.5 * p["q"]**2 - mu * p["gamma"]
            H1[2, 0, 0] = p["q"]**2
            l1[2] = p["gamma"]
        jump = JumpSpec(
            l0=0.0, l1=l1,
            transform=_chi_double_exp_cojump(
                1.0 - p["p_neg"], p["eta_pos"], p["p_neg"], p["eta_neg"],
                p["mu_v"], iy=0, iv=1),
            moments={1: (p["p_neg"] * p["mu_v"], 2.0 * p["p_neg"] * p["mu_v"]**2)})
        return AffineModel(n, (1,), K0, K1, np.zeros((n, n)), H1, [jump],
                           rate=rate, tag=tag)

    if tag == "svcj":
        mu = expected_rel_jump(params)
        K0 = np.array([0.0, kappa_eff * p["v_bar"]])
        K1 = np.array([[0.0, -0.5 - mu * p["delta"]],
                       [0.0, -kappa_eff]])
        H1 = np.zeros((2, 2, 2))
        H1[1] = [[1.0, p["rho"] * p["sigma"]],
                 [p["rho"] * p["sigma"], p["sigma"]**2]]
        jump = JumpSpec(
            l0=0.0, l1=np.array([0.0, p["delta"]]),
            transform=_chi_gauss_cojump(p["mu_j"], p["sigma_j"], p["mu_v"],
                                        iy=0, iv=1),
            moments={1: (p["mu_v"], 2.0 * p["mu_v"]**2)})
        return AffineModel(2, (1,), K0, K1, np.zeros((2, 2)), H1, [jump],
                           rate=rate, tag=tag)

    if tag == "svcej":
        mu_neg = -p["eta_neg"] / (1.0 + p["eta_neg"])
        mu_pos = p["eta_pos"] / (1.0 - p["eta_pos"])
        K0 = np.array([-mu_pos * p["delta0_pos"], kappa_eff * p["v_bar"]])
        K1 = np.array([[0.0, -0.5 - mu_neg * p["delta1_neg"]],
                       [0.0, -kappa_eff]])
        H1 = np.zeros((2, 2, 2))
        H1[1] = [[1.0, p["rho"] * p["sigma"]],
                 [p["rho"] * p["sigma"], p["sigma"]**2]]
        jump_neg = JumpSpec(
            l0=0.0, l1=np.array([0.0, p["delta1_neg"]]),
            transform=_chi_exp_neg_cojump(p["eta_neg"], p["mu_v"], iy=0, iv=1),
            moments={1: (p["mu_v"], 2.0 * p["mu_v"]**2)})
        jump_pos = JumpSpec(
            l0=p["delta0_pos"], l1=np.zeros(2),
            transform=_chi_exp_pos(p["eta_pos"], iy=0),
            moments={1: (0.0, 0.0)})
        return AffineModel(2, (1,), K0, K1, np.zeros((2, 2)), H1,
                           [jump_neg, jump_pos], rate=rate, tag=tag)

    raise ValueError(f"unknown model tag {tag!r}")
