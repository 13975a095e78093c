"""Carleman weights, time-window parameters and overflow-safe weighted quadrature."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import integrate
from scipy.special import logsumexp

from .grid import Grid
from .media import CoefficientPair, pseudoconvexity_constant

# quintic smoothstep 6u^5 - 15u^4 + 10u^3 has max slope 15/8 at u = 1/2
SMOOTHSTEP_MAX_SLOPE = 1.875


class InfeasibleParameters(ValueError):
    """The weight constraints cannot be met; the message names the inequality."""


@dataclass(frozen=True)
class CarlemanParams:
    x0: tuple[float, float, float]
    gamma: float
    beta: float
    beta0: float
    delta: float
    eps: float
    T: float
    varrho: float
    max_psi0: float
    s_grid: tuple = ()
    d0: float = field(init=False)
    d1: float = field(init=False)
    s_star: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))
        object.__setattr__(self, "s_grid", tuple(float(s) for s in self.s_grid))
        object.__setattr__(self, "d0", float(np.exp(self.gamma * (self.beta0 - self.delta / 2))))
        object.__setattr__(self, "d1", float(np.exp(self.gamma * self.beta0)))
        object.__setattr__(self, "s_star", 2.0 * SMOOTHSTEP_MAX_SLOPE / self.eps if self.eps > 0 else np.inf)

    def with_s_grid(self, s_grid) -> "CarlemanParams":
        return replace(self, s_grid=tuple(s_grid))


def make_s_grid(s_min: float, s_max: float, count: int, spacing: str = "log") -> np.ndarray:
    if spacing == "log":
        return np.geomspace(s_min, s_max, count)
    if spacing == "linear":
        return np.linspace(s_min, s_max, count)
    raise ValueError(f"unknown s spacing {spacing!r}")


def max_psi0(grid: Grid, x0) -> float:
    """``max |x - x0|^2`` over the closed box (attained at a corner)."""
    return float(((grid.corners() - np.asarray(x0)) ** 2).sum(axis=1).max())


def validate_params(p: CarlemanParams, c0: float) -> None:
    """Raise :class:`InfeasibleParameters` naming the first violated constraint."""
    dist = np.sqrt(p.max_psi0)
    if p.delta <= 0:
        raise InfeasibleParameters("delta > 0 required (the time-window gap collapses, d1 > d0 fails)")
    if p.gamma <= 0:
        raise InfeasibleParameters("gamma > 0 required")
    if p.varrho <= 0:
        raise InfeasibleParameters(
            f"pseudo-convexity constant varrho={p.varrho:.6g} <= 0: weight |x-x0|^2 unusable")
    if not p.T > dist / np.sqrt(c0):
        raise InfeasibleParameters(
            f"observation time too short: T={p.T:.6g} must exceed c0^(-1/2) max|x-x0| = "
            f"{dist / np.sqrt(c0):.6g}")
    if not 0 < p.beta < p.varrho:
        raise InfeasibleParameters(
            f"beta/varrho conflict: 0 < beta < varrho required (beta={p.beta:.6g}, "
            f"varrho={p.varrho:.6g})")
    if not p.beta * p.T**2 > p.max_psi0 + p.delta:
        raise InfeasibleParameters(
            f"beta*T^2 > max psi0 + delta violated: {p.beta * p.T**2:.6g} <= "
            f"{p.max_psi0 + p.delta:.6g}")
    if not 0 < p.eps < p.T / 2:
        raise InfeasibleParameters(f"cutoff margin: 0 < eps < T/2 required (eps={p.eps:.6g})")
    if p.beta * (p.T - 2 * p.eps) ** 2 < p.max_psi0 + p.delta / 2:
        raise InfeasibleParameters(
            "cutoff window: max psi(x,t) <= beta0 - delta/2 must hold for |t| > T - 2 eps; "
            f"need beta*(T-2eps)^2 >= max psi0 + delta/2 "
            f"({p.beta * (p.T - 2 * p.eps) ** 2:.6g} < {p.max_psi0 + p.delta / 2:.6g})")


def select_parameters(grid: Grid, media: CoefficientPair, x0, gamma: float = 1.0,
                      delta: float = 0.25, eps: float | None = None, T: float | None = None,
                      beta: float | None = None, beta0: float = 1.0,
                      s_grid=(), varrho: float | None = None) -> CarlemanParams:
    """Fill in the weight configuration and validate every constraint.

    Without ``T`` the window is ``1.05 * max(c0^(-1/2) max|x-x0|,
    sqrt((max psi0 + delta) / (0.9 varrho)))``.  Without ``beta`` it is
    ``0.9 varrho``, raised towards ``varrho`` if ``beta T^2`` would not
    clear ``max psi0 + delta``.  Without ``eps`` the largest margin that
    keeps the cutoff window valid is halved.
    """
    x0 = tuple(float(v) for v in x0)
    if grid.contains_closed(x0):
        raise InfeasibleParameters(f"x0={x0} must lie outside the closed box")
    if varrho is None:
        varrho = pseudoconvexity_constant(media, x0)
    if varrho <= 0:
        raise InfeasibleParameters(
            f"pseudo-convexity constant varrho={varrho:.6g} <= 0: weight |x-x0|^2 unusable")
    if delta <= 0:
        raise InfeasibleParameters("delta > 0 required (the time-window gap collapses, d1 > d0 fails)")
    mpsi = max_psi0(grid, x0)
    c0 = media.c0
    if T is None:
        T = 1.05 * max(np.sqrt(mpsi) / np.sqrt(c0), np.sqrt((mpsi + delta) / (0.9 * varrho)))
    if beta is None:
        lower = (mpsi + delta) / T**2
        beta = 0.9 * varrho
        if beta <= lower:
            beta = 0.5 * (lower + varrho)
    if eps is None:
        # largest eps with beta (T - 2 eps)^2 >= max psi0 + delta/2, then halved
        t_inner = np.sqrt((mpsi + delta / 2) / beta) if beta > 0 else T
        eps = 0.5 * max(min((T - t_inner) / 2, T / 2), 0.0)
    p = CarlemanParams(x0=x0, gamma=float(gamma), beta=float(beta), beta0=float(beta0),
                       delta=float(delta), eps=float(eps), T=float(T), varrho=float(varrho),
                       max_psi0=mpsi, s_grid=tuple(s_grid))
    validate_params(p, c0)
    return p


# ---------------------------------------------------------------------------

def psi0(points, x0) -> np.ndarray:
    """``|x - x0|^2`` for coordinate arrays ``points = (x, y, z)``."""
    x, y, z = points
    return (x - x0[0]) ** 2 + (y - x0[1]) ** 2 + (z - x0[2]) ** 2


def phi(params: CarlemanParams, points, t) -> np.ndarray:
    """``exp(gamma (|x-x0|^2 - beta t^2 + beta0))`` broadcast over ``t`` (leading axis)."""
    t = np.asarray(t, dtype=float)
    p0 = psi0(points, params.x0)
    tt = t.reshape(t.shape + (1,) * np.ndim(p0))
    return np.exp(params.gamma * (p0 - params.beta * tt**2 + params.beta0))


@dataclass
class WeightField:
    times: np.ndarray
    phi: np.ndarray = field(repr=False)   # (nt, nx, ny, nz) at cell centres
    phi0: np.ndarray = field(repr=False)  # (nx, ny, nz)
    max_phi: float = 0.0
    min_phi0: float = 0.0


def eval_weight(params: CarlemanParams, grid: Grid, times) -> WeightField:
    times = np.asarray(times, dtype=float)
    pts = grid.coords("cell")
    ph = phi(params, pts, times)
    ph0 = np.broadcast_to(phi(params, pts, 0.0), grid.shape("cell")).copy()
    return WeightField(times=times, phi=np.broadcast_to(ph, (len(times),) + grid.shape("cell")),
                       phi0=ph0, max_phi=float(ph.max()), min_phi0=float(ph0.min()))


def cutoff_eta(params: CarlemanParams, t):
    """Time cutoff: 1 for ``|t| < T - 2 eps``, 0 for ``|t| >= T - eps``.

    Quintic smoothstep in between.  Returns ``(eta, eta', eta'')``.
    """
    t = np.asarray(t, dtype=float)
    T, eps = params.T, params.eps
    u = np.clip((np.abs(t) - (T - 2 * eps)) / eps, 0.0, 1.0)
    inside = (u > 0) & (u < 1)
    S = u**3 * (10 - 15 * u + 6 * u**2)
    dS = np.where(inside, 30 * u**2 * (1 - u) ** 2, 0.0)
    d2S = np.where(inside, 60 * u * (1 - u) * (1 - 2 * u), 0.0)
    sgn = np.sign(t)
    eta = 1.0 - S
    d_eta = -dS * sgn / eps
    d2_eta = -d2S / eps**2
    return eta, d_eta, d2_eta


@dataclass
class WeightedValue:
    log_value: float
    normalized: float
    log_shift: float


def weighted_integral(integrand, log_weight, quad_weights, *, norm: bool = True) -> WeightedValue:
    """``log sum(exp(log_weight) * integrand * quad_weights)`` without overflow.

    Pass ``log_weight = 2 s phi``.  ``normalized`` is the sum with
    ``exp(log_weight - max log_weight)``, and
    ``log_value = log(normalized) + max log_weight``.  An all-zero integrand
    gives ``log_value = -inf``.
    """
    f = np.asarray(integrand, dtype=float)
    lw = np.broadcast_to(np.asarray(log_weight, dtype=float), f.shape)
    q = np.broadcast_to(np.asarray(quad_weights, dtype=float), f.shape)
    if norm and np.any(f < 0):
        raise ValueError("negative integrand where a norm is intended")
    shift = float(lw.max())
    b = f * q
    if not np.any(b):
        return WeightedValue(-np.inf, 0.0, shift)
    normalized = float(np.sum(np.exp(lw - shift) * b))
    log_value = float(logsumexp(lw, b=b))
    return WeightedValue(log_value, normalized, shift)


def g_decay(params: CarlemanParams, s) -> np.ndarray:
    """``int_{-T}^{T} exp(-2 s (1 - exp(-gamma beta t^2))) dt`` for each ``s``."""
    s_arr = np.atleast_1d(np.asarray(s, dtype=float))
    gb = params.gamma * params.beta
    out = []
    for sv in s_arr:
        val, _ = integrate.quad(lambda t: np.exp(-2 * sv * (1 - np.exp(-gb * t * t))),
                                0.0, params.T, epsabs=0.0, epsrel=1e-12, limit=200,
                                points=[min(params.T, 1.0 / np.sqrt(gb * max(sv, 1e-12)))])
        out.append(2.0 * val)
    out = np.array(out)
    return out if np.ndim(s) else out[0]
