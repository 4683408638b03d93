"""Investor value when the bank is always induced to monitor (u >= b_hat_j).

Above the payment boundary gamma_j the value is linear with slope -1/rho_b.
Below it the feedback controls are fixed: on [b_hat_j, b_hat_j + b_hat_{j-1})
the pool is kept with probability (u - b_hat_j)/b_hat_{j-1} and the bank keeps
b_hat_{j-1} after a default; on [b_hat_j + b_hat_{j-1}, gamma_j] the pool is
always kept and the bank's stake in the next stage is u - b_hat_j.

Holding the state at gamma with the stationary payment rate makes the first
derivative equal -1/rho_b for every candidate gamma, so gamma is pinned by the
second-order contact condition W'' = 0, which is the same as choosing the gamma
that maximises the value.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicHermiteSpline
from scipy.optimize import brentq

from .errors import ConvergenceError, DomainError
from .model import ModelParams

N_NODES = 4096


@dataclass
class PmhSolution:
    j: int
    gamma_b: float
    b_hat: float
    rho_b: float
    nodes: np.ndarray
    values: np.ndarray
    derivs: np.ndarray
    W_gamma: float
    _spline: CubicHermiteSpline | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.nodes.size >= 2:
            self._spline = CubicHermiteSpline(self.nodes, self.values, self.derivs)

    def _check(self, u):
        u = np.asarray(u, dtype=float)
        if np.any(u < self.b_hat * (1 - 1e-13)):
            raise DomainError(f"pure moral hazard value needs u >= b_hat_{self.j} = {self.b_hat!r}")
        return np.maximum(u, self.b_hat)

    def value(self, u):
        u = self._check(u)
        tail = self.W_gamma - (u - self.gamma_b) / self.rho_b
        if self._spline is None:
            out = tail
        else:
            out = np.where(u >= self.gamma_b, tail, self._spline(np.minimum(u, self.gamma_b)))
        return out if np.ndim(out) else float(out)

    def derivative(self, u):
        u = self._check(u)
        if self._spline is None:
            out = np.full(np.shape(u), -1.0 / self.rho_b)
        else:
            out = np.where(u >= self.gamma_b, -1.0 / self.rho_b,
                           self._spline(np.minimum(u, self.gamma_b), 1))
        return out if np.ndim(out) else float(out)

    @property
    def value_at_bhat(self) -> float:
        return float(self.value(self.b_hat))

    def payment_rate(self, p: ModelParams, rho: float | None = None) -> float:
        """Flow payment that holds the state at gamma."""
        rho = p.rho_b if rho is None else rho
        exposure = self.b_hat
        return (p.r * self.gamma_b + p.lambda_0(self.j) * exposure) / rho


def _controls(u, bj, bp, gamma):
    """(theta, continuation value) of the fixed feedback rule, vectorised."""
    u = np.asarray(u, dtype=float)
    split = bj + bp
    theta = np.where(u < split, (u - bj) / bp if bp > 0 else 1.0, 1.0)
    w = np.where(u < split, bp, u - bj)
    return theta, w


def _rhs_factory(p: ModelParams, j: int, prev: PmhSolution):
    lam = p.lambda_0(j)
    bj = p.b_hat(j)
    bp = p.b_hat(j - 1)
    mj = p.mu * j

    def rhs(u, W):
        theta, w = _controls(u, bj, bp, None)
        cont = theta * prev.value(w)
        return (lam * W - mj - lam * cont) / (p.r * u + lam * bj)

    return rhs


def _terminal_value(p: ModelParams, j: int, prev: PmhSolution, gamma: float) -> float:
    lam = p.lambda_0(j)
    bj = p.b_hat(j)
    delta = (p.r * gamma + lam * bj) / p.rho_b
    return (p.mu * j - delta) / lam + float(prev.value(gamma - bj))


def _integrate(p: ModelParams, j: int, prev: PmhSolution, gamma: float, n_nodes: int):
    """Backward integration from gamma to b_hat_j, tabulated on Chebyshev nodes."""
    bj = p.b_hat(j)
    bp = p.b_hat(j - 1)
    rhs = _rhs_factory(p, j, prev)
    W_g = _terminal_value(p, j, prev, gamma)
    split = min(bj + bp, gamma)
    pieces = []
    y0 = W_g
    for a, b in ((gamma, split), (split, bj)):
        if a - b <= 1e-15 * max(1.0, a):
            continue
        sol = solve_ivp(lambda u, y: [rhs(u, y[0])], (a, b), [y0], method="DOP853",
                        rtol=1e-12, atol=1e-14, dense_output=True)
        if not sol.success:
            raise ConvergenceError(f"pure moral hazard ODE failed for j={j}: {sol.message}")
        pieces.append((b, a, sol.sol))
        y0 = float(sol.y[0, -1])
    k = np.arange(n_nodes)
    nodes = bj + (gamma - bj) * 0.5 * (1 - np.cos(np.pi * k / (n_nodes - 1)))
    nodes[0], nodes[-1] = bj, gamma
    vals = np.empty(n_nodes)
    for lo, hi, f in pieces:
        m = (nodes >= lo) & (nodes <= hi)
        vals[m] = f(nodes[m])[0]
    vals[-1] = W_g
    derivs = np.array([rhs(u, w) for u, w in zip(nodes, vals)])
    derivs[-1] = -1.0 / p.rho_b  # stationary payment makes this exact
    return nodes, vals, derivs


def contact_condition(p: ModelParams, j: int, prev: PmhSolution, gamma: float) -> float:
    """Sign of W'' at gamma (up to a positive factor); zero at the optimal boundary."""
    lam = p.lambda_0(j)
    bj = p.b_hat(j)
    return float(prev.derivative(gamma - bj)) + (1.0 - p.r / lam) / p.rho_b


def locate_gamma(p: ModelParams, j: int, prev: PmhSolution) -> float:
    bj, bp = p.b_hat(j), p.b_hat(j - 1)
    lo = bj + bp
    hi = bj + prev.gamma_b
    f = lambda g: contact_condition(p, j, prev, g)
    if f(lo) <= 0 or hi <= lo:
        return lo
    if f(hi) > 0:
        raise ConvergenceError(f"no payment boundary in [{lo!r}, {hi!r}] for j={j}")
    return brentq(f, lo, hi, xtol=1e-14, rtol=1e-15)


def solve_pmh(p: ModelParams, j: int, previous: PmhSolution | None = None,
              n_nodes: int = N_NODES) -> PmhSolution:
    if not (1 <= j <= p.I):
        raise DomainError(f"pool size j={j} outside 1..{p.I}")
    lam = p.lambda_0(j)
    bj = p.b_hat(j)
    if j == 1:
        # the last default ends the pool: exposure equals the promise and paying at once is optimal
        W = (p.mu - (p.r + lam) * bj / p.rho_b) / lam
        return PmhSolution(1, bj, bj, p.rho_b, np.array([bj]), np.array([W]),
                           np.array([-1.0 / p.rho_b]), W)
    if previous is None or previous.j != j - 1:
        raise DomainError(f"solution for j={j - 1} is required to solve j={j}")
    gamma = locate_gamma(p, j, previous)
    nodes, vals, derivs = _integrate(p, j, previous, gamma, n_nodes)
    sol = PmhSolution(j, float(gamma), bj, p.rho_b, nodes, vals, derivs, float(vals[-1]))
    _check_solution(sol)
    return sol


def _check_solution(sol: PmhSolution):
    scale = max(1.0, float(np.max(np.abs(sol.values))))
    if np.any(sol.derivs < -1.0 / sol.rho_b - 1e-8 * scale):
        raise ConvergenceError(f"gradient constraint violated for j={sol.j}")
    d2 = np.diff(sol.derivs) / np.diff(sol.nodes)
    if np.any(d2 > 1e-6 * scale / (sol.gamma_b - sol.b_hat)):
        raise ConvergenceError(f"non-concave pure moral hazard value for j={sol.j}")


def solve_pmh_all(p: ModelParams, n_nodes: int = N_NODES) -> list[PmhSolution]:
    """Solutions for j = 1..I; index 0 of the list is j = 1."""
    out: list[PmhSolution] = []
    prev = None
    for j in range(1, p.I + 1):
        prev = solve_pmh(p, j, prev, n_nodes)
        out.append(prev)
    return out


def value_for_gamma(p: ModelParams, j: int, prev: PmhSolution, gamma: float, u: float) -> float:
    """Value at u of the policy that starts paying at an arbitrary gamma (for optimality checks)."""
    nodes, vals, derivs = _integrate(p, j, prev, gamma, 257)
    if u >= gamma:
        return float(vals[-1] - (u - gamma) / p.rho_b)
    return float(CubicHermiteSpline(nodes, vals, derivs)(u))


def pmh_value(sol: PmhSolution, u):
    return sol.value(u)
