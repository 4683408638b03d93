"""Feedback contracts on the credible-set boundaries, short-term contracts and reservation utilities."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .credible_set import geometry, shirk_table
from .errors import DependencyError, DomainError
from .model import ModelParams


@dataclass(frozen=True)
class Controls:
    """Contract controls at one state.

    delta: payment rate; lump: payment due at once before the other controls
    apply; theta: probability of keeping the pool at a default; h1, h2: the
    bank's value loss at a default that keeps resp. liquidates the pool.
    k_b, k_g: shirked loans recommended to the bad and the good bank.
    """

    delta: float
    lump: float
    theta: float
    h1: float
    h2: float
    k_b: int
    k_g: int

    @property
    def exposure(self) -> float:
        return self.h1 + (1.0 - self.theta) * self.h2


def _b_prev(p: ModelParams, j: int) -> float:
    return p.b_hat(j - 1) if j > 1 else 0.0


def upper_boundary_policy(p: ModelParams, j: int, u_b: float, pmh) -> Controls:
    """Investor-optimal controls at (u_b, U_j(u_b)) on the upper boundary."""
    if pmh is None or pmh.j != j:
        raise DependencyError(f"pure moral hazard solution for j={j} is required")
    g = geometry(p, j)
    if u_b < g.c1 - 1e-13 * max(1.0, g.c1):
        raise DomainError(f"u_b below c({j},1)")
    bj, bp, gamma = g.b_hat, _b_prev(p, j), pmh.gamma_b
    lump = max(u_b - gamma, 0.0) / p.rho_b
    u = min(u_b, gamma)
    if u < bj:
        k_g = incentive_k(p, j, g.upper(u))
        return Controls(0.0, lump, 0.0, u, 0.0, j, k_g)
    if u < bj + bp:
        theta = (u - bj) / bp
        return Controls(0.0, lump, theta, u - bp, bp, 0, 0)
    delta = (p.lambda_0(j) * bj + p.r * gamma) / p.rho_b if u >= gamma else 0.0
    return Controls(delta, lump, 1.0, bj, u - bj, 0, 0)


def lower_boundary_policy(p: ModelParams, j: int, u_b: float) -> Controls:
    """Controls on the lower boundary; both bank types shirk."""
    g = geometry(p, j)
    if u_b < g.c1 - 1e-13 * max(1.0, g.c1):
        raise DomainError(f"u_b below c({j},1)")
    lump = max(u_b - g.C_j, 0.0) / p.rho_b
    u = min(u_b, g.C_j)
    keep = 1.0 if u >= g.C_j else 0.0
    h2 = g.C_prev * keep
    h1 = u - h2
    k = incentive_k(p, j, h1 + (1.0 - keep) * h2)
    return Controls(0.0, lump, keep, h1, h2, k, k)


def incentive_k(p: ModelParams, j: int, exposure: float) -> int:
    """Shirk all j loans iff the value at stake in a default is below b_hat_j (ties within rounding monitor)."""
    return j if exposure < p.b_hat(j) * (1.0 - 1e-12) else 0


# deterministic state path while shirking with the pool liquidated at the next default


def shirk_path(p: ModelParams, j: int, u_b, s):
    """Bad-bank promise s time units later, below the threshold with theta = 0."""
    c = geometry(p, j).c1
    lsh = p.lambda_sh(j)
    return np.exp((p.r + lsh) * np.asarray(s)) * (np.asarray(u_b) - c) + c


def threshold_time(p: ModelParams, j: int, u_b: float) -> float:
    """Time for the shirking path started at u_b to reach b_hat_j."""
    g = geometry(p, j)
    if u_b >= g.b_hat:
        return 0.0
    if u_b <= g.c1:
        return math.inf
    lsh, l0 = p.lambda_sh(j), p.lambda_0(j)
    return math.log(g.b_hat * (p.r + l0) / (u_b * (p.r + lsh) - p.B * j)) / (p.r + lsh)


def hitting_time(p: ModelParams, j: int, u_from: float, u_to: float) -> float:
    """Time for the shirking path to move from u_from up to u_to."""
    c = geometry(p, j).c1
    if u_to <= u_from:
        return 0.0
    if u_from <= c:
        return math.inf
    return math.log((u_to - c) / (u_from - c)) / (p.r + p.lambda_sh(j))


# short-term contracts: constant payment c from t_star on, pool liquidated at the first default


@dataclass(frozen=True)
class ShortTermContract:
    c: float
    t_star: float
    lump: float = 0.0

    def __post_init__(self):
        if self.c < 0 or self.t_star < 0 or self.lump < 0:
            raise DomainError("short-term contract needs c, t_star, lump >= 0")


@dataclass(frozen=True)
class ShortTermValue:
    regime: str  # 'shirk', 'work' or 'shirk-then-work'
    value: float
    switch_time: float  # time at which the bank starts monitoring (inf if never)


def c_bar(p: ModelParams, j: int, rho: float) -> float:
    return p.b_hat(j) * (p.r + p.lambda_0(j)) / rho


def t_bar(p: ModelParams, j: int, c: float, rho: float) -> float:
    """Longest delay for which the bank monitors from the start."""
    if c <= c_bar(p, j, rho):
        return -math.inf
    return math.log(rho * c / (p.b_hat(j) * (p.r + p.lambda_0(j)))) / (p.r + p.lambda_0(j))


def short_term_values(p: ModelParams, j: int, c: float, t_star: float, rho: float) -> ShortTermValue:
    """Best response and value of a bank with efficiency rho; lump sums are not included."""
    if c < 0 or t_star < 0:
        raise DomainError("need c >= 0 and t_star >= 0")
    lsh, l0, r = p.lambda_sh(j), p.lambda_0(j), p.r
    b = p.b_hat(j)
    c1 = p.B * j / (r + lsh)
    if c <= c_bar(p, j, rho):
        v = math.exp(-(r + lsh) * t_star) * rho * c / (r + lsh) + c1
        return ShortTermValue("shirk", v, math.inf)
    tb = t_bar(p, j, c, rho)
    if t_star <= tb:
        v = math.exp(-(r + l0) * t_star) * rho * c / (r + l0)
        return ShortTermValue("work", v, 0.0)
    log_ratio = (r + lsh) / (r + l0) * math.log(rho * c / (b * (r + l0)))
    v = math.exp(log_ratio - (r + lsh) * t_star) * b * (r + l0) / (r + lsh) + c1
    # switch time log((b(r+lsh) - Bj)/(v(r+lsh) - Bj))/(r+lsh), simplified with Bj = b(lsh - l0)
    # so that long delays do not cancel
    t_w = t_star - log_ratio / (r + lsh)
    return ShortTermValue("shirk-then-work", v, t_w)


def short_term_bank_value(p: ModelParams, j: int, k: ShortTermContract, rho: float) -> float:
    return short_term_values(p, j, k.c, k.t_star, rho).value + rho * k.lump


def reachable_contract(p: ModelParams, j: int, u_b: float) -> ShortTermContract:
    """Delayed constant-payment contract whose value pair is (u_b, U_j(u_b))."""
    g = geometry(p, j)
    if u_b < g.c1:
        raise DomainError("u_b below c(j,1)")
    c = c_bar(p, j, p.rho_b)
    if u_b >= g.b_hat:
        return ShortTermContract(c, 0.0, (u_b - g.b_hat) / p.rho_b)
    return ShortTermContract(c, threshold_time(p, j, u_b), 0.0)


# reservation utilities


@dataclass(frozen=True)
class ReservationResult:
    values: np.ndarray  # R_0..R_I
    actions: np.ndarray  # k for pool sizes 1..I (0 = monitor, j = shirk)


def _stage(p: ModelParams, n: int, rho: float, shirk: bool, prev: float) -> float:
    if shirk:
        lam = p.lambda_sh(n)
        return (rho * p.mu * n + n * p.B) / (p.r + lam) + lam * prev / (p.r + lam)
    lam = p.lambda_0(n)
    return rho * p.mu * n / (p.r + lam) + lam * prev / (p.r + lam)


def reservation_utility(p: ModelParams, rho: float) -> ReservationResult:
    vals = np.zeros(p.I + 1)
    acts = np.zeros(p.I, dtype=int)
    for n in range(1, p.I + 1):
        work = _stage(p, n, rho, False, vals[n - 1])
        shirk = _stage(p, n, rho, True, vals[n - 1])
        if work >= shirk:
            vals[n], acts[n - 1] = work, 0
        else:
            vals[n], acts[n - 1] = shirk, n
    return ReservationResult(vals, acts)


def reservation_utility_for(p: ModelParams, bank: str) -> ReservationResult:
    if bank not in ("good", "bad"):
        raise DomainError("bank type must be 'good' or 'bad'")
    return reservation_utility(p, p.rho_g if bank == "good" else p.rho_b)


def reservation_printed_form(p: ModelParams, rho: float) -> np.ndarray:
    """Recursion with -r R/(r + lambda) terms: this is the exposure h1 of each stage, not a value."""
    vals = np.zeros(p.I + 1)
    for n in range(1, p.I + 1):
        l0, lsh = p.lambda_0(n), p.lambda_sh(n)
        vals[n] = max(rho * p.mu * n / (p.r + l0) - p.r * vals[n - 1] / (p.r + l0),
                      (rho * p.mu * n + n * p.B) / (p.r + lsh) - p.r * vals[n - 1] / (p.r + lsh))
    return vals


def reservation_brute_force(p: ModelParams, rho: float, j: int) -> tuple[float, tuple[int, ...]]:
    """Best of the 2^j profiles that fix monitoring or shirking per pool size."""
    best, best_prof = -math.inf, ()
    for prof in itertools.product((False, True), repeat=j):
        v = 0.0
        for n in range(1, j + 1):
            v = _stage(p, n, rho, prof[n - 1], v)
        if v > best:
            best, best_prof = v, tuple(n if prof[n - 1] else 0 for n in range(1, j + 1))
    return best, best_prof


def shirk_ladder(p: ModelParams) -> np.ndarray:
    return np.array([shirk_table(p)[n, n] for n in range(p.I + 1)])
