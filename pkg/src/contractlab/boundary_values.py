"""Investor value functions on the two boundaries of the credible set.

Lower boundary: a linear lump-sum branch above C(j) and, below it, the
Lagrangian dual over liquidation cutoffs with hypoexponential default times.
Upper boundary: closed forms for the good and the bad bank that paste onto the
pure moral hazard value at the incentive threshold.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm, solve
from scipy.optimize import brentq

from .credible_set import geometry, shirk_table
from .errors import ConvergenceError, DependencyError, DomainError
from .model import ModelParams

# relative gap between rates below which partial fractions lose too many digits
MERGE_GAP = 1e-6


class HypoexpDensity:
    """Law of a sum of independent exponentials with the given rates."""

    def __init__(self, rates):
        rates = np.asarray(rates, dtype=float).ravel()
        if rates.size == 0:
            raise DomainError("empty rate list")
        if np.any(rates <= 0):
            raise DomainError("rates must be positive")
        self.rates = rates
        srt = np.sort(rates)
        gaps = np.diff(srt) / srt[1:] if rates.size > 1 else np.array([1.0])
        self.merged = bool(np.any(gaps < MERGE_GAP))
        if not self.merged:
            lam = rates
            w = np.ones_like(lam)
            for k in range(lam.size):
                for m in range(lam.size):
                    if m != k:
                        w[k] *= lam[m] / (lam[m] - lam[k])
            self._w = w
        else:
            n = rates.size
            T = np.diag(-rates) + np.diag(rates[:-1], 1)
            self._T = T
            self._exit = np.zeros(n)
            self._exit[-1] = rates[-1]

    def _ph(self, x, vec):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return np.array([expm(self._T * xi)[0] @ vec for xi in x.ravel()]).reshape(x.shape)

    @staticmethod
    def _shape(x, out):
        return out if np.ndim(x) else float(np.ravel(out)[0])

    def pdf(self, x):
        xa = np.asarray(x, dtype=float)
        if np.any(xa < 0):
            raise DomainError("density argument must be non-negative")
        if self.merged:
            out = self._ph(xa, self._exit)
        else:
            out = np.sum(self._w * self.rates * np.exp(-np.multiply.outer(xa, self.rates)), axis=-1)
        return self._shape(x, np.maximum(out, 0.0))

    def sf(self, x):
        """P(tau > x)."""
        xa = np.maximum(np.asarray(x, dtype=float), 0.0)
        if self.merged:
            out = self._ph(xa, np.ones(self.rates.size))
        else:
            out = np.sum(self._w * np.exp(-np.multiply.outer(xa, self.rates)), axis=-1)
        return self._shape(x, np.clip(out, 0.0, 1.0))

    def cdf(self, x):
        return 1.0 - self.sf(x)

    def discounted_tail(self, s, r: float):
        """Integral over (s, inf) of exp(-r x) f(x)."""
        sa = np.maximum(np.asarray(s, dtype=float), 0.0)
        if self.merged:
            n = self.rates.size
            res = solve(r * np.eye(n) - self._T, self._exit)
            out = np.exp(-r * sa) * self._ph(sa, res)
        else:
            lam = self.rates
            out = np.sum(self._w * lam / (lam + r) * np.exp(-np.multiply.outer(sa, lam + r)), axis=-1)
        return self._shape(s, out)

    def mean(self) -> float:
        return float(np.sum(1.0 / self.rates))


def hypoexp_pdf(rates, x):
    return HypoexpDensity(rates).pdf(x)


# lower boundary: dual problem


@dataclass(frozen=True)
class DualSolution:
    j: int
    u_bc: float
    nu: float
    cutoffs: tuple[float, ...]
    primal_value: float
    residual: float


@dataclass(frozen=True)
class _DualTerms:
    pools: np.ndarray  # pool size after the m-th default, m = 1..j-1
    bank_coef: np.ndarray  # B n / (r + lsh_n)
    inv_coef: np.ndarray  # mu n / lsh_n
    thresholds: np.ndarray  # nu at which the cutoff leaves zero
    laws: tuple[HypoexpDensity, ...]


def _dual_terms(p: ModelParams, j: int) -> _DualTerms:
    lsh = {n: p.lambda_sh(n) for n in range(1, j + 1)}
    pools = np.arange(j - 1, 0, -1)
    bank = np.array([p.B * n / (p.r + lsh[n]) for n in pools])
    inv = np.array([p.mu * n / lsh[n] for n in pools])
    with np.errstate(divide="ignore"):
        thr = np.array([p.mu * (p.r + lsh[n]) / (p.B * lsh[n]) if p.B > 0 else np.inf for n in pools])
    laws = tuple(HypoexpDensity([lsh[i] for i in range(j, n, -1)]) for n in pools)
    return _DualTerms(pools, bank, inv, thr, laws)


def cutoff_s(p: ModelParams, j: int, i: int, nu: float) -> float:
    """Elapsed time after which the pool is kept at the i-th default (j loans at the start)."""
    if not (1 <= i <= j - 1):
        raise DomainError(f"default index {i} outside 1..{j - 1}")
    if nu < 0:
        raise DomainError("multiplier must be non-negative")
    n = j - i
    lsh = p.lambda_sh(n)
    thr = p.mu * (p.r + lsh) / (p.B * lsh) if p.B > 0 else math.inf
    if nu <= thr:
        return 0.0
    if p.r == 0:
        raise DomainError("zero discount rate: cutoff logarithm is degenerate")
    return math.log(nu / thr) / p.r


def _cutoffs(p: ModelParams, terms: _DualTerms, nu: float) -> np.ndarray:
    if p.r == 0:
        if np.any(nu > terms.thresholds):
            raise DomainError("zero discount rate: cutoff logarithm is degenerate")
        return np.zeros_like(terms.thresholds)
    with np.errstate(divide="ignore"):
        return np.where(nu <= terms.thresholds, 0.0, np.log(np.maximum(nu, 1e-300) / terms.thresholds) / p.r)


def g_prime(p: ModelParams, j: int, u_bc: float, nu: float, terms: _DualTerms | None = None) -> float:
    terms = terms or _dual_terms(p, j)
    s = _cutoffs(p, terms, nu)
    tail = sum(c * law.discounted_tail(si, p.r) for c, law, si in zip(terms.bank_coef, terms.laws, s))
    return geometry(p, j).c1 - u_bc + float(tail)


def primal_from_cutoffs(p: ModelParams, j: int, s, terms: _DualTerms | None = None) -> float:
    terms = terms or _dual_terms(p, j)
    return p.mu * j / p.lambda_sh(j) + float(sum(c * law.sf(si) for c, law, si in zip(terms.inv_coef, terms.laws, s)))


def solve_nu(p: ModelParams, j: int, u_bc: float, tol: float = 1e-10) -> DualSolution:
    g = geometry(p, j)
    if not (g.c1 <= u_bc < g.C_j):
        raise DomainError(f"u_bc={u_bc!r} outside [c({j},1), C({j})) = [{g.c1!r}, {g.C_j!r})")
    terms = _dual_terms(p, j)
    if u_bc == g.c1:
        s = np.full(j - 1, np.inf)
        return DualSolution(j, u_bc, math.inf, tuple(s), p.mu * j / p.lambda_sh(j), 0.0)
    f = lambda nu: g_prime(p, j, u_bc, nu, terms)
    lo = float(np.min(terms.thresholds))
    if not f(lo) > 0:
        raise ConvergenceError("dual derivative not positive at the lower bracket")
    hi = 2.0 * lo
    cap = 1e12 * lo
    while f(hi) > 0:
        hi *= 2.0
        if hi > cap:
            raise ConvergenceError(f"no sign change of g' on [{lo:.3e}, {cap:.3e}]")
    nu = brentq(f, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    # polish: g' is monotone, so bisect on the last ulps if brentq stopped early
    res = f(nu)
    if abs(res) >= tol:
        a, b = (nu, hi) if res > 0 else (lo, nu)
        for _ in range(200):
            m = 0.5 * (a + b)
            fm = f(m)
            if abs(fm) < abs(res):
                nu, res = m, fm
            if fm > 0:
                a = m
            else:
                b = m
            if abs(res) < tol or b - a <= 4 * np.finfo(float).eps * b:
                break
    s = _cutoffs(p, terms, nu)
    return DualSolution(j, float(u_bc), float(nu), tuple(float(x) for x in s),
                        primal_from_cutoffs(p, j, s, terms), float(abs(res)))


def value_lower(p: ModelParams, j: int, u_bc):
    """Investor value on the lower boundary (same for either bank type)."""
    g = geometry(p, j)
    u = np.atleast_1d(np.asarray(u_bc, dtype=float))
    if np.any(u < g.c1 - 1e-13 * max(1, g.c1)):
        raise DomainError(f"value below c({j},1)")
    top = sum(p.mu * i / p.lambda_sh(i) for i in range(1, j + 1))
    out = np.empty_like(u)
    for n, x in enumerate(u):
        if x >= g.C_j:
            out[n] = top - (x - g.C_j) / p.rho_b
        else:
            out[n] = solve_nu(p, j, max(x, g.c1)).primal_value
    return out if np.ndim(u_bc) else float(out[0])


# upper boundary


def _check_pmh(pmh, j):
    if pmh is None:
        raise DependencyError(f"pure moral hazard solution for j={j} is required")
    if pmh.j != j:
        raise DependencyError(f"pure moral hazard solution is for j={pmh.j}, not {j}")


@dataclass(frozen=True)
class UpperConstants:
    """Multiplicative constants of the power branches below the threshold."""

    bad: float  # coefficient of (u - c)^(lsh/(r+lsh)) for the bad bank
    good_low: float  # good bank on [c, x*)
    good_mid: float  # good bank on [x*, b_hat)
    v_bhat: float


def upper_constants(p: ModelParams, j: int, pmh) -> UpperConstants:
    """Constants fixed by continuity at x* and b_hat."""
    _check_pmh(pmh, j)
    g = geometry(p, j)
    lsh, l0, r = p.lambda_sh(j), p.lambda_0(j), p.r
    c, b, xs = g.c1, g.b_hat, g.x_star
    v_b = float(pmh.value(b))
    e_sh = lsh / (r + lsh)
    e_0 = l0 / (r + lsh)
    bad = (v_b - p.mu * j / lsh) / (b - c) ** e_sh
    mid = (v_b - p.mu * j / l0) / (b - c) ** e_0
    v_xs = p.mu * j / l0 + mid * (xs - c) ** e_0
    low = (v_xs - p.mu * j / lsh) / (xs - c) ** e_sh
    return UpperConstants(bad=bad, good_low=low, good_mid=mid, v_bhat=v_b)


def value_upper_bad(p: ModelParams, j: int, u_b, pmh):
    _check_pmh(pmh, j)
    g = geometry(p, j)
    u = np.atleast_1d(g._check(u_b))
    k = upper_constants(p, j, pmh)
    lsh = p.lambda_sh(j)
    e_sh = lsh / (p.r + lsh)
    out = np.empty_like(u)
    lo = u < g.b_hat
    out[lo] = p.mu * j / lsh + k.bad * (u[lo] - g.c1) ** e_sh
    out[~lo] = pmh.value(u[~lo])
    return out if np.ndim(u_b) else float(out[0])


def value_upper_good(p: ModelParams, j: int, u_bc, pmh):
    _check_pmh(pmh, j)
    g = geometry(p, j)
    u = np.atleast_1d(g._check(u_bc))
    k = upper_constants(p, j, pmh)
    lsh, l0 = p.lambda_sh(j), p.lambda_0(j)
    e_sh = lsh / (p.r + lsh)
    e_0 = l0 / (p.r + lsh)
    out = np.empty_like(u)
    b1 = u < g.x_star
    b2 = (~b1) & (u < g.b_hat)
    b3 = ~(b1 | b2)
    out[b1] = p.mu * j / lsh + k.good_low * (u[b1] - g.c1) ** e_sh
    out[b2] = p.mu * j / l0 + k.good_mid * (u[b2] - g.c1) ** e_0
    out[b3] = pmh.value(u[b3])
    return out if np.ndim(u_bc) else float(out[0])


def published_constants(p: ModelParams, j: int, pmh) -> dict:
    """Closed-form constants as printed, in the (u - c) parametrisation used here.

    'statement_good' and 'statement_bad' are the constants of the two power
    branches; 'proof_good_low' and 'proof_good_mid' come from the variant that
    scales the argument by (r + lsh)/lsh resp. (r + lsh)/l0, converted back.
    """
    g = geometry(p, j)
    lsh, l0, r = p.lambda_sh(j), p.lambda_0(j), p.r
    v_b = float(pmh.value(g.b_hat))
    q = 1.0 / g.ratio
    mj = p.mu * j
    head = mj / l0 - mj / lsh + q ** (l0 / (r + l0)) * (v_b - mj / l0)
    e_sh = lsh / (r + lsh)
    e_0 = l0 / (r + lsh)
    stmt_good = head * q ** (-lsh / (r + l0)) * (g.b_hat * (r + l0) / (r + lsh)) ** (-e_sh)
    stmt_bad = (v_b - mj / lsh) * (g.b_hat * (r + l0) / (r + lsh)) ** (-e_sh)
    proof_c1 = head / (q ** (lsh / (r + l0)) * (g.b_hat * (r + l0) / lsh) ** e_sh)
    proof_c2 = (v_b - mj / l0) * (g.b_hat * (r + l0) / l0) ** (-e_0)
    return {
        "statement_good": stmt_good,
        "statement_bad": stmt_bad,
        "proof_good_low": proof_c1 * ((r + lsh) / lsh) ** e_sh,
        "proof_good_mid": proof_c2 * ((r + lsh) / l0) ** e_0,
    }


def lower_top_value(p: ModelParams, j: int) -> float:
    return sum(p.mu * i / p.lambda_sh(i) for i in range(1, j + 1))


def shirk_C(p: ModelParams, j: int) -> float:
    return float(shirk_table(p)[j, j])
