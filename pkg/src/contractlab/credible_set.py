"""Closed-form geometry of the credible set: shirking utilities and the two boundaries."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConvergenceError, DomainError
from .model import ModelParams

_SNAP = 1e-13


def shirk_table(p: ModelParams) -> np.ndarray:
    """c[j, m] for 0 <= m <= j <= I by forward recursion; c[j, 0] = 0.

    c(j, m) = Bj/(r + lsh_j) + lsh_j/(r + lsh_j) * c(j-1, m-1).
    """
    c = np.zeros((p.I + 1, p.I + 1))
    for j in range(1, p.I + 1):
        lsh = p.lambda_sh(j)
        head = p.B * j / (p.r + lsh)
        disc = lsh / (p.r + lsh)
        for m in range(1, j + 1):
            c[j, m] = head + disc * c[j - 1, m - 1]
    return c


def shirk_utility(p: ModelParams, j: int, m: int) -> float:
    """Bank utility from shirking through m defaults before liquidation, j loans left."""
    if not (1 <= m <= j <= p.I):
        raise DomainError(f"need 1 <= m <= j <= I, got m={m}, j={j}")
    return float(shirk_table(p)[j, m])


def shirk_utility_nested(p: ModelParams, j: int, m: int) -> float:
    """Same quantity evaluated term by term from the nested-product expression."""
    if not (1 <= m <= j <= p.I):
        raise DomainError(f"need 1 <= m <= j <= I, got m={m}, j={j}")
    lsh = {i: p.lambda_sh(i) for i in range(1, j + 1)}
    total = p.B * j / (p.r + lsh[j])
    for i in range(j - m + 1, j):
        prod = 1.0
        for ell in range(i + 1, j + 1):
            prod *= lsh[ell] / (p.r + lsh[ell])
        total += p.B * i / (p.r + lsh[i]) * prod
    return total


def C_all(p: ModelParams) -> np.ndarray:
    """C(0..I) with C(0) = 0."""
    t = shirk_table(p)
    return np.array([t[j, j] for j in range(p.I + 1)])


@dataclass(frozen=True)
class CredibleSetGeometry:
    j: int
    c_table: tuple[float, ...]  # c(j, 1..j)
    C_j: float
    C_prev: float  # C(j-1)
    x_star: float
    b_hat: float
    ratio: float  # rho_g / rho_b
    a: float  # (r + l0) / (r + lsh)

    @property
    def c1(self) -> float:
        return self.c_table[0]

    def _check(self, u):
        u = np.asarray(u, dtype=float)
        tol = _SNAP * max(1.0, abs(self.c1))
        if np.any(u < self.c1 - tol) or np.any(np.isnan(u)):
            raise DomainError(f"value below c({self.j},1) = {self.c1!r} is outside the feasible set")
        return np.maximum(u, self.c1)

    def lower(self, u):
        u = self._check(u)
        out = np.where(u <= self.C_j, u, self.ratio * u - (self.ratio - 1.0) * self.C_j)
        return out if out.ndim else float(out)

    def upper_piece(self, u, piece: int):
        """Evaluate one branch formula of the upper boundary, extended beyond its interval."""
        u = np.asarray(u, dtype=float)
        c, a, R, b = self.c1, self.a, self.ratio, self.b_hat
        if piece == 1:
            return R ** (1.0 / a) * (u - c) + c
        if piece == 2:
            return R * b ** (1.0 - a) * a ** (-a) * np.maximum(u - c, 0.0) ** a
        if piece == 3:
            return R * u
        raise ValueError(piece)

    def upper(self, u):
        u = self._check(u)
        out = np.where(u < self.x_star, self.upper_piece(u, 1),
                       np.where(u < self.b_hat, self.upper_piece(u, 2), self.upper_piece(u, 3)))
        return out if out.ndim else float(out)

    def upper_derivative(self, u):
        u = self._check(u)
        c, a, R, b = self.c1, self.a, self.ratio, self.b_hat
        d2 = R * b ** (1.0 - a) * a ** (1.0 - a) * np.maximum(u - c, 1e-300) ** (a - 1.0)
        out = np.where(u < self.x_star, R ** (1.0 / a), np.where(u < b, d2, R))
        return out if out.ndim else float(out)

    def contains(self, u_b, u_g) -> bool:
        if u_b < self.c1:
            return False
        return bool(self.lower(u_b) <= u_g <= self.upper(u_b))

    def u_max(self) -> float:
        return max(3.0 * self.b_hat, 2.0 * self.C_j)


@lru_cache(maxsize=256)
def geometry(p: ModelParams, j: int) -> CredibleSetGeometry:
    if not (1 <= j <= p.I):
        raise DomainError(f"pool size j={j} outside 1..{p.I}")
    t = shirk_table(p)
    lsh, l0 = p.lambda_sh(j), p.lambda_0(j)
    a = (p.r + l0) / (p.r + lsh)
    b = p.b_hat(j)
    c1 = t[j, 1]
    x_star = p.ratio ** (-1.0 / a) * a * b + c1
    return CredibleSetGeometry(
        j=j,
        c_table=tuple(float(v) for v in t[j, 1:j + 1]),
        C_j=float(t[j, j]),
        C_prev=float(t[j - 1, j - 1]),
        x_star=float(x_star),
        b_hat=float(b),
        ratio=p.ratio,
        a=float(a),
    )


def lower_boundary(p: ModelParams, j: int, u_b):
    return geometry(p, j).lower(u_b)


def upper_boundary(p: ModelParams, j: int, u_b):
    return geometry(p, j).upper(u_b)


def contains(p: ModelParams, j: int, u_b: float, u_g: float) -> bool:
    return geometry(p, j).contains(u_b, u_g)


# numerical cross-check of the single-loan upper boundary


def _rk4(f, u0, U0, h, n):
    us = np.empty(n + 1)
    Us = np.empty(n + 1)
    us[0], Us[0] = u0, U0
    u, U = u0, U0
    for i in range(n):
        k1 = f(u, U)
        k2 = f(u + h / 2, U + h * k1 / 2)
        k3 = f(u + h / 2, U + h * k2 / 2)
        k4 = f(u + h, U + h * k3)
        U = U + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6
        u = u0 + (i + 1) * h
        us[i + 1], Us[i + 1] = u, U
    return us, Us


@dataclass(frozen=True)
class OdeCheck:
    max_error: float
    max_rel_error: float
    switch_point: float
    kink_jumps: dict
    n_steps: int


def _integrate_upper(p: ModelParams, h: float):
    g = geometry(p, 1)
    r, B = p.r, p.B
    lsh, l0 = p.lambda_sh(1), p.lambda_0(1)
    b, c = g.b_hat, g.c1

    def rhs(u, U, kg):
        lam_g = lsh if kg else l0
        lam_b = lsh if u < b else l0
        kb = 1.0 if u < b else 0.0
        return ((r + lam_g) * U - B * kg) / ((r + lam_b) * u - B * kb)

    # region above the threshold: integrate forward from b_hat
    n_up = int(math.ceil((3 * b - b) / h))
    us3, Us3 = _rk4(lambda u, U: rhs(u, U, 0), b, g.ratio * b, (3 * b - b) / n_up, n_up)

    # below b_hat: integrate backwards, the good bank works while U >= b_hat
    us, Us = [b], [g.ratio * b]
    u, U = b, g.ratio * b
    kg = 0
    switch = None
    stop = c + 0.5 * h
    while u - h > stop:
        f = lambda uu, UU: rhs(uu, UU, kg)
        step = -h
        k1 = f(u, U)
        k2 = f(u + step / 2, U + step * k1 / 2)
        k3 = f(u + step / 2, U + step * k2 / 2)
        k4 = f(u + step, U + step * k3)
        U_new = U + step * (k1 + 2 * k2 + 2 * k3 + k4) / 6
        if kg == 0 and U_new < b:
            # locate the regime switch U = b_hat inside this step by bisection on the step length
            lo, hi = 0.0, h
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                s = -mid
                q1 = f(u, U)
                q2 = f(u + s / 2, U + s * q1 / 2)
                q3 = f(u + s / 2, U + s * q2 / 2)
                q4 = f(u + s, U + s * q3)
                Um = U + s * (q1 + 2 * q2 + 2 * q3 + q4) / 6
                if Um < b:
                    hi = mid
                else:
                    lo = mid
                if hi - lo < 1e-12:
                    break
            u, U = u - hi, b
            switch = u
            kg = 1
            us.append(u)
            Us.append(U)
            continue
        u, U = u + step, U_new
        us.append(u)
        Us.append(U)
    us = np.concatenate([np.array(us[::-1]), us3[1:]])
    Us = np.concatenate([np.array(Us[::-1]), Us3[1:]])
    return us, Us, switch


def verify_upper_boundary_ode(p: ModelParams, h: float = 1e-5, check_order: bool = True) -> OdeCheck:
    """Integrate the single-loan boundary ODE and compare with the closed form on [c(1,1), 3 b_hat]."""
    if h <= 0:
        raise DomainError("step must be positive")
    g = geometry(p, 1)
    us, Us, switch = _integrate_upper(p, h)
    exact = g.upper(us)
    err = np.abs(Us - exact)
    if check_order and err.max() > 1e-9:
        us2, Us2, _ = _integrate_upper(p, 2 * h)
        err2 = np.abs(Us2 - g.upper(us2)).max()
        if err2 < err.max():
            raise ConvergenceError(f"ODE residual not decreasing with the step: {err2:.3e} at 2h vs {err.max():.3e} at h")
    return OdeCheck(
        max_error=float(err.max()),
        max_rel_error=float((err / np.abs(exact)).max()),
        switch_point=float(switch) if switch is not None else float("nan"),
        kink_jumps=kink_derivative_jumps(g),
        n_steps=len(us) - 1,
    )


def kink_derivative_jumps(g: CredibleSetGeometry, h: float = 1e-6) -> dict:
    """Relative jump of the central-difference derivative of adjacent branches at each kink."""

    def cd(piece, x):
        return (g.upper_piece(x + h, piece) - g.upper_piece(x - h, piece)) / (2 * h)

    out = {}
    for name, x, left, right in (("x_star", g.x_star, 1, 2), ("b_hat", g.b_hat, 2, 3)):
        dl, dr = cd(left, x), cd(right, x)
        out[name] = float(abs(dl - dr) / abs(dr))
    return out
