"""Investor value inside the credible set: 2D variational inequalities with a payment gradient constraint.

The domain for pool size j is parametrised by (x, s): x is the bad bank's
value, s in [0, 1] interpolates between the lower and the upper boundary. The
continuation is an upwind Markov chain on the (x, s) lattice (one node of
travel per step in each coordinate, so all weights are non-negative and the
scheme is monotone) and is solved by Howard policy iteration. Payments are a
step of one column along -(rho_b, rho_g). The boundary rows are solved as 1D
problems under the closed-form boundary controls, so they converge to the
boundary values at first order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import spsolve

from .boundary_values import value_lower, value_upper_bad, value_upper_good
from .contracts import lower_boundary_policy, upper_boundary_policy
from .credible_set import geometry
from .errors import ConvergenceError, DependencyError, DomainError
from .model import ModelParams
from .pure_moral_hazard import PmhSolution

THETA_POINTS = 33
MAX_CANDIDATES_PER_AXIS = 8
MAX_HOWARD = 10000
MENU_AXIS_POINTS = 401  # same lattice at every resolution, so refinements compare like with like

# domain


@dataclass(frozen=True)
class Domain:
    j: int
    x: np.ndarray  # bad-bank value per column
    L: np.ndarray  # lower boundary per column
    U: np.ndarray  # upper boundary per column
    ns: int  # intervals across each column
    breakpoints: tuple[float, ...]

    @property
    def shape(self) -> tuple[int, int]:
        return self.x.size, self.ns + 1

    @property
    def n_nodes(self) -> int:
        return self.x.size * (self.ns + 1)

    @property
    def s(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.ns + 1)

    @property
    def Y(self) -> np.ndarray:
        return self.L[:, None] + self.s[None, :] * (self.U - self.L)[:, None]

    @property
    def u_max(self) -> float:
        return float(self.x[-1])

    def index(self, x: float) -> int:
        i = int(np.argmin(np.abs(self.x - x)))
        if abs(self.x[i] - x) > 1e-12 * max(1.0, abs(x)):
            raise DomainError(f"{x!r} is not a grid column")
        return i


def _allocate(lengths, resolution: int) -> list[int]:
    """Intervals per segment, exactly doubling when the resolution doubles (multiples of 16)."""
    total = float(sum(lengths))
    if resolution % 16 == 0:
        base = [max(1, round(16 * ln / total)) for ln in lengths]
        return [b * (resolution // 16) for b in base]
    return [max(1, round(resolution * ln / total)) for ln in lengths]


def build_domain(p: ModelParams, j: int, resolution: int, pmh: PmhSolution | None = None,
                 u_max: float | None = None) -> Domain:
    """Boundary-fitted grid over the truncated credible set; kinks of both boundaries are grid columns."""
    if resolution < 16:
        raise DomainError("resolution must be at least 16")
    g = geometry(p, j)
    top = g.u_max() if u_max is None else u_max
    pts = {g.c1, g.x_star, g.b_hat, g.C_j}
    if j > 1:
        pts.add(g.b_hat + p.b_hat(j - 1))
    if pmh is not None:
        pts.add(pmh.gamma_b)
        top = max(top, 1.25 * pmh.gamma_b)
    pts = sorted(v for v in pts if g.c1 <= v < top)
    pts.append(top)
    # merge breakpoints closer than a tiny fraction of the range
    merged = [pts[0]]
    for v in pts[1:]:
        if v - merged[-1] > 1e-9 * (top - g.c1):
            merged.append(v)
    merged[-1] = top
    lengths = np.diff(merged)
    counts = _allocate(lengths, resolution)
    xs = [np.array([merged[0]])]
    for k, (a, b, n) in enumerate(zip(merged[:-1], merged[1:], counts)):
        xi = np.linspace(0.0, 1.0, n + 1)[1:]
        # the boundary values have unbounded slope at c(j,1): grade the first segment quadratically
        seg = a + (b - a) * (xi * xi if k == 0 else xi)
        seg[-1] = b
        xs.append(seg)
    x = np.concatenate(xs)
    L = np.asarray(g.lower(x), dtype=float)
    U = np.asarray(g.upper(x), dtype=float)
    L[0] = U[0] = g.c1
    return Domain(j, x, L, U, resolution, tuple(float(v) for v in merged))


# value function container


@dataclass
class GridValueFunction:
    j: int
    bank: str
    domain: Domain
    V: np.ndarray  # (nx, ns + 1)
    pay: np.ndarray
    theta: np.ndarray
    wb: np.ndarray  # post-default bad-bank value (when theta > 0)
    wg: np.ndarray
    kb: np.ndarray
    kg: np.ndarray
    residual: float = math.nan  # max complementarity residual / scale
    gradient_slack: float = math.nan  # min over nodes of V(P) - (V(P - t rho) - t), / scale
    iterations: int = 0
    boundary_error: dict = field(default_factory=dict)

    @property
    def scale(self) -> float:
        return max(1.0, float(np.max(np.abs(self.V))))

    def value(self, u_b, u_g):
        ub = np.atleast_1d(np.asarray(u_b, dtype=float))
        ug = np.atleast_1d(np.asarray(u_g, dtype=float))
        d = self.domain
        out = _interp_many(d.x, d.L, d.U, d.ns, self.V.ravel(), ub, ug)
        return out if np.ndim(u_b) else float(out[0])

    def upper_row(self) -> np.ndarray:
        return self.V[:, -1]

    def lower_row(self) -> np.ndarray:
        return self.V[:, 0]

    def nearest(self, u_b: float, u_g: float) -> tuple[int, int]:
        d = self.domain
        i = int(np.clip(np.searchsorted(d.x, u_b), 0, d.x.size - 1))
        if i > 0 and abs(d.x[i - 1] - u_b) < abs(d.x[i] - u_b):
            i -= 1
        gap = d.U[i] - d.L[i]
        m = 0 if gap <= 0 else int(round(np.clip((u_g - d.L[i]) / gap, 0, 1) * d.ns))
        return i, m


# interpolation kernels


@njit(cache=True)
def _stencil(xs, Ls, Us, ns, xq, yq, idx, w, hint=-1):
    """Bilinear stencil of (xq, yq) in (x, s) coordinates; points outside the set are projected onto it."""
    n = xs.size
    if xq <= xs[0]:
        c, wx = 0, 0.0
    elif xq >= xs[n - 1]:
        c, wx = n - 2, 1.0
    else:
        c = hint if 0 <= hint < n - 1 else n // 2
        while xq < xs[c]:
            c -= 1
        while xq > xs[c + 1]:
            c += 1
        wx = (xq - xs[c]) / (xs[c + 1] - xs[c])
    # relative height at xq, shared by both columns
    lo = (1.0 - wx) * Ls[c] + wx * Ls[c + 1]
    gapq = (1.0 - wx) * (Us[c] - Ls[c]) + wx * (Us[c + 1] - Ls[c + 1])
    sq = 0.0
    if gapq > 0.0:
        sq = min(max((yq - lo) / gapq, 0.0), 1.0)
    k = 0
    for cc, wc in ((c, 1.0 - wx), (c + 1, wx)):
        if Us[cc] - Ls[cc] <= 0.0:
            m0, wy = 0, 0.0
        else:
            sv = sq * ns
            if sv >= ns:
                m0, wy = ns - 1, 1.0
            else:
                m0 = int(sv)
                if m0 >= ns:
                    m0 = ns - 1
                wy = sv - m0
        base = cc * (ns + 1)
        idx[k] = base + m0
        w[k] = wc * (1.0 - wy)
        idx[k + 1] = base + m0 + 1
        w[k + 1] = wc * wy
        k += 2


@njit(cache=True)
def _interp_many(xs, Ls, Us, ns, V, ub, ug):
    out = np.empty(ub.size)
    idx = np.empty(4, np.int64)
    w = np.empty(4)
    for q in range(ub.size):
        _stencil(xs, Ls, Us, ns, ub[q], ug[q], idx, w)
        v = 0.0
        for k in range(4):
            v += w[k] * V[idx[k]]
        out[q] = v
    return out


# actions

# integer model constants packed in a float vector for the kernels
# prm = [r, B, j, lam0, alpha_eps, b_hat, mu, rho_b, rho_g, good_flag]


@njit(cache=True)
def _continue_action(prm, xs, Ls, Us, ns, i, m, theta, wb, wg, Vw, idx, w):
    """Upwind chain step of a continuation action in column coordinates (x, s).

    s = (u_g - L(x)) / (U(x) - L(x)) is the relative height in the column, so
    a move to the next column keeps s and only the two neighbours are mixed.
    Returns (tau, reward, Lambda, stationary flag); idx and w hold the stencil.
    """
    r, B, j, lam0, ae, bh, mu = prm[0], prm[1], prm[2], prm[3], prm[4], prm[5], prm[6]
    good = prm[9] > 0.5
    ub = xs[i]
    gap = Us[i] - Ls[i]
    sv = m / ns
    ug = Ls[i] + gap * sv
    eb = ub - theta * wb
    eg = ug - theta * wg
    tolb = 1e-12 * bh
    kb = j if eb < bh - tolb else 0.0
    kg = j if eg < bh - tolb else 0.0
    lb = lam0 + ae * kb
    lg = lam0 + ae * kg
    fb = r * ub - B * kb + lb * eb
    fg = r * ug - B * kg + lg * eg
    lam = lg if good else lb
    reward = mu * j + lam * theta * Vw
    base = i * (ns + 1)
    for k in range(4):
        idx[k] = base + m
        w[k] = 0.0
    # column slopes on the upwind side
    ci = i
    if fb > 0.0 and i + 1 < xs.size:
        ci = i + 1
    elif fb < 0.0 and i > 0:
        ci = i - 1
    else:
        fb = 0.0
    if ci != i and gap > 0.0:
        dx = xs[ci] - xs[i]
        dL = (Ls[ci] - Ls[i]) / dx
        dU = (Us[ci] - Us[i]) / dx
        fs = (fg - (dL + sv * (dU - dL)) * fb) / gap
    elif gap > 0.0:
        fs = fg / gap
    else:
        fs = 0.0
    ds = 1.0 / ns
    mi = m
    if fs > 0.0 and m < ns:
        mi = m + 1
    elif fs < 0.0 and m > 0:
        mi = m - 1
    else:
        fs = 0.0
    rate = 0.0
    if ci != i:
        rate += abs(fb) / abs(xs[ci] - xs[i])
    if mi != m:
        rate += abs(fs) / ds
    if rate <= 0.0:
        return 0.0, reward, lam, True
    tau = 1.0 / rate
    if ci != i:
        idx[0] = ci * (ns + 1) + m
        w[0] = abs(fb) / abs(xs[ci] - xs[i]) * tau
    if mi != m:
        idx[1] = base + mi
        w[1] = abs(fs) / ds * tau
    return tau, reward, lam, False


@njit(cache=True)
def _pay_action(prm, xs, Ls, Us, ns, i, m, idx, w):
    """Stencil of a one-column payment step; returns (cost, feasible)."""
    rho_b, rho_g = prm[7], prm[8]
    if i == 0:
        return 0.0, False
    dx = xs[i] - xs[i - 1]
    t = dx / rho_b
    ug = Ls[i] + (Us[i] - Ls[i]) * m / ns
    yq = ug - rho_g * t
    tol = 1e-9 * max(1.0, abs(Us[i - 1]))
    feasible = (yq >= Ls[i - 1] - tol) and (yq <= Us[i - 1] + tol)
    _stencil(xs, Ls, Us, ns, xs[i - 1], yq, idx, w, i - 1)
    return t, feasible


@njit(cache=True)
def _cont_value(tau, reward, lam, stat, V, idx, w):
    if stat:
        return reward / lam
    v = 0.0
    for k in range(4):
        v += w[k] * V[idx[k]]
    return (reward * tau + v) / (1.0 + lam * tau)


@njit(cache=True)
def _improve(prm, xs, Ls, Us, ns, V, thetas, cwb, cwg, cV, pay, th, wsel, fixed, tie, local):
    """One Howard improvement sweep; returns the number of nodes whose action changed.

    With local set, only the current candidate and theta within two grid steps
    are searched (besides liquidation and payment). Nodes are visited by
    increasing column and V is raised in place; since values only increase,
    the new policy is still an improvement.
    """
    nt = thetas.size
    nx = xs.size
    idx = np.empty(4, np.int64)
    w = np.empty(4)
    changed = 0
    for i in range(nx):
        ub = xs[i]
        for m in range(ns + 1):
            q = i * (ns + 1) + m
            if fixed[q]:
                continue
            ug = Ls[i] + (Us[i] - Ls[i]) * m / ns
            # value of the current action first, so ties keep it
            cur = -1e300
            best_pay = pay[q]
            best_th = th[q]
            best_w = wsel[q]
            if pay[q]:
                cost, ok = _pay_action(prm, xs, Ls, Us, ns, i, m, idx, w)
                if ok:
                    v = 0.0
                    for k in range(4):
                        v += w[k] * V[idx[k]]
                    cur = v - cost
            else:
                c = wsel[q]
                wbq = cwb[c] if c >= 0 else 0.0
                wgq = cwg[c] if c >= 0 else 0.0
                vw = cV[c] if c >= 0 else 0.0
                tau, rew, lam, st = _continue_action(prm, xs, Ls, Us, ns, i, m, th[q], wbq, wgq, vw, idx, w)
                cur = _cont_value(tau, rew, lam, st, V, idx, w)
            best = cur
            thr = tie * max(1.0, abs(cur))
            if i < nx - 1:
                # liquidate at the next default
                tau, rew, lam, st = _continue_action(prm, xs, Ls, Us, ns, i, m, 0.0, 0.0, 0.0, 0.0, idx, w)
                v = _cont_value(tau, rew, lam, st, V, idx, w)
                if v > best + thr:
                    best, best_pay, best_th, best_w = v, False, 0.0, -1
                c_lo, c_hi, t_lo, t_hi = 0, cwb.size, 1, nt
                if local:
                    if wsel[q] < 0 or nt < 2:
                        c_lo, c_hi = 0, 0
                    else:
                        c_lo, c_hi = wsel[q], wsel[q] + 1
                        tc = int(round(th[q] * (nt - 1)))
                        t_lo, t_hi = max(1, tc - 2), min(nt, tc + 3)
                for c in range(c_lo, c_hi):
                    if cwb[c] > ub or cwg[c] > ug:
                        continue
                    for t in range(t_lo, t_hi):
                        tv = thetas[t]
                        tau, rew, lam, st = _continue_action(prm, xs, Ls, Us, ns, i, m, tv, cwb[c], cwg[c], cV[c], idx, w)
                        v = _cont_value(tau, rew, lam, st, V, idx, w)
                        if v > best + thr:
                            best, best_pay, best_th, best_w = v, False, tv, c
            cost, ok = _pay_action(prm, xs, Ls, Us, ns, i, m, idx, w)
            if ok or i == nx - 1:
                v = 0.0
                for k in range(4):
                    v += w[k] * V[idx[k]]
                v -= cost
                if v > best + thr or i == nx - 1:
                    best, best_pay, best_th, best_w = v, True, 0.0, -1
            if best_pay != pay[q] or best_th != th[q] or best_w != wsel[q]:
                changed += 1
            if best > V[q]:
                # Gauss-Seidel: later nodes see the improved value, so payment chains propagate in one sweep
                V[q] = best
            pay[q] = best_pay
            th[q] = best_th
            wsel[q] = best_w
    return changed


@njit(cache=True)
def _assemble(prm, xs, Ls, Us, ns, pay, th, wsel, cwb, cwg, cV, fixed, Vfixed):
    nx = xs.size
    n = nx * (ns + 1)
    rows = np.empty(6 * n, np.int64)
    cols = np.empty(6 * n, np.int64)
    vals = np.empty(6 * n)
    rhs = np.empty(n)
    idx = np.empty(4, np.int64)
    w = np.empty(4)
    k = 0
    for i in range(nx):
        for m in range(ns + 1):
            q = i * (ns + 1) + m
            if fixed[q]:
                rows[k], cols[k], vals[k] = q, q, 1.0
                k += 1
                rhs[q] = Vfixed[q]
                continue
            if pay[q]:
                cost, ok = _pay_action(prm, xs, Ls, Us, ns, i, m, idx, w)
                rows[k], cols[k], vals[k] = q, q, 1.0
                k += 1
                for a in range(4):
                    rows[k], cols[k], vals[k] = q, idx[a], -w[a]
                    k += 1
                rhs[q] = -cost
                continue
            c = wsel[q]
            wbq = cwb[c] if c >= 0 else 0.0
            wgq = cwg[c] if c >= 0 else 0.0
            vw = cV[c] if c >= 0 else 0.0
            tau, rew, lam, st = _continue_action(prm, xs, Ls, Us, ns, i, m, th[q], wbq, wgq, vw, idx, w)
            if st:
                rows[k], cols[k], vals[k] = q, q, lam
                k += 1
                rhs[q] = rew
                continue
            rows[k], cols[k], vals[k] = q, q, 1.0 + lam * tau
            k += 1
            for a in range(4):
                rows[k], cols[k], vals[k] = q, idx[a], -w[a]
                k += 1
            rhs[q] = rew * tau
    return rows[:k], cols[:k], vals[:k], rhs


@njit(cache=True)
def _residuals(prm, xs, Ls, Us, ns, V, thetas, cwb, cwg, cV, fixed):
    """Max |max_a T_a V - V| and min gradient slack over free nodes."""
    nx = xs.size
    idx = np.empty(4, np.int64)
    w = np.empty(4)
    res = 0.0
    slack = 1e300
    for i in range(nx):
        ub = xs[i]
        for m in range(ns + 1):
            q = i * (ns + 1) + m
            if fixed[q]:
                continue
            ug = Ls[i] + (Us[i] - Ls[i]) * m / ns
            best = -1e300
            if i < nx - 1:
                tau, rew, lam, st = _continue_action(prm, xs, Ls, Us, ns, i, m, 0.0, 0.0, 0.0, 0.0, idx, w)
                best = max(best, _cont_value(tau, rew, lam, st, V, idx, w))
                for c in range(cwb.size):
                    if cwb[c] > ub or cwg[c] > ug:
                        continue
                    for t in range(1, thetas.size):
                        tau, rew, lam, st = _continue_action(prm, xs, Ls, Us, ns, i, m, thetas[t], cwb[c], cwg[c], cV[c], idx, w)
                        best = max(best, _cont_value(tau, rew, lam, st, V, idx, w))
            cost, ok = _pay_action(prm, xs, Ls, Us, ns, i, m, idx, w)
            if ok or i == nx - 1:
                v = -cost
                for k in range(4):
                    v += w[k] * V[idx[k]]
                best = max(best, v)
                slack = min(slack, V[q] - v)
            res = max(res, abs(best - V[q]))
    return res, slack


# boundary rows


@dataclass(frozen=True)
class BoundaryRows:
    lower: np.ndarray
    upper: np.ndarray
    lower_exact: np.ndarray
    upper_exact: np.ndarray

    @property
    def errors(self) -> dict:
        return {"lower": float(np.max(np.abs(self.lower - self.lower_exact))),
                "upper": float(np.max(np.abs(self.upper - self.upper_exact)))}


def _row_interp(prev: GridValueFunction | None, row: str, x):
    if prev is None:
        return np.zeros_like(np.asarray(x, dtype=float))
    d = prev.domain
    v = prev.upper_row() if row == "upper" else prev.lower_row()
    return np.interp(x, d.x, v)


def solve_boundary_rows(p: ModelParams, j: int, dom: Domain, bank: str, prev: GridValueFunction | None,
                        pmh: PmhSolution) -> BoundaryRows:
    """Upwind 1D solutions along both boundaries under the closed-form boundary controls."""
    g = geometry(p, j)
    x = dom.x
    n = x.size
    lsh, l0 = p.lambda_sh(j), p.lambda_0(j)
    mj = p.mu * j
    # upper boundary
    bp = p.b_hat(j - 1) if j > 1 else 0.0
    f = np.empty(n)
    lam = np.empty(n)
    reward = np.full(n, mj)
    for i, u in enumerate(x):
        if u < g.b_hat:
            f[i] = (p.r + lsh) * (u - g.c1)
            if bank == "good":
                lam[i] = lsh if u < g.x_star else l0
            else:
                lam[i] = lsh
        elif j == 1:
            # nothing is left after the last default, so the whole promise is at stake
            f[i] = (p.r + l0) * u
            lam[i] = l0
        else:
            f[i] = p.r * u + l0 * g.b_hat
            lam[i] = l0
            if j > 1:
                if u < g.b_hat + bp:
                    th, w = (u - g.b_hat) / bp, bp
                else:
                    th, w = 1.0, u - g.b_hat
                reward[i] += l0 * th * float(_row_interp(prev, "upper", w))
    f[0] = 0.0
    i_b = dom.index(g.b_hat)
    best, best_W = -math.inf, None
    for k in range(i_b, n):
        W = np.empty(n)
        # node k holds the state with the stationary payment rate, nodes above pay down to it
        W[k] = (reward[k] - f[k] / p.rho_b) / lam[k]
        for i in range(k + 1, n):
            W[i] = W[i - 1] - (x[i] - x[i - 1]) / p.rho_b
        for i in range(k - 1, -1, -1):
            a = f[i] / (x[i + 1] - x[i])
            W[i] = (reward[i] + a * W[i + 1]) / (a + lam[i])
        if best_W is None or W[i_b] > best + 1e-14 * abs(best):
            best, best_W = W[i_b], W
    upper = best_W
    exact_fn = value_upper_good if bank == "good" else value_upper_bad
    upper_exact = np.asarray(exact_fn(p, j, x, pmh), dtype=float)
    # lower boundary
    i_C = dom.index(g.C_j)
    lower = np.empty(n)
    stay = float(_row_interp(prev, "lower", g.C_prev)) if j > 1 else 0.0
    lower[i_C] = (mj + lsh * stay) / lsh if j > 1 else mj / lsh
    for i in range(i_C + 1, n):
        lower[i] = lower[i - 1] - (x[i] - x[i - 1]) / p.rho_b
    for i in range(i_C - 1, -1, -1):
        fi = (p.r + lsh) * (x[i] - g.c1)
        a = fi / (x[i + 1] - x[i])
        lower[i] = (mj + a * lower[i + 1]) / (a + lsh)
    lower_exact = np.asarray(value_lower(p, j, x), dtype=float)
    return BoundaryRows(lower, upper, lower_exact, upper_exact)


# solver


def _params_vector(p: ModelParams, j: int, bank: str) -> np.ndarray:
    return np.array([p.r, p.B, float(j), p.lambda_0(j), p.alpha[j - 1] * p.eps, p.b_hat(j), p.mu,
                     p.rho_b, p.rho_g, 1.0 if bank == "good" else 0.0])


def _candidates(prev: GridValueFunction | None, per_axis: int):
    if prev is None:
        return np.zeros(0), np.zeros(0), np.zeros(0)
    d = prev.domain
    nx, ny = d.shape
    ci = np.unique(np.concatenate([np.linspace(0, nx - 1, min(per_axis, nx)).round().astype(int)]))
    mi = np.unique(np.linspace(0, ny - 1, min(per_axis, ny)).round().astype(int))
    X = d.x[ci][:, None] * np.ones(mi.size)[None, :]
    Y = d.Y[np.ix_(ci, mi)]
    Vv = prev.V[np.ix_(ci, mi)]
    # the collapsed first column is a single point
    keep = np.ones(X.shape, dtype=bool)
    if ci[0] == 0:
        keep[0, 1:] = False
    return X[keep].ravel().copy(), Y[keep].ravel().copy(), Vv[keep].ravel().copy()


def solve_vi(p: ModelParams, j: int, bank: str, prev: GridValueFunction | None, pmh: PmhSolution,
             resolution: int = 64, theta_points: int = THETA_POINTS,
             candidates_per_axis: int = MAX_CANDIDATES_PER_AXIS, tol: float = 1e-8,
             max_iter: int = MAX_HOWARD, warm: GridValueFunction | None = None) -> GridValueFunction:
    """Howard iteration on the discretised variational inequality for one pool size and bank system."""
    if bank not in ("good", "bad"):
        raise DomainError("bank must be 'good' or 'bad'")
    if pmh is None or pmh.j != j:
        raise DependencyError(f"pure moral hazard solution for j={j} is required")
    if j > 1 and (prev is None or prev.j != j - 1 or prev.bank != bank):
        raise DependencyError(f"grid solution for j={j - 1} ({bank}) is required")
    dom = build_domain(p, j, resolution, pmh)
    nx, ny = dom.shape
    rows = solve_boundary_rows(p, j, dom, bank, prev, pmh)
    prm = _params_vector(p, j, bank)
    xs, Ls, Us, ns = dom.x, dom.L, dom.U, dom.ns
    fixed = np.zeros((nx, ny), dtype=np.bool_)
    Vfixed = np.zeros((nx, ny))
    fixed[0, :] = True
    Vfixed[0, :] = p.mu * j / p.lambda_sh(j)
    fixed[:, 0] = True
    fixed[:, -1] = True
    Vfixed[:, 0] = rows.lower
    Vfixed[:, -1] = rows.upper
    Vfixed[0, :] = rows.lower[0]
    fixed, Vfixed = fixed.ravel(), Vfixed.ravel()
    thetas = np.linspace(0.0, 1.0, theta_points if j > 1 else 1)
    cwb, cwg, cV = _candidates(prev, candidates_per_axis)
    if j == 1:
        cwb, cwg, cV = np.zeros(0), np.zeros(0), np.zeros(0)
    pay = np.zeros(nx * ny, dtype=np.bool_)
    th = np.zeros(nx * ny)
    wsel = np.full(nx * ny, -1, dtype=np.int64)
    pay[(nx - 1) * ny:] = True
    V = Vfixed.copy()
    if warm is not None:
        # start from the first improvement of a coarser solution instead of the do-nothing policy
        if warm.j != j or warm.bank != bank:
            raise DomainError("warm start must solve the same pool size and bank system")
        Xn = np.repeat(xs, ny)
        V0 = warm.value(np.minimum(Xn, warm.domain.x[-1]), dom.Y.ravel())
        V = np.where(fixed, Vfixed, V0)
        _improve(prm, xs, Ls, Us, ns, V.copy(), thetas, cwb, cwg, cV, pay, th, wsel, fixed, 1e-13, False)
    scale = 1.0
    local = False  # the first sweep is a full search
    last_full = False
    for it in range(1, max_iter + 1):
        r_, c_, v_, b_ = _assemble(prm, xs, Ls, Us, ns, pay, th, wsel, cwb, cwg, cV, fixed, Vfixed)
        A = csr_matrix((v_, (r_, c_)), shape=(nx * ny, nx * ny))
        Vn = spsolve(A, b_)
        if not np.all(np.isfinite(Vn)):
            raise ConvergenceError(f"singular policy evaluation at j={j} ({bank})")
        delta = float(np.max(np.abs(Vn - V)))
        V = Vn
        scale = max(1.0, float(np.max(np.abs(V))))
        if last_full and delta < tol * scale:
            break
        changed = _improve(prm, xs, Ls, Us, ns, V.copy(), thetas, cwb, cwg, cV, pay, th, wsel, fixed, 1e-13, local)
        last_full = not local
        if last_full:
            if changed == 0:
                break
            local = cwb.size > 0
        elif changed == 0 or delta < tol * scale:
            local = False
    else:
        raise ConvergenceError(f"Howard iteration did not converge in {max_iter} sweeps (j={j}, {bank})")
    res, slack = _residuals(prm, xs, Ls, Us, ns, V, thetas, cwb, cwg, cV, fixed)
    wb = np.where(wsel >= 0, cwb[np.maximum(wsel, 0)] if cwb.size else 0.0, 0.0)
    wg = np.where(wsel >= 0, cwg[np.maximum(wsel, 0)] if cwg.size else 0.0, 0.0)
    sh = (nx, ny)
    pay, th, wb, wg = (a.reshape(sh).copy() for a in (pay, th, wb, wg))
    _boundary_controls(p, j, dom, pmh, pay, th, wb, wg)
    kb = np.where(dom.x[:, None] - th * wb < p.b_hat(j) * (1 - 1e-12), j, 0)
    kg = np.where(dom.Y - th * wg < p.b_hat(j) * (1 - 1e-12), j, 0)
    return GridValueFunction(j, bank, dom, V.reshape(sh), pay, th,
                             wb, wg, kb, kg,
                             residual=float(res / scale), gradient_slack=float(slack / scale),
                             iterations=it, boundary_error=rows.errors)


def _boundary_controls(p: ModelParams, j: int, dom: Domain, pmh: PmhSolution, pay, th, wb, wg) -> None:
    """Write the closed-form boundary controls into the fixed boundary rows (in place)."""
    gp = geometry(p, j - 1) if j > 1 else None
    for i in range(1, dom.x.size):
        for m, c in ((dom.ns, upper_boundary_policy(p, j, dom.x[i], pmh)),
                     (0, lower_boundary_policy(p, j, dom.x[i]))):
            pay[i, m] = c.lump > 0.0
            th[i, m] = c.theta if gp is not None else 0.0
            if th[i, m] > 0.0:
                wb[i, m] = c.h2
                wg[i, m] = gp.upper(c.h2) if m == dom.ns else gp.lower(c.h2)
            else:
                wb[i, m] = wg[i, m] = 0.0


def solve_all(p: ModelParams, bank: str, pmh_list, resolution: int = 64, j_max: int | None = None,
              **kw) -> list[GridValueFunction]:
    out: list[GridValueFunction] = []
    prev = None
    for j in range(1, (j_max or p.I) + 1):
        prev = solve_vi(p, j, bank, prev, pmh_list[j - 1], resolution, **kw)
        out.append(prev)
    return out


# policy extraction


@dataclass(frozen=True)
class PolicyTable:
    j: int
    u_b: np.ndarray
    u_g: np.ndarray
    value: np.ndarray
    pay: np.ndarray
    theta: np.ndarray
    h1b: np.ndarray
    h2b: np.ndarray
    h1g: np.ndarray
    h2g: np.ndarray
    kb: np.ndarray
    kg: np.ndarray

    def rows(self):
        for q in range(self.u_b.size):
            yield (self.u_b[q], self.u_g[q], self.value[q], self.theta[q], self.h1b[q], self.h1g[q],
                   int(self.pay[q]))


def extract_policy(V: GridValueFunction) -> PolicyTable:
    """Feedback controls per node; with theta = 0 the whole promise is at stake (h1 = u, h2 = 0)."""
    d = V.domain
    ub = np.repeat(d.x, d.ns + 1)
    ug = d.Y.ravel()
    th = V.theta.ravel()
    keep = th > 0
    h2b = np.where(keep, V.wb.ravel(), 0.0)
    h2g = np.where(keep, V.wg.ravel(), 0.0)
    return PolicyTable(V.j, ub, ug, V.V.ravel().copy(), V.pay.ravel().copy(), th.copy(),
                       ub - h2b, h2b, ug - h2g, h2g, V.kb.ravel().copy(), V.kg.ravel().copy())


def payment_region_closed(V: GridValueFunction, tol: float = 1e-9) -> list[tuple[int, int]]:
    """Paying nodes whose neighbour one column along +(rho_b, rho_g) does not pay."""
    d = V.domain
    bad = []
    p_ratio = None
    for i in range(1, d.x.size - 1):
        for m in range(d.ns + 1):
            if not V.pay[i, m]:
                continue
            y = d.L[i] + (d.U[i] - d.L[i]) * m / d.ns
            if p_ratio is None:
                p_ratio = _ratio_of(V)
            yq = y + p_ratio * (d.x[i + 1] - d.x[i])
            gap = d.U[i + 1] - d.L[i + 1]
            if yq > d.U[i + 1] + tol or yq < d.L[i + 1] - tol:
                continue
            s = 0.0 if gap <= 0 else (yq - d.L[i + 1]) / gap
            lo, hi = int(math.floor(s * d.ns + 1e-9)), int(math.ceil(s * d.ns - 1e-9))
            if not (V.pay[i + 1, max(lo, 0)] or V.pay[i + 1, min(hi, d.ns)]):
                bad.append((i, m))
    return bad


def _ratio_of(V: GridValueFunction) -> float:
    d = V.domain
    # the upper boundary beyond b_hat has slope rho_g / rho_b
    return float((d.U[-1] - d.U[-2]) / (d.x[-1] - d.x[-2]))


# menu values


@dataclass(frozen=True)
class MenuValue:
    shutdown: float
    screening: float
    shutdown_point: tuple[float, float] | None
    screening_points: tuple | None
    feasible_shutdown: bool
    feasible_screening: bool

    def to_dict(self):
        return {"v_shutdown": self.shutdown, "v_screening": self.screening,
                "shutdown_point": self.shutdown_point, "screening_points": self.screening_points,
                "feasible_shutdown": self.feasible_shutdown, "feasible_screening": self.feasible_screening}


def _rect_values(V: GridValueFunction, ub_axis, ug_axis):
    d = V.domain
    U = np.asarray(geometry_upper(V, ub_axis))
    L = np.asarray(geometry_lower(V, ub_axis))
    UB, UG = np.meshgrid(ub_axis, ug_axis, indexing="ij")
    inside = (UG >= L[:, None] - 1e-12) & (UG <= U[:, None] + 1e-12) & (UB <= d.x[-1])
    vals = np.full(UB.shape, -np.inf)
    vals[inside] = V.value(UB[inside], UG[inside])
    return vals


def geometry_upper(V: GridValueFunction, x):
    return np.interp(x, V.domain.x, V.domain.U)


def geometry_lower(V: GridValueFunction, x):
    return np.interp(x, V.domain.x, V.domain.L)


def optimal_menu_value(p: ModelParams, Vg: GridValueFunction, Vb: GridValueFunction | None,
                       R0_b: float, R0_g: float, n_axis: int | None = None) -> MenuValue:
    """Shutdown and screening values by cumulative maxima on a common rectangular lattice."""
    d = Vg.domain
    n_axis = n_axis or MENU_AXIS_POINTS
    ub_axis = np.linspace(d.x[0], d.x[-1], n_axis)
    ug_axis = np.linspace(d.x[0], float(d.U[-1]), n_axis)
    G = _rect_values(Vg, ub_axis, ug_axis)
    sel_b = ub_axis <= R0_b
    sel_g = ug_axis >= R0_g
    sub = np.where(sel_b[:, None] & sel_g[None, :], G, -np.inf)
    if np.isfinite(sub).any():
        a, b = np.unravel_index(np.argmax(sub), sub.shape)
        shut, shut_pt, shut_ok = p.p_g * float(sub[a, b]), (float(ub_axis[a]), float(ug_axis[b])), True
    else:
        shut, shut_pt, shut_ok = math.nan, None, False
    if Vb is None:
        return MenuValue(shut, math.nan, shut_pt, None, shut_ok, False)
    Bv = _rect_values(Vb, ub_axis, ug_axis)
    A = np.maximum.accumulate(G, axis=0)  # best temptation value u_bc <= u_b
    Bc = np.maximum.accumulate(Bv, axis=1)  # best temptation value u_gc <= u_g
    tot = p.p_g * A + p.p_b * Bc
    tot = np.where((ub_axis >= R0_b)[:, None] & sel_g[None, :], tot, -np.inf)
    if np.isfinite(tot).any():
        a, b = np.unravel_index(np.argmax(tot), tot.shape)
        a_g = int(np.argmax(G[: a + 1, b]))
        b_b = int(np.argmax(Bv[a, : b + 1]))
        pts = {"good": (float(ub_axis[a_g]), float(ug_axis[b])), "bad": (float(ub_axis[a]), float(ug_axis[b_b]))}
        return MenuValue(shut, float(tot[a, b]), shut_pt, pts, shut_ok, True)
    return MenuValue(shut, math.nan, shut_pt, None, shut_ok, False)


# Monte Carlo of the extracted feedback policy


@njit(cache=True)
def _nearest(xs, Ls, Us, ns, ub, ug):
    n = xs.size
    i = np.searchsorted(xs, ub)
    if i >= n:
        i = n - 1
    if i > 0 and abs(xs[i - 1] - ub) < abs(xs[i] - ub):
        i -= 1
    # relative height measured at the true u_b, so a point on a boundary maps to that boundary row
    lo = np.interp(ub, xs, Ls)
    gap = np.interp(ub, xs, Us) - lo
    if gap <= 0 or Us[i] - Ls[i] <= 0:
        return i, 0
    s = (ug - lo) / gap
    s = min(max(s, 0.0), 1.0)
    return i, int(round(s * ns))


@njit(cache=True)
def _clamp(xs, Ls, Us, ub, ug):
    """Stop a path at the boundary it reaches; from there the boundary controls apply."""
    if ub < xs[0]:
        ub = xs[0]
    lo = np.interp(ub, xs, Ls)
    hi = np.interp(ub, xs, Us)
    if ug < lo:
        ug = lo
    elif ug > hi:
        ug = hi
    return ub, ug


@njit(cache=True)
def _trajectory(prm, xs, Ls, Us, ns, payf, thf, wbf, wgf, ub0, ug0, dt, h_max, max_steps):
    """Deterministic path between defaults under the nearest-node feedback controls.

    Per step: pay down along -(rho_b, rho_g) out of the paying set (bisection),
    then move for dt with fixed shirking counts (closed-form linear flow).
    Returns per-step arrays: start time, cumulative hazard at start, lump paid,
    intensity, keep probability and post-default point.
    """
    r, B, j, lam0, ae, bh = prm[0], prm[1], prm[2], prm[3], prm[4], prm[5]
    rho_b, rho_g = prm[7], prm[8]
    good = prm[9] > 0.5
    T = np.empty(max_steps + 1)
    H = np.empty(max_steps + 1)
    lump = np.zeros(max_steps + 1)
    lam_s = np.empty(max_steps + 1)
    keep = np.empty(max_steps + 1)
    wbs = np.empty(max_steps + 1)
    wgs = np.empty(max_steps + 1)
    ub, ug = ub0, ug0
    t, h = 0.0, 0.0
    n = 0
    c1 = xs[0]
    for n in range(max_steps):
        i, m = _nearest(xs, Ls, Us, ns, ub, ug)
        paid = 0.0
        if payf[i * (ns + 1) + m]:
            # march along the payment direction until the first non-paying node, then bisect that step
            lo = 0.0
            hi = 0.0
            while True:
                dcol = xs[min(max(i, 1), xs.size - 1)] - xs[min(max(i, 1), xs.size - 1) - 1]
                hi = min(lo + 0.25 * dcol / rho_b, (ub - c1) / rho_b)
                ii, mm = _nearest(xs, Ls, Us, ns, ub - rho_b * hi, ug - rho_g * hi)
                if not payf[ii * (ns + 1) + mm] or hi >= (ub - c1) / rho_b:
                    break
                lo = hi
                i = ii
            for _ in range(50):
                mid = 0.5 * (lo + hi)
                ii, mm = _nearest(xs, Ls, Us, ns, ub - rho_b * mid, ug - rho_g * mid)
                if payf[ii * (ns + 1) + mm]:
                    lo = mid
                else:
                    hi = mid
            paid = hi
            ub -= rho_b * hi
            ug -= rho_g * hi
            ub, ug = _clamp(xs, Ls, Us, ub, ug)
            i, m = _nearest(xs, Ls, Us, ns, ub, ug)
        q = i * (ns + 1) + m
        th = thf[q]
        wb = wbf[q] if th > 0 else 0.0
        wg = wgf[q] if th > 0 else 0.0
        eb = ub - th * wb
        eg = ug - th * wg
        kb = j if eb < bh * (1 - 1e-12) else 0.0
        kg = j if eg < bh * (1 - 1e-12) else 0.0
        lb = lam0 + ae * kb
        lg = lam0 + ae * kg
        lam = lg if good else lb
        T[n], H[n], lump[n], lam_s[n], keep[n], wbs[n], wgs[n] = t, h, paid, lam, th, wb, wg
        # linear flow du = (a u - b) dt per bank
        ab, bb = r + lb, B * kb + lb * th * wb
        ag, bg = r + lg, B * kg + lg * th * wg
        ub = (ub - bb / ab) * math.exp(ab * dt) + bb / ab
        ug = (ug - bg / ag) * math.exp(ag * dt) + bg / ag
        ub, ug = _clamp(xs, Ls, Us, ub, ug)
        t += dt
        h += lam * dt
        if h > h_max:
            n += 1
            break
    T[n], H[n], lam_s[n], keep[n], wbs[n], wgs[n] = t, h, lam_s[n - 1], 0.0, 0.0, 0.0
    return T[: n + 1], H[: n + 1], lump[: n + 1], lam_s[: n + 1], keep[: n + 1], wbs[: n + 1], wgs[: n + 1]


@dataclass
class _Traj:
    T: np.ndarray
    H: np.ndarray
    cum_lump: np.ndarray
    lam: np.ndarray
    keep: np.ndarray
    wb: np.ndarray
    wg: np.ndarray


def simulate_policy(p: ModelParams, sols: list[GridValueFunction], j: int, u_b: float, u_g: float,
                    n: int, seed: int, dt: float | None = None, h_max: float = 45.0):
    """Investor value of the extracted feedback policy by exact default sampling along precomputed paths."""
    from .simulation import McEstimate, uniforms

    if n < 100:
        raise DomainError("need at least 100 paths for a meaningful standard error")
    cache: dict = {}

    def traj(jj, ub, ug):
        key = (jj, ub, ug)
        if key not in cache:
            V = sols[jj - 1]
            d = V.domain
            prm = _params_vector(p, jj, V.bank)
            # a quarter of a typical column per step
            speed = (p.r + p.lambda_sh(jj)) * d.x[-1]
            step = dt or min(0.02 / (p.lambda_sh(jj) + p.r), 0.25 * float(np.median(np.diff(d.x))) / speed)
            max_steps = int(h_max / (p.lambda_0(jj) * step)) + 2
            T, H, lump, lam, keep, wb, wg = _trajectory(
                prm, d.x, d.L, d.U, d.ns, V.pay.ravel(), V.theta.ravel(), V.wb.ravel(), V.wg.ravel(),
                ub, ug, step, h_max, max_steps)
            cache[key] = _Traj(T, H, np.cumsum(lump), lam, keep, wb, wg)
        return cache[key]

    ids = np.arange(n, dtype=np.uint64)
    inv = np.zeros(n)
    jj = np.full(n, j)
    ubs = np.full(n, u_b)
    ugs = np.full(n, u_g)
    alive = np.ones(n, dtype=bool)
    stage = 0
    while alive.any():
        idx = np.flatnonzero(alive)
        E = -np.log(uniforms(seed, ids[idx], 2 * stage))
        U = uniforms(seed, ids[idx], 2 * stage + 1)
        groups: dict = {}
        for q, key in zip(idx, zip(jj[idx], ubs[idx], ugs[idx])):
            groups.setdefault(key, []).append(q)
        for key, members in groups.items():
            members = np.asarray(members)
            pos = np.searchsorted(idx, members)
            tr = traj(int(key[0]), float(key[1]), float(key[2]))
            e = E[pos]
            k = np.clip(np.searchsorted(tr.H, e, side="right") - 1, 0, tr.lam.size - 1)
            tdef = tr.T[k] + (e - tr.H[k]) / tr.lam[k]
            inv[members] += p.mu * key[0] * tdef - tr.cum_lump[k]
            cont = (U[pos] < tr.keep[k]) & (key[0] > 1)
            nxt = members[cont]
            alive[members[~cont]] = False
            jj[nxt] = key[0] - 1
            ubs[nxt] = tr.wb[k][cont]
            ugs[nxt] = tr.wg[k][cont]
        stage += 1
    return McEstimate(float(inv.mean()), float(inv.std(ddof=1) / math.sqrt(n)), n, seed)
