from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from contractlab import hjb_interior as H
from contractlab.boundary_values import value_lower, value_upper_bad, value_upper_good
from contractlab.credible_set import geometry
from contractlab.errors import DependencyError, DomainError
from contractlab.model import figure_one_params, toy_pool
from contractlab.pure_moral_hazard import solve_pmh_all

RES = 32


@pytest.fixture(scope="module")
def pool():
    p = toy_pool(2)
    return p, solve_pmh_all(p)


@pytest.fixture(scope="module")
def solved(pool):
    p, pm = pool
    return {bank: H.solve_all(p, bank, pm, RES) for bank in ("good", "bad")}


def test_domain_layout(pool):
    p, pm = pool
    for j in (1, 2):
        d = H.build_domain(p, j, 64, pm[j - 1])
        g = geometry(p, j)
        assert d.L[0] == d.U[0] == g.c1
        assert np.all(d.U[1:] > d.L[1:])
        assert d.n_nodes == d.x.size * 65
        assert d.n_nodes == H.build_domain(p, j, 64, pm[j - 1]).n_nodes
        for v in (g.x_star, g.b_hat, g.C_j, pm[j - 1].gamma_b):
            assert np.min(np.abs(d.x - v)) < 1e-12 * v
        assert np.all(np.diff(d.x) > 0)
    # doubling the resolution doubles the intervals of every segment
    a, b = H.build_domain(p, 2, 32, pm[1]), H.build_domain(p, 2, 64, pm[1])
    assert b.x.size - 1 == 2 * (a.x.size - 1)
    assert np.allclose(b.x[::2], a.x, rtol=1e-14)
    with pytest.raises(DomainError):
        H.build_domain(p, 1, 8)


def test_converged_complementarity(solved):
    for sols in solved.values():
        for V in sols:
            assert V.residual < 1e-6
            assert V.gradient_slack > -1e-6


def test_boundary_rows_close_to_closed_forms(pool, solved):
    p, pm = pool
    for bank, sols in solved.items():
        for V in sols:
            d = V.domain
            up = value_upper_good if bank == "good" else value_upper_bad
            err_up = np.max(np.abs(V.upper_row() - up(p, V.j, d.x, pm[V.j - 1])))
            err_lo = np.max(np.abs(V.lower_row() - value_lower(p, V.j, d.x)))
            assert err_up == pytest.approx(V.boundary_error["upper"], rel=1e-9, abs=1e-14)
            assert err_lo == pytest.approx(V.boundary_error["lower"], rel=1e-9, abs=1e-14)
            assert err_up < 0.05 and err_lo < 0.05


def test_boundary_rows_converge_at_first_order(pool):
    p, pm = pool
    errs = [H.solve_vi(p, 1, "bad", None, pm[0], res).boundary_error["upper"] for res in (32, 64)]
    assert 1.5 <= errs[0] / errs[1] <= 2.5


def test_extracted_policy(pool, solved):
    p, pm = pool
    for sols in solved.values():
        for V in sols:
            pol = H.extract_policy(V)
            b = p.b_hat(V.j)
            assert np.allclose(pol.h1b + pol.h2b, pol.u_b, rtol=1e-14)
            assert np.allclose(pol.h1g + pol.h2g, pol.u_g, rtol=1e-14)
            assert np.all((pol.theta >= 0) & (pol.theta <= 1))
            top = V.domain.ns
            up = np.zeros(V.domain.shape, dtype=bool)
            up[1:, top] = True
            up = up.ravel()
            assert np.all(pol.theta[up & (pol.u_b < b * (1 - 1e-12))] == 0.0)
            sel = up & (pol.u_b >= b)
            assert np.all(pol.kb[sel] == 0) and np.all(pol.kg[sel] == 0)
            # recommended shirking follows the exposure rule at every node
            eb = pol.h1b + np.where(pol.theta > 0, (1 - pol.theta) * pol.h2b, 0.0)
            assert np.all((pol.kb == V.j) == (eb < b * (1 - 1e-12)))
            assert sum(1 for _ in pol.rows()) == pol.u_b.size


_OPEN_PAYMENT_REGION = pytest.mark.xfail(
    strict=True, reason="grid pay flag is not closed along (rho_b, rho_g) here; measured in the notes")


@pytest.mark.parametrize("bank,j", [
    ("good", 1),
    pytest.param("bad", 1, marks=_OPEN_PAYMENT_REGION),
    pytest.param("good", 2, marks=_OPEN_PAYMENT_REGION),
    ("bad", 2),
])
def test_payment_region_closed_along_payment_direction(solved, bank, j):
    assert H.payment_region_closed(solved[bank][j - 1]) == []


def test_perturbing_previous_stage_is_contracting(pool, solved):
    p, pm = pool
    eps = 1e-3
    V1, V2 = solved["good"]
    shifted = dataclasses.replace(V1, V=V1.V + eps)
    V2e = H.solve_vi(p, 2, "good", shifted, pm[1], RES)
    bound = eps * p.lambda_sh(2) / (p.r + p.lambda_0(2))
    assert np.max(np.abs(V2e.V - V2.V)) <= bound * (1 + 1e-9)
    assert np.min(V2e.V - V2.V) >= -1e-12


def test_interpolation_reproduces_nodes(solved):
    V = solved["bad"][1]
    d = V.domain
    i, m = 7, 5
    assert V.value(d.x[i], d.Y[i, m]) == pytest.approx(V.V[i, m], rel=1e-12)
    assert V.nearest(d.x[i], d.Y[i, m]) == (i, m)


def test_policy_monte_carlo_single_loan(pool):
    p, pm = pool
    V = H.solve_vi(p, 1, "good", None, pm[0], 64)
    d = V.domain
    ub = 0.5 * (d.x[0] + d.x[-1])
    ug = np.interp(ub, d.x, d.L) + 0.5 * (np.interp(ub, d.x, d.U) - np.interp(ub, d.x, d.L))
    est = H.simulate_policy(p, [V], 1, ub, ug, 20000, seed=1)
    assert est.within(V.value(ub, ug))


def test_menu_values_refine():
    q = figure_one_params()
    pm = solve_pmh_all(q)
    shut, scr = [], []
    for res in (32, 64, 128):
        g = H.solve_vi(q, 1, "good", None, pm[0], res)
        b = H.solve_vi(q, 1, "bad", None, pm[0], res)
        m = H.optimal_menu_value(q, g, b, R0_b=0.05, R0_g=0.06)
        assert m.feasible_shutdown and m.feasible_screening
        shut.append(m.shutdown)
        scr.append(m.screening)
        # the lower-boundary lump-sum ray is feasible for shutdown
        C = geometry(q, 1).C_j
        assert m.shutdown >= q.p_g * value_lower(q, 1, max(C, 0.05)) - 0.02
    assert abs(shut[2] - shut[1]) < abs(shut[1] - shut[0])
    # screening has settled at the lattice level; its successive changes are not monotone (see the notes)
    assert max(scr) - min(scr) < 2e-4
    assert all(s >= h for s, h in zip(scr, shut))
    infeasible = H.optimal_menu_value(q, g, b, R0_b=10.0, R0_g=20.0)
    assert not infeasible.feasible_shutdown


def test_dependency_errors(pool):
    p, pm = pool
    with pytest.raises(DependencyError):
        H.solve_vi(p, 2, "good", None, pm[1], RES)
    with pytest.raises(DependencyError):
        H.solve_vi(p, 1, "good", None, pm[1], RES)
    with pytest.raises(DomainError):
        H.solve_vi(p, 1, "ugly", None, pm[0], RES)
