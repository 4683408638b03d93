from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contractlab.credible_set import (C_all, contains, geometry, lower_boundary,
                                      shirk_table, shirk_utility, shirk_utility_nested, upper_boundary,
                                      verify_upper_boundary_ode)
from contractlab.errors import DomainError
from contractlab.model import ModelParams, figure_one_params, toy_pool


def test_first_shirk_utility(fig1):
    assert shirk_utility(fig1, 1, 1) == pytest.approx(0.0225352112676056, rel=1e-12)
    for p in (toy_pool(3), toy_pool(5)):
        for j in range(1, p.I + 1):
            assert shirk_utility(p, j, 1) == pytest.approx(p.B * j / (p.r + p.lambda_sh(j)), rel=1e-14)


def test_recursion_matches_nested_products():
    p = toy_pool(5)
    for j in range(1, 6):
        for m in range(1, j + 1):
            assert shirk_utility(p, j, m) == pytest.approx(shirk_utility_nested(p, j, m), rel=1e-13)


def test_full_shirk_utility_recursion():
    p = toy_pool(5)
    C = [0.0]
    for j in range(1, 6):
        lsh = p.lambda_sh(j)
        C.append(p.B * j / (p.r + lsh) + C[-1] * lsh / (p.r + lsh))
    assert np.allclose(C_all(p), C, rtol=1e-14, atol=0)


def test_shirk_utilities_increase_in_defaults():
    t = shirk_table(toy_pool(5))
    for j in range(2, 6):
        assert np.all(np.diff(t[j, 1:j + 1]) > 0)


def test_lower_boundary_examples():
    p = toy_pool(3)
    for j in (1, 2, 3):
        g = geometry(p, j)
        assert lower_boundary(p, j, g.C_j) == pytest.approx(g.C_j, rel=1e-15)
        assert lower_boundary(p, j, g.c1) == pytest.approx(g.c1, rel=1e-15)
        assert lower_boundary(p, j, g.C_j + p.rho_b) == pytest.approx(g.C_j + p.rho_g, rel=1e-14)


def test_upper_boundary_examples(fig1):
    g = geometry(fig1, 1)
    assert upper_boundary(fig1, 1, g.b_hat) == pytest.approx(0.290909090909, rel=1e-11)
    assert upper_boundary(fig1, 1, g.c1) == pytest.approx(g.c1, rel=1e-14)
    assert g.x_star == pytest.approx(0.07666064267940476, rel=1e-12)
    assert g.x_star == pytest.approx(0.0766633, rel=1e-4)


def test_contains_examples(fig1):
    g = geometry(fig1, 1)
    assert contains(fig1, 1, g.c1, g.c1)
    assert not contains(fig1, 1, g.b_hat, 2 * g.b_hat + 1e-6)
    assert contains(fig1, 1, g.C_j, g.C_j)
    assert not contains(fig1, 1, g.c1 * 0.5, g.c1)


def test_below_feasible_set_rejected(fig1):
    with pytest.raises(DomainError):
        upper_boundary(fig1, 1, 0.0)
    with pytest.raises(DomainError):
        shirk_utility(fig1, 1, 2)


def test_ode_matches_closed_form(fig1):
    chk = verify_upper_boundary_ode(fig1, 1e-5)
    assert chk.max_error < 1e-6
    assert chk.kink_jumps["x_star"] < 1e-8 and chk.kink_jumps["b_hat"] < 1e-8
    # the good bank starts monitoring where the boundary crosses b_hat
    g = geometry(fig1, 1)
    assert chk.switch_point == pytest.approx(g.x_star, abs=1e-5)


def test_top_region_is_exact_linear_solution(fig1):
    g = geometry(fig1, 1)
    r, l0 = fig1.r, fig1.lambda_0(1)
    u = np.linspace(g.b_hat, 3 * g.b_hat, 11)
    U = g.upper(u)
    lhs = r * U
    rhs = g.ratio * (r * u + u * l0) - U * l0
    assert np.max(np.abs(lhs - rhs)) < 1e-16


def pools():
    return st.builds(
        lambda a, eps, B, rg: ModelParams(I=len(a), mu=0.1, B=B, eps=eps, r=0.02,
                                          alpha=tuple(sorted(a, reverse=True)), rho_g=rg, rho_b=1.0),
        st.lists(st.floats(0.01, 0.2), min_size=1, max_size=4), st.floats(0.05, 1.0),
        st.floats(1e-4, 0.01), st.floats(1.2, 4.0))


@settings(max_examples=60, deadline=None)
@given(pools(), st.data())
def test_boundary_shape(p, data):
    j = data.draw(st.integers(1, p.I))
    g = geometry(p, j)
    R = g.ratio
    assert g.c1 <= g.x_star < g.b_hat
    assert g.x_star > g.b_hat / R
    u = np.concatenate([np.linspace(g.c1, 3 * g.b_hat, 400), [g.x_star, g.b_hat, g.C_j]])
    U, L = g.upper(u), g.lower(u)
    assert np.all(U >= L - 1e-15 * np.abs(U))
    assert np.all(L >= u - 1e-15 * np.abs(u))
    assert U[0] == pytest.approx(L[0], rel=1e-14)
    # ratio to the diagonal: at most R, equal exactly from b_hat on
    q = U / u
    assert np.all(q <= R * (1 + 1e-13))
    assert np.all(q[u < g.b_hat * (1 - 1e-9)] < R)
    assert np.allclose(q[u >= g.b_hat], R, rtol=1e-13)
    # slopes: at least R, non-increasing, equal to R from b_hat on
    us = np.linspace(g.c1, 3 * g.b_hat, 3001)[1:]
    d = g.upper_derivative(us)
    assert np.all(d >= R * (1 - 1e-12))
    assert np.all(np.diff(d) <= 1e-12 * d[:-1])
    assert np.allclose(d[us >= g.b_hat], R, rtol=1e-13)
    assert g.upper_derivative(g.c1 + 1e-12) == pytest.approx(R ** (1 / g.a), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(pools(), st.data())
def test_upper_boundary_is_c1_and_concave(p, data):
    j = data.draw(st.integers(1, p.I))
    g = geometry(p, j)
    # one-sided analytic slopes of the adjacent branches agree at both kinks
    c, a, R, b = g.c1, g.a, g.ratio, g.b_hat
    mid_slope = lambda x: R * b ** (1 - a) * a ** (1 - a) * (x - c) ** (a - 1)
    assert mid_slope(g.x_star) == pytest.approx(R ** (1 / a), rel=1e-12)
    assert mid_slope(b) == pytest.approx(R, rel=1e-12)
    assert g.upper_piece(g.x_star, 1) == pytest.approx(g.upper_piece(g.x_star, 2), rel=1e-12)
    assert g.upper_piece(b, 2) == pytest.approx(g.upper_piece(b, 3), rel=1e-12)
    u = np.linspace(g.c1, 3 * g.b_hat, 2001)
    U = g.upper(u)
    second = U[2:] - 2 * U[1:-1] + U[:-2]
    assert np.all(second <= 1e-12 * np.abs(U[1:-1]))


@settings(max_examples=60, deadline=None)
@given(pools(), st.data())
def test_shirk_utility_telescoping(p, data):
    j = data.draw(st.integers(2, p.I)) if p.I > 1 else 1
    t = shirk_table(p)
    for m in range(1, j):
        prod = 1.0
        for ell in range(j - m + 1, j + 1):
            prod *= p.lambda_sh(ell) / (p.r + p.lambda_sh(ell))
        n = j - m
        diff = p.B * n / (p.r + p.lambda_sh(n)) * prod
        assert t[j, m + 1] - t[j, m] == pytest.approx(diff, rel=1e-10)
        assert diff > 0


def test_geometry_is_cached():
    p = figure_one_params()
    assert geometry(p, 1) is geometry(p, 1)
