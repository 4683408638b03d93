from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.linalg import expm
from scipy.stats import kstest

from contractlab import contracts as K
from contractlab import simulation as S
from contractlab.boundary_values import lower_top_value, solve_nu, value_lower
from contractlab.credible_set import geometry
from contractlab.errors import DomainError
from contractlab.model import toy_pool

N = 100_000


def phase_type_cdf(rates):
    """Cdf of a sum of exponentials via the matrix exponential of its generator."""
    n = len(rates)
    T = np.diag(-np.asarray(rates, dtype=float)) + np.diag(rates[:-1], 1)

    def cdf(x):
        x = np.atleast_1d(x)
        return np.array([1.0 - expm(T * xi)[0].sum() for xi in x])

    return cdf


def test_uniform_stream():
    u = S.uniforms(7, np.arange(1000), 3)
    assert np.all((u > 0) & (u <= 1))
    assert np.array_equal(u, S.uniforms(7, np.arange(1000), 3))
    assert not np.array_equal(u, S.uniforms(8, np.arange(1000), 3))
    assert not np.array_equal(u, S.uniforms(7, np.arange(1000), 4))
    # one path's draws do not depend on how many other paths run
    assert S.uniforms(7, np.array([500]), 3)[0] == u[500]
    assert kstest(S.uniforms(1, np.arange(N), 0), "uniform").pvalue > 0.01


def test_single_loan_shirking_lifetime():
    p = toy_pool(1)
    lam = p.lambda_sh(1)
    res = S.simulate(S.ConstantPolicy(p, 0.0, 0.0), 1, [0.0], N, seed=11)
    assert kstest(res.tau, "expon", args=(0, 1 / lam)).pvalue > 0.01
    se = res.tau.std(ddof=1) / math.sqrt(N)
    assert abs(res.tau.mean() - 1 / lam) < 3 * se


def test_inter_event_and_lifetime_laws(toy3):
    res = S.simulate(S.KeepAllPolicy(toy3), 3, [1.0], N, seed=5)
    for m, j in enumerate((3, 2, 1)):
        gaps = res.inter_event[m]
        assert gaps.size == N
        assert kstest(gaps, "expon", args=(0, 1 / toy3.lambda_sh(j))).pvalue > 0.01
    rates = [toy3.lambda_sh(j) for j in (3, 2, 1)]
    assert kstest(res.tau[:20000], phase_type_cdf(rates)).pvalue > 0.01


def test_piecewise_constant_hazard(toy3):
    j = 2
    c = 2.0 * K.c_bar(toy3, j, toy3.rho_b)
    k = K.ShortTermContract(c, 60.0)
    sw = K.short_term_values(toy3, j, c, 60.0, toy3.rho_b).switch_time
    assert 0 < sw < 60
    lsh, l0 = toy3.lambda_sh(j), toy3.lambda_0(j)
    cdf = lambda t: np.where(t < sw, 1 - np.exp(-lsh * t), 1 - np.exp(-lsh * sw - l0 * (t - sw)))
    res = S.simulate(S.ShortTermPolicy(toy3, k, j), j, [1.0], N, seed=3, bank="bad", strategy="threshold")
    assert kstest(res.tau, cdf).pvalue > 0.01


def test_seed_determinism(toy3, pmh3):
    pol = S.UpperBoundaryPolicy(toy3, pmh3)
    u = 0.5 * (geometry(toy3, 3).x_star + toy3.b_hat(3))
    a = S.simulate(pol, 3, [u], 2000, seed=42, log_paths=(0, 1, 2))
    b = S.simulate(pol, 3, [u], 2000, seed=42, log_paths=(0, 1, 2))
    assert a.bank_pv.tobytes() == b.bank_pv.tobytes()
    assert a.investor.tobytes() == b.investor.tobytes()
    assert repr([a.logs[i].events for i in range(3)]) == repr([b.logs[i].events for i in range(3)])
    c = S.simulate(pol, 3, [u], 2000, seed=43)
    assert c.bank_pv.tobytes() != a.bank_pv.tobytes()


def test_event_log_records_a_trajectory(toy3, pmh3):
    pol = S.UpperBoundaryPolicy(toy3, pmh3)
    res = S.simulate(pol, 3, [1.2 * pmh3[2].gamma_b], 50, seed=1, log_paths=(0,))
    ev = res.logs[0].events
    assert ev[0][1] == "payment-lump"
    assert ev[-1][1] == "default-liquidated"
    assert ev[-1][0] == res.logs[0].tau
    times = [e[0] for e in ev]
    assert times == sorted(times)


def test_upper_policy_from_threshold(fig1, pmh_fig1):
    pol = S.UpperBoundaryPolicy(fig1, pmh_fig1)
    b = fig1.b_hat(1)
    est = S.estimate_bank_value(pol, 1, [b], "bad", "recommended", N, seed=2)
    assert est.within(b)


def test_keep_all_without_payments_gives_full_shirk_utility(toy3):
    for j in (1, 2, 3):
        est = S.estimate_bank_value(S.KeepAllPolicy(toy3), j, [1.0], "bad", "recommended", N, seed=j)
        assert est.within(geometry(toy3, j).C_j)


def test_zero_contract_gives_first_shirk_utility(toy3):
    for j in (1, 3):
        est = S.estimate_bank_value(S.ConstantPolicy(toy3, 0.0, 0.0), j, [0.0], "bad", "recommended", N, seed=j)
        assert est.within(geometry(toy3, j).c1)


def test_constant_payment_when_monitoring(toy3):
    j = 2
    c = 1.5 * K.c_bar(toy3, j, toy3.rho_b)
    pol = S.ConstantPolicy(toy3, 0.0, c, shirk=False)
    est = S.estimate_bank_value(pol, j, [0.0], "bad", "always-work", N, seed=9)
    assert est.within(toy3.rho_b * c / (toy3.r + toy3.lambda_0(j)))


def test_incentive_flip_around_payment_threshold(toy3):
    j = 2
    cb = K.c_bar(toy3, j, toy3.rho_b)
    for factor, shirk_wins in ((0.9, True), (1.1, False)):
        pol = S.ConstantPolicy(toy3, 0.0, factor * cb)
        work = S.estimate_bank_value(pol, j, [0.0], "bad", "always-work", N, seed=4)
        shirk = S.estimate_bank_value(pol, j, [0.0], "bad", "always-shirk", N, seed=4)
        assert (shirk.mean > work.mean) == shirk_wins
        assert abs(shirk.mean - work.mean) > 3 * math.hypot(shirk.se, work.se)


def test_investor_values_on_boundaries(toy3, pmh3):
    low = S.LowerBoundaryPolicy(toy3)
    for j in (1, 2, 3):
        C = geometry(toy3, j).C_j
        est = S.estimate_investor_value(low, j, [C], "bad", N, seed=j, strategy="recommended")
        assert est.within(lower_top_value(toy3, j))
    g = geometry(toy3, 2)
    u = 0.5 * (g.c1 + g.C_j)
    d = S.CutoffPolicy(toy3, 2, solve_nu(toy3, 2, u).cutoffs)
    est = S.estimate_investor_value(d, 2, [u], "bad", N, seed=7, strategy="recommended")
    assert est.within(value_lower(toy3, 2, u))
    up = S.UpperBoundaryPolicy(toy3, pmh3)
    for j in (1, 2):
        u = 1.2 * pmh3[j - 1].gamma_b
        est = S.estimate_investor_value(up, j, [u], "bad", N, seed=j, strategy="recommended")
        assert est.within(float(pmh3[j - 1].value(u)))


def test_lemma_equalities_hold_path_by_path(toy3):
    j = 2
    C = geometry(toy3, j).C_j
    R = toy3.ratio
    pol = S.KeepAllPolicy(toy3, 0.03)
    b = S.simulate(pol, j, [1.0], 2000, seed=1, bank="bad", strategy="threshold").bank_pv
    g = S.simulate(pol, j, [1.0], 2000, seed=1, bank="good", strategy="threshold").bank_pv
    # both banks collect the same shirking rent on each path; only the lump sum is valued differently
    assert np.allclose(g - b, (toy3.rho_g - toy3.rho_b) * 0.03, rtol=1e-12)
    # the rent averages C(j), which gives the lemma equality in expectation
    d = g - R * b + (R - 1) * C
    assert abs(d.mean()) < 3 * d.std(ddof=1) / math.sqrt(d.size)
    zero = S.ShortTermPolicy(toy3, K.ShortTermContract(0.0, 0.0), j)
    b = S.simulate(zero, j, [1.0], 2000, seed=2, bank="bad", strategy="threshold").bank_pv
    g = S.simulate(zero, j, [1.0], 2000, seed=2, bank="good", strategy="threshold").bank_pv
    assert np.array_equal(b, g)
    c = 2.0 * K.c_bar(toy3, j, toy3.rho_b)
    t_star = 0.5 * K.t_bar(toy3, j, c, toy3.rho_b)
    early = S.ShortTermPolicy(toy3, K.ShortTermContract(c, t_star), j)
    b = S.simulate(early, j, [1.0], 2000, seed=3, bank="bad", strategy="threshold").bank_pv
    g = S.simulate(early, j, [1.0], 2000, seed=3, bank="good", strategy="threshold").bank_pv
    assert np.allclose(g, R * b, rtol=1e-13)


def test_small_scan(toy3):
    rep = S.lemma_inequality_scan(toy3, 2, n_contracts=20, n_paths=2000, seed=1)
    assert rep.ok and len(rep.rows) == 20


def test_input_validation(toy3):
    pol = S.KeepAllPolicy(toy3)
    with pytest.raises(DomainError):
        S.simulate(pol, 2, [1.0], 10, 0, bank="ugly")
    with pytest.raises(DomainError):
        S.simulate(pol, 2, [1.0], 10, 0, strategy="random")
    with pytest.raises(DomainError):
        S.simulate(pol, 4, [1.0], 10, 0)
    with pytest.raises(DomainError):
        S.estimate_bank_value(pol, 2, [1.0], "bad", "recommended", 10, 0)
