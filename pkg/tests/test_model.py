from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contractlab.errors import DomainError
from contractlab.model import IntensityTable, ModelParams, figure_one_params, validate_assumptions


def params(**kw) -> ModelParams:
    d = dict(I=1, mu=0.1, B=0.002, eps=0.25, r=0.02, alpha=(0.055,), rho_g=2.0, rho_b=1.0)
    d.update(kw)
    return ModelParams(**d)


def test_reference_parameters_satisfy_all_conditions(fig1):
    rep = validate_assumptions(fig1)
    assert rep.holds_i and rep.holds_ii and rep.holds_iii and rep.all_hold
    assert rep.slack_ii[0] == pytest.approx(3.1625e-4 - 5e-5, rel=1e-12)


def test_increasing_hazard_breaks_ordering_condition():
    rep = validate_assumptions(params(I=2, alpha=(0.05, 0.06)))
    assert not rep.holds_iii
    assert not rep.all_hold


def test_zero_benefit_slack():
    p = params(B=0.0)
    rep = validate_assumptions(p)
    assert rep.holds_ii
    assert rep.slack_ii[0] == pytest.approx(p.mu * p.eps * p.eps * p.alpha[0], rel=1e-14)


def test_report_serialises():
    d = validate_assumptions(figure_one_params()).to_dict()
    assert d["holds"] == [True, True, True]
    assert "note" in d


def test_intensity_examples(fig1):
    assert fig1.intensity(1, 0) == pytest.approx(0.055, rel=1e-15)
    assert fig1.intensity(1, 1) == pytest.approx(0.06875, rel=1e-14)
    p = params(I=3, alpha=(0.06, 0.055, 0.05))
    assert p.intensity(3, 3) == p.lambda_sh(3) == pytest.approx(0.05 * 3 * 1.25)


def test_threshold_examples(fig1):
    assert fig1.b_hat(1) == pytest.approx(0.1454545454545, rel=1e-12)
    assert params(B=0.0).b_hat(1) == 0.0
    p = params(I=2, alpha=(0.06, 0.055))
    assert p.b_hat(2) >= p.b_hat(1)


@pytest.mark.parametrize("j,k", [(0, 0), (2, 0), (1, 2), (1, -1)])
def test_intensity_rejects_bad_indices(fig1, j, k):
    with pytest.raises(DomainError):
        fig1.intensity(j, k)


@pytest.mark.parametrize("kw", [
    dict(rho_g=1.0, rho_b=1.0), dict(rho_b=0.0), dict(eps=0.0), dict(alpha=(0.0,)), dict(I=2),
    dict(p_g=0.7, p_b=0.7), dict(I=0, alpha=()), dict(r=-0.01),
])
def test_invalid_parameters_rejected(kw):
    with pytest.raises(DomainError):
        params(**kw)


def test_dict_round_trip_and_unknown_keys(fig1):
    assert ModelParams.from_dict(fig1.to_dict()) == fig1
    d = fig1.to_dict()
    d["extra"] = 1
    with pytest.raises(DomainError):
        ModelParams.from_dict(d)
    d = fig1.to_dict()
    del d["mu"]
    with pytest.raises(DomainError):
        ModelParams.from_dict(d)


def test_intensity_table_matches_scalar_methods():
    p = params(I=3, alpha=(0.06, 0.055, 0.05))
    tab = IntensityTable.build(p)
    for j in range(1, 4):
        for k in range(j + 1):
            assert tab.lambda_k(j, k) == pytest.approx(p.intensity(j, k), rel=1e-15)
        assert tab.b_hat[j] == pytest.approx(p.b_hat(j), rel=1e-15)


alphas = st.lists(st.floats(1e-3, 1.0), min_size=1, max_size=8)


@settings(max_examples=100, deadline=None)
@given(alphas, st.floats(0.01, 2.0), st.floats(0.0, 0.01))
def test_intensity_is_affine_in_shirking(alpha, eps, B):
    p = params(I=len(alpha), alpha=tuple(alpha), eps=eps, B=B)
    for j in range(1, p.I + 1):
        assert p.intensity(j, 0) == p.lambda_0(j)
        assert p.intensity(j, j) == p.lambda_sh(j)
        steps = np.diff([p.intensity(j, k) for k in range(j + 1)])
        assert np.all(steps > 0)
        assert np.allclose(steps, p.alpha[j - 1] * eps, rtol=1e-12, atol=0)
        assert p.b_hat(j) * p.alpha[j - 1] * eps == pytest.approx(B, rel=1e-14, abs=1e-300)


@settings(max_examples=100, deadline=None)
@given(alphas, st.floats(0.0, 1.0), st.floats(0.0, 0.01))
def test_thresholds_non_decreasing_when_conditions_hold(alpha, mu, B):
    p = params(I=len(alpha), alpha=tuple(alpha), mu=mu, B=B)
    if validate_assumptions(p).all_hold:
        b = [p.b_hat(j) for j in range(1, p.I + 1)]
        assert all(b2 >= b1 for b1, b2 in zip(b, b[1:]))
    assert math.isfinite(validate_assumptions(p).slack_i)
