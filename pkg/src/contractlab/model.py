"""Model primitives: pool parameters, default intensities and the standing assumptions."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Any

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class ModelParams:
    """Loan pool run by a bank of privately known efficiency.

    alpha[j-1] is the baseline per-loan hazard when j loans remain.
    """

    I: int
    mu: float
    B: float
    eps: float
    r: float
    alpha: tuple[float, ...]
    rho_g: float
    rho_b: float
    p_g: float = 0.5
    p_b: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in np.atleast_1d(self.alpha)))
        if not isinstance(self.I, (int, np.integer)) or self.I < 1:
            raise DomainError(f"I must be a positive integer, got {self.I!r}")
        if len(self.alpha) != self.I:
            raise DomainError(f"alpha has {len(self.alpha)} entries, expected I={self.I}")
        if any(not (a > 0 and math.isfinite(a)) for a in self.alpha):
            raise DomainError("all alpha_j must be positive and finite")
        if not self.eps > 0:
            raise DomainError("eps must be positive")
        if self.r < 0 or self.B < 0 or self.mu < 0:
            raise DomainError("r, B and mu must be non-negative")
        if not (self.rho_g > self.rho_b > 0):
            raise DomainError("need rho_g > rho_b > 0")
        if not (0 <= self.p_g <= 1 and 0 <= self.p_b <= 1) or abs(self.p_g + self.p_b - 1) > 1e-12:
            raise DomainError("p_g, p_b must be probabilities summing to one")

    # construction helpers

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ModelParams:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise DomainError(f"unknown model keys: {sorted(unknown)}")
        missing = {f.name for f in fields(cls) if f.name not in ("p_g", "p_b")} - set(d)
        if missing:
            raise DomainError(f"missing model keys: {sorted(missing)}")
        kw = dict(d)
        try:
            kw["I"] = int(kw["I"]) if float(kw["I"]) == int(kw["I"]) else kw["I"]
            for k in ("mu", "B", "eps", "r", "rho_g", "rho_b", "p_g", "p_b"):
                if k in kw:
                    kw[k] = float(kw[k])
            kw["alpha"] = tuple(float(a) for a in kw["alpha"])
        except (TypeError, ValueError) as exc:
            raise DomainError(f"malformed model field: {exc}") from exc
        if "p_g" in kw and "p_b" not in kw:
            kw["p_b"] = 1.0 - kw["p_g"]
        if "p_b" in kw and "p_g" not in kw:
            kw["p_g"] = 1.0 - kw["p_b"]
        return cls(**kw)

    def to_dict(self) -> dict[str, Any]:
        return {f.name: (list(getattr(self, f.name)) if f.name == "alpha" else getattr(self, f.name))
                for f in fields(self)}

    def with_pool(self, alpha) -> ModelParams:
        """Same scalars, different baseline hazards (and pool size)."""
        alpha = tuple(float(a) for a in alpha)
        d = self.to_dict()
        d.update(I=len(alpha), alpha=alpha)
        return ModelParams(**d)

    # intensities

    def _check_j(self, j: int):
        if not (1 <= j <= self.I):
            raise DomainError(f"pool size j={j} outside 1..{self.I}")

    def a(self, j: int) -> float:
        self._check_j(j)
        return self.alpha[j - 1]

    def intensity(self, j: int, k: int) -> float:
        """Aggregate default rate with j loans left, k of them unmonitored."""
        self._check_j(j)
        if not (0 <= k <= j):
            raise DomainError(f"shirk count k={k} outside 0..{j}")
        return self.alpha[j - 1] * (j + self.eps * k)

    def lambda_sh(self, j: int) -> float:
        return self.intensity(j, j)

    def lambda_0(self, j: int) -> float:
        return self.intensity(j, 0)

    def b_hat(self, j: int) -> float:
        """Exposure at which monitoring becomes optimal."""
        self._check_j(j)
        return self.B / (self.alpha[j - 1] * self.eps)

    @property
    def ratio(self) -> float:
        return self.rho_g / self.rho_b


@dataclass(frozen=True)
class IntensityTable:
    """Rates for j = 0..I; index 0 is a zero-rate placeholder for the empty pool."""

    lambda_sh: np.ndarray
    lambda_0: np.ndarray
    b_hat: np.ndarray
    alpha_eps: np.ndarray

    @classmethod
    def build(cls, p: ModelParams) -> IntensityTable:
        js = np.arange(1, p.I + 1)
        a = np.asarray(p.alpha)
        lsh = np.concatenate([[0.0], a * js * (1 + p.eps)])
        l0 = np.concatenate([[0.0], a * js])
        bh = np.concatenate([[0.0], p.B / (a * p.eps)])
        ae = np.concatenate([[0.0], a * p.eps])
        return cls(lsh, l0, bh, ae)

    def lambda_k(self, j, k):
        return self.lambda_0[j] + self.alpha_eps[j] * k


@dataclass(frozen=True)
class AssumptionReport:
    holds_i: bool
    holds_ii: bool
    holds_iii: bool
    slack_i: float
    slack_ii: list[float] = field(default_factory=list)
    slack_iii: list[float] = field(default_factory=list)
    note: str = "barred baseline read as alpha_j"

    @property
    def all_hold(self) -> bool:
        return self.holds_i and self.holds_ii and self.holds_iii

    def to_dict(self) -> dict[str, Any]:
        return {
            "holds": [self.holds_i, self.holds_ii, self.holds_iii],
            "all_hold": self.all_hold,
            "slack_i": self.slack_i,
            "slack_ii": self.slack_ii,
            "slack_iii": self.slack_iii,
            "note": self.note,
        }


def validate_assumptions(p: ModelParams) -> AssumptionReport:
    """Check the three standing conditions; failures are reported, never raised."""
    a = np.asarray(p.alpha)
    slack_i = p.mu - a[-1]
    slack_ii = (p.mu * p.eps - p.B) * p.eps * a - p.r * p.B * (1 + p.eps)
    slack_iii = a[:-1] - a[1:]  # alpha_{j-1} - alpha_j for j = 2..I
    return AssumptionReport(
        holds_i=bool(slack_i >= 0),
        holds_ii=bool(np.all(slack_ii >= 0)),
        holds_iii=bool(np.all(slack_iii >= 0)),
        slack_i=float(slack_i),
        slack_ii=[float(s) for s in slack_ii],
        slack_iii=[float(s) for s in slack_iii],
    )


def figure_one_params(mu: float = 0.1, rho_b: float = 1.0) -> ModelParams:
    """Single-loan parameters of the reference credible-set plot."""
    return ModelParams(I=1, mu=mu, B=0.002, eps=0.25, r=0.02, alpha=(0.055,),
                       rho_g=2.0 * rho_b, rho_b=rho_b)


def toy_pool(j: int = 2, mu: float = 0.1) -> ModelParams:
    """Small decreasing-hazard pool with the reference scalars."""
    alpha = (0.06, 0.055, 0.05, 0.045, 0.04)[:j]
    return ModelParams(I=j, mu=mu, B=0.002, eps=0.25, r=0.02, alpha=alpha, rho_g=2.0, rho_b=1.0)
