"""Link families for the marginal occupation model.

A family bundles the inverse link ``f``, its derivative and the working
variance weight ``V`` that enters the estimating equation.  Two families are
shipped, ``logit`` and ``cloglog``; both accept scalars or arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit

from .exceptions import DomainError

#: Probabilities are clamped to ``[EPS, 1 - EPS]`` so that ``V`` stays bounded.
EPS = 1e-12

__all__ = [
    "EPS",
    "LinkFamily",
    "LOGIT",
    "CLOGLOG",
    "get_family",
    "inverse_link",
    "link_derivative",
    "variance_weight",
]


def _logit_inv(eta):
    return expit(eta)


def _logit_deriv(eta):
    mu = expit(eta)
    return mu * (1.0 - mu)


def _logit_g(mu):
    return np.log(mu) - np.log1p(-mu)


def _cloglog_inv(eta):
    return -np.expm1(-np.exp(eta))


def _cloglog_deriv(eta):
    return np.exp(eta - np.exp(eta))


def _cloglog_g(mu):
    return np.log(-np.log1p(-mu))


@dataclass(frozen=True)
class LinkFamily:
    """Inverse link, its derivative and the canonical variance weight.

    ``weighted=False`` replaces ``V`` by the constant 1.
    """

    name: str
    f: Callable
    f_prime: Callable
    g: Callable
    weighted: bool = True

    def mu(self, eta):
        return np.clip(self.f(eta), EPS, 1.0 - EPS)

    def v_weight(self, mu):
        if not self.weighted:
            return np.ones_like(np.asarray(mu, dtype=float))
        return 1.0 / (mu * (1.0 - mu))

    def unweighted(self) -> "LinkFamily":
        return LinkFamily(self.name, self.f, self.f_prime, self.g, weighted=False)

    @property
    def canonical(self) -> bool:
        """True when ``f'(eta) * V(f(eta)) == 1`` identically."""
        return self.name == "logit" and self.weighted


LOGIT = LinkFamily("logit", _logit_inv, _logit_deriv, _logit_g)
CLOGLOG = LinkFamily("cloglog", _cloglog_inv, _cloglog_deriv, _cloglog_g)

_FAMILIES = {"logit": LOGIT, "cloglog": CLOGLOG}


def get_family(name: str | LinkFamily) -> LinkFamily:
    """Look a family up by name; families pass through unchanged."""
    if isinstance(name, LinkFamily):
        return name
    try:
        return _FAMILIES[name.lower()]
    except KeyError:
        raise ValueError(
            f"unknown link {name!r}; expected one of {sorted(_FAMILIES)}"
        ) from None


def inverse_link(family, eta):
    """Mean ``f(eta)`` clamped to ``(EPS, 1 - EPS)``."""
    return get_family(family).mu(eta)


def link_derivative(family, eta):
    """Derivative ``f'(eta)`` of the inverse link."""
    return get_family(family).f_prime(eta)


def variance_weight(family, mu):
    """Working weight ``1 / (mu (1 - mu))``.

    Raises
    ------
    DomainError
        If any ``mu`` lies outside the open unit interval.
    """
    mu_arr = np.asarray(mu, dtype=float)
    if np.any(~((mu_arr > 0.0) & (mu_arr < 1.0))):
        raise DomainError(f"variance weight needs mu in (0, 1), got {mu!r}")
    out = get_family(family).v_weight(mu_arr)
    return float(out) if np.ndim(out) == 0 else out
