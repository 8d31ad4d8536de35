"""Scaled Hermite-polynomial feature maps.

The feature class is spanned by interactions of probabilists' Hermite
polynomials normalized to be orthonormal under the standard Gaussian,
with one positive scale per term chosen so the squared scales sum to
one.  Terms of total degree k share the scale 1/(k*sqrt(n_k)) before
the global rescaling, where n_k counts the degree-k interactions.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

DEFAULT_TERM_CAP = 5000


class BasisCapacityError(ValueError):
    """Raised when the requested basis would exceed the term cap."""


def _multi_indices(d: int, degree: int) -> list[tuple[int, ...]]:
    """All d-tuples of nonnegative ints summing to ``degree``, grlex order.

    Within a fixed total degree, tuples are ordered lexicographically
    descending, so for d=2, degree 2: (2,0), (1,1), (0,2).
    """
    if d == 1:
        return [(degree,)]
    out = []
    for first in range(degree, -1, -1):
        out.extend((first, *rest) for rest in _multi_indices(d - 1, degree - first))
    return out


def n_terms(degree: int, d: int) -> int:
    """Number of degree-``degree`` interaction terms in d dimensions."""
    return math.comb(degree + d - 1, d - 1)


@dataclass(frozen=True)
class HermiteBasis:
    """Term list and scales for the feature map.

    Attributes
    ----------
    d : int
        Covariate dimension.
    max_order : int
        Maximum total polynomial degree.
    terms : tuple of tuple of int
        Multi-indices with total degree in 1..max_order (no constant).
    scale : ndarray of shape (p,)
        Per-term positive scales with sum of squares equal to 1.
    """

    d: int
    max_order: int
    terms: tuple
    scale: np.ndarray

    @property
    def p(self) -> int:
        return len(self.terms)

    def describe(self) -> dict:
        return {
            "d": self.d,
            "max_order": self.max_order,
            "p": self.p,
            "terms": [list(t) for t in self.terms],
            "scale": [float(a) for a in self.scale],
        }

    def to_json(self) -> str:
        return json.dumps(self.describe(), indent=2)


def build_basis(
    d: int,
    max_order: int,
    univariate_order: int | None = None,
    term_cap: int = DEFAULT_TERM_CAP,
) -> HermiteBasis:
    """Enumerate all interaction terms of total degree 1..max_order.

    Raw weights are 1/(k*sqrt(n_{k,d})) per total degree k (with n_{k,d}
    the number of terms of that degree in the basis), rescaled globally
    so the squared scales sum to one.

    ``univariate_order`` optionally appends pure single-coordinate terms
    of degree max_order+1..univariate_order.  High-frequency univariate
    structure sits at high polynomial degree, where full interaction
    bases are combinatorially out of reach; the tail adds it at d terms
    per degree.
    """
    if d < 1 or max_order < 1:
        raise ValueError("need d >= 1 and max_order >= 1")
    uni = max_order if univariate_order is None else univariate_order
    if uni < max_order:
        raise ValueError("univariate_order must be >= max_order")
    p = sum(n_terms(k, d) for k in range(1, max_order + 1)) + d * (uni - max_order)
    if p > term_cap:
        raise BasisCapacityError(
            f"basis would have {p} terms, exceeding the cap of {term_cap}"
        )
    terms = []
    raw = []
    for k in range(1, max_order + 1):
        idx = _multi_indices(d, k)
        w = 1.0 / (k * math.sqrt(len(idx)))
        terms.extend(idx)
        raw.extend([w] * len(idx))
    for k in range(max_order + 1, uni + 1):
        idx = [tuple(k if j == dim else 0 for j in range(d)) for dim in range(d)]
        w = 1.0 / (k * math.sqrt(len(idx)))
        terms.extend(idx)
        raw.extend([w] * len(idx))
    raw = np.asarray(raw)
    scale = raw / math.sqrt(float(raw @ raw))
    scale.setflags(write=False)
    return HermiteBasis(
        d=d, max_order=max(max_order, uni), terms=tuple(terms), scale=scale
    )


def hermite_table(x: np.ndarray, max_order: int) -> np.ndarray:
    """Normalized probabilists' Hermite values he_k(x)/sqrt(k!) for k=0..max_order.

    Uses the stable normalized three-term recurrence; output shape is
    (max_order+1,) + x.shape.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty((max_order + 1,) + x.shape)
    out[0] = 1.0
    if max_order >= 1:
        out[1] = x
    for k in range(1, max_order):
        out[k + 1] = (x * out[k] - math.sqrt(k) * out[k - 1]) / math.sqrt(k + 1)
    return out


def features(basis: HermiteBasis, x: np.ndarray) -> np.ndarray:
    """Evaluate the scaled feature vector at a single covariate vector."""
    x = np.asarray(x, dtype=float)
    if x.shape != (basis.d,):
        raise ValueError(f"expected covariate vector of length {basis.d}, got shape {x.shape}")
    return feature_matrix(basis, x[None, :])[0]


def feature_matrix(basis: HermiteBasis, x: np.ndarray) -> np.ndarray:
    """Evaluate the scaled features row-wise for an (n, d) covariate matrix."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != basis.d:
        raise ValueError(f"expected (n, {basis.d}) covariates, got shape {x.shape}")
    table = hermite_table(x, basis.max_order)  # (max_order+1, n, d)
    n = x.shape[0]
    out = np.empty((n, basis.p))
    for j, term in enumerate(basis.terms):
        col = np.full(n, basis.scale[j])
        for dim, deg in enumerate(term):
            if deg:
                col = col * table[deg, :, dim]
        out[:, j] = col
    return out


@dataclass(frozen=True)
class Standardizer:
    """Per-column location/scale transform fit on training covariates."""

    mean: np.ndarray
    sd: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        x = np.asarray(x, dtype=float)
        mean = x.mean(axis=0)
        sd = x.std(axis=0, ddof=1) if x.shape[0] > 1 else np.ones(x.shape[1])
        sd = np.where(sd > 0, sd, 1.0)
        return cls(mean=mean, sd=sd)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.sd


def basis_matrix(basis: HermiteBasis, data, standardizer: Standardizer | None = None) -> np.ndarray:
    """Scaled feature matrix for a dataset, standardizing covariates first.

    If no standardizer is supplied, one is fit on the dataset itself
    (full-sample standardization).
    """
    std = standardizer or Standardizer.fit(data.x)
    return feature_matrix(basis, std.apply(data.x))


def default_max_order(d: int) -> int:
    """Default maximum total degree: 3 for d <= 6, else 2."""
    return 3 if d <= 6 else 2
