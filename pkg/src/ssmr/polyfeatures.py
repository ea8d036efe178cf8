"""Ordered monomial bases ``x^{a:b}`` and their analytic Jacobians.

The geometry lift, the reduced dynamics and every linearization in the MPC
share the same feature map, so the ordering defined here is part of the model
file format.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement
from math import comb

import numpy as np


class BasisError(ValueError):
    """Invalid degree range or a dimension mismatch against a basis."""


@dataclass(frozen=True)
class MultiIndexBasis:
    """Graded-lexicographic monomial exponents of total degree in ``[min_order, max_order]``.

    Within one degree, tuples run in descending lexicographic order, e.g. for
    two variables at degree 2: ``(2,0), (1,1), (0,2)``.
    """

    n: int
    min_order: int
    max_order: int
    exponents: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        # frozen dataclass: cache a dense array view for vectorised evaluation
        arr = np.array(self.exponents, dtype=np.int64).reshape(len(self.exponents), self.n)
        object.__setattr__(self, "_array", arr)

    def __len__(self) -> int:
        return len(self.exponents)

    @property
    def array(self) -> np.ndarray:
        return self._array

    @property
    def is_empty(self) -> bool:
        return len(self.exponents) == 0

    def to_list(self) -> list[list[int]]:
        return [list(e) for e in self.exponents]

    @classmethod
    def from_list(cls, n: int, exponents) -> "MultiIndexBasis":
        """Rebuild a basis from a stored exponent list (model files are self-describing)."""
        exps = tuple(tuple(int(v) for v in e) for e in exponents)
        for e in exps:
            if len(e) != n or min(e, default=0) < 0:
                raise BasisError(f"exponent {e} incompatible with n={n}")
        if exps:
            degs = [sum(e) for e in exps]
            lo, hi = min(degs), max(degs)
        else:
            lo, hi = 2, 1
        return cls(n=n, min_order=lo, max_order=hi, exponents=exps)


def basis_size(n: int, min_order: int, max_order: int) -> int:
    """Closed-form count ``C(n+max, n) - C(n+min-1, n)``."""
    if max_order < min_order:
        return 0
    return comb(n + max_order, n) - comb(n + min_order - 1, n)


def build_basis(n: int, min_order: int, max_order: int) -> MultiIndexBasis:
    if n < 1:
        raise BasisError(f"dimension must be >= 1, got {n}")
    if min_order < 1 or min_order > max_order:
        raise BasisError(f"invalid degree range [{min_order}, {max_order}]")
    exps = []
    for degree in range(min_order, max_order + 1):
        # combinations_with_replacement walks variable indices in ascending
        # order, which yields exponent tuples in descending lex order
        for combo in combinations_with_replacement(range(n), degree):
            e = [0] * n
            for i in combo:
                e[i] += 1
            exps.append(tuple(e))
    return MultiIndexBasis(n=n, min_order=min_order, max_order=max_order, exponents=tuple(exps))


def empty_basis(n: int) -> MultiIndexBasis:
    """Basis with no terms, used for linear-only (order 1) lifts and dynamics."""
    return MultiIndexBasis(n=n, min_order=2, max_order=1, exponents=())


def nonlinear_basis(n: int, order: int) -> MultiIndexBasis:
    """The ``x^{2:order}`` tail; empty when ``order < 2``."""
    if order < 2:
        return empty_basis(n)
    return build_basis(n, 2, order)


def _power_table(basis: MultiIndexBasis, X: np.ndarray) -> list[list[np.ndarray]]:
    top = basis.max_order if not basis.is_empty else 0
    table = []
    for i in range(basis.n):
        row = [np.ones_like(X[i])]
        for _ in range(top):
            row.append(row[-1] * X[i])
        table.append(row)
    return table


def evaluate_features(basis: MultiIndexBasis, x: np.ndarray) -> np.ndarray:
    """Evaluate all monomials at ``x``.

    ``x`` may be a single point of shape ``(n,)`` (returns ``(L,)``) or a
    column batch of shape ``(n, K)`` (returns ``(L, K)``).
    """
    x = np.asarray(x, dtype=float)
    if x.shape[0] != basis.n or x.ndim not in (1, 2):
        raise BasisError(f"expected leading dimension {basis.n}, got shape {x.shape}")
    out = np.empty((len(basis),) + x.shape[1:])
    if basis.is_empty:
        return out
    table = _power_table(basis, x)
    for j, e in enumerate(basis.exponents):
        acc = None
        for i, p in enumerate(e):
            if p:
                acc = table[i][p] if acc is None else acc * table[i][p]
        out[j] = acc
    return out


def feature_directional(basis: MultiIndexBasis, x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Directional derivative ``(d features / dx) h`` for column batches ``x``, ``h`` of shape ``(n, K)``."""
    x = np.asarray(x, dtype=float)
    h = np.asarray(h, dtype=float)
    if x.shape != h.shape or x.shape[0] != basis.n:
        raise BasisError(f"shape mismatch: x {x.shape}, h {h.shape}, n={basis.n}")
    out = np.zeros((len(basis),) + x.shape[1:])
    if basis.is_empty:
        return out
    table = _power_table(basis, x)
    for j, e in enumerate(basis.exponents):
        for i, p in enumerate(e):
            if p == 0:
                continue
            term = p * table[i][p - 1] * h[i]
            for l, q in enumerate(e):
                if l != i and q:
                    term = term * table[l][q]
            out[j] += term
    return out


def feature_jacobian(basis: MultiIndexBasis, x: np.ndarray) -> np.ndarray:
    """Analytic Jacobian ``d features / dx`` of shape ``(L, n)`` at a single point."""
    x = np.asarray(x, dtype=float)
    if x.shape != (basis.n,):
        raise BasisError(f"expected shape ({basis.n},), got {x.shape}")
    jac = np.zeros((len(basis), basis.n))
    if basis.is_empty:
        return jac
    table = _power_table(basis, x)
    for j, e in enumerate(basis.exponents):
        for i, p in enumerate(e):
            if p == 0:
                continue
            val = p * table[i][p - 1]
            for l, q in enumerate(e):
                if l != i and q:
                    val = val * table[l][q]
            jac[j, i] = val
    return jac
