"""Sparse formal vector fields, near-identity maps, and Lie-algebra operations.

A vector field with diagonal linear part is split as Lambda z + u, where
Lambda = diag(lambda_1, ..., lambda_n) and u collects the higher-order terms.
Only u is stored: a dictionary mapping (component, exponent) to a complex
coefficient, with exponents as tuples of nonnegative integers.  The linear
part is carried as the spectrum tuple and is applied analytically where it
matters, never as stored terms.

Coefficients are kept exactly as computed.  A coefficient is dropped from
storage only when it underflows to zero (|c| < 1e-300); there is no epsilon
rounding anywhere in this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

MultiIndex = tuple[int, ...]
Coefficient = complex

#: modulus below which a stored coefficient is treated as an exact zero
#: (subnormal guard only; never used to round live values)
ZERO_FLOOR = 1e-300


def _validate_exponent(k, dim):
    if not isinstance(k, tuple) or len(k) != dim:
        raise ValueError(f"exponent {k!r} is not a length-{dim} tuple")
    if any((not isinstance(kj, int)) or kj < 0 for kj in k):
        raise ValueError(f"exponent {k!r} has negative or non-integer entries")


def degree(k: MultiIndex) -> int:
    """Total degree |k| = sum of the entries of a (nonnegative) exponent."""
    return sum(k)


@dataclass
class FormalVectorField:
    """Higher-order part of a vector field with diagonal linear part.

    Parameters
    ----------
    dim : int
        Number of phase-space variables n.
    lam : tuple of complex
        Spectrum of the diagonal linear part, length ``dim``.
    terms : dict
        Mapping ``(m, k) -> c`` where ``m`` is a 0-based component index,
        ``k`` a length-``dim`` exponent tuple with ``|k| >= 1`` and ``c`` a
        complex coefficient.  Degree-1 terms are permitted so the Lie
        algebra is closed under brackets with linear fields; the flow and
        certificate entry points require ``|k| >= 2`` and check it
        themselves.
    degree_cap : int
        Largest total degree carried; terms above it are rejected.
    """

    dim: int
    lam: tuple
    terms: dict = field(default_factory=dict)
    degree_cap: int = 6

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be positive, got {self.dim}")
        self.lam = tuple(complex(v) for v in self.lam)
        if len(self.lam) != self.dim:
            raise ValueError(
                f"spectrum has {len(self.lam)} entries for dim {self.dim}")
        if self.degree_cap < 1:
            raise ValueError(f"degree_cap must be >= 1, got {self.degree_cap}")
        clean = {}
        for (m, k), c in self.terms.items():
            if not (isinstance(m, int) and 0 <= m < self.dim):
                raise ValueError(f"component index {m!r} out of range")
            _validate_exponent(k, self.dim)
            d = degree(k)
            if d < 1:
                raise ValueError(f"exponent {k} has degree {d} < 1")
            if d > self.degree_cap:
                raise ValueError(
                    f"exponent {k} exceeds degree cap {self.degree_cap}")
            c = complex(c)
            if not (math.isfinite(c.real) and math.isfinite(c.imag)):
                raise ValueError(f"non-finite coefficient at ({m}, {k})")
            if abs(c) >= ZERO_FLOOR:
                clean[(m, k)] = c
        self.terms = clean

    def min_degree(self):
        return min((degree(k) for (_, k) in self.terms), default=None)

    def max_degree(self):
        return max((degree(k) for (_, k) in self.terms), default=None)

    def require_nonlinear(self, context=""):
        """Raise if any stored term has degree < 2."""
        d = self.min_degree()
        if d is not None and d < 2:
            where = f" in {context}" if context else ""
            raise ValueError(
                f"field{where} must start at degree 2, found degree {d}")

    def eval(self, z, include_linear=False):
        """Evaluate at a point ``z`` (sequence of complex numbers).

        Returns a list of component values; with ``include_linear`` the
        diagonal part ``lam[m] * z[m]`` is added.
        """
        out = [0j] * self.dim
        for (m, k), c in self.terms.items():
            w = c
            for zj, kj in zip(z, k):
                if kj:
                    w *= zj ** kj
            out[m] += w
        if include_linear:
            for m in range(self.dim):
                out[m] += self.lam[m] * z[m]
        return out


@dataclass
class SeriesMap:
    """Near-identity polynomial map phi(z) = z + Phi(z), Phi = O(|z|^2).

    Only the nonlinear part ``Phi`` is stored, as ``(i, k) -> c`` with
    ``|k| >= 2``; the identity linear part is implicit.
    """

    dim: int
    terms: dict = field(default_factory=dict)
    degree_cap: int = 6

    def __post_init__(self):
        clean = {}
        for (i, k), c in self.terms.items():
            if not (isinstance(i, int) and 0 <= i < self.dim):
                raise ValueError(f"map component {i!r} out of range")
            _validate_exponent(k, self.dim)
            d = degree(k)
            if d < 2:
                raise ValueError(
                    f"map nonlinearity has degree-{d} exponent {k}; the "
                    f"linear part is the implicit identity")
            if d > self.degree_cap:
                raise ValueError(
                    f"exponent {k} exceeds degree cap {self.degree_cap}")
            c = complex(c)
            if abs(c) >= ZERO_FLOOR:
                clean[(i, k)] = c
        self.terms = clean

    def eval(self, z):
        out = list(complex(v) for v in z)
        for (i, k), c in self.terms.items():
            w = c
            for zj, kj in zip(z, k):
                if kj:
                    w *= zj ** kj
            out[i] += w
        return out

    def jacobian(self, z):
        """Dense Jacobian matrix D phi at a point (list of rows)."""
        n = self.dim
        J = [[1.0 + 0j if i == j else 0j for j in range(n)] for i in range(n)]
        for (i, k), c in self.terms.items():
            for j in range(n):
                if k[j] == 0:
                    continue
                w = c * k[j]
                for t in range(n):
                    kt = k[t] - (1 if t == j else 0)
                    if kt:
                        w *= z[t] ** kt
                J[i][j] += w
        return J


# ---- basic arithmetic ----------------------------------------------------


def _store(acc, key, c):
    prev = acc.get(key)
    val = c if prev is None else prev + c
    if abs(val) < ZERO_FLOOR:
        acc.pop(key, None)
    else:
        acc[key] = val


def add(u: FormalVectorField, v: FormalVectorField) -> FormalVectorField:
    """Sum of two fields over the same spectrum."""
    if u.dim != v.dim or u.lam != v.lam:
        raise ValueError("cannot add fields with different dimension or spectrum")
    out = dict(u.terms)
    for key, c in v.terms.items():
        _store(out, key, c)
    return FormalVectorField(u.dim, u.lam, out,
                             max(u.degree_cap, v.degree_cap))


def scale(u: FormalVectorField, a) -> FormalVectorField:
    a = complex(a)
    return FormalVectorField(
        u.dim, u.lam, {key: a * c for key, c in u.terms.items()}, u.degree_cap)


def truncate(u: FormalVectorField, cap: int) -> FormalVectorField:
    """Drop all terms of total degree above ``cap``."""
    kept = {key: c for key, c in u.terms.items() if degree(key[1]) <= cap}
    return FormalVectorField(u.dim, u.lam, kept, cap)


def lie_bracket(u: FormalVectorField, v: FormalVectorField,
                cap: int) -> FormalVectorField:
    """Lie bracket [u, v]_i = sum_j (u_j dv_i/dz_j - v_j du_i/dz_j).

    Computed exactly on the sparse representations and truncated at total
    degree ``cap``.  The diagonal linear parts are not included; bracket a
    field against an explicitly built degree-1 field when the linear part
    is wanted.
    """
    if u.dim != v.dim:
        raise ValueError(f"dimension mismatch {u.dim} vs {v.dim}")
    n = u.dim
    acc = {}
    for (j, ku), cu in u.terms.items():
        for (i, kv), cv in v.terms.items():
            # u_j * d v_i / d z_j
            if kv[j]:
                k = list(ku)
                for t in range(n):
                    k[t] += kv[t]
                k[j] -= 1
                if sum(k) <= cap:
                    _store(acc, (i, tuple(k)), cu * cv * kv[j])
    for (j, kv), cv in v.terms.items():
        for (i, ku), cu in u.terms.items():
            # - v_j * d u_i / d z_j
            if ku[j]:
                k = list(kv)
                for t in range(n):
                    k[t] += ku[t]
                k[j] -= 1
                if sum(k) <= cap:
                    _store(acc, (i, tuple(k)), -cv * cu * ku[j])
    return FormalVectorField(n, u.lam, acc, cap)


def sup_norm_bound(u: FormalVectorField, rho: float) -> float:
    """Coefficient bound for the sup norm on the closed polydisk |z_j| <= rho.

    Returns max over components of sum_k |U_k^m| rho^|k|, which dominates
    the true sup norm.
    """
    if rho <= 0:
        raise ValueError(f"polydisk radius must be positive, got {rho}")
    per = [0.0] * u.dim
    for (m, k), c in u.terms.items():
        per[m] += abs(c) * rho ** degree(k)
    return max(per, default=0.0)


# ---- composition ---------------------------------------------------------


def _scalar_mul(a: dict, b: dict, dim: int, cap: int) -> dict:
    out = {}
    for ka, ca in a.items():
        da = sum(ka)
        for kb, cb in b.items():
            if da + sum(kb) > cap:
                continue
            k = tuple(ka[t] + kb[t] for t in range(dim))
            _store(out, k, ca * cb)
    return out


class _PowerCache:
    """Truncated powers phi^k = prod_i phi_i^{k_i} of a near-identity map.

    Components are scalar dicts exponent -> coefficient, identity part
    included, so phi_i = z_i + Phi_i.
    """

    def __init__(self, phi: SeriesMap, cap: int):
        self.dim = phi.dim
        self.cap = cap
        self.comp = []
        for i in range(phi.dim):
            d = {tuple(1 if t == i else 0 for t in range(phi.dim)): 1.0 + 0j}
            for (j, k), c in phi.terms.items():
                if j == i and degree(k) <= cap:
                    d[k] = c
            self.comp.append(d)
        one = {tuple(0 for _ in range(phi.dim)): 1.0 + 0j}
        self._cache = {tuple(0 for _ in range(phi.dim)): one}

    def power(self, k: MultiIndex) -> dict:
        got = self._cache.get(k)
        if got is not None:
            return got
        j = next(t for t in range(self.dim) if k[t] > 0)
        k_prev = tuple(kt - (1 if t == j else 0) for t, kt in enumerate(k))
        out = _scalar_mul(self.power(k_prev), self.comp[j], self.dim, self.cap)
        self._cache[k] = out
        return out


def substitute(u: FormalVectorField, phi: SeriesMap,
               cap: int) -> FormalVectorField:
    """Composition u o phi, each component substituted and truncated at ``cap``.

    With the identity map this returns ``u`` with bit-identical
    coefficients: each power product is then the bare monomial and every
    coefficient is multiplied by exactly 1.0.
    """
    if u.dim != phi.dim:
        raise ValueError(f"dimension mismatch {u.dim} vs {phi.dim}")
    pc = _PowerCache(phi, cap)
    acc = {}
    for (m, k), c in u.terms.items():
        if degree(k) > cap:
            continue
        for kk, w in pc.power(k).items():
            _store(acc, (m, kk), c * w)
    return FormalVectorField(u.dim, u.lam, acc, cap)


def compose_maps(outer: SeriesMap, inner: SeriesMap, cap: int) -> SeriesMap:
    """Map composition (outer o inner)(z) = outer(inner(z)), truncated."""
    if outer.dim != inner.dim:
        raise ValueError(f"dimension mismatch {outer.dim} vs {inner.dim}")
    n = outer.dim
    pc = _PowerCache(inner, cap)
    acc = {}
    # identity part of outer contributes inner itself
    for (i, k), c in inner.terms.items():
        if degree(k) <= cap:
            _store(acc, (i, k), c)
    for (i, k), c in outer.terms.items():
        if degree(k) > cap:
            continue
        for kk, w in pc.power(k).items():
            if degree(kk) >= 2:
                _store(acc, (i, kk), c * w)
            else:
                # a degree-<2 exponent can only arise from rounding of an
                # exact cancellation; the power of a near-identity map at
                # total exponent degree >= 2 has no linear part
                raise AssertionError("near-identity power produced low degree")
    return SeriesMap(n, acc, cap)


def invert_map(phi: SeriesMap, cap: int) -> SeriesMap:
    """Formal inverse of a near-identity map, truncated at ``cap``.

    Solves q(w) = w - Phi(q(w)) by fixed-point iteration, where Phi is
    the nonlinear part of phi; each pass fixes one more degree of q, so
    cap - 1 passes suffice.
    """
    q = SeriesMap(phi.dim, {}, cap)
    for _ in range(max(cap - 1, 1)):
        pc = _PowerCache(q, cap)
        acc = {}
        for (i, k), c in phi.terms.items():
            if degree(k) > cap:
                continue
            for kk, w in pc.power(k).items():
                _store(acc, (i, kk), -c * w)
        q = SeriesMap(phi.dim, acc, cap)
    return q


def pushforward(phi: SeriesMap, u: FormalVectorField,
                cap: int) -> FormalVectorField:
    """Transport of the full field Lambda z + u by a near-identity map.

    Returns the higher-order part w of the transported field: with
    w-coordinates = phi(z-coordinates), the field Lambda z + u becomes
    Lambda w + w(w), i.e.  (Lambda w + w)(phi(z)) = D phi(z) (Lambda z + u(z)).
    The diagonal part passes through exactly (D phi(0) = I and the
    composed degree-1 coefficients come out as the bare spectrum), so it
    is dropped from the returned terms rather than subtracted.
    """
    if u.dim != phi.dim:
        raise ValueError(f"dimension mismatch {u.dim} vs {phi.dim}")
    u.require_nonlinear("pushforward")
    n = u.dim
    # A(z) = D phi(z) (Lambda z + u(z)), computed term by term
    acc = {}
    for m in range(n):
        e_m = tuple(1 if t == m else 0 for t in range(n))
        _store(acc, (m, e_m), u.lam[m])
    for (i, kp), cp in phi.terms.items():
        # D Phi_i . Lambda z contributes <lam, kp> at the exponent kp
        inner = sum(kp[j] * u.lam[j] for j in range(n))
        if degree(kp) <= cap:
            _store(acc, (i, kp), cp * inner)
    for (m, k), c in u.terms.items():
        if degree(k) <= cap:
            _store(acc, (m, k), c)  # identity row of D phi
    for (i, kp), cp in phi.terms.items():
        for (j, ku), cu in u.terms.items():
            if kp[j] == 0:
                continue
            k = list(kp)
            for t in range(n):
                k[t] += ku[t]
            k[j] -= 1
            if sum(k) <= cap:
                _store(acc, (i, tuple(k)), cp * kp[j] * cu)
    a_field = FormalVectorField(n, u.lam, acc, cap)
    moved = substitute(a_field, invert_map(phi, cap), cap)
    kept = {key: c for key, c in moved.terms.items() if degree(key[1]) >= 2}
    return FormalVectorField(n, u.lam, kept, cap)
