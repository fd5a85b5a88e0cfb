"""Majorant bounds for the averaging flow.

Everything here lives on the coefficient-domination order: a series with
nonnegative coefficients majorizes another if it dominates it slot by slot.
The flow of an analytic seed is dominated, degree by degree, by the solution
of a sign-definite quadratic system, which in turn folds into a single
one-variable Burgers-type model in zeta = z_1 + ... + z_n.  That model has a
closed-form solution, explicit branch points, and therefore explicit
analyticity-radius and sup bounds for the flowed field.

The chain, from tightest to loosest:

    |reduced-gauge coefficient|  <=  majorant-system slot  <=
        multinomial(k) * [zeta^|k|] F(zeta, delta)

with F the Burgers solution seeded by f(zeta) = a zeta^2 / (b - zeta),
a = norm/rho, b = rho.  `verify_majorant_chain` checks the outer inequality
on an actual flow; the middle system is exposed for finer-grained tests.
"""

import math

import numpy as np

from .errors import InternalCheckError, PreconditionError
from .flow import normalize_exact
from .series import FormalVectorField, degree, sup_norm_bound

IMPLICIT_RESIDUAL_TOL = 1e-12


# ---- domination order and Cauchy bounds ----


def majorizes(F: FormalVectorField, G: FormalVectorField) -> bool:
    """True iff |F_k^m| <= Re G_k^m for every slot stored in F.

    Slots missing from G count as zero.  G is expected to carry
    nonnegative real coefficients; anything else simply fails the
    comparison.
    """
    if F.dim != G.dim or F.degree_cap != G.degree_cap:
        raise PreconditionError(
            f"majorizes: mismatched shapes (dim {F.dim} vs {G.dim}, "
            f"cap {F.degree_cap} vs {G.degree_cap})"
        )
    for key, c in F.terms.items():
        g = G.terms.get(key, 0.0)
        if abs(c) > complex(g).real:
            return False
    return True


def cauchy_bound(c: float, rho: float, k) -> float:
    """Coefficient bound c * rho^(-|k|) for a field of sup norm c on the
    closed polydisc of radius rho."""
    if rho <= 0:
        raise PreconditionError(f"cauchy_bound: rho must be positive, got {rho}")
    if c < 0:
        raise PreconditionError(f"cauchy_bound: c must be nonnegative, got {c}")
    return c * rho ** (-degree(k))


def multinomial(k) -> int:
    """|k|! / (k_1! ... k_n!), the number of orderings of the multiset k.

    This is the coefficient of z^k in (z_1 + ... + z_n)^|k|, which is what
    lifts a one-variable bound in zeta back to a per-slot bound.
    """
    out = math.factorial(degree(k))
    for kj in k:
        out //= math.factorial(kj)
    return out


# ---- the rational seed majorant and its Burgers evolution ----


class BurgersModel:
    """Parameters of the folded majorant model.

    The seed majorant is f(zeta) = a zeta^2 / (b - zeta) and the evolved
    majorant F(zeta, delta) solves dF/ddelta = 4 n F dF/dzeta, which pins
    F = f(zeta + tau F) with tau = 4 n delta.

    Parameters
    ----------
    a, b : float
        Seed shape: a = norm / rho and b = rho for a seed of sup norm
        `norm` on the polydisc of radius rho.
    n : int
        Dimension of the underlying field (enters only through tau).
    tau : float
        Rescaled time 4 * n * delta, >= 0.
    """

    __slots__ = ("a", "b", "n", "tau")

    def __init__(self, a: float, b: float, n: int, tau: float):
        if not a > 0:
            raise PreconditionError(f"BurgersModel: a must be positive, got {a}")
        if not b > 0:
            raise PreconditionError(f"BurgersModel: b must be positive, got {b}")
        if n < 1:
            raise PreconditionError(f"BurgersModel: n must be >= 1, got {n}")
        if tau < 0:
            raise PreconditionError(f"BurgersModel: tau must be >= 0, got {tau}")
        self.a = float(a)
        self.b = float(b)
        self.n = int(n)
        self.tau = float(tau)

    @classmethod
    def from_seed(cls, rho: float, norm_u: float, n: int, delta: float):
        """Model for a seed of sup norm norm_u on radius rho at time delta."""
        return cls(norm_u / rho, rho, n, 4.0 * n * delta)

    def f(self, zeta):
        """The seed majorant a zeta^2 / (b - zeta)."""
        return self.a * zeta * zeta / (self.b - zeta)

    def __repr__(self):
        return (f"BurgersModel(a={self.a!r}, b={self.b!r}, "
                f"n={self.n!r}, tau={self.tau!r})")


def majorant_f_coeffs(model: BurgersModel, up_to_degree: int) -> np.ndarray:
    """Taylor coefficients of f(zeta) = a zeta^2/(b - zeta) through the
    given degree.

    Index j of the result is the coefficient of zeta^j; entries 0 and 1
    vanish and the rest form the geometric sequence a * b^(1-j).
    """
    if up_to_degree < 2:
        raise PreconditionError(
            f"majorant_f_coeffs: need degree >= 2, got {up_to_degree}"
        )
    out = np.zeros(up_to_degree + 1)
    for j in range(2, up_to_degree + 1):
        out[j] = model.a * model.b ** (1 - j)
    return out


def branch_points(model: BurgersModel):
    """The two zeros (zeta1, zeta2) of the radicand of the closed-form F.

    Both are real and positive; the smaller one is the analyticity radius
    of F in zeta.  At tau = 0 both collapse to b.
    """
    at = model.a * model.tau
    root = 2.0 * math.sqrt(at * (1.0 + at))
    return (model.b / (1.0 + 2.0 * at + root),
            model.b / (1.0 + 2.0 * at - root))


def safe_disc_radius(model: BurgersModel) -> float:
    """d(tau) = b / (2 (1 + 2 a tau)), a disc strictly inside the branch
    points.  The corresponding polydisc radius in z is d(tau)/n."""
    return model.b / (2.0 * (1.0 + 2.0 * model.a * model.tau))


def burgers_solution(model: BurgersModel, zeta) -> complex:
    """Closed-form value of the evolved majorant F(zeta) at one point.

    Uses the root of the quadratic

        tau (1 + a tau) F^2 - (b - zeta - 2 a tau zeta) F + a zeta^2 = 0

    that vanishes at zeta = 0 (principal square root).  The result
    satisfies the implicit equation F = f(zeta + tau F); callers can (and
    the tests do) verify that residual directly.
    """
    zeta = complex(zeta)
    lim = min(branch_points(model)) if model.tau > 0 else model.b
    if abs(zeta) >= lim:
        raise PreconditionError(
            f"burgers_solution: |zeta| = {abs(zeta):.6g} is at or beyond the "
            f"branch-point radius {lim:.6g}"
        )
    if model.tau == 0.0:
        return model.f(zeta)
    a, b, tau = model.a, model.b, model.tau
    lin = b - zeta - 2.0 * a * tau * zeta
    radicand = lin * lin - 4.0 * a * tau * zeta * zeta * (1.0 + a * tau)
    F = (lin - np.sqrt(complex(radicand))) / (2.0 * tau * (1.0 + a * tau))
    return complex(F)


def implicit_residual(model: BurgersModel, zeta, F) -> float:
    """|F - f(zeta + tau F)| / max(1, |F|), the self-consistency defect of
    a candidate value of the evolved majorant."""
    target = model.f(zeta + model.tau * F)
    return abs(F - target) / max(1.0, abs(F))


def burgers_series_coeffs(model: BurgersModel, up_to_degree: int) -> np.ndarray:
    """zeta-Taylor coefficients of the evolved majorant F through the given
    degree, by fixed-point iteration on F <- f(zeta + tau F).

    Each pass fixes one more degree, so the loop runs at most
    up_to_degree - 1 times; the final pass is a no-op and doubles as a
    convergence check.
    """
    f_c = majorant_f_coeffs(model, up_to_degree)
    if model.tau == 0.0:
        return f_c
    F = f_c.copy()
    for _ in range(up_to_degree):
        # g = zeta + tau F as a polynomial, then compose f(g) truncated.
        g = model.tau * F
        g[1] += 1.0
        nxt = _compose_f(model, g, up_to_degree)
        if np.array_equal(nxt, F):
            break
        F = nxt
    resid = np.max(np.abs(F - _compose_f(model, model.tau * F + _unit_lin(up_to_degree), up_to_degree)))
    if resid > 1e-9 * max(1.0, float(np.max(np.abs(F)))):
        raise InternalCheckError(
            f"burgers_series_coeffs: fixed point did not settle, residual {resid:.3e}"
        )
    return F


def _unit_lin(up_to_degree):
    g = np.zeros(up_to_degree + 1)
    g[1] = 1.0
    return g


def _compose_f(model, g, cap):
    """Truncated Taylor coefficients of f(g(zeta)) where g has no constant
    term.  f(w) = a w^2 sum_i w^i / b^(i+1)."""
    w2 = _poly_mul(g, g, cap)
    out = np.zeros(cap + 1)
    gp = np.zeros(cap + 1)
    gp[0] = 1.0  # g^0
    binv = 1.0 / model.b
    scale = binv
    for _ in range(cap + 1):
        term = _poly_mul(w2, gp, cap)
        out += model.a * scale * term
        gp = _poly_mul(gp, g, cap)
        scale *= binv
        if not gp.any():
            break
    return out


def _poly_mul(p, q, cap):
    out = np.convolve(p, q)[: cap + 1]
    if out.shape[0] < cap + 1:
        out = np.pad(out, (0, cap + 1 - out.shape[0]))
    return out


# ---- closed-form radius and sup bounds ----


def radius_lower_bound(rho: float, norm_u: float, n: int, delta: float) -> float:
    """Analyticity-radius lower bound rho^2 / (2 n (rho + 8 norm_u n delta))
    for the flowed field at time delta.

    Computed as safe_disc_radius / n for the matching model so the
    algebraic identity between the two is exact in floating point as
    well; reduces to rho / (2 n) at delta = 0.
    """
    if rho <= 0 or norm_u < 0 or n < 1 or delta < 0:
        raise PreconditionError(
            f"radius_lower_bound: bad arguments (rho={rho}, norm_u={norm_u}, "
            f"n={n}, delta={delta})"
        )
    if norm_u == 0.0:
        return rho / (2.0 * n)
    return safe_disc_radius(BurgersModel.from_seed(rho, norm_u, n, delta)) / n


def sup_bound(rho: float, norm_u: float, n: int, delta: float) -> float:
    """Sup bound for each component of the flowed field on the safe disc:

        (rho^2 + 4 n delta norm) / (4 n delta (rho + 4 n delta norm))
          + rho^2 / (8 n^2 delta (rho + 8 n delta norm))

    Only defined for delta > 0: the expression diverges like 1/delta as
    delta -> 0 even though the field itself stays bounded there, so the
    delta = 0 case is rejected rather than patched.
    """
    if delta <= 0:
        raise PreconditionError(
            "sup_bound: defined for delta > 0 only (the bound diverges as "
            "delta -> 0; use the seed norm directly at delta = 0)"
        )
    if rho <= 0 or norm_u < 0 or n < 1:
        raise PreconditionError(
            f"sup_bound: bad arguments (rho={rho}, norm_u={norm_u}, n={n})"
        )
    nd = n * delta
    first = (rho * rho + 4.0 * nd * norm_u) / (4.0 * nd * (rho + 4.0 * nd * norm_u))
    second = rho * rho / (8.0 * n * nd * (rho + 8.0 * nd * norm_u))
    return first + second


# ---- the intermediate slotwise majorant system ----


def majorant_system_solution(init, n: int, cap: int):
    """Degree-by-degree solution of the sign-definite majorant system

        d/ddelta  U_d^m  =  4 sum_p sum_{k+s-d=e_p}  k_p U_k^m U_s^p

    with nonnegative initial data ``init`` mapping (m, k) -> bound.

    The right side of a degree-d slot only involves strictly lower
    degrees, so each slot is a polynomial in delta; the result maps each
    slot to its ascending coefficient array.
    """
    for (m, k), c in init.items():
        if c < 0:
            raise PreconditionError(
                f"majorant_system_solution: negative initial bound at {(m, k)}"
            )
        if not (0 <= m < n):
            raise PreconditionError(
                f"majorant_system_solution: component {m} out of range"
            )
    polys = {key: np.array([float(c)]) for key, c in init.items() if c != 0.0}
    by_comp = [dict() for _ in range(n)]
    for (m, k), p in polys.items():
        by_comp[m][k] = p
    for d_total in range(3, cap + 1):
        new = {}
        for (m, kd) in _slots_of_degree(polys, d_total, n):
            acc = None
            for p in range(n):
                target = list(kd)
                target[p] += 1
                for k, poly_k in by_comp[m].items():
                    if degree(k) >= d_total or k[p] == 0:
                        continue
                    s = tuple(target[t] - k[t] for t in range(n))
                    if any(st < 0 for st in s):
                        continue
                    poly_s = by_comp[p].get(s)
                    if poly_s is None or degree(s) >= d_total:
                        continue
                    term = 4.0 * k[p] * np.convolve(poly_k, poly_s)
                    acc = term if acc is None else _padded_add(acc, term)
            if acc is not None:
                integ = np.concatenate(([0.0], acc / np.arange(1, acc.shape[0] + 1)))
                base = polys.get((m, kd), np.array([0.0]))
                new[(m, kd)] = _padded_add(base, integ)
        for key, p in new.items():
            polys[key] = p
            by_comp[key[0]][key[1]] = p
    return polys


def _slots_of_degree(polys, d_total, n):
    """Candidate slots of total degree d_total: every way to add one unit
    to a product of existing lower-degree slots.  Enumerated lazily by
    scanning all pairs; cheap at desk sizes."""
    seen = set()
    by_comp = [dict() for _ in range(n)]
    for (m, k), p in polys.items():
        by_comp[m][k] = p
    for m in range(n):
        for k in by_comp[m]:
            for p in range(n):
                if k[p] == 0:
                    continue
                for s in by_comp[p]:
                    if degree(k) + degree(s) - 1 != d_total:
                        continue
                    d = tuple(k[t] + s[t] - (1 if t == p else 0) for t in range(len(k)))
                    if (m, d) not in seen:
                        seen.add((m, d))
                        yield (m, d)


def _padded_add(a, b):
    if a.shape[0] < b.shape[0]:
        a = np.pad(a, (0, b.shape[0] - a.shape[0]))
    elif b.shape[0] < a.shape[0]:
        b = np.pad(b, (0, a.shape[0] - b.shape[0]))
    return a + b


def eval_delta_poly(poly: np.ndarray, delta: float) -> float:
    """Evaluate an ascending delta-polynomial at one time."""
    return float(np.polynomial.polynomial.polyval(delta, poly))


# ---- the end-to-end verification ----


class MajorantCertificate:
    """Outcome of a majorant-chain verification at one reference time.

    Attributes
    ----------
    rho : float
        Seed polydisc radius.
    delta : float
        The reference time (largest entry of the checked grid).
    radius_bound : float
        Closed-form analyticity-radius lower bound at that time.
    sup_bound : float
        Closed-form sup bound (inf recorded when delta == 0).
    per_coefficient : dict | None
        Map k -> multinomial(k) * [zeta^|k|] F(., delta), the per-slot
        bound that every component obeyed.
    """

    __slots__ = ("rho", "delta", "radius_bound", "sup_bound", "per_coefficient")

    def __init__(self, rho, delta, radius_bound, sup_bound, per_coefficient=None):
        self.rho = rho
        self.delta = delta
        self.radius_bound = radius_bound
        self.sup_bound = sup_bound
        self.per_coefficient = per_coefficient

    def __repr__(self):
        npc = "None" if self.per_coefficient is None else len(self.per_coefficient)
        return (f"MajorantCertificate(rho={self.rho!r}, delta={self.delta!r}, "
                f"radius_bound={self.radius_bound!r}, sup_bound={self.sup_bound!r}, "
                f"per_coefficient[{npc}])")


def verify_majorant_chain(u_hat: FormalVectorField, spec, cap: int,
                          delta_grid, rho: float = 1.0,
                          norm_u: float = None) -> MajorantCertificate:
    """Flow the seed exactly and check every reduced-gauge coefficient
    against the shell-lifted Burgers bound at every grid time.

    Parameters
    ----------
    u_hat : FormalVectorField
        Nonlinear analytic seed.
    spec : Spectrum
        Linear-part spectrum driving the flow.
    cap : int
        Truncation degree for the flow and the zeta-series.
    delta_grid : iterable of float
        Times to check; all must be >= 0 and finite.
    rho : float
        Declared polydisc radius of the seed.
    norm_u : float, optional
        Declared sup norm on that polydisc; computed from the
        coefficients when omitted.

    Returns
    -------
    MajorantCertificate for the largest grid time.

    Raises
    ------
    InternalCheckError
        If any slot exceeds its bound; the message carries the first
        offending (m, k, delta).  This would falsify the implementation,
        not the mathematics.
    """
    grid = sorted(float(d) for d in delta_grid)
    if not grid:
        raise PreconditionError("verify_majorant_chain: empty delta grid")
    if grid[0] < 0 or not math.isfinite(grid[-1]):
        raise PreconditionError(
            f"verify_majorant_chain: grid must be finite and >= 0, got {grid}"
        )
    if rho <= 0:
        raise PreconditionError(f"verify_majorant_chain: rho must be positive, got {rho}")
    u_hat.require_nonlinear("verify_majorant_chain")
    if norm_u is None:
        norm_u = sup_norm_bound(u_hat, rho)
    n = u_hat.dim
    d_last = grid[-1]
    if norm_u == 0.0:
        # Zero seed: the flow is identically zero and every bound holds.
        return MajorantCertificate(
            rho, d_last, radius_lower_bound(rho, 0.0, n, d_last),
            sup_bound(rho, 0.0, n, d_last) if d_last > 0 else math.inf,
            per_coefficient={})
    state = normalize_exact(u_hat, spec, cap)
    per_coeff = None
    for delta in grid:
        model = BurgersModel.from_seed(rho, norm_u, n, delta)
        F = burgers_series_coeffs(model, cap)
        table = {}
        for (m, k) in state.coeffs:
            bound = table.get(k)
            if bound is None:
                bound = multinomial(k) * F[degree(k)]
                table[k] = bound
            val = abs(state.value(k, m, delta, gauge="reduced"))
            if val > bound:
                raise InternalCheckError(
                    f"majorant chain violated at m={m}, k={k}, delta={delta}: "
                    f"|U| = {val:.6e} > bound = {bound:.6e}"
                )
        if delta == d_last:
            per_coeff = table
    return MajorantCertificate(
        rho, d_last,
        radius_lower_bound(rho, norm_u, n, d_last),
        sup_bound(rho, norm_u, n, d_last) if d_last > 0 else math.inf,
        per_coefficient=per_coeff)
