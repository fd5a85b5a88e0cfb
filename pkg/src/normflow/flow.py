"""The averaging flow on coefficient space, solved in closed form.

The higher-order part of the field evolves by d/d(delta) u = -[xi u, Lambda z + u].
Writing each coefficient in the decaying gauge U = V e^{-|<lam, d - e_m>| delta}
turns the system into a degree-triangular one whose right-hand side at a slot
only involves strictly lower degrees, so every coefficient is an exact
exp-polynomial in delta: a finite sum of c * delta^s * e^{-nu delta} with
rates nu >= 0.  This module builds those exp-polynomials exactly, exposes the
flow, its infinite-time limit, the normalizing change of variables, and the
structural invariance checks, plus an independent fixed-step RK4 integrator
used to cross-validate the closed forms.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InternalCheckError, PreconditionError
from .resonance import Spectrum
from .series import (FormalVectorField, SeriesMap, degree)

#: relative tolerance under which two decay rates are merged into one term
RATE_MERGE_TOL = 1e-12

#: resource guard: largest number of exp-polynomial terms a slot may hold
MAX_TERMS = 100_000

#: resource guard: largest term-pair product formed in one multiplication
MAX_PAIR_PRODUCTS = 5_000_000


# ---- exp-polynomial arithmetic -------------------------------------------


class ExpPoly:
    """Finite sum of c * delta^s * e^{-nu delta} with nu >= 0, exact ops.

    Canonical form: terms sorted by (s, nu), rates within relative
    tolerance RATE_MERGE_TOL of each other merged, coefficients that
    underflow (|c| < 1e-300) dropped.  Near-equal but distinct rates
    beyond the tolerance stay distinct; nothing else is rounded.
    """

    __slots__ = ("c", "s", "nu")

    def __init__(self, c, s, nu, _canonical=False):
        c = np.asarray(c, dtype=np.complex128)
        s = np.asarray(s, dtype=np.int64)
        nu = np.asarray(nu, dtype=np.float64)
        if not (c.shape == s.shape == nu.shape):
            raise ValueError("term arrays must have matching shapes")
        if _canonical:
            self.c, self.s, self.nu = c, s, nu
        else:
            self.c, self.s, self.nu = _canonize(c, s, nu)

    # -- constructors --

    @staticmethod
    def zero():
        return ExpPoly(np.empty(0), np.empty(0, dtype=np.int64),
                       np.empty(0), _canonical=True)

    @staticmethod
    def const(value):
        value = complex(value)
        if abs(value) < 1e-300:
            return ExpPoly.zero()
        return ExpPoly([value], [0], [0.0], _canonical=True)

    @staticmethod
    def single(c, s, nu):
        nu = float(nu)
        if nu < -1e-9:
            raise ValueError(f"negative decay rate {nu}")
        return ExpPoly([c], [s], [max(0.0, nu)])

    # -- structure --

    @property
    def nterms(self):
        return len(self.c)

    def is_zero(self):
        return len(self.c) == 0

    def max_abs_coeff(self):
        return float(np.abs(self.c).max()) if len(self.c) else 0.0

    def __repr__(self):
        bits = [f"({c:.3g})*d^{s}*e^(-{nu:.3g}d)"
                for c, s, nu in zip(self.c[:4], self.s[:4], self.nu[:4])]
        more = "" if self.nterms <= 4 else f" +{self.nterms - 4} terms"
        return f"ExpPoly[{' + '.join(bits)}{more}]"

    # -- algebra --

    def __add__(self, other):
        if other.is_zero():
            return self
        if self.is_zero():
            return other
        return ExpPoly(np.concatenate([self.c, other.c]),
                       np.concatenate([self.s, other.s]),
                       np.concatenate([self.nu, other.nu]))

    def scale(self, a):
        a = complex(a)
        if a == 0 or self.is_zero():
            return ExpPoly.zero()
        return ExpPoly(self.c * a, self.s, self.nu, _canonical=True)

    def times_exp(self, shift):
        """Multiply by e^{-shift * delta}; the resulting rates stay >= 0."""
        if self.is_zero():
            return self
        nu = self.nu + float(shift)
        if nu.min() < -1e-9:
            raise InternalCheckError(
                f"negative decay rate {nu.min():.3e} after shift {shift}")
        return ExpPoly(self.c, self.s, np.maximum(nu, 0.0))

    def __mul__(self, other):
        if self.is_zero() or other.is_zero():
            return ExpPoly.zero()
        npairs = self.nterms * other.nterms
        if npairs > MAX_PAIR_PRODUCTS:
            raise InternalCheckError(
                f"exp-polynomial product of {self.nterms} x {other.nterms} "
                f"terms exceeds the pair guard")
        c = np.multiply.outer(self.c, other.c).ravel()
        s = np.add.outer(self.s, other.s).ravel()
        nu = np.add.outer(self.nu, other.nu).ravel()
        return ExpPoly(c, s, nu)

    def integrate0(self):
        """Exact primitive vanishing at delta = 0.

        For nu > 0 each term integrates to
        s!/nu^{s+1} - e^{-nu delta} sum_{i<=s} s!/(i! nu^{s+1-i}) delta^i;
        for nu = 0 it integrates to delta^{s+1}/(s+1).
        """
        if self.is_zero():
            return self
        cs, ss, nus = [], [], []
        for c, s, nu in zip(self.c, self.s, self.nu):
            s = int(s)
            if nu == 0.0:
                cs.append(c / (s + 1))
                ss.append(s + 1)
                nus.append(0.0)
                continue
            fact_s = math.factorial(s)
            head = c * fact_s / nu ** (s + 1)
            cs.append(head)
            ss.append(0)
            nus.append(0.0)
            for i in range(s + 1):
                cs.append(-c * fact_s / (math.factorial(i) * nu ** (s + 1 - i)))
                ss.append(i)
                nus.append(nu)
        return ExpPoly(cs, ss, nus)

    # -- evaluation --

    def eval(self, delta):
        """Value at a finite delta >= 0, or the limit at delta = inf.

        The infinite limit exists unless a polynomially growing term
        (nu = 0, s > 0) is present, in which case InternalCheckError is
        raised; callers that only need the decaying-gauge limit multiply
        by the gauge rate first via ``limit_with_gauge``.
        """
        if self.is_zero():
            return 0j
        if math.isinf(delta):
            growing = (self.nu == 0.0) & (self.s > 0)
            if growing.any() and np.abs(self.c[growing]).max() > 0.0:
                raise InternalCheckError(
                    "no finite limit: polynomially growing term present")
            flat = (self.nu == 0.0) & (self.s == 0)
            return complex(self.c[flat].sum())
        delta = float(delta)
        if delta < 0:
            raise ValueError(f"flow time must be >= 0, got {delta}")
        if delta == 0.0:
            return complex(self.c[self.s == 0].sum())
        logd = math.log(delta)
        mag = np.exp(self.s * logd - self.nu * delta)
        return complex((self.c * mag).sum())

    def limit_with_gauge(self, rate):
        """Limit of e^{-rate delta} * self as delta -> inf (rate >= 0)."""
        if rate > 0.0:
            return 0j
        return self.eval(math.inf)

    def derivative(self):
        """Exact d/d(delta)."""
        if self.is_zero():
            return self
        cs, ss, nus = [], [], []
        for c, s, nu in zip(self.c, self.s, self.nu):
            s = int(s)
            if s > 0:
                cs.append(c * s)
                ss.append(s - 1)
                nus.append(nu)
            if nu != 0.0:
                cs.append(-c * nu)
                ss.append(s)
                nus.append(nu)
        return ExpPoly(cs, ss, nus)


def _canonize(c, s, nu):
    if len(nu) and float(nu.min()) < 0.0:
        if float(nu.min()) < -1e-9:
            raise ValueError(f"negative decay rate {float(nu.min()):.3e}")
        nu = np.maximum(nu, 0.0)
    order = np.lexsort((nu, s))
    c, s, nu = c[order], s[order], nu[order]
    if len(c) == 0:
        return c, s, nu
    keep_c, keep_s, keep_nu = [], [], []
    cur_c, cur_s, cur_nu = c[0], int(s[0]), float(nu[0])
    for i in range(1, len(c)):
        if int(s[i]) == cur_s and \
                abs(float(nu[i]) - cur_nu) <= RATE_MERGE_TOL * (1.0 + cur_nu):
            cur_c = cur_c + c[i]
        else:
            if abs(cur_c) >= 1e-300:
                keep_c.append(cur_c)
                keep_s.append(cur_s)
                keep_nu.append(cur_nu)
            cur_c, cur_s, cur_nu = c[i], int(s[i]), float(nu[i])
    if abs(cur_c) >= 1e-300:
        keep_c.append(cur_c)
        keep_s.append(cur_s)
        keep_nu.append(cur_nu)
    if len(keep_c) > MAX_TERMS:
        raise InternalCheckError(
            f"slot exceeded the {MAX_TERMS}-term guard ({len(keep_c)} terms)")
    return (np.asarray(keep_c, dtype=np.complex128),
            np.asarray(keep_s, dtype=np.int64),
            np.asarray(keep_nu, dtype=np.float64))


def exp_poly_mul(a: ExpPoly, b: ExpPoly) -> ExpPoly:
    return a * b


def exp_poly_integrate(a: ExpPoly) -> ExpPoly:
    return a.integrate0()


def exp_poly_eval(a: ExpPoly, delta) -> complex:
    return a.eval(delta)


def t_shift(a, b) -> float:
    """Rate shift |a + b| - |a| - |b| of two shifted inner products.

    Always <= 0 by the triangle inequality; floating artifacts above zero
    are clamped.
    """
    return min(0.0, abs(a + b) - abs(a) - abs(b))


# ---- the phase projection xi ---------------------------------------------


def xi_op(u: FormalVectorField, spec: Spectrum) -> FormalVectorField:
    """Apply xi: rotate each nonresonant slot by -e^{-i arg <lam, k - e_m>}.

    Resonant slots are annihilated.  The output is the instantaneous
    generator of the averaging flow at the field ``u``.
    """
    if u.dim != spec.dim:
        raise ValueError(f"dimension mismatch {u.dim} vs {spec.dim}")
    out = {}
    for (m, k), c in u.terms.items():
        if spec.is_resonant(k, m):
            continue
        out[(m, k)] = -spec.phase(k, m) * c
    return FormalVectorField(u.dim, u.lam, out, u.degree_cap)


# ---- exact flow ----------------------------------------------------------


@dataclass
class FlowState:
    """Solved coefficient trajectories of the averaging flow.

    ``coeffs`` maps (m, k) to the exp-polynomial of the slot in the
    decaying gauge; the original-gauge value is the same polynomial times
    e^{-rate(m,k) delta}.  Slots identically zero are absent.
    """

    spectrum: Spectrum
    coeffs: dict
    degree_cap: int
    gauge: str = "reduced"
    u_hat: FormalVectorField = None

    @property
    def dim(self):
        return self.spectrum.dim

    def rate(self, k, m) -> float:
        return self.spectrum.rate(k, m)

    def value(self, k, m, delta, gauge="original") -> complex:
        """Slot value at a time, in either gauge (delta may be inf)."""
        poly = self.coeffs.get((m, k))
        if poly is None:
            return 0j
        if gauge == "reduced":
            return poly.eval(delta)
        if gauge != "original":
            raise ValueError(f"unknown gauge {gauge!r}")
        r = self.rate(k, m)
        if math.isinf(delta):
            return poly.limit_with_gauge(r)
        return poly.eval(delta) * math.exp(-r * float(delta))

    def field_at(self, delta, gauge="original") -> FormalVectorField:
        terms = {}
        for (m, k) in self.coeffs:
            v = self.value(k, m, delta, gauge)
            if v != 0:
                terms[(m, k)] = v
        return FormalVectorField(self.dim, self.spectrum.lam, terms,
                                 self.degree_cap)


def reduced_rhs(state: FlowState, d, m) -> ExpPoly:
    """Right-hand side of the decaying-gauge coefficient at slot (m, d).

    Assembled from the already solved strictly lower degrees: for every
    splitting k + s - d = e_p with both factors of degree >= 2,

        k_p * V_k^m * V_s^p * (phase(s, p) - phase(k, m)) * e^{T delta},

    where a phase is present only for a nonresonant factor and
    T = rate(d, m) - rate(k, m) - rate(s, p) <= 0; splittings with both
    factors resonant drop out.  This is the bracket -[xi u, u] written
    slotwise in the decaying gauge, covering the single-resonant and the
    doubly-nonresonant splittings in one expression.
    """
    spec = state.spectrum
    n = spec.dim
    dd = degree(d)
    rate_d = spec.rate(d, m)
    acc = ExpPoly.zero()
    by_comp = getattr(state, "_by_comp", None)
    if by_comp is None:
        by_comp = [{} for _ in range(n)]
        for (mm, kk), poly in state.coeffs.items():
            by_comp[mm][kk] = poly
        state._by_comp = by_comp
    for p in range(n):
        target = list(d)
        target[p] += 1
        for k, poly_k in by_comp[m].items():
            if degree(k) > dd - 1:
                continue
            kp = k[p]
            if kp == 0:
                continue
            s = tuple(target[t] - k[t] for t in range(n))
            if any(st < 0 for st in s):
                continue
            poly_s = by_comp[p].get(s)
            if poly_s is None:
                continue
            k_res = spec.is_resonant(k, m)
            s_res = spec.is_resonant(s, p)
            if k_res and s_res:
                continue
            factor = 0j
            if not s_res:
                factor += spec.phase(s, p)
            if not k_res:
                factor -= spec.phase(k, m)
            if factor == 0:
                continue
            shift = spec.rate(k, m) + spec.rate(s, p) - rate_d
            if shift < 0.0:
                # the exact shift is >= 0 (triangle inequality); snap the
                # floating residue of an exact cancellation
                if shift < -1e-9 * (1.0 + rate_d):
                    raise InternalCheckError(
                        f"rate shift {shift:.3e} at slot ({m}, {d})")
                shift = 0.0
            elif shift <= RATE_MERGE_TOL * (1.0 + rate_d):
                shift = 0.0
            term = (poly_k * poly_s).scale(kp * factor).times_exp(shift)
            acc = acc + term
    return acc


def normalize_exact(u_hat: FormalVectorField, spec: Spectrum,
                    cap: int) -> FlowState:
    """Solve the averaging flow exactly through total degree ``cap``.

    Degree-2 slots are frozen (their right-hand side needs two factors of
    degree >= 2 and one derivative, which already exceeds degree 2);
    higher slots integrate their assembled right-hand side in closed
    form.  Returns the full solved state.
    """
    _check_flow_input(u_hat, spec)
    if cap < 2:
        raise ValueError(f"cap must be >= 2, got {cap}")
    state = FlowState(spec, {}, cap, "reduced", u_hat)
    n = spec.dim
    for deg in range(2, cap + 1):
        new = {}
        for k in _exponents(n, deg):
            for m in range(n):
                init = u_hat.terms.get((m, k), 0j)
                rhs = reduced_rhs(state, k, m)
                poly = ExpPoly.const(init)
                if not rhs.is_zero():
                    poly = poly + rhs.integrate0()
                if not poly.is_zero():
                    new[(m, k)] = poly
        state.coeffs.update(new)
        if hasattr(state, "_by_comp"):
            del state._by_comp  # rebuilt lazily with the new degree included
    _assert_flat_structure(state)
    return state


def _check_flow_input(u_hat, spec):
    if u_hat.dim != spec.dim:
        raise ValueError(
            f"field dimension {u_hat.dim} does not match spectrum {spec.dim}")
    if any(abs(a - b) > 0 for a, b in zip(u_hat.lam, spec.lam)):
        raise PreconditionError(
            "field and spectrum carry different linear parts")
    u_hat.require_nonlinear("the averaging flow")


def _exponents(n, d):
    if n == 1:
        yield (d,)
        return
    for first in range(d + 1):
        for rest in _exponents(n - 1, d - first):
            yield (first,) + rest


def _assert_flat_structure(state: FlowState):
    """Resonant slots must have no polynomially growing flat terms.

    In the decaying gauge a resonant slot is a sum of a constant and
    strictly decaying terms; a (nu = 0, s > 0) term there would deny the
    infinite-time limit.
    """
    for (m, k), poly in state.coeffs.items():
        if state.spectrum.is_resonant(k, m):
            growing = (poly.nu == 0.0) & (poly.s > 0)
            if growing.any():
                worst = float(np.abs(poly.c[growing]).max())
                scale = max(1.0, poly.max_abs_coeff())
                if worst > 1e-9 * scale:
                    raise InternalCheckError(
                        f"resonant slot ({m}, {k}) grew polynomially "
                        f"(coefficient {worst:.3e})")


def normal_form_limit(state: FlowState) -> FormalVectorField:
    """Infinite-time field: resonant slots keep their flat value, the rest die.

    The support of the result lies inside the resonant set by
    construction; the degree-2 slots equal the resonant degree-2 slots of
    the initial field bit for bit, being frozen along the flow.
    """
    _assert_flat_structure(state)
    terms = {}
    for (m, k), poly in state.coeffs.items():
        r = state.rate(k, m)
        v = poly.limit_with_gauge(r)
        if v != 0:
            terms[(m, k)] = v
    out = FormalVectorField(state.dim, state.spectrum.lam, terms,
                            state.degree_cap)
    for (m, k) in out.terms:
        if not state.spectrum.is_resonant(k, m):
            raise InternalCheckError(
                f"nonresonant slot ({m}, {k}) survived to the limit")
    return out


# ---- independent numeric oracle ------------------------------------------


def normalize_numeric(u_hat: FormalVectorField, spec: Spectrum, cap: int,
                      delta_max: float, step: float = None,
                      checkpoints=None) -> dict:
    """Integrate the decaying-gauge system with classic fixed-step RK4.

    This path never sees the closed-form splitting: at every stage it
    rebuilds the original-gauge coefficients, applies xi slotwise, forms
    the full bracket [xi u, u] through precomputed sparse convolution
    triples, and converts back.  The bracket with the diagonal part
    cancels the gauge factor exactly and is therefore dropped
    analytically; everything else is raw quadrature, which makes this an
    independent check of the exact solver.

    Returns a dict with the checkpoint grid and per-slot value arrays in
    the decaying gauge.
    """
    _check_flow_input(u_hat, spec)
    if delta_max < 0:
        raise ValueError(f"delta_max must be >= 0, got {delta_max}")
    n = spec.dim
    slots = [(m, k) for deg in range(2, cap + 1)
             for k in _exponents(n, deg) for m in range(n)]
    index = {slot: i for i, slot in enumerate(slots)}
    nslots = len(slots)
    rates = np.array([spec.rate(k, m) for (m, k) in slots])
    wfac = np.zeros(nslots, dtype=np.complex128)
    for i, (m, k) in enumerate(slots):
        if not spec.is_resonant(k, m):
            wfac[i] = -spec.phase(k, m)

    # bracket [w, u]: w_p du_m/dz_p  -  u_p dw_m/dz_p, as flat triples
    t_out, t_u, t_w, t_coef = [], [], [], []
    for (mu, ku) in slots:          # the factor that gets differentiated
        for p in range(n):
            if ku[p] == 0:
                continue
            for (pw, kw) in slots:  # the multiplying factor, component p
                if pw != p:
                    continue
                dd = tuple(ku[t] + kw[t] - (1 if t == p else 0)
                           for t in range(n))
                if sum(dd) > cap:
                    continue
                out = index[(mu, dd)]
                # w_p du_m/dz_p
                t_out.append(out)
                t_u.append(index[(mu, ku)])
                t_w.append(index[(p, kw)])
                t_coef.append(float(ku[p]))
                # - u_p dw_m/dz_p  (same splitting, roles swapped)
                t_out.append(out)
                t_u.append(index[(p, kw)])
                t_w.append(index[(mu, ku)])
                t_coef.append(-float(ku[p]))
    t_out = np.array(t_out, dtype=np.int64)
    t_u = np.array(t_u, dtype=np.int64)
    t_w = np.array(t_w, dtype=np.int64)
    t_coef = np.array(t_coef)

    def rhs(v, delta):
        gauge = np.exp(-rates * delta)
        u_vals = v * gauge
        w_vals = wfac * u_vals
        prod = t_coef * u_vals[t_u] * w_vals[t_w]
        bra = (np.bincount(t_out, weights=prod.real, minlength=nslots)
               + 1j * np.bincount(t_out, weights=prod.imag, minlength=nslots))
        return -bra / gauge

    v = np.zeros(nslots, dtype=np.complex128)
    for (m, k), c in u_hat.terms.items():
        if degree(k) <= cap:
            v[index[(m, k)]] = c

    if checkpoints is None:
        checkpoints = [delta_max]
    checkpoints = sorted(set(float(t) for t in checkpoints))
    if checkpoints and checkpoints[-1] > delta_max:
        raise ValueError("checkpoint beyond delta_max")
    if step is None:
        max_rate = float(rates.max()) if nslots else 1.0
        step = min(2e-3, 0.005 / max(max_rate, 1e-9))

    grid = [0.0]
    records = [v.copy()]
    t_now = 0.0
    for t_next in checkpoints:
        span = t_next - t_now
        if span <= 0:
            continue
        nsteps = max(1, int(math.ceil(span / step)))
        h = span / nsteps
        for _ in range(nsteps):
            k1 = rhs(v, t_now)
            k2 = rhs(v + 0.5 * h * k1, t_now + 0.5 * h)
            k3 = rhs(v + 0.5 * h * k2, t_now + 0.5 * h)
            k4 = rhs(v + h * k3, t_now + h)
            v = v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t_now += h
        grid.append(t_now)
        records.append(v.copy())

    coeffs = {}
    for slot, i in index.items():
        vals = np.array([rec[i] for rec in records])
        if np.abs(vals).max() > 0:
            coeffs[slot] = vals
    return {"grid": np.array(grid), "coeffs": coeffs, "slots": slots,
            "step": step}


# ---- normalizing change of variables -------------------------------------


class _EPowerCache:
    """Truncated powers of a map whose coefficients are exp-polynomials.

    ``table`` maps (i, k) -> ExpPoly for the nonlinear part; component i
    is z_i + those slots.  Entries are extended degree by degree so that
    a power never reads nonlinear slots that are still being solved.
    """

    def __init__(self, dim, table, cap):
        self.dim = dim
        self.table = table
        self.cap = cap
        self._pow = {}

    def _component_slots(self, j, deg):
        out = {}
        if deg >= 1:
            e_j = tuple(1 if t == j else 0 for t in range(self.dim))
            out[e_j] = ExpPoly.const(1.0)
        for (i, k), poly in self.table.items():
            if i == j and 2 <= degree(k) <= deg:
                out[k] = poly
        return out

    def power(self, k, deg):
        """Slots of prod_j (z_j + Phi_j)^{k_j} up to total degree ``deg``."""
        key = k
        slots, done = self._pow.get(key, (None, -1))
        if done >= deg:
            return slots
        total = sum(k)
        if total == 0:
            slots = {tuple(0 for _ in range(self.dim)): ExpPoly.const(1.0)}
            self._pow[key] = (slots, self.cap)
            return slots
        j = next(t for t in range(self.dim) if k[t] > 0)
        if total == 1:
            slots = self._component_slots(j, deg)
            self._pow[key] = (slots, deg)
            return slots
        k_prev = tuple(kt - (1 if t == j else 0) for t, kt in enumerate(k))
        prev = self.power(k_prev, deg - 1)
        comp = self._component_slots(j, deg - (total - 1))
        slots = {}
        for ka, pa in prev.items():
            da = degree(ka)
            for kb, pb in comp.items():
                if da + degree(kb) > deg:
                    continue
                kk = tuple(ka[t] + kb[t] for t in range(self.dim))
                prod = pa * pb
                if prod.is_zero():
                    continue
                got = slots.get(kk)
                slots[kk] = prod if got is None else got + prod
        self._pow[key] = (slots, deg)
        return slots


def _solve_shift_map(xi_table: dict, dim: int, cap: int) -> dict:
    """Solve d/d(delta) Phi = (generator o (z + Phi)) for the shift map.

    ``xi_table`` holds the generator slots (m, k) -> ExpPoly in the
    original gauge, every term strictly decaying.  The solution is
    triangular: the degree-d right-hand side composes generator slots
    with powers of the map already solved below degree d.  Returns
    (m, d) -> ExpPoly for the nonlinear map coefficients.
    """
    phi = {}
    cache = _EPowerCache(dim, phi, cap)
    min_gen = min((degree(k) for (_, k) in xi_table), default=cap + 1)
    for deg in range(min_gen, cap + 1):
        new = {}
        for (m, k), gen in xi_table.items():
            if degree(k) > deg:
                continue
            pw = cache.power(k, deg)
            for dd, factor in pw.items():
                if degree(dd) != deg:
                    continue
                prod = gen * factor
                if prod.is_zero():
                    continue
                key = (m, dd)
                got = new.get(key)
                new[key] = prod if got is None else got + prod
        for key, rhs_poly in new.items():
            phi[key] = rhs_poly.integrate0()
        cache._pow.clear()  # lower powers may now read the new degree
    return phi


def change_of_variables(state: FlowState, delta, cap: int) -> SeriesMap:
    """Normalizing shift map at a time (delta may be inf).

    Integrates the non-autonomous shift flow z' = (xi u)(z, delta) from
    the identity at delta = 0, with the generator taken in the original
    gauge, where every slot decays strictly; at delta = inf all
    transient terms vanish and the flat parts survive.  Conjugacy: the
    transported field pushforward(map, .) of the initial field equals
    the flowed field at the same time, up to the degree cap.
    """
    spec = state.spectrum
    xi_table = {}
    for (m, k), poly in state.coeffs.items():
        if degree(k) > cap:
            continue
        if spec.is_resonant(k, m):
            continue
        r = spec.rate(k, m)
        xi_table[(m, k)] = poly.scale(-spec.phase(k, m)).times_exp(r)
    phi = _solve_shift_map(xi_table, state.dim, cap)
    terms = {}
    for (m, k), poly in phi.items():
        v = poly.eval(delta)
        if v != 0:
            terms[(m, k)] = v
    return SeriesMap(state.dim, terms, cap)


# ---- structural invariance checks ----------------------------------------


def check_degree_invariance(u_hat: FormalVectorField, spec: Spectrum,
                            d0: int, cap: int) -> dict:
    """Fields starting at degree d0 stay at degree >= d0 along the flow.

    Every splitting produces degree |k| + |s| - 1 >= 2 d0 - 1 >= d0, so
    the invariance is structural; this check runs the exact flow and
    verifies no slot below d0 ever becomes active.
    """
    md = u_hat.min_degree()
    if md is not None and md < d0:
        raise PreconditionError(
            f"field starts at degree {md}, not >= {d0}")
    state = normalize_exact(u_hat, spec, cap)
    offenders = [(m, k) for (m, k) in state.coeffs if degree(k) < d0]
    return {"ok": not offenders, "offenders": offenders, "d0": d0}


def check_spectral_invariance(u_hat: FormalVectorField, spec: Spectrum,
                              M: float, cap: int) -> dict:
    """Vanishing on the sublevel set {Re <lam, k> <= M} is flow-invariant.

    A splitting k + s - d = e_p gives
    Re <lam, d> = Re <lam, k> + Re <lam, s> - Re lam_p > 2M - Re lam_p,
    so the sublevel set cannot be reached from above once
    M >= max(0, max_p Re lam_p); that threshold is required here, since
    below it a pair of admissible slots can feed a forbidden one.
    """
    max_re = max(0.0, max(l.real for l in spec.lam))
    if M < max_re - 1e-12 * (1.0 + abs(max_re)):
        raise PreconditionError(
            f"sublevel threshold M={M} is below max(0, max Re lam) = "
            f"{max_re}; invariance is not guaranteed there")
    tol = 1e-12 * (1.0 + max(abs(l) for l in spec.lam))
    for (m, k) in u_hat.terms:
        if spec.inner(k).real <= M + tol:
            raise PreconditionError(
                f"seed slot ({m}, {k}) has Re <lam, k> <= M; the field "
                f"must vanish on the sublevel set")
    state = normalize_exact(u_hat, spec, cap)
    offenders = [(m, k) for (m, k) in state.coeffs
                 if spec.inner(k).real <= M + tol]
    return {"ok": not offenders, "offenders": offenders, "M": M}


def _permute_field(u: FormalVectorField, sigma) -> FormalVectorField:
    n = u.dim
    inv = [0] * n
    for i, s in enumerate(sigma):
        inv[s] = i
    terms = {}
    for (m, k), c in u.terms.items():
        kk = tuple(k[sigma[t]] for t in range(n))
        terms[(inv[m], kk)] = c
    lam = tuple(u.lam[sigma[t]] for t in range(n))
    return FormalVectorField(n, lam, terms, u.degree_cap)


def check_sigma_invariance(u_hat: FormalVectorField, spec: Spectrum,
                           sigma, cap: int, deltas=(1.0, math.inf),
                           tol=1e-12) -> dict:
    """The flow commutes with coordinate permutations fixing the spectrum.

    ``sigma`` is a permutation of range(n); the spectrum must be constant
    on its orbits.  Compares flowing the permuted field against
    permuting the flowed field at the sampled times; the two traversals
    sum in different orders, hence the small comparison tolerance.
    """
    n = spec.dim
    if sorted(sigma) != list(range(n)):
        raise PreconditionError(f"{sigma!r} is not a permutation of 0..{n-1}")
    for j in range(n):
        if abs(spec.lam[j] - spec.lam[sigma[j]]) > 1e-14 * (1 + abs(spec.lam[j])):
            raise PreconditionError(
                "spectrum is not constant on the permutation orbits")
    state = normalize_exact(u_hat, spec, cap)
    state_p = normalize_exact(_permute_field(u_hat, sigma), spec, cap)
    worst = 0.0
    for delta in deltas:
        f1 = _permute_field(state.field_at(delta, "original"), sigma)
        f2 = state_p.field_at(delta, "original")
        keys = set(f1.terms) | set(f2.terms)
        for key in keys:
            diff = abs(f1.terms.get(key, 0j) - f2.terms.get(key, 0j))
            worst = max(worst, diff)
    return {"ok": worst <= tol, "max_diff": worst, "deltas": tuple(deltas)}


# ---- Hamiltonian structure -----------------------------------------------


@dataclass
class ScalarSeries:
    """Sparse scalar polynomial sum h_k x^k with tuple exponents."""

    dim: int
    terms: dict = field(default_factory=dict)
    degree_cap: int = 6

    def __post_init__(self):
        clean = {}
        for k, c in self.terms.items():
            if len(k) != self.dim:
                raise ValueError(f"exponent {k} has wrong length")
            c = complex(c)
            if abs(c) >= 1e-300:
                clean[k] = c
        self.terms = clean


def _check_doubled(spec: Spectrum):
    n2 = spec.dim
    if n2 % 2 != 0:
        raise PreconditionError(
            f"Hamiltonian phase space must be even-dimensional, got {n2}")
    n = n2 // 2
    for s in range(n):
        want = -spec.lam[s].conjugate()
        if abs(spec.lam[n + s] - want) > 1e-14 * (1.0 + abs(want)):
            raise PreconditionError(
                "linear part is not diag(lam, -conj(lam))")
    return n


def theta_op(H: ScalarSeries, spec: Spectrum) -> ScalarSeries:
    """Scalar phase projection: h_k -> -e^{-i arg <lam, k>} h_k.

    Slots with <lam, k> = 0 are annihilated.  Applying the Hamiltonian
    field construction J grad to the output reproduces xi applied to
    J grad H, slot for slot.
    """
    _check_doubled(spec)
    if H.dim != spec.dim:
        raise ValueError(f"dimension mismatch {H.dim} vs {spec.dim}")
    out = {}
    for k, c in H.terms.items():
        v = spec.inner(k)
        a = abs(v)
        if a <= spec.resonance_tolerance:
            continue
        out[k] = -(v.conjugate() / a) * c
    return ScalarSeries(H.dim, out, H.degree_cap)


def hamiltonian_field(H: ScalarSeries, spec: Spectrum) -> FormalVectorField:
    """J grad H with the standard symplectic J: rows (d/dx_{n+s}, -d/dx_s)."""
    n = _check_doubled(spec)
    terms = {}
    for k, c in H.terms.items():
        for s in range(n):
            if k[n + s]:
                kk = tuple(kt - (1 if t == n + s else 0)
                           for t, kt in enumerate(k))
                key = (s, kk)
                terms[key] = terms.get(key, 0j) + k[n + s] * c
            if k[s]:
                kk = tuple(kt - (1 if t == s else 0)
                           for t, kt in enumerate(k))
                key = (n + s, kk)
                terms[key] = terms.get(key, 0j) - k[s] * c
    return FormalVectorField(2 * n, spec.lam, terms,
                             max(2, H.degree_cap - 1))


def check_hamiltonian_invariance(H_hat: ScalarSeries, spec: Spectrum,
                                 cap: int, deltas=(1.0, 5.0, math.inf)) -> dict:
    """The averaging flow of a Hamiltonian field stays Hamiltonian.

    Runs the exact flow of J grad H_hat and measures, at each sampled
    time, how far J^{-1} u is from a gradient: the defect is the worst
    asymmetry of the mixed partials,
    (w_j + 1) V^i_{w + e_j} - (w_i + 1) V^j_{w + e_i}.  Also verifies the
    generator identity xi(J grad H) = J grad(theta H) with exact slot
    comparison.
    """
    n = _check_doubled(spec)
    if any(sum(k) < 3 for k in H_hat.terms):
        raise PreconditionError("Hamiltonian must start at degree 3")
    u_hat = hamiltonian_field(H_hat, spec)
    state = normalize_exact(u_hat, spec, cap)

    lhs = xi_op(u_hat, spec)
    rhs = hamiltonian_field(theta_op(H_hat, spec), spec)
    id_keys = set(lhs.terms) | set(rhs.terms)
    identity_max = 0.0
    identity_exact = True
    for key in id_keys:
        a = lhs.terms.get(key, 0j)
        b = rhs.terms.get(key, 0j)
        if a != b:
            identity_exact = False
        identity_max = max(identity_max, abs(a - b))

    n2 = 2 * n
    closedness = {}
    for delta in deltas:
        fld = state.field_at(delta, "original")
        # v = J^{-1} u: v_s = -u_{n+s}, v_{n+s} = u_s
        v_terms = {}
        for (m, k), c in fld.terms.items():
            if m < n:
                v_terms[(m + n, k)] = c
            else:
                v_terms[(m - n, k)] = -c
        worst = 0.0
        grads = {}
        for (i, k), c in v_terms.items():
            for j in range(n2):
                if k[j]:
                    w = tuple(kt - (1 if t == j else 0)
                              for t, kt in enumerate(k))
                    grads[(i, j, w)] = grads.get((i, j, w), 0j) + k[j] * c
        for (i, j, w), val in grads.items():
            if j <= i:
                continue
            other = grads.get((j, i, w), 0j)
            worst = max(worst, abs(val - other))
        closedness[delta] = worst
    return {"identity_exact": identity_exact,
            "identity_max_diff": identity_max,
            "closedness": closedness}
