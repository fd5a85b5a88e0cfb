"""Spectra, small divisors, and the slowly growing envelope sequence.

The shifted inner product <lam, k - e_m> decides whether a coefficient
slot (m, k) is resonant (the divisor vanishes) or decays under the
averaging flow at rate |<lam, k - e_m>|.  This module classifies slots,
measures how small the unshifted divisors <lam, k> can get within an
integer budget (the Omega numbers), and builds the negative convex
envelope sequence b used by the convergence schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NearResonanceError, PreconditionError


@dataclass
class Spectrum:
    """A diagonal spectrum with its resonance classification tolerance.

    The tolerance defaults to 1e-12 * (1 + max_j |lam_j|), so perfectly
    scaled problems classify divisors of order one cleanly while exact
    zeros (which come out as floating zeros for integer-combination
    spectra) are always resonant.
    """

    lam: tuple
    resonance_tolerance: float = None

    def __post_init__(self):
        self.lam = tuple(complex(v) for v in self.lam)
        if len(self.lam) == 0:
            raise ValueError("spectrum must have at least one entry")
        for v in self.lam:
            if not (math.isfinite(v.real) and math.isfinite(v.imag)):
                raise ValueError(f"spectrum entry {v} is not finite")
        if self.resonance_tolerance is None:
            scale = max(abs(v) for v in self.lam)
            self.resonance_tolerance = 1e-12 * (1.0 + scale)
        if self.resonance_tolerance < 0:
            raise ValueError(
                f"resonance tolerance must be >= 0, "
                f"got {self.resonance_tolerance}")

    @property
    def dim(self):
        return len(self.lam)

    def inner(self, k) -> complex:
        """Plain inner product <lam, k> for a signed integer vector."""
        return sum(l * kj for l, kj in zip(self.lam, k))

    def divisor(self, k, m) -> complex:
        """Shifted inner product <lam, k - e_m> for slot (m, k), m 0-based."""
        return self.inner(k) - self.lam[m]

    def is_resonant(self, k, m) -> bool:
        return abs(self.divisor(k, m)) <= self.resonance_tolerance

    def rate(self, k, m) -> float:
        """Decay rate |<lam, k - e_m>|, exactly 0.0 for resonant slots."""
        d = self.divisor(k, m)
        a = abs(d)
        return 0.0 if a <= self.resonance_tolerance else a

    def phase(self, k, m) -> complex:
        """Unit factor e^{-i arg <lam, k - e_m>} for a nonresonant slot.

        Computed as conj(d)/|d|, which is exactly +-1 for real divisors
        and exactly -+1j for purely imaginary ones.
        """
        d = self.divisor(k, m)
        a = abs(d)
        if a <= self.resonance_tolerance:
            raise PreconditionError(
                f"slot (m={m}, k={k}) is resonant; it has no phase factor")
        return d.conjugate() / a


def small_divisor(spec: Spectrum, k, m) -> complex:
    """Exact shifted divisor <lam, k> - lam_m for slot (m, k), m 0-based."""
    return spec.divisor(k, m)


@dataclass
class ResonanceReport:
    """Resonant slots of a spectrum up to a degree budget."""

    lam: tuple
    max_degree: int
    pairs: list = field(default_factory=list)  # (m, k) with m 0-based
    tolerance: float = 0.0

    def count_by_degree(self):
        out = {}
        for _, k in self.pairs:
            d = sum(k)
            out[d] = out.get(d, 0) + 1
        return out


def _exponents_of_degree(n, d):
    """All nonnegative integer n-tuples with total degree exactly d."""
    if n == 1:
        yield (d,)
        return
    for first in range(d + 1):
        for rest in _exponents_of_degree(n - 1, d - first):
            yield (first,) + rest


def resonant_set(spec: Spectrum, max_degree: int) -> ResonanceReport:
    """Enumerate resonant slots (m, k) with 2 <= |k| <= max_degree."""
    if max_degree < 2:
        raise ValueError(f"max_degree must be >= 2, got {max_degree}")
    pairs = []
    n = spec.dim
    for d in range(2, max_degree + 1):
        for k in _exponents_of_degree(n, d):
            for m in range(n):
                if spec.is_resonant(k, m):
                    pairs.append((m, k))
    pairs.sort()
    return ResonanceReport(spec.lam, max_degree, pairs,
                           spec.resonance_tolerance)


# ---- smallest divisors within a budget -----------------------------------


def omega_s(spec: Spectrum, s: int) -> float:
    """Largest inverse divisor 1/|<lam, k>| over signed vectors |k|_1 <= s.

    The budget counts |k|_1 = sum |k_j| over all of Z^n minus the exact
    zero set of <lam, .>; exact zeros are resonances of the unshifted
    form and do not belong to the supremum.  A divisor that is nonzero
    but at or below the resonance tolerance raises NearResonanceError:
    the value would be a tolerance artifact, not a measurement.  An empty
    candidate set yields 1.0.
    """
    if s < 1:
        raise ValueError(f"budget must be >= 1, got {s}")
    n = spec.dim
    if n == 2:
        return _omega_2d(spec, s)
    if (2 * s + 1) ** n > 5e7:
        raise ValueError(
            f"omega budget s={s} with n={n} needs {(2*s+1)**n:.2e} lattice "
            f"points; only n=2 has a reduced search")
    best = 0.0
    tol = spec.resonance_tolerance
    for k in np.ndindex(*(2 * s + 1,) * n):
        kk = tuple(int(kj) - s for kj in k)
        l1 = sum(abs(kj) for kj in kk)
        if l1 == 0 or l1 > s:
            continue
        a = abs(spec.inner(kk))
        if a == 0.0:
            continue
        if a <= tol:
            raise NearResonanceError(
                f"divisor |<lam, {kk}>| = {a:.3e} is below the resonance "
                f"tolerance {tol:.3e}")
        best = max(best, 1.0 / a)
    return best if best > 0.0 else 1.0


def _omega_2d(spec: Spectrum, s: int) -> float:
    """Reduced search for n = 2.

    For fixed k2, |k1 lam1 + k2 lam2| is a convex function of real k1
    minimized at k1* = -k2 Re(lam2/lam1); the integer minimum over the
    budget interval lies within distance 1 of the clamped rounding, and
    any divisor below tolerance lies at offset < 1 from k1*, so scanning
    the clamped rounding plus offsets in {-2..2} is exhaustive for both
    the maximum of 1/|.| and the near-resonance scan.
    """
    l1, l2 = spec.lam
    if l1 == 0:
        return _omega_brute_fallback(spec, s)
    mu = l2 / l1
    k2 = np.arange(-s, s + 1, dtype=np.int64)
    budget = s - np.abs(k2)
    kstar = np.rint(-k2 * mu.real)
    cands = []
    for off in (-2, -1, 0, 1, 2):
        k1 = np.clip(kstar + off, -budget, budget)
        cands.append(k1)
    k1 = np.stack(cands).astype(np.int64)
    k2b = np.broadcast_to(k2, k1.shape)
    val = np.abs(k1 * l1 + k2b * l2)
    nonzero_k = (k1 != 0) | (k2b != 0)
    exact_zero = (val == 0.0)
    tol = spec.resonance_tolerance
    near = nonzero_k & ~exact_zero & (val <= tol)
    if near.any():
        i = np.argwhere(near)[0]
        kk = (int(k1[tuple(i)]), int(k2b[tuple(i)]))
        raise NearResonanceError(
            f"divisor |<lam, {kk}>| = {val[tuple(i)]:.3e} is below the "
            f"resonance tolerance {tol:.3e}")
    ok = nonzero_k & ~exact_zero
    if not ok.any():
        return 1.0
    return float(1.0 / val[ok].min())


def _omega_brute_fallback(spec: Spectrum, s: int) -> float:
    best = 0.0
    tol = spec.resonance_tolerance
    for k1 in range(-s, s + 1):
        for k2 in range(-(s - abs(k1)), s - abs(k1) + 1):
            if k1 == 0 and k2 == 0:
                continue
            a = abs(spec.inner((k1, k2)))
            if a == 0.0:
                continue
            if a <= tol:
                raise NearResonanceError(
                    f"divisor below tolerance at k=({k1},{k2})")
            best = max(best, 1.0 / a)
    return best if best > 0.0 else 1.0


class BrjunoSums(list):
    """Partial-sum list that also carries the underlying a_j sequence."""

    def __init__(self, sums, a):
        super().__init__(sums)
        self.a = tuple(a)


def brjuno_partial_sums(spec: Spectrum, J: int) -> BrjunoSums:
    """Partial sums of sum_j 2^{-j} ln max(1, Omega_{2^j + 1}), j = 1..J.

    Convergence of these sums as J grows is the slow-divisor-growth
    condition under which the averaging scheme converges.  The result is
    a list holding the partial sum after each j; the a_j values live on
    the ``.a`` attribute and are checked to be nondecreasing.
    """
    if J < 1:
        raise ValueError(f"J must be >= 1, got {J}")
    sums = []
    a_seq = []
    total = 0.0
    for j in range(1, J + 1):
        a_j = max(1.0, omega_s(spec, 2 ** j + 1))
        if a_seq and a_j < a_seq[-1]:
            raise ArithmeticError(
                f"a_j sequence decreased at j={j}: {a_j} < {a_seq[-1]}")
        a_seq.append(a_j)
        total += math.log(a_j) / 2 ** j
        sums.append(total)
    return BrjunoSums(sums, a_seq)


# ---- the envelope sequence b ---------------------------------------------


def _anchor_index(m):
    """Anchor abscissa r_m = 2^{m-1} + 1 (r_1 = 2, and 2 r_m - 1 = r_{m+1})."""
    return 2 ** (m - 1) + 1


@dataclass
class BSequence:
    """Negative convex envelope sequence with geometric anchor spacing.

    ``values[s]`` holds b_s for s = 1 .. r_J (index 0 unused); between
    anchors the sequence is linear in s, and past the last anchor ``b(s)``
    continues with the final slope, which preserves negativity,
    monotonicity, and convexity.  ``A`` records the constant driver scale
    used for the summable tail; ``a`` holds the per-anchor growth factors
    a_m with exp(b_{r_{m+1}} - 2 b_{r_m}) = a_m by construction.
    """

    values: list
    A: float
    anchors: dict = field(default_factory=dict)
    a: list = field(default_factory=list)
    n: int = 2

    def b(self, s: int) -> float:
        if s < 1:
            raise ValueError(f"b(s) needs s >= 1, got {s}")
        if s < len(self.values):
            return self.values[s]
        last = len(self.values) - 1
        slope = self.values[last] - self.values[last - 1]
        return self.values[last] + slope * (s - last)


def build_b_sequence(A: float, n: int, J: int, omega=None) -> BSequence:
    """Build the envelope sequence from anchor tail sums.

    Anchors sit at r_m = 2^{m-1} + 1 and take the value
    b_{r_m} = -2^{m-1} sum_{j >= m} 2^{-j} ln a_j with growth factors
    a_j = n 2^j (2 r_j)^{n+1} w_j.  The scale w_j is ``omega[j-1]`` where
    provided (one entry per anchor, held at the final entry beyond it, so
    the infinite tails stay summable without further divisor searches)
    and the constant A / (2^n n) otherwise.  Telescoping gives
    b_{r_{m+1}} - 2 b_{r_m} = ln a_m exactly, which is the identity the
    step schedule consumes; negativity, monotonicity in s, convexity, and
    sublinear growth all follow from a_j >= 1 nondecreasing.

    Parameters
    ----------
    A : float
        Constant scale, required >= 1 so that every ln a_j is positive.
    n : int
        Phase-space dimension entering the growth factors.
    J : int
        Number of anchors; the dense values run up to s = r_J.
    omega : sequence of float, optional
        Divisor scales w_1 .. w_J wired from a spectrum.
    """
    if A < 1.0:
        raise ValueError(f"A must be >= 1 (log sign control), got {A}")
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    if J < 2:
        raise ValueError(f"need at least two anchors, got J={J}")
    if omega is not None:
        omega = [float(w) for w in omega]
        if len(omega) < J:
            raise ValueError(
                f"omega provides {len(omega)} scales for J={J} anchors")
        if any(w <= 0 for w in omega):
            raise ValueError("omega scales must be positive")

    def w_of(j):
        if omega is None:
            return A / (2 ** n * n)
        return omega[min(j, len(omega)) - 1]

    def ln_a(j):
        r_j = _anchor_index(j)
        return (math.log(n) + j * math.log(2.0)
                + (n + 1) * math.log(2.0 * r_j) + math.log(w_of(j)))

    # tail sums T_m = sum_{j >= m} 2^{-j} ln a_j, summed to convergence
    tails = [0.0] * (J + 2)
    for m in range(J + 1, 0, -1):
        total = 0.0
        j = m
        while True:
            term = ln_a(j) / 2 ** j
            total += term
            j += 1
            if term < 1e-16 * (abs(total) + 1.0) and j > m + 4:
                break
            if j > m + 200:
                raise ArithmeticError("envelope tail failed to converge")
        tails[m] = total

    anchors = {}
    for m in range(1, J + 2):
        anchors[_anchor_index(m)] = -(2 ** (m - 1)) * tails[m]
    a_list = [math.exp(ln_a(j)) for j in range(1, J + 1)]
    if any(a < 1.0 for a in a_list):
        raise PreconditionError(
            "growth factors a_j dipped below 1; increase A or the omega scales")

    r_top = _anchor_index(J + 1)
    values = [0.0] * (r_top + 1)
    r_prev = None
    for m in range(1, J + 2):
        r_m = _anchor_index(m)
        values[r_m] = anchors[r_m]
        if r_prev is not None:
            span = r_m - r_prev
            for t in range(1, span):
                frac = t / span
                values[r_prev + t] = (1 - frac) * anchors[r_prev] \
                    + frac * anchors[r_m]
        r_prev = r_m
    # extrapolate to s = 1 with the first slope; this evaluates to -ln a_1
    values[1] = 2 * anchors[2] - values[3]
    A_eff = A if omega is None else 2 ** n * n * omega[J - 1]
    return BSequence(values, A_eff, anchors, a_list, n)


def check_b_properties(b: BSequence) -> dict:
    """Verify the four structural properties on the dense prefix.

    Returns a dict with one boolean per property, the abscissa of the
    first violation for each property that fails, and the consistency
    residual max_m |exp(b_{r_{m+1}} - 2 b_{r_m}) / a_m - 1| over the
    anchors the sequence carries.

    Sublinearity is read off the slopes: for a convex nonincreasing
    sequence, b_s / s and the successive differences share their limit,
    so the sequence is sublinear exactly when the slopes climb toward
    zero.  A constant-zero sequence passes (slopes already zero); a
    linear one like b_s = -s fails (slopes pinned at -1).
    """
    if len(b.values) < 4:
        raise ValueError("need at least three stored values")
    vals = b.values[1:]
    first_violation = {}

    nonpositive = True
    for i, v in enumerate(vals):
        if v > 0.0:
            nonpositive = False
            first_violation["nonpositive"] = i + 1
            break

    diffs = [vals[i + 1] - vals[i] for i in range(len(vals) - 1)]
    nonincreasing = True
    for i, d in enumerate(diffs):
        if d > 1e-12 * (1 + abs(vals[i])):
            nonincreasing = False
            first_violation["nonincreasing"] = i + 2
            break

    convex = True
    for i in range(len(diffs) - 1):
        if diffs[i + 1] < diffs[i] - 1e-12 * (1 + abs(diffs[i])):
            convex = False
            first_violation["convex"] = i + 2
            break

    slope_tol = 1e-12 * (1.0 + max(abs(v) for v in vals))
    flat = abs(diffs[-1]) <= slope_tol if diffs else True
    sublinear = flat or diffs[-1] > diffs[0] + slope_tol
    if not sublinear:
        first_violation["sublinear"] = len(vals)

    residual = 0.0
    for m, a_m in enumerate(b.a, start=1):
        r_m, r_next = _anchor_index(m), _anchor_index(m + 1)
        if r_next in b.anchors:
            got = math.exp(b.anchors[r_next] - 2.0 * b.anchors[r_m])
            residual = max(residual, abs(got / a_m - 1.0))
    return {
        "nonpositive": nonpositive,
        "nonincreasing": nonincreasing,
        "convex": convex,
        "sublinear": sublinear,
        "first_violation": first_violation,
        "consistency_residual": residual,
    }
