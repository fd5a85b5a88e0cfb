"""Bundled desk corpus with frozen expectations, one line per check.

The seeds are small dyadic-coefficient fields, so every check is
deterministic bit for bit across runs and platforms.  ``run_selftest``
prints one line per check and returns the number of failures; the CLI
maps a nonzero count to exit code 4.
"""

from __future__ import annotations

import math
import sys

from .series import FormalVectorField, degree, pushforward
from .resonance import (Spectrum, brjuno_partial_sums, build_b_sequence,
                        check_b_properties, omega_s, resonant_set,
                        small_divisor)
from .flow import (ScalarSeries, change_of_variables,
                   check_degree_invariance, check_hamiltonian_invariance,
                   normal_form_limit, normalize_exact, normalize_numeric)
from .majorant import (BurgersModel, burgers_series_coeffs, burgers_solution,
                       implicit_residual, radius_lower_bound,
                       safe_disc_radius, verify_majorant_chain)
from .siegel import build_schedule, siegel_pipeline

_PHI = (1.0 + 5.0 ** 0.5) / 2.0
_GOLDEN = (1.0, -_PHI)

# frozen in-session from the implementation itself; the checks guard
# against regressions, not against the original derivation
_B6_GOLDEN = 1.3834839970463597
_OMEGA_GOLDEN = {2: 1.6180339887498947, 5: 4.236067977499788,
                 9: 6.854101966249692}


def _seed_mixed(cap=4):
    terms = {
        (0, (2, 0)): 3 / 16,
        (0, (1, 1)): complex(-5 / 32, 1 / 8),
        (0, (0, 2)): 7 / 64,
        (0, (2, 1)): 1 / 32,
        (1, (2, 0)): complex(-1 / 8, 1 / 16),
        (1, (1, 1)): 9 / 64,
        (1, (0, 2)): -3 / 32,
        (1, (1, 2)): complex(0, 1 / 32),
    }
    return FormalVectorField(2, _GOLDEN, terms, cap)


def _seed_resonant(cap=3):
    terms = {
        (0, (2, 1)): 1 / 8,          # resonant for lam = (1, -1)
        (1, (1, 2)): -3 / 32,        # resonant
        (0, (2, 0)): 5 / 64,
        (1, (0, 2)): complex(0, 1 / 16),
    }
    return FormalVectorField(2, (1.0, -1.0), terms, cap)


def _seed_hamiltonian():
    lam = (1.0, -2.0, -1.0, 2.0)
    H = ScalarSeries(4, {
        (2, 0, 1, 0): 1 / 8,
        (1, 1, 0, 1): -3 / 32,
        (0, 2, 1, 0): 1 / 16,
        (1, 0, 2, 0): 1 / 32,
    }, 4)
    return H, Spectrum(lam)


# ---- individual checks; each returns (ok, detail) ----


def _check_divisors():
    g = Spectrum(_GOLDEN)
    got = small_divisor(g, (2, 0), 0)
    if got != 1.0 + 0j:
        return False, f"divisor (2,0),m=1 is {got!r}, wanted exactly 1"
    worst = 0.0
    for (k, m, want) in (((0, 2), 1, -_PHI), ((1, 1), 0, -_PHI)):
        worst = max(worst, abs(small_divisor(g, k, m) - want))
    return worst < 1e-15, f"max divisor error {worst:.3e}"


def _check_resonant_set():
    rep = resonant_set(Spectrum((1.0, -1.0)), 3)
    want = [(0, (2, 1)), (1, (1, 2))]
    got = sorted(rep.pairs)
    return got == want, f"pairs {got}"


def _check_omega():
    g = Spectrum(_GOLDEN)
    worst = 0.0
    for s, want in _OMEGA_GOLDEN.items():
        got = omega_s(g, s)
        worst = max(worst, abs(got - want) / want)
    mono = all(omega_s(g, s) <= omega_s(g, s + 1) for s in range(1, 9))
    return worst < 1e-12 and mono, f"max rel err {worst:.3e}, monotone {mono}"


def _check_brjuno():
    sums = brjuno_partial_sums(Spectrum(_GOLDEN), 6)
    rel = abs(sums[5] - _B6_GOLDEN) / _B6_GOLDEN
    mono = all(sums.a[i] <= sums.a[i + 1] for i in range(len(sums.a) - 1))
    return rel < 1e-12 and mono, f"B(6) rel err {rel:.3e}, a nondecreasing {mono}"


def _check_exact_vs_rk4():
    u = _seed_mixed()
    spec = Spectrum(_GOLDEN)
    state = normalize_exact(u, spec, 4)
    num = normalize_numeric(u, spec, 4, 1.0, checkpoints=[1.0])
    worst = 0.0
    for (m, k), vals in num["coeffs"].items():
        exact = state.value(k, m, 1.0, gauge="reduced")
        worst = max(worst, abs(exact - vals[-1]))
    return worst < 1e-8, f"max slot error {worst:.3e} at delta=1"


def _check_normal_form_support():
    state = normalize_exact(_seed_resonant(), Spectrum((1.0, -1.0)), 3)
    lim = normal_form_limit(state)
    spec = Spectrum((1.0, -1.0))
    bad = [sk for (m, k) in lim.terms
           for sk in [(m, k)] if not spec.is_resonant(k, m)]
    gstate = normalize_exact(_seed_mixed(), Spectrum(_GOLDEN), 4)
    glim = normal_form_limit(gstate)
    empty = not glim.terms
    return not bad and empty, (f"offenders {bad}, nonresonant limit "
                               f"empty {empty}")


def _check_conjugacy():
    u = _seed_mixed()
    spec = Spectrum(_GOLDEN)
    state = normalize_exact(u, spec, 4)
    phi = change_of_variables(state, 1.0, 4)
    pushed = pushforward(phi, u, 4)
    flowed = state.field_at(1.0, "original")
    keys = set(pushed.terms) | set(flowed.terms)
    worst = max((abs(pushed.terms.get(key, 0j) - flowed.terms.get(key, 0j))
                 for key in keys), default=0.0)
    return worst < 1e-9, f"conjugacy defect {worst:.3e} at delta=1"


def _check_degree_invariance():
    terms = {(0, (2, 2)): 1 / 8, (1, (0, 4)): -3 / 64,
             (0, (3, 2)): complex(0, 1 / 16)}
    u = FormalVectorField(2, _GOLDEN, terms, 6)
    out = check_degree_invariance(u, Spectrum(_GOLDEN), 4, 6)
    return out["ok"], f"offenders {out['offenders']}"


def _check_hamiltonian():
    H, spec = _seed_hamiltonian()
    out = check_hamiltonian_invariance(H, spec, 4)
    worst = max(out["closedness"].values())
    ok = out["identity_exact"] and worst < 1e-10
    return ok, (f"identity exact {out['identity_exact']}, worst "
                f"closedness {worst:.3e}")


def _check_majorant_chain():
    u = _seed_mixed()
    spec = Spectrum(_GOLDEN)
    cert = verify_majorant_chain(u, spec, 4, (0.0, 0.5, 1.0, 2.0), rho=1.0)
    model = BurgersModel.from_seed(1.0, 2.0, 2, 1.0)
    ident = radius_lower_bound(1.0, 2.0, 2, 1.0) == safe_disc_radius(model) / 2
    zeta = safe_disc_radius(model) / 2
    res = implicit_residual(model, zeta, burgers_solution(model, zeta))
    return (cert.radius_bound > 0 and ident and res < 1e-12,
            f"radius {cert.radius_bound:.6g}, identity {ident}, "
            f"residual {res:.3e}")


def _check_burgers_series():
    model = BurgersModel(0.5, 1.0, 2, 0.25)
    coeffs = burgers_series_coeffs(model, 16)
    zeta = safe_disc_radius(model) / 8
    series_val = sum(c * zeta ** j for j, c in enumerate(coeffs))
    closed = burgers_solution(model, zeta)
    rel = abs(series_val - closed) / abs(closed)
    return rel < 1e-9, f"series vs closed form rel err {rel:.3e}"


def _check_schedule():
    alpha0 = math.log(4.0)
    c = 0.125 / 4.0
    sched = build_schedule(c, alpha0, 2, Spectrum(_GOLDEN), 8)
    ok_eps1 = sched.epsilon[0] == 1 / 64
    ok_eps = all(sched.epsilon[m] <= 2.0 ** (-m - 3)
                 for m in range(8))
    ok_rho = all(v == 1.0 for v in sched.rho_exp_alpha)
    lo, hi = math.exp(-0.25), math.exp(0.25)
    ok_det = lo < sched.det_lo <= sched.det_hi < hi
    ok = ok_eps1 and ok_eps and ok_rho and ok_det
    return ok, (f"eps1=1/64 {ok_eps1}, eps bound {ok_eps}, "
                f"rho e^alpha==1 {ok_rho}, det bracket {ok_det}")


def _check_siegel_mini():
    u = _seed_mixed()
    spec = Spectrum(_GOLDEN)
    F, residual, sched, certs = siegel_pipeline(u, spec, 4)
    if residual.terms:
        return False, f"residual kept {len(residual.terms)} slots"
    pushed = pushforward(F, u, 4)
    worst = max((abs(v) for v in pushed.terms.values()), default=0.0)
    return worst < 1e-9, (f"residual empty, composed conjugacy defect "
                          f"{worst:.3e}, {len(certs)} steps")


def _check_b_sequence():
    g = Spectrum(_GOLDEN)
    omega = [omega_s(g, 2 ** (j - 1) + 1) for j in range(1, 7)]
    b = build_b_sequence(1.0, 2, 6, omega=omega)
    rep = check_b_properties(b)
    flags = [rep["nonpositive"], rep["nonincreasing"], rep["convex"],
             rep["sublinear"]]
    cons = rep["consistency_residual"]
    worst = 0.0
    r_top = 2 ** 5 + 1
    for m in range(1, r_top - 1):
        for k in range(m + 1, r_top):
            l = k + (k - m)
            if l > r_top:
                continue
            val = ((l - k) * b.b(m) + (m - l) * b.b(k) + (k - m) * b.b(l))
            worst = min(worst, val)
    ok = all(flags) and cons < 1e-10 and worst > -1e-10
    return ok, (f"structural {flags}, consistency {cons:.3e}, "
                f"worst convexity triple {worst:.3e}")


_CHECKS = [
    ("divisor-golden", _check_divisors),
    ("resonant-pairs", _check_resonant_set),
    ("omega-golden", _check_omega),
    ("brjuno-golden", _check_brjuno),
    ("flow-exact-vs-rk4", _check_exact_vs_rk4),
    ("normal-form-support", _check_normal_form_support),
    ("conjugacy-delta-1", _check_conjugacy),
    ("degree-invariance", _check_degree_invariance),
    ("hamiltonian-theta", _check_hamiltonian),
    ("majorant-chain", _check_majorant_chain),
    ("burgers-series", _check_burgers_series),
    ("schedule-arith", _check_schedule),
    ("siegel-mini", _check_siegel_mini),
    ("b-sequence", _check_b_sequence),
]


def run_selftest(stream=None) -> int:
    """Run every bundled check; returns the number of failures."""
    if stream is None:
        stream = sys.stdout
    failures = 0
    for name, fn in _CHECKS:
        try:
            ok, detail = fn()
        except Exception as e:  # a crash is a failure with the exception as detail
            ok, detail = False, f"raised {type(e).__name__}: {e}"
        mark = " ok " if ok else "FAIL"
        if not ok:
            failures += 1
        stream.write(f"[{mark}] {name:<22s} {detail}\n")
    stream.write(f"{len(_CHECKS)} checks, {failures} failures\n")
    return failures


if __name__ == "__main__":
    sys.exit(4 if run_selftest() else 0)
