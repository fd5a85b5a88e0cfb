"""Acceptance suite: one test per release criterion.

Each test prints a single summary line with the measured quantity next
to its threshold.  Criterion 10 is split in two: the partial-sum drift
clause is asserted literally and is expected to fail (the measured
drift between the two pinned tail lengths sits above the stated bound;
see the README), while the structural clauses pass.
"""

import math
import random
import time

import numpy as np
import pytest

from normflow.flow import (ScalarSeries, change_of_variables,
                           check_degree_invariance,
                           check_hamiltonian_invariance,
                           check_spectral_invariance, normal_form_limit,
                           normalize_exact, normalize_numeric)
from normflow.majorant import (BurgersModel, branch_points,
                               burgers_solution, implicit_residual,
                               radius_lower_bound, safe_disc_radius,
                               verify_majorant_chain)
from normflow.resonance import (Spectrum, brjuno_partial_sums,
                                build_b_sequence, check_b_properties,
                                omega_s)
from normflow.series import FormalVectorField, pushforward, sup_norm_bound
from normflow.siegel import (StepParams, band_range, band_starts,
                             build_schedule, calibrate, compose_steps,
                             jacobian_certificate, partial_step)

GOLDEN = (1.0 + math.sqrt(5.0)) / 2.0

SPECTRA = [
    (1.0, GOLDEN),
    (1.0, -GOLDEN),
    (1.0, 1.0j),
    (1.0, -1.0),
    (1.0, -2.0, 1.0j),
]


def exponents(n, d):
    if n == 1:
        yield (d,)
        return
    for head in range(d + 1):
        for tail in exponents(n - 1, d - head):
            yield (head,) + tail


def degree(k):
    return sum(k)


_corpus = None


def corpus():
    """20 random seeds over the five reference spectra, caps <= 6,
    coefficient magnitudes <= 1; states solved once and shared."""
    global _corpus
    if _corpus is not None:
        return _corpus
    entries = []
    for i in range(20):
        lam = SPECTRA[i % len(SPECTRA)]
        n = len(lam)
        cap = (5 + (i // 5) % 2) if n == 2 else 4
        rng = np.random.default_rng(400 + i)
        density = 0.4 if n == 2 else 0.3
        terms = {}
        for d in (2, 3):
            for k in exponents(n, d):
                for m in range(n):
                    if rng.random() < density:
                        terms[(m, k)] = complex(rng.uniform(-0.7, 0.7),
                                                rng.uniform(-0.7, 0.7))
        spec = Spectrum(lam)
        u = FormalVectorField(n, lam, terms, cap)
        entries.append((u, spec, normalize_exact(u, spec, cap)))
    _corpus = entries
    return entries


def test_criterion_01_exact_vs_rk4_oracle():
    t0 = time.perf_counter()
    deltas = (0.5, 1.0, 2.0)
    worst = 0.0
    for u, spec, state in corpus():
        numeric = normalize_numeric(u, spec, u.degree_cap, max(deltas),
                                    checkpoints=list(deltas))
        grid = list(numeric["grid"])
        for (m, k), vals in numeric["coeffs"].items():
            for i, d in enumerate(grid):
                exact = state.value(k, m, d, gauge="reduced")
                worst = max(worst, abs(exact - vals[i]))
    elapsed = time.perf_counter() - t0
    print(f"criterion 1: max slot error {worst:.3e} (< 1e-8), "
          f"{elapsed:.1f}s (< 60s)")
    assert worst < 1e-8
    assert elapsed < 60.0


def test_criterion_02_normal_form_membership():
    checked = 0
    for u, spec, state in corpus():
        lim = normal_form_limit(state)
        for (m, k) in lim.terms:
            assert spec.is_resonant(k, m), (spec.lam, m, k)
            checked += 1
        if not any(spec.is_resonant(k, m)
                   for d in range(2, u.degree_cap + 1)
                   for k in exponents(u.dim, d) for m in range(u.dim)):
            assert lim.terms == {}
    print(f"criterion 2: limit support resonant-only on 20 seeds "
          f"({checked} resonant slots, zero tolerance)")


def test_criterion_03_conjugacy():
    worst = 0.0
    for u, spec, state in corpus():
        cap = u.degree_cap
        for delta in (1.0, math.inf):
            phi = change_of_variables(state, delta, cap)
            left = pushforward(phi, u, cap)
            right = (normal_form_limit(state) if math.isinf(delta)
                     else state.field_at(delta, gauge="original"))
            keys = set(left.terms) | set(right.terms)
            for key in keys:
                worst = max(worst, abs(left.terms.get(key, 0j)
                                       - right.terms.get(key, 0j)))
    print(f"criterion 3: conjugacy defect {worst:.3e} (< 1e-9) "
          f"at delta in {{1, inf}} on 20 seeds")
    assert worst < 1e-9


def test_criterion_04_support_invariances():
    # degree version, exact
    rng = np.random.default_rng(431)
    lam = (1.0, -GOLDEN)
    spec = Spectrum(lam)
    for M in (3, 4):
        terms = {}
        for d in range(M + 1, M + 3):
            for k in exponents(2, d):
                for m in range(2):
                    if rng.random() < 0.6:
                        terms[(m, k)] = complex(rng.uniform(-1, 1))
        u = FormalVectorField(2, lam, terms, M + 4)
        rep = check_degree_invariance(u, spec, M + 1, M + 4)
        assert rep["ok"] and rep["offenders"] == []
        state = normalize_exact(u, spec, M + 4)
        assert all(degree(k) > M for (_m, k) in state.coeffs)
    # spectral-sublevel version on 3 constructed seeds
    for i, (lam, M) in enumerate([((1.0, 2.0), 3.0), ((1.0, 2.0), 4.0),
                                  ((2.0, 1.0), 3.5)]):
        spec = Spectrum(lam)
        rng = np.random.default_rng(433 + i)
        terms = {}
        for d in (2, 3):
            for k in exponents(2, d):
                if spec.inner(k).real > M + 1e-9:
                    for m in range(2):
                        if rng.random() < 0.7:
                            terms[(m, k)] = complex(rng.uniform(-1, 1))
        u = FormalVectorField(2, lam, terms, 6)
        rep = check_spectral_invariance(u, spec, M, 6)
        assert rep["ok"] and rep["offenders"] == []
    print("criterion 4: degree and spectral sublevel supports invariant "
          "(exact, 2 + 3 seeds)")


def test_criterion_05_hamiltonian_invariance():
    lam = (1.0, -2.0, -1.0, 2.0)
    spec = Spectrum(lam)
    H = ScalarSeries(4, {(2, 0, 1, 0): 0.125, (1, 1, 0, 1): -3.0 / 32,
                        (0, 2, 1, 0): 1.0 / 16, (1, 0, 2, 0): 1.0 / 32}, 4)
    rep = check_hamiltonian_invariance(H, spec, 4, deltas=(1.0, 5.0, math.inf))
    assert rep["identity_exact"]
    worst = max(rep["closedness"].values())
    print(f"criterion 5: generator identity slot-exact, closedness "
          f"{worst:.3e} (< 1e-10) at delta in {{1, 5, inf}}")
    assert worst < 1e-10


def test_criterion_06_majorant_chain():
    rho = 1.0
    grid = [0.0, 0.5, 1.0, 2.0, 10.0]
    for u, spec, _state in corpus()[:10]:
        norm = sup_norm_bound(u, rho)
        cert = verify_majorant_chain(u, spec, u.degree_cap, grid,
                                     rho=rho, norm_u=norm)
        assert cert.delta == 10.0
    # radius identity, exact
    rng = np.random.default_rng(439)
    for _ in range(25):
        r = float(rng.uniform(0.2, 3.0))
        nu = float(rng.uniform(0.01, 1.0))
        n = int(rng.integers(1, 5))
        d = float(rng.uniform(0.0, 20.0))
        assert radius_lower_bound(r, nu, n, d) == \
            safe_disc_radius(BurgersModel.from_seed(r, nu, n, d)) / n
    # implicit residual on a 100-point grid
    worst = 0.0
    rng = np.random.default_rng(443)
    for _ in range(100):
        a = float(rng.uniform(0.05, 2.0))
        b = float(rng.uniform(0.2, 3.0))
        tau = float(rng.uniform(0.01, 5.0))
        model = BurgersModel(a, b, 2, tau)
        z = float(rng.uniform(0.0, 0.85)) * min(branch_points(model))
        F = burgers_solution(model, z)
        worst = max(worst, implicit_residual(model, z, F))
    print(f"criterion 6: chain holds on 10 seeds x 5 deltas; radius "
          f"identity exact; implicit residual {worst:.3e} (< 1e-12)")
    assert worst < 1e-12


def test_criterion_07_decay_rates():
    cases = [((1.0, -GOLDEN), (1, 1), 0), ((1.0, -GOLDEN), (0, 2), 1),
             ((1.0, 1.0j), (2, 0), 0), ((1.0, -1.0), (2, 0), 1),
             ((1.0, GOLDEN), (1, 1), 0)]
    worst_rel = 0.0
    for lam, k, m in cases:
        spec = Spectrum(lam)
        u = FormalVectorField(2, lam, {(m, k): 0.25}, degree(k))
        state = normalize_exact(u, spec, degree(k))
        ds = np.linspace(0.0, 2.0, 21)
        logs = [math.log(abs(state.value(k, m, d, gauge="original")))
                for d in ds]
        slope = float(np.polyfit(ds, logs, 1)[0])
        rate = spec.rate(k, m)
        worst_rel = max(worst_rel, abs(-slope - rate) / rate)
    print(f"criterion 7: fitted log-slopes within {worst_rel:.2e} "
          f"relative (< 1e-2) of the divisor moduli")
    assert worst_rel < 0.01


def test_criterion_08_schedule_arithmetic():
    t0 = time.perf_counter()
    spec = Spectrum((1.0, -GOLDEN))
    alpha0 = 0.2
    c = 0.125 * math.exp(-alpha0)
    sch = build_schedule(c, alpha0, 2, spec, 10)
    assert sch.epsilon[0] < 1.0 / 16.0
    for m in range(1, 11):
        assert sch.epsilon[m - 1] <= 2.0 ** (-m - 2)
    assert all(p == 1.0 for p in sch.rho_exp_alpha)
    assert math.exp(-0.25) < sch.det_lo <= 1.0 <= sch.det_hi < math.exp(0.25)
    elapsed = time.perf_counter() - t0
    print(f"criterion 8: schedule identities hold to m = 10, "
          f"{elapsed * 1e3:.0f}ms (< 1s)")
    assert elapsed < 1.0


def test_criterion_09_siegel_desk_run():
    t0 = time.perf_counter()
    lam = (1.0, -GOLDEN)
    spec = Spectrum(lam)
    cap = 16
    rng = np.random.default_rng(449)
    terms = {}
    for d in (2, 3):
        for k in exponents(2, d):
            for m in range(2):
                if rng.random() < 0.5:
                    terms[(m, k)] = 0.02 * complex(rng.uniform(-1, 1),
                                                   rng.uniform(-1, 1))
    u_hat = FormalVectorField(2, lam, terms, cap)
    c, alpha0, bseq = calibrate(u_hat, spec, cap)
    starts = band_starts(cap)
    sch = build_schedule(c, alpha0, 2, spec, len(starts), bseq=bseq)
    u, maps = u_hat, []
    for m, r in enumerate(starts, start=1):
        params = StepParams(r, sch.c, sch.alpha[m - 1], sch.rho[m - 1],
                            sch.b, sch.omega_2r_minus_2[m - 1])
        g, nu, cert = partial_step(u, spec, params, cap)
        lo, hi = band_range(r)
        assert all(not (lo <= degree(k) <= hi) for (_m2, k) in g.terms)
        rep = jacobian_certificate(u, spec, params, sch.rho[m],
                                   samples=10)
        assert rep["det_min"] >= rep["det_lo"] - 1e-9
        assert rep["det_max"] <= rep["det_hi"] + 1e-9
        assert rep["dnu_minus_i_max"] <= rep["dnu_minus_i_bound"] + 1e-9
        maps.append(nu)
        u = g
    residual_max = max((abs(c2) for c2 in u.terms.values()), default=0.0)
    F = compose_steps(maps, cap)
    left = pushforward(F, u_hat, cap)
    conj = max((abs(c2) for c2 in left.terms.values()), default=0.0)
    elapsed = time.perf_counter() - t0
    print(f"criterion 9: bands annihilated exactly over {len(starts)} "
          f"steps, residual {residual_max:.3e} (< 1e-6), conjugacy "
          f"{conj:.3e} (< 1e-6), {elapsed:.1f}s (< 600s)")
    assert residual_max < 1e-6
    assert conj < 1e-6
    assert elapsed < 600.0


def test_criterion_10_brjuno_partial_sum_drift():
    """Expected to fail: the tail drift between the pinned lengths is
    measurably above the stated bound.  The partial sums do increase;
    the literal drift clause is asserted anyway, and the measured value
    is printed for the record."""
    spec = Spectrum((1.0, GOLDEN))
    sums = brjuno_partial_sums(spec, 16)
    assert all(b >= a for a, b in zip(sums, sums[1:]))
    drift = sums[15] - sums[11]
    print(f"criterion 10 (drift clause): measured drift {drift:.10e} "
          f"between the 12- and 16-term sums; stated bound 1e-3")
    assert drift < 1e-3


def test_criterion_10_b_sequence_structural():
    spec = Spectrum((1.0, GOLDEN))
    J = 8
    om = [omega_s(spec, 2 ** (j - 1) + 1) for j in range(1, J + 1)]
    b = build_b_sequence(1.0, 2, J, omega=om)
    rep = check_b_properties(b)
    assert rep["nonpositive"]
    assert rep["nonincreasing"]
    assert rep["convex"]
    assert rep["sublinear"]
    assert rep["consistency_residual"] < 1e-10
    print(f"criterion 10 (structure clause): all four checks pass, "
          f"consistency residual {rep['consistency_residual']:.3e} (< 1e-10)")


def test_criterion_11_index_inequalities():
    spec = Spectrum((1.0, GOLDEN))
    J = 8
    om = [omega_s(spec, 2 ** (j - 1) + 1) for j in range(1, J + 1)]
    b = build_b_sequence(1.0, 2, J, omega=om)
    rng = random.Random(20260822)
    hi = 120
    worst = 0.0
    for _ in range(500):
        m, k, l = sorted(rng.sample(range(1, hi + 1), 3))
        lhs = (l - k) * b.b(m) + (m - l) * b.b(k) + (k - m) * b.b(l)
        worst = min(worst, lhs)
        assert lhs >= -1e-10, (m, k, l)
    for _ in range(500):
        m = rng.randint(1, 40)
        k = rng.randint(m + 1, 60)
        l = rng.randint(k, 80)
        lhs = b.b(k) + b.b(l)
        rhs = b.b(k - m) + b.b(l + m)
        assert lhs <= rhs + 1e-10, (m, k, l)
    print(f"criterion 11: 1000 sampled triples satisfy both index "
          f"inequalities (tolerance 1e-10, worst slack {worst:.3e})")
