"""Banded averaging: band bookkeeping, the banded generator, single
steps with their shift maps and Jacobian certificates, the inductive
schedule, composition, and the full pipeline.
"""

import math

import numpy as np
import pytest

from normflow.errors import InputError, PreconditionError
from normflow.resonance import Spectrum, build_b_sequence, omega_s
from normflow.series import (FormalVectorField, SeriesMap, pushforward,
                             substitute)
from normflow.siegel import (Schedule, StepParams, band_range, band_starts,
                             build_schedule, calibrate, check_envelope,
                             compose_steps, jacobian_certificate,
                             partial_step, siegel_pipeline, step_certificate,
                             xi_r_op)
from normflow.flow import xi_op

GOLDEN = (1.0 + math.sqrt(5.0)) / 2.0


def exponents(n, d):
    if n == 1:
        yield (d,)
        return
    for head in range(d + 1):
        for tail in exponents(n - 1, d - head):
            yield (head,) + tail


def degree(k):
    return sum(k)


def desk_params(r, spec, c=0.04, alpha=0.4, n_anchor=6):
    om = [omega_s(spec, 2 ** (m - 1) + 1) for m in range(1, n_anchor + 1)]
    bseq = build_b_sequence(1.0, spec.dim, n_anchor, omega=om)
    return StepParams(r, c, alpha, math.exp(-alpha), bseq,
                      omega_s(spec, 2 * r - 2))


def seed_within_envelope(rng, spec, params, cap, degrees, density=0.7,
                         slack=0.5):
    """Random field whose slots sit inside the step envelope with room."""
    terms = {}
    n = spec.dim
    for d in degrees:
        bound = params.c * math.exp(params.b.b(d) + params.alpha * d)
        for k in exponents(n, d):
            for m in range(n):
                if spec.is_resonant(k, m):
                    continue
                if rng.random() < density:
                    mag = slack * bound * rng.uniform(0.2, 1.0)
                    phase = rng.uniform(0.0, 2.0 * math.pi)
                    terms[(m, k)] = mag * complex(math.cos(phase),
                                                  math.sin(phase))
    return FormalVectorField(n, spec.lam, terms, cap)


# ---- bands ---------------------------------------------------------------


def test_band_range_values():
    assert band_range(2) == (2, 2)
    assert band_range(3) == (3, 4)
    assert band_range(5) == (5, 8)
    assert band_range(9) == (9, 16)
    with pytest.raises(Exception):
        band_range(1)


def test_band_starts_sweeps_cap():
    assert band_starts(2) == [2]
    assert band_starts(4) == [2, 3]
    assert band_starts(7) == [2, 3, 5]
    assert band_starts(16) == [2, 3, 5, 9]
    # consecutive bands tile 2..cap without gaps
    for cap in (2, 3, 4, 7, 8, 16, 25):
        covered = set()
        for r in band_starts(cap):
            lo, hi = band_range(r)
            covered.update(range(lo, hi + 1))
        assert set(range(2, cap + 1)) <= covered


def test_xi_r_above_band_is_zero():
    lam = (1.0, -GOLDEN)
    spec = Spectrum(lam)
    u = FormalVectorField(2, lam, {(0, (3, 0)): 1.0, (1, (2, 2)): 0.5j}, 4)
    assert xi_r_op(u, spec, 2).terms == {}


def test_xi_r_degree_two_matches_full_xi():
    lam = (1.0, -GOLDEN)
    spec = Spectrum(lam)
    rng = np.random.default_rng(307)
    terms = {}
    for k in exponents(2, 2):
        for m in range(2):
            terms[(m, k)] = complex(rng.uniform(-1, 1), rng.uniform(-1, 1))
    u = FormalVectorField(2, lam, terms, 2)
    assert xi_r_op(u, spec, 2).terms == xi_op(u, spec).terms


def test_xi_r_is_band_restriction_of_xi():
    lam = (1.0, -GOLDEN)
    spec = Spectrum(lam)
    rng = np.random.default_rng(311)
    terms = {}
    for d in (2, 3, 4, 5, 6):
        for k in exponents(2, d):
            for m in range(2):
                if rng.random() < 0.4:
                    terms[(m, k)] = complex(rng.uniform(-1, 1))
    u = FormalVectorField(2, lam, terms, 6)
    full = xi_op(u, spec).terms
    for r in (2, 3):
        lo, hi = band_range(r)
        banded = xi_r_op(u, spec, r).terms
        want = {key: c for key, c in full.items()
                if lo <= degree(key[1]) <= hi}
        assert banded == want


def test_xi_r_rejects_resonant_band_slot():
    lam = (1.0, -1.0)
    spec = Spectrum(lam)
    u = FormalVectorField(2, lam, {(0, (2, 1)): 0.5}, 3)
    with pytest.raises(PreconditionError):
        xi_r_op(u, spec, 3)


# ---- one step ------------------------------------------------------------


def test_partial_step_zero_seed():
    lam = (1.0, -GOLDEN)
    spec = Spectrum(lam)
    params = desk_params(2, spec)
    u = FormalVectorField(2, lam, {}, 4)
    g, nu, cert = partial_step(u, spec, params, 4)
    assert g.terms == {}
    assert nu.terms == {}
    ref = step_certificate(params, 2)
    assert cert.epsilon == ref.epsilon
    assert cert.epsilon > 0


def test_partial_step_single_band_monomial_shift():
    # Band slot (m=0, k=(2,0)) under lam=(1,-phi): divisor 2-1 = 1, phase
    # 1.  With the cap below 2r-1 the transformed field is empty and the
    # shift carries exactly the one quadrature term -phase*U/rate.
    lam = (1.0, -GOLDEN)
    spec = Spectrum(lam)
    params = desk_params(2, spec, c=0.3, alpha=0.1)
    c0 = 0.5 * params.c * math.exp(params.b.b(2) + 2.0 * params.alpha)
    u = FormalVectorField(2, lam, {(0, (2, 0)): c0}, 2)
    g, nu, cert = partial_step(u, spec, params, 2)
    assert g.terms == {}
    assert set(nu.terms) == {(0, (2, 0))}
    assert nu.terms[(0, (2, 0))] == -c0 / spec.rate((2, 0), 0)


def test_partial_step_band_annihilation_and_support():
    lam = (1.0, -GOLDEN)
    spec = Spectrum(lam)
    params = desk_params(2, spec)
    rng = np.random.default_rng(313)
    u = seed_within_envelope(rng, spec, params, 7, degrees=(2, 3))
    g, nu, cert = partial_step(u, spec, params, 7)
    lo, hi = band_range(2)
    for (m, k) in g.terms:
        assert degree(k) >= 2 * 2 - 1
    assert all(not (lo <= degree(k) <= hi) for (m, k) in g.terms)


def test_partial_step_conjugacy_and_envelope_growth():
    """Desk seed at r = 2, cap 7: the shift conjugates Lambda z + u to
    Lambda z + g within 1e-8, and g obeys the grown envelope
    c e^{b + (alpha + eps)|k|} slot by slot."""
    lam = (1.0, -GOLDEN)
    spec = Spectrum(lam)
    params = desk_params(2, spec)
    rng = np.random.default_rng(317)
    u = seed_within_envelope(rng, spec, params, 7, degrees=(2, 3))
    g, nu, cert = partial_step(u, spec, params, 7)

    left = pushforward(nu, u, 7)
    keys = set(left.terms) | set(g.terms)
    worst = max(abs(left.terms.get(key, 0j) - g.terms.get(key, 0j))
                for key in keys)
    assert worst <= 1e-8, worst

    alpha_next = params.alpha + cert.epsilon
    for (m, k), val in g.terms.items():
        bound = params.c * math.exp(params.b.b(degree(k))
                                    + alpha_next * degree(k))
        assert abs(val) <= bound * (1 + 1e-9), (m, k)


def test_partial_step_rejects_low_support():
    lam = (1.0, -GOLDEN)
    spec = Spectrum(lam)
    params = desk_params(3, spec)
    u = FormalVectorField(2, lam, {(0, (2, 0)): 0.01}, 5)
    with pytest.raises(PreconditionError):
        partial_step(u, spec, params, 5)


def test_partial_step_rejects_envelope_violation():
    lam = (1.0, -GOLDEN)
    spec = Spectrum(lam)
    params = desk_params(2, spec, c=1e-6, alpha=0.1)
    u = FormalVectorField(2, lam, {(0, (2, 0)): 10.0}, 4)
    with pytest.raises(PreconditionError):
        partial_step(u, spec, params, 4)


# ---- Jacobian certificates -----------------------------------------------


def test_jacobian_certificate_zero_seed():
    lam = (1.0, -GOLDEN)
    spec = Spectrum(lam)
    params = desk_params(2, spec)
    u = FormalVectorField(2, lam, {}, 4)
    rep = jacobian_certificate(u, spec, params, 0.5)
    assert rep["det_min"] == rep["det_max"] == 1.0
    assert rep["det_lo"] <= 1.0 <= rep["det_hi"]
    assert rep["samples"] == 0


def test_jacobian_certificate_empirical_bounds():
    lam = (1.0, -GOLDEN)
    spec = Spectrum(lam)
    params = desk_params(2, spec)
    rng = np.random.default_rng(331)
    u = seed_within_envelope(rng, spec, params, 6, degrees=(2,))
    cert = step_certificate(params, 2)
    rep = jacobian_certificate(u, spec, params, cert.rho_next, samples=10)
    assert rep["samples"] == 10
    assert rep["det_min"] >= rep["det_lo"] - 1e-9
    assert rep["det_max"] <= rep["det_hi"] + 1e-9
    assert rep["dnu_minus_i_max"] <= rep["dnu_minus_i_bound"] + 1e-9


def test_jacobian_certificate_observed_monotone_in_radius():
    lam = (1.0, -GOLDEN)
    spec = Spectrum(lam)
    params = desk_params(2, spec)
    rng = np.random.default_rng(337)
    u = seed_within_envelope(rng, spec, params, 6, degrees=(2,))
    cert = step_certificate(params, 2)
    small = jacobian_certificate(u, spec, params, 0.3 * cert.rho_next)
    large = jacobian_certificate(u, spec, params, cert.rho_next)
    assert small["dnu_minus_i_max"] <= large["dnu_minus_i_max"] + 1e-12


def test_jacobian_certificate_rejects_radius():
    lam = (1.0, -GOLDEN)
    spec = Spectrum(lam)
    params = desk_params(2, spec)
    u = FormalVectorField(2, lam, {}, 4)
    with pytest.raises(PreconditionError):
        jacobian_certificate(u, spec, params, 2.0)


# ---- the schedule --------------------------------------------------------


def test_schedule_closed_forms():
    lam = (1.0, -GOLDEN)
    spec = Spectrum(lam)
    alpha0 = 0.2
    c = 0.125 * math.exp(-alpha0)
    sch = build_schedule(c, alpha0, 2, spec, 6)
    assert sch.N == 6
    assert sch.r == [2, 3, 5, 9, 17, 33]
    for m in range(1, 7):
        ea = math.exp(sch.alpha[m - 1])
        assert sch.epsilon[m - 1] == c * ea / (2 ** (m + 1) * sch.r[m - 1])
        assert sch.epsilon_prime[m - 1] == c * ea / 2 ** m
        assert sch.epsilon[m - 1] <= 2.0 ** (-m - 2)
        assert sch.epsilon_prime[m - 1] <= 2.0 ** (-m - 2)
        assert sch.alpha[m] == sch.alpha[m - 1] + sch.epsilon[m - 1]
    assert all(p == 1.0 for p in sch.rho_exp_alpha)
    for a, r in zip(sch.alpha, sch.rho):
        assert abs(r * math.exp(a) - 1.0) <= 4e-16


def test_schedule_base_step_bound():
    # c e^alpha0 = 1/8 gives epsilon_1 < 1/16 with slack to spare
    lam = (1.0, -GOLDEN)
    spec = Spectrum(lam)
    alpha0 = 0.5
    c = 0.125 * math.exp(-alpha0)
    sch = build_schedule(c, alpha0, 2, spec, 3)
    assert sch.epsilon[0] < 1.0 / 16.0
    assert sch.epsilon[0] == 0.125 / 8.0


def test_schedule_radii_and_det_bracket():
    lam = (1.0, -GOLDEN)
    spec = Spectrum(lam)
    alpha0 = 0.1
    c = 0.125 * math.exp(-alpha0)
    sch = build_schedule(c, alpha0, 2, spec, 8)
    assert all(b < a for a, b in zip(sch.rho, sch.rho[1:]))
    assert sch.rho[-1] >= sch.rho[0] * math.exp(-0.5)
    assert math.exp(-0.25) < sch.det_lo <= 1.0 <= sch.det_hi < math.exp(0.25)
    sums = sch.eps_exp_partial_sums
    assert all(b > a for a, b in zip(sums, sums[1:]))
    assert sums[-1] < 0.5
    assert all(v == 0.0 or v > 0 for v in sch.nu0_bound_partial_sums)


def test_schedule_certificate_family_recorded():
    lam = (1.0, -GOLDEN)
    spec = Spectrum(lam)
    alpha0 = 0.2
    c = 0.125 * math.exp(-alpha0)
    sch = build_schedule(c, alpha0, 2, spec, 3)
    # re-derive the certificate epsilon of step 1 from its pieces
    r = sch.r[0]
    ea = math.exp(sch.alpha[0])
    delta_big = (2.0 * r) ** 2 * ea * 2 * math.exp(
        2.0 * sch.b.b(r) - sch.b.b(2 * r - 1))
    assert sch.epsilon_cert[0] == pytest.approx(
        c * delta_big * sch.omega_2r_minus_2[0], rel=1e-15)
    assert sch.epsilon_prime_cert[0] == pytest.approx(
        2.0 * r * sch.epsilon_cert[0], rel=1e-15)


def test_schedule_rejects_size_conditions():
    lam = (1.0, -GOLDEN)
    spec = Spectrum(lam)
    with pytest.raises(PreconditionError):
        build_schedule(0.2, 0.1, 2, spec, 3)  # c e^alpha0 > 1/8
    with pytest.raises(PreconditionError):
        build_schedule(0.01, -0.5, 2, spec, 3)  # n e^alpha0 < 2


def test_schedule_single_step():
    lam = (1.0, 1.0j)
    spec = Spectrum(lam)
    sch = build_schedule(0.1, 0.0, 2, spec, 1)
    assert sch.N == 1 and sch.r == [2]
    assert len(sch.alpha) == 2 and len(sch.rho) == 2


# ---- calibration ---------------------------------------------------------


def test_calibrate_empty_seed():
    lam = (1.0, -GOLDEN)
    spec = Spectrum(lam)
    u = FormalVectorField(2, lam, {}, 4)
    c, alpha0, bseq = calibrate(u, spec, 4)
    assert alpha0 == 0.0
    assert c == 0.125


def test_calibrate_meets_size_and_envelope():
    lam = (1.0, -GOLDEN)
    spec = Spectrum(lam)
    rng = np.random.default_rng(347)
    terms = {}
    for d in (2, 3):
        for k in exponents(2, d):
            for m in range(2):
                if rng.random() < 0.6:
                    terms[(m, k)] = 0.05 * complex(rng.uniform(-1, 1),
                                                   rng.uniform(-1, 1))
    u = FormalVectorField(2, lam, terms, 8)
    c, alpha0, bseq = calibrate(u, spec, 8)
    assert c * math.exp(alpha0) <= 0.125 * (1 + 1e-9)
    assert 2 * math.exp(alpha0) >= 2.0 * (1 - 1e-12)
    params = StepParams(2, c, alpha0, math.exp(-alpha0), bseq,
                        omega_s(spec, 2))
    assert check_envelope(u, params) <= 1.0 + 1e-9


# ---- composition ---------------------------------------------------------


def test_compose_steps_identity_and_single():
    ident = SeriesMap(2, {}, 4)
    out = compose_steps([ident, ident, ident], 4)
    assert out.terms == {}
    s = SeriesMap(2, {(1, (2, 0)): 0.25}, 4)
    assert compose_steps([s], 4).terms == s.terms


def test_compose_steps_two_maps_hand_composition():
    # s1 adds a*z1^2 to component 2, s2 adds b*z2^2 to component 1;
    # first map acting first gives component 1 = z1 + b (z2 + a z1^2)^2.
    a, b = 0.25, 0.5
    s1 = SeriesMap(2, {(1, (2, 0)): a}, 4)
    s2 = SeriesMap(2, {(0, (0, 2)): b}, 4)
    out = compose_steps([s1, s2], 4)
    want = {(1, (2, 0)): a,
            (0, (0, 2)): b,
            (0, (2, 1)): 2 * a * b,
            (0, (4, 0)): a * a * b}
    assert out.terms == want


def test_compose_steps_rejects_mixed_dims():
    with pytest.raises(PreconditionError):
        compose_steps([SeriesMap(2, {}, 4), SeriesMap(3, {}, 4)], 4)
    with pytest.raises(PreconditionError):
        compose_steps([], 4)


# ---- the pipeline --------------------------------------------------------


def test_pipeline_zero_seed():
    lam = (1.0, -GOLDEN)
    spec = Spectrum(lam)
    u = FormalVectorField(2, lam, {}, 4)
    F, residual, sch, certs = siegel_pipeline(u, spec, 4)
    assert F.terms == {}
    assert residual.terms == {}
    assert len(certs) == sch.N == len(band_starts(4))


def test_pipeline_single_monomial_two_steps():
    lam = (1.0, -GOLDEN)
    spec = Spectrum(lam)
    u = FormalVectorField(2, lam, {(0, (2, 0)): 0.01}, 4)
    F, residual, sch, certs = siegel_pipeline(u, spec, 4)
    assert residual.terms == {}
    assert len(certs) == 2
    left = pushforward(F, u, 4)
    worst = max((abs(c) for c in left.terms.values()), default=0.0)
    assert worst <= 1e-10


def test_pipeline_mini_end_to_end():
    lam = (1.0, -GOLDEN)
    spec = Spectrum(lam)
    rng = np.random.default_rng(353)
    terms = {}
    for d in (2, 3):
        for k in exponents(2, d):
            for m in range(2):
                if rng.random() < 0.5:
                    terms[(m, k)] = 0.02 * complex(rng.uniform(-1, 1),
                                                   rng.uniform(-1, 1))
    u = FormalVectorField(2, lam, terms, 8)
    F, residual, sch, certs = siegel_pipeline(u, spec, 8)
    assert residual.terms == {}
    left = pushforward(F, u, 8)
    worst = max((abs(c) for c in left.terms.values()), default=0.0)
    assert worst <= 1e-6, worst
    for cert in certs:
        assert cert.det_lo <= 1.0 <= cert.det_hi


def test_pipeline_rejects_resonant_spectrum():
    lam = (1.0, -1.0)
    spec = Spectrum(lam)
    u = FormalVectorField(2, lam, {(0, (2, 0)): 0.01}, 4)
    with pytest.raises(PreconditionError):
        siegel_pipeline(u, spec, 4)


def test_pipeline_rejects_half_supplied_constants():
    lam = (1.0, -GOLDEN)
    spec = Spectrum(lam)
    u = FormalVectorField(2, lam, {(0, (2, 0)): 0.01}, 4)
    with pytest.raises(InputError):
        siegel_pipeline(u, spec, 4, c=0.05)
