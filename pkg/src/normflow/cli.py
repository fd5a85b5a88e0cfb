"""Command-line front end for the averaging-flow library.

Subcommands: resonances, normalize, radius, siegel, selftest.  Input is
a JSON vector-field document; reports are JSON on stdout or --output,
decay traces are CSV.  Every float is printed with 17 significant digits
and every collection in a fixed order, so identical inputs and flags
reproduce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import time

from . import __version__
from .errors import InputError, InternalCheckError, PreconditionError
from .series import FormalVectorField, degree, sup_norm_bound
from .resonance import Spectrum, brjuno_partial_sums, omega_s, resonant_set, small_divisor
from .flow import normal_form_limit, normalize_exact
from .majorant import (BurgersModel, radius_lower_bound, safe_disc_radius,
                       sup_bound, verify_majorant_chain)
from .siegel import band_starts, siegel_pipeline


# ---- deterministic serialization ----


def _fmt(x) -> str:
    """Render a float with 17 significant digits (round-trip exact)."""
    x = float(x)
    if not math.isfinite(x):
        raise InternalCheckError(f"non-finite value {x!r} reached the serializer")
    return format(x, ".17g")


def _render(obj, indent=""):
    pad = indent + "  "
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        rows = []
        for key in sorted(obj):
            if not isinstance(key, str):
                raise TypeError(f"non-string report key {key!r}")
            rows.append(f'{pad}{json.dumps(key)}: {_render(obj[key], pad)}')
        return "{\n" + ",\n".join(rows) + "\n" + indent + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(_render(v, indent) for v in obj) + "]"
        rows = [pad + _render(v, pad) for v in obj]
        return "[\n" + ",\n".join(rows) + "\n" + indent + "]"
    if isinstance(obj, str):
        return json.dumps(obj)
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if obj is None:
        return "null"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return _fmt(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_report(obj) -> str:
    return _render(obj) + "\n"


# ---- document parsing ----


def _want(doc, key, kind, where):
    if key not in doc:
        raise InputError(f"{where}: missing required field {key!r}")
    val = doc[key]
    if kind is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise InputError(f"{where}.{key}: expected a number, got {val!r}")
        return float(val)
    if kind is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise InputError(f"{where}.{key}: expected an integer, got {val!r}")
        return val
    if not isinstance(val, kind):
        raise InputError(
            f"{where}.{key}: expected {kind.__name__}, got {type(val).__name__}")
    return val


def _complex_pair(val, where):
    if (not isinstance(val, list) or len(val) != 2
            or any(isinstance(v, bool) or not isinstance(v, (int, float))
                   for v in val)):
        raise InputError(f"{where}: expected a [re, im] pair, got {val!r}")
    return complex(float(val[0]), float(val[1]))


def parse_field_document(doc):
    """Validate a field document and build (field, spectrum, extras).

    The document shape is {n, lambda, terms, degree_cap, rho?, norm_hint?}
    with 1-based component indices in the terms; see the README for a
    worked example.
    """
    if not isinstance(doc, dict):
        raise InputError(f"document root must be an object, got {type(doc).__name__}")
    n = _want(doc, "n", int, "document")
    if n < 1:
        raise InputError(f"document.n: must be >= 1, got {n}")
    lam_rows = _want(doc, "lambda", list, "document")
    if len(lam_rows) != n:
        raise InputError(
            f"document.lambda: expected {n} entries, got {len(lam_rows)}")
    lam = tuple(_complex_pair(v, f"document.lambda[{i}]")
                for i, v in enumerate(lam_rows))
    cap = _want(doc, "degree_cap", int, "document")
    if cap < 2:
        raise InputError(f"document.degree_cap: must be >= 2, got {cap}")
    raw_terms = _want(doc, "terms", list, "document")
    terms = {}
    for i, row in enumerate(raw_terms):
        where = f"document.terms[{i}]"
        if not isinstance(row, dict):
            raise InputError(f"{where}: expected an object, got {type(row).__name__}")
        m = _want(row, "m", int, where)
        if not 1 <= m <= n:
            raise InputError(f"{where}.m: component {m} outside 1..{n}")
        k_row = _want(row, "k", list, where)
        if len(k_row) != n:
            raise InputError(f"{where}.k: expected {n} exponents, got {len(k_row)}")
        for j, e in enumerate(k_row):
            if isinstance(e, bool) or not isinstance(e, int):
                raise InputError(f"{where}.k[{j}]: expected an integer, got {e!r}")
            if e < 0:
                raise InputError(f"{where}.k[{j}]: negative exponent {e}")
        k = tuple(k_row)
        d = sum(k)
        if d < 2:
            raise InputError(f"{where}.k: total degree {d} below 2")
        if d > cap:
            raise InputError(
                f"{where}.k: total degree {d} exceeds degree_cap {cap}")
        re = _want(row, "re", float, where)
        im = _want(row, "im", float, where)
        if (m - 1, k) in terms:
            raise InputError(f"{where}: duplicate slot (m={m}, k={list(k)})")
        terms[(m - 1, k)] = complex(re, im)
    extras = {}
    for key in ("rho", "norm_hint"):
        if key in doc:
            val = _want(doc, key, float, "document")
            if val <= 0 and key == "rho":
                raise InputError(f"document.rho: must be positive, got {val}")
            if val < 0:
                raise InputError(f"document.{key}: must be >= 0, got {val}")
            extras[key] = val
    unknown = set(doc) - {"n", "lambda", "terms", "degree_cap", "rho", "norm_hint"}
    if unknown:
        raise InputError(f"document: unknown fields {sorted(unknown)}")
    try:
        u = FormalVectorField(n, lam, terms, cap)
    except ValueError as e:
        raise InputError(f"document: {e}") from None
    return u, Spectrum(lam), extras


def load_document(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise InputError(f"cannot read {path}: {e.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: invalid JSON at line {e.lineno}, column "
                         f"{e.colno}: {e.msg}") from None
    return doc


def field_to_document(u: FormalVectorField, extras=None):
    rows = []
    for (m, k) in sorted(u.terms):
        c = u.terms[(m, k)]
        rows.append({"m": m + 1, "k": list(k), "re": c.real, "im": c.imag})
    doc = {
        "n": u.dim,
        "lambda": [[v.real, v.imag] for v in u.lam],
        "degree_cap": u.degree_cap,
        "terms": rows,
    }
    if extras:
        doc.update(extras)
    return doc


# ---- shared plumbing ----


def _thread_setting(args):
    """Validate NORMFLOW_THREADS / --threads; recorded, not yet used."""
    env = os.environ.get("NORMFLOW_THREADS")
    threads = None
    if env is not None:
        try:
            threads = int(env)
        except ValueError:
            raise InputError(
                f"NORMFLOW_THREADS must be an integer, got {env!r}") from None
        if threads < 1:
            raise InputError(f"NORMFLOW_THREADS must be positive, got {threads}")
    if getattr(args, "threads", None) is not None:
        if args.threads < 1:
            raise InputError(f"--threads must be positive, got {args.threads}")
        threads = args.threads
    return threads


def _sha256(data: bytes) -> str:
    return "sha256:" + hashlib.sha256(data).hexdigest()


def _emit(text: str, args, outputs):
    data = text.encode("utf-8")
    if args.output:
        with open(args.output, "wb") as fh:
            fh.write(data)
        outputs.append({"path": args.output, "digest": _sha256(data)})
    else:
        sys.stdout.write(text)
        outputs.append({"path": "-", "digest": _sha256(data)})


def _write_manifest(args, command, params, outputs, t0):
    if not args.manifest:
        return
    doc = {
        "command": command,
        "input_digest": params.pop("_input_digest", None),
        "library_version": __version__,
        "parameters": params,
        "wall_time_s": time.perf_counter() - t0,
        "outputs": outputs,
    }
    with open(args.manifest, "wb") as fh:
        fh.write(dumps_report(doc).encode("utf-8"))


def _input_digest(path):
    with open(path, "rb") as fh:
        return _sha256(fh.read())


def _parse_delta(text):
    if text.strip().lower() in ("inf", "+inf", "infinity"):
        return math.inf
    try:
        val = float(text)
    except ValueError:
        raise InputError(f"--delta: expected a number or 'inf', got {text!r}") from None
    if not math.isfinite(val) or val < 0:
        raise InputError(f"--delta: must be >= 0 or 'inf', got {text}")
    return val


def _parse_grid(text):
    vals = []
    for piece in text.split(","):
        piece = piece.strip()
        if not piece:
            continue
        try:
            v = float(piece)
        except ValueError:
            raise InputError(f"--delta-grid: bad entry {piece!r}") from None
        if not math.isfinite(v) or v < 0:
            raise InputError(f"--delta-grid: entries must be finite and >= 0, got {piece}")
        vals.append(v)
    if not vals:
        raise InputError("--delta-grid: empty grid")
    return vals


# ---- subcommands ----


def cmd_resonances(args):
    t0 = time.perf_counter()
    threads = _thread_setting(args)
    doc = load_document(args.input)
    u, spec, _ = parse_field_document(doc)
    max_degree = args.max_degree if args.max_degree is not None else u.degree_cap
    if max_degree < 2:
        raise InputError(f"--max-degree must be >= 2, got {max_degree}")
    report = resonant_set(spec, max_degree)
    pairs = []
    for (m, k) in sorted(report.pairs):
        d = small_divisor(spec, k, m)
        pairs.append({"m": m + 1, "k": list(k), "divisor": [d.real, d.imag]})
    omega_rows = [{"s": s, "omega": omega_s(spec, s)} for s in range(1, 10)]
    if args.brjuno_terms is not None:
        J = args.brjuno_terms
        if J < 1:
            raise InputError(f"--brjuno-terms must be >= 1, got {J}")
    else:
        J = 6 if spec.dim <= 2 else (4 if spec.dim == 3 else 3)
    sums = brjuno_partial_sums(spec, J)
    out = {
        "n": u.dim,
        "lambda": [[v.real, v.imag] for v in u.lam],
        "max_degree": max_degree,
        "tolerance": spec.resonance_tolerance,
        "resonant": pairs,
        "omega_table": omega_rows,
        "brjuno": {
            "terms": J,
            "anchors": [2 ** j + 1 for j in range(1, J + 1)],
            "a": list(sums.a),
            "partial_sums": list(sums),
        },
    }
    outputs = []
    _emit(dumps_report(out), args, outputs)
    _write_manifest(args, "resonances", {
        "_input_digest": _input_digest(args.input),
        "input": args.input, "max_degree": max_degree,
        "brjuno_terms": J, "threads": threads,
    }, outputs, t0)
    return 0


def _trace_grid(delta):
    if delta == 0:
        return [0.0]
    if math.isinf(delta):
        return [0.0] + [2.0 ** (i - 16) for i in range(22)]
    return [0.0] + [delta * 2.0 ** (i - 32) for i in range(33)]


def cmd_normalize(args):
    t0 = time.perf_counter()
    threads = _thread_setting(args)
    doc = load_document(args.input)
    u, spec, extras = parse_field_document(doc)
    delta = _parse_delta(args.delta)
    cap = args.cap if args.cap is not None else u.degree_cap
    if cap < 2:
        raise InputError(f"--cap must be >= 2, got {cap}")
    top = u.max_degree()
    if top is not None and cap < top:
        raise InputError(
            f"--cap {cap} is below the highest seed degree {top}")
    if cap != u.degree_cap:
        u = FormalVectorField(u.dim, u.lam, u.terms, cap)
    state = normalize_exact(u, spec, cap)
    if math.isinf(delta):
        out_field = normal_form_limit(state)
    elif delta == 0:
        out_field = u  # the identity time; evaluation would only add noise
    else:
        out_field = state.field_at(delta, gauge="original")
    outputs = []
    _emit(dumps_report(field_to_document(out_field, extras)), args, outputs)
    if args.trace:
        grid = _trace_grid(delta)
        slots = sorted(state.coeffs)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["delta", "component", "k", "abs", "re", "im"])
        for d in grid:
            for (m, k) in slots:
                v = state.value(k, m, d, gauge="original")
                writer.writerow([_fmt(d), m + 1, "-".join(str(e) for e in k),
                                 _fmt(abs(v)), _fmt(v.real), _fmt(v.imag)])
        data = buf.getvalue().encode("utf-8")
        with open(args.trace, "wb") as fh:
            fh.write(data)
        outputs.append({"path": args.trace, "digest": _sha256(data)})
    _write_manifest(args, "normalize", {
        "_input_digest": _input_digest(args.input),
        "input": args.input, "delta": args.delta, "cap": cap,
        "trace": args.trace, "threads": threads,
    }, outputs, t0)
    return 0


def cmd_radius(args):
    t0 = time.perf_counter()
    threads = _thread_setting(args)
    doc = load_document(args.input)
    u, spec, extras = parse_field_document(doc)
    u.require_nonlinear("radius")
    rho = args.rho if args.rho is not None else extras.get("rho", 1.0)
    if rho <= 0:
        raise InputError(f"--rho must be positive, got {rho}")
    norm = extras.get("norm_hint")
    if norm is None:
        norm = sup_norm_bound(u, rho)
    grid = _parse_grid(args.delta_grid)
    rows = []
    for d in grid:
        # Two domain readings: disc_bound caps |z_1 + ... + z_n| (one disc
        # in the summed variable), radius_bound caps each |z_i| on the
        # polydisk that fits inside it.
        if norm == 0.0:
            disc = rho / 2.0
        else:
            disc = safe_disc_radius(BurgersModel.from_seed(rho, norm, u.dim, d))
        row = {"delta": d,
               "disc_bound": disc,
               "radius_bound": radius_lower_bound(rho, norm, u.dim, d)}
        if d > 0:
            row["sup_bound"] = sup_bound(rho, norm, u.dim, d)
        else:
            row["sup_bound"] = None
            row["caveat"] = ("sup bound undefined at delta = 0; "
                            "its time-scaled terms diverge")
        rows.append(row)
    out = {
        "n": u.dim,
        "rho": rho,
        "norm_bound": norm,
        "delta_grid": grid,
        "bounds": rows,
        "chain": None,
    }
    if args.verify_chain:
        cert = verify_majorant_chain(u, spec, u.degree_cap, grid, rho=rho,
                                     norm_u=norm)
        per = None
        if cert.per_coefficient is not None:
            per = [{"k": list(k), "bound": v}
                   for k, v in sorted(cert.per_coefficient.items())]
        out["chain"] = {
            "delta": cert.delta,
            "radius_bound": cert.radius_bound,
            "sup_bound": (None if math.isinf(cert.sup_bound)
                          else cert.sup_bound),
            "per_coefficient": per,
        }
    outputs = []
    _emit(dumps_report(out), args, outputs)
    _write_manifest(args, "radius", {
        "_input_digest": _input_digest(args.input),
        "input": args.input, "rho": rho, "delta_grid": args.delta_grid,
        "verify_chain": bool(args.verify_chain), "threads": threads,
    }, outputs, t0)
    return 0


def cmd_siegel(args):
    t0 = time.perf_counter()
    threads = _thread_setting(args)
    doc = load_document(args.input)
    u, spec, _ = parse_field_document(doc)
    u.require_nonlinear("siegel")
    cap = args.cap if args.cap is not None else u.degree_cap
    if cap < 2:
        raise InputError(f"--cap must be >= 2, got {cap}")
    if args.auto_calibrate and (args.c is not None or args.alpha0 is not None):
        raise InputError("pass --auto-calibrate or --c/--alpha0, not both")
    if not args.auto_calibrate and (args.c is None) != (args.alpha0 is None):
        raise InputError("--c and --alpha0 must be given together")
    report = resonant_set(spec, cap)
    if report.pairs:
        m, k = report.pairs[0]
        raise PreconditionError(
            f"spectrum is resonant at component {m + 1}, k={list(k)} within "
            f"degree {cap}; the banded sweep needs a resonance-free range")
    c, alpha0 = args.c, args.alpha0
    F_N, residual, schedule, certs = siegel_pipeline(u, spec, cap,
                                                     c=c, alpha0=alpha0)
    res_terms = []
    for (m, k) in sorted(residual.terms):
        v = residual.terms[(m, k)]
        res_terms.append({"m": m + 1, "k": list(k), "re": v.real, "im": v.imag})
    map_terms = []
    for (m, k) in sorted(F_N.terms):
        v = F_N.terms[(m, k)]
        map_terms.append({"m": m + 1, "k": list(k), "re": v.real, "im": v.imag})
    cert_rows = []
    for cert in certs:
        cert_rows.append({
            "epsilon": cert.epsilon,
            "epsilon_prime": cert.epsilon_prime,
            "delta_big": cert.delta_big,
            "delta_prime": cert.delta_prime,
            "rho_next": cert.rho_next,
            "det_lo": cert.det_lo,
            "det_hi": cert.det_hi,
            "dnu_minus_i": cert.dnu_minus_i,
        })
    out = {
        "n": u.dim,
        "lambda": [[v.real, v.imag] for v in u.lam],
        "cap": cap,
        "bands": band_starts(cap),
        "c": schedule.c,
        "alpha0": schedule.alpha0,
        "schedule": {
            "N": schedule.N,
            "r": list(schedule.r),
            "alpha": list(schedule.alpha),
            "rho": list(schedule.rho),
            "epsilon": list(schedule.epsilon),
            "epsilon_prime": list(schedule.epsilon_prime),
            "epsilon_cert": list(schedule.epsilon_cert),
            "epsilon_prime_cert": list(schedule.epsilon_prime_cert),
            "omega_r": list(schedule.omega_r),
            "omega_2r_minus_2": list(schedule.omega_2r_minus_2),
            "det_lo": schedule.det_lo,
            "det_hi": schedule.det_hi,
        },
        "certificates": cert_rows,
        "residual": {"terms": res_terms,
                     "max_abs": max((abs(complex(r["re"], r["im"]))
                                     for r in res_terms), default=0.0)},
        "map": {"dim": F_N.dim, "degree_cap": F_N.degree_cap,
                "terms": map_terms},
    }
    outputs = []
    _emit(dumps_report(out), args, outputs)
    _write_manifest(args, "siegel", {
        "_input_digest": _input_digest(args.input),
        "input": args.input, "cap": cap, "c": c, "alpha0": alpha0,
        "auto_calibrate": bool(args.auto_calibrate), "threads": threads,
    }, outputs, t0)
    return 0


def cmd_selftest(args):
    from .selftest import run_selftest
    _thread_setting(args)
    failures = run_selftest(sys.stdout)
    return 4 if failures else 0


# ---- entry point ----


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-o", "--output", help="write the JSON report here "
                        "instead of stdout")
    common.add_argument("--manifest", help="write a run manifest (JSON) here")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (recorded in the manifest; "
                        "computation is deterministic regardless)")
    parser = argparse.ArgumentParser(
        prog="normflow",
        description="Averaging-flow normal forms with convergence certificates")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("resonances", parents=[common],
                       help="resonant slots, small-divisor growth, partial sums")
    p.add_argument("input", help="field document (JSON)")
    p.add_argument("--max-degree", type=int, default=None)
    p.add_argument("--brjuno-terms", type=int, default=None,
                   help="number of partial-sum terms (default scales with n)")
    p.set_defaults(func=cmd_resonances)

    p = sub.add_parser("normalize", parents=[common],
                       help="flow the field to a time (or its limit) and "
                       "emit the result")
    p.add_argument("input")
    p.add_argument("--delta", required=True,
                   help="flow time; a nonnegative number or 'inf'")
    p.add_argument("--cap", type=int, default=None,
                   help="truncation degree (default: document degree_cap)")
    p.add_argument("--trace", default=None,
                   help="write a per-slot decay trace CSV here")
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("radius", parents=[common],
                       help="analyticity-radius and sup bounds on a time grid")
    p.add_argument("input")
    p.add_argument("--rho", type=float, default=None,
                   help="seed polydisc radius (default: document rho, else 1)")
    p.add_argument("--delta-grid", default="0,0.5,1,2,10")
    p.add_argument("--verify-chain", action="store_true",
                   help="also flow the seed and check each coefficient "
                   "against its bound")
    p.set_defaults(func=cmd_radius)

    p = sub.add_parser("siegel", parents=[common],
                       help="banded normalization run with certificates")
    p.add_argument("input")
    p.add_argument("--cap", type=int, default=None)
    p.add_argument("--c", type=float, default=None)
    p.add_argument("--alpha0", type=float, default=None)
    p.add_argument("--auto-calibrate", action="store_true")
    p.set_defaults(func=cmd_siegel)

    p = sub.add_parser("selftest", parents=[common],
                       help="run the bundled corpus through every check")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except PreconditionError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except InternalCheckError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except AssertionError as e:
        print(f"error: internal check failed: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
