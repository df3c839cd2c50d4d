"""Command-line driver.

Exit codes: 0 success, 2 invalid model or failed validation (error JSON on
stderr), 3 I/O error, 4 numerical non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import channels as ch
from . import modelfile, replica, simulate, spectral, thresholds
from .core import ConvergenceError, ModelError, validate_noise_profile

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
COMMANDS = ("validate", "free-energy", "phase-scan", "thresholds", "spectrum", "outliers", "simulate",
            "universality-check")


class ValidationFailed(Exception):
    def __init__(self, report: dict):
        super().__init__("validation failed")
        self.report = report


def _emit(text: str, out) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _sidecar(out, suffix: str):
    return None if out is None else Path(str(out) + suffix)


def _quad(args, spec):
    if spec.prior.gaussian or args.nodes is None:
        return None
    return replica.default_rule(spec.prior.kappa, args.nodes, args.seed)


def _fp_kwargs(args) -> dict:
    return {} if args.damping is None else {"damping": args.damping}


def cmd_validate(args, spec):
    report = validate_noise_profile(spec.profile, power=args.power, qve_probe=True).to_dict()
    report["prior_centered"] = spec.prior.is_centered()
    if spec.channel is not None:
        report["null_score_mean_max"] = float(np.max(np.abs(ch.null_score_mean(spec.channel))))
        report["fisher_consistency_max"] = float(np.max(np.abs(ch.fisher_consistency(spec.channel))))
    _emit(_json(report), args.out)
    if not report["ok"]:
        raise ValidationFailed(report)


def cmd_free_energy(args, spec):
    res = replica.free_energy(spec.profile, spec.prior, _quad(args, spec), **_fp_kwargs(args))
    unconverged = [b.start for b in res.branches if not b.converged]
    if unconverged:
        raise ConvergenceError(f"fixed point not converged from start(s) {unconverged}",
                               max(b.residual for b in res.branches))
    doc = {
        "phi": res.phi_star,
        "q": res.Q_star.Q.tolist(),
        "q_tilde": res.Q_star.Q_tilde.tolist(),
        "mmse": replica.mmse(res.Q_star, spec.prior, spec.profile),
        "branches": [{"start": b.start, "phi": b.phi, "q": b.state.Q.tolist(), "residual": b.residual,
                      "iterations": b.iterations} for b in res.branches],
        "local_maxima": [b.phi for b in res.local_maxima],
    }
    _emit(_json(doc), args.out)


def cmd_phase_scan(args, spec):
    grid = modelfile.scan_grid(spec, args.grid)
    path = modelfile.scan_path(spec)
    res = thresholds.phase_scan(path, spec.prior, grid, _quad(args, spec), threads=args.threads,
                                **_fp_kwargs(args))
    _emit(res.to_csv(), args.out)
    summary = {"transition": None if res.transition is None else res.transition.to_dict()}
    side = _sidecar(args.out, ".transition.json")
    if side is None:
        sys.stderr.write(_json(summary))
    else:
        side.write_text(_json(summary))


def cmd_thresholds(args, spec):
    rep = thresholds.recovery_bounds(spec.profile, spec.prior)
    norm, thr, outlier = thresholds.bbp_threshold(spec.profile, spec.prior)
    lhs, rhs, eq = thresholds.gap_check(spec.profile)
    doc = rep.to_dict()
    doc.update({"bbp_outlier": outlier, "gap": {"lhs": lhs, "rhs": rhs, "equality": eq}})
    _emit(_json(doc), args.out)


def _auto_grid(spec, steps=801):
    L = spectral.spectral_radius_bound(spec.profile) * 1.05 + 0.1
    return np.linspace(-L, L, steps)


def cmd_spectrum(args, spec):
    x = modelfile.parse_grid(args.grid) if args.grid else _auto_grid(spec)
    eta = 1e-10 if args.eta is None else args.eta
    dens = spectral.density(spec.profile, x, eta)
    _emit(spectral.density_csv(x, dens), args.out)
    side = _sidecar(args.out, ".edges.csv")
    if side is not None:
        side.write_text(spectral.edges_csv(spectral.support_edges(spec.profile)))


def cmd_outliers(args, spec):
    grid = modelfile.parse_grid(args.grid) if args.grid else None
    rep = spectral.outlier_predict(spec.profile, spec.prior, grid=grid)
    _emit(spectral.outliers_csv(rep), args.out)


def _effective(spec, cfg, x, channel):
    if channel is None:
        return simulate.weighted_spiked(spec.profile, simulate.sample_spiked(spec.profile, x, cfg), cfg)
    data = simulate.sample_channel_data(channel, x, cfg)
    return simulate.effective_matrix(channel, data, cfg)


def cmd_simulate(args, spec):
    cfg = simulate.SimConfig(args.N, args.seed, tuple(spec.profile.rho))
    x = simulate.sample_signal(spec.prior, cfg)
    M = _effective(spec, cfg, x, spec.channel)
    if args.dump:
        simulate.dump_matrix(M, args.dump)
    evals = simulate.empirical_spectrum(M)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "eigenvalue"])
    for i, v in enumerate(evals):
        w.writerow([i, repr(float(v))])
    _emit(buf.getvalue(), args.out)


def cmd_universality(args, spec):
    if spec.channel is None:
        raise ModelError("universality-check needs a [channel]")
    edges = spectral.support_edges(spec.profile)
    pred = spectral.outlier_predict(spec.profile, spec.prior, edges=edges)
    rows = []
    for r in range(args.replicas):
        cfg = simulate.SimConfig(args.N, args.seed + r, tuple(spec.profile.rho))
        x = simulate.sample_signal(spec.prior, cfg)
        a = simulate.empirical_spectrum(_effective(spec, cfg, x, spec.channel))
        b = simulate.empirical_spectrum(simulate.matched_gaussian(spec.profile, x, cfg))
        oa, ob = simulate.top_outlier(a, edges), simulate.top_outlier(b, edges)
        rows.append({"seed": cfg.seed, "ks": simulate.ks_distance(a, b),
                     "outlier_channel": None if oa is None else oa[0],
                     "outlier_gaussian": None if ob is None else ob[0],
                     "agree": (oa is None) == (ob is None)})
    doc = {"N": args.N, "edges": edges, "predicted_outliers": pred.outliers, "replicas": rows,
           "max_ks": max(r["ks"] for r in rows), "all_agree": all(r["agree"] for r in rows)}
    _emit(_json(doc), args.out)


HANDLERS = {
    "validate": cmd_validate,
    "free-energy": cmd_free_energy,
    "phase-scan": cmd_phase_scan,
    "thresholds": cmd_thresholds,
    "spectrum": cmd_spectrum,
    "outliers": cmd_outliers,
    "simulate": cmd_simulate,
    "universality-check": cmd_universality,
}


def _u64(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="inhomspike", description="Low-rank estimation with block-inhomogeneous noise.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--spec", required=True, help="model spec (.json or .toml)")
        s.add_argument("--out", default=None, help="output file (stdout when omitted)")
        s.add_argument("--grid", default=None, help="a:b:steps")
        s.add_argument("--seed", type=_u64, default=0)
        s.add_argument("--nodes", type=int, default=None, help="Gauss-Hermite nodes per axis")
        s.add_argument("--N", type=int, default=2000, dest="N")
        s.add_argument("--eta", type=float, default=None)
        s.add_argument("--damping", type=float, default=None)
        s.add_argument("--threads", type=int, default=simulate._threads(), help=argparse.SUPPRESS)
        if name == "validate":
            s.add_argument("--power", type=int, default=1, help="irreducibility power L")
        if name == "simulate":
            s.add_argument("--dump", default=None, help="binary matrix dump path")
        if name == "universality-check":
            s.add_argument("--replicas", type=int, default=1)
    return p


def _error(kind: str, message: str, **extra) -> None:
    doc = {"error": kind, "message": message}
    doc.update(extra)
    sys.stderr.write(_json(doc))


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = modelfile.load_spec(args.spec)
        HANDLERS[args.command](args, spec)
    except ValidationFailed as exc:
        _error("validation", "model failed validation", report=exc.report)
        return EXIT_INVALID
    except ConvergenceError as exc:
        _error("convergence", str(exc), residual=exc.residual, iterations=exc.iterations)
        return EXIT_NUMERIC
    except ArithmeticError as exc:
        _error("numeric", str(exc))
        return EXIT_NUMERIC
    except ValueError as exc:
        _error(type(exc).__name__, str(exc))
        return EXIT_INVALID
    except OSError as exc:
        _error("io", str(exc))
        return EXIT_IO
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
