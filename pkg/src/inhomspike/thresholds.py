"""Detectability thresholds, the BBP comparison and phase-diagram scans."""

from __future__ import annotations

import csv
import io
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .core import NoiseProfile, Prior, scaled_op_norm
from .replica import QuadratureRule, _rule_for, free_energy, mmse

DETECT_TOL = 1e-8
JUMP_TOL = 0.05
BISECT_RTOL = 1e-4

CSV_HEADER = ["t", "op_norm", "phi_star", "phi_branch_0", "phi_branch_1", "mmse", "q_norm",
              "classification", "bbp_outlier"]


@dataclass(frozen=True)
class ThresholdReport:
    op_norm_it: float
    lower_bound: float
    upper_bound: float
    bbp_norm: float
    bbp_threshold: float
    classification: str

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _cov_norm(prior: Prior) -> float:
    return float(np.max(np.abs(np.linalg.eigvalsh(prior.covariance()))))


def recovery_bounds(profile: NoiseProfile, prior: Prior) -> ThresholdReport:
    """Classify a profile against the two information-theoretic bounds.

    Below ``1/(9 kappa^4 C^6)`` the free energy vanishes; above
    ``1/||Cov x||_op^2`` it is positive.  A Gaussian prior has both bounds at
    ``1/||Cov x||^2`` since the transition is sharp there.
    """
    it = scaled_op_norm(profile.inv_delta, profile.rho)
    cov = _cov_norm(prior)
    upper = 1.0 / cov ** 2 if cov > 0 else np.inf
    if prior.gaussian:
        lower = upper
    else:
        lower = 1.0 / (9.0 * prior.kappa ** 4 * prior.support_bound ** 6)
    bbp, bbp_thr, _ = bbp_threshold(profile, prior)
    if not prior.is_centered():
        warnings.warn("prior is not centered: detectability bounds do not apply", RuntimeWarning)
        cls = "undetermined"
    elif it > upper:
        cls = "detectable"
    elif it < lower:
        cls = "undetectable"
    else:
        cls = "undetermined"
    return ThresholdReport(it, lower, upper, bbp, bbp_thr, cls)


def bbp_threshold(profile: NoiseProfile, prior: Prior):
    """(bbp_norm, 1/||Cov x||_op, outlier predicted)."""
    norm = scaled_op_norm(np.sqrt(profile.inv_delta), profile.rho)
    cov = _cov_norm(prior)
    thr = 1.0 / cov if cov > 0 else np.inf
    return norm, thr, bool(norm > thr)


def gap_check(profile: NoiseProfile):
    """(bbp_norm^2, op_norm_it, equality).  The inequality is a theorem, so a
    violation raises."""
    lhs = scaled_op_norm(np.sqrt(profile.inv_delta), profile.rho) ** 2
    rhs = scaled_op_norm(profile.inv_delta, profile.rho)
    if lhs > rhs + 1e-12:
        raise AssertionError(f"threshold gap violated: {lhs!r} > {rhs!r}")
    return lhs, rhs, bool(abs(lhs - rhs) < 1e-10)


def relative_overlap(Q: np.ndarray, prior: Prior, rho) -> float:
    """sqrt(sum_s rho_s ||Q_s||_F^2) / ||E x x^T||_F; 1 at full recovery."""
    M0 = prior.second_moment()
    num = np.sqrt(np.einsum("s,sij,sij->", np.asarray(rho), Q, Q))
    return float(num / np.sqrt(np.sum(M0 * M0)))


@dataclass
class ScanRow:
    t: float
    op_norm: float
    phi_star: float
    phi_branch_0: float
    phi_branch_1: float
    mmse: float
    q_norm: float
    q_rel: float
    classification: str
    bbp_outlier: bool
    local_maxima: List[float] = field(default_factory=list)

    def csv_fields(self) -> list:
        return [repr(float(self.t)), repr(float(self.op_norm)), repr(float(self.phi_star)),
                repr(float(self.phi_branch_0)), repr(float(self.phi_branch_1)), repr(float(self.mmse)),
                repr(float(self.q_norm)), self.classification, "true" if self.bbp_outlier else "false"]


@dataclass
class Transition:
    t: float
    op_norm: float
    bracket: tuple
    order: str
    q_jump: float

    def to_dict(self) -> dict:
        return {"t": self.t, "op_norm": self.op_norm, "bracket": list(self.bracket),
                "order": self.order, "q_jump": self.q_jump}


@dataclass
class ScanResult:
    rows: List[ScanRow]
    transition: Optional[Transition]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow(r.csv_fields())
        return buf.getvalue()


def scan_point(profile_path: Callable[[float], NoiseProfile], t: float, prior: Prior,
               quad: Optional[QuadratureRule] = None, **fp_kwargs) -> ScanRow:
    profile = profile_path(t)
    res = free_energy(profile, prior, quad, **fp_kwargs)
    by_start = {b.start: b.phi for b in res.branches}
    named = [b.phi for b in res.branches]
    Q = res.Q_star.Q
    rep = recovery_bounds(profile, prior)
    return ScanRow(
        t=float(t),
        op_norm=rep.op_norm_it,
        phi_star=res.phi_star,
        phi_branch_0=by_start.get("near-zero", named[0]),
        phi_branch_1=by_start.get("informative", named[-1]),
        mmse=mmse(res.Q_star, prior, profile),
        q_norm=float(np.sqrt(np.sum(Q * Q))),
        q_rel=relative_overlap(Q, prior, profile.rho),
        classification=rep.classification,
        bbp_outlier=rep.bbp_norm > rep.bbp_threshold,
        local_maxima=[b.phi for b in res.local_maxima],
    )


def phase_scan(profile_path: Callable[[float], NoiseProfile], prior: Prior, grid: Sequence[float],
               quad: Optional[QuadratureRule] = None, threads: int = 1, refine: bool = True,
               **fp_kwargs) -> ScanResult:
    """Evaluate phi* along ``t -> profile_path(t)`` and locate the transition.

    The transition is the first grid point with ``phi* > 1e-8``, refined by
    bisection against its predecessor to a relative width of 1e-4.  It is
    labelled first-order when the relative overlap norm (see
    ``relative_overlap``) jumps by more than 0.05 across the refined bracket.
    """
    grid = np.asarray(sorted(float(g) for g in grid))
    if grid.size == 0 or not np.all(np.isfinite(grid)):
        raise ValueError("scan grid must be finite and nonempty")
    rule = _rule_for(prior, quad)

    def run(t):
        return scan_point(profile_path, t, prior, rule, **fp_kwargs)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run, grid))
    else:
        rows = [run(t) for t in grid]
    rows.sort(key=lambda r: r.t)

    transition = None
    hits = [i for i, r in enumerate(rows) if r.phi_star > DETECT_TOL]
    if refine and hits and hits[0] > 0:
        i = hits[0]
        lo, hi = rows[i - 1], rows[i]
        while (hi.t - lo.t) > BISECT_RTOL * abs(hi.t):
            mid = run(0.5 * (lo.t + hi.t))
            if mid.phi_star > DETECT_TOL:
                hi = mid
            else:
                lo = mid
        jump = hi.q_rel - lo.q_rel
        t_star = 0.5 * (lo.t + hi.t)
        op = scaled_op_norm(profile_path(t_star).inv_delta, profile_path(t_star).rho)
        transition = Transition(t_star, op, (lo.t, hi.t), "first" if jump > JUMP_TOL else "continuous", jump)
    return ScanResult(rows, transition)


def affine_path(base: NoiseProfile, slope=None, offset=None) -> Callable[[float], NoiseProfile]:
    """t -> offset + t * slope, with ``slope`` defaulting to base.inv_delta."""
    slope = np.asarray(base.inv_delta if slope is None else slope, dtype=float)
    offset = np.zeros_like(slope) if offset is None else np.asarray(offset, dtype=float)

    def path(t):
        return NoiseProfile(base.rho, offset + t * slope)

    return path


def op_norm_path(base: NoiseProfile) -> Callable[[float], NoiseProfile]:
    """Path parametrized directly by the scaled operator norm."""
    unit = scaled_op_norm(base.inv_delta, base.rho)
    if unit <= 0:
        raise ValueError("base profile has zero operator norm")
    return affine_path(base, np.asarray(base.inv_delta) / unit)


__all__ = ["ThresholdReport", "recovery_bounds", "bbp_threshold", "gap_check", "phase_scan", "scan_point",
           "ScanResult", "ScanRow", "Transition", "affine_path", "op_norm_path", "relative_overlap",
           "CSV_HEADER"]
