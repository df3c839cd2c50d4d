"""Block quadratic vector equation: limiting spectrum of variance-profile
Wigner matrices and finite-rank outlier locations.

Convention: m_s(z) is the block Stieltjes transform, ``m(z) = int rho(y) /
(y - z) dy``, so ``Im m > 0`` on the upper half-plane and ``m`` is negative
and real to the right of the support.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.integrate import trapezoid
from scipy.optimize import brentq

from .core import ConvergenceError, DomainError, NoiseProfile, Prior

QVE_DAMPING = 0.7
EDGE_THRESHOLD = 1e-6
EDGE_ETAS = (1e-6, 1e-8, 1e-10)
OUTLIER_ETA = 1e-9
OUTLIER_GAP = 1e-4


def _coupling(profile: NoiseProfile) -> np.ndarray:
    return np.asarray(profile.inv_delta) * np.asarray(profile.rho)[None, :]


def _damped(A, z, m, tol, max_iter):
    """Plain damped iteration m <- -1/(z + A m); contractive for large Im z."""
    res = np.inf
    for _ in range(max_iter):
        new = -1.0 / (z[:, None] + m @ A.T)
        step = new - m
        m = m + QVE_DAMPING * step
        res = np.max(np.abs(step)) if step.size else 0.0
        if res < tol:
            break
    return m, res


def _newton(A, z, m, tol, iters=50):
    """Batched Newton on F(m) = 1 + m * (z + A m).  Returns (m, ok mask)."""
    n = A.shape[0]
    eye = np.eye(n)
    ok = np.zeros(len(z), dtype=bool)
    for _ in range(iters):
        s = z[:, None] + m @ A.T
        F = 1.0 + m * s
        res = np.max(np.abs(F), axis=1)
        ok = res < tol
        if ok.all():
            break
        J = eye[None] * s[:, :, None] + m[:, :, None] * A[None]
        try:
            dm = np.linalg.solve(J, -F[..., None])[..., 0]
        except np.linalg.LinAlgError:
            return m, np.zeros(len(z), dtype=bool)
        dm[ok] = 0
        m = m + dm
        if not np.all(np.isfinite(m)):
            return m, np.zeros(len(z), dtype=bool)
    s = z[:, None] + m @ A.T
    res = np.max(np.abs(1.0 + m * s), axis=1)
    return m, res < tol


def _solve_batch(A, z, tol, max_iter, depth=0):
    """Continuation in Im z from a height where the damped iteration is
    contractive down to the requested Im z, Newton-polished at every rung."""
    scale = np.sqrt(max(np.max(A.sum(axis=1)), 1e-300))
    eta_t = z.imag
    eta0 = np.maximum(eta_t, 4.0 * scale + 1.0)
    z0 = z.real + 1j * eta0
    m, res = _damped(A, z0, -1.0 / np.repeat(z0[:, None], A.shape[0], axis=1), tol, max_iter)
    if res > tol:
        raise ConvergenceError("QVE damped iteration did not converge", res, max_iter)
    ratio = np.log10(eta0 / eta_t)
    steps = int(np.ceil(2 * (2 ** depth) * np.max(ratio))) if ratio.size else 0
    for k in range(1, steps + 1):
        zk = z.real + 1j * eta0 * (eta_t / eta0) ** (k / steps)
        new, ok = _newton(A, zk, m, tol)
        ok &= np.all(new.imag > -1e-14 * np.abs(new), axis=1)
        if not ok.all():
            if depth >= 6:
                bad = np.flatnonzero(~ok)[0]
                raise ConvergenceError(f"QVE continuation failed at z={zk[bad]!r}")
            new[~ok] = _solve_batch(A, zk[~ok], tol, max_iter, depth + 1)
        m = new
    return m


def qve_solve(profile: NoiseProfile, z, tol: float = 1e-13, max_iter: int = 10_000) -> np.ndarray:
    """Block QVE solution m_s(z) for scalar or array ``z`` with Im z > 0.

    Returns an array of shape ``np.shape(z) + (n,)``.
    """
    z = np.asarray(z, dtype=complex)
    if np.any(z.imag <= 0):
        raise DomainError("the QVE is solved on the upper half-plane only")
    A = _coupling(profile)
    flat = z.ravel()
    m = _solve_batch(A, flat, tol, max_iter) if flat.size else np.empty((0, A.shape[0]), complex)
    return m.reshape(z.shape + (A.shape[0],))


def stieltjes(profile: NoiseProfile, z) -> np.ndarray:
    """sum_s rho_s m_s(z)."""
    return qve_solve(profile, z) @ np.asarray(profile.rho)


def density(profile: NoiseProfile, x, eta: float = 1e-10) -> np.ndarray:
    """(1/pi) Im sum_s rho_s m_s(x + i eta) on the grid ``x``."""
    if eta <= 0:
        raise DomainError("eta must be positive")
    x = np.asarray(x, dtype=float)
    return np.maximum(stieltjes(profile, x + 1j * eta).imag / np.pi, 0.0)


def spectral_radius_bound(profile: NoiseProfile) -> float:
    """2 sqrt(max row sum of inv_delta diag(rho)), which contains the support."""
    return float(2.0 * np.sqrt(np.max(_coupling(profile).sum(axis=1))))


def qve_bound(profile: NoiseProfile, points: int = 201) -> float:
    """Empirical max_s |m_s(z)| over a probe grid in the upper half-plane."""
    L = spectral_radius_bound(profile) + 1.0
    x = np.linspace(-L, L, points)
    z = (x[None, :] + 1j * np.array([1e-3, 1e-2, 1e-1, 1.0])[:, None]).ravel()
    return float(np.max(np.abs(qve_solve(profile, z))))


@dataclass
class SpectralSolution:
    x: np.ndarray
    eta: float
    m: np.ndarray
    density: np.ndarray
    support: List[tuple] = field(default_factory=list)

    def mass(self) -> float:
        return float(trapezoid(self.density, self.x))


def spectrum(profile: NoiseProfile, x, eta: float = 1e-10) -> SpectralSolution:
    x = np.asarray(x, dtype=float)
    m = qve_solve(profile, x + 1j * eta)
    dens = np.maximum((m @ np.asarray(profile.rho)).imag / np.pi, 0.0)
    return SpectralSolution(x, eta, m, dens)


def _density_at(profile, x, etas):
    return float(density(profile, np.array([x]), etas[-1])[0])


def support_edges(profile: NoiseProfile, grid=None, eta_ladder: Sequence[float] = EDGE_ETAS,
                  threshold: float = EDGE_THRESHOLD, xtol: float = 1e-8) -> List[tuple]:
    """Maximal intervals where the density exceeds ``threshold``.

    The density is evaluated at the smallest height of ``eta_ladder`` (reached
    by continuation through the larger ones), and every interval endpoint is
    bisected to ``xtol``.
    """
    if np.max(_coupling(profile)) <= 0:
        raise ValueError("zero profile has no continuous spectrum")
    etas = sorted(eta_ladder, reverse=True)
    if grid is None:
        L = spectral_radius_bound(profile) * 1.05 + 0.1
        grid = np.linspace(-L, L, 2001)
    grid = np.asarray(sorted(grid), dtype=float)
    inside = density(profile, grid, etas[-1]) > threshold
    if not inside.any():
        raise ValueError("no spectral support found on the grid")
    if inside[0] or inside[-1]:
        raise DomainError("coarse grid does not cover the support")

    def refine(a, b, rising):
        # invariant: the density at a is on the outside side when rising
        while b - a > xtol:
            mid = 0.5 * (a + b)
            if (_density_at(profile, mid, etas) > threshold) == rising:
                b = mid
            else:
                a = mid
        return 0.5 * (a + b)

    intervals = []
    start = None
    for i in range(1, grid.size):
        if inside[i] and not inside[i - 1]:
            start = float(refine(grid[i - 1], grid[i], True))
        elif inside[i - 1] and not inside[i]:
            intervals.append((start, float(refine(grid[i - 1], grid[i], False))))
    return intervals


@dataclass
class OutlierReport:
    """Per signal direction j: spike matrix M^j, its eigenpairs, and the
    predicted outliers above the bulk."""

    theta: np.ndarray
    matrices: List[np.ndarray]
    gammas: List[np.ndarray]
    vectors: List[np.ndarray]
    outliers: List[dict]
    upper_edge: float
    degenerate: bool = False

    @property
    def has_outlier(self) -> bool:
        return bool(self.outliers)

    def top(self) -> Optional[float]:
        return max((o["lambda"] for o in self.outliers), default=None)


def _real_m(profile, lam, eta=OUTLIER_ETA):
    return qve_solve(profile, np.asarray(lam, dtype=float) + 1j * eta).real


def outlier_predict(profile: NoiseProfile, prior: Prior, second_moment=None, grid=None,
                    edges: Optional[List[tuple]] = None) -> OutlierReport:
    """Outliers of the effective matrix (1/Delta) . Y / sqrt(N).

    For every eigenvalue theta^j of E[x x^T] the limiting spike is
    M_st = theta^j sqrt(rho_s rho_t) / Delta_st; an outlier sits at each
    lambda above the bulk with det(diag(1/gamma) + W^T diag(m(lambda)) W) = 0,
    where (gamma, W) are the nonzero eigenpairs of M.
    """
    M0 = prior.second_moment() if second_moment is None else np.asarray(second_moment, dtype=float)
    theta = np.linalg.eigvalsh(0.5 * (M0 + M0.T))[::-1]
    rho = np.asarray(profile.rho)
    base = np.sqrt(np.outer(rho, rho)) * np.asarray(profile.inv_delta)
    if edges is None:
        edges = support_edges(profile)
    upper = max(b for _, b in edges)

    mats, gams, vecs, found = [], [], [], []
    degenerate = False
    for j, th in enumerate(theta):
        M = th * base
        g, W = np.linalg.eigh(M)
        order = np.argsort(g)[::-1]
        g, W = g[order], W[:, order]
        mats.append(M)
        gams.append(g)
        vecs.append(W)
        keep = np.abs(g) > 1e-12 * max(1.0, np.max(np.abs(g)))
        if not np.any(g[keep] > 0):
            continue
        gk, Wk = g[keep], W[:, keep]

        def F(lam, gk=gk, Wk=Wk):
            m = _real_m(profile, lam)
            return float(np.linalg.det(np.diag(1.0 / gk) + Wk.T @ (m[..., None] * Wk)))

        if grid is None:
            hi = upper + float(np.sum(np.abs(gk))) + 1.0
            lam = upper + OUTLIER_GAP + (hi - upper - OUTLIER_GAP) * np.linspace(0, 1, 400) ** 2
        else:
            lam = np.asarray(sorted(grid), dtype=float)
            if lam[0] <= upper:
                raise DomainError("outlier grid intersects the spectral support")
        mm = _real_m(profile, lam)
        vals = np.array([np.linalg.det(np.diag(1.0 / gk) + Wk.T @ (mi[:, None] * Wk)) for mi in mm])
        roots = []
        for i in range(lam.size - 1):
            if vals[i] == 0:
                roots.append(lam[i])
            elif vals[i] * vals[i + 1] < 0:
                roots.append(brentq(F, lam[i], lam[i + 1], xtol=1e-12, rtol=1e-14))
        pos = np.sort(gk[gk > 0])[::-1]
        for k, r in enumerate(sorted(roots, reverse=True)):
            h = 1e-6 * max(1.0, abs(r))
            slope = (F(r + h) - F(r - h)) / (2 * h)
            if abs(slope) < 1e-8:
                degenerate = True
                warnings.warn(f"degenerate outlier root at {r!r}", RuntimeWarning)
            found.append({"direction": j, "gamma": float(pos[min(k, pos.size - 1)]), "lambda": float(r)})
    return OutlierReport(theta, mats, gams, vecs, found, upper, degenerate)


def _fmt(v):
    return repr(float(v))


def density_csv(x, rho) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "rho"])
    for a, b in zip(x, rho):
        w.writerow([_fmt(a), _fmt(b)])
    return buf.getvalue()


def edges_csv(intervals) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["interval", "lower", "upper"])
    for i, (a, b) in enumerate(intervals):
        w.writerow([i, _fmt(a), _fmt(b)])
    return buf.getvalue()


def outliers_csv(report: OutlierReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["direction", "gamma", "lambda"])
    for o in report.outliers:
        w.writerow([o["direction"], _fmt(o["gamma"]), _fmt(o["lambda"])])
    return buf.getvalue()


__all__ = ["qve_solve", "stieltjes", "density", "spectrum", "SpectralSolution", "support_edges", "qve_bound",
           "outlier_predict", "OutlierReport", "density_csv", "edges_csv", "outliers_csv",
           "spectral_radius_bound"]
