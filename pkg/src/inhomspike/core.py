"""Domain types shared across the package: priors, block noise profiles,
overlap states, and the hypothesis validators on noise profiles."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

PSD_TOL = -1e-10
SUM_TOL = 1e-12
SYM_TOL = 1e-12


class ModelError(ValueError):
    """Malformed model input (shapes, symmetry, signs, normalisation)."""


class DomainError(ValueError):
    """An argument lies outside the domain where an operation is defined."""


class ConvergenceError(RuntimeError):
    """An iterative solver failed to reach its tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class DivergenceError(ConvergenceError):
    """An iterative solver left the region where its iterates must stay."""


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Prior:
    """Finitely supported signal law on R^kappa, or the standard Gaussian.

    ``atoms`` has shape ``(K, kappa)``.  With ``gaussian=True`` the atoms are
    empty and the prior is N(0, I_kappa), handled in closed form downstream.
    """

    kappa: int
    atoms: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    support_bound: Optional[float] = None
    gaussian: bool = False

    def __post_init__(self):
        if int(self.kappa) != self.kappa or self.kappa < 1:
            raise ModelError(f"kappa must be a positive integer, got {self.kappa!r}")
        object.__setattr__(self, "kappa", int(self.kappa))
        if self.gaussian:
            object.__setattr__(self, "atoms", _frozen(np.zeros((0, self.kappa))))
            object.__setattr__(self, "weights", _frozen(np.zeros(0)))
            object.__setattr__(self, "support_bound", None)
            return
        atoms = np.array(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None] if self.kappa == 1 else atoms[None, :]
        if atoms.ndim != 2 or atoms.shape[1] != self.kappa or atoms.shape[0] == 0:
            raise ModelError(f"atoms must have shape (K, {self.kappa}) with K >= 1")
        weights = np.array(self.weights, dtype=float).ravel()
        if weights.shape[0] != atoms.shape[0]:
            raise ModelError("one weight per atom required")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise ModelError("weights must be finite and nonnegative")
        if abs(weights.sum() - 1.0) > SUM_TOL:
            raise ModelError(f"weights sum to {weights.sum()!r}, not 1")
        largest = float(np.max(np.abs(atoms)))
        bound = largest if self.support_bound is None else float(self.support_bound)
        if bound <= 0:
            bound = 1.0 if largest == 0 else largest
        if largest > bound:
            raise ModelError(f"atom coordinate {largest} exceeds support bound {bound}")
        object.__setattr__(self, "atoms", _frozen(atoms))
        object.__setattr__(self, "weights", _frozen(weights))
        object.__setattr__(self, "support_bound", bound)

    @classmethod
    def standard_gaussian(cls, kappa: int = 1) -> "Prior":
        return cls(kappa=kappa, gaussian=True)

    @classmethod
    def sparse_rademacher(cls, p: float) -> "Prior":
        """P(+1) = P(-1) = p, P(0) = 1 - 2p."""
        if not 0 < p <= 0.5:
            raise ModelError("p must lie in (0, 1/2]")
        if p == 0.5:
            return cls(kappa=1, atoms=[[-1.0], [1.0]], weights=[0.5, 0.5])
        return cls(kappa=1, atoms=[[-1.0], [0.0], [1.0]], weights=[p, 1 - 2 * p, p])

    def mean(self) -> np.ndarray:
        if self.gaussian:
            return np.zeros(self.kappa)
        return self.weights @ self.atoms

    def second_moment(self) -> np.ndarray:
        """E[x x^T]."""
        if self.gaussian:
            return np.eye(self.kappa)
        return np.einsum("k,ki,kj->ij", self.weights, self.atoms, self.atoms)

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        return self.second_moment() - np.outer(mu, mu)

    def is_centered(self, tol: float = 1e-12) -> bool:
        return bool(np.all(np.abs(self.mean()) <= tol))


@dataclass(frozen=True)
class NoiseProfile:
    """Block-constant Fisher information: proportions ``rho`` and the
    symmetric n x n matrix ``inv_delta`` of entries 1/Delta_st."""

    rho: np.ndarray
    inv_delta: np.ndarray

    def __post_init__(self):
        rho = np.array(self.rho, dtype=float).ravel()
        inv = np.array(self.inv_delta, dtype=float)
        if inv.ndim == 0:
            inv = inv.reshape(1, 1)
        n = rho.shape[0]
        if n == 0 or inv.shape != (n, n):
            raise ModelError(f"inv_delta must be {n}x{n} to match rho")
        if not (np.all(np.isfinite(rho)) and np.all(np.isfinite(inv))):
            raise ModelError("profile entries must be finite")
        if np.any(rho <= 0) or np.any(rho > 1):
            raise ModelError("proportions must lie in (0, 1]")
        if abs(rho.sum() - 1.0) > SUM_TOL:
            raise ModelError(f"proportions sum to {rho.sum()!r}, not 1")
        _check_structure(inv)
        object.__setattr__(self, "rho", _frozen(rho))
        object.__setattr__(self, "inv_delta", _frozen(inv))

    @property
    def n(self) -> int:
        return self.rho.shape[0]

    @property
    def delta(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return 1.0 / self.inv_delta

    def coupling(self) -> np.ndarray:
        """Matrix A_st = rho_t / Delta_st, so that Q~ = A Q blockwise."""
        return self.inv_delta * self.rho[None, :]

    def scaled(self, factor: float) -> "NoiseProfile":
        return NoiseProfile(self.rho, factor * self.inv_delta)


def _check_structure(inv: np.ndarray) -> None:
    if np.max(np.abs(inv - inv.T), initial=0.0) > SYM_TOL * max(1.0, np.max(np.abs(inv))):
        raise ModelError("inv_delta is not symmetric")
    if np.any(inv < 0):
        raise ModelError("inv_delta has negative entries")


@dataclass(frozen=True)
class OverlapState:
    """Per-block overlaps ``Q`` (shape (n, kappa, kappa)) and their
    noise-weighted conjugates ``Q_tilde``."""

    Q: np.ndarray
    Q_tilde: np.ndarray

    def __post_init__(self):
        Q = np.array(self.Q, dtype=float)
        Qt = np.array(self.Q_tilde, dtype=float)
        if Q.ndim != 3 or Q.shape[1] != Q.shape[2] or Q.shape != Qt.shape:
            raise ModelError("Q and Q_tilde must both have shape (n, kappa, kappa)")
        object.__setattr__(self, "Q", _frozen(Q))
        object.__setattr__(self, "Q_tilde", _frozen(Qt))

    @classmethod
    def from_Q(cls, Q, profile: NoiseProfile) -> "OverlapState":
        Q = np.asarray(Q, dtype=float)
        if Q.ndim == 1:
            Q = Q[:, None, None]
        return cls(Q, tilde_map(Q, profile))

    @classmethod
    def zeros(cls, n: int, kappa: int) -> "OverlapState":
        z = np.zeros((n, kappa, kappa))
        return cls(z, z)

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def kappa(self) -> int:
        return self.Q.shape[1]

    def is_psd(self, tol: float = PSD_TOL) -> bool:
        return bool(np.all(np.linalg.eigvalsh(_sym(self.Q)) >= tol))

    def is_consistent(self, profile: NoiseProfile, tol: float = 1e-10) -> bool:
        return bool(np.max(np.abs(tilde_map(self.Q, profile) - self.Q_tilde)) <= tol)

    def frobenius(self) -> float:
        return float(np.sqrt(np.sum(self.Q ** 2)))


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def tilde_map(Q, profile: NoiseProfile) -> np.ndarray:
    """Q~_s = sum_t (1/Delta_st) rho_t Q_t."""
    Q = np.asarray(Q, dtype=float)
    if Q.ndim == 1:
        Q = Q[:, None, None]
    if Q.shape[0] != profile.n:
        raise ModelError(f"expected {profile.n} blocks, got {Q.shape[0]}")
    return np.einsum("st,tij->sij", profile.coupling(), Q)


@dataclass(frozen=True)
class ModelSpec:
    prior: Prior
    profile: NoiseProfile
    channel: Optional[object] = None
    labels: Mapping[str, object] = field(default_factory=dict)
    scan: Optional[Mapping[str, object]] = None

    def __post_init__(self):
        ch = self.channel
        if ch is not None and getattr(ch, "n", self.profile.n) != self.profile.n:
            raise ModelError("channel block count does not match profile")


def scaled_op_norm(M, rho) -> float:
    """Largest |eigenvalue| of diag(sqrt rho) M diag(sqrt rho)."""
    M = np.asarray(M, dtype=float)
    r = np.sqrt(np.asarray(rho, dtype=float).ravel())
    if M.shape != (r.size, r.size):
        raise ModelError(f"matrix of shape {M.shape} does not match {r.size} proportions")
    S = r[:, None] * M * r[None, :]
    return float(np.max(np.abs(np.linalg.eigvalsh(_sym(S)))))


@dataclass
class ValidationReport:
    psd: bool
    min_eigenvalue: float
    entry_bound: float
    irreducible: bool
    power: int
    positive_entries: bool
    qve_bound: Optional[float] = None
    reasons: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.reasons

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "psd": self.psd,
            "min_eigenvalue": self.min_eigenvalue,
            "entry_bound": self.entry_bound,
            "irreducible": self.irreducible,
            "power": self.power,
            "positive_entries": self.positive_entries,
            "qve_bound": self.qve_bound,
            "reasons": list(self.reasons),
        }


def validate_noise_profile(profile: NoiseProfile, power: int = 1, qve_probe: bool = False) -> ValidationReport:
    """Check the positivity, boundedness and irreducibility hypotheses.

    Irreducibility is the block form of the QVE lower-bound condition: every
    entry of ``(inv_delta @ diag(rho)) ** power`` must be strictly positive.
    With ``qve_probe`` the report also carries the empirical max |m_s(z)|
    over a probe grid in the upper half-plane.
    """
    if int(power) != power or power < 1:
        raise ModelError("power must be a positive integer")
    inv = np.asarray(profile.inv_delta)
    _check_structure(inv)
    reasons = []
    lam_min = float(np.min(np.linalg.eigvalsh(_sym(inv))))
    psd = lam_min >= PSD_TOL
    if not psd:
        reasons.append(f"inv_delta not PSD: smallest eigenvalue {lam_min:.6g}")
    positive = bool(np.all(inv > 0))
    if not positive:
        reasons.append("inv_delta has zero entries")
    P = np.linalg.matrix_power(inv * profile.rho[None, :], int(power))
    irreducible = bool(np.all(P > 0))
    if not irreducible:
        reasons.append(f"(inv_delta diag(rho))^{int(power)} has non-positive entries")
    bound = None
    if qve_probe and np.any(inv > 0):
        from .spectral import qve_bound

        bound = qve_bound(profile)
    return ValidationReport(
        psd=psd,
        min_eigenvalue=lam_min,
        entry_bound=float(np.max(inv)),
        irreducible=irreducible,
        power=int(power),
        positive_entries=positive,
        qve_bound=bound,
        reasons=reasons,
    )


def discretize_kernel(kernel: Callable[[float, float], float], n: int, rho_fn=None) -> NoiseProfile:
    """Uniform n-block approximation of a continuous inverse-variance kernel
    on [0,1]^2, sampled at block midpoints."""
    if rho_fn is not None:
        raise NotImplementedError("only uniform blocks are supported")
    if int(n) != n or n < 1:
        raise ModelError("block count must be a positive integer")
    n = int(n)
    mids = (np.arange(n) + 0.5) / n
    inv = np.empty((n, n))
    for s, a in enumerate(mids):
        for t, b in enumerate(mids):
            inv[s, t] = kernel(a, b)
    if not np.all(np.isfinite(inv)) or np.any(inv <= 0):
        raise DomainError("kernel must be finite and strictly positive")
    return NoiseProfile(np.full(n, 1.0 / n), inv)


def as_profile(rho: Sequence[float], inv_delta) -> NoiseProfile:
    return NoiseProfile(np.asarray(rho, dtype=float), np.asarray(inv_delta, dtype=float))
