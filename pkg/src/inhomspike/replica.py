"""Replica-symmetric functional, its fixed-point equation, the limiting
free energy and the limiting matrix MMSE."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .core import (
    PSD_TOL,
    DivergenceError,
    DomainError,
    ModelError,
    NoiseProfile,
    OverlapState,
    Prior,
    _sym,
    tilde_map,
)

DEFAULT_NODES = 61
# ±C atoms put poles of tanh-like integrands at distance ~pi/(2 sqrt(Q~)) from the
# real z axis, so 61 nodes lose ~1e-5 accuracy once Q~ ~ 5; one axis is cheap.
SCALAR_NODES = 201
DEFAULT_MC_SAMPLES = 1_000_000
DEFAULT_DAMPING = 0.5
DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 10_000


@dataclass(frozen=True)
class QuadratureRule:
    """Probability-weighted nodes for expectations over z ~ N(0, I_kappa)."""

    kind: str
    nodes: np.ndarray
    weights: np.ndarray
    node_count: Optional[int] = None
    seed: Optional[int] = None

    def __post_init__(self):
        for name in ("nodes", "weights"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def gauss_hermite(cls, kappa: int, node_count: int = DEFAULT_NODES) -> "QuadratureRule":
        if node_count < 1 or node_count % 2 == 0:
            raise ModelError("Gauss-Hermite node count must be odd")
        x, w = np.polynomial.hermite_e.hermegauss(node_count)
        w = w / w.sum()
        grids = np.meshgrid(*([x] * kappa), indexing="ij")
        nodes = np.stack([g.ravel() for g in grids], axis=-1)
        wgrid = np.meshgrid(*([w] * kappa), indexing="ij")
        weights = np.prod(np.stack([g.ravel() for g in wgrid], axis=-1), axis=-1)
        return cls("gauss-hermite-tensor", nodes, weights / weights.sum(), node_count=node_count)

    @classmethod
    def monte_carlo(cls, kappa: int, samples: int = DEFAULT_MC_SAMPLES, seed: int = 0) -> "QuadratureRule":
        rng = np.random.Generator(np.random.Philox(seed))
        nodes = rng.standard_normal((samples, kappa))
        return cls("monte-carlo", nodes, np.full(samples, 1.0 / samples), seed=seed)

    @property
    def kappa(self) -> int:
        return self.nodes.shape[1]


@lru_cache(maxsize=32)
def default_rule(kappa: int, node_count: Optional[int] = None, seed: int = 0) -> QuadratureRule:
    """Gauss-Hermite tensor rule for kappa <= 3, Monte Carlo beyond."""
    if kappa <= 3:
        if node_count is None:
            node_count = SCALAR_NODES if kappa == 1 else DEFAULT_NODES
        return QuadratureRule.gauss_hermite(kappa, node_count)
    return QuadratureRule.monte_carlo(kappa, DEFAULT_MC_SAMPLES, seed)


def _rule_for(prior: Prior, quad: Optional[QuadratureRule]) -> QuadratureRule:
    if quad is None:
        return default_rule(prior.kappa)
    if quad.kappa != prior.kappa:
        raise ModelError(f"quadrature is {quad.kappa}-dimensional, prior is {prior.kappa}-dimensional")
    return quad


def psd_sqrt(A: np.ndarray) -> np.ndarray:
    """Principal square root of a (stack of) symmetric PSD matrices."""
    lam, V = np.linalg.eigh(_sym(A))
    if np.any(lam < PSD_TOL * max(1.0, float(np.max(np.abs(lam), initial=0.0)))):
        raise DomainError(f"matrix is not PSD (smallest eigenvalue {lam.min():.3g})")
    r = np.sqrt(np.clip(lam, 0.0, None))
    return np.einsum("...ik,...k,...jk->...ij", V, r, V)


def _as_stack(q_tilde) -> np.ndarray:
    a = np.asarray(q_tilde, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    return a


class _SiteStats:
    """Scalar-channel statistics at a stack of Q~ matrices.

    ``log_z[b]`` is E_{z,x0} ln int exp((Q~x0 + sqrt(Q~) z)^T x - x^T Q~ x / 2) dP0(x),
    ``moment[b]`` is E <x><x>^T and ``cross[b]`` is E x0 <x>^T.
    """

    def __init__(self, q_tilde: np.ndarray, prior: Prior, quad: QuadratureRule):
        qt = _sym(np.asarray(q_tilde, dtype=float))
        root = psd_sqrt(qt)
        if prior.gaussian:
            self._gaussian(qt, quad)
        else:
            self._finite(qt, root, prior, quad)

    def _finite(self, qt, root, prior, quad):
        keep = prior.weights > 0
        a = prior.atoms[keep]  # (K, k)
        w0 = prior.weights[keep]
        lw = np.log(w0)
        b, k = qt.shape[0], qt.shape[-1]
        drift = np.einsum("bij,kj->bki", qt, a)
        quad_pen = 0.5 * np.einsum("ki,bij,kj->bk", a, qt, a)
        self.log_z = np.zeros(b)
        self.moment = np.zeros((b, k, k))
        self.cross = np.zeros((b, k, k))
        # chunk over quadrature nodes to bound memory for large Monte Carlo rules
        step = max(1, int(4e6 // max(1, b * a.shape[0] ** 2)))
        for lo in range(0, quad.weights.size, step):
            z, wz = quad.nodes[lo:lo + step], quad.weights[lo:lo + step]
            # field h[b, k0, m, :] = Q~ x0_k0 + sqrt(Q~) z_m
            h = drift[:, :, None, :] + np.einsum("bij,mj->bmi", root, z)[:, None, :, :]
            logits = np.einsum("bcmi,ki->bcmk", h, a) - quad_pen[:, None, None, :] + lw
            lz = logsumexp(logits, axis=-1)
            mean = np.einsum("bcmk,ki->bcmi", np.exp(logits - lz[..., None]), a)
            ww = w0[:, None] * wz[None, :]
            self.log_z += np.einsum("cm,bcm->b", ww, lz)
            self.moment += np.einsum("cm,bcmi,bcmj->bij", ww, mean, mean)
            self.cross += np.einsum("cm,ci,bcmj->bij", ww, a, mean)
        self.moment = _sym(self.moment)

    def _gaussian(self, qt, quad):
        k = qt.shape[-1]
        eye = np.eye(k)
        # h = Q~ x0 + sqrt(Q~) z is N(0, Q~^2 + Q~); integrate over h directly
        cov_root = psd_sqrt(_sym(qt @ qt + qt))
        h = np.einsum("bij,mj->bmi", cov_root, quad.nodes)
        prec = qt + eye
        inv = np.linalg.inv(prec)
        _, logdet = np.linalg.slogdet(prec)
        quadform = np.einsum("bmi,bij,bmj->bm", h, inv, h)
        lz = -0.5 * logdet[:, None] + 0.5 * quadform
        mean = np.einsum("bij,bmj->bmi", inv, h)
        w = quad.weights
        self.log_z = lz @ w
        self.moment = _sym(np.einsum("m,bmi,bmj->bij", w, mean, mean))
        # E x0 <x>^T = E x0 h^T (Q~+I)^-1 = Q~ (Q~+I)^-1 for x0 ~ N(0, I)
        self.cross = qt @ inv


def gibbs_moment(q_tilde, prior: Prior, quad: Optional[QuadratureRule] = None) -> np.ndarray:
    """E_{z,x0} <x><x>^T for the scalar Gaussian channel with matrix SNR Q~.

    Accepts a single kappa x kappa matrix or a stack of shape (b, kappa, kappa).
    """
    qt = _as_stack(q_tilde)
    single = qt.ndim == 2
    stack = qt[None] if single else qt
    if stack.shape[-1] != prior.kappa:
        raise ModelError("Q~ dimension does not match the prior")
    out = _SiteStats(stack, prior, _rule_for(prior, quad)).moment
    return out[0] if single else out


def gibbs_cross_moment(q_tilde, prior: Prior, quad: Optional[QuadratureRule] = None) -> np.ndarray:
    """E_{z,x0} x0 <x>^T; equals :func:`gibbs_moment` by the Nishimori identity."""
    qt = _as_stack(q_tilde)
    single = qt.ndim == 2
    stack = qt[None] if single else qt
    out = _SiteStats(stack, prior, _rule_for(prior, quad)).cross
    return out[0] if single else out


def _check_state(Q: OverlapState, profile: NoiseProfile, prior: Prior) -> None:
    if Q.n != profile.n or Q.kappa != prior.kappa:
        raise ModelError(f"overlap state is {Q.n} x {Q.kappa}, model needs {profile.n} x {prior.kappa}")
    if not Q.is_psd():
        raise DomainError("overlaps must be positive semidefinite")


def _coerce(Q, profile: NoiseProfile) -> OverlapState:
    if isinstance(Q, OverlapState):
        return Q
    return OverlapState.from_Q(Q, profile)


def _quadratic_term(Q: np.ndarray, Qt: np.ndarray, profile: NoiseProfile) -> float:
    # sum_{s,t} rho_s rho_t / (4 Delta_st) Tr(Q_s Q_t) = 1/4 sum_s rho_s Tr(Q_s Q~_s)
    return 0.25 * float(np.einsum("s,sij,sji->", profile.rho, Q, Qt))


def phi(Q, profile: NoiseProfile, prior: Prior, quad: Optional[QuadratureRule] = None) -> float:
    """Replica-symmetric functional at the overlap sequence ``Q``."""
    state = _coerce(Q, profile)
    _check_state(state, profile, prior)
    Qt = tilde_map(state.Q, profile)
    stats = _SiteStats(Qt, prior, _rule_for(prior, quad))
    return -_quadratic_term(state.Q, Qt, profile) + float(profile.rho @ stats.log_z)


def phi_gaussian(Q, profile: NoiseProfile) -> float:
    """Closed form of :func:`phi` for the standard Gaussian prior."""
    state = _coerce(Q, profile)
    if not state.is_psd():
        raise DomainError("overlaps must be positive semidefinite")
    Qt = tilde_map(state.Q, profile)
    k = state.kappa
    sign, logdet = np.linalg.slogdet(Qt + np.eye(k))
    if np.any(sign <= 0):
        raise ArithmeticError("Q~ + I is singular")
    entropy = 0.5 * (np.trace(Qt, axis1=1, axis2=2) - logdet)
    return -_quadratic_term(state.Q, Qt, profile) + float(profile.rho @ entropy)


@dataclass(frozen=True)
class FixedPointResult:
    state: OverlapState
    residual: float
    iterations: int
    converged: bool

    def __iter__(self):
        return iter((self.state, self.residual, self.iterations))


def _moment_bound(prior: Prior) -> float:
    if prior.gaussian:
        return float(prior.kappa)
    return prior.kappa * prior.support_bound ** 2


def fixed_point(
    profile: NoiseProfile,
    prior: Prior,
    init,
    damping: float = DEFAULT_DAMPING,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    quad: Optional[QuadratureRule] = None,
) -> FixedPointResult:
    """Damped iteration of Q~_s <- sum_t (rho_t / Delta_st) E<x><x>^T at Q~_t.

    Iterates on Q~ and stops once the largest entry change falls below
    ``tol``.  The returned state has Q_t = gibbs_moment(Q~_t) and Q~ recomputed
    from Q, so the pair is exactly consistent.
    """
    if not 0 < damping <= 1:
        raise ModelError("damping must lie in (0, 1]")
    rule = _rule_for(prior, quad)
    state = _coerce(init, profile)
    _check_state(state, profile, prior)
    A = profile.coupling()
    bound = 10.0 * _moment_bound(prior)
    qt = _sym(state.Q_tilde.copy())
    residual = np.inf
    it = 0
    moments = None
    for it in range(1, int(max_iter) + 1):
        moments = _SiteStats(qt, prior, rule).moment
        if not np.all(np.isfinite(moments)) or np.max(np.abs(moments)) > bound:
            raise DivergenceError("overlap iterates left the admissible region", residual, it)
        target = np.einsum("st,tij->sij", A, moments)
        step = damping * (target - qt)
        qt = _sym(qt + step)
        residual = float(np.max(np.abs(step)))
        if residual < tol:
            break
    moments = _SiteStats(qt, prior, rule).moment
    final = OverlapState(moments, tilde_map(moments, profile))
    return FixedPointResult(final, residual, it, residual < tol)


@dataclass(frozen=True)
class Branch:
    """A converged fixed point and the value of the functional there."""

    start: str
    state: OverlapState
    phi: float
    residual: float
    iterations: int
    converged: bool


@dataclass(frozen=True)
class FreeEnergyResult:
    phi_star: float
    Q_star: OverlapState
    branches: List[Branch]
    local_maxima: List[Branch]

    def __iter__(self):
        return iter((self.phi_star, self.Q_star, self.local_maxima))


def default_starts(profile: NoiseProfile, prior: Prior, eps: float = 1e-4) -> List[tuple]:
    """Near-zero and informative initialisations."""
    k, n = prior.kappa, profile.n
    small = np.broadcast_to(eps * np.eye(k), (n, k, k)).copy()
    informative = np.broadcast_to(prior.second_moment(), (n, k, k)).copy()
    return [
        ("near-zero", OverlapState.from_Q(small, profile)),
        ("informative", OverlapState.from_Q(informative, profile)),
    ]


def _order_key(b: Branch):
    return (-b.phi, tuple(np.round(b.state.Q.ravel(), 14)))


def free_energy(
    profile: NoiseProfile,
    prior: Prior,
    quad: Optional[QuadratureRule] = None,
    starts: Optional[Sequence] = None,
    damping: float = DEFAULT_DAMPING,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    threads: int = 1,
) -> FreeEnergyResult:
    """sup_Q phi(Q) by running the fixed-point iteration from several starts.

    The origin is always a candidate.  ``local_maxima`` lists the distinct
    fixed points reached (deduplicated to 1e-6 in Frobenius norm), highest
    value first.
    """
    rule = _rule_for(prior, quad)
    if starts is None:
        starts = default_starts(profile, prior)
    labelled = [s if isinstance(s, tuple) else (f"start-{i}", s) for i, s in enumerate(starts)]
    if not labelled:
        raise ModelError("at least one start is required")

    def run(item):
        label, init = item
        res = fixed_point(profile, prior, init, damping, max_iter, tol, rule)
        return Branch(label, res.state, phi(res.state, profile, prior, rule), res.residual, res.iterations, res.converged)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            branches = list(pool.map(run, labelled))
    else:
        branches = [run(item) for item in labelled]

    zero = Branch("origin", OverlapState.zeros(profile.n, prior.kappa), 0.0, 0.0, 0, True)
    distinct: List[Branch] = []
    for b in sorted(branches + [zero], key=_order_key):
        if all(np.sqrt(np.sum((b.state.Q - d.state.Q) ** 2)) > 1e-6 for d in distinct):
            distinct.append(b)
    best = distinct[0]
    return FreeEnergyResult(best.phi, best.state, branches, distinct)


def mmse_baseline(prior: Prior) -> float:
    """||E x x^T||_F^2, the error of the trivial estimator."""
    M0 = prior.second_moment()
    return float(np.sum(M0 * M0))


def mmse(Q_star, prior: Prior, profile: NoiseProfile) -> float:
    """Limiting matrix MMSE, B - sum_{s,t} rho_s rho_t Tr(Q_s Q_t), clamped to [0, B]."""
    state = _coerce(Q_star, profile)
    B = mmse_baseline(prior)
    weighted = np.einsum("s,sij->ij", profile.rho, state.Q)
    overlap = float(np.sum(weighted * weighted.T))
    return float(min(max(B - overlap, 0.0), B))


def phi_gradient_fd(state: OverlapState, profile: NoiseProfile, prior: Prior, directions: int = 5,
                    h: float = 1e-5, seed: int = 0, quad: Optional[QuadratureRule] = None) -> np.ndarray:
    """Finite-difference directional derivatives of phi along random
    symmetric unit directions.

    Central differences are used when every Q_s has spectrum above ``h``;
    otherwise the directions are PSD and the second-order one-sided stencil
    (-3 f(0) + 4 f(h) - f(2h)) / 2h is used, since only those perturbations
    stay inside the cone.
    """
    rng = np.random.default_rng(seed)
    rule = _rule_for(prior, quad)
    n, k = state.n, state.kappa
    interior = min(np.linalg.eigvalsh(q).min() for q in state.Q) > h
    base = None if interior else phi(state, profile, prior, rule)
    out = []
    for _ in range(directions):
        G = rng.standard_normal((n, k, k))
        D = _sym(G) if interior else np.einsum("sij,skj->sik", G, G)
        D /= np.sqrt(np.sum(D * D))
        plus = phi(OverlapState.from_Q(state.Q + h * D, profile), profile, prior, rule)
        if interior:
            minus = phi(OverlapState.from_Q(state.Q - h * D, profile), profile, prior, rule)
            out.append((plus - minus) / (2 * h))
        else:
            far = phi(OverlapState.from_Q(state.Q + 2 * h * D, profile), profile, prior, rule)
            out.append((-3 * base + 4 * plus - far) / (2 * h))
    return np.array(out)


def lipschitz_constant(prior: Prior) -> float:
    """3 kappa^2 C^3, the Lipschitz constant of Q~ -> E x0 <x>^T."""
    return 3.0 * prior.kappa ** 2 * prior.support_bound ** 3


__all__ = [
    "QuadratureRule", "default_rule", "psd_sqrt", "gibbs_moment", "gibbs_cross_moment", "phi",
    "phi_gaussian", "fixed_point", "FixedPointResult", "free_energy", "FreeEnergyResult", "Branch",
    "default_starts", "mmse", "mmse_baseline", "phi_gradient_fd", "lipschitz_constant",
]

