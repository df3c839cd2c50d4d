"""Finite-N Monte Carlo for the inhomogeneous spiked model and its channels.

Randomness comes from numpy's Philox counter-based generator.  Every matrix
row owns a stream keyed by ``SeedSequence(seed, spawn_key=(tag, row))`` so
rows can be filled in any order, or concurrently, with identical results.
Stream tags: 0 signal, 1 Gaussian noise, 2 channel draws, 3 matched Gaussian
noise.
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.sparse.linalg import eigsh
from scipy.stats import ks_2samp

from . import channels as ch
from .core import DomainError, ModelError, NoiseProfile, Prior

SIGNAL, NOISE, CHANNEL, MATCHED = 0, 1, 2, 3
THREADS_ENV = "INHOMSPIKE_THREADS"


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def block_sizes(rho: Sequence[float], N: int) -> np.ndarray:
    """round(rho_s N) with a largest-remainder correction so sizes sum to N."""
    rho = np.asarray(rho, dtype=float)
    raw = rho * N
    sizes = np.floor(raw).astype(int)
    short = N - sizes.sum()
    order = np.argsort(-(raw - sizes), kind="stable")
    sizes[order[:short]] += 1
    return sizes


@dataclass(frozen=True)
class SimConfig:
    N: int
    seed: int = 0
    rho: Tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ModelError("N must be a positive integer")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ModelError("seed must be an unsigned 64-bit integer")
        object.__setattr__(self, "rho", tuple(float(r) for r in np.ravel(self.rho)))

    @property
    def sizes(self) -> np.ndarray:
        return block_sizes(self.rho, self.N)

    @property
    def labels(self) -> np.ndarray:
        """Block index of each coordinate (contiguous blocks)."""
        return np.repeat(np.arange(len(self.rho)), self.sizes)

    def stream(self, tag: int, row: int = 0) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(tag), int(row)))
        return np.random.Generator(np.random.Philox(ss))


def sample_signal(prior: Prior, config: SimConfig) -> np.ndarray:
    """N x kappa matrix of i.i.d. prior draws."""
    rng = config.stream(SIGNAL)
    if prior.gaussian:
        return rng.standard_normal((config.N, prior.kappa))
    idx = rng.choice(len(prior.weights), size=config.N, p=np.asarray(prior.weights))
    return np.asarray(prior.atoms)[idx].astype(float)


def _lower(config: SimConfig, tag: int, draw: str) -> np.ndarray:
    """Symmetric matrix whose lower triangle (diagonal included) row i comes
    from stream (tag, i)."""
    N = config.N
    out = np.empty((N, N))

    def fill(rows):
        for i in rows:
            rng = config.stream(tag, i)
            out[i, : i + 1] = rng.standard_normal(i + 1) if draw == "normal" else rng.random(i + 1)

    threads = _threads()
    if threads > 1:
        chunks = np.array_split(np.arange(N), threads)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, chunks))
    else:
        fill(range(N))
    iu = np.triu_indices(N, 1)
    out[iu] = out.T[iu]
    return out


def _block_matrix(config: SimConfig, values: np.ndarray) -> np.ndarray:
    lab = config.labels
    return np.asarray(values)[lab[:, None], lab[None, :]]


def _check_signal(signal, config):
    signal = np.asarray(signal, dtype=float)
    if signal.ndim == 1:
        signal = signal[:, None]
    if signal.shape[0] != config.N:
        raise ModelError(f"signal has {signal.shape[0]} rows, config expects {config.N}")
    return signal


def sample_spiked(profile: NoiseProfile, signal, config: SimConfig) -> np.ndarray:
    """Y = sqrt(Delta) . W + x x^T / sqrt(N) off the diagonal; the diagonal is
    pure noise sqrt(Delta_ss) W_ii."""
    if tuple(profile.rho) != config.rho:
        raise ModelError("profile proportions do not match the configuration")
    x = _check_signal(signal, config)
    inv = np.asarray(profile.inv_delta)
    if np.any(inv <= 0):
        raise DomainError("finite noise variances need strictly positive inv_delta")
    Y = _lower(config, NOISE, "normal")
    Y *= _block_matrix(config, 1.0 / np.sqrt(inv))
    spike = (x @ x.T) / np.sqrt(config.N)
    np.fill_diagonal(spike, 0.0)
    Y += spike
    return Y


def sample_channel_data(channel: ch.ChannelFamily, signal, config: SimConfig) -> np.ndarray:
    """Independent channel draws at w = x_i . x_j / sqrt(N) for i < j; the
    diagonal is drawn from the null channel (w = 0)."""
    if tuple(channel.rho) != config.rho:
        raise ModelError("channel proportions do not match the configuration")
    x = _check_signal(signal, config)
    w = (x @ x.T) / np.sqrt(config.N)
    np.fill_diagonal(w, 0.0)
    lab = config.labels
    if channel.kind == "gaussian":
        D = _lower(config, CHANNEL, "normal")
        D *= _block_matrix(config, np.sqrt(channel.params["delta"]))
        return D + w
    U = _lower(config, CHANNEL, "uniform")
    n = channel.n
    out = np.empty_like(U)
    for s in range(n):
        rs = lab == s
        for t in range(n):
            ct = lab == t
            ws = w[np.ix_(rs, ct)]
            us = U[np.ix_(rs, ct)]
            if channel.kind == "dcsbm":
                p = channel.edge_prob(s, t) + channel.params["lambda"] * ws
                if np.any(p < 0) or np.any(p > 1):
                    raise DomainError(f"edge probability outside [0, 1] in block pair {(s, t)}")
                out[np.ix_(rs, ct)] = (us < p).astype(float)
            else:
                out[np.ix_(rs, ct)] = _sample_table(channel.block_table(s, t), ws, us, (s, t))
    return out


def _sample_table(blk: ch.TabulatedBlock, w, u, pair):
    # second-order tilt of the null law: P0 (1 + s w + (s^2 + c) w^2 / 2)
    base = blk.prob[None, :] * (1 + blk.score[None, :] * w.ravel()[:, None]
                                + 0.5 * (blk.score ** 2 + blk.curvature)[None, :] * w.ravel()[:, None] ** 2)
    if np.any(base < 0):
        raise DomainError(f"tabulated channel probability negative in block pair {pair}")
    cdf = np.cumsum(base, axis=1)
    cdf /= cdf[:, -1:]
    idx = (u.ravel()[:, None] > cdf).sum(axis=1)
    return blk.values[np.minimum(idx, blk.values.size - 1)].reshape(w.shape)


def effective_matrix(channel: ch.ChannelFamily, data, config: SimConfig, scale_by_delta: bool = False) -> np.ndarray:
    """Entrywise Fisher score of the data, divided by sqrt(N)."""
    data = np.asarray(data, dtype=float)
    lab = config.labels
    out = np.empty_like(data)
    for s in range(channel.n):
        rs = lab == s
        for t in range(channel.n):
            ct = lab == t
            out[np.ix_(rs, ct)] = ch.score_transform(channel, data[np.ix_(rs, ct)], (s, t), scale_by_delta)
    return out / np.sqrt(config.N)


def weighted_spiked(profile: NoiseProfile, Y, config: SimConfig) -> np.ndarray:
    """(1/Delta) . Y / sqrt(N), the Gaussian model's own effective matrix."""
    return _block_matrix(config, np.asarray(profile.inv_delta)) * np.asarray(Y) / np.sqrt(config.N)


def matched_gaussian(profile: NoiseProfile, signal, config: SimConfig) -> np.ndarray:
    """(1/Delta) . Y^Delta / sqrt(N) with noise independent of any channel draw."""
    x = _check_signal(signal, config)
    inv = np.asarray(profile.inv_delta)
    W = _lower(config, MATCHED, "normal")
    W *= _block_matrix(config, np.sqrt(inv))
    spike = (x @ x.T) / np.sqrt(config.N)
    np.fill_diagonal(spike, 0.0)
    W += _block_matrix(config, inv) * spike
    return W / np.sqrt(config.N)


def empirical_spectrum(matrix) -> np.ndarray:
    """All eigenvalues, ascending."""
    return np.linalg.eigvalsh(np.asarray(matrix, dtype=float))


def top_eigenvalues(matrix, k: int = 1) -> np.ndarray:
    """Largest k eigenvalues by Lanczos, ascending; deterministic start vector."""
    A = np.asarray(matrix, dtype=float)
    if A.shape[0] <= max(50, 4 * k):
        return empirical_spectrum(A)[-k:]
    v0 = np.ones(A.shape[0]) / np.sqrt(A.shape[0])
    vals = eigsh(A, k=k, which="LA", v0=v0, tol=1e-12, return_eigenvectors=False)
    return np.sort(vals)


def ks_distance(spec1, spec2) -> float:
    """Kolmogorov-Smirnov distance between two empirical spectral measures."""
    a = np.asarray(spec1, dtype=float).ravel()
    b = np.asarray(spec2, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("spectra must be nonempty")
    return float(ks_2samp(a, b, method="asymp").statistic)


def outlier_margin(N: int) -> float:
    return max(0.02, 2.0 * N ** (-2.0 / 3.0))


def top_outlier(spectrum, support_edges, N: Optional[int] = None):
    """(value, gap) of the largest eigenvalue if it clears the upper edge by
    max(0.02, 2 N^{-2/3}); else None."""
    spectrum = np.asarray(spectrum, dtype=float)
    N = spectrum.size if N is None else N
    upper = max(b for _, b in support_edges) if np.ndim(support_edges) else float(support_edges)
    top = float(np.max(spectrum))
    gap = top - upper
    return (top, gap) if gap > outlier_margin(N) else None


def dump_matrix(matrix, path) -> None:
    """int64 N, then the row-major lower triangle (diagonal included) as
    little-endian float64."""
    A = np.asarray(matrix, dtype="<f8")
    N = A.shape[0]
    with open(path, "wb") as f:
        f.write(struct.pack("<q", N))
        f.write(A[np.tril_indices(N)].tobytes())


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as f:
        (N,) = struct.unpack("<q", f.read(8))
        tri = np.frombuffer(f.read(), dtype="<f8")
    if tri.size != N * (N + 1) // 2:
        raise ValueError("truncated matrix dump")
    A = np.zeros((N, N))
    A[np.tril_indices(N)] = tri
    return A + np.tril(A, -1).T


__all__ = ["SimConfig", "block_sizes", "sample_signal", "sample_spiked", "sample_channel_data",
           "effective_matrix", "weighted_spiked", "matched_gaussian", "empirical_spectrum", "top_eigenvalues", "ks_distance",
           "top_outlier", "outlier_margin", "dump_matrix", "load_matrix"]
