"""Output channels, their Fisher information, and the Fisher-score transform
that maps channel data onto the equivalent Gaussian spiked model."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .core import DomainError, ModelError, NoiseProfile


@dataclass(frozen=True)
class TabulatedBlock:
    """Null law of D for one block pair, on a finite grid of D values.

    ``prob`` are the null probabilities P(D | w=0) (or quadrature weights times
    density for continuous D); ``score`` and ``curvature`` are the first and
    second w-derivatives of the log-likelihood at w=0.
    """

    values: np.ndarray
    prob: np.ndarray
    score: np.ndarray
    curvature: np.ndarray

    def __post_init__(self):
        arrs = [np.array(getattr(self, k), dtype=float).ravel() for k in ("values", "prob", "score", "curvature")]
        if len({a.size for a in arrs}) != 1 or arrs[0].size == 0:
            raise ModelError("tabulated channel columns must be nonempty and of equal length")
        if np.any(arrs[1] < 0) or abs(arrs[1].sum() - 1.0) > 1e-10:
            raise ModelError("tabulated null probabilities must be nonnegative and sum to 1")
        for k, a in zip(("values", "prob", "score", "curvature"), arrs):
            a.setflags(write=False)
            object.__setattr__(self, k, a)


@dataclass(frozen=True)
class ChannelFamily:
    """Per-block-pair observation channel P_st(D | w).

    ``kind`` is ``"gaussian"`` (params: delta), ``"dcsbm"`` (params: theta,
    lambda) or ``"custom"`` (params: table keyed by (s, t) with s <= t).
    """

    kind: str
    rho: np.ndarray
    params: Dict[str, object] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.rho)

    def block_table(self, s: int, t: int) -> TabulatedBlock:
        table = self.params["table"]
        return table[(min(s, t), max(s, t))]

    def edge_prob(self, s: int, t: int) -> float:
        th = self.params["theta"]
        return float(th[s] * th[t])


def dcsbm_channel(theta: Sequence[float], lam: float, rho: Sequence[float]) -> ChannelFamily:
    """Dense degree-corrected SBM: P(D=1 | w) = theta_s theta_t + lam * w."""
    theta = np.array(theta, dtype=float).ravel()
    rho = np.array(rho, dtype=float).ravel()
    if theta.shape != rho.shape:
        raise ModelError("one degree parameter per block required")
    if np.any(theta <= 0) or np.any(theta >= 1):
        raise DomainError("degree parameters must lie in (0, 1)")
    if abs(rho.sum() - 1.0) > 1e-12 or np.any(rho <= 0):
        raise ModelError("proportions must be positive and sum to 1")
    theta.setflags(write=False)
    rho.setflags(write=False)
    return ChannelFamily("dcsbm", rho, {"theta": theta, "lambda": float(lam)})


def gaussian_channel(profile: NoiseProfile) -> ChannelFamily:
    """Additive Gaussian noise D = w + sqrt(Delta_st) W, its own reduction."""
    if np.any(profile.inv_delta <= 0):
        raise DomainError("a Gaussian channel needs strictly positive inverse variances")
    delta = 1.0 / np.asarray(profile.inv_delta)
    delta.setflags(write=False)
    return ChannelFamily("gaussian", profile.rho, {"delta": delta})


def custom_channel(table: Dict[Tuple[int, int], TabulatedBlock], rho: Sequence[float]) -> ChannelFamily:
    rho = np.array(rho, dtype=float).ravel()
    n = rho.size
    keyed = {}
    for (s, t), blk in table.items():
        if not (0 <= s < n and 0 <= t < n):
            raise ModelError(f"block pair {(s, t)} out of range for {n} blocks")
        keyed[(min(s, t), max(s, t))] = blk
    missing = [(s, t) for s in range(n) for t in range(s, n) if (s, t) not in keyed]
    if missing:
        raise ModelError(f"custom channel is missing block pairs {missing}")
    return ChannelFamily("custom", rho, {"table": keyed})


def _dcsbm_derivs(D, p, lam):
    D = np.asarray(D, dtype=float)
    score = D * lam / p - (1 - D) * lam / (1 - p)
    curv = -D * lam ** 2 / p ** 2 - (1 - D) * lam ** 2 / (1 - p) ** 2
    return score, curv


def score(channel: ChannelFamily, D, s: int, t: int):
    """d/dw g_st(D, 0)."""
    D = np.asarray(D, dtype=float)
    if channel.kind == "gaussian":
        return D / channel.params["delta"][s, t]
    if channel.kind == "dcsbm":
        if np.any((D != 0) & (D != 1)):
            raise DomainError("DCSBM data must be 0 or 1")
        return _dcsbm_derivs(D, channel.edge_prob(s, t), channel.params["lambda"])[0]
    blk = channel.block_table(s, t)
    return _lookup(blk, D, blk.score)


def curvature(channel: ChannelFamily, D, s: int, t: int):
    """d^2/dw^2 g_st(D, 0)."""
    D = np.asarray(D, dtype=float)
    if channel.kind == "gaussian":
        return np.full(D.shape, -1.0 / channel.params["delta"][s, t])
    if channel.kind == "dcsbm":
        if np.any((D != 0) & (D != 1)):
            raise DomainError("DCSBM data must be 0 or 1")
        return _dcsbm_derivs(D, channel.edge_prob(s, t), channel.params["lambda"])[1]
    blk = channel.block_table(s, t)
    return _lookup(blk, D, blk.curvature)


def log_likelihood(channel: ChannelFamily, D, w, s: int, t: int):
    """g_st(D, w); for tabulated channels the second-order expansion in w."""
    D = np.asarray(D, dtype=float)
    w = np.asarray(w, dtype=float)
    if channel.kind == "gaussian":
        delta = channel.params["delta"][s, t]
        return -(D - w) ** 2 / (2 * delta) - 0.5 * np.log(2 * np.pi * delta)
    if channel.kind == "dcsbm":
        p = channel.edge_prob(s, t) + channel.params["lambda"] * w
        if np.any(p <= 0) or np.any(p >= 1):
            raise DomainError(f"edge probability leaves (0, 1) in block pair {(s, t)}")
        return np.where(D == 1, np.log(p), np.log1p(-p))
    blk = channel.block_table(s, t)
    p0 = _lookup(blk, D, blk.prob)
    return np.log(p0) + _lookup(blk, D, blk.score) * w + 0.5 * _lookup(blk, D, blk.curvature) * w ** 2


def _lookup(blk: TabulatedBlock, D, column):
    D = np.asarray(D, dtype=float)
    order = np.argsort(blk.values)
    vals = blk.values[order]
    idx = np.clip(np.searchsorted(vals, D), 0, vals.size - 1)
    if np.any(vals[idx] != D):
        raise DomainError("data value outside the tabulated support")
    return column[order][idx]


def null_expectation(channel: ChannelFamily, fn, nodes: int = 101) -> np.ndarray:
    """n x n matrix of E_{P_st(D | w=0)}[fn(D, s, t)].

    Gaussian channels use Gauss-Hermite quadrature in D; the other kinds sum
    over their finite support.
    """
    n = channel.n
    out = np.empty((n, n))
    if channel.kind == "gaussian":
        x, wts = np.polynomial.hermite_e.hermegauss(nodes)
        wts = wts / wts.sum()
    for s in range(n):
        for t in range(n):
            if channel.kind == "gaussian":
                D = np.sqrt(channel.params["delta"][s, t]) * x
                out[s, t] = wts @ fn(D, s, t)
            elif channel.kind == "dcsbm":
                p = channel.edge_prob(s, t)
                D = np.array([0.0, 1.0])
                out[s, t] = np.array([1 - p, p]) @ fn(D, s, t)
            else:
                blk = channel.block_table(s, t)
                out[s, t] = blk.prob @ fn(blk.values, s, t)
    return out


def fisher_information(channel: ChannelFamily) -> NoiseProfile:
    """Profile with 1/Delta_st = E_{P(D|w=0)}[(d_w g_st(D,0))^2]."""
    n = channel.n
    if channel.kind == "gaussian":
        inv = 1.0 / np.asarray(channel.params["delta"])
    elif channel.kind == "dcsbm":
        th = channel.params["theta"]
        lam = channel.params["lambda"]
        tt = np.outer(th, th)
        inv = lam ** 2 / tt + lam ** 2 / (1 - tt)
    else:
        inv = null_expectation(channel, lambda D, s, t: score(channel, D, s, t) ** 2)
        if not np.all(np.isfinite(inv)):
            raise ArithmeticError(f"Fisher information is not finite: {inv}")
    if np.all(inv == 0):
        warnings.warn("channel carries no signal: Fisher information vanishes", RuntimeWarning)
    inv = 0.5 * (inv + inv.T)
    return NoiseProfile(channel.rho, inv.reshape(n, n))


def score_transform(channel: ChannelFamily, D, block: Tuple[int, int], scale_by_delta: bool = False):
    """Fisher score d_w g_st(D, 0); times Delta_st when ``scale_by_delta``."""
    s, t = block
    out = score(channel, D, s, t)
    if scale_by_delta:
        inv = fisher_information(channel).inv_delta[s, t]
        if inv == 0:
            raise DomainError(f"block pair {(s, t)} has zero Fisher information")
        out = out / inv
    return out


def null_score_mean(channel: ChannelFamily) -> np.ndarray:
    return null_expectation(channel, lambda D, s, t: score(channel, D, s, t))


def fisher_consistency(channel: ChannelFamily) -> np.ndarray:
    """E[(d_w g)^2 + d_w^2 g] under the null; zero for a genuine likelihood."""
    return null_expectation(
        channel, lambda D, s, t: score(channel, D, s, t) ** 2 + curvature(channel, D, s, t)
    )


def channel_to_dict(channel: ChannelFamily) -> dict:
    if channel.kind == "dcsbm":
        return {"kind": "dcsbm", "theta": channel.params["theta"].tolist(), "lambda": channel.params["lambda"]}
    if channel.kind == "gaussian":
        return {"kind": "gaussian", "delta": np.asarray(channel.params["delta"]).tolist()}
    rows = []
    for (s, t), blk in sorted(channel.params["table"].items()):
        rows.append({"block": [s, t], "values": blk.values.tolist(), "prob": blk.prob.tolist(),
                     "score": blk.score.tolist(), "curvature": blk.curvature.tolist()})
    return {"kind": "custom", "table": rows}


def channel_from_dict(data: dict, rho: Sequence[float]) -> ChannelFamily:
    data = dict(data)
    if "params" in data:
        params = data.pop("params")
        overlap = set(params) & set(data)
        if overlap:
            raise ModelError(f"channel keys given twice: {sorted(overlap)}")
        data.update(params)
    kind = data.pop("kind", None)
    allowed = {"dcsbm": {"theta", "lambda"}, "gaussian": {"delta"}, "custom": {"table"}}
    if kind not in allowed:
        raise ModelError(f"unknown channel kind {kind!r}")
    extra = set(data) - allowed[kind]
    if extra:
        raise ModelError(f"unknown channel fields {sorted(extra)}")
    missing = allowed[kind] - set(data)
    if missing:
        raise ModelError(f"missing channel fields {sorted(missing)}")
    if kind == "dcsbm":
        return dcsbm_channel(data["theta"], data["lambda"], rho)
    if kind == "gaussian":
        delta = np.array(data["delta"], dtype=float)
        if np.any(delta <= 0):
            raise DomainError("Gaussian channel variances must be positive")
        return gaussian_channel(NoiseProfile(rho, 1.0 / delta))
    table = {}
    for row in data["table"]:
        row = dict(row)
        s, t = row.pop("block")
        unknown = set(row) - {"values", "prob", "score", "curvature"}
        if unknown:
            raise ModelError(f"unknown table fields {sorted(unknown)}")
        table[(int(s), int(t))] = TabulatedBlock(row["values"], row["prob"], row["score"], row["curvature"])
    return custom_channel(table, rho)


def max_signal_field(channel: ChannelFamily) -> float:
    """Largest |w| keeping every DCSBM edge probability inside (0, 1)."""
    if channel.kind != "dcsbm":
        return np.inf
    tt = np.outer(channel.params["theta"], channel.params["theta"])
    lam = abs(channel.params["lambda"])
    if lam == 0:
        return np.inf
    return float(min(tt.min(), (1 - tt).min()) / lam)
