"""Strict JSON/TOML model-spec documents.

Layout::

    [prior]    kappa, atoms, weights, gaussian, support_bound
    [profile]  rho, inv_delta          (inv_delta optional with a channel)
    [channel]  kind + theta/lambda | delta | table  (or kind + params{...})
    [scan]     family = affine | op-norm | dcsbm-lambda, slope, offset, grid
    [labels]   free-form strings

Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import channels as ch
from .core import ModelError, ModelSpec, NoiseProfile, Prior
from .thresholds import affine_path, op_norm_path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

TOP_KEYS = {"prior", "profile", "channel", "scan", "labels"}
PRIOR_KEYS = {"kappa", "atoms", "weights", "gaussian", "support_bound"}
PROFILE_KEYS = {"rho", "inv_delta"}
SCAN_KEYS = {"family", "slope", "offset", "grid"}
SCAN_FAMILIES = {"affine", "op-norm", "dcsbm-lambda"}


def _strict(section: dict, allowed: set, where: str) -> None:
    if not isinstance(section, dict):
        raise ModelError(f"[{where}] must be a table")
    extra = set(section) - allowed
    if extra:
        raise ModelError(f"unknown field(s) in [{where}]: {sorted(extra)}")


def parse_grid(text: str) -> np.ndarray:
    """'a:b:steps' -> steps equally spaced points from a to b inclusive."""
    try:
        a, b, n = str(text).split(":")
        a, b, n = float(a), float(b), int(n)
    except ValueError:
        raise ModelError(f"grid must read a:b:steps, got {text!r}") from None
    if n < 1 or not (np.isfinite(a) and np.isfinite(b)):
        raise ModelError("grid needs finite ends and at least one step")
    return np.linspace(a, b, n)


def prior_from_dict(d: dict) -> Prior:
    _strict(d, PRIOR_KEYS, "prior")
    if "kappa" not in d:
        raise ModelError("[prior] needs kappa")
    if d.get("gaussian", False):
        if "atoms" in d or "weights" in d:
            raise ModelError("a Gaussian prior takes no atoms or weights")
        return Prior.standard_gaussian(d["kappa"])
    if "atoms" not in d or "weights" not in d:
        raise ModelError("[prior] needs atoms and weights unless gaussian = true")
    return Prior(kappa=d["kappa"], atoms=d["atoms"], weights=d["weights"], support_bound=d.get("support_bound"))


def prior_to_dict(prior: Prior) -> dict:
    if prior.gaussian:
        return {"kappa": prior.kappa, "gaussian": True}
    return {"kappa": prior.kappa, "atoms": prior.atoms.tolist(), "weights": prior.weights.tolist(),
            "support_bound": prior.support_bound, "gaussian": False}


def spec_from_dict(doc: dict) -> ModelSpec:
    _strict(doc, TOP_KEYS, "top level")
    if "prior" not in doc or "profile" not in doc:
        raise ModelError("a model spec needs [prior] and [profile]")
    prior = prior_from_dict(doc["prior"])
    prof = doc["profile"]
    _strict(prof, PROFILE_KEYS, "profile")
    if "rho" not in prof:
        raise ModelError("[profile] needs rho")
    channel = ch.channel_from_dict(doc["channel"], prof["rho"]) if "channel" in doc else None
    if "inv_delta" in prof:
        profile = NoiseProfile(prof["rho"], prof["inv_delta"])
        if channel is not None:
            fisher = ch.fisher_information(channel).inv_delta
            if not np.allclose(fisher, profile.inv_delta, rtol=1e-10, atol=1e-12):
                raise ModelError("inv_delta disagrees with the channel's Fisher information")
    elif channel is not None:
        profile = ch.fisher_information(channel)
    else:
        raise ModelError("[profile] needs inv_delta when no channel is given")
    scan = None
    if "scan" in doc:
        scan = dict(doc["scan"])
        _strict(scan, SCAN_KEYS, "scan")
        if scan.get("family", "affine") not in SCAN_FAMILIES:
            raise ModelError(f"scan family must be one of {sorted(SCAN_FAMILIES)}")
        if scan.get("family") == "dcsbm-lambda" and (channel is None or channel.kind != "dcsbm"):
            raise ModelError("a dcsbm-lambda scan needs a dcsbm channel")
    labels = doc.get("labels", {})
    if not isinstance(labels, dict) or not all(isinstance(v, str) for v in labels.values()):
        raise ModelError("[labels] must map names to strings")
    return ModelSpec(prior, profile, channel, labels, scan)


def spec_to_dict(spec: ModelSpec) -> dict:
    doc = {"prior": prior_to_dict(spec.prior),
           "profile": {"rho": spec.profile.rho.tolist(), "inv_delta": spec.profile.inv_delta.tolist()}}
    if spec.channel is not None:
        doc["channel"] = ch.channel_to_dict(spec.channel)
    if spec.scan is not None:
        doc["scan"] = {k: (np.asarray(v).tolist() if k in ("slope", "offset") else v) for k, v in spec.scan.items()}
    if spec.labels:
        doc["labels"] = dict(spec.labels)
    return doc


def load_spec(path) -> ModelSpec:
    """Parse a .json or .toml model spec.  Raises OSError on I/O problems and
    ModelError on content problems."""
    path = Path(path)
    raw = path.read_bytes()
    try:
        if path.suffix.lower() == ".toml":
            doc = tomllib.loads(raw.decode("utf-8"))
        else:
            doc = json.loads(raw.decode("utf-8"))
    except ValueError as exc:
        raise ModelError(f"cannot parse {path.name}: {exc}") from None
    return spec_from_dict(doc)


def scan_path(spec: ModelSpec) -> Callable[[float], NoiseProfile]:
    """The t -> NoiseProfile family described by [scan]."""
    scan = spec.scan or {}
    family = scan.get("family", "affine")
    if family == "op-norm":
        return op_norm_path(spec.profile)
    if family == "dcsbm-lambda":
        theta = spec.channel.params["theta"]
        rho = spec.profile.rho
        return lambda t: ch.fisher_information(ch.dcsbm_channel(theta, t, rho))
    return affine_path(spec.profile, scan.get("slope"), scan.get("offset"))


def scan_grid(spec: ModelSpec, override: Optional[str] = None) -> np.ndarray:
    text = override if override is not None else (spec.scan or {}).get("grid")
    if text is None:
        raise ModelError("no scan grid: pass --grid a:b:steps or set [scan] grid")
    return parse_grid(text)
