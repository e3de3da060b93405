"""Baseline and initial scaling-factor constructors (PI, NTK-aware, YaRN-style).

Also the running-maximum projection used to re-impose monotone factors for
ablation, and the JSON document format for factor vectors.
"""

from __future__ import annotations

import json
import math

import numpy as np

from ._io import atomic_write_text
from .rope import RopeConfig, ScalingFactors, base_frequencies


class InvalidScaleError(ValueError):
    pass


def _check_scale(s: float) -> None:
    if not s >= 1:
        raise InvalidScaleError(f"scale must be >= 1, got {s}")


def pi_factors(d: int, s: float) -> ScalingFactors:
    """Position interpolation: every pair divided by the same ``s``."""
    _check_scale(s)
    if d % 2 or d < 2:
        raise ValueError(f"head dimension must be even, got {d}")
    return ScalingFactors(np.full(d // 2, float(s)), "pi")


def ntk_factors(cfg: RopeConfig, s: float) -> ScalingFactors:
    """Factors implied by enlarging the base to ``base * s**(d/(d-2))``."""
    _check_scale(s)
    d = cfg.head_dim
    i = np.arange(cfg.n_pairs, dtype=np.float64)
    alpha = float(s) ** (d / (d - 2))
    return ScalingFactors(alpha ** (2.0 * i / d), "ntk")


def yarn_factors(
    cfg: RopeConfig,
    s: float,
    trained_context: int,
    ramp_low: float = 1.0,
    ramp_high: float = 32.0,
) -> ScalingFactors:
    """Ramp between no interpolation (short wavelengths) and full ``s``.

    With ``r_i = trained_context / (2*pi*beta_i)`` the number of full turns a
    pair completes inside the trained window, pairs with ``r_i >= ramp_high``
    keep ``lambda_i = 1`` and pairs with ``r_i <= ramp_low`` get ``s``.
    """
    _check_scale(s)
    if not ramp_low < ramp_high:
        raise ValueError(f"ramp_low must be < ramp_high, got {ramp_low} >= {ramp_high}")
    if trained_context <= 0:
        raise ValueError("trained_context must be positive")
    turns = trained_context / (2.0 * math.pi * base_frequencies(cfg))
    gamma = np.clip((turns - ramp_low) / (ramp_high - ramp_low), 0.0, 1.0)
    return ScalingFactors(gamma + (1.0 - gamma) * float(s), "yarn")


def asf_project(factors: ScalingFactors) -> ScalingFactors:
    """Running-maximum projection onto non-decreasing factor vectors."""
    return ScalingFactors(np.maximum.accumulate(factors.lambdas), factors.provenance + "+monotone")


def is_monotone(factors: ScalingFactors) -> bool:
    return bool(np.all(np.diff(factors.lambdas) >= 0))


def factors_to_dict(factors: ScalingFactors) -> dict:
    return {
        "head_dim": 2 * len(factors),
        "lambdas": factors.tolist(),
        "provenance": factors.provenance,
    }


def factors_from_dict(doc: dict) -> ScalingFactors:
    try:
        head_dim = int(doc["head_dim"])
        lambdas = [float(v) for v in doc["lambdas"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed factors document: {exc}") from exc
    if len(lambdas) != head_dim // 2:
        raise ValueError(f"factors document has {len(lambdas)} lambdas for head_dim {head_dim}")
    return ScalingFactors(np.array(lambdas), str(doc.get("provenance", "custom")))


def save_factors(factors: ScalingFactors, path, extra: dict | None = None) -> None:
    doc = factors_to_dict(factors)
    if extra:
        doc.update(extra)
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_factors(path) -> ScalingFactors:
    with open(path, encoding="utf-8") as fh:
        return factors_from_dict(json.load(fh))
