"""Rotary position embedding with per-dimension frequency scaling.

Dimension pairs are interleaved: pair ``i`` is ``(x[2i], x[2i+1])`` and is
rotated by ``m / (lambda_i * beta_i)`` where ``beta_i = base ** (2i / d)``.
All angle math is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

LAMBDA_MIN = 0.01


class ShapeError(ValueError):
    """Input vector does not match the configured head dimension."""


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    base: float = 10000.0

    def __post_init__(self) -> None:
        if int(self.head_dim) != self.head_dim or self.head_dim < 4 or self.head_dim % 2:
            raise ValueError(f"head_dim must be an even integer >= 4, got {self.head_dim}")
        if not self.base > 1:
            raise ValueError(f"base must be > 1, got {self.base}")

    @property
    def n_pairs(self) -> int:
        return self.head_dim // 2


@dataclass(frozen=True, eq=False)
class ScalingFactors:
    """Per-pair scaling factors, clamped to ``LAMBDA_MIN`` on construction.

    No ordering constraint is imposed; factors may go up and down across
    dimensions.
    """

    lambdas: np.ndarray
    provenance: str = field(default="custom", compare=False)

    def __post_init__(self) -> None:
        arr = np.asarray(self.lambdas, dtype=np.float64).reshape(-1)
        if arr.size == 0:
            raise ValueError("ScalingFactors cannot be empty")
        if not np.all(np.isfinite(arr)):
            raise ValueError("ScalingFactors must be finite")
        arr = np.maximum(arr, LAMBDA_MIN)
        arr.setflags(write=False)
        object.__setattr__(self, "lambdas", arr)

    @classmethod
    def ones(cls, n: int, provenance: str = "identity") -> "ScalingFactors":
        return cls(np.ones(n), provenance)

    def __len__(self) -> int:
        return self.lambdas.size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ScalingFactors):
            return NotImplemented
        return np.array_equal(self.lambdas, other.lambdas)

    def __hash__(self) -> int:
        return hash(self.lambdas.tobytes())

    def with_values(self, lambdas: Sequence[float], provenance: str | None = None) -> "ScalingFactors":
        return ScalingFactors(np.asarray(lambdas), self.provenance if provenance is None else provenance)

    def tolist(self) -> list[float]:
        return [float(v) for v in self.lambdas]


def _check_factors(cfg: RopeConfig, factors: ScalingFactors) -> None:
    if len(factors) != cfg.n_pairs:
        raise ShapeError(f"expected {cfg.n_pairs} scaling factors for head_dim={cfg.head_dim}, got {len(factors)}")


def base_frequencies(cfg: RopeConfig) -> np.ndarray:
    """``beta_i = base ** (2i/d)`` for ``i = 0 .. d/2 - 1``."""
    i = np.arange(cfg.n_pairs, dtype=np.float64)
    return np.power(float(cfg.base), 2.0 * i / cfg.head_dim)


def rotation_angles(cfg: RopeConfig, factors: ScalingFactors, m) -> np.ndarray:
    """Angles ``m / (lambda_i * beta_i)``.

    ``m`` may be a scalar position (result shape ``(d/2,)``) or an array of
    positions (result shape ``m.shape + (d/2,)``).
    """
    _check_factors(cfg, factors)
    inv = 1.0 / (factors.lambdas * base_frequencies(cfg))
    pos = np.asarray(m, dtype=np.float64)
    return pos[..., None] * inv


def apply_rope(x, m, cfg: RopeConfig, factors: ScalingFactors) -> np.ndarray:
    """Rotate each interleaved pair of ``x`` (last axis of length d) to position ``m``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != cfg.head_dim:
        raise ShapeError(f"expected last dimension {cfg.head_dim}, got {x.shape[-1]}")
    theta = rotation_angles(cfg, factors, m)
    cos, sin = np.cos(theta), np.sin(theta)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty(np.broadcast_shapes(x.shape, theta.shape[:-1] + (cfg.head_dim,)))
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def attention_score(q, k, m, n, cfg: RopeConfig, factors: ScalingFactors) -> float:
    """Dot product of ``q`` rotated to position ``m`` and ``k`` rotated to ``n``."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != (cfg.head_dim,) or k.shape != (cfg.head_dim,):
        raise ShapeError(f"q and k must both have shape ({cfg.head_dim},)")
    return float(apply_rope(q, m, cfg, factors) @ apply_rope(k, n, cfg, factors))
