"""Divide-and-conquer incremental search (DCIS) over RoPE scaling factors.

The factor vector (length ``F = head_dim / 2``) is split into two halves,
then quarters, and so on down to single factors.  For each segment a
uniform lattice of ``C`` additive increments is evaluated against an
objective; the best increment is applied to the whole segment and the best
``ceil(C/3)`` increments, widened by one lattice step on each side, become
the sampling range of both child segments.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np

from ._io import atomic_write_text
from .rope import ScalingFactors

log = logging.getLogger(__name__)

THREADS_ENV = "DCIS_NUM_THREADS"


class SearchConfigError(ValueError):
    pass


class UnsupportedDimensionError(ValueError):
    pass


class ObjectiveError(RuntimeError):
    """An objective evaluation failed; carries the step context and the trace so far."""

    def __init__(self, message: str, *, segment=None, increment=None, trace=None):
        super().__init__(message)
        self.segment = segment
        self.increment = increment
        self.trace = trace


class Segment(NamedTuple):
    start: int
    width: int

    @property
    def stop(self) -> int:
        return self.start + self.width

    def children(self) -> tuple["Segment", "Segment"]:
        half = self.width // 2
        return Segment(self.start + half, half), Segment(self.start, half)


@dataclass(frozen=True)
class SegmentSchedule:
    layers: tuple[tuple[Segment, ...], ...]

    def __iter__(self) -> Iterator[tuple[int, Segment]]:
        for depth, layer in enumerate(self.layers, start=1):
            for seg in layer:
                yield depth, seg

    def __len__(self) -> int:
        return sum(len(layer) for layer in self.layers)


def segment_schedule(n_factors: int) -> SegmentSchedule:
    """Halving schedule over ``n_factors`` factors, high indices first in every layer."""
    F = int(n_factors)
    if F < 2 or F & (F - 1):
        raise UnsupportedDimensionError(f"number of factors must be a power of two >= 2, got {n_factors}")
    layers = []
    width = F // 2
    while width >= 1:
        layers.append(tuple(Segment(start, width) for start in range(F - width, -1, -width)))
        width //= 2
    return SegmentSchedule(tuple(layers))


def incremental_values(value_range: Sequence[float], C: int) -> np.ndarray:
    l, r = float(value_range[0]), float(value_range[1])
    if C < 2:
        raise SearchConfigError(f"need at least 2 increments, got {C}")
    if l > r:
        raise SearchConfigError(f"empty range [{l}, {r}]")
    step = (r - l) / (C - 1)
    return np.array([l + step * k for k in range(C)])


def apply_increment(factors: ScalingFactors, segment: Segment, v: float) -> ScalingFactors:
    lam = np.array(factors.lambdas)
    lam[segment.start : segment.stop] += v
    return factors.with_values(lam)


@dataclass
class Objective:
    """Scalar objective over scaling factors; lower is better.

    ``fn`` must be deterministic and safe to call from several threads at once.
    """

    fn: Callable[[ScalingFactors], float]
    name: str = "custom"
    target_length: int | None = None

    def __call__(self, factors: ScalingFactors) -> float:
        return float(self.fn(factors))


def make_objective(kind: str, **params) -> Objective:
    """Build an objective.

    ``separable_quadratic`` takes ``target``; ``custom`` takes ``fn`` (and an
    optional ``name``); ``toy_ppl`` takes ``model``, ``samples`` and
    ``target_length``.
    """
    if kind == "separable_quadratic":
        if "target" not in params:
            raise SearchConfigError("separable_quadratic needs a target vector")
        target = np.asarray(params["target"], dtype=np.float64)

        def quad(f: ScalingFactors) -> float:
            return float(np.sum((f.lambdas - target) ** 2))

        return Objective(quad, "separable_quadratic", params.get("target_length"))
    if kind == "custom":
        if not callable(params.get("fn")):
            raise SearchConfigError("custom objective needs a callable fn")
        return Objective(params["fn"], params.get("name", "custom"), params.get("target_length"))
    if kind == "toy_ppl":
        from .evals import perplexity

        missing = [k for k in ("model", "samples", "target_length") if params.get(k) is None]
        if missing:
            raise SearchConfigError(f"toy_ppl objective missing {', '.join(missing)}")
        model, samples, length = params["model"], list(params["samples"]), int(params["target_length"])
        if not samples:
            raise SearchConfigError("toy_ppl objective needs at least one evaluation sample")

        def ppl(f: ScalingFactors) -> float:
            return perplexity(model, f, samples, length)

        return Objective(ppl, "toy_ppl", length)
    raise SearchConfigError(f"unknown objective kind {kind!r}")


def _default_workers() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise SearchConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def evaluate_segment(
    objective: Callable[[ScalingFactors], float],
    factors: ScalingFactors,
    segment: Segment,
    values: Sequence[float],
    executor: ThreadPoolExecutor | None = None,
) -> np.ndarray:
    """Score ``objective`` with each increment added to the factors of ``segment``."""
    segment = Segment(*segment)
    if segment.start < 0 or segment.width < 1 or segment.stop > len(factors):
        raise ValueError(f"segment {tuple(segment)} outside factor vector of length {len(factors)}")
    candidates = [apply_increment(factors, segment, float(v)) for v in values]

    def run(k: int) -> float:
        try:
            return float(objective(candidates[k]))
        except Exception as exc:
            raise ObjectiveError(
                f"objective failed on segment start={segment.start} width={segment.width} "
                f"increment={float(values[k])!r}: {exc}",
                segment=segment,
                increment=float(values[k]),
            ) from exc

    if executor is None:
        return np.array([run(k) for k in range(len(candidates))])
    return np.array(list(executor.map(run, range(len(candidates)))))


class Selection(NamedTuple):
    chosen: float | None
    top: tuple[float, ...]
    discarded: tuple[bool, ...]


def select_increments(values: Sequence[float], scores: Sequence[float], C: int, threshold: float) -> Selection:
    """Best increment and the top ``ceil(C/3)`` among those scoring at most ``threshold``.

    Ties go to the smallest ``|v|``, then to the more negative ``v``.
    """
    if len(values) != C or len(scores) != C:
        raise ValueError(f"expected {C} values and scores, got {len(values)} and {len(scores)}")
    discarded = tuple(not (math.isfinite(s) and s <= threshold) for s in scores)
    kept = [(float(s), abs(float(v)), float(v)) for v, s, d in zip(values, scores, discarded) if not d]
    if not kept:
        return Selection(None, (), discarded)
    kept.sort()
    top = tuple(v for _, _, v in kept[: math.ceil(C / 3)])
    return Selection(top[0], top, discarded)


def update_step(
    factors: ScalingFactors,
    segment: Segment,
    values: Sequence[float],
    scores: Sequence[float],
    C: int,
    threshold: float,
    parent_range: Sequence[float],
) -> tuple[ScalingFactors, tuple[float, float]]:
    """Apply the best increment and derive the range handed to both child segments."""
    sel = select_increments(values, scores, C, threshold)
    if sel.chosen is None:
        return factors, (float(parent_range[0]), float(parent_range[1]))
    step = (float(values[-1]) - float(values[0])) / (C - 1)
    child = (min(sel.top) - step, max(sel.top) + step)
    return apply_increment(factors, Segment(*segment), sel.chosen), child


@dataclass
class SearchConfig:
    initial_factors: ScalingFactors
    initial_range: tuple[float, float] = (-5.0, 5.0)
    increments_per_segment: int = 10
    discard_threshold: float = 100.0
    target_length: int = 256
    objective_id: str = "toy_ppl"
    random_seed: int = 0
    n_workers: int | None = None

    def __post_init__(self) -> None:
        l, r = self.initial_range
        self.initial_range = (float(l), float(r))
        if self.initial_range[0] > self.initial_range[1]:
            raise SearchConfigError(f"initial range lower bound exceeds upper: {self.initial_range}")
        if int(self.increments_per_segment) != self.increments_per_segment or self.increments_per_segment < 3:
            raise SearchConfigError(f"increments_per_segment must be an integer >= 3, got {self.increments_per_segment}")
        if self.target_length <= 0:
            raise SearchConfigError("target_length must be positive")

    def to_dict(self) -> dict:
        return {
            "initial_range": list(self.initial_range),
            "increments_per_segment": self.increments_per_segment,
            "discard_threshold": self.discard_threshold,
            "initial_factors": self.initial_factors.tolist(),
            "initial_provenance": self.initial_factors.provenance,
            "target_length": self.target_length,
            "objective_id": self.objective_id,
            "random_seed": self.random_seed,
        }


@dataclass
class StepRecord:
    layer: int
    segment_start: int
    width: int
    range: list[float]
    values: list[float]
    scores: list[float]
    discarded: list[bool]
    chosen: float | None
    child_range: list[float]
    cumulative_evals: int
    objective: float | None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "StepRecord":
        return cls(**json.loads(line))


@dataclass
class SearchTrace:
    steps: list[StepRecord] = field(default_factory=list)

    @property
    def total_evaluations(self) -> int:
        return self.steps[-1].cumulative_evals if self.steps else 0

    @property
    def best_objective(self) -> list[float | None]:
        return [s.objective for s in self.steps]

    @property
    def final_objective(self) -> float | None:
        return self.steps[-1].objective if self.steps else None

    def to_jsonl(self) -> str:
        return "".join(s.to_json() + "\n" for s in self.steps)

    @classmethod
    def from_jsonl(cls, text: str) -> "SearchTrace":
        return cls([StepRecord.from_json(line) for line in text.splitlines() if line.strip()])

    def save(self, path) -> None:
        atomic_write_text(path, self.to_jsonl())

    @classmethod
    def load(cls, path) -> "SearchTrace":
        with open(path, encoding="utf-8") as fh:
            return cls.from_jsonl(fh.read())


def dcis_search(objective: Callable[[ScalingFactors], float], config: SearchConfig) -> tuple[ScalingFactors, SearchTrace]:
    """Run the full halving schedule and return the searched factors and the step trace."""
    factors = config.initial_factors.with_values(config.initial_factors.lambdas, "dcis")
    schedule = segment_schedule(len(factors))
    C = config.increments_per_segment
    ranges: dict[Segment, tuple[float, float]] = {}
    trace = SearchTrace()
    evals = 0
    current: float | None = None

    workers = config.n_workers if config.n_workers is not None else _default_workers()
    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for depth, seg in schedule:
            rng = ranges.pop(seg, config.initial_range)
            values = incremental_values(rng, C)
            try:
                scores = evaluate_segment(objective, factors, seg, values, executor)
            except ObjectiveError as exc:
                exc.trace = trace
                raise
            evals += C
            sel = select_increments(values, scores, C, config.discard_threshold)
            factors, child = update_step(factors, seg, values, scores, C, config.discard_threshold, rng)
            if sel.chosen is not None:
                current = float(scores[list(values).index(sel.chosen)])
            if seg.width > 1:
                for sub in seg.children():
                    ranges[sub] = child
            trace.steps.append(
                StepRecord(
                    layer=depth,
                    segment_start=seg.start,
                    width=seg.width,
                    range=[float(rng[0]), float(rng[1])],
                    values=[float(v) for v in values],
                    scores=[float(s) for s in scores],
                    discarded=list(sel.discarded),
                    chosen=sel.chosen,
                    child_range=[float(child[0]), float(child[1])],
                    cumulative_evals=evals,
                    objective=current,
                )
            )
            log.debug("layer %d segment (%d,%d): chosen %s objective %s", depth, seg.start, seg.width, sel.chosen, current)
    finally:
        if executor is not None:
            executor.shutdown()
    return factors, trace


def search_budget(d: int, C: int) -> int:
    """DCIS objective evaluations for head dimension ``d``: ``(d - 2) * C``."""
    return (d - 2) * C


def evo_budget(T: int, P: int) -> int:
    """Evaluations of an evolutionary search with ``T`` iterations of population ``P``."""
    return T * P
