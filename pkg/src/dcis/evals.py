"""Perplexity and key-recall evaluation at arbitrary context lengths, plus reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ._io import atomic_write_text
from .corpus import n_symbols, reserved_tokens
from .rope import ScalingFactors


class EvalError(ValueError):
    pass


class SampleLengthError(EvalError):
    pass


def perplexity(model, factors: ScalingFactors, samples: Sequence[Sequence[int]], eval_length: int) -> float:
    """``exp`` of the mean NLL over every scored token, each sample cut to ``eval_length``.

    Samples are scored with full causal context; no sliding window.
    """
    from .model import forward_nll

    if not samples:
        raise EvalError("perplexity needs at least one sample")
    for i, s in enumerate(samples):
        if len(s) < eval_length:
            raise SampleLengthError(f"sample {i} has {len(s)} tokens, shorter than eval_length={eval_length}")
    nll = forward_nll(model, factors, [list(s[:eval_length]) for s in samples])
    return math.exp(float(np.mean(nll, dtype=np.float64)))


def passkey_prompt(
    rng: np.random.Generator,
    context_length: int,
    key_length: int,
    vocab_size: int,
    filler: Callable[[np.random.Generator, int], list[int]],
) -> tuple[list[int], list[int]]:
    """Build ``BOS filler KEY key filler QUERY`` so that prompt plus answer spans ``context_length``."""
    markers = reserved_tokens(vocab_size)
    n_fill = context_length - 2 * key_length - 3
    if n_fill < 0:
        raise EvalError(f"context_length {context_length} too short for a key of length {key_length}")
    key = [int(t) for t in rng.integers(n_symbols(vocab_size), size=key_length)]
    lead = int(rng.integers(0, n_fill + 1))
    prompt = (
        [markers["BOS"]]
        + filler(rng, lead)
        + [markers["KEY"]]
        + key
        + filler(rng, n_fill - lead)
        + [markers["QUERY"]]
    )
    return prompt, key


def _uniform_filler(vocab_size: int):
    n = n_symbols(vocab_size)

    def fill(rng: np.random.Generator, k: int) -> list[int]:
        return [int(t) for t in rng.integers(n, size=k)]

    return fill


def passkey_suite(
    model,
    factors: ScalingFactors,
    context_length: int,
    n_trials: int = 50,
    key_length: int = 4,
    seed: int = 0,
    filler: Callable[[np.random.Generator, int], list[int]] | None = None,
    vocab_size: int | None = None,
) -> float:
    """Fraction of trials in which greedy decoding reproduces the whole key.

    ``model`` only needs ``greedy_decode(prompt, factors, n)``.  ``filler``
    generates distractor tokens; uniform symbols are used when omitted.
    """
    if vocab_size is None:
        cfg = getattr(model, "cfg", None)
        if cfg is None:
            raise EvalError("vocab_size is required for models without a cfg")
        vocab_size = cfg.vocab_size
    try:
        reserved_tokens(vocab_size)
    except ValueError as exc:
        raise EvalError(str(exc)) from exc
    if n_trials < 1:
        raise EvalError("n_trials must be >= 1")
    filler = filler or _uniform_filler(vocab_size)
    rng = np.random.default_rng([seed, context_length, key_length])
    hits = 0
    for _ in range(n_trials):
        prompt, key = passkey_prompt(rng, context_length, key_length, vocab_size, filler)
        hits += list(model.greedy_decode(prompt, factors, key_length)) == key
    return hits / n_trials


@dataclass
class EvalReport:
    entries: list[dict] = field(default_factory=list)
    factors_provenance: str = "identity"
    model_fingerprint: str = ""
    seed: int = 0
    config: dict | None = None

    def __post_init__(self) -> None:
        for e in self.entries:
            if "ppl" in e and not e["ppl"] >= 1:
                raise EvalError(f"perplexity below 1 in entry {e}")
            if "recall_rate" in e and not 0 <= e["recall_rate"] <= 1:
                raise EvalError(f"recall rate outside [0, 1] in entry {e}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        return cls(**doc)

    def rows(self) -> list[dict]:
        out = []
        for e in self.entries:
            for metric in ("ppl", "recall_rate"):
                if metric in e:
                    out.append({
                        "length": e["length"],
                        "metric_name": metric,
                        "value": e[metric],
                        "n_trials": e.get("n_trials", ""),
                        "factors_provenance": self.factors_provenance,
                    })
        return out


CSV_COLUMNS = ["length", "metric_name", "value", "n_trials", "factors_provenance"]


def ppl_curve(model, factors: ScalingFactors, lengths: Sequence[int], samples: Sequence[Sequence[int]], seed: int = 0) -> EvalReport:
    """Perplexity at each length over one fixed sample set (truncated per length)."""
    lengths = list(lengths)
    if lengths != sorted(lengths):
        raise EvalError(f"lengths must be sorted ascending: {lengths}")
    entries = [{"length": int(n), "ppl": perplexity(model, factors, samples, n)} for n in lengths]
    return EvalReport(entries, factors.provenance, model_fingerprint(model), seed)


def model_fingerprint(model) -> str:
    from .checkpoint import weights_digest

    try:
        return weights_digest(model)[:16]
    except AttributeError:
        return ""


def report_to_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in report.rows():
        writer.writerow({**row, "value": repr(float(row["value"]))})
    return buf.getvalue()


def report_from_csv(text: str) -> list[dict]:
    rows = []
    for row in csv.DictReader(io.StringIO(text)):
        rows.append({
            "length": int(row["length"]),
            "metric_name": row["metric_name"],
            "value": float(row["value"]),
            "n_trials": int(row["n_trials"]) if row["n_trials"] else None,
            "factors_provenance": row["factors_provenance"],
        })
    return rows


def emit_report(report: EvalReport, fmt: str | None, path) -> None:
    """Write ``report`` as JSON or CSV; ``fmt=None`` picks by file extension (default JSON)."""
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix.lower() == ".csv" else "json")
    if fmt == "csv":
        text = report_to_csv(report)
    elif fmt == "json":
        text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    else:
        raise EvalError(f"unknown report format {fmt!r}")
    try:
        atomic_write_text(path, text)
    except OSError as exc:
        raise EvalError(f"cannot write report to {path}: {exc}") from exc


def load_report(path) -> EvalReport:
    with open(path, encoding="utf-8") as fh:
        return EvalReport.from_dict(json.load(fh))
