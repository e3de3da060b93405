"""Token corpora for the toy model.

The synthetic generator emits an order-2 Markov stream over the ordinary
symbols with one key-recall episode per sequence::

    ... KEY k1 .. kn ... QUERY k1 .. kn ...

The last four token ids are reserved markers; everything below them is an
ordinary symbol.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

N_RESERVED = 4


def reserved_tokens(vocab_size: int) -> dict[str, int]:
    if vocab_size <= N_RESERVED + 1:
        raise ValueError(f"vocab_size {vocab_size} leaves no room for reserved markers")
    return {
        "BOS": vocab_size - 1,
        "KEY": vocab_size - 2,
        "QUERY": vocab_size - 3,
        "END": vocab_size - 4,
    }


def n_symbols(vocab_size: int) -> int:
    return vocab_size - N_RESERVED


class MarkovGrammar:
    """Seeded order-2 Markov chain over ``vocab_size - 4`` symbols.

    The candidate successors of ``(a, b)`` are fixed by ``b`` and the weights
    over those candidates depend on ``a`` through ``a % n_modes``.
    """

    def __init__(self, vocab_size: int, seed: int = 0, branching: int = 3, n_modes: int = 2):
        self.vocab_size = vocab_size
        self.n = n_symbols(vocab_size)
        rng = np.random.default_rng([seed, 0xC0FFEE])
        self.successors = np.stack([rng.choice(self.n, size=branching, replace=False) for _ in range(self.n)])
        w = rng.dirichlet(np.full(branching, 0.7), size=(n_modes, self.n))
        self.cdf = np.cumsum(w, axis=-1)
        self.cdf[..., -1] = 1.0
        self.n_modes = n_modes

    def generate(self, rng: np.random.Generator, length: int, prev: tuple[int, int] | None = None) -> list[int]:
        if length <= 0:
            return []
        if prev is None:
            a, b = (int(x) for x in rng.integers(self.n, size=2))
        else:
            a, b = prev
        out = []
        u = rng.random(length)
        for t in range(length):
            k = int(np.searchsorted(self.cdf[a % self.n_modes, b], u[t], side="right"))
            a, b = b, int(self.successors[b, k])
            out.append(b)
        return out


@dataclass(frozen=True)
class CorpusSpec:
    """Generator settings; stored with checkpoints so evaluation can rebuild samples."""

    vocab_size: int = 64
    grammar_seed: int = 0
    branching: int = 3
    n_modes: int = 2
    key_length: int = 4
    kind: str = "synthetic"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "CorpusSpec":
        return cls(**doc)


class SyntheticCorpus:
    def __init__(self, spec: CorpusSpec):
        self.spec = spec
        self.grammar = MarkovGrammar(spec.vocab_size, spec.grammar_seed, spec.branching, spec.n_modes)
        self.markers = reserved_tokens(spec.vocab_size)

    def filler(self, rng: np.random.Generator, length: int) -> list[int]:
        return self.grammar.generate(rng, length)

    def sequence(self, rng: np.random.Generator, length: int) -> list[int]:
        """One sequence of ``length`` tokens containing a recall episode when it fits."""
        k = self.spec.key_length
        episode = 2 * k + 2
        body = length - 1
        seq = [self.markers["BOS"]]
        if body < episode + 1:
            return seq + self.grammar.generate(rng, body)
        free = body - episode
        gap = int(rng.integers(1, free + 1))
        lead = int(rng.integers(0, free - gap + 1))
        tail = free - gap - lead
        key = [int(t) for t in rng.integers(self.grammar.n, size=k)]
        seq += self.grammar.generate(rng, lead)
        seq += [self.markers["KEY"]] + key
        seq += self.grammar.generate(rng, gap)
        seq += [self.markers["QUERY"]] + key
        seq += self.grammar.generate(rng, tail)
        return seq

    def sample(self, n: int, length: int, seed: int) -> list[list[int]]:
        rng = np.random.default_rng([seed, length, 0x5EED])
        return [self.sequence(rng, length) for _ in range(n)]


@dataclass
class Corpus:
    """A list of token sequences plus where they came from."""

    sequences: list[list[int]]
    vocab_size: int
    source: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for i, seq in enumerate(self.sequences):
            bad = [t for t in seq if not 0 <= t < self.vocab_size]
            if bad:
                raise ValueError(f"sequence {i} has tokens outside [0, {self.vocab_size}): {bad[:5]}")

    def __len__(self) -> int:
        return len(self.sequences)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for seq in self.sequences:
            h.update(np.asarray(seq, dtype="<i4").tobytes())
            h.update(b"\n")
        return h.hexdigest()[:16]

    @classmethod
    def synthetic(cls, spec: CorpusSpec, n: int, length: int, seed: int) -> "Corpus":
        seqs = SyntheticCorpus(spec).sample(n, length, seed)
        return cls(seqs, spec.vocab_size, {"kind": "synthetic", "spec": spec.to_dict(), "seed": seed, "length": length})

    @classmethod
    def cyclic(cls, vocab_size: int, period: int, n: int, length: int) -> "Corpus":
        seqs = [[(start + t) % period for t in range(length)] for start in range(n)]
        return cls(seqs, vocab_size, {"kind": "cyclic", "period": period})

    @classmethod
    def from_file(cls, path, vocab_size: int) -> "Corpus":
        """Read newline-delimited sequences of whitespace-separated integer token ids."""
        seqs = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    seqs.append([int(t) for t in line.split()])
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from exc
        return cls(seqs, vocab_size, {"kind": "file", "path": str(path)})

    def to_file(self, path) -> None:
        from ._io import atomic_write_text

        atomic_write_text(path, "".join(" ".join(map(str, s)) + "\n" for s in self.sequences))
