"""A small decoder-only transformer whose attention uses scaled RoPE.

Pre-norm blocks, multi-head causal attention with rotary embeddings on
queries and keys, and a GELU MLP.  Scaling factors are passed per call, so
one set of weights can be evaluated under any factor vector.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import Corpus
from .rope import RopeConfig, ScalingFactors, rotation_angles


class ModelConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step}: loss={loss}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = 64
    trained_context: int = 64
    rope_base: float = 10000.0
    seed: int = 0
    mlp_ratio: int = 4

    def __post_init__(self) -> None:
        if self.n_layers < 1 or self.n_heads < 1 or self.vocab_size < 2 or self.trained_context < 2:
            raise ModelConfigError(f"invalid model sizes in {self}")
        if self.d_model % self.n_heads:
            raise ModelConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        hd = self.d_model // self.n_heads
        if hd % 2 or hd < 4:
            raise ModelConfigError(f"head_dim={hd} must be even and >= 4")
        pairs = hd // 2
        if pairs & (pairs - 1):
            raise ModelConfigError(f"head_dim/2={pairs} must be a power of two")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def rope(self) -> RopeConfig:
        return RopeConfig(self.head_dim, self.rope_base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        return cls(**doc)


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count of ``ToyTransformer(cfg)``."""
    D, V, H = cfg.d_model, cfg.vocab_size, cfg.mlp_ratio * cfg.d_model
    per_layer = 4 * D * D + 2 * (2 * D) + (D * H + H) + (H * D + D)
    return V * D + cfg.n_layers * per_layer + 2 * D + D * V


def rotate_pairs(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate interleaved pairs of the last axis; ``cos``/``sin`` broadcast over ``x[..., ::2]``."""
    even, odd = x[..., 0::2], x[..., 1::2]
    return torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1).flatten(-2)


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads, self.head_dim = cfg.n_heads, cfg.head_dim
        self.wq = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.wk = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.wv = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.wo = nn.Linear(cfg.d_model, cfg.d_model, bias=False)

    def forward(self, x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
        B, L, D = x.shape
        shape = (B, L, self.n_heads, self.head_dim)
        q = self.wq(x).view(shape).transpose(1, 2)
        k = self.wk(x).view(shape).transpose(1, 2)
        v = self.wv(x).view(shape).transpose(1, 2)
        q, k = rotate_pairs(q, cos, sin), rotate_pairs(k, cos, sin)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(self.head_dim)
        mask = torch.ones(L, L, dtype=torch.bool, device=x.device).triu(1)
        att = att.masked_fill(mask, float("-inf")).softmax(dim=-1)
        return self.wo((att @ v).transpose(1, 2).reshape(B, L, D))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = Attention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.fc1 = nn.Linear(cfg.d_model, cfg.mlp_ratio * cfg.d_model)
        self.fc2 = nn.Linear(cfg.mlp_ratio * cfg.d_model, cfg.d_model)

    def forward(self, x, cos, sin):
        x = x + self.attn(self.ln1(x), cos, sin)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class ToyTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        self.training_meta: dict = {}

    @property
    def dtype(self) -> torch.dtype:
        return self.tok_emb.weight.dtype

    def rope_tables(self, factors: ScalingFactors, length: int) -> tuple[torch.Tensor, torch.Tensor]:
        if len(factors) != self.cfg.head_dim // 2:
            raise ValueError(f"expected {self.cfg.head_dim // 2} scaling factors, got {len(factors)}")
        theta = rotation_angles(self.cfg.rope, factors, np.arange(length))
        return (
            torch.from_numpy(np.cos(theta)).to(self.dtype),
            torch.from_numpy(np.sin(theta)).to(self.dtype),
        )

    def forward(self, tokens: torch.Tensor, factors: ScalingFactors) -> torch.Tensor:
        cos, sin = self.rope_tables(factors, tokens.shape[-1])
        x = self.tok_emb(tokens)
        for block in self.blocks:
            x = block(x, cos, sin)
        return self.head(self.ln_f(x))

    def identity_factors(self) -> ScalingFactors:
        return ScalingFactors.ones(self.cfg.head_dim // 2)

    @torch.no_grad()
    def greedy_decode(self, prompt: Sequence[int], factors: ScalingFactors, n: int) -> list[int]:
        seq = torch.tensor([list(prompt)], dtype=torch.long)
        out = []
        for _ in range(n):
            nxt = self(seq, factors)[0, -1].argmax()
            out.append(int(nxt))
            seq = torch.cat([seq, nxt.view(1, 1)], dim=1)
        return out


def init_model(cfg: ModelConfig, dtype: torch.dtype = torch.float32) -> ToyTransformer:
    """Build a model with weights drawn from a generator seeded by ``cfg.seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = ToyTransformer(cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    resid_std = 0.02 / math.sqrt(2 * cfg.n_layers)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif ".ln" in name or name.startswith("ln_f"):
                p.fill_(1.0)
            else:
                std = resid_std if name.endswith(("wo.weight", "fc2.weight")) else 0.02
                p.copy_(torch.randn(p.shape, generator=gen) * std)
    return model.to(dtype).eval()


def _as_batch(tokens, vocab_size: int) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    if t.dim() == 1:
        t = t.unsqueeze(0)
    if t.dim() != 2:
        raise ValueError(f"tokens must be 1-D or 2-D, got shape {tuple(t.shape)}")
    if t.shape[1] < 2:
        raise ValueError(f"need at least 2 tokens to score, got {t.shape[1]}")
    if t.numel() and (int(t.min()) < 0 or int(t.max()) >= vocab_size):
        raise ValueError(f"token ids must lie in [0, {vocab_size})")
    return t


def _token_nll(model: ToyTransformer, batch: torch.Tensor, factors: ScalingFactors) -> torch.Tensor:
    logits = model(batch[:, :-1], factors)
    V = logits.shape[-1]
    return F.cross_entropy(logits.reshape(-1, V), batch[:, 1:].reshape(-1), reduction="none").view(batch.shape[0], -1)


def forward_nll(model: ToyTransformer, factors: ScalingFactors, tokens) -> np.ndarray:
    """Next-token NLL for positions 1..L-1 (float64; one row per sequence if 2-D)."""
    batch = _as_batch(tokens, model.cfg.vocab_size)
    with torch.no_grad():
        nll = _token_nll(model, batch, factors)
    out = nll.double().numpy()
    return out[0] if np.ndim(tokens) == 1 else out


@contextlib.contextmanager
def _single_thread():
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def heldout_loss(model: ToyTransformer, sequences: Sequence[Sequence[int]], context_len: int, factors: ScalingFactors | None = None) -> float:
    """Mean next-token NLL over the first ``context_len`` tokens of each sequence, float64-accumulated."""
    factors = factors or model.identity_factors()
    batch = _as_batch([list(s[:context_len]) for s in sequences], model.cfg.vocab_size)
    with torch.no_grad():
        return float(_token_nll(model, batch, factors).double().mean())


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)


def _run_training(
    model: ToyTransformer,
    corpus: Corpus,
    steps: int,
    learning_rate: float,
    batch_size: int,
    context_len: int,
    seed: int,
    factors: ScalingFactors,
    heldout: Sequence[Sequence[int]] | None,
    on_step: Callable[[dict], None] | None,
    eval_every: int,
) -> ToyTransformer:
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if not len(corpus):
        raise ValueError("corpus is empty")
    if corpus.vocab_size != model.cfg.vocab_size:
        raise ValueError(f"corpus vocab {corpus.vocab_size} != model vocab {model.cfg.vocab_size}")
    if steps == 0:
        return model
    seqs = [s for s in corpus.sequences if len(s) >= context_len]
    if not seqs:
        raise ValueError(f"no corpus sequence has the {context_len} tokens needed per window")
    data = [torch.tensor(s, dtype=torch.long) for s in seqs]
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=learning_rate)
    loss_val = float("nan")
    with _single_thread():
        model.train()
        for step in range(1, steps + 1):
            idx = torch.randint(len(data), (batch_size,), generator=gen)
            rows = []
            for i in idx.tolist():
                seq = data[i]
                off = int(torch.randint(len(seq) - context_len + 1, (1,), generator=gen))
                rows.append(seq[off : off + context_len])
            batch = torch.stack(rows)
            loss = _token_nll(model, batch, factors).double().mean()
            loss_val = float(loss.detach())
            if not math.isfinite(loss_val):
                model.eval()
                raise TrainingDivergedError(step, loss_val)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if on_step is not None and (step % eval_every == 0 or step == steps):
                record = {"step": step, "loss": loss_val}
                if heldout:
                    model.eval()
                    record["heldout_loss"] = heldout_loss(model, heldout, context_len, factors)
                    model.train()
                on_step(record)
        model.eval()
    meta = dict(model.training_meta)
    meta.update(
        steps=int(meta.get("steps", 0)) + steps,
        final_loss=loss_val,
        corpus_fingerprint=corpus.fingerprint(),
        seed=seed,
    )
    model.training_meta = meta
    return model


def train(
    model: ToyTransformer,
    corpus: Corpus,
    steps: int,
    learning_rate: float = 3e-4,
    batch_size: int = 32,
    context_len: int | None = None,
    seed: int = 0,
    heldout: Sequence[Sequence[int]] | None = None,
    on_step: Callable[[dict], None] | None = None,
    eval_every: int = 100,
) -> ToyTransformer:
    """Train in place with Adam on random windows of ``context_len`` tokens; returns ``model``.

    ``on_step`` receives ``{"step", "loss"[, "heldout_loss"]}`` every
    ``eval_every`` steps and at the last step.
    """
    context_len = context_len or model.cfg.trained_context
    if context_len > model.cfg.trained_context:
        raise ValueError(f"pre-training context {context_len} exceeds trained_context {model.cfg.trained_context}")
    return _run_training(model, corpus, steps, learning_rate, batch_size, context_len, seed,
                         model.identity_factors(), heldout, on_step, eval_every)


def finetune_with_factors(
    model: ToyTransformer,
    factors: ScalingFactors,
    corpus: Corpus,
    steps: int,
    context_len: int,
    learning_rate: float = 2e-5,
    batch_size: int = 32,
    seed: int = 0,
    heldout: Sequence[Sequence[int]] | None = None,
    on_step: Callable[[dict], None] | None = None,
    eval_every: int = 100,
) -> ToyTransformer:
    """Continue training in place with ``factors`` installed in every attention layer."""
    model = _run_training(model, corpus, steps, learning_rate, batch_size, context_len, seed,
                          factors, heldout, on_step, eval_every)
    if steps:
        model.training_meta["finetune_factors"] = factors.tolist()
    return model
