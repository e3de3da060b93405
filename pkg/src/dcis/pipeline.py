"""Config handling and the train -> search -> fine-tune -> evaluate steps shared by the CLI."""

from __future__ import annotations

import copy
import json
import math
from pathlib import Path

from .corpus import Corpus, CorpusSpec, SyntheticCorpus
from .model import ModelConfig, ModelConfigError, ToyTransformer, finetune_with_factors, heldout_loss, init_model, train
from .rope import ScalingFactors
from .schemes import ntk_factors, pi_factors, yarn_factors
from .search import SearchConfig, SearchTrace, dcis_search, make_objective


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG: dict = {
    "model": ModelConfig().to_dict(),
    "training": {
        "steps": 2000,
        "learning_rate": 1e-3,
        "batch_size": 32,
        "context_len": 64,
        "seed": 0,
        "n_sequences": 4096,
        "corpus_seed": 1,
        "corpus_file": None,
        "grammar_seed": 0,
        "key_length": 4,
        "eval_every": 100,
        "finetune_steps": 200,
        "finetune_learning_rate": 2e-5,
        "finetune_context_len": 64,
        "finetune_corpus_seed": 11,
    },
    "search": {
        "range": [-5.0, 5.0],
        "increments": 10,
        "threshold": 100.0,
        "target_length": 256,
        "init": "yarn",
        "ramp_low": 1.0,
        "ramp_high": 32.0,
        "n_samples": 16,
        "seed": 100,
    },
    "eval": {
        "lengths": [64, 128, 256],
        "n_samples": 16,
        "n_trials": 50,
        "key_length": 4,
        "seed": 200,
        "samples_file": None,
    },
}


def merge_config(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where + key!r} must be an object")
            out[key] = merge_config(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        cfg = merge_config(cfg, doc)
    if overrides:
        cfg = merge_config(cfg, overrides)
    try:
        ModelConfig.from_dict(cfg["model"])
    except (ModelConfigError, TypeError) as exc:
        raise ConfigError(f"invalid model config: {exc}") from exc
    return cfg


def corpus_spec(cfg: dict) -> CorpusSpec:
    t = cfg["training"]
    return CorpusSpec(vocab_size=cfg["model"]["vocab_size"], grammar_seed=t["grammar_seed"], key_length=t["key_length"])


def training_corpus(cfg: dict, seed_key: str = "corpus_seed", length: int | None = None) -> Corpus:
    t = cfg["training"]
    vocab = cfg["model"]["vocab_size"]
    if t["corpus_file"]:
        return Corpus.from_file(t["corpus_file"], vocab)
    return Corpus.synthetic(corpus_spec(cfg), t["n_sequences"], length or t["context_len"], t[seed_key])


def spec_from_model(model: ToyTransformer) -> CorpusSpec:
    doc = model.training_meta.get("corpus_spec")
    return CorpusSpec.from_dict(doc) if doc else CorpusSpec(vocab_size=model.cfg.vocab_size)


def eval_samples(spec: CorpusSpec, n: int, length: int, seed: int, samples_file=None) -> list[list[int]]:
    if samples_file:
        return Corpus.from_file(samples_file, spec.vocab_size).sequences
    return Corpus.synthetic(spec, n, length, seed).sequences


def pretrain(cfg: dict, on_step=None) -> ToyTransformer:
    t, e = cfg["training"], cfg["eval"]
    model = init_model(ModelConfig.from_dict(cfg["model"]))
    corpus = training_corpus(cfg)
    spec = corpus_spec(cfg)
    ctx = t["context_len"]
    held = eval_samples(spec, e["n_samples"], ctx, e["seed"])
    train(model, corpus, t["steps"], t["learning_rate"], t["batch_size"], ctx, t["seed"],
          heldout=held, on_step=on_step, eval_every=t["eval_every"])
    model.training_meta["corpus_spec"] = spec.to_dict()
    model.training_meta["heldout_loss"] = heldout_loss(model, held, ctx)
    model.training_meta["heldout_ppl"] = math.exp(model.training_meta["heldout_loss"])
    model.training_meta["config"] = cfg
    return model


def initial_factors(kind: str, model_cfg: ModelConfig, target_length: int, ramp_low: float = 1.0, ramp_high: float = 32.0) -> ScalingFactors:
    s = max(1.0, target_length / model_cfg.trained_context)
    rope = model_cfg.rope
    if kind == "yarn":
        return yarn_factors(rope, s, model_cfg.trained_context, ramp_low, ramp_high)
    if kind == "pi":
        return pi_factors(model_cfg.head_dim, s)
    if kind == "ntk":
        return ntk_factors(rope, s)
    if kind == "ones":
        return ScalingFactors.ones(model_cfg.head_dim // 2)
    raise ConfigError(f"unknown initial factors {kind!r}")


def search_config(cfg: dict, model: ToyTransformer) -> SearchConfig:
    s = cfg["search"]
    init = initial_factors(s["init"], model.cfg, s["target_length"], s["ramp_low"], s["ramp_high"])
    try:
        return SearchConfig(
            initial_factors=init,
            initial_range=tuple(s["range"]),
            increments_per_segment=s["increments"],
            discard_threshold=s["threshold"],
            target_length=s["target_length"],
            objective_id="toy_ppl",
            random_seed=s["seed"],
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def run_search(cfg: dict, model: ToyTransformer) -> tuple[ScalingFactors, SearchTrace, SearchConfig]:
    s = cfg["search"]
    sc = search_config(cfg, model)
    samples = eval_samples(spec_from_model(model), s["n_samples"], s["target_length"], s["seed"])
    objective = make_objective("toy_ppl", model=model, samples=samples, target_length=s["target_length"])
    factors, trace = dcis_search(objective, sc)
    return factors, trace, sc


def finetune(cfg: dict, model: ToyTransformer, factors: ScalingFactors, on_step=None) -> ToyTransformer:
    t = cfg["training"]
    ctx = t["finetune_context_len"]
    corpus = training_corpus(cfg, "finetune_corpus_seed", ctx)
    return finetune_with_factors(model, factors, corpus, t["finetune_steps"], ctx, t["finetune_learning_rate"],
                                 t["batch_size"], t["seed"], on_step=on_step, eval_every=t["eval_every"])


def passkey_filler(model: ToyTransformer):
    return SyntheticCorpus(spec_from_model(model)).filler
