"""Python bindings for the cstransfer C++ core."""

import json as _json

from . import _core
from ._core import (
    Checkpoint,
    Corpus,
    Example,
    format_delta,
    rounded_accuracy,
    scheduled_lr,
)

__all__ = [
    "Checkpoint",
    "Corpus",
    "Example",
    "default_config",
    "evaluate",
    "format_delta",
    "generate_corpus",
    "initial_checkpoint",
    "rounded_accuracy",
    "run_pipeline",
    "scheduled_lr",
    "train_stage",
]


def _dump(config):
    """Config as JSON text; accepts None, a dict, JSON text or a file path."""
    if config is None:
        return ""
    if isinstance(config, dict):
        return _json.dumps(config)
    text = str(config)
    if text.lstrip().startswith("{"):
        return text
    with open(text, encoding="utf-8") as f:
        return f.read()


def default_config():
    """Default run config as a dict."""
    return _json.loads(_core.default_config_json())


def generate_corpus(config=None, seed=None):
    cfg = _dump(config)
    return _core.generate_corpus(cfg, -1 if seed is None else seed)


def initial_checkpoint(corpus, config=None):
    return _core.initial_checkpoint(corpus, _dump(config))


def train_stage(checkpoint, corpus, stage, config=None, losses=None, steps=None):
    """Returns (checkpoint, log rows as dicts)."""
    return _core.train_stage(checkpoint, corpus, stage, _dump(config), losses or "", -1 if steps is None else steps)


def evaluate(checkpoint, corpus, split="dev", lang="DE", mode="commonsense", fmt="auto"):
    return _json.loads(_core.evaluate(checkpoint, corpus, split, lang, mode, fmt))["report"]


def run_pipeline(corpus=None, config=None, out_dir=None):
    """Full three-stage run; returns the summary dict."""
    cfg = _dump(config)
    if corpus is None:
        corpus = _core.generate_corpus(cfg, -1)
    return _json.loads(_core.run_pipeline(corpus, cfg, out_dir or ""))
