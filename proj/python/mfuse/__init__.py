"""Gated multimodal fusion for EHR-shaped data.

Thin wrapper over the native core: configs and reports are plain dicts.
"""

import json
import os

from . import _core
from ._core import Error, aupr, auroc, topk_recall

__all__ = [
    "Error",
    "aupr",
    "auroc",
    "evaluate",
    "generate",
    "gradcheck",
    "list_models",
    "topk_recall",
    "train",
]


def _load(config):
    if isinstance(config, (str, os.PathLike)):
        with open(config) as f:
            return json.load(f)
    return dict(config)


def generate(spec, out):
    """Write a synthetic dataset described by `spec` (dict or JSON path) to `out`."""
    return json.loads(_core.generate(json.dumps(_load(spec)), os.fspath(out)))


def train(config, data, out_dir=None, seed=None):
    """Train and return {"best_epoch", "history", "test"}."""
    out_dir = None if out_dir is None else os.fspath(out_dir)
    return json.loads(_core.train(json.dumps(_load(config)), os.fspath(data), out_dir, seed))


def evaluate(config, checkpoint, data, split="test", seed=None):
    return json.loads(
        _core.evaluate(json.dumps(_load(config)), os.fspath(checkpoint), os.fspath(data), split, seed)
    )


def list_models():
    return json.loads(_core.list_models())


def gradcheck():
    """Run the finite-difference suite; one dict per case."""
    return json.loads(_core.gradcheck())
