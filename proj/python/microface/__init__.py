"""Python bindings for the microface reconstruction pipeline.

Functions that return structured data decode the library's JSON into dicts and lists.
"""

import json as _json

from . import _core
from ._core import MicrofaceError, gradcheck_modules, template_model

__all__ = [
    "MicrofaceError",
    "attention_weights",
    "evaluate",
    "gen_data",
    "gradcheck",
    "gradcheck_modules",
    "infer",
    "template_model",
    "train",
]


def gen_data(out, num=80, seed=0, height=96, width=96, amplitude=0.15, frames=8):
    """Write a synthetic dataset to `out` and return its manifest."""
    return _json.loads(_core.gen_data(str(out), num, seed, height, width, amplitude, frames))


def train(config):
    """Train from a config dict (same keys as the JSON config file). Returns epochs, steps and the log."""
    return _json.loads(_core.train(_json.dumps(config)))


def evaluate(checkpoint, data, split="test"):
    return _json.loads(_core.evaluate(str(checkpoint), str(data), split))


def infer(checkpoint, seq, out, model="", disable_dgmd=False):
    """Write per-frame OBJ meshes and attention JSON; returns the frame count."""
    return _core.infer(str(checkpoint), str(seq), str(out), str(model), disable_dgmd)


def gradcheck(module=""):
    return _json.loads(_core.gradcheck(module))


def attention_weights(intensities, vertex_region):
    return _json.loads(_core.attention_weights(list(intensities), list(vertex_region)))
