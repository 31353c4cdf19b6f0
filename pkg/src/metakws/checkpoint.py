"""Versioned JSON checkpoints for parameters and optimizer state.

Floats are serialized with full round-trip precision (Python's repr), so a
save/load cycle reproduces every tensor bit-exactly.
"""

from __future__ import annotations

import json

import numpy as np

from .features import DatasetFormatError
from .tensor import AdamState, ParamSet, Tensor

FORMAT = "kwsckpt v1"


def _array_out(arr):
    return {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}


def _array_in(obj):
    return np.array(obj["data"], dtype=np.float64).reshape(obj["shape"])


def save_checkpoint(path, params, adam=None, metadata=None, rng_state=None):
    """Write parameters, optional Adam state, and run metadata to JSON."""
    payload = {
        "format": FORMAT,
        "params": {name: _array_out(t.values) for name, t in params.items()},
        "partitions": params.partitions(),
        "metadata": metadata or {},
    }
    if adam is not None:
        payload["adam"] = {
            "m": {name: _array_out(v) for name, v in adam.m.items()},
            "v": {name: _array_out(v) for name, v in adam.v.items()},
            "t": adam.t,
            "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
        }
    if rng_state is not None:
        payload["rng_state"] = rng_state
    with open(path, "w", encoding="ascii") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Read a checkpoint; returns (params, adam or None, metadata, rng_state)."""
    with open(path, "r", encoding="ascii") as fh:
        payload = json.load(fh)
    if payload.get("format") != FORMAT:
        raise DatasetFormatError(f"{path}: not a {FORMAT} checkpoint")
    tensors = {name: Tensor(_array_in(obj))
               for name, obj in payload["params"].items()}
    params = ParamSet(tensors, payload["partitions"])
    adam = None
    if "adam" in payload:
        raw = payload["adam"]
        adam = AdamState(
            m={name: _array_in(obj) for name, obj in raw["m"].items()},
            v={name: _array_in(obj) for name, obj in raw["v"].items()},
            t=raw["t"], beta1=raw["beta1"], beta2=raw["beta2"], eps=raw["eps"])
    return params, adam, payload.get("metadata", {}), payload.get("rng_state")
