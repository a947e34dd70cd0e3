"""AdamW with decoupled weight decay, plus checkpoint serialization.

Checkpoints are a pickled dict of plain builtins and numpy arrays keyed by
canonical parameter names: identically-configured runs produce byte-identical
files, and loading restores exact values. The RNG state is carried verbatim
(bit_generator state dict).
"""

from __future__ import annotations

import pickle

import numpy as np

from .errors import CheckpointError, NonFiniteError

CKPT_SCHEMA = 1


class AdamW:
    def __init__(self, named_params, lr, weight_decay=0.02,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(named_params)
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        """One update from the .grad fields; decay is applied directly to
        the parameters, not through the moment estimates."""
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter '{name}'",
                                     term=name)
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)

    def state_dict(self):
        return {"step": self.step_count,
                "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state):
        self.step_count = state["step"]
        for k in self.m:
            self.m[k] = np.array(state["m"][k], dtype=np.float64)
            self.v[k] = np.array(state["v"][k], dtype=np.float64)


def save_checkpoint(path, named_params, opt_state, rng_state, step, meta):
    blob = {
        "schema_version": CKPT_SCHEMA,
        "step": int(step),
        "params": {name: p.data.copy() for name, p in named_params},
        "opt_state": opt_state,
        "rng_state": rng_state,
        "meta": meta,
    }
    with open(path, "wb") as fh:
        pickle.dump(blob, fh, protocol=4)


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            blob = pickle.load(fh)
    except (OSError, pickle.UnpicklingError, EOFError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(blob, dict) or blob.get("schema_version") != CKPT_SCHEMA:
        raise CheckpointError(
            f"unsupported checkpoint schema {blob.get('schema_version')!r}")
    return blob


def restore_params(named_params, blob):
    """Copy checkpoint tensors into live parameters, validating names/shapes."""
    params = dict(named_params)
    saved = blob["params"]
    missing = set(params) - set(saved)
    extra = set(saved) - set(params)
    if missing or extra:
        raise CheckpointError(
            f"parameter mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    for name, p in params.items():
        arr = np.asarray(saved[name], dtype=np.float64)
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for '{name}': {arr.shape} vs {p.data.shape}")
        p.data = arr.copy()
