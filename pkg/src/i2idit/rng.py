"""Seedable, splittable random streams on top of numpy's Philox generator.

A stream is identified by its seed and the path of labels used to split it.
Children are keyed by hashing that path, so ``rng.split("a")`` yields the
same stream no matter how much the parent has already been consumed.
"""

import hashlib
import json

import numpy as np

from .tensor import Tensor


def _derive_key(seed, path):
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(8, "little", signed=False))
    for label in path:
        h.update(b"\x00")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def _size(shape):
    if shape is None or isinstance(shape, (int, np.integer)):
        return shape
    return tuple(shape)


class Rng:
    def __init__(self, seed, path=()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(str(p) for p in path)
        self._bitgen = np.random.Philox(key=_derive_key(self.seed, self.path))
        self.gen = np.random.Generator(self._bitgen)

    def split(self, label):
        return Rng(self.seed, self.path + (str(label),))

    def normal(self, shape):
        return self.gen.standard_normal(size=_size(shape))

    def uniform(self, shape=None, low=0.0, high=1.0):
        return self.gen.uniform(low, high, size=_size(shape))

    def integers(self, low, high, size=None):
        return self.gen.integers(low, high, size=size)

    # state round-trip for checkpoints
    def get_state(self):
        st = self._bitgen.state
        return {
            "seed": self.seed,
            "path": list(self.path),
            "counter": [int(v) for v in st["state"]["counter"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def state_json(self):
        return json.dumps(self.get_state(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_state(cls, state):
        if isinstance(state, str):
            state = json.loads(state)
        rng = cls(state["seed"], state["path"])
        st = rng._bitgen.state
        st["state"]["counter"] = np.array(state["counter"], dtype=np.uint64)
        st["buffer"] = np.array(state["buffer"], dtype=np.uint64)
        st["buffer_pos"] = state["buffer_pos"]
        st["has_uint32"] = state["has_uint32"]
        st["uinteger"] = state["uinteger"]
        rng._bitgen.state = st
        return rng

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={'/'.join(self.path) or '<root>'})"


def randn(rng, shape):
    """Standard-normal tensor drawn from ``rng``."""
    return Tensor._wrap(rng.normal(shape))


def rand_uniform(rng, shape):
    """Uniform [0, 1) tensor drawn from ``rng``."""
    return Tensor._wrap(rng.uniform(shape))
