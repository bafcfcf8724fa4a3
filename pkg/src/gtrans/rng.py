"""Seeded, splittable random streams (Philox counter-based generator)."""

from __future__ import annotations

import numpy as np

# stream ids so init, dropout and shuffling never share draws
INIT, DROPOUT, SHUFFLE, DATA = 0, 1, 2, 3


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *stream])))


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-safe snapshot of a Philox generator."""

    def plain(v):
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        if isinstance(v, np.ndarray):
            return {"__array__": [int(x) for x in v.tolist()], "dtype": str(v.dtype)}
        if isinstance(v, np.integer):
            return int(v)
        return v

    return plain(rng.bit_generator.state)


def restore_rng(state: dict) -> np.random.Generator:
    def arrays(v):
        if isinstance(v, dict):
            if "__array__" in v:
                return np.array(v["__array__"], dtype=v["dtype"])
            return {k: arrays(x) for k, x in v.items()}
        return v

    bitgen = np.random.Philox()
    bitgen.state = arrays(state)
    return np.random.Generator(bitgen)
