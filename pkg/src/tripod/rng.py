"""Seeded, independent random substreams (data, perturbations, initialization)."""

from __future__ import annotations

import numpy as np

STREAMS = ("data", "perturb", "init", "eval")


class RngState:
    """One PCG64 generator per named substream, all derived from a single seed.

    Substreams are spawned from a common ``SeedSequence`` so they are
    independent by construction, and identical seeds give identical draws.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        children = np.random.SeedSequence(self.seed).spawn(len(STREAMS))
        self._gens = {name: np.random.Generator(np.random.PCG64(ss)) for name, ss in zip(STREAMS, children)}

    def __getattr__(self, name: str) -> np.random.Generator:
        try:
            return self.__dict__["_gens"][name]
        except KeyError:
            raise AttributeError(name) from None

    def state(self) -> dict:
        return {"seed": self.seed, "streams": {k: g.bit_generator.state for k, g in self._gens.items()}}

    @classmethod
    def from_state(cls, state: dict) -> "RngState":
        rng = cls(state["seed"])
        for name, st in state["streams"].items():
            rng._gens[name].bit_generator.state = st
        return rng
