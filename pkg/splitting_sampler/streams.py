import logging
import math

from typing import List, Sequence

import numpy as np

from splitting_sampler.exceptions import ContractError


logger = logging.getLogger(__name__)


DEFAULT_BLOCK_SIZE = 4096
SEED_DERIVATION = (
    "chain block b (chains [b*block_size, (b+1)*block_size)) draws from "
    "numpy Generator(Philox(SeedSequence([seed, stream, b])))")


class ChainStreams:
    """
    Counter-based random streams for a batch of chains.

    Chains are split into fixed-size blocks and every block owns a Philox
    generator keyed on (seed, stream, block index). A draw of shape
    (n_chains, ...) concatenates the per-block draws, so any chain's noise
    depends only on the seed, the block layout and the call sequence, never
    on how many workers fill the blocks.
    """

    def __init__(self, seed: int, n_chains: int,
                 block_size: int = DEFAULT_BLOCK_SIZE, stream: int = 0):
        if n_chains < 1:
            raise ContractError(f"n_chains must be >= 1, got {n_chains}")
        if block_size < 1:
            raise ContractError(f"block_size must be >= 1, got {block_size}")
        self.seed = seed
        self.n_chains = n_chains
        self.block_size = block_size
        self.stream = stream
        n_blocks = math.ceil(n_chains / block_size)
        self._generators: List[np.random.Generator] = [
            np.random.Generator(np.random.Philox(
                np.random.SeedSequence([seed, stream, block])))
            for block in range(n_blocks)
        ]

    def standard_normal(self, size: Sequence[int]) -> np.ndarray:
        size = tuple(size)
        if not size or size[0] != self.n_chains:
            raise ContractError(
                f"Leading axis of {size} must be the chain axis ({self.n_chains})")

        out = np.empty(size)
        for block, gen in enumerate(self._generators):
            lo = block * self.block_size
            hi = min(self.n_chains, lo + self.block_size)
            out[lo:hi] = gen.standard_normal((hi - lo,) + size[1:])

        return out


class ZeroNoise:
    """Generator stand-in whose every draw is zero: runs a step on its mean map."""

    def standard_normal(self, size: Sequence[int]) -> np.ndarray:
        return np.zeros(tuple(size))
