"""Named random substreams derived from one master seed."""

import zlib

import numpy as np

STREAMS = ("temperature", "location", "availability", "rewards", "recruitment",
           "profiles", "policy", "hyperopt")


def stream(master_seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name``; stable across runs and platforms."""
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=(tag,)))


def streams(master_seed: int, names=STREAMS) -> dict[str, np.random.Generator]:
    return {name: stream(master_seed, name) for name in names}
