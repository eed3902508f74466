import zlib

import numpy as np


def stage_seed(run_seed: int, fold: int, stage: str) -> int:
    """Deterministic 31-bit seed for (run seed, fold index, stage name)."""
    ss = np.random.SeedSequence([int(run_seed), int(fold) + 1, zlib.crc32(stage.encode())])
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)
