"""Independent, reproducible random streams per (run, robot, purpose)."""

import numpy as np

PURPOSES = {"world": 0, "imu": 1, "bias": 2, "pixel": 3, "init": 4}


def stream(seed: int, run: int, robot: int, purpose: str) -> np.random.Generator:
    """Generator for one purpose; streams never overlap across keys.

    World generation is shared by all robots of a run, so callers pass
    ``robot=0`` for it.
    """
    key = (int(run), int(robot), PURPOSES[purpose])
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))
