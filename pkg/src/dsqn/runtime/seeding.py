"""One root seed fanned out into independent, named random streams."""
import numpy as np

# fixed slots so adding a stream never reshuffles existing ones
STREAMS = ("init", "env", "policy", "replay", "eval", "eval_env")


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    return {
        name: np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(slot,))))
        for slot, name in enumerate(STREAMS)
    }


def child_seed(seed: int, name: str) -> int:
    """Integer seed for consumers (such as environments) that build their own generator."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(STREAMS.index(name),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
