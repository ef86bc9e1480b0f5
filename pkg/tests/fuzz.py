"""Random bundle generator shared by the persistence tests."""

import string

import numpy as np

from latentpinn.tensorio import TensorBundle

_NAME_CHARS = string.ascii_letters + string.digits + "_./-"


def random_bundle(rng: np.random.Generator, max_tensors: int = 6, max_rank: int = 4) -> TensorBundle:
    entries = {}
    for _ in range(int(rng.integers(0, max_tensors + 1))):
        length = int(rng.integers(1, 16))
        name = "".join(rng.choice(list(_NAME_CHARS), size=length))
        rank = int(rng.integers(0, max_rank + 1))
        shape = tuple(int(s) for s in rng.integers(0, 5, size=rank))
        dtype = np.float32 if rng.random() < 0.5 else np.float64
        entries[name] = (rng.standard_normal(shape) * 10 ** rng.uniform(-30, 30)).astype(dtype)
    metadata = {}
    for k in range(int(rng.integers(0, 4))):
        choice = int(rng.integers(0, 5))
        value = [
            int(rng.integers(-(2 ** 40), 2 ** 40)),
            float(rng.standard_normal()),
            "s" + str(rng.integers(1_000_000)),
            bool(rng.random() < 0.5),
            [float(x) for x in rng.standard_normal(3)],
        ][choice]
        metadata[f"key{k}"] = value
    return TensorBundle(entries, metadata)
