"""Per-item seeds derived from one master seed.

Every random choice in a batch run comes from ``item_seed(master, item_id)``,
so results do not depend on scheduling or worker count.
"""
import hashlib

import numpy as np


def item_seed(master_seed: int, item_id: str) -> int:
    digest = hashlib.sha256(f"{int(master_seed)}\x1f{item_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def item_rng(seed: int, item_id: str = "") -> np.random.Generator:
    return np.random.default_rng(item_seed(seed, item_id))
