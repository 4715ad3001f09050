"""Derive independent component seeds from one master seed."""

import hashlib


def derive_seed(master: int, *labels) -> int:
    """Stable 63-bit seed from ``master`` and a label path, e.g. ``("task", 3)``."""
    key = ":".join([str(int(master)), *map(str, labels)]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big") >> 1
