import hashlib


def derive_seed(seed, *names):
    """Deterministic 63-bit sub-seed for a named stream under ``seed``."""
    key = "/".join([str(int(seed))] + [str(n) for n in names]).encode()
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return int.from_bytes(digest, "little") & ((1 << 63) - 1)
