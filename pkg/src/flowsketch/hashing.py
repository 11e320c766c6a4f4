"""Seeded hashing shared by the sketches and the membership table.

All structures in this package need stable, seedable hashes so that
serialized state round-trips bit-for-bit across processes (Python's
builtin ``hash`` is salted per process and must never be used here).
A single keyed blake2b call per key yields enough independent bytes
for the bucket index, the 16-bit membership fingerprint, and the
cuckoo-table index, so the hot insert path hashes each key once.
"""

import hashlib

_MASK64 = (1 << 64) - 1


def _seed_bytes(seed: int) -> bytes:
    return (seed & _MASK64).to_bytes(8, "little")


def key_digest(key: bytes, seed: int) -> tuple[int, int, int]:
    """Hash a key once and split the digest into the three values the
    sketch structures need.

    Returns (bucket_hash, fingerprint, index_hash):
      bucket_hash: 64-bit value, reduced modulo a bucket-array size
      fingerprint: 16-bit nonzero membership fingerprint (0 is the
        empty-slot marker, so a zero fingerprint is remapped to 1)
      index_hash:  32-bit value for the cuckoo table's primary bucket
    """
    d = hashlib.blake2b(key, digest_size=16, key=_seed_bytes(seed)).digest()
    bucket_hash = int.from_bytes(d[0:8], "little")
    fingerprint = int.from_bytes(d[8:10], "little") or 1
    index_hash = int.from_bytes(d[10:14], "little")
    return bucket_hash, fingerprint, index_hash


def bank_hash(key: bytes, seed: int, bank: int) -> tuple[int, int]:
    """Per-bank hash for the multi-bank baselines.

    Returns (index_hash, sign) where sign is +1 or -1; the sign stream
    is independent of the index bits.
    """
    d = hashlib.blake2b(
        key, digest_size=9, key=_seed_bytes(seed * 0x9E3779B97F4A7C15 + bank + 1)
    ).digest()
    idx = int.from_bytes(d[0:8], "little")
    sign = 1 if d[8] & 1 else -1
    return idx, sign


def mix16(fp: int) -> int:
    """Cheap integer mix of a 16-bit fingerprint, used to derive the
    alternate cuckoo bucket (partial-key cuckoo hashing)."""
    x = (fp * 0x9E3779B97F4A7C15) & _MASK64
    x ^= x >> 29
    x = (x * 0xBF58476D1CE4E5B9) & _MASK64
    x ^= x >> 32
    return x
