"""Collision-resilient sketch built from clustered bucket arrays.

A plain hash sketch mixes unrelated flows in every noisy bucket. Here
the value space is split by a trained cluster model: one bucket array
per cluster, and each flow lands in the array of its nearest center.
Every bucket keeps the running value sum and the distinct-key count,
and a query answers with their ratio, the average of the similar flows
that share the bucket, so collisions cost variance instead of raw
bias.

Incremental streams are handled by caching each open flow's running
total in the membership table and re-homing the flow whenever its
total drifts closer to a different center, so the final state matches
a one-shot insertion of per-flow totals.
"""

import math
import struct
from collections import Counter
from fractions import Fraction

import numpy as np

from .clustering import ClusterModel, InvalidInputError, allocate_buckets, nearest_center
from .hashing import key_digest
from .membership import CuckooTable

MAX_CLUSTERS = 256  # the serialized cluster index is a single byte


class KeyNotFoundError(KeyError):
    """Queried key is not present in the membership table."""


class BucketUnderflowError(RuntimeError):
    """A re-homing step would drive a bucket negative.

    Seen only when distinct flows collide on both fingerprint and
    candidate buckets, so their running totals were merged; the caller
    may treat the flows as merged and continue.
    """


class LssSketch:
    """k clustered bucket arrays of (val_sum, key_count) pairs.

    model supplies the centers; m buckets are split across the arrays
    by the entropy/density/weight policy. counter_width only affects
    the serialized form (in memory the accumulators are plain ints).
    """

    def __init__(self, model: ClusterModel, m: int, hash_seed: int = 0,
                 counter_width: int = 32, expected_flows: int | None = None,
                 membership: CuckooTable | None = None,
                 allocation: list[int] | None = None):
        k = model.k
        if k > MAX_CLUSTERS:
            raise InvalidInputError(f"at most {MAX_CLUSTERS} clusters supported, got {k}")
        if m < k:
            raise InvalidInputError(f"m={m} must be at least the cluster count k={k}")
        if counter_width not in (16, 32, 64):
            raise InvalidInputError(f"counter_width must be 16, 32 or 64, got {counter_width}")
        self.model = model
        self.m = m
        self.hash_seed = hash_seed
        self.counter_width = counter_width
        if allocation is None:
            allocation = allocate_buckets(model, m)
        elif sum(allocation) != m or len(allocation) != k:
            raise InvalidInputError("allocation inconsistent with m and k")
        self.allocation = list(allocation)
        self._val_sums = [[0] * size for size in self.allocation]
        self._key_counts = [[0] * size for size in self.allocation]
        if membership is None:
            if expected_flows is None:
                expected_flows = max(64, 10 * m)
            membership = CuckooTable(capacity=expected_flows, seed=hash_seed)
        self.membership = membership
        self.saturated = False

    # -- inserts ---------------------------------------------------------

    def insert(self, key: bytes, value: int) -> None:
        """Insert a key that appears exactly once in the stream."""
        if value < 0:
            raise InvalidInputError("values must be non-negative")
        bucket_h, fp, idx_h = key_digest(key, self.hash_seed)
        i = nearest_center(self.model, value)
        slot = bucket_h % self.allocation[i]
        self._val_sums[i][slot] += value
        self._key_counts[i][slot] += 1
        self.membership._insert_fp(fp, idx_h & self.membership._mask, i, value)

    def insert_duplicate(self, key: bytes, value: int) -> None:
        """Insert one increment of a flow that may appear many times.

        A first-seen flow behaves like insert() and its running total is
        cached in the membership table. A seen flow adds the increment
        to its current bucket, then migrates its whole total to another
        array when the total has moved closer to a different center.
        """
        if value < 0:
            raise InvalidInputError("values must be non-negative")
        table = self.membership
        bucket_h, fp, idx_h = key_digest(key, self.hash_seed)
        i1 = idx_h & table._mask
        slot = table._find_slot(fp, i1)
        if slot is None:
            i = nearest_center(self.model, value)
            pos = bucket_h % self.allocation[i]
            self._val_sums[i][pos] += value
            self._key_counts[i][pos] += 1
            table._insert_fp(fp, i1, i, value)
            return
        if table.squeezed:
            raise RuntimeError("cannot insert into a closed (squeezed) window")
        old = table._cis[slot]
        total = table._vals[slot] + value
        pos_old = bucket_h % self.allocation[old]
        vals_old = self._val_sums[old]
        vals_old[pos_old] += value
        new = nearest_center(self.model, total)
        if new == old:
            table._vals[slot] = total
            return
        counts_old = self._key_counts[old]
        if vals_old[pos_old] < total or counts_old[pos_old] < 1:
            # merged fingerprints: the cached total exceeds what this
            # bucket ever received, so the move cannot be applied
            table._vals[slot] = total
            raise BucketUnderflowError(
                f"bucket ({old},{pos_old}) cannot release total {total}"
            )
        vals_old[pos_old] -= total
        counts_old[pos_old] -= 1
        pos_new = bucket_h % self.allocation[new]
        self._val_sums[new][pos_new] += total
        self._key_counts[new][pos_new] += 1
        table._cis[slot] = new
        table._vals[slot] = total

    # -- queries ---------------------------------------------------------

    def _locate(self, key: bytes):
        bucket_h, fp, idx_h = key_digest(key, self.hash_seed)
        hit = self.membership._lookup_fp(fp, idx_h & self.membership._mask)
        if hit is None:
            raise KeyNotFoundError(f"key {key!r} was never inserted")
        i = hit.cluster_index
        return i, bucket_h % self.allocation[i]

    def query_exact(self, key: bytes) -> Fraction:
        """Bucket average as an exact rational."""
        i, slot = self._locate(key)
        count = self._key_counts[i][slot]
        if count == 0:
            raise KeyNotFoundError(f"key {key!r} maps to an empty bucket")
        return Fraction(self._val_sums[i][slot], count)

    def query(self, key: bytes) -> float:
        """Estimated flow total: the val_sum/key_count bucket average."""
        return float(self.query_exact(key))

    def contains(self, key: bytes) -> bool:
        _, fp, idx_h = key_digest(key, self.hash_seed)
        return self.membership._lookup_fp(fp, idx_h & self.membership._mask) is not None

    def cardinality(self) -> int:
        """Exact distinct-flow count: the sum of all key_count fields."""
        return sum(sum(counts) for counts in self._key_counts)

    def total_value(self) -> int:
        """Sum of val_sum over every bucket; equals the sum of inserted values."""
        return sum(sum(vals) for vals in self._val_sums)

    def size_distribution(self, keys) -> list[float]:
        """Per-key estimates, in input order."""
        return [self.query(k) for k in keys]

    def entropy(self, keys) -> float:
        """Base-2 entropy of the distribution of estimated sizes."""
        keys = list(keys)
        if not keys:
            raise InvalidInputError("entropy needs at least one key")
        counts = Counter(self.query_exact(k) for k in keys)
        n = len(keys)
        return -sum((c / n) * math.log2(c / n) for c in counts.values())

    def heavy_hitters(self, keys, threshold: float) -> list[tuple[bytes, float]]:
        """Keys whose estimate exceeds threshold, largest first."""
        if threshold < 0:
            raise InvalidInputError("threshold must be non-negative")
        hits = [(k, self.query(k)) for k in keys]
        hits = [(k, e) for k, e in hits if e > threshold]
        hits.sort(key=lambda ke: (-ke[1], ke[0]))
        return hits

    def heavy_changes(self, other: "LssSketch", keys, threshold: float) -> list[bytes]:
        """Keys whose estimates differ across the two sketches by more
        than threshold; a key missing from one window counts as 0 there."""
        changed = []
        for k in keys:
            a = self.query(k) if self.contains(k) else 0.0
            b = other.query(k) if other.contains(k) else 0.0
            if abs(a - b) > threshold:
                changed.append(k)
        return changed

    # -- accounting and serialization -------------------------------------

    def sketch_bytes(self) -> int:
        """Serialized footprint of the bucket arrays plus the centers."""
        return self.m * 2 * (self.counter_width // 8) + self.model.k * 4

    def memory_bytes(self, include_membership: bool = True,
                     squeezed_membership: bool = True) -> int:
        """Deployed footprint. Membership is charged at its squeezed
        size by default, which is what a closed window ships."""
        total = self.sketch_bytes()
        if include_membership:
            if squeezed_membership:
                total += self.membership.num_buckets * 4 * 3
            else:
                total += self.membership.memory_bytes()
        return total

    _MAGIC = b"LSS1"
    _HEADER = struct.Struct("<4sBBHIqB")  # magic, version, flags, k, m, hash_seed, counter_width

    _FLAG_MEMBERSHIP = 1
    _FLAG_SATURATED = 2

    def to_bytes(self, include_membership: bool = True) -> bytes:
        """Serialize: header, centers (f32), allocation, bucket pairs at
        the configured counter width, then optionally the membership
        table. Values wider than the counter width are clamped and the
        saturation flag is set in the header."""
        width = self.counter_width
        limit = (1 << width) - 1
        fmt = {16: "H", 32: "I", 64: "Q"}[width]
        k = self.model.k
        flat_vals, flat_counts, saturated = [], [], False
        for i in range(k):
            for v, c in zip(self._val_sums[i], self._key_counts[i]):
                if v > limit or c > limit:
                    saturated = True
                flat_vals.append(min(v, limit))
                flat_counts.append(min(c, limit))
        flags = (self._FLAG_MEMBERSHIP if include_membership else 0) | (
            self._FLAG_SATURATED if saturated else 0
        )
        head = self._HEADER.pack(self._MAGIC, 1, flags, k, self.m, self.hash_seed, width)
        parts = [
            head,
            np.asarray(self.model.centers, dtype="<f4").tobytes(),
            struct.pack(f"<{k}I", *self.allocation),
            struct.pack(f"<{2 * self.m}{fmt}",
                        *[x for pair in zip(flat_vals, flat_counts) for x in pair]),
        ]
        if include_membership:
            body = self.membership.to_bytes()
            parts.append(struct.pack("<I", len(body)))
            parts.append(body)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "LssSketch":
        off = 0
        if len(data) < cls._HEADER.size:
            raise ValueError(f"truncated sketch header at offset {len(data)}")
        magic, version, flags, k, m, hash_seed, width = cls._HEADER.unpack_from(data, off)
        if magic != cls._MAGIC or version != 1:
            raise ValueError(f"bad sketch magic/version at offset 0: {magic!r} v{version}")
        off += cls._HEADER.size
        need = off + 4 * k + 4 * k + 2 * m * (width // 8)
        if len(data) < need:
            raise ValueError(f"truncated sketch body at offset {len(data)} (need {need})")
        centers = np.frombuffer(data, dtype="<f4", count=k, offset=off).astype(np.float64)
        off += 4 * k
        allocation = list(struct.unpack_from(f"<{k}I", data, off))
        off += 4 * k
        fmt = {16: "H", 32: "I", 64: "Q"}[width]
        flat = struct.unpack_from(f"<{2 * m}{fmt}", data, off)
        off += 2 * m * (width // 8)
        membership = None
        if flags & cls._FLAG_MEMBERSHIP:
            if len(data) < off + 4:
                raise ValueError(f"truncated membership length at offset {off}")
            (blen,) = struct.unpack_from("<I", data, off)
            off += 4
            membership = CuckooTable.from_bytes(data[off:off + blen])
            off += blen
        # stats are not wire-carried; only centers and allocation matter
        # for querying and further inserts
        model = ClusterModel(
            centers=tuple(float(c) for c in centers),
            entropy=tuple([0.0] * k),
            weight=tuple([1.0 / k] * k),
            density=tuple([1.0 / k] * k),
            allocation=tuple(allocation),
        )
        sketch = cls(model, m, hash_seed=hash_seed, counter_width=width,
                     membership=membership, allocation=allocation)
        pos = 0
        for i in range(k):
            size = allocation[i]
            for s in range(size):
                sketch._val_sums[i][s] = flat[2 * pos]
                sketch._key_counts[i][s] = flat[2 * pos + 1]
                pos += 1
        sketch.saturated = bool(flags & cls._FLAG_SATURATED)
        return sketch

    def state(self) -> list[list[tuple[int, int]]]:
        """Bucket-for-bucket snapshot, for equivalence checks."""
        return [
            list(zip(self._val_sums[i], self._key_counts[i]))
            for i in range(self.model.k)
        ]
