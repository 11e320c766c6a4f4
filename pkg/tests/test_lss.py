import math
from fractions import Fraction

import numpy as np
import pytest

from flowsketch.baselines import DenseMapping, autoencoder_oracle
from flowsketch.clustering import ClusterModel, InvalidInputError
from flowsketch.hashing import key_digest
from flowsketch.lss import BucketUnderflowError, KeyNotFoundError, LssSketch


def two_center_model(lo=15.0, hi=80.0):
    total = lo + hi
    return ClusterModel(centers=(lo, hi), entropy=(0.5, 0.5),
                        weight=(lo / total, hi / total), density=(0.5, 0.5))


def single_cluster_model(center=10.0):
    return ClusterModel(centers=(center,), entropy=(0.0,), weight=(1.0,),
                        density=(1.0,))


def uniform_model(k):
    centers = tuple(float(10 * (i + 1)) for i in range(k))
    total = sum(centers)
    return ClusterModel(centers=centers, entropy=tuple([0.5] * k),
                        weight=tuple(c / total for c in centers),
                        density=tuple([1.0 / k] * k))


def keys_for_slots(m, wanted, seed, salt=""):
    """Find distinct keys hashing to the requested slots of an m-bucket
    array (shared hash, slot = bucket_hash % m)."""
    out = []
    i = 0
    for slot in wanted:
        while True:
            key = f"{salt}want{len(out)}-{i}".encode()
            i += 1
            if key_digest(key, seed)[0] % m == slot:
                out.append(key)
                break
    return out


class TestConstruction:
    def test_equal_weights_split_arrays(self):
        model = ClusterModel(centers=(10.0, 20.0), entropy=(0.5, 0.5),
                             weight=(0.5, 0.5), density=(0.5, 0.5))
        sketch = LssSketch(model, 10)
        assert sketch.allocation == [5, 5]
        assert sketch.total_value() == 0
        assert sketch.cardinality() == 0

    def test_default_dimensioning(self):
        model = uniform_model(30)
        sketch = LssSketch(model, 1000)
        assert sum(sketch.allocation) == 1000

    def test_m_below_k_rejected(self):
        with pytest.raises(InvalidInputError):
            LssSketch(two_center_model(), 1)

    def test_cluster_count_cap(self):
        with pytest.raises(InvalidInputError):
            LssSketch(uniform_model(257), 300)


class TestInsertQuery:
    def test_forced_collision_averages(self):
        # both keys land in cluster 0's single bucket: {35, 2} -> 17.5
        sketch = LssSketch(two_center_model(), 2, hash_seed=11)
        sketch.insert(b"f3", 18)
        sketch.insert(b"f4", 17)
        assert sketch._val_sums[0][0] == 35
        assert sketch._key_counts[0][0] == 2
        assert sketch.query(b"f3") == 17.5
        assert sketch.query(b"f4") == 17.5

    def test_lone_key_exact(self):
        sketch = LssSketch(two_center_model(), 2, hash_seed=11)
        sketch.insert(b"fA", 42)
        assert sketch.query(b"fA") == 42.0

    def test_identical_values_exact_under_collisions(self):
        sketch = LssSketch(single_cluster_model(), 1, hash_seed=11)
        for i in range(50):
            sketch.insert(f"same-{i}".encode(), 7)
        for i in range(50):
            assert sketch.query(f"same-{i}".encode()) == 7.0

    def test_query_absent_raises(self):
        sketch = LssSketch(two_center_model(), 2, hash_seed=11)
        with pytest.raises(KeyNotFoundError):
            sketch.query(b"never")

    def test_negative_value_rejected(self):
        sketch = LssSketch(two_center_model(), 2, hash_seed=11)
        with pytest.raises(InvalidInputError):
            sketch.insert(b"x", -1)

    def test_small_instance_matches_dense_oracle(self):
        # four keys paired into two buckets: {3,5} -> 4, {7,9} -> 8
        m = 2
        seed = 13
        keys = keys_for_slots(m, [0, 0, 1, 1], seed)
        values = [3, 5, 7, 9]
        sketch = LssSketch(single_cluster_model(), m, hash_seed=seed)
        for key, v in zip(keys, values):
            sketch.insert(key, v)
        assignment = [key_digest(k, seed)[0] % m for k in keys]
        oracle = autoencoder_oracle(DenseMapping(assignment, m), values)
        assert oracle == [Fraction(4), Fraction(4), Fraction(8), Fraction(8)]
        for key, expected in zip(keys, oracle):
            assert sketch.query_exact(key) == expected


class TestInsertDuplicate:
    def test_same_cluster_accumulates(self):
        sketch = LssSketch(two_center_model(), 2, hash_seed=11)
        sketch.insert_duplicate(b"f", 10)
        sketch.insert_duplicate(b"f", 10)
        assert sketch._val_sums[0][0] == 20
        assert sketch._key_counts[0][0] == 1
        assert sketch.query(b"f") == 20.0

    def test_growth_moves_flow_between_arrays(self):
        sketch = LssSketch(two_center_model(), 2, hash_seed=11)
        sketch.insert_duplicate(b"f", 10)
        sketch.insert_duplicate(b"f", 90)
        assert sketch._val_sums[0][0] == 0
        assert sketch._key_counts[0][0] == 0
        assert sketch._val_sums[1][0] == 100
        assert sketch._key_counts[1][0] == 1
        assert sketch.query(b"f") == 100.0

    def test_fragmentation_equivalent_to_totals(self):
        # any fragmentation must leave the same buckets as one-shot totals
        rng = np.random.default_rng(21)
        model = uniform_model(8)
        for trial in range(20):
            n = 200
            keys = [f"t{trial}-k{i}".encode() for i in range(n)]
            totals = rng.integers(1, 120, size=n)
            fragments = []
            for key, total in zip(keys, totals):
                parts = int(min(rng.integers(1, 6), total))
                if parts > 1:
                    cuts = np.sort(rng.choice(int(total) - 1, size=parts - 1,
                                              replace=False)) + 1
                else:
                    cuts = np.array([], dtype=np.int64)
                bounds = np.concatenate(([0], cuts, [total]))
                for piece in np.diff(bounds):
                    fragments.append((key, int(piece)))
            order = rng.permutation(len(fragments))
            incremental = LssSketch(model, 64, hash_seed=31, expected_flows=n)
            for idx in order:
                key, piece = fragments[idx]
                incremental.insert_duplicate(key, piece)
            oneshot = LssSketch(model, 64, hash_seed=31, expected_flows=n)
            for key, total in zip(keys, totals):
                oneshot.insert(key, int(total))
            assert incremental.state() == oneshot.state()
            assert incremental.cardinality() == n

    def test_conservation_through_remaps(self):
        rng = np.random.default_rng(22)
        model = uniform_model(5)
        sketch = LssSketch(model, 25, hash_seed=7, expected_flows=100)
        total = 0
        for i in range(500):
            key = f"k{i % 40}".encode()
            v = int(rng.integers(0, 30))
            sketch.insert_duplicate(key, v)
            total += v
            assert sketch.total_value() == total

    def test_underflow_from_merged_fingerprints(self):
        # same fingerprint and bucket: the table merges the two flows,
        # and the re-homing step must refuse to strip the shared bucket
        model = two_center_model()
        sketch = LssSketch(model, 2, hash_seed=11)
        fp, i1 = sketch.membership._fp_and_index(b"real")
        sketch.insert_duplicate(b"real", 10)
        # forge a merged cache entry far above what the bucket holds
        sketch.membership._update_fp(fp, i1, 0, 10_000)
        with pytest.raises(BucketUnderflowError):
            sketch.insert_duplicate(b"real", 90)


class TestQueryTasks:
    def build(self):
        sketch = LssSketch(uniform_model(4), 100, hash_seed=19, expected_flows=64)
        sizes = {b"a": 100, b"b": 1, b"c": 1, b"d": 35}
        for k, v in sizes.items():
            sketch.insert(k, v)
        return sketch, sizes

    def test_cardinality_counts_distinct(self):
        sketch, sizes = self.build()
        assert sketch.cardinality() == 4
        fragmented = LssSketch(uniform_model(4), 100, hash_seed=19)
        for _ in range(5):
            fragmented.insert_duplicate(b"one", 3)
        assert fragmented.cardinality() == 1

    def test_size_distribution_order_preserving(self):
        sketch, sizes = self.build()
        keys = [b"d", b"a", b"b"]
        ests = sketch.size_distribution(keys)
        assert ests == [sketch.query(k) for k in keys]
        assert sketch.size_distribution([]) == []

    def test_entropy_formula(self):
        sketch = LssSketch(single_cluster_model(), 4, hash_seed=23)
        keys = keys_for_slots(4, [0, 0, 1], 23)
        for key, v in zip(keys, [2, 2, 4]):
            sketch.insert(key, v)
        expected = -(2 / 3 * math.log2(2 / 3) + 1 / 3 * math.log2(1 / 3))
        assert sketch.entropy(keys) == pytest.approx(expected)
        assert expected == pytest.approx(0.9183, abs=1e-4)

    def test_entropy_degenerate_cases(self):
        sketch, sizes = self.build()
        only = [b"b", b"c"]  # identical estimates
        assert sketch.entropy(only) == 0.0
        distinct = [b"a", b"b", b"d"]
        if len({sketch.query(k) for k in distinct}) == 3:
            assert sketch.entropy(distinct) == pytest.approx(math.log2(3))
        with pytest.raises(InvalidInputError):
            sketch.entropy([])

    def test_heavy_hitters_threshold_and_order(self):
        sketch, sizes = self.build()
        hits = sketch.heavy_hitters(list(sizes), 50)
        assert [k for k, _ in hits] == [b"a"]
        assert sketch.heavy_hitters(list(sizes), 1e9) == []
        everything = sketch.heavy_hitters(list(sizes), 0)
        assert [e for _, e in everything] == sorted(
            (e for _, e in everything), reverse=True)

    def test_heavy_changes(self):
        model = uniform_model(4)
        a = LssSketch(model, 100, hash_seed=19)
        b = LssSketch(model, 100, hash_seed=19)
        for k, v in {b"x": 10, b"y": 60}.items():
            a.insert(k, v)
            b.insert(k, v)
        b.insert(b"new", 100)
        keys = [b"x", b"y", b"new"]
        assert a.heavy_changes(a, keys, 0.0) == []
        assert b.heavy_changes(a, keys, 50) == [b"new"]
        assert set(b.heavy_changes(a, keys, 0.0)) == {b"new"}


class TestStatisticalProperties:
    def test_average_estimator_unbiased(self):
        # values i.i.d. in one cluster; signed error centered on zero
        rng = np.random.default_rng(33)
        mu, spread, n = 100, 20, 8
        errors = []
        for trial in range(1000):
            sketch = LssSketch(single_cluster_model(float(mu)), 1,
                               hash_seed=trial, expected_flows=16)
            values = rng.integers(mu - spread, mu + spread + 1, size=n)
            keys = [f"u{trial}-{i}".encode() for i in range(n)]
            for key, v in zip(keys, values):
                sketch.insert(key, int(v))
            pick = int(rng.integers(n))
            errors.append(sketch.query(keys[pick]) - float(values[pick]))
        errors = np.asarray(errors)
        se = errors.std(ddof=1) / math.sqrt(len(errors))
        assert abs(errors.mean()) <= 3 * se

    def test_deviation_tail_bound(self):
        # Pr(|estimate - true| >= a) <= M^2 / ((a-M)^2 n^2) for a > 2M
        rng = np.random.default_rng(34)
        mu, m_spread, n = 50.0, 10, 6
        exceed = {3: 0, 4: 0}
        trials = 1000
        for trial in range(trials):
            sketch = LssSketch(single_cluster_model(mu), 1,
                               hash_seed=trial, expected_flows=16)
            values = rng.integers(int(mu) - m_spread, int(mu) + m_spread + 1, size=n)
            keys = [f"d{trial}-{i}".encode() for i in range(n)]
            for key, v in zip(keys, values):
                sketch.insert(key, int(v))
            pick = int(rng.integers(n))
            err = abs(sketch.query(keys[pick]) - float(values[pick]))
            for mult in exceed:
                if err >= mult * m_spread:
                    exceed[mult] += 1
        for mult, count in exceed.items():
            a = mult * m_spread
            bound = m_spread**2 / ((a - m_spread) ** 2 * n**2)
            assert count / trials <= bound

    def test_single_key_buckets_always_exact(self):
        rng = np.random.default_rng(35)
        sketch = LssSketch(uniform_model(6), 600, hash_seed=41, expected_flows=256)
        truth = {}
        for i in range(150):
            key = f"e{i}".encode()
            v = int(rng.integers(1, 70))
            sketch.insert(key, v)
            truth[key] = v
        for key, v in truth.items():
            i, slot = sketch._locate(key)
            if sketch._key_counts[i][slot] == 1:
                assert sketch.query(key) == float(v)


class TestSerialization:
    def test_empty_round_trip(self):
        sketch = LssSketch(uniform_model(3), 12, hash_seed=3)
        back = LssSketch.from_bytes(sketch.to_bytes())
        assert back.state() == sketch.state()
        assert back.m == 12 and back.model.k == 3

    def test_populated_round_trip_preserves_queries(self):
        rng = np.random.default_rng(44)
        sketch = LssSketch(uniform_model(5), 50, hash_seed=9, expected_flows=128)
        keys = [f"s{i}".encode() for i in range(100)]
        for key in keys:
            sketch.insert_duplicate(key, int(rng.integers(0, 60)))
        blob = sketch.to_bytes()
        back = LssSketch.from_bytes(blob)
        assert back.state() == sketch.state()
        for key in keys:
            assert back.query_exact(key) == sketch.query_exact(key)
        assert back.to_bytes() == blob

    def test_footprint_at_compact_dimensions(self):
        # 1,000 16-bit buckets + 30 four-byte centers ~ 4.12 KB
        sketch = LssSketch(uniform_model(30), 1000, counter_width=16)
        payload = sketch.to_bytes(include_membership=False)
        assert 4120 <= len(payload) <= 4120 * 1.05
        assert sketch.sketch_bytes() == 4120

    def test_malformed_bytes_rejected_with_offset(self):
        sketch = LssSketch(uniform_model(3), 12)
        blob = sketch.to_bytes()
        with pytest.raises(ValueError, match="offset"):
            LssSketch.from_bytes(blob[:10])
        with pytest.raises(ValueError, match="magic"):
            LssSketch.from_bytes(b"XXXX" + blob[4:])

    def test_saturation_flagged_at_narrow_width(self):
        sketch = LssSketch(uniform_model(2), 8, counter_width=16)
        sketch.insert(b"big", 70_000)  # exceeds 16-bit field
        back = LssSketch.from_bytes(sketch.to_bytes())
        assert back.saturated
        assert back.query(b"big") == 65535.0

    def test_without_membership_still_counts(self):
        sketch = LssSketch(uniform_model(2), 8)
        sketch.insert(b"k", 5)
        back = LssSketch.from_bytes(sketch.to_bytes(include_membership=False))
        assert back.cardinality() == 1
        assert back.total_value() == 5
        with pytest.raises(KeyNotFoundError):
            back.query(b"k")
