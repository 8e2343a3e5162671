import collections

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedistill.data import (AllocationError, IdxFormatError, LabeledDataset, ShardPlan, load_idx, shard,
                            synth_classification, train_test_split, write_idx)

# two 2x2 images, labels 3 and 7, spelled out byte by byte
IMAGES = bytes([0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2,
                0, 255, 51, 102,
                255, 0, 0, 0])
LABELS = bytes([0, 0, 8, 1, 0, 0, 0, 2, 3, 7])


@pytest.fixture
def idx_pair(tmp_path):
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    ip.write_bytes(IMAGES)
    lp.write_bytes(LABELS)
    return ip, lp


class TestIdx:
    def test_fixture(self, idx_pair):
        ds = load_idx(*idx_pair)
        assert len(ds) == 2 and ds.dim == 4
        assert ds.labels.tolist() == [3, 7]
        assert ds.samples[0].tolist() == [0.0, 1.0, 0.2, 0.4]
        assert ds.samples[1].tolist() == [1.0, 0.0, 0.0, 0.0]

    def test_writer_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        imgs = rng.integers(0, 256, (5, 28, 28), dtype=np.uint8)
        labs = rng.integers(0, 10, 5)
        write_idx(imgs, labs, tmp_path / "i", tmp_path / "l")
        ds = load_idx(tmp_path / "i", tmp_path / "l")
        assert ds.dim == 784
        assert np.array_equal(ds.samples, imgs.reshape(5, -1) / 255.0)
        assert ds.labels.tolist() == labs.tolist()

    def test_wrong_magic(self, idx_pair):
        ip, lp = idx_pair
        with pytest.raises(IdxFormatError, match="magic"):
            load_idx(lp, lp)

    def test_empty_file(self, idx_pair, tmp_path):
        empty = tmp_path / "empty"
        empty.write_bytes(b"")
        with pytest.raises(IdxFormatError, match="truncated"):
            load_idx(empty, idx_pair[1])

    def test_truncated_payload(self, idx_pair):
        ip, lp = idx_pair
        ip.write_bytes(IMAGES[:-1])
        with pytest.raises(IdxFormatError, match="truncated"):
            load_idx(ip, lp)

    def test_count_mismatch(self, idx_pair):
        ip, lp = idx_pair
        lp.write_bytes(bytes([0, 0, 8, 1, 0, 0, 0, 1, 3]))
        with pytest.raises(IdxFormatError, match="count"):
            load_idx(ip, lp)


class TestSynth:
    def test_balanced(self):
        ds = synth_classification(10, 50, 8, seed=1)
        assert len(ds) == 500
        assert ds.label_histogram().tolist() == [50] * 10

    def test_deterministic(self):
        a = synth_classification(4, 10, 3, seed=9)
        b = synth_classification(4, 10, 3, seed=9)
        assert a.digest() == b.digest()
        assert a.digest() != synth_classification(4, 10, 3, seed=10).digest()

    def test_nearest_centroid_separates(self):
        ds = synth_classification(10, 100, 32, seed=2)
        train, test = train_test_split(ds, 0.2, seed=0)
        centroids = np.stack([train.samples[train.labels == k].mean(axis=0) for k in range(10)])
        dists = ((test.samples[:, None, :] - centroids[None]) ** 2).sum(axis=2)
        assert np.mean(dists.argmin(axis=1) == test.labels) > 0.9

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            synth_classification(0, 5, 2)


def test_split_is_stratified_partition():
    ds = synth_classification(5, 20, 3, seed=0)
    train, test = train_test_split(ds, 0.2, seed=1)
    assert test.label_histogram().tolist() == [4] * 5
    assert len(train) + len(test) == len(ds)


def test_dataset_validation():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 3)), [0, 5], 3)
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 3)), [0], 3)


def test_csv_export(tmp_path):
    ds = LabeledDataset([[0.1, 2.0]], [1], 2)
    ds.to_csv(tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text().strip() == "0.10000000000000001,2,1"


def _rows(ds):
    return collections.Counter((tuple(x), int(y)) for x, y in zip(ds.samples, ds.labels))


class TestShard:
    def test_iid_even(self):
        ds = synth_classification(10, 50, 4, seed=0)
        a, b = shard(ds, 2, ShardPlan("iid", seed=0))
        assert len(a) == len(b) == 250
        assert a.label_histogram().tolist() == b.label_histogram().tolist() == [25] * 10

    def test_default_non_iid_recipe(self):
        ds = synth_classification(10, 200, 4, seed=0)
        shards = shard(ds, 2, ShardPlan("non_iid", seed=3))
        for s in shards:
            assert len(s) == 2 * 2 + 8 * 62
            assert sorted(s.label_histogram().tolist()) == [2, 2] + [62] * 8

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 5), st.integers(0, 1000))
    def test_iid_is_partition(self, workers, seed):
        ds = synth_classification(3, 7, 2, seed=seed)
        parts = shard(ds, workers, ShardPlan("iid", seed=seed))
        total = collections.Counter()
        for p in parts:
            total += _rows(p)
        assert total == _rows(ds)

    def test_non_iid_disjoint(self):
        ds = synth_classification(10, 200, 4, seed=1)
        parts = shard(ds, 3, ShardPlan("non_iid", seed=1))
        seen = set()
        for p in parts:
            rows = set(map(tuple, p.samples))
            assert not rows & seen
            seen |= rows

    def test_explicit_counts(self):
        ds = synth_classification(3, 10, 2, seed=0)
        plan = ShardPlan("non_iid", {0: {0: 5, 1: 1}, 1: {2: 10}})
        a, b = shard(ds, 2, plan)
        assert a.label_histogram().tolist() == [5, 1, 0]
        assert b.label_histogram().tolist() == [0, 0, 10]

    def test_infeasible_names_label(self):
        ds = synth_classification(3, 10, 2, seed=0)
        plan = ShardPlan("non_iid", {0: {1: 8}, 1: {1: 8}})
        with pytest.raises(AllocationError, match="label 1"):
            shard(ds, 2, plan)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            ShardPlan("dirichlet")

    def test_deterministic(self):
        ds = synth_classification(10, 200, 4, seed=0)
        a = shard(ds, 2, ShardPlan("non_iid", seed=5))
        b = shard(ds, 2, ShardPlan("non_iid", seed=5))
        assert [s.digest() for s in a] == [s.digest() for s in b]
