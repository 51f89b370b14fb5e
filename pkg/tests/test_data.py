import gzip
import struct

import numpy as np
import pytest

from sabfl.data import (
    Dataset,
    IngestionError,
    PartitionConfig,
    generate_synthetic,
    load_csv,
    load_idx,
    partition,
    save_csv,
    train_test_split,
)
from sabfl.models import ConfigurationError, ModelSpec, eval_accuracy, init_params, local_sgd


def write_idx(path, magic, arr, count=None):
    arr = np.asarray(arr, dtype=np.uint8)
    dims = arr.shape[1:]
    header = struct.pack(">II" + "I" * len(dims), magic, arr.shape[0] if count is None else count, *dims)
    data = header + arr.tobytes()
    if str(path).endswith(".gz"):
        with gzip.open(path, "wb") as fh:
            fh.write(data)
    else:
        path.write_bytes(data)


@pytest.fixture
def idx_pair(tmp_path, rng):
    images = rng.integers(0, 256, size=(7, 28, 28))
    labels = np.array([3, 0, 9, 1, 1, 5, 2])
    write_idx(tmp_path / "img", 0x803, images)
    write_idx(tmp_path / "lbl", 0x801, labels)
    return tmp_path / "img", tmp_path / "lbl", images, labels


class TestIDX:
    def test_round_trip(self, idx_pair):
        img, lbl, images, labels = idx_pair
        ds = load_idx(img, lbl)
        assert ds.features.shape == (7, 784)
        np.testing.assert_array_equal(ds.labels, labels)
        np.testing.assert_allclose(ds.features, images.reshape(7, -1) / 255.0)
        assert ds.features.min() >= 0 and ds.features.max() <= 1
        assert ds.num_classes == 10

    def test_gzip(self, tmp_path, rng):
        images = rng.integers(0, 256, size=(3, 4, 4))
        write_idx(tmp_path / "img.gz", 0x803, images)
        write_idx(tmp_path / "lbl.gz", 0x801, np.array([0, 1, 0]))
        assert load_idx(tmp_path / "img.gz", tmp_path / "lbl.gz").features.shape == (3, 16)

    def test_bad_magic(self, idx_pair, tmp_path):
        img, lbl, images, labels = idx_pair
        with pytest.raises(IngestionError, match="magic"):
            load_idx(lbl, img)

    def test_truncated(self, idx_pair, tmp_path):
        img, lbl, *_ = idx_pair
        cut = tmp_path / "cut"
        cut.write_bytes(img.read_bytes()[:-5])
        with pytest.raises(IngestionError, match="payload"):
            load_idx(cut, lbl)

    def test_empty_file(self, idx_pair, tmp_path):
        img, lbl, *_ = idx_pair
        (tmp_path / "empty").write_bytes(b"")
        with pytest.raises(IngestionError):
            load_idx(tmp_path / "empty", lbl)

    def test_count_mismatch(self, idx_pair, tmp_path):
        img, _, _, labels = idx_pair
        write_idx(tmp_path / "short", 0x801, labels[:5])
        with pytest.raises(IngestionError, match="labels"):
            load_idx(img, tmp_path / "short")


def test_csv_round_trip(tmp_path, blobs):
    save_csv(blobs, tmp_path / "d.csv")
    header = (tmp_path / "d.csv").read_text().splitlines()[0]
    assert header == "f0,f1,f2,f3,f4,f5,label"
    back = load_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.features, blobs.features)
    np.testing.assert_array_equal(back.labels, blobs.labels)
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(IngestionError):
        load_csv(tmp_path / "bad.csv")


class TestSynthetic:
    def test_deterministic(self):
        a = generate_synthetic(100, 5, 3, 2.0, seed=9)
        b = generate_synthetic(100, 5, 3, 2.0, seed=9)
        assert a.features.tobytes() == b.features.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()
        assert np.bincount(a.labels).tolist() == [34, 33, 33]

    def test_precondition(self):
        with pytest.raises(ConfigurationError):
            generate_synthetic(2, 5, 3, 1.0, seed=0)

    def trained_accuracy(self, sep, classes, dim, epochs, seed=0):
        ds = generate_synthetic(1200, dim, classes, sep, seed=seed)
        train, test = train_test_split(ds, 400, seed=seed)
        spec = ModelSpec("logistic_regression", dim, classes)
        w = local_sgd(spec, init_params(spec, seed), train.as_minibatch(), epochs, 0.05, 32, rng_seed=seed)
        return eval_accuracy(spec, w, test.as_minibatch())

    def test_well_separated_is_learnable(self):
        assert self.trained_accuracy(5.0, 2, 10, 50) > 0.95

    def test_separation_three_exceeds_ninety(self):
        assert self.trained_accuracy(3.0, 4, 20, 20) > 0.90

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_no_signal_is_chance(self, seed):
        assert abs(self.trained_accuracy(0.0, 4, 10, 20, seed) - 0.25) < 0.1


def test_split_keeps_every_row(blobs):
    train, test = train_test_split(blobs, 100, seed=1)
    assert len(train) == 300 and len(test) == 100
    assert train.split_tag == "train" and test.split_tag == "test"
    merged = np.concatenate([train.features, test.features])
    assert sorted(map(tuple, merged)) == sorted(map(tuple, blobs.features))


class TestPartition:
    @pytest.mark.parametrize("lam", [0.05, 0.1, 1.0, 10.0])
    @pytest.mark.parametrize("seed", range(5))
    def test_disjoint_covering_and_min_size(self, blobs, lam, seed):
        shards = partition(blobs, PartitionConfig(lam, 10, seed, min_shard_size=12))
        idx = np.concatenate([s.indices for s in shards])
        assert len(idx) == len(np.unique(idx)) == len(blobs)
        assert all(len(s) >= 12 for s in shards)
        assert [s.owner for s in shards] == list(range(10))

    def test_deterministic(self, blobs):
        a = partition(blobs, PartitionConfig(0.3, 6, 4, 10))
        b = partition(blobs, PartitionConfig(0.3, 6, 4, 10))
        assert all(np.array_equal(x.indices, y.indices) for x, y in zip(a, b))

    def test_huge_lambda_is_near_uniform(self):
        ds = generate_synthetic(4000, 3, 4, 1.0, seed=0)
        shards = partition(ds, PartitionConfig(1e6, 4, 0, 10))
        sizes = np.array([len(s) for s in shards])
        assert np.all(np.abs(sizes - 1000) <= 50)
        glob = np.bincount(ds.labels, minlength=4) / len(ds)
        for s in shards:
            mix = np.bincount(s.labels, minlength=4) / len(s)
            assert np.all(np.abs(mix - glob) <= 0.05)

    @staticmethod
    def heterogeneity(ds, lam):
        cvs, entropies = [], []
        for seed in range(20):
            shards = partition(ds, PartitionConfig(lam, 20, seed, 20))
            sizes = np.array([len(s) for s in shards], dtype=float)
            cvs.append(sizes.std() / sizes.mean())
            ents = []
            for s in shards:
                p = np.bincount(s.labels, minlength=ds.num_classes) / len(s)
                p = p[p > 0]
                ents.append(-(p * np.log(p)).sum())
            entropies.append(np.var(ents))
        return np.mean(cvs), np.mean(entropies)

    def test_smaller_lambda_is_more_heterogeneous(self):
        ds = generate_synthetic(4000, 3, 4, 1.0, seed=0)
        cv_low, ent_low = self.heterogeneity(ds, 0.1)
        cv_mid, ent_mid = self.heterogeneity(ds, 1.0)
        cv_high, ent_high = self.heterogeneity(ds, 100.0)
        assert cv_low > cv_mid > cv_high
        assert ent_low > ent_high and ent_mid > ent_high

    def test_infeasible_min_size(self, blobs):
        with pytest.raises(ConfigurationError):
            partition(blobs, PartitionConfig(1.0, 10, 0, min_shard_size=41))

    @pytest.mark.parametrize("kwargs", [dict(lam=0.0), dict(num_participants=2), dict(min_shard_size=0)])
    def test_bad_config(self, kwargs):
        with pytest.raises(ConfigurationError):
            PartitionConfig(**kwargs)

    def test_shard_is_a_view(self, blobs):
        shard = partition(blobs, PartitionConfig(1.0, 4, 0, 10))[0]
        assert shard.dataset is blobs
        np.testing.assert_array_equal(shard.features, blobs.features[shard.indices])
        np.testing.assert_array_equal(shard.labels, blobs.labels[shard.indices])


def test_dataset_rejects_misaligned_rows():
    with pytest.raises(ConfigurationError):
        Dataset(np.zeros((3, 2)), np.zeros(4, dtype=int), 2)
