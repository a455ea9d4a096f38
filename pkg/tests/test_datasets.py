import numpy as np
import pytest

from feddgm import datasets as dst


def test_builtin_determinism():
    a = dst.gauss_blobs(classes=2, n=200, seed=7)
    b = dst.load_dataset("gauss-blobs", classes=2, n=200, seed=7)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    c = dst.gauss_blobs(classes=2, n=200, seed=8)
    assert a.images.tobytes() != c.images.tobytes()


def test_tiny_digits_contract():
    ds = dst.tiny_digits(n=300, seed=1)
    assert ds.classes == 10
    assert ds.image_shape == (8, 8, 1)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert np.bincount(ds.labels, minlength=10).min() >= 25


def test_tiny_digits_classes_distinguishable():
    ds = dst.tiny_digits(n=500, seed=3)
    means = np.stack([ds.images[ds.labels == c].mean(axis=0) for c in range(10)])
    flat = means.reshape(10, -1)
    dists = np.linalg.norm(flat[:, None] - flat[None, :], axis=2)
    np.fill_diagonal(dists, np.inf)
    assert dists.min() > 0.5


def test_two_spirals_contract():
    ds = dst.two_spirals(n=200, seed=0)
    assert ds.classes == 2 and len(ds) == 200
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


def test_idx_roundtrip(tmp_path):
    ds = dst.tiny_digits(n=64, seed=5)
    dst.write_idx_dataset(tmp_path / "td", ds)
    back = dst.read_idx_dataset(tmp_path / "td")
    assert back.classes == ds.classes
    np.testing.assert_array_equal(back.labels, ds.labels)
    # bytes were quantized to u8 on write, so agreement is to 1/255
    assert np.abs(back.images - ds.images).max() <= 0.5 / 255


def test_idx_bad_magic(tmp_path):
    d = tmp_path / "bad"
    ds = dst.gauss_blobs(n=20, seed=0)
    dst.write_idx_dataset(d, ds)
    raw = bytearray((d / "images.idx").read_bytes())
    raw[3] = 0x99
    (d / "images.idx").write_bytes(bytes(raw))
    with pytest.raises(dst.DatasetFormatError, match="magic"):
        dst.read_idx_dataset(d)


def test_load_dataset_unknown_source(tmp_path):
    with pytest.raises(dst.DatasetFormatError):
        dst.load_dataset(str(tmp_path / "nothing-here"))


def test_label_out_of_range_rejected():
    with pytest.raises(dst.DatasetFormatError, match="label"):
        dst.LabeledDataset(np.zeros((2, 1, 1, 1)), np.array([0, 5]), "x", 2)


# --- partitioner -------------------------------------------------------------

def _check_exhaustive_disjoint(shards, n):
    allidx = np.concatenate([s.indices for s in shards])
    assert len(allidx) == n
    assert len(np.unique(allidx)) == n
    np.testing.assert_array_equal(np.sort(allidx), np.arange(n))


def test_partition_single_client_identity():
    ds = dst.tiny_digits(n=100, seed=0)
    shards = dst.dirichlet_partition(ds, 1, 0.5, seed=0)
    assert len(shards) == 1
    np.testing.assert_array_equal(np.sort(shards[0].indices), np.arange(100))


def test_partition_exhaustive_disjoint_over_alpha_grid():
    ds = dst.tiny_digits(n=400, seed=2)
    for alpha in (0.9, 0.5, 0.1, 0.01):
        shards = dst.dirichlet_partition(ds, 10, alpha, seed=3)
        _check_exhaustive_disjoint(shards, 400)
        for s in shards:
            np.testing.assert_array_equal(
                s.histogram, np.bincount(ds.labels[s.indices], minlength=10))


def test_partition_rejects_bad_args():
    ds = dst.gauss_blobs(n=50, seed=0)
    with pytest.raises(ValueError, match="alpha"):
        dst.dirichlet_partition(ds, 5, -1.0, seed=0)
    with pytest.raises(ValueError, match="client"):
        dst.dirichlet_partition(ds, 0, 0.5, seed=0)


def test_partition_large_alpha_near_uniform():
    """alpha = 1e6: every client's class histogram within +/-10% of uniform."""
    ds = dst.tiny_digits(n=2000, seed=4)
    shards = dst.dirichlet_partition(ds, 10, 1e6, seed=5)
    per_class = np.bincount(ds.labels, minlength=10)
    for s in shards:
        expect = per_class / 10
        assert np.all(np.abs(s.histogram - expect) <= 0.1 * expect + 1)


def test_partition_mean_share_converges():
    """Over 1000 partitions at alpha=0.5, M=10, mean per-client share -> 1/M."""
    ds = dst.tiny_digits(n=300, seed=6)
    m = 10
    totals = np.zeros(m)
    reps = 1000
    for s in range(reps):
        shards = dst.dirichlet_partition(ds, m, 0.5, seed=s)
        totals += np.array([len(sh) for sh in shards]) / len(ds)
    assert np.abs(totals / reps - 1.0 / m).max() < 0.02


def test_partition_heterogeneity_monotone_in_alpha():
    ds = dst.tiny_digits(n=600, seed=7)
    grid = [0.01, 0.1, 0.5, 0.9, 100.0]
    medians = []
    for alpha in grid:
        vals = [dst.heterogeneity_max_share(dst.dirichlet_partition(ds, 10, alpha, seed=s))
                for s in range(20)]
        medians.append(np.median(vals))
    assert all(a >= b - 1e-12 for a, b in zip(medians, medians[1:]))


def test_partition_empty_client_rule_resamples():
    # 10 samples over 10 clients at tiny alpha forces empties in most draws;
    # the resample loop must still land on a full assignment eventually.
    ds = dst.gauss_blobs(classes=2, n=12, seed=0)
    shards = dst.dirichlet_partition(ds, 4, 0.05, seed=0)
    assert all(len(s) > 0 for s in shards)
    _check_exhaustive_disjoint(shards, 12)


def test_partition_manifest_roundtrip(tmp_path):
    ds = dst.tiny_digits(n=200, seed=8)
    shards = dst.dirichlet_partition(ds, 5, 0.5, seed=9)
    path = tmp_path / "partition.csv"
    dst.save_partition(path, shards)
    back = dst.load_partition(path, ds)
    assert len(back) == len(shards)
    for a, b in zip(shards, back):
        np.testing.assert_array_equal(np.sort(a.indices), np.sort(b.indices))


# --- proxy split -------------------------------------------------------------

def test_proxy_split_halves_per_class():
    ds = dst.tiny_digits(n=1000, seed=10)
    proxy, fed = dst.public_proxy_split(ds, 0.5, seed=1)
    ph = np.bincount(proxy.labels, minlength=10)
    fh = np.bincount(fed.labels, minlength=10)
    total = np.bincount(ds.labels, minlength=10)
    np.testing.assert_array_equal(ph + fh, total)
    assert np.abs(ph - total / 2).max() <= 1


def test_proxy_split_disjoint_and_complete():
    ds = dst.tiny_digits(n=300, seed=11)
    for seed in range(5):
        a, b = dst.stratified_split_indices(ds.labels, 0.3, seed)
        assert len(np.intersect1d(a, b)) == 0
        np.testing.assert_array_equal(np.sort(np.concatenate([a, b])), np.arange(300))


def test_proxy_split_rejects_empty_side():
    ds = dst.gauss_blobs(classes=2, n=10, seed=0)
    with pytest.raises(ValueError):
        dst.public_proxy_split(ds, 0.001, seed=0)
    with pytest.raises(ValueError):
        dst.public_proxy_split(ds, 1.5, seed=0)
