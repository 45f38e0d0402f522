import numpy as np
import pytest

from dkl.data import Dataset, export_logits, gaussian_mixture, import_logits, load_csv, split
from dkl.errors import FileFormatError


def test_gaussian_mixture_deterministic():
    a = gaussian_mixture(4, 3, 10, 0.2, seed=42)
    b = gaussian_mixture(4, 3, 10, 0.2, seed=42)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)
    c = gaussian_mixture(4, 3, 10, 0.2, seed=43)
    assert np.any(a.features != c.features)


def test_gaussian_mixture_unit_box():
    ds = gaussian_mixture(5, 6, 50, 0.7, seed=0)
    assert ds.features.min() >= 0.0
    assert ds.features.max() <= 1.0
    assert ds.n == 250
    np.testing.assert_array_equal(np.bincount(ds.labels), np.full(5, 50))


def test_gaussian_mixture_rejects_bad_sizes():
    with pytest.raises(ValueError):
        gaussian_mixture(1, 3, 10, 0.2)
    with pytest.raises(ValueError):
        gaussian_mixture(3, 1, 10, 0.2)
    with pytest.raises(ValueError):
        gaussian_mixture(3, 3, 10, 0.0)


def test_dataset_invariants():
    with pytest.raises(ValueError, match="lie in"):
        Dataset(np.array([[1.5, 0.0]]), np.array([0]), 2)
    with pytest.raises(ValueError, match="empty"):
        Dataset(np.array([[0.0, 0.0], [1.0, 1.0]]), np.array([0, 0]), 2)
    ds = gaussian_mixture(2, 2, 3, 0.1, seed=1)
    with pytest.raises(ValueError):
        ds.features[0, 0] = 0.5  # immutable after creation


def test_split_balanced_halves():
    ds = gaussian_mixture(3, 2, 10, 0.3, seed=2)
    train, test = split(ds, 0.5, seed=0)
    np.testing.assert_array_equal(np.bincount(train.labels), np.full(3, 5))
    np.testing.assert_array_equal(np.bincount(test.labels), np.full(3, 5))


def test_split_deterministic_and_partition():
    ds = gaussian_mixture(3, 4, 12, 0.3, seed=3)
    t1, e1 = split(ds, 0.25, seed=9)
    t2, e2 = split(ds, 0.25, seed=9)
    np.testing.assert_array_equal(t1.features, t2.features)
    np.testing.assert_array_equal(e1.features, e2.features)
    merged = np.vstack([t1.features, e1.features])
    original = ds.features
    order = np.lexsort(merged.T)
    order_orig = np.lexsort(original.T)
    np.testing.assert_array_equal(merged[order], original[order_orig])


def test_split_counts_within_one_of_fraction():
    ds = gaussian_mixture(4, 2, 11, 0.3, seed=4)
    train, test = split(ds, 0.3, seed=1)
    for y in range(4):
        n_test = int((test.labels == y).sum())
        assert abs(n_test - 0.3 * 11) <= 1.0


def test_split_rejects_tiny_class():
    ds = Dataset(np.array([[0.0, 0.0], [1.0, 1.0], [0.5, 0.5]]), np.array([0, 0, 1]), 2)
    with pytest.raises(ValueError, match="stratify"):
        split(ds, 0.5, seed=0)


def test_logits_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(17, 6))
    path = tmp_path / "teacher.dkll"
    export_logits(path, logits)
    got = import_logits(path)
    np.testing.assert_array_equal(got, logits)


def test_logits_empty_file_valid(tmp_path):
    path = tmp_path / "empty.dkll"
    export_logits(path, np.zeros((0, 4)))
    got = import_logits(path)
    assert got.shape == (0, 4)


def test_logits_bad_magic(tmp_path):
    path = tmp_path / "bad.dkll"
    path.write_bytes(b"NOPE" + b"\x00" * 8)
    with pytest.raises(FileFormatError, match="magic"):
        import_logits(path)


def test_logits_truncated(tmp_path):
    path = tmp_path / "short.dkll"
    export_logits(path, np.ones((3, 2)))
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(FileFormatError, match="payload"):
        import_logits(path)


def test_csv_round_trip(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text("f0,f1,label\n0.1,0.9,0\n0.8,0.2,1\n0.3,0.4,0\n0.9,0.9,1\n")
    ds = load_csv(path)
    assert ds.n == 4 and ds.dim == 2 and ds.num_classes == 2
    np.testing.assert_allclose(ds.features[0], [0.1, 0.9])


def test_csv_normalize(tmp_path):
    path = tmp_path / "raw.csv"
    path.write_text("a,b,label\n0,10,0\n5,20,1\n10,30,0\n2,12,1\n")
    with pytest.raises(ValueError):
        load_csv(path)
    ds = load_csv(path, normalize=True)
    assert ds.features.min() == 0.0 and ds.features.max() == 1.0


def test_csv_diagnostics_carry_line_numbers(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("f0,f1,label\n0.1,0.2,0\n0.3,oops,1\n")
    with pytest.raises(FileFormatError, match=":3"):
        load_csv(path)
    path.write_text("f0,f1,notlabel\n0.1,0.2,0\n")
    with pytest.raises(FileFormatError, match="label"):
        load_csv(path)
