import gzip

import numpy as np
import pytest
from scipy.linalg import subspace_angles
from scipy.stats import chi2_contingency

from sfp import datasets as ds
from sfp import subspace as ss
from sfp.errors import FormatError, InconsistentFiles, InsufficientData, InvalidInput


def _digits(n, seed=0):
    rng = np.random.default_rng(seed)
    images = (rng.random((n, 784)) > 0.8).astype(float)
    return images, np.arange(n) % 10


def _write_pair(tmp_path, n=5, seed=0):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, size=(n, 28, 28), dtype=np.uint8)
    lab = rng.integers(0, 10, size=n, dtype=np.uint8)
    ds.write_idx(tmp_path / "img", img)
    ds.write_idx(tmp_path / "lab", lab)
    return img, lab


def test_idx_round_trip_first_record(tmp_path):
    img, lab = _write_pair(tmp_path)
    images, labels = ds.load_idx(tmp_path / "img", tmp_path / "lab")
    assert images.shape == (5, 784)
    assert images.min() >= 0 and images.max() <= 1
    # byte-level oracle on the first record
    raw = (tmp_path / "img").read_bytes()
    first = np.frombuffer(raw[16 : 16 + 784], dtype=np.uint8) / 255.0
    np.testing.assert_array_equal(images[0], first)
    np.testing.assert_array_equal(labels, lab)


def test_idx_gzip(tmp_path):
    img, _ = _write_pair(tmp_path)
    with gzip.open(tmp_path / "img.gz", "wb") as fh:
        fh.write((tmp_path / "img").read_bytes())
    magic, arr = ds.read_idx(tmp_path / "img.gz")
    assert magic == ds.IMAGE_MAGIC
    np.testing.assert_array_equal(arr, img)


def test_idx_empty_file(tmp_path):
    ds.write_idx(tmp_path / "img", np.zeros((0, 28, 28)))
    ds.write_idx(tmp_path / "lab", np.zeros(0))
    images, labels = ds.load_idx(tmp_path / "img", tmp_path / "lab")
    assert images.shape == (0, 784) and labels.shape == (0,)
    env = ds.build_colored_mnist(images, labels, 0.5)
    assert env.n == 0


def test_idx_bad_magic(tmp_path):
    (tmp_path / "bad").write_bytes(b"\x01\x02\x03\x04" + bytes(20))
    with pytest.raises(FormatError):
        ds.read_idx(tmp_path / "bad")
    _write_pair(tmp_path)
    with pytest.raises(FormatError):
        ds.load_idx(tmp_path / "lab", tmp_path / "lab")


def test_idx_truncated(tmp_path):
    _write_pair(tmp_path)
    raw = (tmp_path / "img").read_bytes()
    (tmp_path / "short").write_bytes(raw[:-10])
    with pytest.raises(FormatError):
        ds.read_idx(tmp_path / "short")


def test_idx_count_mismatch(tmp_path):
    _write_pair(tmp_path)
    ds.write_idx(tmp_path / "lab4", np.zeros(4))
    with pytest.raises(InconsistentFiles):
        ds.load_idx(tmp_path / "img", tmp_path / "lab4")


def test_palette_validation():
    assert ds.Palette.default().colors.shape == (10, 3)
    with pytest.raises(InvalidInput):
        ds.Palette(np.zeros((10, 3)))


def test_fully_biased_backgrounds():
    images, labels = _digits(200)
    env = ds.build_colored_mnist(images, labels, 1.0, seed=3)
    assert env.id_mask.all()
    np.testing.assert_array_equal(ds.background_of(env.features), env.palette.colors[labels])
    np.testing.assert_array_equal(ds.foreground_of(env.features), images > ds.FOREGROUND_THRESHOLD)


def test_digit_one_biased_gets_palette_one():
    images, labels = _digits(20)
    env = ds.build_colored_mnist(images, labels, 1.0)
    assert np.array_equal(ds.background_of(env.features[labels == 1])[0], env.palette.colors[1])


def test_unbiased_backgrounds_independent_of_label():
    images, labels = _digits(10000, seed=1)
    env = ds.build_colored_mnist(images, labels, 0.0, seed=11)
    bg = ds.background_of(env.features)
    color = np.array([np.flatnonzero(np.all(env.palette.colors == c, axis=1))[0] for c in bg])
    table = np.zeros((10, 10))
    np.add.at(table, (labels, color), 1)
    assert chi2_contingency(table).pvalue > 0.01
    assert not env.id_mask.any()


def test_build_validation():
    with pytest.raises(InvalidInput):
        ds.build_colored_mnist(np.zeros((2, 10)), [0, 1], 0.5)
    with pytest.raises(InvalidInput):
        ds.build_colored_mnist(np.zeros((2, 784)), [0, 1], 1.5)
    with pytest.raises(InvalidInput):
        ds.build_colored_mnist(np.zeros((2, 784)), [0, 11], 0.5)


def test_split_three_biased_environments():
    images, labels = _digits(300)
    base = ds.build_colored_mnist(images, labels, 0.0, seed=1)
    envs = ds.split_environments(base, (0.8, 0.6, 0.0), seed=1)
    assert [e.n for e in envs] == [100, 100, 100]
    assert [round(e.id_mask.mean(), 2) for e in envs] == [0.8, 0.6, 0.0]
    single = ds.split_environments(base, (0.0,), seed=1)
    assert len(single) == 1 and single[0].n == 300


def test_split_linear_ratios():
    _, train, _ = ds.gen_linear_task(2, 2, 2, 0.8, 0.2, 2000, 0.01, 1)
    envs = ds.split_environments(train, (0.9, 0.7, 0.0), seed=1)
    assert len(envs) == 3
    assert [round(e.id_mask.mean(), 2) for e in envs] == [0.9, 0.7, 0.0]
    idx = np.concatenate([e.features[:, 0] for e in envs])
    assert len(np.unique(idx)) == len(idx)


def test_split_insufficient():
    images, labels = _digits(2)
    base = ds.build_colored_mnist(images, labels, 0.0)
    with pytest.raises(InsufficientData):
        ds.split_environments(base, (0.5, 0.5, 0.5), seed=0)
    _, train, _ = ds.gen_linear_task(1, 1, 1, 0.9, 0.1, 100, 0.01, 0)
    with pytest.raises(InsufficientData):
        ds.split_environments(train, (0.0, 0.0), seed=0, size=50)


def test_split_determinism():
    images, labels = _digits(90)
    base = ds.build_colored_mnist(images, labels, 0.0, seed=1)
    a = ds.split_environments(base, (0.8, 0.6, 0.0), seed=5)
    b = ds.split_environments(base, (0.8, 0.6, 0.0), seed=5)
    for x, y in zip(a, b):
        assert x.features.tobytes() == y.features.tobytes()
        assert x.labels.tobytes() == y.labels.tobytes()


def test_linear_task_dimension_overflow():
    with pytest.raises(InvalidInput):
        ds.gen_linear_task(2, 2, 2, 0.8, 0.2, 100, 0.01, 0, d=5)


def test_linear_task_blocks_orthonormal():
    task, train, test = ds.gen_linear_task(2, 2, 2, 0.8, 0.2, 500, 0.01, 0, d=8)
    q = np.hstack([task.f_prime, task.g_prime, task.in_block])
    np.testing.assert_allclose(q.T @ q, np.eye(6), atol=1e-12)
    assert train.id_mask.sum() == 400
    assert not test.id_mask.any()
    # OOD samples never touch the spurious block, ID samples never the unknown one
    assert np.abs(train.features[~train.id_mask] @ task.f_prime).max() < 1e-12
    assert np.abs(train.features[train.id_mask] @ task.g_prime).max() < 1e-12


def test_linear_task_principal_angle():
    task, _, _ = ds.gen_linear_task(2, 2, 2, 0.8, 0.2, 2000, 0.01, 7)
    d = ss.decompose(task.w_star, task.spec)
    angles = subspace_angles(d.bases.f, d.bases.g)
    np.testing.assert_allclose(d.sigma_fg, np.sort(np.cos(angles))[::-1], atol=1e-10)


def test_linear_task_without_spurious_channel_has_small_gap():
    task, train, _ = ds.gen_linear_task(0, 2, 2, 0.8, 0.2, 2000, 0.0, 3)
    spec = task.spec
    traj = ss.simulate_undirected_training(spec, np.zeros_like(task.w_star), task.w_star, 0.1, 300)
    # both domains share the invariant block, so the optimum fits both
    assert abs(traj.gap[-1]) < 1e-8


def test_environment_persistence(tmp_path):
    images, labels = _digits(30)
    env = ds.build_colored_mnist(images, labels, 0.6, seed=2)
    ds.save_environment(env, tmp_path / "e")
    back = ds.load_environment(tmp_path / "e")
    np.testing.assert_array_equal(back.features, env.features)
    np.testing.assert_array_equal(back.labels, env.labels)
    np.testing.assert_array_equal(back.id_mask, env.id_mask)
    np.testing.assert_array_equal(back.palette.colors, env.palette.colors)
    _, lin, _ = ds.gen_linear_task(1, 1, 1, 0.8, 0.2, 50, 0.01, 0)
    ds.save_environment(lin, tmp_path / "l")
    np.testing.assert_array_equal(ds.load_environment(tmp_path / "l").targets, lin.targets)


def test_environment_truncated_data(tmp_path):
    images, labels = _digits(10)
    ds.save_environment(ds.build_colored_mnist(images, labels, 0.5), tmp_path / "e")
    data = tmp_path / "e" / "data.f64le"
    data.write_bytes(data.read_bytes()[:-8])
    with pytest.raises(FormatError):
        ds.load_environment(tmp_path / "e")


def test_concat_environments():
    images, labels = _digits(40)
    base = ds.build_colored_mnist(images, labels, 0.0)
    a, b = ds.split_environments(base, (1.0, 0.0), seed=0)
    merged = ds.concat_environments([a, b])
    assert merged.n == 40 and merged.bias_ratio == 0.5
