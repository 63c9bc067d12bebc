import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcil.data import (
    ClientData,
    build_task_streams,
    digit_templates,
    make_synthetic_mixture,
    make_tiny_digits,
    scaled_centroids,
    stream_manifest,
    streams_from_assignment,
    task_batch,
    union_test_set,
    write_manifest,
)
from fedcil.errors import ConfigurationError, ContractError, LabelRangeError


def nearest_centroid_accuracy(ds, dim):
    c = scaled_centroids(ds.num_classes, dim)
    pred = ((ds.samples[:, None, :] - c[None]) ** 2).sum(-1).argmin(1)
    return np.mean(pred == ds.labels)


def test_mixture_counts_and_range():
    ds = make_synthetic_mixture(4, 100, 2, seed=1)
    assert ds.samples.shape == (400, 2)
    assert np.bincount(ds.labels).tolist() == [100] * 4
    assert np.all(np.abs(ds.samples) <= 1.0)


def test_mixture_deterministic():
    a = make_synthetic_mixture(4, 50, 2, seed=3)
    b = make_synthetic_mixture(4, 50, 2, seed=3)
    assert a.samples.tobytes() == b.samples.tobytes()


@pytest.mark.parametrize("classes,dim", [(4, 2), (10, 4), (10, 8)])
def test_mixture_nearest_centroid_oracle(classes, dim):
    ds = make_synthetic_mixture(classes, 1000, dim, seed=0)
    assert nearest_centroid_accuracy(ds, dim) >= 0.99


def test_mixture_rejects_degenerate():
    with pytest.raises(ConfigurationError):
        make_synthetic_mixture(1, 10, 2)
    with pytest.raises(ConfigurationError):
        make_synthetic_mixture(3, 10, 1)


def test_tiny_digits():
    ds = make_tiny_digits(seed=0, samples_per_class=100)
    assert set(ds.labels.tolist()) == set(range(10))
    assert ds.data_dim == 64 and np.all(np.abs(ds.samples) <= 1)
    tmpl = digit_templates()
    assert tmpl[1].reshape(8, 8)[7].tolist() == [-1, 1, 1, 1, 1, 1, 1, -1]
    clean = make_tiny_digits(seed=0, samples_per_class=1, noise_std=0.0)
    assert np.array_equal(clean.samples, tmpl)


def test_tiny_digits_linear_probe():
    from scipy.special import softmax

    train = make_tiny_digits(seed=1, samples_per_class=100)
    test = make_tiny_digits(seed=2, samples_per_class=50)
    w = np.zeros((64, 10))
    onehot = np.eye(10)[train.labels]
    for _ in range(200):
        p = softmax(train.samples @ w, axis=1)
        w -= 0.05 * train.samples.T @ (p - onehot) / len(onehot)
    acc = np.mean((test.samples @ w).argmax(1) == test.labels)
    assert acc >= 0.95


def test_streams_mnist_like():
    ds = make_synthetic_mixture(10, 100, 4, seed=0)
    streams = build_task_streams(ds, 5, 2, 5, seed=0)
    for s in streams:
        seen = [k for t in s.tasks for k in t.classes]
        assert sorted(seen) == list(range(10))
        for t in s.tasks:
            assert not set(t.train_indices) & set(t.test_indices)
            assert set(ds.labels[t.train_indices]) <= set(t.classes)
            assert set(ds.labels[t.test_indices]) <= set(t.classes)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 3), st.integers(0, 10_000))
def test_shared_classes_have_disjoint_indices(num_clients, num_tasks, seed):
    ds = make_synthetic_mixture(8, 60, 2, seed=0)
    streams = build_task_streams(ds, num_clients, 2, num_tasks, seed)
    owned = {}
    for s in streams:
        for t in s.tasks:
            for idx in np.concatenate([t.train_indices, t.test_indices]):
                assert idx not in owned, "index shared by two clients"
                owned[idx] = s.client_id


def test_single_task_degenerates():
    ds = make_synthetic_mixture(4, 50, 2)
    streams = build_task_streams(ds, 3, 2, 1, seed=0)
    assert all(s.num_tasks == 1 for s in streams)


def test_infeasible_draw():
    ds = make_synthetic_mixture(4, 50, 2)
    with pytest.raises(ConfigurationError):
        build_task_streams(ds, 2, 2, 3)


def test_task_batch_access_control():
    ds = make_synthetic_mixture(10, 100, 4)
    s = build_task_streams(ds, 1, 2, 5, seed=4)[0]
    rng = np.random.default_rng(0)
    x, y = task_batch(s, 2, 500, rng)
    assert set(y.tolist()) <= set(s.tasks[2].classes)
    with pytest.raises(ContractError):
        task_batch(s, 5, 1, rng)


def test_task_batch_frequencies_uniform():
    ds = make_synthetic_mixture(4, 200, 2)
    s = streams_from_assignment(ds, [[0, 1]], 2)[0]
    train = s.tasks[0].train_indices
    share = np.bincount(ds.labels[train], minlength=2)[:2] / len(train)
    _, y = task_batch(s, 0, 10_000, np.random.default_rng(1))
    freq = np.bincount(y, minlength=2)[:2] / 10_000
    assert np.all(np.abs(freq - share) <= 0.05 * share)


def test_client_data_hides_past_tasks():
    ds = make_synthetic_mixture(10, 100, 4)
    cd = ClientData(build_task_streams(ds, 1, 2, 3, seed=0)[0])
    first = cd.current_classes
    cd.advance()
    assert cd.previous_classes == first
    rng = np.random.default_rng(0)
    _, y = cd.batch(200, rng)
    assert not set(y.tolist()) & set(first)
    cd.advance()
    with pytest.raises(ContractError):
        cd.advance()


def test_assignment_validation():
    ds = make_synthetic_mixture(10, 100, 4)
    with pytest.raises(ConfigurationError):
        streams_from_assignment(ds, [[0, 1, 2]], 2)
    with pytest.raises(LabelRangeError):
        streams_from_assignment(ds, [[0, 12]], 2)
    s = streams_from_assignment(ds, [[0, 1], [2, 3], [4, 1]], 2)
    a = set(s[0].tasks[0].train_indices) | set(s[0].tasks[0].test_indices)
    c = set(s[2].tasks[0].train_indices) | set(s[2].tasks[0].test_indices)
    assert not a & c


def test_union_test_set_and_manifest(tmp_path):
    ds = make_synthetic_mixture(10, 100, 4)
    streams = build_task_streams(ds, 2, 2, 2, seed=0)
    x, y = union_test_set(streams, 0)
    assert set(y.tolist()) == set(streams[0].tasks[0].classes) | set(streams[1].tasks[0].classes)
    write_manifest(tmp_path / "m.jsonl", streams)
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    assert [json.loads(l) for l in lines] == stream_manifest(streams)
