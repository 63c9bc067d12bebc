import math

import numpy as np
import pytest

from fedcil import autodiff as ad
from fedcil.autodiff import Tensor
from fedcil.data import (
    ClientData,
    build_task_streams,
    make_synthetic_mixture,
    streams_from_assignment,
)
from fedcil.errors import ContractError, EvaluationError
from fedcil.metrics import (
    DiagnosticTrace,
    confusion_csv,
    ce_gradient_norm,
    evaluate_global,
    evaluate_predictions,
    post_sync_local_accuracy,
    proxy_fid,
    spike_ratio,
)
from fedcil.models import (
    AcganModel,
    AcganOptimizer,
    Arch,
    alternating_step,
    bind,
    features,
    generate,
)
from fedcil.trainers import AcganClient, LocalConfig

ARCH = Arch(data_dim=2, noise_dim=3, gen_hidden=6, trunk_hidden=5, feature_dim=4)


def test_perfect_classifier_report():
    y = np.array([3, 1, 1, 2, 3, 3])
    rep = evaluate_predictions(y, y, [1, 2, 3])
    assert rep.accuracy == 1.0
    assert np.array_equal(rep.confusion, np.diag([2, 1, 3]))
    assert rep.num_samples == 6
    assert rep.per_class_accuracy == {1: 1.0, 2: 1.0, 3: 1.0}


def test_confusion_orientation_and_csv(tmp_path):
    rep = evaluate_predictions(np.array([1, 1]), np.array([0, 1]), [0, 1])
    assert rep.confusion.tolist() == [[0, 0], [1, 1]]
    assert rep.confusion.sum(axis=0).tolist() == [1, 1]
    confusion_csv(tmp_path / "c.csv", rep)
    assert (tmp_path / "c.csv").read_text() == "predicted\\true,0,1\n0,0,0\n1,1,1\n"


def test_uniform_random_classifier_binomial_bound():
    rng = np.random.default_rng(0)
    c, n = 5, 4000
    rep = evaluate_predictions(rng.integers(c, size=n), rng.integers(c, size=n), range(c))
    sigma = math.sqrt((1 / c) * (1 - 1 / c) / n)
    assert abs(rep.accuracy - 1 / c) <= 3 * sigma


def test_evaluation_errors():
    with pytest.raises(EvaluationError):
        evaluate_predictions(np.array([]), np.array([]), [0])
    with pytest.raises(EvaluationError):
        evaluate_predictions(np.array([0]), np.array([4]), [0, 1])


def test_evaluate_global_covers_all_clients():
    ds = make_synthetic_mixture(4, 50, 2)
    streams = build_task_streams(ds, 2, 2, 2, seed=1)
    m = AcganModel(ARCH, range(4), seed=0)
    rep = evaluate_global(m, streams)
    expected = sum(len(t.test_indices) for s in streams for t in s.tasks)
    assert rep.num_samples == expected
    first = evaluate_global(m, streams, up_to_task=0)
    assert first.num_samples == sum(len(s.tasks[0].test_indices) for s in streams)


# ---------------------------------------------------------------- gradient norm

def uniform_head(labels=(0, 1)):
    m = AcganModel(ARCH, labels, seed=3)
    m.params["cls.W"][:] = 0.0
    m.params["cls.b"][:] = 0.0
    return m


def test_grad_norm_uniform_two_classes():
    m = uniform_head()
    x = np.array([[0.3, -0.4]])
    f = features(bind(m.params, None), Tensor(x)).values[0]
    assert ce_gradient_norm(m, (x, [0])) == pytest.approx(
        np.linalg.norm(f) * math.sqrt(0.5), rel=1e-12)
    # with a unit feature this is the 0.7071 hand value
    assert np.linalg.norm(f / np.linalg.norm(f)) * math.sqrt(0.5) == pytest.approx(0.7071, abs=1e-4)


def test_grad_norm_vanishes_when_confident():
    m = AcganModel(ARCH, (0, 1), seed=3)
    x = np.array([[0.3, -0.4]])
    m.params["cls.W"][:] = 0.0
    m.params["cls.b"][:] = [60.0, -60.0]
    assert ce_gradient_norm(m, (x, [0])) <= 1e-8


def test_grad_norm_matches_finite_differences():
    m = AcganModel(ARCH, (0, 1, 2), seed=5)
    rng = np.random.default_rng(0)
    x, labels = rng.uniform(-1, 1, (6, 2)), [0, 2, 1, 1, 0, 2]
    rows_ = m.label_index(labels)

    def loss(w):
        p = bind(m.params, None)
        p["cls.W"] = Tensor(w)
        logits = ad.linear(features(p, Tensor(x)), p["cls.W"], p["cls.b"])
        return ad.cross_entropy(ad.softmax(logits), ad.one_hot(rows_, 3)).item()

    w0, h = m.params["cls.W"].copy(), 1e-6
    grad = np.zeros_like(w0)
    for idx in np.ndindex(w0.shape):
        up, dn = w0.copy(), w0.copy()
        up[idx] += h
        dn[idx] -= h
        grad[idx] = (loss(up) - loss(dn)) / (2 * h)
    fd = np.linalg.norm(grad)
    assert abs(ce_gradient_norm(m, (x, labels)) - fd) / fd < 1e-4


# ---------------------------------------------------------------- proxy FID

def test_fid_identical_sets():
    x = np.random.default_rng(0).normal(size=(500, 2))
    assert proxy_fid(x, x) <= 1e-6


def test_fid_one_dimensional_closed_form():
    rng = np.random.default_rng(1)
    a = rng.normal(0.0, 1.0, (10_000, 1))
    b = rng.normal(3.0, 1.0, (10_000, 1))
    assert proxy_fid(a, b) == pytest.approx(9.0, abs=0.5)


def test_fid_symmetric_and_projected():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(300, 64)), rng.normal(0.5, 1.0, (300, 64))
    assert proxy_fid(a, b) == pytest.approx(proxy_fid(b, a), rel=1e-6)
    assert proxy_fid(a, b) > proxy_fid(a, rng.normal(size=(300, 64)))


def test_fid_degenerate_and_errors():
    flat = np.zeros((10, 2))
    assert proxy_fid(flat, flat) >= 0.0
    with pytest.raises(ContractError):
        proxy_fid(np.zeros((1, 2)), np.zeros((5, 2)))
    with pytest.raises(ContractError):
        proxy_fid(np.zeros((5, 2)), np.zeros((5, 3)))


def class_conditional_fid(model, ds, seed):
    return np.mean([proxy_fid(ds.samples[ds.labels == k], generate(model, [k] * 500, seed + k))
                    for k in range(ds.num_classes)])


def test_fid_improves_over_training_checkpoints():
    # doubling checkpoint spacing while the generator is still learning; once
    # converged the score sits at its sampling-noise floor
    marks = [0, 25, 50, 100, 200, 400]
    drops = pairs = 0
    for seed in (1, 2, 3):
        ds = make_synthetic_mixture(4, 500, 2, seed=seed)
        m = AcganModel(Arch(data_dim=2), range(4), seed=seed)
        opt = AcganOptimizer(m, 2e-3)
        rng = np.random.default_rng(seed)
        scores, step = [], 0
        for mark in marks:
            for step in range(step, mark):
                idx = rng.integers(len(ds.samples), size=32)
                alternating_step(m, opt, ds.samples[idx], ds.labels[idx], rng)
            step = mark
            scores.append(class_conditional_fid(m, ds, 99))
        drops += sum(b < a for a, b in zip(scores, scores[1:]))
        pairs += len(scores) - 1
    assert drops >= 0.8 * pairs


# ---------------------------------------------------------------- spikes

def test_spike_ratio_examples():
    assert spike_ratio([2.5] * 800, 400) == 1.0
    trace = ([10.0] * 20 + [1.0] * 380) * 3
    assert spike_ratio(trace, 400) == 10.0
    with pytest.raises(ContractError):
        spike_ratio([1.0] * 10, 40)


def test_diagnostic_trace_lengths():
    t = DiagnosticTrace(client=2)
    t.extend([1.0, 2.0], [0.1, 0.2])
    assert len(t.classification_loss) == len(t.grad_norm) == 2


# ---------------------------------------------------------------- post-sync

def test_post_sync_matches_own_upload():
    ds = make_synthetic_mixture(4, 80, 2)
    stream = streams_from_assignment(ds, [[0, 1]], 2)[0]
    c = AcganClient(ClientData(stream), ARCH, LocalConfig(batch_size=8, lr=1e-3), 0)
    c.receive(AcganModel(ARCH, (), seed=0).snapshot(), False)
    c.train(10)
    own = c.upload().params
    assert post_sync_local_accuracy(c, own) == c.local_accuracy()


def test_post_sync_random_init_near_chance():
    ds = make_synthetic_mixture(4, 400, 2)
    stream = streams_from_assignment(ds, [[0, 1, 2, 3]], 4)[0]
    c = AcganClient(ClientData(stream), ARCH, LocalConfig(), 0)
    c.receive(AcganModel(ARCH, (), seed=0).snapshot(), False)
    accs = [post_sync_local_accuracy(c, AcganModel(ARCH, range(4), seed=s).snapshot())
            for s in range(30)]
    n = len(c.data.test_set()[1])
    assert abs(np.mean(accs) - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / n) + 0.05
