"""Acceptance criteria 1-11.

Each test prints one ``criterion N: PASS|FAIL`` line with the measured
numbers, then asserts. Criteria 5, 6, 7 and 9 share one set of runs (the
standard desk-scale setup, seeds 1-3), computed once per module.

Run alone with ``pytest tests/test_acceptance.py -v`` or
``python tests/test_acceptance.py``.
"""
import ast
import dataclasses
import inspect
import sys
import time

import numpy as np
import pytest

from fedcil import autodiff as ad
from fedcil import experiment as ex
from fedcil import protocol
from fedcil.autodiff import Tensor, check_gradients
from fedcil.data import ClientData, TaskStream, LabeledDataset
from fedcil.experiment import ExperimentConfig
from fedcil.metrics import proxy_fid, spike_ratio
from fedcil.models import AcganModel, Arch, bind, discriminator_terms, generator_terms
from fedcil.params import ParameterVector, to_bytes
from fedcil.protocol import Upload, merge_parameters
from fedcil.trainers import _classifier_forward, distillation_term

SEEDS = (1, 2, 3)
STANDARD = ExperimentConfig(seeds=SEEDS)  # 5 clients, 5 tasks x 2 classes, T=40, R=50


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        return ok
    return emit


# ---------------------------------------------------------------- 1

def _toy_instances(rng):
    """Yield (name, build, inputs) gradient-check instances of random size."""
    b, c, d = (int(v) for v in rng.integers(2, 5, size=3))
    arch = Arch(data_dim=d, noise_dim=2, gen_hidden=4, trunk_hidden=4, feature_dim=3)
    x = lambda *s: rng.standard_normal(s)
    yield "matmul", lambda t: ad.sum(ad.tanh(ad.matmul(t[0], t[1]))), [x(b, d), x(d, c)]
    yield "linear+leaky", (lambda t: ad.sum(ad.scalar_mul(
        ad.leaky_relu(ad.linear(t[0], t[1], t[2]), 0.2), 1.5))), [x(b, d), x(c, d), x(c)]
    yield "sigmoid+bce", (lambda t: ad.binary_cross_entropy(ad.sigmoid(t[0]), t[1])), \
        [x(b, 1), rng.random((b, 1))]
    yield "softmax+ce", (lambda t: ad.cross_entropy(ad.softmax(t[0]), t[1])), \
        [x(b, c), ad.softmax(Tensor(x(b, c))).values]
    yield "kl", (lambda t: ad.kl_divergence(ad.softmax(t[0]), ad.softmax(t[1]))), [x(b, c), x(b, c)]
    yield "concat+rows", (lambda t: ad.mean(ad.tanh(ad.rows(ad.concat([t[0], t[1]], 0), 1, 2 * b)))), \
        [x(b, c), x(b, c)]
    yield "gather+select", (lambda t: ad.sum(ad.tanh(ad.select_columns(
        ad.gather_rows(t[0], [0, b - 1, 0]), [c - 1, 0])))), [x(b, c)]
    yield "squared_distance", (lambda t: ad.squared_distance(t[0], np.ones((b, c)))), [x(b, c)]

    # full objectives on a toy model
    labels = list(range(c))
    m = AcganModel(arch, labels, seed=int(rng.integers(1 << 30)))
    real, fake = rng.uniform(-1, 1, (b, d)), rng.uniform(-1, 1, (b, d))
    rr, fr = rng.integers(c, size=b), rng.integers(c, size=b)
    z = x(b, arch.noise_dim)
    d_names = ["trunk.0.W", "trunk.1.W", "disc.W", "cls.W", "cls.b"]
    g_names = ["gen.0.W", "gen.1.W", "gen.2.b"]

    def with_params(names, ts):
        p = bind(m.params, None)
        p.update(dict(zip(names, ts)))
        return p

    def acgan_objective(ts):  # L_gan + L_ce on both sides
        p = with_params(d_names + g_names, ts)
        gan_g, ce_g = generator_terms(p, z, fr)
        return ad.sum_all([discriminator_terms(p, real, rr, fake, fr).total, gan_g, ce_g])

    yield "acgan objective", acgan_objective, [m.params[n] for n in d_names + g_names]

    g_prev, g_glob, g3 = (rng.uniform(-1, 1, (b, d)) for _ in range(3))
    anchor = {n: m.params[n] + 0.05 * x(*m.params[n].shape) for n in d_names}

    def client_objective(ts):  # local ACGAN + three consistency terms + proximal
        p = with_params(d_names, ts)
        t = discriminator_terms(p, real, rr, fake, fr, [g_prev, g_glob, g3])
        c1 = ad.kl_divergence(t.extra_probs[0], t.extra_probs[1])
        c2 = ad.kl_divergence(t.real_p, t.extra_probs[1])
        c3 = ad.cross_entropy(t.extra_probs[2], ad.one_hot(rr, c))
        return ad.sum_all([t.total, c1, c2, c3])

    yield "client objective", client_objective, [m.params[n] for n in d_names]

    def proximal(ts):
        p = with_params(d_names, ts)
        terms = [ad.squared_distance(p[n], anchor[n]) for n in d_names]
        return ad.scalar_mul(ad.sum_all(terms), 0.37 / 2)

    yield "proximal", proximal, [m.params[n] for n in d_names]

    teacher = AcganModel(arch, labels[:max(1, c - 1)], seed=3).snapshot(("trunk.", "cls."))
    cls_names = ["trunk.0.W", "trunk.1.b", "cls.W", "cls.b"]

    def kd_objective(ts):
        p = with_params(cls_names, ts)
        logits = _classifier_forward(p, real, arch.leak)[1]
        ce = ad.cross_entropy(ad.softmax(logits), ad.one_hot(rr, c))
        return ad.add(ce, distillation_term(logits, labels, teacher, real, 2.0))

    yield "lwf-2t kd", kd_objective, [m.params[n] for n in cls_names]


def test_criterion_1_gradient_correctness(report):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst, count, names = 0.0, 0, set()
    while count < 100:
        for name, build, inputs in _toy_instances(rng):
            worst = max(worst, check_gradients(build, inputs))
            names.add(name)
            count += 1
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 60
    report(1, ok, f"{count} instances over {len(names)} ops/objectives, "
                  f"worst rel err {worst:.2e}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2

def test_criterion_2_loss_identities(report):
    rng = np.random.default_rng(2)
    kl_self, kl_min = 0.0, np.inf
    for _ in range(1000):
        p = ad.softmax(Tensor(rng.normal(0, 3, (1, 6))))
        q = ad.softmax(Tensor(rng.normal(0, 3, (1, 6))))
        kl_self = max(kl_self, abs(ad.kl_divergence(p, p).item()))
        kl_min = min(kl_min, ad.kl_divergence(p, q).item())
    near = np.array([[1 - 1e-10, 1e-10 / 3, 1e-10 / 3, 1e-10 / 3]])
    ce = ad.cross_entropy(Tensor(near), Tensor(np.eye(4)[:1])).item()
    rows = ad.softmax(Tensor(rng.normal(0, 20, (1000, 7)))).values.sum(axis=1)
    row_err = float(np.abs(rows - 1).max())
    ok = kl_self <= 1e-12 and kl_min >= 0 and ce < 1e-8 and row_err <= 1e-12
    report(2, ok, f"max|KL(p,p)|={kl_self:.1e}, min KL={kl_min:.2e}, CE={ce:.1e}, "
                  f"softmax row err={row_err:.1e}")
    assert ok


# ---------------------------------------------------------------- 3

def test_criterion_3_aggregation_algebra(report):
    arch = Arch(data_dim=2, noise_dim=3, gen_hidden=5, trunk_hidden=4, feature_dim=3)

    def up(labels, seed, n=10):
        return Upload(AcganModel(arch, labels, seed=seed).snapshot(), n, frozenset(labels))

    u = up((0, 1), 1)
    identity = merge_parameters([u, u]).bit_equal(u.params)
    ups = [up((18, 23), 2, 5), up((10, 11), 3, 7), up((15, 23), 4, 9)]
    ref = to_bytes(merge_parameters(ups))
    perm = all(to_bytes(merge_parameters([ups[i] for i in order])) == ref
               for order in ((1, 0, 2), (2, 1, 0), (0, 2, 1)))
    merged = merge_parameters(ups)
    row = merged.labels.index(10)
    verbatim = np.array_equal(merged["cls.W"][row], ups[1].params["cls.W"][0])

    from fedcil.data import make_synthetic_mixture, streams_from_assignment
    from fedcil.trainers import AcganClient, LocalConfig
    ds = make_synthetic_mixture(4, 60, 2)
    stream = streams_from_assignment(ds, [[0, 1]], 2)[0]
    client = AcganClient(ClientData(stream), arch, LocalConfig(batch_size=8), 0)
    server = protocol.ServerState(AcganModel(arch, (), seed=0))
    client.receive(server.broadcast(), False)
    server, rec = protocol.run_round(server, [client], protocol.RoundPlan(0, (0,), 3))
    single = server.model.snapshot().bit_equal(rec.uploads[0].params)

    ok = identity and perm and verbatim and single
    report(3, ok, f"identity={identity}, permutation={perm}, unique row verbatim={verbatim}, "
                  f"single-client bit-exact={single}")
    assert ok


# ---------------------------------------------------------------- 4

def task1_accuracy(cfg: ExperimentConfig, seed: int) -> float:
    res = ex.run_seed(cfg, seed)
    first = res.streams[0].tasks[0].classes
    return float(np.mean([res.final.per_class_accuracy[k] for k in first]))


@pytest.mark.slow
def test_criterion_4_replay_efficacy(report):
    start = time.perf_counter()
    base = ExperimentConfig(dataset_num_classes=4, num_clients=1, num_tasks=2, rounds=10,
                            ablation_no_consolidation=True, ablation_no_consistency=True)
    gaps = []
    for seed in SEEDS:
        with_replay = task1_accuracy(base, seed)
        without = task1_accuracy(base.replace(ablation_no_replay=True), seed)
        gaps.append(with_replay - without)
    elapsed = time.perf_counter() - start
    wins = sum(g >= 0.20 for g in gaps)
    ok = wins >= 2 and elapsed < 120
    report(4, ok, f"task-1 accuracy gap (replay - none) per seed "
                  f"{[round(100 * g, 1) for g in gaps]} pts, {wins}/3 >= 20, {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- 5, 6, 7, 9

def client_spike_ratio(result, round_length):
    n = len(result.records[0]["clients"])
    ratios = []
    for i in range(n):
        trace = [v for rec in result.records for v in rec["clients"][i]["ce_trace"]]
        ratios.append(spike_ratio(trace, round_length))
    return float(np.mean(ratios))


@pytest.fixture(scope="module")
def standard_runs():
    configs = {"fedavg": STANDARD.replace(method="fedavg"),
               "fedavg_acgan": STANDARD.replace(method="fedavg_acgan")}
    configs.update(ex.ablation_configs(STANDARD))
    out, timing = {}, {}
    for name, cfg in configs.items():
        start = time.perf_counter()
        out[name] = [ex.run_seed(cfg, s) for s in SEEDS]
        timing[name] = time.perf_counter() - start
    return out, timing


def accuracies(runs, name):
    return np.array([r.final_accuracy for r in runs[name]])


@pytest.mark.slow
def test_criterion_5_method_ordering(standard_runs, report):
    runs, timing = standard_runs
    cil, acg, avg = (accuracies(runs, k) for k in ("full", "fedavg_acgan", "fedavg"))
    seedwise = int(np.sum((cil > acg) & (acg > avg)))
    mean_order = cil.mean() > acg.mean() > avg.mean()
    gap = cil.mean() - avg.mean()
    elapsed = timing["full"] + timing["fedavg_acgan"] + timing["fedavg"]
    ok = mean_order and gap >= 0.15 and seedwise >= 2 and elapsed < 900
    report(5, ok, f"FedCIL {cil.mean():.3f} {np.round(cil, 3).tolist()} > ACGAN replay "
                  f"{acg.mean():.3f} {np.round(acg, 3).tolist()} > FedAvg {avg.mean():.3f} "
                  f"{np.round(avg, 3).tolist()}; gap {100 * gap:.1f} pts; ordered in "
                  f"{seedwise}/3 seeds; {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_6_ablation_ordering(standard_runs, report):
    runs, _ = standard_runs
    names = ["full", "-consolidation", "-consistency", "-replay"]
    means = [accuracies(runs, k).mean() for k in names]
    ordered = all(a >= b for a, b in zip(means, means[1:]))
    gap = means[0] - means[-1]
    ok = ordered and gap >= 0.15
    report(6, ok, ", ".join(f"{k} {m:.3f}" for k, m in zip(names, means))
           + f"; full - (-replay) {100 * gap:.1f} pts")
    assert ok


@pytest.mark.slow
def test_criterion_7_spike_mechanism(standard_runs, report):
    runs, _ = standard_runs
    t = STANDARD.local_iterations
    acg = [client_spike_ratio(r, t) for r in runs["fedavg_acgan"]]
    cil = [client_spike_ratio(r, t) for r in runs["full"]]
    ok = np.mean(acg) > np.mean(cil)
    report(7, ok, f"spike ratio ACGAN replay {np.mean(acg):.4f} {np.round(acg, 4).tolist()} "
                  f"vs FedCIL {np.mean(cil):.4f} {np.round(cil, 4).tolist()}")
    assert ok


@pytest.mark.slow
def test_criterion_9_proxy_fid(standard_runs, report):
    rng = np.random.default_rng(9)
    a = rng.normal(size=(400, 2))
    same = proxy_fid(a, a)
    closed = proxy_fid(rng.normal(0, 1, (10_000, 1)), rng.normal(3, 1, (10_000, 1)))
    runs, _ = standard_runs

    def end_fid(name):
        return [float(np.mean(r.records[-1]["client_fid"])) for r in runs[name]]

    cil, acg = end_fid("full"), end_fid("fedavg_acgan")
    ok = same <= 1e-6 and abs(closed - 9.0) <= 0.5 and np.mean(cil) <= np.mean(acg)
    report(9, ok, f"identical sets {same:.1e}; 1-D closed form {closed:.3f}; end-of-training "
                  f"client proxy-FID FedCIL {np.mean(cil):.4f} {np.round(cil, 4).tolist()} vs "
                  f"ACGAN replay {np.mean(acg):.4f} {np.round(acg, 4).tolist()}")
    assert ok


# ---------------------------------------------------------------- 8

def duplicated_gap(rep, duplicated=1, singles=(0, 2, 3, 4)):
    acc = rep.per_class_accuracy
    return acc[duplicated] - float(np.mean([acc[k] for k in singles]))


@pytest.mark.slow
def test_criterion_8_bias_mechanism(report):
    merge, cons = [], []
    for seed in SEEDS:
        merge.append(duplicated_gap(ex.imbalance_fixture(seed, consolidate=False)))
        cons.append(duplicated_gap(ex.imbalance_fixture(seed, consolidate=True)))
    ok = np.mean(merge) > np.mean(cons)
    report(8, ok, f"duplicated-class gap merge-only {np.mean(merge):+.4f} "
                  f"{np.round(merge, 4).tolist()} vs consolidated {np.mean(cons):+.4f} "
                  f"{np.round(cons, 4).tolist()}")
    assert ok


# ---------------------------------------------------------------- 10

def test_criterion_10_determinism(tmp_path, report):
    cfg = ExperimentConfig(dataset_num_classes=6, num_clients=3, num_tasks=3, rounds=6,
                           local_iterations=6, consolidation_iterations=3, seeds=(7,))
    logs = []
    for tag in ("a", "b"):
        art = ex.run(cfg.replace(output_dir=str(tmp_path / tag)))
        logs.append((art.directory / "seed_7" / "log.jsonl").read_bytes())
    ok = logs[0] == logs[1] and len(logs[0]) > 0
    report(10, ok, f"two runs, {len(logs[0])} log bytes, identical={logs[0] == logs[1]}")
    assert ok


# ---------------------------------------------------------------- 11

FORBIDDEN = (TaskStream, LabeledDataset, ClientData)
PARAMETER_PREFIXES = ("gen.", "trunk.", "disc.", "cls.")


def audit(value, path="upload"):
    """Return a list of problems with a value that crossed to the server."""
    if isinstance(value, FORBIDDEN):
        return [f"{path}: {type(value).__name__}"]
    if isinstance(value, Upload):
        problems = []
        fields = {f.name for f in dataclasses.fields(Upload)}
        if fields != {"params", "sample_count", "classes"}:
            problems.append(f"Upload fields changed: {sorted(fields)}")
        if not isinstance(value.params, ParameterVector):
            problems.append(f"{path}.params is {type(value.params).__name__}")
        if not isinstance(value.sample_count, int):
            problems.append(f"{path}.sample_count is {type(value.sample_count).__name__}")
        if not all(isinstance(k, int) for k in value.classes):
            problems.append(f"{path}.classes holds non-integers")
        return problems
    if isinstance(value, ParameterVector):
        return [f"{path}: entry {n!r} is not a model parameter" for n in value.names
                if not n.startswith(PARAMETER_PREFIXES)]
    if isinstance(value, (list, tuple)):
        return [p for i, v in enumerate(value) for p in audit(v, f"{path}[{i}]")]
    return [f"{path}: unexpected {type(value).__name__}"]


def test_criterion_11_privacy_boundary(monkeypatch, report):
    seen, problems = [], []
    real_aggregate = protocol.aggregate

    def guarded(server, uploads, rng):
        seen.append(len(uploads))
        problems.extend(audit(list(uploads)))
        return real_aggregate(server, uploads, rng)

    monkeypatch.setattr(protocol, "aggregate", guarded)
    cfg = ExperimentConfig(dataset_num_classes=6, num_clients=3, num_tasks=3, rounds=3,
                           local_iterations=3, consolidation_iterations=2, seeds=(1,))
    for method in ("fedcil", "fedavg_dgr", "fedlwf2t"):
        ex.run_seed(cfg.replace(method=method), 1)
    tree = ast.parse(inspect.getsource(protocol))
    imported = {n.module for n in ast.walk(tree) if isinstance(n, ast.ImportFrom)}
    imported |= {a.name for n in ast.walk(tree) if isinstance(n, ast.Import) for a in n.names}
    if any(m and m.split(".")[-1] == "data" for m in imported):
        problems.append("protocol module imports the data module")
    ok = bool(seen) and not problems
    report(11, ok, f"{sum(seen)} uploads over {len(seen)} aggregations audited; "
                   f"problems: {problems or 'none'}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
