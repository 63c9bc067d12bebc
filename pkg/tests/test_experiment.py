import json

import numpy as np
import pytest

from fedcil import experiment as ex
from fedcil.errors import ConfigurationError, UsageError
from fedcil.experiment import ExperimentConfig

TINY = dict(dataset_num_classes=4, dataset_data_dim=2, dataset_samples_per_class=60,
            num_clients=2, num_tasks=2, local_iterations=4, rounds=4, batch_size=8,
            consolidation_iterations=2, fid_samples=40, seeds=(1,))


def tiny(tmp_path=None, **kw):
    out = {"output_dir": str(tmp_path / "run")} if tmp_path is not None else {}
    return ExperimentConfig(**{**TINY, **out, **kw})


# ---------------------------------------------------------------- config

def test_defaults_are_desk_scale():
    c = ExperimentConfig()
    assert (c.num_clients, c.num_tasks, c.classes_per_task) == (5, 5, 2)
    assert (c.local_iterations, c.rounds, c.rounds_per_task) == (40, 50, 10)
    assert c.seeds == (1, 2, 3)


def test_config_text_round_trip(tmp_path):
    c = tiny(method="fedprox", prox_mu=0.5, consistency_weights=(1, 0.5, 0))
    text = c.to_text()
    assert "dataset.num_classes = 4" in text and "consistency.weights = [1.0, 0.5, 0.0]" in text
    assert ExperimentConfig.from_text(text) == c
    (tmp_path / "c.cfg").write_text(text)
    assert ExperimentConfig.load(tmp_path / "c.cfg", {"rounds": 8}).rounds == 8


def test_config_accepts_loose_values():
    c = ExperimentConfig.from_text("method = fedavg\nseeds = 4, 5\nablation.no_replay = false\n")
    assert c.method == "fedavg" and c.seeds == (4, 5) and not c.ablation_no_replay


@pytest.mark.parametrize("bad", [
    {"method": "fedsgd"},
    {"rounds": 7},
    {"num_clients": 0},
    {"lr": 0.0},
    {"num_tasks": 6},
    {"consistency_weights": (1.0, -1.0, 0.0)},
    {"method": "fedavg", "ablation_no_replay": True},
    {"seeds": ()},
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigurationError):
        ExperimentConfig(**bad)


def test_config_parse_errors(tmp_path):
    with pytest.raises(ConfigurationError, match="unknown config key"):
        ExperimentConfig.from_text("colour = 3\n")
    with pytest.raises(ConfigurationError, match="bad value"):
        ExperimentConfig.from_text("rounds = 2.5\n")
    with pytest.raises(ConfigurationError, match="cannot read"):
        ExperimentConfig.load(tmp_path / "missing.cfg")


def test_method_wiring():
    assert ex.local_config(tiny(method="fedavg")).prox_mu == 0.0
    assert ex.local_config(tiny(method="fedprox_acgan")).prox_mu == 0.01
    assert ex.local_config(tiny(method="fedavg_acgan")).consistency == (0.0, 0.0, 0.0)
    assert ex.local_config(tiny(ablation_no_consistency=True)).consistency == (0.0, 0.0, 0.0)
    assert not ex.local_config(tiny(ablation_no_replay=True)).replay
    assert ex.consolidation_config(tiny()).enabled
    assert not ex.consolidation_config(tiny(ablation_no_consolidation=True)).enabled
    assert not ex.consolidation_config(tiny(method="fedavg_acgan")).enabled


# ---------------------------------------------------------------- runs

def test_run_writes_artifacts(tmp_path):
    art = ex.run(tiny(tmp_path))
    root = tmp_path / "run"
    assert ExperimentConfig.load(root / "config.cfg") == art.config
    seed_dir = root / "seed_1"
    for name in ("log.jsonl", "manifest.jsonl", "final.fcil"):
        assert (seed_dir / name).exists()
    log = ex.read_log(seed_dir / "log.jsonl")
    assert [r["round"] for r in log] == [0, 1, 2, 3]
    assert [r["end_of_task"] for r in log] == [False, True, False, False]
    assert all("proxy_fid" in r and "client_fid" in r for r in log)
    summary = json.loads((root / "summary.json").read_text())
    assert summary["mean"] == art.mean


@pytest.mark.parametrize("method", ex.METHODS)
def test_every_method_runs(method):
    art = ex.run(tiny(method=method), write=False)
    assert 0.0 <= art.mean <= 1.0
    assert len(art.results[0].accuracy_trace) == 4


def test_rerun_logs_byte_identical(tmp_path):
    a = ex.run(tiny(tmp_path / "a"))
    b = ex.run(tiny(tmp_path / "b"))
    la = (a.directory / "seed_1" / "log.jsonl").read_bytes()
    lb = (b.directory / "seed_1" / "log.jsonl").read_bytes()
    assert la == lb
    assert ((a.directory / "seed_1" / "final.fcil").read_bytes()
            == (b.directory / "seed_1" / "final.fcil").read_bytes())


def test_rerun_from_persisted_config(tmp_path):
    a = ex.run(tiny(tmp_path / "a"))
    again = ExperimentConfig.load(a.directory / "config.cfg",
                                  {"output_dir": str(tmp_path / "b")})
    b = ex.run(again)
    assert ((a.directory / "seed_1" / "log.jsonl").read_bytes()
            == (b.directory / "seed_1" / "log.jsonl").read_bytes())


def test_single_task_fedavg_improves():
    cfg = tiny(method="fedavg", num_tasks=1, classes_per_task=4, rounds=10,
               local_iterations=10)
    trace = ex.run(cfg, write=False).results[0].accuracy_trace
    assert np.polyfit(np.arange(len(trace)), trace, 1)[0] > 0
    assert trace[-1] > trace[0]


def test_unwritable_output_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ConfigurationError, match="cannot write"):
        ex.run(tiny(output_dir=str(blocker / "sub")))


# ---------------------------------------------------------------- sweeps

def test_sweep_rows_and_budget():
    rows = ex.sweep_local_iterations(tiny(), [2, 4])
    assert [(r["T"], r["R"]) for r in rows] == [(2, 8), (4, 4)]
    fixed = ex.sweep_local_iterations(tiny(fixed_rounds=True), [2])
    assert fixed[0]["R"] == 4
    with pytest.raises(ConfigurationError):
        ex.sweep_local_iterations(tiny(), [3])


def test_sweep_single_value_equals_run():
    cfg = tiny()
    (row,) = ex.sweep_local_iterations(cfg, [cfg.local_iterations])
    assert row["mean"] == ex.run(cfg, write=False).mean


def test_compare_and_ablations():
    cfg = tiny()
    (row,) = ex.compare_methods({"fedcil": cfg})
    assert row["mean"] == ex.run(cfg, write=False).mean
    abl = ex.ablation_configs(cfg)
    assert list(abl) == ["full", "-consolidation", "-consistency", "-replay"]
    rows = ex.compare_methods(abl)
    assert len(rows) == 4
    assert [r["mean"] for r in rows] == sorted((r["mean"] for r in rows), reverse=True)


# ---------------------------------------------------------------- export

def test_export_all_kinds(tmp_path):
    art = ex.run(tiny(tmp_path))
    log = ex.read_log(art.directory / "seed_1" / "log.jsonl")
    for kind in ex.PLOT_KINDS:
        (path,) = ex.export_plot_data(art.directory, kind)
        first = path.read_bytes()
        ex.export_plot_data(art.directory, kind)
        assert path.read_bytes() == first
        lines = first.decode().splitlines()
        if kind == "loss_trace":
            recorded = sum(len(c["ce_trace"]) for r in log for c in r["clients"])
            assert len(lines) - 1 == recorded
        if kind == "fid_trace":
            assert len(lines) - 1 == sum(1 + len(r["client_fid"]) for r in log)
        if kind == "confusion":
            grid = [l.split(",")[1:] for l in lines[1:]]
            assert np.array_equal(np.array(grid, dtype=int), log[-1]["eval"]["confusion"])


def test_export_errors(tmp_path):
    with pytest.raises(UsageError):
        ex.export_plot_data(tmp_path, "histogram")
    with pytest.raises(UsageError):
        ex.export_plot_data(tmp_path, "confusion")
