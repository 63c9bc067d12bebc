"""Experiment configuration, multi-seed runs, artifacts and plot-data export.

A run directory looks like::

    <output_dir>/
        config.cfg            flat dotted key = value snapshot
        summary.json
        seed_<s>/
            log.jsonl         one record per round
            manifest.jsonl    task streams
            final.fcil        global checkpoint

Logs contain no timestamps or paths, so rerunning a config reproduces them
byte for byte.
"""
from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import metrics
from .data import (
    LabeledDataset,
    TaskStream,
    ClientData,
    build_task_streams,
    make_synthetic_mixture,
    make_tiny_digits,
    streams_from_assignment,
    write_manifest,
)
from .errors import ConfigurationError, UsageError
from .models import AcganModel, Arch, generate
from .params import save_checkpoint
from .protocol import (
    CONSOLIDATION_SCOPES,
    ConsolidationConfig,
    RoundPlan,
    ServerState,
    run_round,
)
from .trainers import (
    AcganClient,
    DgrClient,
    FrozenGenerator,
    LocalConfig,
    LwF2TClient,
    PlainClient,
)

METHODS = ("fedcil", "fedavg", "fedprox", "fedavg_acgan", "fedprox_acgan",
           "fedavg_dgr", "fedprox_dgr", "fedlwf2t")
ACGAN_METHODS = ("fedcil", "fedavg_acgan", "fedprox_acgan")
DATASETS = ("mixture", "digits")
PLOT_KINDS = ("loss_trace", "grad_norm", "fid_trace", "confusion", "post_sync_accuracy")
SECTIONS = ("dataset", "consolidation", "consistency", "ablation")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset_name: str = "mixture"
    dataset_num_classes: int = 10
    dataset_data_dim: int = 4
    dataset_samples_per_class: int = 400
    num_clients: int = 5
    classes_per_task: int = 2
    num_tasks: int = 5
    method: str = "fedcil"
    local_iterations: int = 40
    rounds: int = 50
    batch_size: int = 32
    lr: float = 1e-4
    prox_mu: float = 0.01
    kd_temperature: float = 2.0
    consolidation_iterations: int = 10
    consolidation_batch_size: int = 32
    consolidation_lr: float = 1e-4
    consolidation_scope: str = "all"
    consistency_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    ablation_no_consolidation: bool = False
    ablation_no_consistency: bool = False
    ablation_no_replay: bool = False
    fid_samples: int = 200
    fixed_rounds: bool = False
    seeds: tuple[int, ...] = (1, 2, 3)
    output_dir: str = "runs/default"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "consistency_weights",
                           tuple(float(w) for w in self.consistency_weights))
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.dataset_name not in DATASETS:
            raise ConfigurationError(f"unknown dataset {self.dataset_name!r}")
        counts = ("dataset_num_classes", "dataset_data_dim", "dataset_samples_per_class",
                  "num_clients", "classes_per_task", "num_tasks", "local_iterations",
                  "rounds", "batch_size", "consolidation_batch_size", "fid_samples")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.consolidation_iterations < 0:
            raise ConfigurationError("consolidation_iterations must be >= 0")
        if self.rounds % self.num_tasks:
            raise ConfigurationError(
                f"rounds ({self.rounds}) must be divisible by num_tasks ({self.num_tasks})")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if len(self.consistency_weights) != 3 or min(self.consistency_weights) < 0:
            raise ConfigurationError("consistency weights: three non-negative numbers")
        if self.consolidation_scope not in CONSOLIDATION_SCOPES:
            raise ConfigurationError(
                f"consolidation.scope must be one of {CONSOLIDATION_SCOPES}")
        if self.lr <= 0 or self.consolidation_lr <= 0 or self.prox_mu < 0:
            raise ConfigurationError("learning rates must be positive and mu >= 0")
        classes = 10 if self.dataset_name == "digits" else self.dataset_num_classes
        if self.classes_per_task * self.num_tasks > classes:
            raise ConfigurationError(
                f"{self.num_tasks} tasks x {self.classes_per_task} classes exceed "
                f"the dataset's {classes} classes")
        ablations = (self.ablation_no_consolidation or self.ablation_no_consistency
                     or self.ablation_no_replay)
        if ablations and self.method != "fedcil":
            raise ConfigurationError("ablation flags apply to method=fedcil only")

    @property
    def rounds_per_task(self) -> int:
        return self.rounds // self.num_tasks

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # -- text form
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = list(value)
            lines.append(f"{_dotted(f.name)} = {json.dumps(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, overrides: Mapping[str, Any] | None = None
                  ) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
        parser.optionxform = str
        try:
            parser.read_string("[run]\n" + text)
        except configparser.Error as exc:
            raise ConfigurationError(f"malformed config: {exc}") from None
        values = {k: _parse_value(v) for k, v in parser["run"].items()}
        values.update(overrides or {})
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "ExperimentConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in values.items():
            name = key.replace(".", "_").replace("-", "_")
            if name not in known:
                raise ConfigurationError(f"unknown config key {key!r}")
            kwargs[name] = _coerce(known[name], value, key)
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path, overrides: Mapping[str, Any] | None = None
             ) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_text(text, overrides)


def _dotted(name: str) -> str:
    for sec in SECTIONS:
        if name.startswith(sec + "_"):
            return sec + "." + name[len(sec) + 1:]
    return name


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip().strip('"')


def _coerce(f: dataclasses.Field, value: Any, key: str) -> Any:
    default = f.default
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return value.lower() in ("true", "1", "yes")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split()]
            return tuple(type(default[0])(v) for v in value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"bad value for {key}: {value!r}") from None


# ---------------------------------------------------------------- building blocks

def make_dataset(cfg: ExperimentConfig, seed: int) -> LabeledDataset:
    if cfg.dataset_name == "digits":
        return make_tiny_digits(seed, cfg.dataset_samples_per_class)
    return make_synthetic_mixture(cfg.dataset_num_classes, cfg.dataset_samples_per_class,
                                  cfg.dataset_data_dim, seed)


def local_config(cfg: ExperimentConfig) -> LocalConfig:
    m = cfg.method
    mu = cfg.prox_mu if m.startswith("fedprox") else 0.0
    weights = (0.0, 0.0, 0.0)
    if m == "fedcil" and not cfg.ablation_no_consistency:
        weights = cfg.consistency_weights
    replay = not (m == "fedcil" and cfg.ablation_no_replay)
    return LocalConfig(batch_size=cfg.batch_size, lr=cfg.lr, prox_mu=mu, replay=replay,
                       consistency=weights, kd_temperature=cfg.kd_temperature)


def consolidation_config(cfg: ExperimentConfig) -> ConsolidationConfig:
    on = cfg.method == "fedcil" and not cfg.ablation_no_consolidation
    return ConsolidationConfig(on, cfg.consolidation_iterations,
                               cfg.consolidation_batch_size, cfg.consolidation_lr,
                               cfg.consolidation_scope)


def make_clients(cfg: ExperimentConfig, streams: Sequence[TaskStream], arch: Arch,
                 seed: int) -> list:
    m = cfg.method
    if m in ACGAN_METHODS:
        kind = AcganClient
    elif m in ("fedavg_dgr", "fedprox_dgr"):
        kind = DgrClient
    elif m == "fedlwf2t":
        kind = LwF2TClient
    else:
        kind = PlainClient
    lc = local_config(cfg)
    return [kind(ClientData(s), arch, lc, seed) for s in streams]


def arch_for(dataset: LabeledDataset) -> Arch:
    return Arch(data_dim=dataset.data_dim)


def _fid(model: AcganModel, streams: Sequence[TaskStream], up_to_task: int,
         n: int, seed: int) -> float:
    x, y = metrics.union_test_set(streams, up_to_task)
    rng = np.random.default_rng([seed, 0xF1D])
    pick = rng.choice(len(y), size=min(n, len(y)), replace=False)
    return metrics.proxy_fid(x[pick], generate(model, y[pick], rng))


def _client_fid(upload, stream: TaskStream, up_to_task: int, arch: Arch, n: int,
                seed: int) -> float:
    """Proxy-FID of one client's end-of-round generator on its own test split."""
    idx = np.concatenate([t.test_indices for t in stream.tasks[:up_to_task + 1]])
    y = stream.dataset.labels[idx]
    gen = FrozenGenerator(upload.params, arch)
    idx = idx[np.isin(y, gen.labels)]
    rng = np.random.default_rng([seed, 0xF1D, stream.client_id])
    pick = rng.choice(idx, size=min(n, len(idx)), replace=False)
    return metrics.proxy_fid(stream.dataset.samples[pick],
                             gen.sample(stream.dataset.labels[pick], rng))


# ---------------------------------------------------------------- runs

@dataclass
class SeedResult:
    seed: int
    final: metrics.EvalReport
    accuracy_trace: list[float]
    records: list[dict]
    streams: list[TaskStream] = field(repr=False)
    server: ServerState = field(repr=False)

    @property
    def final_accuracy(self) -> float:
        return self.final.accuracy


@dataclass
class RunArtifact:
    config: ExperimentConfig
    directory: Path | None
    results: list[SeedResult]

    @property
    def final_accuracies(self) -> list[float]:
        return [r.final_accuracy for r in self.results]

    @property
    def mean(self) -> float:
        return float(np.mean(self.final_accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.final_accuracies))

    def summary(self) -> dict:
        return {"method": self.config.method, "seeds": list(self.config.seeds),
                "final_accuracy": self.final_accuracies, "mean": self.mean, "std": self.std}


def run_streams(cfg: ExperimentConfig, streams: Sequence[TaskStream], seed: int,
                log_path: Path | None = None, fid: bool | None = None) -> SeedResult:
    """Run ``cfg.rounds`` rounds on prepared streams with one seed."""
    arch = arch_for(streams[0].dataset)
    clients = make_clients(cfg, streams, arch, seed)
    server = ServerState(AcganModel(arch, (), seed=seed), consolidation_config(cfg))
    fid = cfg.method in ACGAN_METHODS if fid is None else fid
    initial = server.broadcast()
    for c in clients:
        c.receive(initial, False)

    ids = tuple(c.client_id for c in clients)
    rpt = cfg.rounds_per_task
    records, trace = [], []
    report = None
    fh = open(log_path, "w") if log_path is not None else None
    try:
        for r in range(cfg.rounds):
            task = r // rpt
            end = (r + 1) % rpt == 0 and r + 1 < cfg.rounds
            plan = RoundPlan(r, ids, cfg.local_iterations, end, seed)
            server, record = run_round(server, clients, plan)
            report = metrics.evaluate_global(server.model, streams, task, r)
            trace.append(report.accuracy)
            rec = record.to_dict()
            rec.update(task=task, end_of_task=end, eval=report.to_dict())
            if fid:
                rec["proxy_fid"] = _fid(server.model, streams, task, cfg.fid_samples, seed)
                rec["client_fid"] = [_client_fid(u, s, task, arch, cfg.fid_samples, seed)
                                     for u, s in zip(record.uploads, streams)]
            records.append(rec)
            if fh is not None:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if fh is not None:
            fh.close()
    return SeedResult(seed, report, trace, records, list(streams), server)


def run_seed(cfg: ExperimentConfig, seed: int, directory: Path | None = None) -> SeedResult:
    dataset = make_dataset(cfg, seed)
    streams = build_task_streams(dataset, cfg.num_clients, cfg.classes_per_task,
                                 cfg.num_tasks, seed)
    log = None
    if directory is not None:
        directory.mkdir(parents=True, exist_ok=True)
        write_manifest(directory / "manifest.jsonl", streams)
        log = directory / "log.jsonl"
    res = run_streams(cfg, streams, seed, log)
    if directory is not None:
        save_checkpoint(directory / "final.fcil", res.server.model.snapshot())
    return res


def run(cfg: ExperimentConfig, write: bool = True) -> RunArtifact:
    """Run every seed of ``cfg``; with ``write`` all artifacts go under ``output_dir``."""
    cfg.validate()
    root = Path(cfg.output_dir) if write else None
    if root is not None:
        try:
            root.mkdir(parents=True, exist_ok=True)
            (root / "config.cfg").write_text(cfg.to_text())
        except OSError as exc:
            raise ConfigurationError(f"cannot write to {root}: {exc.strerror}") from None
    results = [run_seed(cfg, s, root / f"seed_{s}" if root else None) for s in cfg.seeds]
    art = RunArtifact(cfg, root, results)
    if root is not None:
        (root / "summary.json").write_text(json.dumps(art.summary(), sort_keys=True, indent=1)
                                           + "\n")
    return art


def round_delta_variance(trace: Sequence[float]) -> float:
    d = np.diff(np.asarray(trace, dtype=np.float64))
    return float(np.var(d)) if d.size else 0.0


def sweep_local_iterations(base: ExperimentConfig, t_values: Iterable[int],
                           write: bool = False) -> list[dict]:
    """One row per T. Total iterations T x R stay at the base budget unless
    ``base.fixed_rounds`` is set, in which case R is kept."""
    rows = []
    budget = base.local_iterations * base.rounds
    for t in t_values:
        t = int(t)
        if base.fixed_rounds:
            r = base.rounds
        else:
            if budget % t:
                raise ConfigurationError(f"T={t} does not divide the budget {budget}")
            r = budget // t
        cfg = base.replace(local_iterations=t, rounds=r,
                           output_dir=str(Path(base.output_dir) / f"T{t}"))
        art = run(cfg, write)
        rows.append({"T": t, "R": r, "mean": art.mean, "std": art.std,
                     "delta_var": float(np.mean([round_delta_variance(x.accuracy_trace)
                                                 for x in art.results]))})
    return rows


def compare_methods(configs: Mapping[str, ExperimentConfig], write: bool = False
                    ) -> list[dict]:
    """Ranking table, best mean first; ties keep insertion order."""
    rows = []
    for name, cfg in configs.items():
        art = run(cfg, write)
        rows.append({"name": name, "method": cfg.method, "mean": art.mean, "std": art.std,
                     "per_seed": art.final_accuracies})
    return sorted(rows, key=lambda r: -r["mean"])


def ablation_configs(base: ExperimentConfig) -> dict[str, ExperimentConfig]:
    b = base.replace(method="fedcil")
    out = Path(base.output_dir)
    return {
        "full": b.replace(output_dir=str(out / "full")),
        "-consolidation": b.replace(ablation_no_consolidation=True,
                                    output_dir=str(out / "no_consolidation")),
        "-consistency": b.replace(ablation_no_consistency=True,
                                  output_dir=str(out / "no_consistency")),
        "-replay": b.replace(ablation_no_replay=True, output_dir=str(out / "no_replay")),
    }


def imbalance_fixture(seed: int, consolidate: bool, rounds: int = 4,
                      local_iterations: int = 40, consolidation_iterations: int = 40,
                      lr: float = 2e-3) -> metrics.EvalReport:
    """Three clients on one task, class 1 held by clients 0 and 2.

    Returns the global model's report on the union test set after ``rounds``
    rounds, with the server either consolidating or merging only.
    """
    dataset = make_synthetic_mixture(10, 300, 4, seed)
    streams = streams_from_assignment(dataset, [[0, 1], [2, 3], [4, 1]], 2, seed)
    cfg = ExperimentConfig(method="fedcil", num_clients=3, num_tasks=1, rounds=rounds,
                           local_iterations=local_iterations, lr=lr,
                           consolidation_iterations=consolidation_iterations,
                           consolidation_lr=lr, ablation_no_consolidation=not consolidate,
                           seeds=(seed,))
    return run_streams(cfg, streams, seed, fid=False).final


# ---------------------------------------------------------------- export

def read_log(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _seed_dirs(run_dir: Path) -> list[Path]:
    dirs = sorted(p for p in run_dir.glob("seed_*") if (p / "log.jsonl").exists())
    if not dirs and (run_dir / "log.jsonl").exists():
        dirs = [run_dir]
    if not dirs:
        raise UsageError(f"no run logs under {run_dir}")
    return dirs


def export_plot_data(run_dir: str | Path, kind: str, out_dir: str | Path | None = None
                     ) -> list[Path]:
    """Write CSV plot data for one figure kind; returns the files written."""
    if kind not in PLOT_KINDS:
        raise UsageError(f"unknown export kind {kind!r}; choose from {PLOT_KINDS}")
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir / "plots"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for sd in _seed_dirs(run_dir):
        log = read_log(sd / "log.jsonl")
        tag = sd.name if sd != run_dir else "run"
        path = out_dir / f"{kind}_{tag}.csv"
        if kind in ("loss_trace", "grad_norm"):
            key = "ce_trace" if kind == "loss_trace" else "grad_norm_trace"
            rows = []
            for rec in log:
                for c in rec["clients"]:
                    for i, v in enumerate(c[key]):
                        rows.append([rec["round"], c["client"], i, repr(float(v))])
            header = ["round", "client", "iteration", "value"]
            metrics.write_csv(path, header, rows)
        elif kind == "fid_trace":
            # one row per client generator; client -1 is the global model
            rows = []
            for rec in log:
                if "proxy_fid" not in rec:
                    continue
                rows.append([rec["round"], -1, repr(float(rec["proxy_fid"]))])
                rows += [[rec["round"], ci, repr(float(v))]
                         for ci, v in enumerate(rec.get("client_fid", []))]
            metrics.write_csv(path, ["round", "client", "proxy_fid"], rows)
        elif kind == "post_sync_accuracy":
            rows = [[rec["round"], c["client"], repr(float(c["post_sync_acc"]))]
                    for rec in log for c in rec["clients"]]
            metrics.write_csv(path, ["round", "client", "accuracy"], rows)
        else:
            ev = log[-1]["eval"]
            report = metrics.EvalReport(ev["accuracy"], ev["labels"],
                                        np.asarray(ev["confusion"], dtype=np.int64), {})
            metrics.confusion_csv(path, report)
        written.append(path)
    return written
