"""Server side of the federated round: merge, grow, consolidate, broadcast.

Only :class:`Upload` values cross from clients to the server. An upload holds
a :class:`~fedcil.params.ParameterVector`, a sample count and the set of class
labels the client trained this round; no sample data or indices.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np

from .errors import ProtocolError
from .models import GEN, AcganModel, AcganOptimizer, alternating_step, sample_with
from .params import (
    CLASS_COLUMN_ENTRIES,
    CLASS_ROW_ENTRIES,
    ParameterVector,
    require_compatible,
    to_bytes,
)


@dataclass(frozen=True)
class Upload:
    params: ParameterVector
    sample_count: int
    classes: frozenset[int]

    def __post_init__(self):
        if self.sample_count <= 0:
            raise ProtocolError("upload must carry a positive sample count")
        object.__setattr__(self, "classes", frozenset(int(k) for k in self.classes))


CONSOLIDATION_SCOPES = ("all", "discriminator")


@dataclass(frozen=True)
class ConsolidationConfig:
    enabled: bool = False
    iterations: int = 100
    batch_size: int = 32
    lr: float = 1e-4
    scope: str = "all"  # "all" or "discriminator" (generator left as merged)

    def __post_init__(self):
        if self.scope not in CONSOLIDATION_SCOPES:
            raise ProtocolError(f"consolidation scope must be one of {CONSOLIDATION_SCOPES}")


@dataclass
class ServerState:
    model: AcganModel
    consolidation: ConsolidationConfig = field(default_factory=ConsolidationConfig)
    round: int = 0
    merges: int = 0

    @property
    def known_classes(self) -> tuple[int, ...]:
        return tuple(self.model.labels)

    def broadcast(self) -> ParameterVector:
        return self.model.snapshot()


@dataclass(frozen=True)
class RoundPlan:
    round_index: int
    selected: tuple[int, ...]
    local_iterations: int
    end_of_task: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.selected:
            raise ProtocolError("a round needs at least one selected client")
        if self.local_iterations < 1:
            raise ProtocolError("local iterations must be >= 1")


class Client(Protocol):
    """What the protocol needs from a local trainer (strategy-agnostic)."""

    client_id: int

    def receive(self, params: ParameterVector, has_global_generator: bool) -> None: ...
    def local_accuracy(self) -> float: ...
    def train(self, iterations: int) -> list: ...
    def upload(self) -> Upload: ...
    def on_task_boundary(self) -> None: ...


# ---------------------------------------------------------------- merging

def _canonical(uploads: Sequence[Upload]) -> list[Upload]:
    def key(u: Upload):
        digest = hashlib.sha256(to_bytes(u.params)).hexdigest()
        return (u.sample_count, tuple(sorted(u.classes)), digest)
    return sorted(uploads, key=key)


def _weighted_mean(arrays: list[np.ndarray], weights: list[float]) -> np.ndarray:
    # offsets from the first array: identical inputs give the input back exactly
    ref = arrays[0]
    total = float(np.sum(weights))
    out = ref.copy()
    for a, w in zip(arrays[1:], weights[1:]):
        out += (w / total) * (a - ref)
    return out


def merge_parameters(uploads: Sequence[Upload], base: ParameterVector | None = None
                     ) -> ParameterVector:
    """Sample-weighted average of bodies plus a per-class ensemble of heads.

    For every class label, the class-head row (and the generator's one-hot
    input column) is averaged over exactly the uploads that trained that
    class this round; a class trained by one client copies its row. Classes
    nobody trained fall back to all uploads that carry the label, then to
    ``base``. Entries absent from the uploads are copied from ``base``.

    The output label order is ``base.labels`` followed by new labels sorted.
    The result does not depend on the order of ``uploads``.
    """
    if not uploads:
        raise ProtocolError("nothing to merge")
    ups = _canonical(uploads)
    vectors = [u.params for u in ups]
    require_compatible(vectors)
    names = vectors[0].names
    labels = list(base.labels) if base is not None else []
    seen = set(labels)
    labels += sorted({k for v in vectors for k in v.labels} - seen)
    if base is not None:
        missing = [n for n in names if n not in base]
        if missing:
            raise ProtocolError(f"uploads carry entries unknown to the server: {missing}")
        out_names = base.names
    else:
        out_names = names
    weights = [float(u.sample_count) for u in ups]
    rows_of = [{lab: i for i, lab in enumerate(v.labels)} for v in vectors]
    base_rows = {lab: i for i, lab in enumerate(base.labels)} if base is not None else {}

    def class_slices(get, base_get) -> list[np.ndarray]:
        out = []
        for lab in labels:
            trained = [i for i, u in enumerate(ups) if lab in u.classes and lab in rows_of[i]]
            carriers = trained or [i for i in range(len(ups)) if lab in rows_of[i]]
            if carriers:
                out.append(_weighted_mean([get(i, rows_of[i][lab]) for i in carriers],
                                          [weights[i] for i in carriers]))
            elif lab in base_rows:
                out.append(base_get(base_rows[lab]).copy())
            else:
                raise ProtocolError(f"no source for class {lab}")
        return out

    entries = []
    for name in out_names:
        if name not in names:
            entries.append((name, base[name]))
            continue
        arrays = [v[name] for v in vectors]
        if name in CLASS_ROW_ENTRIES:
            parts = class_slices(lambda i, r: arrays[i][r],
                                 lambda r: base[name][r])
            width = arrays[0].shape[1:]
            merged = np.stack(parts) if parts else np.zeros((0,) + width)
        elif name in CLASS_COLUMN_ENTRIES:
            noise = arrays[0].shape[1] - len(vectors[0].labels)
            body = _weighted_mean([a[:, :noise] for a in arrays], weights)
            parts = class_slices(lambda i, c: arrays[i][:, noise + c],
                                 lambda c: base[name][:, noise + c])
            cols = np.stack(parts, axis=1) if parts else np.zeros((body.shape[0], 0))
            merged = np.concatenate([body, cols], axis=1)
        else:
            merged = _weighted_mean(arrays, weights)
        entries.append((name, merged))
    return ParameterVector(tuple(entries), tuple(labels))


# ---------------------------------------------------------------- consolidation

def balanced_labels(classes: Sequence[int], batch_size: int, cursor: int = 0) -> list[int]:
    """Round-robin labels over ``classes`` starting at position ``cursor``."""
    cls = list(classes)
    return [cls[(cursor + i) % len(cls)] for i in range(batch_size)]


class _Source:
    def __init__(self, params: ParameterVector, classes):
        self.params = {n: a for n, a in params.entries if n.startswith(GEN)}
        self.labels = list(params.labels)
        self.row = {lab: i for i, lab in enumerate(self.labels)}
        self.classes = frozenset(k for k in classes if k in self.row)


def synthetic_batch(sources: list[_Source], labels: Sequence[int], arch,
                    rng: np.random.Generator) -> np.ndarray:
    """One sample per label, each from a uniformly chosen source knowing it."""
    owners = []
    for lab in labels:
        able = [i for i, s in enumerate(sources) if lab in s.classes]
        owners.append(able[int(rng.integers(len(able)))])
    owners = np.asarray(owners)
    labels = np.asarray(labels)
    out = np.empty((len(labels), arch.data_dim))
    for i in np.unique(owners):
        sel = np.flatnonzero(owners == i)
        src = sources[i]
        rows_ = np.array([src.row[int(k)] for k in labels[sel]])
        out[sel] = sample_with(src.params, arch, rows_, len(src.labels), rng)
    return out


def consolidate(server: ServerState, generators: Sequence[tuple[ParameterVector, frozenset]],
                rng: np.random.Generator) -> ServerState:
    """Fine-tune the global ACGAN on class-balanced samples from uploaded generators.

    Each iteration builds a batch whose labels cycle through the union of
    uploaded class sets; every sample comes from a uniformly chosen uploaded
    generator that trained its label. Those samples play the role of real
    data in one alternating ACGAN update of the global model.
    """
    cfg = server.consolidation
    if cfg.iterations == 0 or not generators:
        return server
    sources = [_Source(pv, classes) for pv, classes in generators]
    union = sorted(set().union(*(set(c) for _, c in generators)))
    covered = set().union(*(s.classes for s in sources))
    orphans = [k for k in union if k not in covered]
    if orphans:
        raise ProtocolError(f"classes {orphans} have no uploaded generator")
    model = server.model.copy()
    unknown = [k for k in union if k not in model.labels]
    if unknown:
        raise ProtocolError(f"server model lacks classes {unknown}")
    opt = AcganOptimizer(model, cfg.lr)
    cursor = 0
    for _ in range(cfg.iterations):
        labels = balanced_labels(union, cfg.batch_size, cursor)
        cursor = (cursor + cfg.batch_size) % len(union)
        xg = synthetic_batch(sources, labels, model.arch, rng)
        alternating_step(model, opt, xg, labels, rng, classes=union,
                         update_generator=cfg.scope == "all")
    return replace(server, model=model)


# ---------------------------------------------------------------- rounds

def aggregate(server: ServerState, uploads: Sequence[Upload],
              rng: np.random.Generator) -> ServerState:
    """Grow to the union of uploaded labels, merge, and consolidate if enabled."""
    model = server.model.copy()
    incoming = sorted({k for u in uploads for k in u.params.labels} | {k for u in uploads for k in u.classes})
    model.add_labels([k for k in incoming if k not in model.labels], rng)
    merged = merge_parameters(uploads, base=model.snapshot())
    model.load(merged)
    state = replace(server, model=model, round=server.round + 1, merges=server.merges + 1)
    if server.consolidation.enabled:
        gens = [(u.params, u.classes) for u in uploads if "gen.0.W" in u.params]
        state = consolidate(state, gens, rng)
    return state


@dataclass
class RoundRecord:
    round_index: int
    clients: list[dict]
    fields: dict = field(default_factory=dict)
    uploads: list[Upload] = field(default_factory=list, repr=False)  # not serialised

    def to_dict(self) -> dict:
        return {"round": self.round_index, "clients": self.clients, **self.fields}


def run_round(server: ServerState, clients: Sequence[Client], plan: RoundPlan
              ) -> tuple[ServerState, RoundRecord]:
    """Local training, upload, aggregation and broadcast to every client.

    Clients are expected to hold the current global parameters already
    (the previous round's broadcast, or the initial one).
    """
    by_id = {c.client_id: c for c in clients}
    try:
        selected = [by_id[i] for i in plan.selected]
    except KeyError as exc:
        raise ProtocolError(f"unknown client {exc.args[0]}") from None
    rng = np.random.default_rng([plan.seed, plan.round_index, 0x5E])

    entries = []
    uploads = []
    for c in selected:
        post_sync = c.local_accuracy()
        try:
            stats = c.train(plan.local_iterations)
            up = c.upload()
        except Exception as exc:
            raise ProtocolError(f"client {c.client_id} failed: {exc}") from exc
        if not isinstance(up, Upload):
            raise ProtocolError(f"client {c.client_id} uploaded {type(up).__name__}")
        uploads.append(up)
        entries.append(client_summary(c.client_id, post_sync, stats))

    if plan.end_of_task:
        for c in clients:
            c.on_task_boundary()

    new_server = aggregate(server, uploads, rng)
    if not set(server.known_classes) <= set(new_server.known_classes):
        raise ProtocolError("known classes shrank")
    params = new_server.broadcast()
    for c in clients:
        c.receive(params, True)
    return new_server, RoundRecord(plan.round_index, entries, uploads=uploads)


def client_summary(client_id: int, post_sync: float, stats: list) -> dict:
    def series(key):
        return [float(getattr(s, key)) for s in stats]

    ce, gn = series("ce"), series("grad_norm")
    out = {
        "client": client_id,
        "post_sync_acc": float(post_sync),
        "ce_trace": ce,
        "grad_norm_trace": gn,
        "grad_norm_max": max(gn) if gn else 0.0,
    }
    for key in ("gen", "dis", "ce", "c1", "c2", "c3", "grad_norm"):
        vals = series(key)
        out[f"{key}_mean"] = float(np.mean(vals)) if vals else 0.0
    return out
