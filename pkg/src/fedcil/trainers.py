"""Local training strategies behind one client contract.

Every trainer initialises from the broadcast, runs ``T`` local steps on the
current task and uploads a :class:`~fedcil.protocol.Upload`:

* :class:`AcganClient` - ACGAN with optional generative replay from a frozen
  end-of-previous-task generator, optional consistency losses against the
  frozen global generator (FedCIL), and an optional proximal term.
* :class:`DgrClient` - unconditional GAN + classifier; replay labelled by the
  previous classifier; only the classifier is synchronised.
* :class:`PlainClient` - classifier cross-entropy (FedAvg, FedProx).
* :class:`LwF2TClient` - cross-entropy plus distillation from the previous-task
  classifier and the broadcast global classifier.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import ClientData
from .models import (
    CLASSIFIER,
    DISC_CLS,
    GEN,
    AcganModel,
    Arch,
    bind,
    class_logits,
    classify,
    discriminator_terms,
    draw_fake_inputs,
    features,
    generator_terms,
    leaf_grads,
    sample_rows_from_noise,
    sample_with,
)
from .params import ParameterVector
from .protocol import Upload


@dataclass(frozen=True)
class LocalConfig:
    batch_size: int = 32
    lr: float = 1e-4
    betas: tuple[float, float] = (0.5, 0.999)
    prox_mu: float = 0.0
    replay: bool = True
    consistency: tuple[float, float, float] = (0.0, 0.0, 0.0)
    kd_temperature: float = 2.0


@dataclass
class StepStats:
    iter: int
    gen: float = 0.0
    dis: float = 0.0
    ce: float = 0.0
    c1: float = 0.0
    c2: float = 0.0
    c3: float = 0.0
    prox: float = 0.0
    grad_norm: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


class FrozenGenerator:
    """Read-only conditional generator snapshot; never receives updates."""

    def __init__(self, pv: ParameterVector, arch: Arch):
        self.pv = pv.subset(GEN)
        self.arch = arch
        self.params = dict(self.pv.entries)
        self.labels = list(pv.labels)
        self._row = {lab: i for i, lab in enumerate(self.labels)}

    def knows(self, label: int) -> bool:
        return label in self._row

    def sample(self, labels, rng: np.random.Generator) -> np.ndarray:
        rows_ = np.array([self._row[int(k)] for k in labels], dtype=np.int64)
        return sample_with(self.params, self.arch, rows_, len(self.labels), rng)


def ce_head_gradient_norm(probs: np.ndarray, feats: np.ndarray, rows_: np.ndarray) -> float:
    """Frobenius norm of d(mean CE)/d(class-head weights): ``(P - Y)^T F / B``."""
    diff = probs.copy()
    diff[np.arange(len(rows_)), rows_] -= 1.0
    return float(np.linalg.norm(diff.T @ feats) / len(rows_))


def _prox(p: Mapping[str, Tensor], anchor: Mapping[str, np.ndarray], mu: float):
    terms = [ad.squared_distance(t, anchor[n]) for n, t in p.items()
             if t.tape is not None and n in anchor and anchor[n].shape == t.shape]
    if mu == 0.0 or not terms:
        return None
    return ad.scalar_mul(ad.sum_all(terms), mu / 2.0)


def proximal_term(params: Mapping[str, np.ndarray], anchor: Mapping[str, np.ndarray],
                  mu: float) -> float:
    """Value of ``mu/2 * ||theta - theta_broadcast||^2``."""
    return mu / 2.0 * float(sum(((params[n] - anchor[n]) ** 2).sum() for n in params))


class _ClientBase:
    upload_prefixes: tuple[str, ...] | None = None

    def __init__(self, data: ClientData, arch: Arch, config: LocalConfig, seed: int = 0):
        self.data = data
        self.client_id = data.client_id
        self.arch = arch
        self.config = config
        self.rng = np.random.default_rng([seed, 1000 + data.client_id])
        self.model = AcganModel(arch, (), seed=seed)
        self.anchor: dict[str, np.ndarray] = {}
        self.steps = 0
        self.has_global = False

    # -- contract
    def receive(self, params: ParameterVector, has_global_generator: bool) -> None:
        self.model.load(params)
        self.model.add_labels(sorted(k for k in self.data.learned_classes
                                     if k not in self.model.labels), self.rng)
        self.anchor = {k: v.copy() for k, v in self.model.params.items()}
        self.has_global = has_global_generator
        self._reset_optimizers()

    def local_accuracy(self) -> float:
        x, y = self.data.test_set()
        known = np.isin(y, self.model.labels)
        if self.model.num_classes == 0:
            return 0.0
        pred = np.asarray(self.model.labels)[classify(self.model, x).argmax(axis=1)]
        return float(np.mean((pred == y) & known))

    def train(self, iterations: int) -> list[StepStats]:
        out = []
        for _ in range(iterations):
            x, y = self.data.batch(self.config.batch_size, self.rng)
            out.append(self.step(x, y))
        return out

    def trained_classes(self) -> list[int]:
        return self.data.current_classes

    def upload(self) -> Upload:
        return Upload(self.model.snapshot(self.upload_prefixes), self.data.train_size,
                      frozenset(self.trained_classes()))

    def on_task_boundary(self) -> None:
        self.data.advance()
        self.model.add_labels(sorted(self.data.current_classes), self.rng)
        self._reset_optimizers()

    # -- hooks
    def _reset_optimizers(self) -> None:
        raise NotImplementedError

    def step(self, x: np.ndarray, y: np.ndarray) -> StepStats:
        raise NotImplementedError


# ---------------------------------------------------------------- ACGAN family

class AcganClient(_ClientBase):
    """ACGAN client; FedCIL when consistency weights are non-zero."""

    def __init__(self, data, arch, config, seed=0):
        super().__init__(data, arch, config, seed)
        self.prev_generator: FrozenGenerator | None = None
        self.global_generator: FrozenGenerator | None = None

    def receive(self, params, has_global_generator):
        super().receive(params, has_global_generator)
        uses_global = any(w > 0 for w in self.config.consistency)
        self.global_generator = (FrozenGenerator(params, self.arch)
                                 if has_global_generator and uses_global else None)

    def _reset_optimizers(self):
        lr, betas = self.config.lr, self.config.betas
        self.d_opt = ad.Adam(self.model.group(DISC_CLS), lr, betas)
        self.g_opt = ad.Adam(self.model.group(GEN), lr, betas)

    def trained_classes(self):
        return self.data.learned_classes if self.config.replay else self.data.current_classes

    def on_task_boundary(self):
        self.prev_generator = FrozenGenerator(self.model.snapshot(GEN), self.arch)
        super().on_task_boundary()

    def step(self, x, y):
        return acgan_client_step(self, x, y)


def acgan_client_step(st: AcganClient, x: np.ndarray, y: np.ndarray) -> StepStats:
    """One local iteration: discriminator/classifier update then generator update.

    Discriminator side minimises ``L_dis`` on real plus replayed samples and
    the weighted consistency terms; the generator side minimises ``L_gen``.
    Terms whose generator or labels are unavailable are left out.
    """
    cfg, m, rng = st.config, st.model, st.rng
    b = len(x)
    prev = st.data.previous_classes
    replay_on = cfg.replay and st.prev_generator is not None and bool(prev)
    real_x, real_y = x, np.asarray(y)
    if replay_on:
        lab_r = np.asarray(prev)[rng.integers(len(prev), size=b)]
        real_x = np.concatenate([x, st.prev_generator.sample(lab_r, rng)])
        real_y = np.concatenate([real_y, lab_r])
    fake_pool = st.data.learned_classes if cfg.replay else st.data.current_classes
    fake_rows, z = draw_fake_inputs(m, len(real_x), rng, fake_pool)
    fake_x = sample_rows_from_noise(m.params, m.arch, z, fake_rows, m.num_classes)

    w1, w2, w3 = cfg.consistency
    gg = st.global_generator
    extra, plan = [], {}
    if gg is not None:
        if w1 > 0 and cfg.replay and st.prev_generator is not None:
            pool = [k for k in prev if gg.knows(k) and st.prev_generator.knows(k)]
            if pool:
                lab1 = np.asarray(pool)[rng.integers(len(pool), size=b)]
                plan["c1"] = len(extra)
                extra += [st.prev_generator.sample(lab1, rng), gg.sample(lab1, rng)]
        if w2 > 0:
            sel = np.flatnonzero([gg.knows(int(k)) for k in y])
            if sel.size:
                plan["c2"] = (len(extra), sel)
                extra.append(gg.sample(np.asarray(y)[sel], rng))
        if w3 > 0:
            pool = [k for k in gg.labels if k in m.labels]
            lab3 = np.asarray(pool)[rng.integers(len(pool), size=b)]
            plan["c3"] = (len(extra), m.label_index(lab3))
            extra.append(gg.sample(lab3, rng))

    tape = Tape()
    p = bind(m.params, tape, DISC_CLS)
    real_rows = m.label_index(real_y)
    terms = discriminator_terms(p, real_x, real_rows, fake_x, fake_rows, extra, m.arch.leak)
    d_total = terms.total
    loss_terms = [d_total]
    stats = StepStats(st.steps)
    if "c1" in plan:
        i = plan["c1"]
        c1 = ad.kl_divergence(terms.extra_probs[i], terms.extra_probs[i + 1])
        loss_terms.append(ad.scalar_mul(c1, w1))
        stats.c1 = float(c1.values)
    if "c2" in plan:
        i, sel = plan["c2"]
        real_p = ad.gather_rows(ad.rows(terms.real_p, 0, b), sel)
        c2 = ad.kl_divergence(real_p, terms.extra_probs[i])
        loss_terms.append(ad.scalar_mul(c2, w2))
        stats.c2 = float(c2.values)
    if "c3" in plan:
        i, rows3 = plan["c3"]
        c3 = ad.cross_entropy(terms.extra_probs[i], ad.one_hot(rows3, m.num_classes))
        loss_terms.append(ad.scalar_mul(c3, w3))
        stats.c3 = float(c3.values)
    prox_d = _prox(p, st.anchor, cfg.prox_mu)
    if prox_d is not None:
        loss_terms.append(prox_d)
        stats.prox += float(prox_d.values)
    d_loss = ad.sum_all(loss_terms)
    ad.backward(d_loss)
    st.d_opt.step(leaf_grads(p))

    probs_x = terms.real_probs[:b]
    rows_x = real_rows[:b]
    stats.dis = float(d_total.values)
    stats.ce = float(-np.mean(np.log(np.maximum(probs_x[np.arange(b), rows_x], ad.EPS))))
    stats.grad_norm = ce_head_gradient_norm(probs_x, terms.real_feats[:b], rows_x)

    tape = Tape()
    p = bind(m.params, tape, GEN)
    gan, ce = generator_terms(p, z, fake_rows, m.arch.leak)
    g_terms = [gan, ce]
    prox_g = _prox(p, st.anchor, cfg.prox_mu)
    if prox_g is not None:
        g_terms.append(prox_g)
        stats.prox += float(prox_g.values)
    g_loss = ad.sum_all(g_terms)
    ad.backward(g_loss)
    st.g_opt.step(leaf_grads(p))
    stats.gen = float(gan.values) + float(ce.values)
    st.steps += 1
    return stats


def fedcil_local_step(state: AcganClient, batch: tuple[np.ndarray, np.ndarray]) -> StepStats:
    """FedCIL client objective: local ACGAN loss with replay plus consistency terms."""
    return acgan_client_step(state, *batch)


def acgan_replay_local_step(state: AcganClient, batch: tuple[np.ndarray, np.ndarray]) -> StepStats:
    """ACGAN with local generative replay only (consistency weights ignored)."""
    saved = state.config
    state.config = LocalConfig(**{**asdict(saved), "consistency": (0.0, 0.0, 0.0)})
    try:
        return acgan_client_step(state, *batch)
    finally:
        state.config = saved


# ---------------------------------------------------------------- classifier-only

def _classifier_forward(p, x: np.ndarray, leak: float) -> tuple[Tensor, Tensor]:
    feats = features(p, Tensor(x), leak)
    return feats, class_logits(p, feats)


class PlainClient(_ClientBase):
    """FedAvg (``prox_mu == 0``) or FedProx client."""

    upload_prefixes = CLASSIFIER

    def _reset_optimizers(self):
        self.opt = ad.Adam(self.model.group(CLASSIFIER), self.config.lr, self.config.betas)

    def step(self, x, y):
        return plain_local_step(self, (x, y))


def plain_local_step(st: PlainClient, batch) -> StepStats:
    x, y = batch
    m = st.model
    tape = Tape()
    p = bind(m.params, tape, CLASSIFIER)
    rows_ = m.label_index(y)
    feats, logits = _classifier_forward(p, x, m.arch.leak)
    probs = ad.softmax(logits)
    ce = ad.cross_entropy(probs, ad.one_hot(rows_, m.num_classes))
    stats = StepStats(st.steps, ce=float(ce.values))
    terms = [ce]
    prox = _prox(p, st.anchor, st.config.prox_mu)
    if prox is not None:
        terms.append(prox)
        stats.prox = float(prox.values)
    ad.backward(ad.sum_all(terms))
    st.opt.step(leaf_grads(p))
    stats.grad_norm = ce_head_gradient_norm(probs.values, feats.values, rows_)
    st.steps += 1
    return stats


class LwF2TClient(PlainClient):
    """Learning without Forgetting with two teachers: previous task and global model."""

    def __init__(self, data, arch, config, seed=0):
        super().__init__(data, arch, config, seed)
        self.prev_teacher: ParameterVector | None = None
        self.global_teacher: ParameterVector | None = None

    def receive(self, params, has_global_generator):
        super().receive(params, has_global_generator)
        self.global_teacher = params.subset(CLASSIFIER)

    def on_task_boundary(self):
        self.prev_teacher = self.model.snapshot(CLASSIFIER)
        super().on_task_boundary()

    def step(self, x, y):
        return lwf2t_local_step(self, (x, y))


def distillation_term(student_logits: Tensor, student_labels: list[int],
                      teacher: ParameterVector, x: np.ndarray, temperature: float,
                      leak: float = 0.2) -> Tensor | None:
    """``tau^2 * KL(softmax(t / tau) || softmax(s / tau))`` over the teacher's labels."""
    if not teacher.labels:
        return None
    lookup = {lab: i for i, lab in enumerate(student_labels)}
    cols = [lookup[k] for k in teacher.labels]
    tp = bind(dict(teacher.entries), None)
    t_logits = _classifier_forward(tp, x, leak)[1].values
    target = Tensor(ad.softmax(Tensor(t_logits / temperature)).values)
    s = ad.softmax(ad.scalar_mul(ad.select_columns(student_logits, cols), 1.0 / temperature))
    return ad.scalar_mul(ad.kl_divergence(target, s), temperature ** 2)


def lwf2t_local_step(st: LwF2TClient, batch) -> StepStats:
    x, y = batch
    m = st.model
    tape = Tape()
    p = bind(m.params, tape, CLASSIFIER)
    rows_ = m.label_index(y)
    feats, logits = _classifier_forward(p, x, m.arch.leak)
    probs = ad.softmax(logits)
    ce = ad.cross_entropy(probs, ad.one_hot(rows_, m.num_classes))
    stats = StepStats(st.steps, ce=float(ce.values))
    terms = [ce]
    tau = st.config.kd_temperature
    if st.prev_teacher is not None:
        kd = distillation_term(logits, m.labels, st.prev_teacher, x, tau, m.arch.leak)
        if kd is not None:
            terms.append(kd)
            stats.c1 = float(kd.values)
    if st.global_teacher is not None:
        kd = distillation_term(logits, m.labels, st.global_teacher, x, tau, m.arch.leak)
        if kd is not None:
            terms.append(kd)
            stats.c2 = float(kd.values)
    ad.backward(ad.sum_all(terms))
    st.opt.step(leaf_grads(p))
    stats.grad_norm = ce_head_gradient_norm(probs.values, feats.values, rows_)
    st.steps += 1
    return stats


# ---------------------------------------------------------------- DGR

def init_gan(arch: Arch, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Unconditional generator (noise -> data) and a separate discriminator."""
    h, d, nz = arch.gen_hidden, arch.data_dim, arch.noise_dim
    th, f = arch.trunk_hidden, arch.feature_dim

    def w(o, i, gain=2.0):
        return rng.standard_normal((o, i)) * np.sqrt(gain / i)

    return {
        "dgr_gen.0.W": w(h, nz), "dgr_gen.0.b": np.zeros(h),
        "dgr_gen.1.W": w(h, h), "dgr_gen.1.b": np.zeros(h),
        "dgr_gen.2.W": w(d, h, 1.0), "dgr_gen.2.b": np.zeros(d),
        "dgr_disc.0.W": w(th, d), "dgr_disc.0.b": np.zeros(th),
        "dgr_disc.1.W": w(f, th), "dgr_disc.1.b": np.zeros(f),
        "dgr_disc.2.W": w(1, f, 1.0), "dgr_disc.2.b": np.zeros(1),
    }


def gan_generate(p: Mapping[str, Tensor], z: Tensor, leak: float) -> Tensor:
    h = ad.leaky_relu(ad.linear(z, p["dgr_gen.0.W"], p["dgr_gen.0.b"]), leak)
    h = ad.leaky_relu(ad.linear(h, p["dgr_gen.1.W"], p["dgr_gen.1.b"]), leak)
    return ad.tanh(ad.linear(h, p["dgr_gen.2.W"], p["dgr_gen.2.b"]))


def gan_discriminate(p: Mapping[str, Tensor], x: Tensor, leak: float) -> Tensor:
    h = ad.leaky_relu(ad.linear(x, p["dgr_disc.0.W"], p["dgr_disc.0.b"]), leak)
    h = ad.leaky_relu(ad.linear(h, p["dgr_disc.1.W"], p["dgr_disc.1.b"]), leak)
    return ad.sigmoid(ad.linear(h, p["dgr_disc.2.W"], p["dgr_disc.2.b"]))


def gan_discriminator_loss(p, real_x: np.ndarray, fake_x: np.ndarray, leak: float) -> Tensor:
    d = gan_discriminate(p, Tensor(np.concatenate([real_x, fake_x])), leak)
    nr, nf = len(real_x), len(fake_x)
    return ad.add(ad.binary_cross_entropy(ad.rows(d, 0, nr), Tensor(np.ones((nr, 1)))),
                  ad.binary_cross_entropy(ad.rows(d, nr, nr + nf), Tensor(np.zeros((nf, 1)))))


class DgrClient(_ClientBase):
    """Deep generative replay: private GAN, shared classifier."""

    upload_prefixes = CLASSIFIER

    def __init__(self, data, arch, config, seed=0):
        super().__init__(data, arch, config, seed)
        self.gan = init_gan(arch, np.random.default_rng([seed, 2000 + data.client_id]))
        self.gan_d_opt = ad.Adam({k: v for k, v in self.gan.items() if k.startswith("dgr_disc.")},
                                 config.lr, config.betas)
        self.gan_g_opt = ad.Adam({k: v for k, v in self.gan.items() if k.startswith("dgr_gen.")},
                                 config.lr, config.betas)
        self.prev_gan: dict[str, np.ndarray] | None = None
        self.prev_classifier: ParameterVector | None = None

    def _reset_optimizers(self):
        self.opt = ad.Adam(self.model.group(CLASSIFIER), self.config.lr, self.config.betas)

    def trained_classes(self):
        return self.data.learned_classes

    def on_task_boundary(self):
        self.prev_gan = {k: v.copy() for k, v in self.gan.items() if k.startswith("dgr_gen.")}
        self.prev_classifier = self.model.snapshot(CLASSIFIER)
        super().on_task_boundary()

    def replay_labels(self, xr: np.ndarray) -> np.ndarray:
        """Argmax labels of the frozen previous classifier."""
        tp = bind(dict(self.prev_classifier.entries), None)
        logits = _classifier_forward(tp, xr, self.arch.leak)[1].values
        return np.asarray(self.prev_classifier.labels)[logits.argmax(axis=1)]

    def step(self, x, y):
        return dgr_local_step(self, (x, y))


def dgr_local_step(st: DgrClient, batch) -> StepStats:
    x, y = batch
    m, rng, leak = st.model, st.rng, st.arch.leak
    b = len(x)
    real_x, real_y = x, np.asarray(y)
    if st.prev_gan is not None:
        zr = Tensor(rng.standard_normal((b, st.arch.noise_dim)))
        xr = gan_generate(bind(st.prev_gan, None), zr, leak).values
        real_x = np.concatenate([x, xr])
        real_y = np.concatenate([real_y, st.replay_labels(xr)])
    n = len(real_x)
    z = rng.standard_normal((n, st.arch.noise_dim))
    stats = StepStats(st.steps)

    fake_x = gan_generate(bind(st.gan, None), Tensor(z), leak).values
    tape = Tape()
    p = bind(st.gan, tape, ("dgr_disc.",))
    d_loss = gan_discriminator_loss(p, real_x, fake_x, leak)
    ad.backward(d_loss)
    st.gan_d_opt.step(leaf_grads(p))
    stats.dis = float(d_loss.values)

    tape = Tape()
    p = bind(st.gan, tape, ("dgr_gen.",))
    d_fake = gan_discriminate(p, gan_generate(p, Tensor(z), leak), leak)
    g_loss = ad.binary_cross_entropy(d_fake, Tensor(np.ones((n, 1))))
    ad.backward(g_loss)
    st.gan_g_opt.step(leaf_grads(p))
    stats.gen = float(g_loss.values)

    tape = Tape()
    p = bind(m.params, tape, CLASSIFIER)
    rows_ = m.label_index(real_y)
    feats, logits = _classifier_forward(p, real_x, leak)
    probs = ad.softmax(logits)
    ce_all = ad.cross_entropy(probs, ad.one_hot(rows_, m.num_classes))
    terms = [ce_all]
    prox = _prox(p, st.anchor, st.config.prox_mu)
    if prox is not None:
        terms.append(prox)
        stats.prox = float(prox.values)
    ad.backward(ad.sum_all(terms))
    st.opt.step(leaf_grads(p))
    pv, fv = probs.values[:b], feats.values[:b]
    stats.ce = float(-np.mean(np.log(np.maximum(pv[np.arange(b), rows_[:b]], ad.EPS))))
    stats.grad_norm = ce_head_gradient_norm(pv, fv, rows_[:b])
    st.steps += 1
    return stats


def on_task_boundary(state: _ClientBase) -> _ClientBase:
    state.on_task_boundary()
    return state
