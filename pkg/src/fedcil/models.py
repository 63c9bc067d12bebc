"""ACGAN built from small MLPs.

Parameter names and shapes (weights stored ``(out, in)``)::

    gen.0.W  (H, noise_dim + C)   gen.0.b  (H,)      one-hot label columns last
    gen.1.W  (H, H)               gen.1.b  (H,)
    gen.2.W  (data_dim, H)        gen.2.b  (data_dim,)   tanh output
    trunk.0.W (H, data_dim)       trunk.0.b (H,)
    trunk.1.W (F, H)              trunk.1.b (F,)     shared by both heads
    disc.W   (1, F)               disc.b   (1,)      sigmoid
    cls.W    (C, F)               cls.b    (C,)      softmax, one row per label

``C`` is the number of known classes. Rows of the class head (and the one-hot
columns of ``gen.0.W``) follow ``model.labels``, so label ``k`` is not
necessarily row ``k``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ContractError, DimensionError, LabelRangeError
from .params import ParameterVector

GEN = ("gen.",)
DISC_CLS = ("trunk.", "disc.", "cls.")
CLASSIFIER = ("trunk.", "cls.")
HEAD_INIT_STD = 0.01


@dataclass(frozen=True)
class Arch:
    data_dim: int
    noise_dim: int = 8
    gen_hidden: int = 64
    trunk_hidden: int = 64
    feature_dim: int = 32
    leak: float = 0.2


def _he(rng, fan_out, fan_in, gain=2.0):
    return rng.standard_normal((fan_out, fan_in)) * np.sqrt(gain / fan_in)


class AcganModel:
    """Generator, shared trunk, discriminator head and growable class head."""

    def __init__(self, arch: Arch, labels: Sequence[int] = (), seed: int = 0):
        self.arch = arch
        self.labels: list[int] = []
        rng = np.random.default_rng(seed)
        a = arch
        h, f = a.gen_hidden, a.feature_dim
        p: dict[str, np.ndarray] = {}
        p["gen.0.W"] = _he(rng, h, a.noise_dim)
        p["gen.0.b"] = np.zeros(h)
        p["gen.1.W"] = _he(rng, h, h)
        p["gen.1.b"] = np.zeros(h)
        p["gen.2.W"] = _he(rng, a.data_dim, h, gain=1.0)
        p["gen.2.b"] = np.zeros(a.data_dim)
        p["trunk.0.W"] = _he(rng, a.trunk_hidden, a.data_dim)
        p["trunk.0.b"] = np.zeros(a.trunk_hidden)
        p["trunk.1.W"] = _he(rng, f, a.trunk_hidden)
        p["trunk.1.b"] = np.zeros(f)
        p["disc.W"] = _he(rng, 1, f, gain=1.0)
        p["disc.b"] = np.zeros(1)
        p["cls.W"] = np.zeros((0, f))
        p["cls.b"] = np.zeros(0)
        self.params = p
        if labels:
            self.add_labels(labels, rng)

    # ------------------------------------------------------------ labels

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    def label_index(self, labels) -> np.ndarray:
        """Head row of each label; unknown labels raise :class:`LabelRangeError`."""
        lookup = {lab: i for i, lab in enumerate(self.labels)}
        try:
            return np.fromiter((lookup[int(x)] for x in np.ravel(labels)), dtype=np.int64)
        except KeyError as exc:
            raise LabelRangeError(f"label {exc.args[0]} not in model labels {self.labels}") from None

    def add_labels(self, new_labels: Sequence[int], rng: np.random.Generator) -> None:
        """Append head rows / one-hot columns for labels not yet known."""
        fresh = [int(x) for x in new_labels if int(x) not in self.labels]
        if len(set(fresh)) != len(fresh):
            raise ContractError(f"duplicate labels in {list(new_labels)}")
        if not fresh:
            return
        k, f = len(fresh), self.arch.feature_dim
        p = self.params
        p["cls.W"] = np.concatenate([p["cls.W"], rng.standard_normal((k, f)) * HEAD_INIT_STD])
        p["cls.b"] = np.concatenate([p["cls.b"], np.zeros(k)])
        cols = rng.standard_normal((self.arch.gen_hidden, k)) * HEAD_INIT_STD
        p["gen.0.W"] = np.concatenate([p["gen.0.W"], cols], axis=1)
        self.labels.extend(fresh)

    # ------------------------------------------------------------ snapshots

    def copy(self) -> "AcganModel":
        out = AcganModel.__new__(AcganModel)
        out.arch = self.arch
        out.labels = list(self.labels)
        out.params = {k: v.copy() for k, v in self.params.items()}
        return out

    def snapshot(self, prefixes: tuple[str, ...] | None = None) -> ParameterVector:
        names = [n for n in self.params if prefixes is None or n.startswith(prefixes)]
        return ParameterVector.from_arrays(self.params, self.labels, names)

    def load(self, pv: ParameterVector) -> None:
        """Overwrite the entries present in ``pv`` and adopt its label order.

        Entries missing from ``pv`` keep their values but must still fit the
        new label count.
        """
        for name, arr in pv.entries:
            if name not in self.params:
                raise ContractError(f"unknown parameter {name!r}")
            self.params[name] = np.array(arr, dtype=np.float64)
        self.labels = list(pv.labels)
        c = len(self.labels)
        if self.params["cls.W"].shape[0] != c or self.params["cls.b"].shape[0] != c:
            raise ContractError("class head does not match label count after load")
        if self.params["gen.0.W"].shape[1] != self.arch.noise_dim + c:
            raise ContractError("generator input does not match label count after load")

    def group(self, prefixes: tuple[str, ...]) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if k.startswith(prefixes)}


def grow_classes(model: AcganModel, new_total: int, seed: int = 0,
                 labels: Sequence[int] | None = None) -> AcganModel:
    """Grow the class head to ``new_total`` rows in place and return the model.

    New rows get the labels in ``labels`` (default: the next unused integers).
    Existing parameter values are not touched.
    """
    if new_total < model.num_classes:
        raise ContractError(f"cannot shrink from {model.num_classes} to {new_total} classes")
    extra = new_total - model.num_classes
    if extra == 0:
        return model
    if labels is None:
        start = max(model.labels, default=-1) + 1
        labels = list(range(start, start + extra))
    if len(labels) != extra:
        raise ContractError(f"need {extra} new labels, got {len(labels)}")
    model.add_labels(labels, np.random.default_rng(seed))
    if model.num_classes != new_total:
        raise ContractError("new labels overlap existing ones")
    return model


# ---------------------------------------------------------------- forward passes

def bind(params: Mapping[str, np.ndarray], tape: Tape | None,
         trainable: tuple[str, ...] = ()) -> dict[str, Tensor]:
    """Wrap arrays as tensors; names under ``trainable`` become tape leaves."""
    out = {}
    for name, arr in params.items():
        if tape is not None and name.startswith(trainable):
            out[name] = tape.leaf(arr, name=name)
        else:
            out[name] = Tensor(arr)
    return out


def generator_forward(p: Mapping[str, Tensor], z: Tensor, onehot: Tensor,
                      leak: float = 0.2) -> Tensor:
    h = ad.leaky_relu(ad.linear(ad.concat([z, onehot], axis=1), p["gen.0.W"], p["gen.0.b"]), leak)
    h = ad.leaky_relu(ad.linear(h, p["gen.1.W"], p["gen.1.b"]), leak)
    return ad.tanh(ad.linear(h, p["gen.2.W"], p["gen.2.b"]))


def features(p: Mapping[str, Tensor], x: Tensor, leak: float = 0.2) -> Tensor:
    h = ad.leaky_relu(ad.linear(x, p["trunk.0.W"], p["trunk.0.b"]), leak)
    return ad.leaky_relu(ad.linear(h, p["trunk.1.W"], p["trunk.1.b"]), leak)


def disc_prob(p: Mapping[str, Tensor], feats: Tensor) -> Tensor:
    return ad.sigmoid(ad.linear(feats, p["disc.W"], p["disc.b"]))


def class_logits(p: Mapping[str, Tensor], feats: Tensor) -> Tensor:
    return ad.linear(feats, p["cls.W"], p["cls.b"])


def sample_with(params: Mapping[str, np.ndarray], arch: Arch, label_rows: np.ndarray,
                num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Forward-only generation from raw arrays given head-row indices."""
    z = Tensor(rng.standard_normal((len(label_rows), arch.noise_dim)))
    p = bind(params, None)
    return generator_forward(p, z, ad.one_hot(label_rows, num_classes), arch.leak).values


def generate(model: AcganModel, labels: Sequence[int], seed) -> np.ndarray:
    """Samples ``G(z, onehot(c))`` with ``z ~ N(0, I)``; deterministic in ``seed``."""
    rows_ = model.label_index(labels)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return sample_with(model.params, model.arch, rows_, model.num_classes, rng)


def classify(model: AcganModel, x: np.ndarray) -> np.ndarray:
    """Softmax class probabilities, columns in ``model.labels`` order."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.arch.data_dim:
        raise DimensionError(f"expected (n, {model.arch.data_dim}) input, got {x.shape}")
    if model.num_classes == 0:
        raise ContractError("model has no classes")
    p = bind(model.params, None)
    return ad.softmax(class_logits(p, features(p, Tensor(x), model.arch.leak))).values


def predict(model: AcganModel, x: np.ndarray) -> np.ndarray:
    """Predicted labels (not head rows)."""
    return np.asarray(model.labels)[classify(model, x).argmax(axis=1)]


# ---------------------------------------------------------------- ACGAN objectives

@dataclass
class DiscTerms:
    gan: Tensor
    ce_real: Tensor
    ce_fake: Tensor
    extra_probs: list[Tensor]
    real_p: Tensor
    real_probs: np.ndarray
    real_feats: np.ndarray

    @property
    def ce(self) -> Tensor:
        return ad.add(self.ce_real, self.ce_fake)

    @property
    def total(self) -> Tensor:
        return ad.add(self.gan, self.ce)


def discriminator_terms(p: Mapping[str, Tensor], real_x: np.ndarray, real_rows: np.ndarray,
                        fake_x: np.ndarray, fake_rows: np.ndarray,
                        extra: Sequence[np.ndarray] = (), leak: float = 0.2) -> DiscTerms:
    """Discriminator-side ACGAN losses with one trunk pass over all inputs.

    ``extra`` arrays are pushed through the same trunk and class head; their
    softmax outputs are returned for additional loss terms (consistency).
    """
    c = p["cls.W"].shape[0]
    nr, nf = len(real_x), len(fake_x)
    x = np.concatenate([real_x, fake_x, *extra]) if (nf or extra) else real_x
    feats = features(p, Tensor(x), leak)
    d = disc_prob(p, ad.rows(feats, 0, nr + nf))
    probs = ad.softmax(class_logits(p, feats))
    gan = ad.binary_cross_entropy(ad.rows(d, 0, nr), Tensor(np.ones((nr, 1))))
    if nf:
        gan = ad.add(gan, ad.binary_cross_entropy(ad.rows(d, nr, nr + nf),
                                                  Tensor(np.zeros((nf, 1)))))
    real_p = ad.rows(probs, 0, nr)
    ce_real = ad.cross_entropy(real_p, ad.one_hot(real_rows, c))
    if nf:
        ce_fake = ad.cross_entropy(ad.rows(probs, nr, nr + nf), ad.one_hot(fake_rows, c))
    else:
        ce_fake = Tensor(np.zeros(()))
    extra_probs, start = [], nr + nf
    for e in extra:
        extra_probs.append(ad.rows(probs, start, start + len(e)))
        start += len(e)
    return DiscTerms(gan, ce_real, ce_fake, extra_probs, real_p, real_p.values,
                     feats.values[:nr])


def generator_terms(p: Mapping[str, Tensor], z: np.ndarray, fake_rows: np.ndarray,
                    leak: float = 0.2) -> tuple[Tensor, Tensor]:
    """``(L_gan^G, L_ce^G)`` for noise ``z`` conditioned on head rows ``fake_rows``."""
    c = p["cls.W"].shape[0]
    x = generator_forward(p, Tensor(z), ad.one_hot(fake_rows, c), leak)
    feats = features(p, x, leak)
    gan = ad.binary_cross_entropy(disc_prob(p, feats), Tensor(np.ones((len(z), 1))))
    ce = ad.cross_entropy(ad.softmax(class_logits(p, feats)), ad.one_hot(fake_rows, c))
    return gan, ce


def draw_fake_inputs(model: AcganModel, batch_size: int, seed,
                     classes: Sequence[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Head rows (uniform over ``classes``, default all) and noise for one fake batch."""
    if model.num_classes == 0:
        raise ContractError("model has no classes")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pool = (np.arange(model.num_classes) if classes is None
            else model.label_index(classes))
    fake_rows = pool[rng.integers(len(pool), size=batch_size)]
    z = rng.standard_normal((batch_size, model.arch.noise_dim))
    return fake_rows, z


def generator_loss(model: AcganModel, batch_size: int, seed,
                   classes: Sequence[int] | None = None) -> Tensor:
    """``L_gan^G + L_ce^G`` on a fresh tape where only generator entries are leaves."""
    fake_rows, z = draw_fake_inputs(model, batch_size, seed, classes)
    p = bind(model.params, Tape(), GEN)
    gan, ce = generator_terms(p, z, fake_rows, model.arch.leak)
    return ad.add(gan, ce)


def discriminator_loss(model: AcganModel, real_batch: tuple[np.ndarray, Sequence[int]],
                       batch_size: int, seed, classes: Sequence[int] | None = None) -> Tensor:
    """``L_gan^D + L_ce^D``; generator entries are constants."""
    return discriminator_parts(model, real_batch, batch_size, seed, classes).total


def discriminator_parts(model: AcganModel, real_batch, batch_size: int, seed,
                        classes=None) -> DiscTerms:
    real_x, real_labels = real_batch
    real_rows = model.label_index(real_labels)
    fake_rows, z = draw_fake_inputs(model, batch_size, seed, classes)
    fake_x = sample_rows_from_noise(model.params, model.arch, z, fake_rows, model.num_classes)
    p = bind(model.params, Tape(), DISC_CLS)
    return discriminator_terms(p, np.asarray(real_x, dtype=np.float64), real_rows,
                               fake_x, fake_rows, leak=model.arch.leak)


def sample_rows_from_noise(params, arch: Arch, z: np.ndarray, label_rows: np.ndarray,
                           num_classes: int) -> np.ndarray:
    p = bind(params, None)
    return generator_forward(p, Tensor(z), ad.one_hot(label_rows, num_classes), arch.leak).values


def acgan_loss(model: AcganModel, data: tuple[np.ndarray, Sequence[int]], seed,
               classes: Sequence[int] | None = None) -> tuple[Tensor, Tensor]:
    """``(L_gen, L_dis)``: the two alternately optimized halves of the ACGAN loss."""
    n = len(data[0])
    return (generator_loss(model, n, seed, classes),
            discriminator_loss(model, data, n, seed, classes))


# ---------------------------------------------------------------- optimisation

class AcganOptimizer:
    """One Adam per parameter group: discriminator side and generator."""

    def __init__(self, model: AcganModel, lr: float, betas=(0.5, 0.999)):
        self.model = model
        self.d_opt = ad.Adam(model.group(DISC_CLS), lr, betas)
        self.g_opt = ad.Adam(model.group(GEN), lr, betas)


def leaf_grads(p: Mapping[str, Tensor]) -> dict[str, np.ndarray | None]:
    return {k: t.grad for k, t in p.items() if t.tape is not None}


def alternating_step(model: AcganModel, opt: AcganOptimizer, real_x: np.ndarray,
                     real_labels: Sequence[int], rng: np.random.Generator,
                     classes: Sequence[int] | None = None,
                     update_generator: bool = True) -> tuple[float, float]:
    """One discriminator/classifier update followed by one generator update.

    Both halves share the same fake labels and noise. Returns the two loss
    values measured before the respective updates (generator loss is 0.0
    when ``update_generator`` is off).
    """
    fake_rows, z = draw_fake_inputs(model, len(real_x), rng, classes)
    real_rows = model.label_index(real_labels)
    fake_x = sample_rows_from_noise(model.params, model.arch, z, fake_rows, model.num_classes)
    tape = Tape()
    p = bind(model.params, tape, DISC_CLS)
    d_loss = discriminator_terms(p, real_x, real_rows, fake_x, fake_rows,
                                 leak=model.arch.leak).total
    ad.backward(d_loss)
    opt.d_opt.step(leaf_grads(p))
    if not update_generator:
        return 0.0, float(d_loss.values)

    tape = Tape()
    p = bind(model.params, tape, GEN)
    gan, ce = generator_terms(p, z, fake_rows, model.arch.leak)
    g_loss = ad.add(gan, ce)
    ad.backward(g_loss)
    opt.g_opt.step(leaf_grads(p))
    return float(g_loss.values), float(d_loss.values)


def train_offline(model: AcganModel, x: np.ndarray, labels: np.ndarray, steps: int,
                  batch_size: int = 32, lr: float = 2e-3, seed: int = 0) -> AcganModel:
    """Plain (non-federated) ACGAN training on a labelled array."""
    rng = np.random.default_rng(seed)
    opt = AcganOptimizer(model, lr)
    labels = np.asarray(labels)
    for _ in range(steps):
        idx = rng.integers(len(x), size=batch_size)
        alternating_step(model, opt, x[idx], labels[idx], rng)
    return model
