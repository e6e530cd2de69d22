"""Mini-batch SGD with momentum over paired slides."""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .aggregator import AggregatorParams, mask_indices
from .encoding import stack
from .errors import InvalidInputError, NumericalError
from .losses import MODES, LossConfig, PairedBatch, total_loss
from .rng import derive_seed, generator

log = logging.getLogger(__name__)

# stream tags for derive_seed
_INIT, _SHUFFLE, _MASK = 0, 1, 2


@dataclass
class PairedSlide:
    slide_id: str
    patient_id: str
    he: np.ndarray
    ihc: np.ndarray | None = None
    label: int | None = None

    def __post_init__(self):
        self.he = stack(self.he)
        if self.ihc is not None:
            self.ihc = stack(self.ihc)


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "full"
    lr: float = 1e-2
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 8
    tau: float = 0.07
    mask_rate: float = 0.5
    seed: int = 42
    d_h: int = 32
    d_out: int = 64

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidInputError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.lr > 0:
            raise InvalidInputError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 2:
            raise InvalidInputError("batch size must be >= 2")
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")
        if not 0 <= self.mask_rate < 1:
            raise InvalidInputError("mask rate must be in [0, 1)")

    @property
    def loss_config(self):
        return LossConfig(tau=self.tau, mask_rate=self.mask_rate, mode=self.mode)

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass
class TrainState:
    params: AggregatorParams
    velocity: AggregatorParams
    epoch: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def initial(cls, d, config):
        params = AggregatorParams.init(d, config.d_h, config.d_out, seed=derive_seed(config.seed, _INIT))
        return cls(params=params, velocity=AggregatorParams.zeros_like(params))


def make_batches(n_pairs, batch_size, seed):
    """Shuffle ``range(n_pairs)`` and chunk it; a trailing singleton chunk is dropped."""
    if n_pairs < 2:
        raise InvalidInputError("need at least 2 paired slides")
    order = generator(seed).permutation(n_pairs)
    chunks = [order[i : i + batch_size] for i in range(0, n_pairs, batch_size)]
    return [c for c in chunks if len(c) >= 2]


def sgd_momentum(theta, velocity, grad, lr, momentum):
    """One heavy-ball step: v' = momentum * v + g; theta' = theta - lr * v'."""
    v = momentum * velocity + grad
    return theta - lr * v, v


def build_batch(slides, idx, config, epoch, batch_index):
    """Assemble a PairedBatch, touching only the fields the mode needs."""
    cfg = config.loss_config
    chosen = [slides[i] for i in idx]
    he = [s.he for s in chosen]
    ihc = keep = labels = None
    if cfg.uses_ihc:
        ihc = [s.ihc for s in chosen]
        keep = [
            mask_indices(len(s.he), config.mask_rate, derive_seed(config.seed, _MASK, epoch, batch_index, j))
            for j, s in enumerate(chosen)
        ]
    if cfg.uses_labels:
        labels = np.array([s.label for s in chosen])
    return PairedBatch(he=he, ihc=ihc, keep=keep, labels=labels)


def train_step(state, batch, config):
    terms, grads = total_loss(batch, state.params, config.loss_config)
    for name, value in terms.as_dict().items():
        if not np.isfinite(value):
            raise NumericalError(f"non-finite {name} at epoch {state.epoch + 1}")
    params, velocity = {}, {}
    for name, theta in state.params.items():
        params[name], velocity[name] = sgd_momentum(
            theta, getattr(state.velocity, name), getattr(grads, name), config.lr, config.momentum
        )
    new = TrainState(AggregatorParams(**params), AggregatorParams(**velocity), state.epoch, state.history)
    return new, terms


def _validate(slides, config):
    if len(slides) < 2:
        raise InvalidInputError("need at least 2 paired slides")
    cfg = config.loss_config
    for s in slides:
        if cfg.uses_ihc and s.ihc is None:
            raise InvalidInputError(f"slide {s.slide_id!r} has no IHC pair (mode {config.mode!r})")
        if cfg.uses_labels and s.label not in (0, 1):
            raise InvalidInputError(f"slide {s.slide_id!r} has no 0/1 label (mode {config.mode!r})")


def fit(slides, config, on_epoch=None, state=None):
    """Train for ``config.epochs`` epochs.

    ``on_epoch(epoch, state)`` is called after every epoch, e.g. for checkpoint
    selection. History rows hold the epoch mean of each loss term.
    """
    slides = list(slides)
    _validate(slides, config)
    if state is None:
        state = TrainState.initial(slides[0].he.shape[1], config)
    for epoch in range(state.epoch, config.epochs):
        sums = np.zeros(4)
        batches = make_batches(len(slides), config.batch_size, derive_seed(config.seed, _SHUFFLE, epoch))
        for b, idx in enumerate(batches):
            batch = build_batch(slides, idx, config, epoch, b)
            state, terms = train_step(state, batch, config)
            sums += [terms.inter, terms.intra, terms.cls, terms.total]
        mean = [float(v) for v in sums / len(batches)]
        state.epoch = epoch + 1
        state.history = state.history + [
            {"epoch": epoch + 1, "l_inter": mean[0], "l_intra": mean[1], "l_class": mean[2], "l_total": mean[3]}
        ]
        log.debug("epoch %d: %s", epoch + 1, state.history[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, state)
    return state


def history_csv(history):
    lines = ["epoch,l_inter,l_intra,l_class,l_total"]
    for h in history:
        lines.append(f"{h['epoch']},{h['l_inter']!r},{h['l_intra']!r},{h['l_class']!r},{h['l_total']!r}")
    return "\n".join(lines) + "\n"
