"""Training objectives and their gradients.

Each loss returns its value together with the gradient(s) with respect to its
inputs; ``total_loss`` chains those through the aggregator to produce a full
parameter gradient.
"""

from dataclasses import dataclass, field

import numpy as np

from .aggregator import (
    AggregatorParams,
    aggregate_forward,
    aggregate_gradients,
    normalize_backward,
)
from .encoding import stack
from .errors import InvalidInputError

MODES = ("full", "ssl", "finetune")


def _logsumexp(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))).squeeze(axis)


def _softmax(x, axis):
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def inter_modality_loss(Q, K, tau=0.07):
    """Symmetric InfoNCE between paired rows of ``Q`` and ``K``.

    Row ``i`` of ``Q @ K.T / tau`` is classified against target ``i`` and so is
    column ``i``; the loss averages the 2N cross-entropies.

    Returns ``(loss, dQ, dK)``.
    """
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if Q.ndim != 2 or Q.shape != K.shape:
        raise InvalidInputError(f"Q and K must share a 2-D shape, got {Q.shape} and {K.shape}")
    n = Q.shape[0]
    if n == 0:
        raise InvalidInputError("empty batch")
    if not tau > 0:
        raise InvalidInputError(f"temperature must be positive, got {tau}")
    logits = Q @ K.T / tau
    diag = np.diag(logits)
    rows = _logsumexp(logits, axis=1) - diag
    cols = _logsumexp(logits, axis=0) - diag
    loss = (rows.sum() + cols.sum()) / (2 * n)

    eye = np.eye(n)
    d_logits = (_softmax(logits, 1) - eye + _softmax(logits, 0) - eye) / (2 * n)
    dQ = d_logits @ K / tau
    dK = d_logits.T @ Q / tau
    return float(loss), dQ, dK


def intra_modality_loss(Z, Z_m):
    """Mean squared error over all entries; returns ``(loss, dZ, dZ_m)``."""
    Z = np.asarray(Z, dtype=np.float64)
    Z_m = np.asarray(Z_m, dtype=np.float64)
    if Z.shape != Z_m.shape:
        raise InvalidInputError(f"shape mismatch {Z.shape} vs {Z_m.shape}")
    diff = Z - Z_m
    loss = float(np.mean(diff**2))
    dZ = 2.0 * diff / diff.size
    return loss, dZ, -dZ


def class_loss(logits, labels):
    """Mean softmax cross-entropy; returns ``(loss, d_logits)``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[1] != 2 or labels.shape != (logits.shape[0],):
        raise InvalidInputError("expected N x 2 logits and N labels")
    if not np.all((labels == 0) | (labels == 1)):
        raise InvalidInputError(f"labels must be 0 or 1, got {np.unique(labels)}")
    labels = labels.astype(np.intp)
    n = logits.shape[0]
    lse = _logsumexp(logits, axis=1)
    loss = float(np.mean(lse - logits[np.arange(n), labels]))
    d_logits = _softmax(logits, 1)
    d_logits[np.arange(n), labels] -= 1.0
    return loss, d_logits / n


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    mask_rate: float = 0.5
    mode: str = "full"

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidInputError(f"temperature must be positive, got {self.tau}")
        if self.mode not in MODES:
            raise InvalidInputError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def uses_ihc(self):
        return self.mode in ("full", "ssl")

    @property
    def uses_labels(self):
        return self.mode in ("full", "finetune")


@dataclass
class PairedBatch:
    """Raw inputs for one optimization step.

    ``he``/``ihc`` hold one (n_tiles, d) matrix per slide; ``keep`` holds the
    indices of H&E tiles surviving the random mask, one array per slide.
    """

    he: list
    ihc: list | None = None
    keep: list | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.he = [stack(t) for t in self.he]
        if self.ihc is not None:
            self.ihc = [stack(t) for t in self.ihc]
            if len(self.ihc) != len(self.he):
                raise InvalidInputError("H&E and IHC slide counts differ")
        if self.keep is not None and len(self.keep) != len(self.he):
            raise InvalidInputError("one mask per H&E slide required")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != (len(self.he),):
                raise InvalidInputError("one label per slide required")
        if not self.he:
            raise InvalidInputError("empty batch")

    def __len__(self):
        return len(self.he)


@dataclass
class LossTerms:
    inter: float = 0.0
    intra: float = 0.0
    cls: float = 0.0
    total: float = field(init=False)

    def __post_init__(self):
        self.total = self.inter + self.intra + self.cls

    def as_dict(self):
        return {"l_inter": self.inter, "l_intra": self.intra, "l_class": self.cls, "l_total": self.total}


def combine(inter, intra, cls, mode):
    """Unweighted sum of the terms active in ``mode``; inactive terms read as 0."""
    if mode == "full":
        return LossTerms(inter, intra, cls)
    if mode == "ssl":
        return LossTerms(inter, intra, 0.0)
    if mode == "finetune":
        return LossTerms(0.0, 0.0, cls)
    raise InvalidInputError(f"unknown mode {mode!r}")


def total_loss(batch, params, config):
    """Loss terms and the gradient of their sum w.r.t. every parameter."""
    n = len(batch)
    grads = AggregatorParams.zeros_like(params)
    he = [aggregate_forward(h, params) for h in batch.he]
    d_he = [np.zeros_like(e.z) for e in he]
    inter = intra = cls = 0.0

    if config.uses_ihc:
        if batch.ihc is None:
            raise InvalidInputError(f"mode {config.mode!r} needs paired IHC tiles")
        ihc = [aggregate_forward(k, params) for k in batch.ihc]
        Q = np.stack([e.z_hat for e in he])
        K = np.stack([e.z_hat for e in ihc])
        inter, dQ, dK = inter_modality_loss(Q, K, config.tau)
        for i in range(n):
            d_he[i] += normalize_backward(he[i], dQ[i])
            grads.add_(aggregate_gradients(ihc[i], params, normalize_backward(ihc[i], dK[i])))

        keep = batch.keep if batch.keep is not None else [np.arange(len(h)) for h in batch.he]
        masked = [aggregate_forward(h[k], params) for h, k in zip(batch.he, keep)]
        Z = np.stack([e.z for e in he])
        Z_m = np.stack([e.z for e in masked])
        intra, dZ, dZ_m = intra_modality_loss(Z, Z_m)
        for i in range(n):
            d_he[i] += dZ[i]
            grads.add_(aggregate_gradients(masked[i], params, dZ_m[i]))

    if config.uses_labels:
        if batch.labels is None:
            raise InvalidInputError(f"mode {config.mode!r} needs labels")
        Z = np.stack([e.z for e in he])
        logits = Z @ params.C.T + params.b
        cls, d_logits = class_loss(logits, batch.labels)
        grads.C += d_logits.T @ Z
        grads.b += d_logits.sum(axis=0)
        dZ = d_logits @ params.C
        for i in range(n):
            d_he[i] += dZ[i]

    for e, d in zip(he, d_he):
        grads.add_(aggregate_gradients(e, params, d))
    return combine(inter, intra, cls, config.mode), grads


def loss_value(batch, params, config):
    return total_loss(batch, params, config)[0].total


def grad_check(batch, params, config, step=1e-4):
    """Max relative error between analytic and central-difference gradients.

    The denominator per entry is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    _, grads = total_loss(batch, params, config)
    analytic = grads.flat()
    theta = params.flat().astype(np.float64)
    numeric = np.empty_like(theta)
    for j in range(theta.size):
        orig = theta[j]
        theta[j] = orig + step
        up = loss_value(batch, params.with_flat(theta), config)
        theta[j] = orig - step
        down = loss_value(batch, params.with_flat(theta), config)
        theta[j] = orig
        numeric[j] = (up - down) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
