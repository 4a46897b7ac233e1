"""Embedding merge, label propagation, Correct & Smooth, FLAG and Label Usage."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .binio import Reader, Writer
from .errors import ShapeError, ValidationError

EMBEDDING_MAGIC = b"GCNE"
PREDICTION_MAGIC = b"GCNP"
CONTAINER_VERSION = 1


@dataclass(eq=False)
class EmbeddingMatrix:
    values: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError("embedding matrix must be 2-D")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("embedding contains non-finite values")

    @property
    def shape(self):
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return (
            self.provenance == other.provenance
            and self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values)
        )


def _save_matrix(path, magic, values, provenance):
    values = np.asarray(values, dtype=np.float64)
    with open(path, "wb") as fh:
        w = Writer(fh)
        w.magic(magic, CONTAINER_VERSION)
        w.u64(values.shape[0])
        w.u64(values.shape[1])
        w.array(values, "<f8")
        w.string(provenance)


def _load_matrix(path, magic):
    with open(path, "rb") as fh:
        r = Reader(fh)
        r.magic(magic, CONTAINER_VERSION)
        n, d = r.u64(), r.u64()
        values = r.array(n * d, "<f8", (n, d))
        provenance = r.string()
        r.expect_eof()
    return values, provenance


def save_embeddings(emb: EmbeddingMatrix, path):
    _save_matrix(path, EMBEDDING_MAGIC, emb.values, emb.provenance)


def load_embeddings(path) -> EmbeddingMatrix:
    return EmbeddingMatrix(*_load_matrix(path, EMBEDDING_MAGIC))


def save_predictions(probs, path, provenance=""):
    _save_matrix(path, PREDICTION_MAGIC, probs, provenance)


def load_predictions(path):
    """Return ``(probabilities, provenance)`` from a ``GCNP`` file."""
    return _load_matrix(path, PREDICTION_MAGIC)


# ------------------------------------------------------------ embedding usage


def embedding_merge(x, e: Union[EmbeddingMatrix, np.ndarray], mode: str = "concat") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = e.values if isinstance(e, EmbeddingMatrix) else np.asarray(e, dtype=np.float64)
    if x.shape[0] != e.shape[0]:
        raise ShapeError(f"feature rows {x.shape[0]} vs embedding rows {e.shape[0]}")
    if mode == "concat":
        return np.hstack([x, e])
    if mode == "sum":
        if x.shape[1] != e.shape[1]:
            raise ShapeError("sum merge needs equal feature and embedding widths")
        return x + e
    raise ValidationError(f"unknown merge mode {mode!r}")


# --------------------------------------------------------- label propagation


def label_propagate(y, adj, alpha: float, iters: int) -> np.ndarray:
    """Iterate ``y <- (1 - alpha) * y0 + alpha * A_hat @ y`` ``iters`` times."""
    y0 = np.asarray(y, dtype=np.float64)
    if y0.ndim != 2 or y0.shape[0] != adj.num_nodes:
        raise ShapeError(f"label matrix {y0.shape} does not match {adj.num_nodes} nodes")
    if not 0.0 <= alpha < 1.0:
        raise ValidationError("alpha must lie in [0, 1)")
    m = adj.matrix
    out = y0
    for _ in range(iters):
        out = (1.0 - alpha) * y0 + alpha * (m @ out)
    return out.copy() if out is y0 else out


@dataclass
class CorrectSmoothConfig:
    alpha1: float = 0.8
    iters1: int = 50
    scale: Union[str, float] = "autoscale"
    alpha2: float = 0.8
    iters2: int = 50
    label_set: str = "v2"  # v2: train labels, v3: train + valid labels

    def validate(self):
        for name in ("alpha1", "alpha2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValidationError(f"{name} must lie in (0, 1)")
        if self.iters1 < 0 or self.iters2 < 0:
            raise ValidationError("iteration counts must be non-negative")
        if self.label_set not in ("v2", "v3"):
            raise ValidationError("label_set must be 'v2' or 'v3'")


def cs_label_nodes(dataset, label_set: str) -> np.ndarray:
    if label_set == "v2":
        return np.sort(dataset.train)
    if label_set == "v3":
        return np.sort(np.concatenate([dataset.train, dataset.valid]))
    raise ValidationError(f"unknown label set {label_set!r}")


def correct_and_smooth(base_pred, dataset, cfg: CorrectSmoothConfig, adj=None) -> np.ndarray:
    """Correct base predictions with propagated residuals, then smooth them."""
    from .graph import symmetric_normalize

    cfg.validate()
    base = np.asarray(base_pred, dtype=np.float64)
    n, c = base.shape
    if n != dataset.num_nodes:
        raise ShapeError(f"{n} prediction rows for {dataset.num_nodes} nodes")
    if not np.allclose(base.sum(axis=1), 1.0, atol=1e-6):
        raise ValidationError("base predictions must be row-stochastic")
    if adj is None:
        adj = symmetric_normalize(dataset.graph)
    known = cs_label_nodes(dataset, cfg.label_set)
    if known.size == 0:
        raise ValidationError("Correct & Smooth needs a non-empty label set")
    onehot = np.eye(c)[dataset.labels[known]]

    residual = np.zeros_like(base)
    residual[known] = onehot - base[known]
    spread = label_propagate(residual, adj, cfg.alpha1, cfg.iters1)
    if cfg.scale == "autoscale":
        unknown = np.ones(n, dtype=bool)
        unknown[known] = False
        denom = np.abs(spread[unknown]).sum(axis=1).mean() if unknown.any() else 0.0
        numer = np.abs(residual[known]).sum(axis=1).mean()
        s = numer / denom if denom > 0 else 1.0
    else:
        s = float(cfg.scale)
    corrected = base + s * spread

    corrected[known] = onehot
    smoothed = label_propagate(corrected, adj, cfg.alpha2, cfg.iters2)
    smoothed = np.clip(smoothed, 0.0, None)
    totals = smoothed.sum(axis=1, keepdims=True)
    empty = totals[:, 0] <= 0
    smoothed[empty] = 1.0 / c
    totals[empty] = 1.0
    return smoothed / totals


# ---------------------------------------------------------------------- FLAG


@dataclass
class FlagConfig:
    steps: int = 3
    step_size: float = 1e-3
    raw_only: bool = False

    def validate(self):
        if self.steps < 1:
            raise ValidationError("FLAG needs at least one ascent step")
        if self.step_size < 0:
            raise ValidationError("FLAG step size must be non-negative")


def flag_train_step(
    model,
    batch,
    x: np.ndarray,
    labels: np.ndarray,
    cfg: FlagConfig,
    optimizer: "ad.Adam",
    make_rng: Callable[[], np.random.Generator],
    delta_rng: np.random.Generator,
    raw_cols: Optional[int] = None,
    on_delta: Optional[Callable[[np.ndarray], None]] = None,
) -> float:
    """One optimizer update trained on adversarially perturbed inputs.

    The perturbation starts uniform in ``[-step_size, step_size]`` and takes
    ``cfg.steps`` signed-gradient ascent steps.  Parameter gradients from each
    step are averaged (running mean) before a single optimizer update.  Every
    inner forward reuses the dropout stream from ``make_rng`` and only the first
    one updates normalization running statistics.  With ``raw_cols`` set, only
    the leading ``raw_cols`` feature columns are perturbed.
    """
    cfg.validate()
    params = optimizer.params
    delta = delta_rng.uniform(-cfg.step_size, cfg.step_size, size=x.shape)
    col_mask = None
    if raw_cols is not None:
        col_mask = np.zeros((1, x.shape[1]))
        col_mask[0, :raw_cols] = 1.0
        delta = delta * col_mask
    xt = Tensor(x)
    avg = [np.zeros_like(p.data) for p in params]
    mean_loss = 0.0
    norms = getattr(model, "norms", [])
    try:
        for t in range(1, cfg.steps + 1):
            for n in norms:
                n.frozen = t > 1
            ad.zero_grad(params)
            d = Tensor(delta, requires_grad=True)
            with ad.Tape() as tape:
                logp, _ = model.forward(ad.add(xt, d), batch.adj, True, make_rng())
                loss = ad.nll_loss(logp, labels, batch.targets)
            ad.backward(tape, loss)
            for a, p in zip(avg, params):
                a += (p.grad - a) / t
            mean_loss += (loss.item() - mean_loss) / t
            step = cfg.step_size * np.sign(d.grad)
            if col_mask is not None:
                step = step * col_mask
            delta = delta + step
            if on_delta is not None:
                on_delta(delta)
    finally:
        for n in norms:
            n.frozen = False
    for a, p in zip(avg, params):
        p.grad[...] = a
    optimizer.step()
    return mean_loss


# --------------------------------------------------------------- label usage


@dataclass
class LabelUsageRound:
    features: np.ndarray
    exposed: np.ndarray
    targets: np.ndarray


def label_channel(dataset, nodes) -> np.ndarray:
    channel = np.zeros((dataset.num_nodes, dataset.num_classes))
    nodes = np.asarray(nodes, dtype=np.int64)
    channel[nodes, dataset.labels[nodes]] = 1.0
    return channel


def label_usage_prepare(
    dataset, recycle_rounds: int, rng: np.random.Generator, predict=None
) -> LabelUsageRound:
    """Split train 50/50 into label-exposed inputs and loss targets.

    Features become ``[X | label channel]``.  For ``recycle_rounds > 0``,
    ``predict(features) -> probabilities`` fills the channel of every node
    without an exposed label, once per round.
    """
    if dataset.train.size == 0:
        raise ValidationError("label usage needs a non-empty train split")
    perm = rng.permutation(dataset.train)
    half = perm.size // 2
    exposed, targets = np.sort(perm[:half]), np.sort(perm[half:])
    channel = label_channel(dataset, exposed)
    feats = np.hstack([dataset.features, channel])
    if recycle_rounds > 0:
        if predict is None:
            raise ValidationError("label recycling needs a predict function")
        hidden = np.ones(dataset.num_nodes, dtype=bool)
        hidden[exposed] = False
        for _ in range(recycle_rounds):
            probs = predict(feats)
            feats[hidden, dataset.features.shape[1]:] = probs[hidden]
    return LabelUsageRound(feats, exposed, targets)


def label_usage_eval_features(dataset, recycle_rounds: int = 0, predict=None) -> np.ndarray:
    """Inference-time features: every train label exposed, others zero or recycled."""
    feats = np.hstack([dataset.features, label_channel(dataset, dataset.train)])
    if recycle_rounds > 0 and predict is not None:
        hidden = np.ones(dataset.num_nodes, dtype=bool)
        hidden[dataset.train] = False
        for _ in range(recycle_rounds):
            feats[hidden, dataset.features.shape[1]:] = predict(feats)[hidden]
    return feats
