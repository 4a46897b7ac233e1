"""Structural node embeddings: second-order random walks + skip-gram with negative sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .errors import ValidationError
from .metrics import accuracy
from .tricks import EmbeddingMatrix, save_embeddings


@dataclass
class WalkConfig:
    p: float = 1.0
    q: float = 1.0
    walk_length: int = 40
    walks_per_node: int = 10
    seed: int = 0

    def validate(self):
        if self.p <= 0 or self.q <= 0:
            raise ValidationError("p and q must be positive")
        if self.walk_length < 2:
            raise ValidationError("walk_length must be at least 2")
        if self.walks_per_node < 1:
            raise ValidationError("walks_per_node must be at least 1")


@dataclass
class SkipGramConfig:
    dim: int = 16
    window: int = 5
    negatives: int = 5
    epochs: int = 1
    lr: float = 0.025
    batch_size: int = 1024

    def validate(self):
        if self.dim < 1 or self.window < 1:
            raise ValidationError("dim and window must be at least 1")
        if self.negatives < 0 or self.epochs < 0:
            raise ValidationError("negatives and epochs must be non-negative")


def _walks_from(graph, start, cfg, rng):
    w, length = cfg.walks_per_node, cfg.walk_length
    ro, col = graph.row_offsets, graph.col_indices
    if ro[start + 1] == ro[start]:
        return [np.array([start], dtype=np.int64) for _ in range(w)]
    u = rng.random((w, length - 1))
    walks = np.empty((w, length), dtype=np.int64)
    walks[:, 0] = start
    if cfg.p == 1.0 and cfg.q == 1.0:
        for s in range(1, length):
            cur = walks[:, s - 1]
            deg = ro[cur + 1] - ro[cur]
            walks[:, s] = col[ro[cur] + (u[:, s - 1] * deg).astype(np.int64)]
        return list(walks)
    for i in range(w):
        for s in range(1, length):
            cur = walks[i, s - 1]
            nbrs = col[ro[cur] : ro[cur + 1]]
            if s == 1:
                walks[i, s] = nbrs[int(u[i, 0] * nbrs.size)]
                continue
            prev = walks[i, s - 2]
            prev_nbrs = col[ro[prev] : ro[prev + 1]]
            weight = np.where(
                nbrs == prev,
                1.0 / cfg.p,
                np.where(np.isin(nbrs, prev_nbrs, assume_unique=True), 1.0, 1.0 / cfg.q),
            )
            cdf = np.cumsum(weight)
            k = np.searchsorted(cdf, u[i, s - 1] * cdf[-1], side="right")
            walks[i, s] = nbrs[min(k, nbrs.size - 1)]
    return list(walks)


def random_walks(graph, cfg: WalkConfig) -> list:
    """``walks_per_node`` walks from every node, grouped by start node.

    Each start node draws from its own stream seeded by ``(seed, 0, node)``.
    Transition weights from ``cur`` (having arrived from ``prev``) are 1/p back
    to ``prev``, 1 to common neighbours of ``prev`` and 1/q elsewhere.
    """
    cfg.validate()
    if graph.num_nodes == 0:
        raise ValidationError("cannot walk an empty graph")
    walks = []
    for v in range(graph.num_nodes):
        rng = np.random.default_rng([cfg.seed, 0, v])
        walks.extend(_walks_from(graph, v, cfg, rng))
    return walks


def context_pairs(walks, window: int):
    """All (center, context) pairs within ``window`` positions of each other."""
    centers, contexts = [], []
    for walk in walks:
        walk = np.asarray(walk)
        for off in range(1, window + 1):
            if walk.size <= off:
                break
            centers += [walk[:-off], walk[off:]]
            contexts += [walk[off:], walk[:-off]]
    if not centers:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    return np.concatenate(centers), np.concatenate(contexts)


def unigram_table(walks, num_nodes: int, power: float = 0.75) -> np.ndarray:
    counts = np.bincount(np.concatenate([np.asarray(w) for w in walks]), minlength=num_nodes)
    weights = counts.astype(np.float64) ** power
    return weights / weights.sum()


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _scatter_mean(num_rows, idx, vals):
    """Per-row mean of ``vals`` grouped by ``idx``; rows not in ``idx`` get zero.

    Averaging rather than summing keeps the step of a row that occurs many
    times in one batch the size of a single sequential update.
    """
    counts = np.bincount(idx, minlength=num_rows).astype(np.float64)
    weights = 1.0 / counts[idx]
    m = sp.csr_matrix((weights, (idx, np.arange(idx.size))), shape=(num_rows, idx.size))
    return m @ vals


@dataclass
class SkipGramModel:
    center: np.ndarray
    context: np.ndarray

    def loss(self, centers, contexts, negatives) -> float:
        """Mean negative-sampling loss over given pairs and (pairs x k) negatives."""
        u = self.center[centers]
        pos = np.einsum("ij,ij->i", u, self.context[contexts])
        neg = np.einsum("ij,ikj->ik", u, self.context[negatives])
        ll = np.log(_sigmoid(pos)) + np.log(_sigmoid(-neg)).sum(axis=1)
        return float(-ll.mean())


def fit_skipgram(walks, num_nodes: int, cfg: SkipGramConfig, rng: np.random.Generator,
                 callback=None) -> SkipGramModel:
    """Mini-batch SGD on the skip-gram negative-sampling objective.

    ``callback(epoch, model)`` runs before the first epoch (epoch 0) and after
    every epoch.
    """
    cfg.validate()
    centers, contexts = context_pairs(walks, cfg.window)
    if centers.size == 0:
        raise ValidationError("walks contain no (center, context) pairs")
    noise = unigram_table(walks, num_nodes)
    model = SkipGramModel(
        rng.uniform(-0.5 / cfg.dim, 0.5 / cfg.dim, size=(num_nodes, cfg.dim)),
        np.zeros((num_nodes, cfg.dim)),
    )
    if callback:
        callback(0, model)
    k = cfg.negatives
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(centers.size)
        for start in range(0, order.size, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            c, o = centers[sel], contexts[sel]
            neg = rng.choice(num_nodes, size=(sel.size, k), p=noise)
            u, v_pos, v_neg = model.center[c], model.context[o], model.context[neg]
            g_pos = 1.0 - _sigmoid(np.einsum("ij,ij->i", u, v_pos))
            g_neg = -_sigmoid(np.einsum("ij,ikj->ik", u, v_neg))
            du = g_pos[:, None] * v_pos + np.einsum("ik,ikj->ij", g_neg, v_neg)
            dv_pos = g_pos[:, None] * u
            dv_neg = g_neg[:, :, None] * u[:, None, :]
            model.center += cfg.lr * _scatter_mean(num_nodes, c, du)
            ctx_idx = np.concatenate([o, neg.ravel()])
            ctx_val = np.concatenate([dv_pos, dv_neg.reshape(-1, cfg.dim)])
            model.context += cfg.lr * _scatter_mean(num_nodes, ctx_idx, ctx_val)
        if callback:
            callback(epoch, model)
    return model


def train_skipgram(walks, cfg: SkipGramConfig, rng: np.random.Generator,
                   num_nodes: int | None = None) -> EmbeddingMatrix:
    if num_nodes is None:
        num_nodes = int(max(int(np.max(w)) for w in walks)) + 1
    model = fit_skipgram(walks, num_nodes, cfg, rng)
    return EmbeddingMatrix(model.center, "skipgram")


def provenance(walk: WalkConfig, sg: SkipGramConfig) -> str:
    return (
        f"node2vec p={walk.p!r} q={walk.q!r} walk_length={walk.walk_length} "
        f"walks_per_node={walk.walks_per_node} seed={walk.seed} dim={sg.dim} "
        f"window={sg.window} negatives={sg.negatives} epochs={sg.epochs} lr={sg.lr!r}"
    )


def pretrain_embeddings(dataset, walk: WalkConfig, sg: SkipGramConfig, path=None) -> EmbeddingMatrix:
    """Walk the dataset graph, fit skip-gram, optionally write a ``GCNE`` file."""
    walks = random_walks(dataset.graph, walk)
    rng = np.random.default_rng([walk.seed, 1])
    model = fit_skipgram(walks, dataset.num_nodes, sg, rng)
    emb = EmbeddingMatrix(model.center, provenance(walk, sg))
    if path is not None:
        save_embeddings(emb, path)
    return emb


def probe_accuracy(features, dataset, seed: int = 0, epochs: int = 200, lr: float = 0.05) -> float:
    """Test accuracy of a softmax-regression probe trained on the train split."""
    x = np.asarray(features.values if isinstance(features, EmbeddingMatrix) else features)
    rng = np.random.default_rng([seed, 7])
    limit = np.sqrt(6.0 / (x.shape[1] + dataset.num_classes))
    w = ad.Parameter(rng.uniform(-limit, limit, (x.shape[1], dataset.num_classes)), "probe.weight")
    b = ad.Parameter(np.zeros((1, dataset.num_classes)), "probe.bias")
    opt = ad.Adam([w, b], lr=lr)
    xt = ad.Tensor(x)
    for _ in range(epochs):
        opt.zero_grad()
        with ad.Tape() as tape:
            loss = ad.nll_loss(ad.log_softmax_rows(ad.linear(xt, w, b)), dataset.labels, dataset.train)
        ad.backward(tape, loss)
        opt.step()
    logits = x @ w.data + b.data
    return accuracy(logits[dataset.test], dataset.labels[dataset.test])
