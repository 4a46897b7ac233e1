"""Samplers, the mini-batch training loop, evaluation and the multi-seed protocol."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericalError, ValidationError
from .graph import CsrGraph, Dataset, NormalizedAdjacency, induced_subgraph, symmetric_normalize
from .metrics import score
from .tricks import (
    CorrectSmoothConfig,
    FlagConfig,
    correct_and_smooth,
    embedding_merge,
    flag_train_step,
    label_usage_eval_features,
    label_usage_prepare,
)

log = logging.getLogger(__name__)

SAMPLERS = ("full_batch", "random_subgraph", "neighbor", "saint")

# stream tags for derive_rng
BATCH_STREAM, LOADER_STREAM, INIT_STREAM, LABEL_STREAM, DELTA_STREAM = range(5)


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator keyed by ``(seed, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 0.01
    weight_decay: float = 0.0
    sampler: str = "full_batch"
    batch_nodes: int = 0  # random_subgraph / saint chunk size; 0 means the whole train split
    fanouts: list = field(default_factory=list)
    batch_size: int = 0  # neighbor sampler chunk size; 0 means the whole train split
    saint_walk_length: int = 2
    early_stop_patience: Optional[int] = None
    seed: int = 0
    metric: str = "accuracy"

    def validate(self, depth: Optional[int] = None):
        if self.epochs < 1:
            raise ValidationError("epochs must be at least 1")
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if self.sampler not in SAMPLERS:
            raise ValidationError(f"sampler must be one of {SAMPLERS}")
        if self.sampler == "neighbor":
            if not self.fanouts or min(self.fanouts) < 1:
                raise ValidationError("neighbor sampling needs positive fanouts")
            if depth is not None and len(self.fanouts) != depth:
                raise ValidationError("need one fanout per model layer")


@dataclass
class Batch:
    graph: CsrGraph
    adj: NormalizedAdjacency
    nodes: np.ndarray  # global id of each subgraph node
    targets: np.ndarray  # subgraph positions whose loss counts
    layer_edges: list = field(default_factory=list)

    @property
    def global_targets(self) -> np.ndarray:
        return self.nodes[self.targets]


def _chunks(train: np.ndarray, size: int, rng) -> list:
    if size > train.size:
        raise ValidationError(f"batch size {size} exceeds the {train.size} train nodes")
    size = size or train.size
    perm = rng.permutation(train)
    return [perm[i : i + size] for i in range(0, perm.size, size)]


def _batch_from_nodes(graph, nodes, targets_global) -> Batch:
    nodes = np.unique(nodes)
    sub, old_to_new = induced_subgraph(graph, nodes)
    targets = np.sort(old_to_new[targets_global])
    return Batch(sub, symmetric_normalize(sub), nodes, targets)


def neighbor_sample(graph: CsrGraph, targets, fanouts, rng) -> Batch:
    """Layer-wise uniform neighbour sampling without replacement.

    At layer ``l`` every newly reached node keeps at most ``fanouts[l]`` of its
    neighbours.  The batch graph holds only the sampled edges (symmetrized)
    and is renormalized on its own.
    """
    targets = np.unique(np.asarray(targets, dtype=np.int64))
    if targets.size == 0:
        raise ValidationError("neighbor sampling needs at least one target")
    if not fanouts or min(fanouts) < 1:
        raise ValidationError("fanouts must be positive")
    reached = np.zeros(graph.num_nodes, dtype=bool)
    reached[targets] = True
    frontier = targets
    layer_edges = []
    for fanout in fanouts:
        src, dst, new = [], [], []
        for u in frontier:
            nbrs = graph.neighbors(u)
            if nbrs.size > fanout:
                nbrs = np.sort(rng.choice(nbrs, size=fanout, replace=False))
            src.append(np.full(nbrs.size, u))
            dst.append(nbrs)
            fresh = nbrs[~reached[nbrs]]
            reached[fresh] = True
            new.append(fresh)
        src = np.concatenate(src) if src else np.empty(0, np.int64)
        dst = np.concatenate(dst) if dst else np.empty(0, np.int64)
        layer_edges.append((src, dst))
        frontier = np.concatenate(new) if new else np.empty(0, np.int64)
    nodes = np.flatnonzero(reached)
    old_to_new = np.full(graph.num_nodes, -1, dtype=np.int64)
    old_to_new[nodes] = np.arange(nodes.size)
    all_src = np.concatenate([e[0] for e in layer_edges])
    all_dst = np.concatenate([e[1] for e in layer_edges])
    sub = CsrGraph.from_edges(nodes.size, old_to_new[all_src], old_to_new[all_dst], symmetrize=True)
    return Batch(sub, symmetric_normalize(sub), nodes, np.sort(old_to_new[targets]), layer_edges)


def saint_sample(graph: CsrGraph, roots, walk_length: int, rng) -> Batch:
    """Subgraph induced by short uniform random walks from ``roots``."""
    roots = np.asarray(roots, dtype=np.int64)
    visited = [roots]
    cur = roots
    ro, col = graph.row_offsets, graph.col_indices
    for _ in range(walk_length):
        deg = ro[cur + 1] - ro[cur]
        u = rng.random(cur.size)
        moving = deg > 0
        nxt = cur.copy()
        nxt[moving] = col[ro[cur[moving]] + (u[moving] * deg[moving]).astype(np.int64)]
        visited.append(nxt)
        cur = nxt
    return _batch_from_nodes(graph, np.concatenate(visited), roots)


def build_train_loader(dataset: Dataset, cfg: TrainConfig, seed: int, epoch: int,
                       full_adj: Optional[NormalizedAdjacency] = None, train_nodes=None) -> list:
    """Batches for one epoch; their target sets partition the train nodes."""
    train = dataset.train if train_nodes is None else np.asarray(train_nodes)
    graph = dataset.graph
    if cfg.sampler == "full_batch":
        adj = full_adj if full_adj is not None else symmetric_normalize(graph)
        return [Batch(graph, adj, np.arange(graph.num_nodes), np.sort(train))]
    rng = derive_rng(seed, LOADER_STREAM, epoch)
    if cfg.sampler == "random_subgraph":
        out = []
        for chunk in _chunks(train, cfg.batch_nodes, rng):
            nbrs = [graph.neighbors(v) for v in chunk]
            out.append(_batch_from_nodes(graph, np.concatenate([chunk, *nbrs]), chunk))
        return out
    if cfg.sampler == "neighbor":
        return [neighbor_sample(graph, c, cfg.fanouts, rng) for c in _chunks(train, cfg.batch_size, rng)]
    if cfg.sampler == "saint":
        return [saint_sample(graph, c, cfg.saint_walk_length, rng)
                for c in _chunks(train, cfg.batch_nodes, rng)]
    raise ValidationError(f"unknown sampler {cfg.sampler!r}")


@dataclass
class RunResult:
    metric: str
    train_loss: list = field(default_factory=list)
    valid: list = field(default_factory=list)
    test: list = field(default_factory=list)
    best_epoch: int = 0
    best_state: dict = field(default_factory=dict, repr=False)
    best_log_probs: Optional[np.ndarray] = field(default=None, repr=False)
    wall_time: float = 0.0
    steps: int = 0

    @property
    def best_valid(self) -> float:
        return self.valid[self.best_epoch - 1]

    @property
    def best_test(self) -> float:
        return self.test[self.best_epoch - 1]

    def records(self):
        """``(epoch, split, metric_name, value)`` rows for the metrics CSV."""
        for e, (loss, va, te) in enumerate(zip(self.train_loss, self.valid, self.test), 1):
            yield e, "train", "loss", loss
            yield e, "valid", self.metric, va
            yield e, "test", self.metric, te

    def same_as(self, other: "RunResult") -> bool:
        return (
            self.train_loss == other.train_loss
            and self.valid == other.valid
            and self.test == other.test
            and self.best_epoch == other.best_epoch
            and self.best_state.keys() == other.best_state.keys()
            and all(np.array_equal(v, other.best_state[k]) for k, v in self.best_state.items())
        )


def predict(model, features, adj) -> np.ndarray:
    with ad.no_grad():
        logp, _ = model.forward(Tensor(features), adj, training=False)
    return logp.data


def evaluate(model, dataset: Dataset, split: str, metric: str = "accuracy",
             adj=None, features=None) -> float:
    """Full-graph inference-mode metric on one split."""
    idx = dataset.split(split)
    adj = adj if adj is not None else symmetric_normalize(dataset.graph)
    feats = dataset.features if features is None else features
    return score(predict(model, feats, adj), dataset.labels, idx, metric)


def _plain_step(model, batch, x, labels, targets, optimizer, rng) -> float:
    optimizer.zero_grad()
    with ad.Tape() as tape:
        logp, _ = model.forward(Tensor(x), batch.adj, True, rng)
        loss = ad.nll_loss(logp, labels, targets)
    ad.backward(tape, loss)
    optimizer.step()
    return loss.item()


def train(model, dataset: Dataset, cfg: TrainConfig, flag: Optional[FlagConfig] = None,
          label_usage: Optional[int] = None, flag_raw_cols: Optional[int] = None,
          full_adj=None) -> RunResult:
    """Mini-batch training with per-epoch full-graph evaluation.

    ``label_usage`` is the number of recycling rounds when label usage is on
    (``None`` turns it off).  The reported test metric is the one at the epoch
    with the best validation metric (earliest on ties).
    """
    depth = getattr(model, "layers", None) or model.config.layers
    cfg.validate(depth)
    start = time.perf_counter()
    full_adj = full_adj if full_adj is not None else symmetric_normalize(dataset.graph)
    optimizer = ad.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    result = RunResult(cfg.metric)
    labels = dataset.labels
    best, stale = -np.inf, 0

    def infer(feats):
        return np.exp(predict(model, feats, full_adj))

    def run_epoch(epoch) -> bool:
        nonlocal best, stale
        feats, loss_nodes = dataset.features, dataset.train
        if label_usage is not None:
            lu = label_usage_prepare(dataset, label_usage, derive_rng(cfg.seed, LABEL_STREAM, epoch),
                                     predict=infer)
            feats, loss_nodes = lu.features, lu.targets
        in_loss = np.zeros(dataset.num_nodes, dtype=bool)
        in_loss[loss_nodes] = True
        batches = build_train_loader(dataset, cfg, cfg.seed, epoch, full_adj)
        mean_loss, nb = 0.0, 0
        for b, batch in enumerate(batches):
            targets = batch.targets[in_loss[batch.nodes[batch.targets]]]
            if targets.size == 0:
                continue
            x = feats[batch.nodes]
            local_labels = labels[batch.nodes]
            if flag is not None:
                loss = flag_train_step(
                    model, replace(batch, targets=targets), x, local_labels, flag, optimizer,
                    lambda: derive_rng(cfg.seed, BATCH_STREAM, epoch, b),
                    derive_rng(cfg.seed, DELTA_STREAM, epoch, b), raw_cols=flag_raw_cols,
                )
            else:
                loss = _plain_step(model, batch, x, local_labels, targets, optimizer,
                                   derive_rng(cfg.seed, BATCH_STREAM, epoch, b))
            if not np.isfinite(loss):
                err = NumericalError(f"training loss diverged at epoch {epoch}")
                err.epoch = epoch
                raise err
            nb += 1
            result.steps += 1
            mean_loss += (loss - mean_loss) / nb
        eval_feats = (
            label_usage_eval_features(dataset, label_usage or 0, infer)
            if label_usage is not None
            else dataset.features
        )
        logp = predict(model, eval_feats, full_adj)
        va = score(logp, labels, dataset.valid, cfg.metric)
        te = score(logp, labels, dataset.test, cfg.metric)
        result.train_loss.append(mean_loss)
        result.valid.append(va)
        result.test.append(te)
        if va > best:
            best, stale = va, 0
            result.best_epoch = epoch
            result.best_state = model.state_dict()
            result.best_log_probs = logp
        else:
            stale += 1
            if cfg.early_stop_patience and stale >= cfg.early_stop_patience:
                log.info("early stop at epoch %d", epoch)
                return False
        return True

    for epoch in range(1, cfg.epochs + 1):
        try:
            if not run_epoch(epoch):
                break
        except NumericalError as exc:
            # op-level finite checks do not know the epoch
            if getattr(exc, "epoch", None) is None:
                exc.epoch = epoch
            raise
    result.wall_time = time.perf_counter() - start
    return result


# ------------------------------------------------------------ seed protocol


def mean_std(values) -> tuple:
    """Mean and n-1 standard deviation; a single value has std 0."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValidationError("no values to summarize")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


@dataclass
class SeedRun:
    seed: int
    result: RunResult
    valid: float
    test: float
    probs: np.ndarray = field(repr=False)
    base_probs: np.ndarray = field(repr=False)
    input_dim: int = 0


@dataclass
class SeedSummary:
    model: str
    tricks: str
    runs: list

    @property
    def test_mean_std(self):
        return mean_std([r.test for r in self.runs])

    @property
    def valid_mean_std(self):
        return mean_std([r.valid for r in self.runs])

    def row(self) -> dict:
        tm, ts = self.test_mean_std
        vm, vs = self.valid_mean_std
        return {"model": self.model, "tricks": self.tricks, "test_mean": tm, "test_std": ts,
                "valid_mean": vm, "valid_std": vs}


def prepare_dataset(cfg) -> Dataset:
    """Materialize the dataset section of an experiment config."""
    from .graph import generate_sbm, load_dataset, read_dataset_files

    d = cfg.dataset
    if d.source == "sbm":
        return generate_sbm(d.block_sizes, d.p_in, d.p_out, d.feature_dim, d.feature_signal, d.seed)
    if d.source == "file":
        return load_dataset(cfg.resolve(d.path))
    return read_dataset_files(
        cfg.resolve(d.edge_list), d.num_nodes, cfg.resolve(d.features), cfg.resolve(d.labels),
        cfg.resolve(d.train_split), cfg.resolve(d.valid_split), cfg.resolve(d.test_split),
        num_classes=d.num_classes or None,
    )


def model_config(cfg, num_classes: int):
    from .model import GcnResConfig

    m = cfg.model
    return GcnResConfig(
        layers=m.layers, hidden_dim=m.hidden_dim, num_classes=num_classes, alpha=m.alpha,
        beta=m.beta, dropout=m.dropout, norm=m.norm, pre_activated=m.pre_activated,
        aggregation=m.aggregation, aggregation_weights=m.aggregation_weights,
        learnable_residual=m.learnable_residual,
    )


def train_config(cfg, seed: int) -> TrainConfig:
    t = cfg.training
    return TrainConfig(
        epochs=t.epochs, lr=t.lr, weight_decay=t.weight_decay, sampler=t.sampler,
        batch_nodes=t.batch_nodes, fanouts=list(t.fanouts), batch_size=t.batch_nodes,
        saint_walk_length=t.saint_walk_length, early_stop_patience=t.early_stop_patience or None,
        seed=seed, metric=cfg.dataset.metric,
    )


def cs_config(cfg) -> Optional[CorrectSmoothConfig]:
    k = cfg.tricks
    if k.cs == "none":
        return None
    scale = k.cs_scale if k.cs_scale == "autoscale" else float(k.cs_scale)
    return CorrectSmoothConfig(k.cs_alpha1, k.cs_iters1, scale, k.cs_alpha2, k.cs_iters2, k.cs)


def tricks_label(cfg) -> str:
    k = cfg.tricks
    parts = []
    if k.embedding:
        parts.append("Emb")
    if k.label_usage:
        parts.append("LabelUsage")
    if k.flag:
        parts.append("FLAG")
    if k.cs != "none":
        parts.append(f"C&S_{k.cs}")
    return "+".join(parts) or "-"


def seed_features(cfg, dataset: Dataset, seed: int, embedding=None):
    """Input features for one seed, with embeddings merged when requested."""
    if not cfg.tricks.embedding:
        return dataset.features
    if embedding is None:
        from .embeddings import SkipGramConfig, WalkConfig, pretrain_embeddings
        from .tricks import load_embeddings

        if cfg.tricks.embedding_file:
            embedding = load_embeddings(cfg.resolve(cfg.tricks.embedding_file))
        else:
            e = cfg.embedding
            walk = WalkConfig(e.p, e.q, e.walk_length, e.walks_per_node, seed)
            sg = SkipGramConfig(e.dim, e.window, e.negatives, e.epochs, e.lr)
            embedding = pretrain_embeddings(dataset, walk, sg)
    return embedding_merge(dataset.features, embedding, cfg.tricks.merge)


def run_one(cfg, dataset: Dataset, seed: int, full_adj=None, embedding=None) -> SeedRun:
    from .model import build_model

    full_adj = full_adj if full_adj is not None else symmetric_normalize(dataset.graph)
    feats = seed_features(cfg, dataset, seed, embedding)
    raw_cols = dataset.features.shape[1]
    data = dataset.with_features(feats) if feats is not dataset.features else dataset
    k = cfg.tricks
    in_dim = feats.shape[1] + (dataset.num_classes if k.label_usage else 0)
    model = build_model(cfg.model.type, in_dim, model_config(cfg, dataset.num_classes),
                        derive_rng(seed, INIT_STREAM))
    flag = FlagConfig(k.flag_steps, k.flag_step_size, k.flag_raw_only) if k.flag else None
    result = train(model, data, train_config(cfg, seed), flag=flag,
                   label_usage=k.label_usage_recycle if k.label_usage else None,
                   flag_raw_cols=raw_cols if k.flag_raw_only else None, full_adj=full_adj)
    base = np.exp(result.best_log_probs)
    base /= base.sum(axis=1, keepdims=True)
    probs = base
    cs = cs_config(cfg)
    if cs is not None:
        probs = correct_and_smooth(base, dataset, cs, full_adj)
    lp = np.log(np.clip(probs, 1e-300, None))
    metric = cfg.dataset.metric
    return SeedRun(seed, result, score(lp, dataset.labels, dataset.valid, metric),
                   score(lp, dataset.labels, dataset.test, metric), probs, base, in_dim)


def run_seeds(cfg, seeds=None, dataset: Optional[Dataset] = None, embedding=None) -> SeedSummary:
    """Train one fresh model per seed and summarize best-valid-epoch metrics."""
    seeds = list(cfg.experiment.seeds if seeds is None else seeds)
    dataset = dataset if dataset is not None else prepare_dataset(cfg)
    full_adj = symmetric_normalize(dataset.graph)
    runs = []
    for s in seeds:
        run = run_one(cfg, dataset, s, full_adj, embedding)
        log.info("seed %d: valid %.4f test %.4f (best epoch %d)", s, run.valid, run.test,
                 run.result.best_epoch)
        runs.append(run)
    model = "GCN_res" if cfg.model.type == "gcn_res" else "GCN"
    return SeedSummary(f"{model}({cfg.model.layers})", tricks_label(cfg), runs)
