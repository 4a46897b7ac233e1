"""GCN_res: residual GCN blocks with softmax layer aggregation, plus a plain GCN.

Each block maps X^(k-1) to

    X^(k) = Dropout(Relu(Norm(A_hat X^(k-1) W_k))) + alpha * X^(0) + beta * X^(k-1)

and the output head reads ``sum_k softmax(w)_k * X^(k)`` through a linear layer
and a row-wise log-softmax.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import NormParams, Parameter, Tensor
from .errors import ShapeError, ValidationError

NORMS = ("batch", "layer", "none")
AGGREGATIONS = ("softmax_layer", "last_layer")


@dataclass
class GcnResConfig:
    layers: int = 3
    hidden_dim: int = 64
    num_classes: int = 2
    alpha: float = 0.2
    beta: float = 0.7
    dropout: float = 0.5
    norm: str = "batch"
    pre_activated: bool = False
    aggregation: str = "softmax_layer"
    # "scalar": one weight per layer; "vector": one weight per layer and feature
    aggregation_weights: str = "scalar"
    learnable_residual: bool = False

    def validate(self):
        if self.layers < 1:
            raise ValidationError("GCN_res needs at least one layer")
        if self.alpha < 0 or self.beta < 0:
            raise ValidationError("alpha and beta must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")
        if self.norm not in NORMS:
            raise ValidationError(f"norm must be one of {NORMS}")
        if self.aggregation not in AGGREGATIONS:
            raise ValidationError(f"aggregation must be one of {AGGREGATIONS}")
        if self.aggregation_weights not in ("scalar", "vector"):
            raise ValidationError("aggregation_weights must be 'scalar' or 'vector'")


def glorot(rng, fan_in, fan_out) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def gcn_conv(x: Tensor, adj, w: Tensor) -> Tensor:
    """A_hat @ x @ w, without bias."""
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"gcn_conv: input width {x.shape[1]} vs weight {w.shape}")
    return ad.spmm(adj, ad.matmul(x, w))


def layer_aggregate(states, weights: Tensor) -> Tensor:
    """Convex combination of ``states`` with softmax(weights) along the layer axis.

    ``weights`` has one row per state: shape (K, 1) for scalar weights or
    (K, hidden) for per-feature weights.
    """
    if len(states) != weights.shape[0]:
        raise ShapeError(f"{len(states)} states but {weights.shape[0]} aggregation weights")
    if len(states) == 0:
        raise ShapeError("layer_aggregate needs at least one state")
    probs = ad.softmax(weights, axis=0)
    out = None
    for k, xk in enumerate(states):
        term = ad.elementwise_mul(xk, ad.take_row(probs, k))
        out = term if out is None else ad.add(out, term)
    return out


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _GcnBase:
    """Parameter bookkeeping shared by both model families."""

    norm_kind = "none"

    def _init_io(self, in_dim, hidden_dim, num_classes, rng):
        self.in_dim = in_dim
        self.input_w = Parameter(glorot(rng, in_dim, hidden_dim), "input.weight")
        self.input_b = Parameter(np.zeros((1, hidden_dim)), "input.bias")
        self.output_w = Parameter(glorot(rng, hidden_dim, num_classes), "output.weight")
        self.output_b = Parameter(np.zeros((1, num_classes)), "output.bias")

    def _init_blocks(self, layers, hidden_dim, rng):
        self.conv_w = [
            Parameter(glorot(rng, hidden_dim, hidden_dim), f"conv.{k}.weight")
            for k in range(layers)
        ]
        self.norms = (
            [NormParams(hidden_dim, name=f"norm.{k}") for k in range(layers)]
            if self.norm_kind != "none"
            else []
        )

    def named_parameters(self):
        out = [("input.weight", self.input_w), ("input.bias", self.input_b)]
        for k, w in enumerate(self.conv_w):
            out.append((f"conv.{k}.weight", w))
            if self.norms:
                out.append((f"norm.{k}.gamma", self.norms[k].gamma))
                out.append((f"norm.{k}.theta", self.norms[k].theta))
        out.extend(self._extra_parameters())
        out += [("output.weight", self.output_w), ("output.bias", self.output_b)]
        return out

    def _extra_parameters(self):
        return []

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict:
        """Parameters plus normalization running statistics, in a fixed order."""
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for k, n in enumerate(self.norms):
            state[f"norm.{k}.running_mean"] = n.running_mean.copy()
            state[f"norm.{k}.running_var"] = n.running_var.copy()
        return state

    def load_state_dict(self, state: dict):
        params = dict(self.named_parameters())
        expected = set(params) | {
            f"norm.{k}.{s}" for k in range(len(self.norms)) for s in ("running_mean", "running_var")
        }
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise ValidationError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            if state[name].shape != p.data.shape:
                raise ShapeError(f"{name}: shape {state[name].shape} vs {p.data.shape}")
            p.data[...] = state[name]
        for k, n in enumerate(self.norms):
            n.running_mean = np.array(state[f"norm.{k}.running_mean"])
            n.running_var = np.array(state[f"norm.{k}.running_var"])

    def _norm(self, x: Tensor, k: int, training: bool) -> Tensor:
        if self.norm_kind == "batch":
            return ad.batch_norm(x, self.norms[k], training)
        if self.norm_kind == "layer":
            return ad.layer_norm(x, self.norms[k], training)
        return x

    def _check_input(self, x: Tensor, adj):
        if x.shape[0] != adj.num_nodes:
            raise ShapeError(f"{x.shape[0]} feature rows for {adj.num_nodes} nodes")
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"model expects {self.in_dim} input features, got {x.shape[1]}")

    def _head(self, z: Tensor) -> Tensor:
        return ad.log_softmax_rows(ad.linear(z, self.output_w, self.output_b))


class GcnRes(_GcnBase):
    def __init__(self, in_dim: int, config: GcnResConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self.norm_kind = config.norm
        h, k = config.hidden_dim, config.layers
        self._init_io(in_dim, h, config.num_classes, rng)
        self._init_blocks(k, h, rng)
        width = 1 if config.aggregation_weights == "scalar" else h
        self.agg_w = Parameter(np.zeros((k, width)), "aggregate.weight")
        if config.learnable_residual:
            self.alpha = Parameter(np.full((1, 1), config.alpha), "residual.alpha")
            self.beta = Parameter(np.full((1, 1), config.beta), "residual.beta")

    def _extra_parameters(self):
        out = []
        if self.config.aggregation == "softmax_layer":
            out.append(("aggregate.weight", self.agg_w))
        if self.config.learnable_residual:
            out += [("residual.alpha", self.alpha), ("residual.beta", self.beta)]
        return out

    def _residual(self, h: Tensor, x0: Tensor, prev: Tensor) -> Tensor:
        cfg = self.config
        if cfg.learnable_residual:
            h = ad.add(h, ad.elementwise_mul(x0, self.alpha))
            return ad.add(h, ad.elementwise_mul(prev, self.beta))
        if cfg.alpha:
            h = ad.add_scaled(h, x0, cfg.alpha)
        if cfg.beta:
            h = ad.add_scaled(h, prev, cfg.beta)
        return h

    def forward(self, x, adj, training: bool = False, rng: Optional[np.random.Generator] = None):
        """Return ``(log_probs, states)`` with ``states = [X^(0), ..., X^(K)]``."""
        x = _wrap(x)
        self._check_input(x, adj)
        cfg = self.config
        x0 = ad.linear(x, self.input_w, self.input_b)
        states = [x0]
        for k in range(cfg.layers):
            prev = states[-1]
            if cfg.pre_activated:
                h = self._norm(prev, k, training)
                h = ad.relu(h)
                h = ad.dropout(h, cfg.dropout, training, rng)
                h = gcn_conv(h, adj, self.conv_w[k])
            else:
                h = gcn_conv(prev, adj, self.conv_w[k])
                h = self._norm(h, k, training)
                h = ad.relu(h)
                h = ad.dropout(h, cfg.dropout, training, rng)
            states.append(self._residual(h, x0, prev))
        if cfg.aggregation == "softmax_layer":
            z = layer_aggregate(states[1:], self.agg_w)
        else:
            z = states[-1]
        return self._head(z), states

    __call__ = forward

    def aggregation_probs(self) -> np.ndarray:
        w = self.agg_w.data
        e = np.exp(w - w.max(axis=0, keepdims=True))
        return e / e.sum(axis=0, keepdims=True)


class PlainGcn(_GcnBase):
    """Stacked GCN layers (conv, optional norm, relu, dropout) with no residuals."""

    def __init__(self, in_dim, layers, hidden_dim, num_classes, rng, dropout=0.5, norm="none"):
        if layers < 1:
            raise ValidationError("plain GCN needs at least one layer")
        if norm not in NORMS:
            raise ValidationError(f"norm must be one of {NORMS}")
        self.layers = layers
        self.dropout = dropout
        self.norm_kind = norm
        self._init_io(in_dim, hidden_dim, num_classes, rng)
        self._init_blocks(layers, hidden_dim, rng)

    def forward(self, x, adj, training: bool = False, rng=None):
        x = _wrap(x)
        self._check_input(x, adj)
        h = ad.linear(x, self.input_w, self.input_b)
        states = [h]
        for k in range(self.layers):
            h = gcn_conv(h, adj, self.conv_w[k])
            h = self._norm(h, k, training)
            h = ad.relu(h)
            h = ad.dropout(h, self.dropout, training, rng)
            states.append(h)
        return self._head(h), states

    __call__ = forward


def forward(model: GcnRes, x, adj, training=False, rng=None):
    return model.forward(x, adj, training, rng)


def forward_pre_activated(model: GcnRes, x, adj, training=False, rng=None):
    """Run ``model`` with the Norm/Relu/Dropout block placed before the convolution."""
    saved = model.config.pre_activated
    model.config.pre_activated = True
    try:
        return model.forward(x, adj, training, rng)
    finally:
        model.config.pre_activated = saved


def forward_plain_gcn(model: PlainGcn, x, adj, training=False, rng=None):
    return model.forward(x, adj, training, rng)[0]


def build_model(kind: str, in_dim: int, config: GcnResConfig, rng):
    if kind == "gcn_res":
        return GcnRes(in_dim, config, rng)
    if kind in ("gcn", "plain_gcn"):
        # the baseline block is conv -> relu -> dropout; norm belongs to GCN_res
        return PlainGcn(
            in_dim, config.layers, config.hidden_dim, config.num_classes, rng,
            dropout=config.dropout,
        )
    raise ValidationError(f"unknown model kind {kind!r}")


def representation_variance(x) -> float:
    """Spread of node representations: per-column variance across rows, averaged."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return float(data.var(axis=0).mean())


def identity_probe(adj, x, depth: int, residual: bool, alpha=0.2, beta=0.7):
    """Representation variance at every depth 0..``depth`` with identity weights.

    Uses no normalization, no dropout and identity input/conv weights so that
    only propagation and the residual terms shape the representations.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[1]
    rng = np.random.default_rng(0)
    if residual:
        cfg = GcnResConfig(layers=depth, hidden_dim=d, num_classes=2, alpha=alpha, beta=beta,
                           dropout=0.0, norm="none", aggregation="last_layer")
        model = GcnRes(d, cfg, rng)
    else:
        model = PlainGcn(d, depth, d, 2, rng, dropout=0.0, norm="none")
    model.input_w.data[...] = np.eye(d)
    for w in model.conv_w:
        w.data[...] = np.eye(d)
    _, states = model.forward(x, adj, training=False)
    return np.array([representation_variance(s) for s in states])
