"""Relation-graph predictor: per-query refinement of query + support
embeddings with learned adjacency and query-level adapter hooks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Mapping, Optional, Sequence

import numpy as np

from . import adapter as adp
from .autodiff import Tensor, as_tensor, ops
from .config import Modulation, ModelConfig
from .encoder import MissingAdapterError, _scale_bias_to_one
from .layers import GENERATOR_GAIN, MLP, ModelParams, plain_mlp, residual_mlp


@dataclass(frozen=True)
class RelationWeights:
    cfg: ModelConfig

    @property
    def adjacency_mlp(self) -> MLP:
        c = self.cfg
        return plain_mlp("rel.adj", [c.d_rel, c.adj_hidden[0], c.adj_hidden[1], 1], ["leaky_relu", "leaky_relu", None])

    @property
    def node_mlp(self) -> MLP:
        c = self.cfg
        return plain_mlp("rel.node", [c.d_rel, c.node_hidden, c.d_rel], ["leaky_relu", "leaky_relu"])

    def init(self, params: ModelParams, rng: np.random.Generator) -> None:
        self.adjacency_mlp.init(params, rng)
        self.node_mlp.init(params, rng)


@dataclass(frozen=True)
class QueryHypernet:
    proto: MLP
    gen: MLP

    @classmethod
    def build(cls, cfg: ModelConfig) -> "QueryHypernet":
        p, d = cfg.proto_rel, cfg.d_rel
        proto = residual_mlp("rel.proto", [d + 2] + [p] * cfg.hyper_layers, dropout=cfg.hyper_dropout)
        gen = residual_mlp("rel.hyper", [2 * p + d] * cfg.hyper_layers + [2 * d + 1], dropout=cfg.hyper_dropout, final_gain=GENERATOR_GAIN)
        return cls(proto, gen)

    def init(self, params: ModelParams, rng: np.random.Generator) -> None:
        self.proto.init(params, rng)
        self.gen.init(params, rng)
        _scale_bias_to_one(params, self.gen)


def relation_adjacency(
    params: Mapping[str, Tensor], weights: RelationWeights, h: Tensor, squash: str = "sigmoid", feature: str = "absdiff"
) -> Tensor:
    """Learned adjacency over the rows of ``h`` (``(n, d)`` or ``(B, n, d)``).

    Off-diagonal entries are ``squash(MLP(|h_i - h_j|))``; the diagonal is 1.
    """
    h = as_tensor(h)
    n = h.shape[-2]
    lead = h.shape[:-2]
    hi = h.reshape(lead + (n, 1, h.shape[-1]))
    hj = h.reshape(lead + (1, n, h.shape[-1]))
    diff = ops.abs(ops.sub(hi, hj))
    if feature == "exp_absdiff":
        diff = ops.exp(diff)
    score = weights.adjacency_mlp(params, diff).reshape(lead + (n, n))
    if squash == "sigmoid":
        score = ops.sigmoid(score)
    eye = np.eye(n)
    return ops.add(ops.mul(score, 1.0 - eye), eye)


def refine(params: Mapping[str, Tensor], weights: RelationWeights, h: Tensor, a: Tensor) -> Tensor:
    """``MLP(sum_j a_ij h_j)`` for every row, added to ``h`` when the config
    asks for a residual path, then layer-normalised if enabled."""
    if weights.cfg.adjacency_norm == "row":
        a = ops.div(a, ops.sum(a, axis=-1, keepdims=True))
    out = weights.node_mlp(params, ops.matmul(a, h))
    if weights.cfg.relation_residual:
        out = ops.add(h, out)
    return ops.layer_norm(out) if weights.cfg.layer_norm else out


@dataclass
class RefinedSet:
    """Refined relation sets for a batch of queries: row 0 is the query."""

    layers: List[Tensor]
    final: Tensor
    adapter: adp.AdapterParams = field(default_factory=adp.AdapterParams)
    selected_depths: Optional[np.ndarray] = None

    @property
    def query(self) -> Tensor:
        return self.final[:, 0, :]

    @property
    def support(self) -> Tensor:
        return self.final[:, 1:, :]


def build_relation_sets(query_r: Tensor, support_r: Tensor) -> Tensor:
    """``(Q, N + 1, d)``: each query followed by the full support set."""
    q, n, d = query_r.shape[0], support_r.shape[0], support_r.shape[1]
    sup = ops.broadcast_to(support_r.reshape(1, n, d), (q, n, d))
    return ops.concat([query_r.reshape(q, 1, d), sup], axis=1)


def predict_refine(
    params: Mapping[str, Tensor],
    weights: RelationWeights,
    query_r: Tensor,
    support_r: Tensor,
    support_labels: Sequence[int],
    *,
    modulation: Modulation,
    hypernet: Optional[QueryHypernet] = None,
    mode: str = "train",
    rng: Optional[np.random.Generator] = None,
) -> RefinedSet:
    """Refine each query's relation set over ``L_rel`` layers.

    Queries never see each other: the batch axis holds independent sets.
    """
    cfg = weights.cfg
    if mode not in ("train", "test"):
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    need_hyper = modulation.active and not modulation.identity
    if need_hyper and hypernet is None:
        raise MissingAdapterError("predictor modulation requested without a query hypernetwork")
    h = build_relation_sets(as_tensor(query_r), as_tensor(support_r))
    n_q = h.shape[0]
    layers = [h]
    rec = adp.AdapterParams()
    ones = np.ones(len(support_labels))
    for l in range(1, cfg.L_rel + 1):
        if modulation.active:
            if modulation.identity:
                scale, shift = adp.identity_film(cfg.d_rel, n_q)
                logit = as_tensor(np.zeros((n_q, 1)))
            else:
                protos = adp.compute_prototypes(
                    h[:, 1:, :], ones, support_labels, lambda x: hypernet.proto(params, x, rng), cfg.proto_order, l
                )
                scale, shift, logit = adp.query_adapter(params, hypernet.gen, protos, h[:, 0, :], cfg.d_rel, rng)
            rec.scales.append(scale)
            rec.shifts.append(shift)
            rec.logits.append(logit)
            if modulation.node:
                h = adp.film_modulate(h, scale.reshape(n_q, 1, cfg.d_rel), shift.reshape(n_q, 1, cfg.d_rel), cfg.film_residual_scale)
        a = relation_adjacency(params, weights, h, cfg.adjacency_squash, cfg.adjacency_input)
        h = refine(params, weights, h, a)
        layers.append(h)

    selected = None
    if modulation.depth:
        rec.weights = adp.depth_weights(rec.logits)
        if mode == "train":
            final = adp.mix_depths(layers[1:], rec.weights)
        else:
            logits = rec.logit_array()
            selected = np.array([adp.select_depth(row) for row in logits])
            final = select_per_query(layers, selected)
    else:
        final = layers[-1]
    return RefinedSet(layers, final, rec, selected)


def select_per_query(layers: Sequence[Tensor], selected: np.ndarray) -> Tensor:
    """Row block ``q`` of ``layers[selected[q]]`` for every query ``q``."""
    q = len(selected)
    stacked = ops.concat([t.reshape((1,) + t.shape) for t in layers], axis=0)
    return stacked[(np.asarray(selected), np.arange(q))]
