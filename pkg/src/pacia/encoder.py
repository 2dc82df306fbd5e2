"""GIN molecular encoder with per-layer FiLM hooks and depth mixing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Mapping, Optional, Sequence

import numpy as np

from . import adapter as adp
from .autodiff import ShapeError, Tensor, as_tensor, ops
from .config import Modulation, ModelConfig
from .graphdata import MolecularGraph
from .layers import GENERATOR_GAIN, MLP, ModelParams, init_linear, linear, plain_mlp, residual_mlp


class MissingAdapterError(ValueError):
    """Modulation was requested but no hypernetwork was supplied."""


@dataclass(frozen=True)
class GraphBatch:
    """Disjoint union of graphs: stacked node features, block-diagonal adjacency."""

    features: np.ndarray
    adjacency: np.ndarray
    membership: np.ndarray  # (G, total nodes) 0/1
    n_atoms: np.ndarray

    @classmethod
    def from_graphs(cls, graphs: Sequence[MolecularGraph]) -> "GraphBatch":
        if not graphs:
            raise ValueError("empty graph batch")
        sizes = np.array([g.node_count for g in graphs])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        total = int(offsets[-1])
        adj = np.zeros((total, total))
        member = np.zeros((len(graphs), total))
        for i, g in enumerate(graphs):
            o = offsets[i]
            adj[o : o + g.node_count, o : o + g.node_count] = g.adjacency()
            member[i, o : o + g.node_count] = 1.0
        feats = np.concatenate([g.node_features for g in graphs], axis=0)
        return cls(feats, adj, member, sizes.astype(np.float64))

    def subset_membership(self, idx: Sequence[int]) -> np.ndarray:
        return self.membership[np.asarray(idx, dtype=np.int64)]


@dataclass(frozen=True)
class EncoderWeights:
    """Layout of the encoder's entries in :class:`ModelParams`."""

    cfg: ModelConfig

    @property
    def gin(self) -> List[MLP]:
        c = self.cfg
        return [plain_mlp(f"enc.gin{l}", [c.d_enc, c.gin_hidden, c.d_enc], ["relu", None]) for l in range(1, c.L_enc + 1)]

    @property
    def readout_mlp(self) -> MLP:
        c = self.cfg
        return plain_mlp("enc.readout", [c.d_enc, c.readout_hidden, c.d_rel], ["leaky_relu", None])

    def init(self, params: ModelParams, rng: np.random.Generator) -> None:
        c = self.cfg
        init_linear(params, rng, "enc.input", c.d_in, c.d_enc)
        for l, mlp in enumerate(self.gin, start=1):
            params.add(f"enc.gin{l}.eps", np.zeros(1))
            mlp.init(params, rng)
        self.readout_mlp.init(params, rng)


@dataclass(frozen=True)
class TaskHypernet:
    """Prototype MLP + generator MLP for task-level (encoder) adaptation."""

    proto: MLP
    gen: MLP

    @classmethod
    def build(cls, cfg: ModelConfig) -> "TaskHypernet":
        p, d = cfg.proto_enc, cfg.d_enc
        proto = residual_mlp("enc.proto", [d + 2] + [p] * cfg.hyper_layers, dropout=cfg.hyper_dropout)
        gen = residual_mlp("enc.hyper", [2 * p] * cfg.hyper_layers + [2 * d + 1], dropout=cfg.hyper_dropout, final_gain=GENERATOR_GAIN)
        return cls(proto, gen)

    def init(self, params: ModelParams, rng: np.random.Generator) -> None:
        self.proto.init(params, rng)
        self.gen.init(params, rng)
        _scale_bias_to_one(params, self.gen)


def _scale_bias_to_one(params: ModelParams, gen: MLP) -> None:
    # FiLM starts near identity: scale entries of the output bias are 1
    d = (gen.out_dim - 1) // 2
    b = params[f"{gen.name}.{len(gen.dims) - 2}.b"].data
    b[:d] = 1.0


@dataclass
class EncodedMolecule:
    """Encoder output for a batch; per-layer lists include the input layer h^0."""

    layers: List[Tensor]
    atom_sums: List[Tensor]
    r: Tensor
    adapter: adp.AdapterParams = field(default_factory=adp.AdapterParams)
    selected_depth: Optional[int] = None
    mixed: Optional[Tensor] = None


def input_projection(params: Mapping[str, Tensor], x) -> Tensor:
    return linear(params, "enc.input", as_tensor(x))


def gin_update(params: Mapping[str, Tensor], weights: EncoderWeights, adjacency: np.ndarray, h_prev: Tensor, layer: int) -> Tensor:
    """``MLP_G((1 + eps) h_v + sum of neighbour embeddings)`` for every atom,
    followed by layer normalisation when the config enables it."""
    if h_prev.shape[-1] != weights.cfg.d_enc:
        raise ShapeError(f"GIN layer {layer}: embedding width {h_prev.shape[-1]} != {weights.cfg.d_enc}")
    eps = params[f"enc.gin{layer}.eps"]
    z = ops.add(ops.mul(h_prev, ops.add(eps, 1.0)), ops.matmul(as_tensor(adjacency), h_prev))
    out = weights.gin[layer - 1](params, z)
    return ops.layer_norm(out) if weights.cfg.layer_norm else out


def readout(params: Mapping[str, Tensor], weights: EncoderWeights, h: Tensor, membership: np.ndarray, n_atoms: np.ndarray) -> Tensor:
    """``MLP_R(mean of atom embeddings)`` per graph."""
    n_atoms = np.asarray(n_atoms, dtype=np.float64)
    if np.any(n_atoms < 1):
        raise ValueError("readout of an empty graph")
    mean = ops.matmul(as_tensor(membership / n_atoms[:, None]), h)
    return weights.readout_mlp(params, mean)


def encode(
    params: Mapping[str, Tensor],
    weights: EncoderWeights,
    batch: GraphBatch,
    *,
    modulation: Modulation,
    hypernet: Optional[TaskHypernet] = None,
    support_idx: Sequence[int] = (),
    support_labels: Sequence[int] = (),
    mode: str = "train",
    rng: Optional[np.random.Generator] = None,
) -> EncodedMolecule:
    """Encode every graph of ``batch`` under one task-level adaptation.

    Prototypes for layer ``l`` come from the support graphs' atom sums at the
    layer input. FiLM precedes each GIN update; dropout (``rng`` given) sits
    after it. Depth is mixed softly in ``train`` mode and selected in ``test``.
    """
    cfg = weights.cfg
    if mode not in ("train", "test"):
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    need_hyper = modulation.active and not modulation.identity
    if need_hyper and hypernet is None:
        raise MissingAdapterError("encoder modulation requested without a task hypernetwork")
    support_member = batch.subset_membership(support_idx) if need_hyper else None
    support_atoms = batch.n_atoms[np.asarray(support_idx, dtype=np.int64)] if need_hyper else None

    h = input_projection(params, batch.features)
    layers, sums = [h], []
    rec = adp.AdapterParams()
    for l in range(1, cfg.L_enc + 1):
        if modulation.active:
            if modulation.identity:
                scale, shift = adp.identity_film(cfg.d_enc)
                logit = as_tensor(np.zeros(1))
            else:
                s = ops.matmul(as_tensor(support_member), h)
                sums.append(s)
                protos = adp.compute_prototypes(
                    s, support_atoms, support_labels, lambda x: hypernet.proto(params, x, rng), cfg.proto_order, l
                )
                scale, shift, logit = adp.task_adapter(params, hypernet.gen, protos, cfg.d_enc, rng)
            rec.scales.append(scale)
            rec.shifts.append(shift)
            rec.logits.append(logit)
            if modulation.node:
                h = adp.film_modulate(h, scale, shift, cfg.film_residual_scale)
        h = gin_update(params, weights, batch.adjacency, h, l)
        if rng is not None and cfg.enc_dropout > 0:
            h = ops.dropout(h, cfg.enc_dropout, rng)
        layers.append(h)

    selected = None
    if modulation.depth:
        rec.weights = adp.depth_weights(rec.logits)
        if mode == "train":
            final = adp.mix_depths(layers[1:], rec.weights)
        else:
            selected = adp.select_depth(rec.logit_array())
            final = layers[selected]
    else:
        final = layers[-1]
    r = readout(params, weights, final, batch.membership, batch.n_atoms)
    return EncodedMolecule(layers, sums, r, rec, selected, final)
