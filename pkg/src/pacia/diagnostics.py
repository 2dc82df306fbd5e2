"""Finite-difference gradient checks over the whole network and its linear pieces."""

from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np

from .autodiff import GradCheckReport, finite_diff_check, ops
from .config import ModelConfig, Modulation
from .encoder import GraphBatch
from .graphdata import Episode, LabeledGraph, MolecularGraph
from .layers import ModelParams, linear
from .model import PaciaNet


def tiny_model(d_in: int = 3) -> ModelConfig:
    """Narrow widths so every parameter entry can be perturbed quickly."""
    return ModelConfig(
        d_in=d_in,
        d_enc=4,
        gin_hidden=5,
        d_rel=4,
        readout_hidden=5,
        proto_enc=4,
        proto_rel=4,
        adj_hidden=(5, 3),
        node_hidden=5,
        head_hidden=4,
        enc_dropout=0.0,
        hyper_dropout=0.0,
    )


def three_node_episode(rng: np.random.Generator, d_in: int = 3, n_query: int = 2) -> Episode:
    """1-shot episode over random 3-node graphs (a path or a triangle)."""

    def graph(label: int) -> LabeledGraph:
        edges = [(0, 1), (1, 2)] + ([(0, 2)] if rng.random() < 0.5 else [])
        return LabeledGraph(MolecularGraph(rng.normal(size=(3, d_in)), np.array(edges)), label)

    support = (graph(1), graph(0))
    query = tuple(graph(i % 2) for i in range(n_query))
    return Episode(support, query, (0, 1), tuple(range(2, 2 + n_query)), "gradcheck")


def check_full_pipeline(seed: int = 0, h: float = 1e-5, tol: float = 1e-4, max_entries: Optional[int] = None) -> GradCheckReport:
    """Encoder, both adapters, relation graph, head and loss, all modulation on.

    Train mode without dropout, so depth mixing is soft and differentiable.
    """
    rng = np.random.default_rng(seed)
    cfg = tiny_model()
    net = PaciaNet(cfg)
    params = net.init_params(seed)
    episode = three_node_episode(rng, cfg.d_in)
    nd = Modulation.parse("ND")

    def f():
        return net.forward_episode(params, episode, encoder_mod=nd, predictor_mod=nd, mode="train").loss

    return finite_diff_check(f, params, h=h, tol=tol, max_entries=max_entries, rng=rng)


def check_linear_paths(seed: int = 0, tol: float = 1e-6) -> GradCheckReport:
    """A linear layer followed by mean readout: the loss is linear in every
    parameter, so central differences are exact up to rounding."""
    rng = np.random.default_rng(seed)
    episode = three_node_episode(rng)
    batch = GraphBatch.from_graphs([g.graph for g in episode.support + episode.query])
    params = ModelParams()
    params.add("lin.W", rng.normal(size=(3, 4)))
    params.add("lin.b", rng.normal(size=4))
    probe = rng.normal(size=(batch.membership.shape[0], 4))
    avg = batch.membership / batch.n_atoms[:, None]

    def f():
        h = linear(params, "lin", batch.features)
        pooled = ops.matmul(avg, h)
        return ops.sum(ops.mul(pooled, probe))

    return finite_diff_check(f, params, tol=tol)


def gradcheck_suite(seed: int = 0) -> List[Tuple[str, GradCheckReport]]:
    return [("full_pipeline", check_full_pipeline(seed)), ("linear_paths", check_linear_paths(seed))]
