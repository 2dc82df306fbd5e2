"""Full encoder -> relation graph -> adaptive head network for one episode."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional

import numpy as np

from . import classifier as clf
from .autodiff import Tensor, as_tensor, ops
from .config import Modulation, ModelConfig
from .encoder import EncodedMolecule, EncoderWeights, GraphBatch, TaskHypernet, encode
from .graphdata import Episode, LabeledGraph
from .layers import ModelParams, plain_mlp
from .relgraph import QueryHypernet, RefinedSet, RelationWeights, predict_refine

LOG_FLOOR = 1e-12


@dataclass
class Forward:
    probs: Tensor
    loss: Tensor
    encoded: EncodedMolecule
    refined: Optional[RefinedSet]
    n_support: int


def episode_loss(probs, labels) -> Tensor:
    """Summed negative log-likelihood ``-sum_q y_q . log(p_q)`` with a 1e-12 floor."""
    probs = as_tensor(probs)
    labels = np.asarray(labels)
    if probs.shape[0] != len(labels):
        raise ValueError(f"{probs.shape[0]} predictions for {len(labels)} labels")
    y = np.stack([1.0 - labels, labels.astype(np.float64)], axis=1)
    return ops.mul(ops.sum(ops.mul(ops.log(ops.clamp_min(probs, LOG_FLOOR)), y)), -1.0)


@dataclass(frozen=True)
class PaciaNet:
    cfg: ModelConfig

    @property
    def encoder(self) -> EncoderWeights:
        return EncoderWeights(self.cfg)

    @property
    def task_hypernet(self) -> TaskHypernet:
        return TaskHypernet.build(self.cfg)

    @property
    def relation(self) -> RelationWeights:
        return RelationWeights(self.cfg)

    @property
    def query_hypernet(self) -> QueryHypernet:
        return QueryHypernet.build(self.cfg)

    @property
    def heads(self) -> clf.HeadGenWeights:
        return clf.HeadGenWeights(self.cfg)

    def init_params(self, seed: int = 0) -> ModelParams:
        rng = np.random.default_rng(seed)
        params = ModelParams()
        self.encoder.init(params, rng)
        self.task_hypernet.init(params, rng)
        self.relation.init(params, rng)
        self.query_hypernet.init(params, rng)
        self.heads.init(params, rng)
        return params

    def adaptive_counts(self) -> Dict[str, int]:
        """Values emitted by hypernetworks: task-level, and per query."""
        c = self.cfg
        return {"encoder": c.L_enc * (2 * c.d_enc + 1), "predictor_per_query": c.L_rel * (2 * c.d_rel + 1)}

    def forward(
        self,
        params: Mapping[str, Tensor],
        support: List[LabeledGraph],
        query: List[LabeledGraph],
        *,
        encoder_mod: Modulation,
        predictor_mod: Modulation,
        mode: str = "train",
        rng: Optional[np.random.Generator] = None,
    ) -> Forward:
        """Predict every query of one episode; ``rng`` enables dropout."""
        labels = np.array([g.label for g in support])
        n_s = len(support)
        batch = GraphBatch.from_graphs([g.graph for g in support] + [g.graph for g in query])
        enc = encode(
            params,
            self.encoder,
            batch,
            modulation=encoder_mod,
            hypernet=self.task_hypernet,
            support_idx=np.arange(n_s),
            support_labels=labels,
            mode=mode,
            rng=rng,
        )
        support_r, query_r = enc.r[:n_s], enc.r[n_s:]
        refined = predict_refine(
            params,
            self.relation,
            query_r,
            support_r,
            labels,
            modulation=predictor_mod,
            hypernet=self.query_hypernet,
            mode=mode,
            rng=rng,
        )
        head = clf.fit_head(params, self.heads, refined.support, labels)
        probs = clf.predict(head, refined.query)
        loss = episode_loss(probs, [g.label for g in query])
        return Forward(probs, loss, enc, refined, n_s)

    def forward_episode(self, params, episode: Episode, **kw) -> Forward:
        return self.forward(params, list(episode.support), list(episode.query), **kw)


@dataclass(frozen=True)
class LinearProbeNet:
    """GIN encoder plus a linear two-way classifier: the MAML baseline.

    Predictions do not look at the support set; adaptation to a task happens
    only through gradient steps on its support loss.
    """

    cfg: ModelConfig

    @property
    def encoder(self) -> EncoderWeights:
        return EncoderWeights(self.cfg)

    @property
    def classifier(self):
        return plain_mlp("probe.out", [self.cfg.d_rel, 2], [None])

    def init_params(self, seed: int = 0) -> ModelParams:
        rng = np.random.default_rng(seed)
        params = ModelParams()
        self.encoder.init(params, rng)
        self.classifier.init(params, rng)
        return params

    def adaptive_counts(self) -> Dict[str, int]:
        return {"encoder": 0, "predictor_per_query": 0}

    def forward(
        self,
        params: Mapping[str, Tensor],
        support: List[LabeledGraph],
        query: List[LabeledGraph],
        *,
        encoder_mod: Modulation,
        predictor_mod: Modulation,
        mode: str = "train",
        rng: Optional[np.random.Generator] = None,
    ) -> Forward:
        """Modulation arguments are accepted for interface parity and must be off."""
        if encoder_mod.active or predictor_mod.active:
            raise ValueError("the linear-probe baseline has no adapters; use task_adapt=False, query_adapt=False")
        batch = GraphBatch.from_graphs([g.graph for g in query])
        enc = encode(params, self.encoder, batch, modulation=encoder_mod, mode=mode, rng=rng)
        probs = ops.softmax(self.classifier(params, enc.r), axis=-1)
        loss = episode_loss(probs, [g.label for g in query])
        return Forward(probs, loss, enc, None, len(support))

    def forward_episode(self, params, episode: Episode, **kw) -> Forward:
        return self.forward(params, list(episode.support), list(episode.query), **kw)
