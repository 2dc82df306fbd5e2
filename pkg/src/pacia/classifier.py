"""Adaptive linear head generated from class-mean support embeddings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .adapter import class_means
from .autodiff import ShapeError, Tensor, as_tensor, ops
from .config import ModelConfig
from .layers import GENERATOR_GAIN, MLP, ModelParams, residual_mlp


@dataclass(frozen=True)
class HeadGenWeights:
    cfg: ModelConfig

    def _mlp(self, name: str, out: int) -> MLP:
        c = self.cfg
        dims = [c.d_rel] + [c.head_hidden] * (c.head_layers - 1) + [out]
        return residual_mlp(f"head.{name}", dims, residual_last=False, final_gain=GENERATOR_GAIN)

    @property
    def w_plus(self) -> MLP:
        return self._mlp("w_plus", self.cfg.d_rel)

    @property
    def b_plus(self) -> MLP:
        return self._mlp("b_plus", 1)

    @property
    def w_minus(self) -> MLP:
        return self._mlp("w_minus", self.cfg.d_rel)

    @property
    def b_minus(self) -> MLP:
        return self._mlp("b_minus", 1)

    def init(self, params: ModelParams, rng: np.random.Generator) -> None:
        for m in (self.w_plus, self.b_plus, self.w_minus, self.b_minus):
            m.init(params, rng)


@dataclass
class ClassifierHead:
    w_plus: Tensor
    w_minus: Tensor
    b_plus: Tensor
    b_minus: Tensor


def fit_head(params: Mapping[str, Tensor], weights: HeadGenWeights, support: Tensor, labels: Sequence[int]) -> ClassifierHead:
    """Per-class (w, b) from the class means of refined support rows.

    ``support`` is ``(N, d)`` or batched ``(B, N, d)``.
    """
    mean_plus, mean_minus = class_means(as_tensor(support), labels)
    return ClassifierHead(
        weights.w_plus(params, mean_plus),
        weights.w_minus(params, mean_minus),
        weights.b_plus(params, mean_plus),
        weights.b_minus(params, mean_minus),
    )


def predict(head: ClassifierHead, query) -> Tensor:
    """``softmax([w_-.h + b_-, w_+.h + b_+])``; column 1 is the active class."""
    h = as_tensor(query)
    if h.shape[-1] != head.w_plus.shape[-1]:
        raise ShapeError(f"query width {h.shape[-1]} != head width {head.w_plus.shape[-1]}")
    neg = ops.add(ops.sum(ops.mul(head.w_minus, h), axis=-1, keepdims=True), head.b_minus)
    pos = ops.add(ops.sum(ops.mul(head.w_plus, h), axis=-1, keepdims=True), head.b_plus)
    return ops.softmax(ops.concat([neg, pos], axis=-1), axis=-1)
