"""Unified GNN adapter: set-conditioned hypernetworks that emit FiLM
parameters and propagation-depth logits for a message-passing network."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, ops
from .layers import MLP


class EmptyClassError(ValueError):
    """A support set lacks one of the two classes."""


@dataclass
class Prototypes:
    r_plus: Tensor
    r_minus: Tensor
    layer: int = 0


@dataclass
class AdapterParams:
    """Adaptive parameters produced for one modulated network."""

    scales: List[Tensor] = field(default_factory=list)
    shifts: List[Tensor] = field(default_factory=list)
    logits: List[Tensor] = field(default_factory=list)
    weights: Optional[Tensor] = None

    def logit_array(self) -> np.ndarray:
        return np.concatenate([np.asarray(l.data).reshape(-1, 1) for l in self.logits], axis=1) if self.logits else np.zeros((1, 0))


def _canonical_class_sum(rows: Tensor, idx: np.ndarray) -> Tensor:
    """Sum of ``rows[..., idx, :]`` accumulated in an order fixed by row values.

    The summation order is independent of how the support set was ordered,
    so the result is bitwise permutation invariant.
    """
    sub = rows.data[..., idx, :]
    if rows.ndim == 2:
        order = idx[np.lexsort(sub.T[::-1])]
        return ops.sum(ops.getitem(rows, order), axis=0)
    if rows.ndim == 3:
        order = np.stack([idx[np.lexsort(s.T[::-1])] for s in sub])
        picked = ops.getitem(rows, (np.arange(rows.shape[0])[:, None], order))
        return ops.sum(picked, axis=1)
    raise ShapeError(f"class pooling expects 2-D or 3-D rows, got {rows.shape}")


def class_indices(labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels)
    pos, neg = np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise EmptyClassError(f"support needs both classes, got {len(pos)} active / {len(neg)} inactive")
    return pos, neg


def class_means(rows: Tensor, labels: Sequence[int]) -> Tuple[Tensor, Tensor]:
    pos, neg = class_indices(labels)
    return (
        ops.mul(_canonical_class_sum(rows, pos), 1.0 / len(pos)),
        ops.mul(_canonical_class_sum(rows, neg), 1.0 / len(neg)),
    )


def one_hot(labels: Sequence[int]) -> np.ndarray:
    labels = np.asarray(labels)
    return np.stack([1.0 - labels, labels.astype(np.float64)], axis=1)


def compute_prototypes(
    atom_sums: Tensor,
    n_atoms: np.ndarray,
    labels: Sequence[int],
    mlp: Optional[Callable[[Tensor], Tensor]] = None,
    order: str = "equation",
    layer: int = 0,
) -> Prototypes:
    """Class prototypes from per-graph atom sums and labels.

    ``atom_sums`` is ``(S, d)`` or batched ``(B, S, d)``. In ``equation``
    order each labelled sum goes through ``mlp`` and is then scaled by
    ``1 / (|S_c| |V_s|)``; ``table`` order averages atoms before the MLP.
    ``mlp=None`` is the identity.
    """
    atom_sums = as_tensor(atom_sums)
    n_atoms = np.asarray(n_atoms, dtype=np.float64).reshape(-1, 1)
    y = one_hot(labels)
    if atom_sums.ndim == 3:
        y = np.broadcast_to(y, atom_sums.shape[:2] + (2,))
    if order == "equation":
        rows = ops.concat([atom_sums, y], axis=-1)
        if mlp is not None:
            rows = mlp(rows)
        rows = ops.div(rows, n_atoms)
    elif order == "table":
        rows = ops.concat([ops.div(atom_sums, n_atoms), y], axis=-1)
        if mlp is not None:
            rows = mlp(rows)
    else:
        raise ValueError(f"unknown prototype order {order!r}")
    r_plus, r_minus = class_means(rows, labels)
    return Prototypes(r_plus, r_minus, layer)


def split_adapter_output(out: Tensor, d: int) -> Tuple[Tensor, Tensor, Tensor]:
    if out.shape[-1] != 2 * d + 1:
        raise ShapeError(f"adapter output width {out.shape[-1]} != 2*{d}+1")
    return out[..., :d], out[..., d : 2 * d], out[..., 2 * d :]


def task_adapter(params: Mapping[str, Tensor], mlp: MLP, protos: Prototypes, d: int, rng=None) -> Tuple[Tensor, Tensor, Tensor]:
    """(scale, shift, depth logit) from ``[r_plus | r_minus]``."""
    if mlp.out_dim != 2 * d + 1:
        raise ShapeError(f"task adapter emits {mlp.out_dim} values, expected 2*{d}+1")
    x = ops.concat([protos.r_plus, protos.r_minus], axis=-1)
    return split_adapter_output(mlp(params, x, rng), d)


def query_adapter(
    params: Mapping[str, Tensor], mlp: MLP, protos: Prototypes, query_embedding: Tensor, d: int, rng=None
) -> Tuple[Tensor, Tensor, Tensor]:
    """(scale, shift, depth logit) from ``[r_plus | r_minus | sum of query atoms]``."""
    if mlp.out_dim != 2 * d + 1:
        raise ShapeError(f"query adapter emits {mlp.out_dim} values, expected 2*{d}+1")
    if query_embedding.shape[-1] != d:
        raise ShapeError(f"query embedding width {query_embedding.shape[-1]} != {d}")
    x = ops.concat([protos.r_plus, protos.r_minus, query_embedding], axis=-1)
    return split_adapter_output(mlp(params, x, rng), d)


def film_modulate(h, scale, shift, residual_scale: bool = False) -> Tensor:
    """``scale * h + shift`` elementwise (``(1 + scale)`` when ``residual_scale``)."""
    h, scale, shift = as_tensor(h), as_tensor(scale), as_tensor(shift)
    if h.shape[-1] != scale.shape[-1] or h.shape[-1] != shift.shape[-1]:
        raise ShapeError(f"FiLM widths differ: h {h.shape}, scale {scale.shape}, shift {shift.shape}")
    if residual_scale:
        scale = ops.add(scale, 1.0)
    return ops.add(ops.mul(h, scale), shift)


def depth_weights(logits: Sequence) -> Tensor:
    """Softmax over per-layer logits; entries may be batched ``(B, 1)``."""
    if len(logits) == 0:
        raise ValueError("depth_weights needs at least one logit")
    cols = [as_tensor(l) for l in logits]
    cols = [c.reshape(-1, 1) if c.ndim <= 1 else c.reshape(c.shape[0], 1) for c in cols]
    return ops.softmax(ops.concat(cols, axis=1), axis=1)


def mix_depths(layers: Sequence, p) -> Tensor:
    """``sum_l p_l * h^l``. ``p`` is ``(L,)``/``(1, L)`` or batched ``(B, L)``
    matching a leading batch axis of every ``h^l``."""
    p = as_tensor(p)
    if p.shape[-1] != len(layers):
        raise ShapeError(f"{len(layers)} layers but {p.shape[-1]} depth weights")
    out = None
    for l, h in enumerate(layers):
        h = as_tensor(h)
        w = p[..., l]
        if p.ndim == 2 and p.shape[0] > 1:
            w = w.reshape((p.shape[0],) + (1,) * (h.ndim - 1))
        else:
            w = w.reshape((1,) * h.ndim)
        term = ops.mul(h, w)
        out = term if out is None else ops.add(out, term)
    return out


def select_depth(logits) -> int:
    """1-based argmax of the depth weights; ties go to the shallowest layer.

    Taking the argmax over the softmax (rather than the raw logits) keeps
    selection consistent with mixing when logits differ below rounding.
    """
    arr = np.asarray(logits, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError("select_depth needs at least one logit")
    e = np.exp(arr - arr.max())
    return int(np.argmax(e / e.sum())) + 1


def identity_film(d: int, batch: Optional[int] = None) -> Tuple[Tensor, Tensor]:
    shape = (d,) if batch is None else (batch, d)
    return as_tensor(np.ones(shape)), as_tensor(np.zeros(shape))
