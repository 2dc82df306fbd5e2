"""Named parameter store and the small MLP building blocks used everywhere."""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .autodiff import ShapeError, Tensor, ops, parameter

CHECKPOINT_FORMAT = "pacia-ckpt-v1"


class ModelParams(Mapping[str, Tensor]):
    """Flat, ordered collection of trainable tensors.

    Iteration order is registration order: input projection, GIN layers,
    readout, encoder hypernetworks, relation MLPs, predictor hypernetworks,
    classifier generators.
    """

    def __init__(self, tensors: Optional[Mapping[str, Tensor]] = None):
        self._t: Dict[str, Tensor] = {}
        for name, t in (tensors or {}).items():
            self.add(name, t.data)

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._t:
            raise KeyError(f"duplicate parameter {name!r}")
        self._t[name] = parameter(values, name=name)
        return self._t[name]

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def count(self) -> int:
        return int(sum(t.size for t in self._t.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(self._t)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: t.data for k, t in self._t.items()}

    def updated(self, deltas: Mapping[str, np.ndarray], scale: float = 1.0) -> "ModelParams":
        """New store with ``value + scale * delta`` for every listed entry."""
        out = ModelParams()
        for k, t in self._t.items():
            d = deltas.get(k)
            out.add(k, t.data if d is None else t.data + scale * d)
        return out

    def assign(self, name: str, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self._t[name].shape:
            raise ValueError(f"{name}: shape {values.shape} != {self._t[name].shape}")
        self._t[name].data = values.copy()

    def bitwise_equal(self, other: "ModelParams") -> bool:
        return list(self) == list(other) and all(
            self[k].data.tobytes() == other[k].data.tobytes() for k in self
        )

    # checkpoint container
    def to_json(self, extra: Optional[dict] = None) -> str:
        body = {
            "format": CHECKPOINT_FORMAT,
            "encoding": "base64-f64le",
            "params": [
                {
                    "name": k,
                    "shape": list(t.shape),
                    "data": base64.b64encode(np.ascontiguousarray(t.data, dtype="<f8").tobytes()).decode("ascii"),
                }
                for k, t in self._t.items()
            ],
        }
        if extra:
            body.update(extra)
        return json.dumps(body)

    @classmethod
    def from_json(cls, text: str) -> Tuple["ModelParams", dict]:
        body = json.loads(text)
        if body.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a {CHECKPOINT_FORMAT} checkpoint (format={body.get('format')!r})")
        out = cls()
        for entry in body["params"]:
            arr = np.frombuffer(base64.b64decode(entry["data"]), dtype="<f8").astype(np.float64)
            out.add(entry["name"], arr.reshape(entry["shape"]))
        meta = {k: v for k, v in body.items() if k not in ("params", "encoding")}
        return out, meta


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def linear(params: Mapping[str, Tensor], name: str, x: Tensor) -> Tensor:
    return ops.add(ops.matmul(x, params[f"{name}.W"]), params[f"{name}.b"])


def init_linear(params: ModelParams, rng: np.random.Generator, name: str, fan_in: int, fan_out: int) -> None:
    params.add(f"{name}.W", glorot(rng, fan_in, fan_out))
    params.add(f"{name}.b", np.zeros(fan_out))


# generator networks start close to their bias (FiLM identity, neutral head)
GENERATOR_GAIN = 0.1

_ACTS = {"relu": ops.relu, "leaky_relu": ops.leaky_relu, None: None}


@dataclass(frozen=True)
class MLP:
    """Stack of fully connected layers addressed by ``name.{i}``.

    ``acts[i]`` follows layer ``i``. With ``residual`` set, a layer whose input
    and output widths agree adds its input (``residual_last`` controls the
    final layer). Dropout applies after each hidden activation.
    """

    name: str
    dims: Tuple[int, ...]
    acts: Tuple[Optional[str], ...]
    residual: bool = False
    residual_last: bool = True
    dropout: float = 0.0
    final_gain: float = 1.0

    def init(self, params: ModelParams, rng: np.random.Generator) -> None:
        n = len(self.dims) - 1
        for i, (a, b) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            init_linear(params, rng, f"{self.name}.{i}", a, b)
        if self.final_gain != 1.0:
            params[f"{self.name}.{n - 1}.W"].data *= self.final_gain

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    def __call__(self, params: Mapping[str, Tensor], x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        n = len(self.dims) - 1
        if x.shape[-1] != self.dims[0]:
            raise ShapeError(f"{self.name}: expected input width {self.dims[0]}, got {x.shape[-1]}")
        for i in range(n):
            y = linear(params, f"{self.name}.{i}", x)
            act = _ACTS[self.acts[i]]
            if act is not None:
                y = act(y)
            if self.residual and self.dims[i] == self.dims[i + 1] and (i < n - 1 or self.residual_last):
                y = ops.add(y, x)
            if i < n - 1 and rng is not None and self.dropout > 0:
                y = ops.dropout(y, self.dropout, rng)
            x = y
        return x


def residual_mlp(
    name: str,
    dims: Sequence[int],
    dropout: float = 0.0,
    residual_last: bool = True,
    last_act: Optional[str] = None,
    final_gain: float = 1.0,
) -> MLP:
    n = len(dims) - 1
    acts = tuple(["leaky_relu"] * (n - 1) + [last_act])
    return MLP(name, tuple(dims), acts, residual=True, residual_last=residual_last, dropout=dropout, final_gain=final_gain)


def plain_mlp(name: str, dims: Sequence[int], acts: Sequence[Optional[str]]) -> MLP:
    return MLP(name, tuple(dims), tuple(acts))


def names_with_prefix(params: Mapping[str, Tensor], prefix: str) -> List[str]:
    return [k for k in params if k.startswith(prefix)]
