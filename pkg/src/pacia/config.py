"""Model and training configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple


class ConfigError(ValueError):
    """Carries every violated constraint at once."""

    def __init__(self, problems: List[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class Modulation:
    """Which parts of a GNN the adapter modulates.

    ``identity`` replaces generated FiLM parameters by (scale=1, shift=0)
    without evaluating the hypernetwork.
    """

    node: bool = True
    depth: bool = True
    identity: bool = False

    @classmethod
    def parse(cls, text: str) -> "Modulation":
        table = {"N": (True, False), "D": (False, True), "ND": (True, True), "off": (False, False)}
        try:
            node, depth = table[text]
        except KeyError:
            raise ValueError(f"modulation must be one of {list(table)}, got {text!r}") from None
        return cls(node, depth)

    @property
    def label(self) -> str:
        return {(True, False): "N", (False, True): "D", (True, True): "ND", (False, False): "off"}[(self.node, self.depth)]

    @property
    def active(self) -> bool:
        return self.node or self.depth


OFF = Modulation(False, False)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture. Defaults are the MoleculeNet dimensions."""

    d_in: int = 8
    d_enc: int = 300
    gin_hidden: int = 600
    d_rel: int = 128
    readout_hidden: int = 128
    proto_enc: int = 300
    proto_rel: int = 128
    adj_hidden: Tuple[int, int] = (256, 128)
    node_hidden: int = 256
    head_hidden: int = 128
    head_layers: int = 4
    hyper_layers: int = 3
    L_enc: int = 5
    L_rel: int = 5
    enc_dropout: float = 0.5
    hyper_dropout: float = 0.1
    layer_norm: bool = True
    film_residual_scale: bool = False
    proto_order: str = "equation"
    adjacency_squash: str = "sigmoid"
    adjacency_input: str = "absdiff"
    relation_residual: bool = True
    adjacency_norm: str = "row"

    def problems(self) -> List[str]:
        out = []
        for name in ("d_in", "d_enc", "gin_hidden", "d_rel", "readout_hidden", "proto_enc", "proto_rel", "node_hidden", "head_hidden", "L_enc", "L_rel"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        if self.head_layers < 1 or self.hyper_layers < 1:
            out.append("head_layers and hyper_layers must be >= 1")
        for name in ("enc_dropout", "hyper_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                out.append(f"{name} must lie in [0, 1)")
        if self.proto_order not in ("equation", "table"):
            out.append("proto_order must be 'equation' or 'table'")
        if self.adjacency_squash not in ("sigmoid", "none"):
            out.append("adjacency_squash must be 'sigmoid' or 'none'")
        if self.adjacency_input not in ("absdiff", "exp_absdiff"):
            out.append("adjacency_input must be 'absdiff' or 'exp_absdiff'")
        if self.adjacency_norm not in ("row", "none"):
            out.append("adjacency_norm must be 'row' or 'none'")
        return out


def desk_model(d_in: int = 8) -> ModelConfig:
    """Reduced widths for single-core runs; depths and topology unchanged."""
    return ModelConfig(
        d_in=d_in,
        d_enc=32,
        gin_hidden=64,
        d_rel=32,
        readout_hidden=32,
        proto_enc=32,
        proto_rel=32,
        adj_hidden=(32, 16),
        node_hidden=64,
        head_hidden=32,
        enc_dropout=0.1,
    )


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 0.006
    episodes_max: int = 25000
    query_size: int = 16
    k_shot: Optional[int] = 10
    support_size: Optional[int] = None
    task_adapt: bool = True
    query_adapt: bool = True
    encoder_mode: str = "ND"
    predictor_mode: str = "ND"
    seed: int = 0
    eval_every: int = 10
    eval_episodes: int = 4
    tasks_per_step: int = 1
    inner_lr: float = 0.01
    inner_steps: int = 1

    def problems(self) -> List[str]:
        out = list(self.model.problems())
        if self.lr <= 0:
            out.append("lr must be > 0")
        if self.episodes_max < 0:
            out.append("episodes_max must be >= 0")
        if self.query_size < 1:
            out.append("query_size must be >= 1")
        if (self.k_shot is None) == (self.support_size is None):
            out.append("exactly one of k_shot / support_size must be set")
        if self.k_shot is not None and self.k_shot < 1:
            out.append("k_shot must be >= 1")
        if self.support_size is not None and self.support_size < 2:
            out.append("support_size must be >= 2")
        for name in ("encoder_mode", "predictor_mode"):
            if getattr(self, name) not in ("N", "D", "ND", "off"):
                out.append(f"{name} must be one of N, D, ND, off")
        if self.eval_every < 1:
            out.append("eval_every must be >= 1")
        if self.tasks_per_step < 1:
            out.append("tasks_per_step must be >= 1")
        if self.inner_lr < 0 or self.inner_steps < 0:
            out.append("inner_lr and inner_steps must be >= 0")
        return out

    def validate(self) -> "TrainConfig":
        probs = self.problems()
        if probs:
            raise ConfigError(probs)
        return self

    @property
    def encoder_modulation(self) -> Modulation:
        return Modulation.parse(self.encoder_mode) if self.task_adapt else OFF

    @property
    def predictor_modulation(self) -> Modulation:
        return Modulation.parse(self.predictor_mode) if self.query_adapt else OFF

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        d = dataclasses.asdict(self)
        d["model"]["adj_hidden"] = list(self.model.adj_hidden)
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "TrainConfig":
        d = dict(d)
        model = dict(d.pop("model", {}))
        if "adj_hidden" in model:
            model["adj_hidden"] = tuple(model["adj_hidden"])
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        unknown |= {f"model.{k}" for k in set(model) - {f.name for f in dataclasses.fields(ModelConfig)}}
        if unknown:
            raise ConfigError([f"unknown config key {k!r}" for k in sorted(unknown)])
        return cls(model=ModelConfig(**model), **d)


ABLATION_PRESETS = {
    "none": {},
    "no-task": {"task_adapt": False},
    "no-query": {"query_adapt": False},
    "finetune": {"task_adapt": False, "query_adapt": False},
}
