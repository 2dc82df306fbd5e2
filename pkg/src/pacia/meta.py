"""Episodic meta-training and meta-testing, the MAML baseline, ablations."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tape
from .config import OFF, ModelConfig, Modulation, TrainConfig
from .graphdata import Episode, Task, sample_episode
from .layers import ModelParams
from .metrics import METRICS, MetricUndefinedError
from .model import Forward, LinearProbeNet, PaciaNet, episode_loss

log = logging.getLogger(__name__)

__all__ = [
    "Adam",
    "EpisodeResult",
    "ModelParams",
    "TrainingDivergedError",
    "adaptive_parameter_report",
    "dump_embeddings",
    "episode_loss",
    "evaluate",
    "load_checkpoint",
    "maml_adapt",
    "maml_train",
    "network_for",
    "run_episode",
    "save_checkpoint",
    "train",
]


class TrainingDivergedError(FloatingPointError):
    """A loss or gradient became NaN/Inf."""


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: ModelParams, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name in params:
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p = params[name]
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class EpisodeResult:
    probs: np.ndarray  # active-class probability per query
    labels: np.ndarray
    loss: float
    encoder_depth: Optional[int] = None
    predictor_depths: Optional[np.ndarray] = None
    task_id: str = ""


def _episode_rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _result(fwd: Forward, episode: Episode) -> EpisodeResult:
    return EpisodeResult(
        fwd.probs.data[:, 1].copy(),
        episode.query_labels,
        fwd.loss.item(),
        fwd.encoded.selected_depth,
        fwd.refined.selected_depths if fwd.refined is not None else None,
        episode.task_id,
    )


def run_episode(
    net: PaciaNet,
    params: ModelParams,
    episode: Episode,
    config: TrainConfig,
    mode: str = "test",
    rng: Optional[np.random.Generator] = None,
) -> EpisodeResult:
    """Forward one episode. ``train`` mixes depths softly and uses dropout
    when ``rng`` is given; ``test`` selects depths and is deterministic."""
    fwd = net.forward_episode(
        params,
        episode,
        encoder_mod=config.encoder_modulation,
        predictor_mod=config.predictor_modulation,
        mode=mode,
        rng=rng if mode == "train" else None,
    )
    return _result(fwd, episode)


def loss_and_grads(
    net: PaciaNet,
    params: ModelParams,
    support,
    query,
    config: TrainConfig,
    rng: Optional[np.random.Generator],
    encoder_mod: Optional[Modulation] = None,
    predictor_mod: Optional[Modulation] = None,
) -> Tuple[float, Dict[str, np.ndarray]]:
    with Tape() as tape:
        fwd = net.forward(
            params,
            list(support),
            list(query),
            encoder_mod=config.encoder_modulation if encoder_mod is None else encoder_mod,
            predictor_mod=config.predictor_modulation if predictor_mod is None else predictor_mod,
            mode="train",
            rng=rng,
        )
        grads = tape.backward(fwd.loss, params)
    return fwd.loss.item(), grads


def _check_finite(loss: float, grads: Mapping[str, np.ndarray], params: ModelParams, episode: int) -> None:
    if math.isfinite(loss):
        bad = next((k for k, g in grads.items() if not np.all(np.isfinite(g))), None)
        if bad is None:
            return
        raise TrainingDivergedError(f"episode {episode}: non-finite gradient in {bad}")
    bad = next((k for k in params if not np.all(np.isfinite(params[k].data))), "loss")
    raise TrainingDivergedError(f"episode {episode}: non-finite loss {loss}; first non-finite tensor: {bad}")


class _TaskCycler:
    """Visits tasks one by one in a fresh shuffled order each pass."""

    def __init__(self, tasks: Sequence[Task], rng: np.random.Generator):
        self.tasks, self.rng, self.queue = list(tasks), rng, []

    def next(self) -> Task:
        if not self.queue:
            self.queue = list(self.rng.permutation(len(self.tasks)))
        return self.tasks[self.queue.pop(0)]


def _sample(task: Task, config: TrainConfig, rng) -> Episode:
    return sample_episode(task, rng, k_shot=config.k_shot, support_size=config.support_size, query_size=config.query_size)


@dataclass
class TrainResult:
    params: ModelParams
    log: List[dict]
    best_metric: Optional[float] = None
    best_episode: Optional[int] = None


def _usable(tasks: Sequence[Task]) -> List[Task]:
    out = [t for t in tasks if len(t.class_indices(0)) and len(t.class_indices(1))]
    if not out:
        raise ValueError("need at least one training task containing both classes")
    return out


def train(
    tasks: Sequence[Task],
    config: TrainConfig,
    valid_tasks: Optional[Sequence[Task]] = None,
    init: Optional[ModelParams] = None,
    on_episode: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Meta-train with Adam on the episode loss, one episode per step.

    With ``valid_tasks`` the parameters with the best validation ROC-AUC
    (checked every ``eval_every`` episodes) are returned.
    """
    config.validate()
    net = PaciaNet(config.model)
    params = init.copy() if init is not None else net.init_params(config.seed)
    if config.episodes_max == 0:
        return TrainResult(params, [])
    tasks = _usable(tasks)
    sample_rng, drop_rng, order_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(3))
    cycler = _TaskCycler(tasks, order_rng)
    opt = Adam(config.lr)
    history: List[dict] = []
    best, best_ep, best_params = -math.inf, None, None
    for ep in range(1, config.episodes_max + 1):
        total, acc = 0.0, None
        for _ in range(config.tasks_per_step):
            episode = _sample(cycler.next(), config, sample_rng)
            loss, grads = loss_and_grads(net, params, episode.support, episode.query, config, drop_rng)
            _check_finite(loss, grads, params, ep)
            total += loss
            acc = grads if acc is None else {k: acc[k] + grads[k] for k in acc}
        opt.step(params, acc)
        row = {"episode": ep, "task_id": episode.task_id, "loss": total}
        if valid_tasks and ep % config.eval_every == 0:
            score = evaluate(net, params, valid_tasks, config, config.eval_episodes, "roc_auc", seed=config.seed).mean
            row["metric"] = score
            if score > best:
                best, best_ep, best_params = score, ep, params.copy()
        history.append(row)
        if on_episode is not None:
            on_episode(row)
    if best_params is not None:
        return TrainResult(best_params, history, best, best_ep)
    return TrainResult(params, history)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    metric: str
    per_task: Dict[str, float]
    per_episode: List[Tuple[str, int, float]]
    skipped: int = 0

    @property
    def mean(self) -> float:
        vals = [v for v in self.per_task.values() if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "mean": self.mean,
            "per_task": self.per_task,
            "per_episode": [list(e) for e in self.per_episode],
            "skipped": self.skipped,
        }


def _eval_one_task(args) -> Tuple[List[Tuple[str, int, float]], int]:
    net, arrays, task, t_idx, config, n_episodes, metric, seed, adapt = args
    params = ModelParams()
    for k, v in arrays.items():
        params.add(k, v)
    fn = METRICS[metric]
    rows, skipped = [], 0
    for e in range(n_episodes):
        episode = _sample(task, config, _episode_rng(seed, t_idx, e))
        p = params
        if adapt:
            p, _ = maml_adapt(net, params, episode, config.inner_lr, config.inner_steps, config)
        res = run_episode(net, p, episode, config, mode="test")
        try:
            rows.append((task.task_id, e, fn(res.probs, res.labels)))
        except MetricUndefinedError:
            log.warning("task %s episode %d: single-class query set, skipped", task.task_id, e)
            skipped += 1
    return rows, skipped


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("PACIA_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def evaluate(
    net: PaciaNet,
    params: ModelParams,
    test_tasks: Sequence[Task],
    config: TrainConfig,
    n_episodes_per_task: int,
    metric: str = "roc_auc",
    seed: int = 0,
    adapt: bool = False,
    workers: Optional[int] = None,
) -> EvalReport:
    """Test-mode episodes per task; metric averaged per task, then across tasks.

    Episode ``e`` of task ``t`` is drawn from a stream keyed by
    ``(seed, t, e)``, so results do not depend on worker count.
    ``adapt`` runs :func:`maml_adapt` on each support set first.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {sorted(METRICS)}")
    jobs = [(net, params.arrays(), task, ti, config, n_episodes_per_task, metric, seed, adapt) for ti, task in enumerate(test_tasks)]
    workers = num_workers() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            outs = list(pool.map(_eval_one_task, jobs))
    else:
        outs = [_eval_one_task(j) for j in jobs]
    per_task, per_episode, skipped = {}, [], 0
    for task, (rows, sk) in zip(test_tasks, outs):
        per_episode.extend(rows)
        skipped += sk
        per_task[task.task_id] = float(np.mean([r[2] for r in rows])) if rows else math.nan
    return EvalReport(metric.replace("-", "_"), per_task, per_episode, skipped)


# ---------------------------------------------------------------------------
# MAML baseline (first order)


def support_loss(net: PaciaNet, params: ModelParams, episode: Episode, config: TrainConfig) -> float:
    """Loss of predicting the support set itself, deterministic (no dropout)."""
    fwd = net.forward(
        params,
        list(episode.support),
        list(episode.support),
        encoder_mod=config.encoder_modulation,
        predictor_mod=config.predictor_modulation,
        mode="train",
    )
    return fwd.loss.item()


def maml_adapt(
    net: PaciaNet,
    params: ModelParams,
    episode: Episode,
    inner_lr: float,
    steps: int,
    config: TrainConfig,
) -> Tuple[ModelParams, List[float]]:
    """``steps`` plain gradient steps on the support loss over all parameters.

    Each step follows the gradient of the support loss averaged over support
    samples, so ``inner_lr`` does not scale with support size. Returns the
    adapted copy and the (summed) support loss measured before each step.
    """
    if not episode.support:
        raise ValueError("maml_adapt needs a non-empty support set")
    adapted = params.copy()
    losses = []
    scale = -inner_lr / len(episode.support)
    for _ in range(steps):
        loss, grads = loss_and_grads(net, adapted, episode.support, episode.support, config, None)
        losses.append(loss)
        if inner_lr != 0.0:
            adapted = adapted.updated(grads, scale)
    return adapted, losses


def network_for(params: Mapping[str, object], model: ModelConfig):
    """The network whose parameter names ``params`` carries."""
    return LinearProbeNet(model) if any(k.startswith("probe.") for k in params) else PaciaNet(model)


def maml_train(
    tasks: Sequence[Task],
    config: TrainConfig,
    init: Optional[ModelParams] = None,
    on_episode: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """First-order MAML on the linear-probe baseline: adapt on the support
    set, step Adam on the query loss evaluated at the adapted parameters."""
    config = config.replace(task_adapt=False, query_adapt=False).validate()
    net = LinearProbeNet(config.model)
    params = init.copy() if init is not None else net.init_params(config.seed)
    if config.episodes_max == 0:
        return TrainResult(params, [])
    tasks = _usable(tasks)
    sample_rng, drop_rng, order_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(3))
    cycler = _TaskCycler(tasks, order_rng)
    opt = Adam(config.lr)
    history = []
    for ep in range(1, config.episodes_max + 1):
        episode = _sample(cycler.next(), config, sample_rng)
        adapted, inner = maml_adapt(net, params, episode, config.inner_lr, config.inner_steps, config)
        after = support_loss(net, adapted, episode, config)
        loss, grads = loss_and_grads(net, adapted, episode.support, episode.query, config, drop_rng)
        _check_finite(loss, grads, params, ep)
        opt.step(params, grads)
        row = {
            "episode": ep,
            "task_id": episode.task_id,
            "loss": loss,
            "support_before": inner[0] if inner else after,
            "support_after": after,
        }
        history.append(row)
        if on_episode is not None:
            on_episode(row)
    return TrainResult(params, history)


# ---------------------------------------------------------------------------
# accounting, export, checkpoints


def adaptive_parameter_report(net: PaciaNet, params: ModelParams, config: Optional[TrainConfig] = None) -> dict:
    """Hypernetwork outputs per episode against the shared parameter count.

    ``per_episode`` counts the task-level set plus one query's set, the
    quantity each prediction depends on.
    """
    counts = net.adaptive_counts()
    enc = counts["encoder"] if config is None or config.encoder_modulation.active else 0
    pred = counts["predictor_per_query"] if config is None or config.predictor_modulation.active else 0
    total = params.count()
    per_episode = enc + pred
    return {
        "encoder": enc,
        "predictor_per_query": pred,
        "per_episode": per_episode,
        "total_params": total,
        "ratio": per_episode / total,
    }


def dump_embeddings(net: PaciaNet, params: ModelParams, episode: Episode, stage: str, config: TrainConfig) -> List[dict]:
    """Embedding rows for external plotting.

    ``pre``: encoder output without task adaptation; ``post_task_adapt``:
    with it; ``post_refine``: every query's refined relation set.
    """
    if stage not in ("pre", "post_task_adapt", "post_refine"):
        raise ValueError(f"unknown stage {stage!r}")
    enc_mod = OFF if stage == "pre" else config.encoder_modulation
    fwd = net.forward_episode(params, episode, encoder_mod=enc_mod, predictor_mod=config.predictor_modulation, mode="test")
    rows = []
    if stage in ("pre", "post_task_adapt"):
        r = fwd.encoded.r.data
        n_s = fwd.n_support
        for i, g in enumerate(list(episode.support) + list(episode.query)):
            role, idx = ("support", i) if i < n_s else ("query", i - n_s)
            rows.append({"id": f"{role}{idx}", "role": role, "label": g.label, "vector": r[i].tolist()})
        return rows
    final = fwd.refined.final.data
    for q, qg in enumerate(episode.query):
        rows.append({"id": f"q{q}/query", "role": "query", "label": qg.label, "vector": final[q, 0].tolist()})
        for s, sg in enumerate(episode.support):
            rows.append({"id": f"q{q}/s{s}", "role": "support", "label": sg.label, "vector": final[q, s + 1].tolist()})
    return rows


def write_embeddings_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        dim = len(rows[0]["vector"]) if rows else 0
        w.writerow(["id", "role", "label"] + [f"x{i}" for i in range(dim)])
        for r in rows:
            w.writerow([r["id"], r["role"], r["label"]] + [repr(float(v)) for v in r["vector"]])


def save_checkpoint(path, params: ModelParams, config: TrainConfig) -> None:
    Path(path).write_text(params.to_json({"config": config.to_dict(), "seed": config.seed}), encoding="utf-8")


def load_checkpoint(path) -> Tuple[ModelParams, TrainConfig]:
    params, meta = ModelParams.from_json(Path(path).read_text(encoding="utf-8"))
    return params, TrainConfig.from_dict(meta["config"])


# ---------------------------------------------------------------------------
# ablations


@dataclass(frozen=True)
class Variant:
    name: str
    config: TrainConfig
    adapt_at_test: bool = False


def ablation_variants(base: TrainConfig) -> List[Variant]:
    """fine-tuning, w/o T, w/o Q, then the 3 x 3 encoder/predictor modulation grid."""
    out = [
        Variant("fine-tuning", base.replace(task_adapt=False, query_adapt=False), adapt_at_test=True),
        Variant("w/o T", base.replace(task_adapt=False, query_adapt=True)),
        Variant("w/o Q", base.replace(task_adapt=True, query_adapt=False)),
    ]
    for em in ("N", "D", "ND"):
        for pm in ("N", "D", "ND"):
            out.append(Variant(f"enc={em} pred={pm}", base.replace(task_adapt=True, query_adapt=True, encoder_mode=em, predictor_mode=pm)))
    return out


def run_ablation(
    train_tasks: Sequence[Task],
    test_tasks: Sequence[Task],
    base: TrainConfig,
    n_eval_episodes: int,
    metric: str = "roc_auc",
    on_variant: Optional[Callable[[dict], None]] = None,
) -> List[dict]:
    rows = []
    for v in ablation_variants(base):
        net = PaciaNet(v.config.model)
        res = train(train_tasks, v.config)
        rep = evaluate(net, res.params, test_tasks, v.config, n_eval_episodes, metric, seed=base.seed, adapt=v.adapt_at_test)
        row = {"variant": v.name, "metric": rep.metric, "mean": rep.mean, "final_loss": res.log[-1]["loss"] if res.log else math.nan}
        rows.append(row)
        if on_variant is not None:
            on_variant(row)
    return rows


def dumps_report(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)
