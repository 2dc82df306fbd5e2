"""Command-line entry point.

Configuration precedence, lowest to highest: built-in defaults, the JSON file
given by ``--config``, then individual flags. The JSON file holds any
:class:`TrainConfig` field at top level, ``"model"`` as either a preset name
(``"paper"`` or ``"desk"``) or a dict of :class:`ModelConfig` fields, plus the
run keys ``data``, ``metric``, ``ablation`` and ``eval_episodes_per_task``.

``data`` is either ``{"train": PATH, "test": PATH, "valid": PATH}`` (task
files) or ``{"synthetic": {"seed", "n_tasks", "graphs_per_task", "n_train",
"n_valid"}}``; it defaults to the synthetic benchmark.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .config import ABLATION_PRESETS, ConfigError, ModelConfig, TrainConfig, desk_model
from .diagnostics import gradcheck_suite
from .graphdata import SyntheticSpec, Task, generate_synthetic_tasks, load_tasks, sample_episode, save_tasks
from .layers import CHECKPOINT_FORMAT
from .meta import (
    adaptive_parameter_report,
    dump_embeddings,
    evaluate,
    load_checkpoint,
    maml_train,
    network_for,
    run_ablation,
    save_checkpoint,
    train,
    write_embeddings_csv,
)
from .model import PaciaNet

log = logging.getLogger("pacia")

DEFAULT_SYNTHETIC = {"seed": 7, "n_tasks": 50, "graphs_per_task": 60, "n_train": 40, "n_valid": 0}
RUN_KEYS = ("data", "metric", "ablation", "eval_episodes_per_task")


class CliError(Exception):
    def __init__(self, kind: str, message: str, problems: Sequence[str] = ()):
        super().__init__(message)
        self.kind, self.message, self.problems = kind, message, list(problems)


@dataclass
class RunConfig:
    train: TrainConfig
    data: dict = field(default_factory=lambda: {"synthetic": dict(DEFAULT_SYNTHETIC)})
    metric: str = "roc_auc"
    ablation: str = "none"
    eval_episodes_per_task: int = 20
    out: Optional[Path] = None
    ckpt: Optional[Path] = None

    def to_dict(self) -> dict:
        return {
            "train": self.train.to_dict(),
            "data": self.data,
            "metric": self.metric,
            "ablation": self.ablation,
            "eval_episodes_per_task": self.eval_episodes_per_task,
        }


def _model_from(value) -> ModelConfig:
    if value in (None, "paper"):
        return ModelConfig()
    if value == "desk":
        return desk_model()
    if isinstance(value, dict):
        base = value.get("preset", "paper")
        fields = {k: v for k, v in value.items() if k != "preset"}
        if "adj_hidden" in fields:
            fields["adj_hidden"] = tuple(fields["adj_hidden"])
        known = {f.name for f in dataclasses.fields(ModelConfig)}
        unknown = sorted(set(fields) - known)
        if unknown:
            raise ConfigError([f"unknown model key {k!r}" for k in unknown])
        return dataclasses.replace(_model_from(base), **fields)
    raise ConfigError([f"model must be 'paper', 'desk' or an object, got {value!r}"])


def build_run_config(args: argparse.Namespace) -> RunConfig:
    raw: dict = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as err:
            raise CliError("ConfigError", f"cannot read config {args.config}: {err}") from None
        if not isinstance(raw, dict):
            raise CliError("ConfigError", "config file must hold a JSON object")
    run_raw = {k: raw.pop(k) for k in RUN_KEYS if k in raw}
    model = _model_from(getattr(args, "model", None) or raw.pop("model", None))
    raw.pop("model", None)
    tc_fields = {f.name for f in dataclasses.fields(TrainConfig)} - {"model"}
    problems = [f"unknown config key {k!r}" for k in sorted(set(raw) - tc_fields)]
    if problems:
        raise ConfigError(problems)
    tc = TrainConfig(model=model, **raw)

    overrides = {}
    for flag, key in (("seed", "seed"), ("episodes", "episodes_max"), ("query_size", "query_size"), ("lr", "lr")):
        if getattr(args, flag, None) is not None:
            overrides[key] = getattr(args, flag)
    if getattr(args, "k_shot", None) is not None:
        overrides.update(k_shot=args.k_shot, support_size=None)
    if getattr(args, "support_size", None) is not None:
        overrides.update(support_size=args.support_size, k_shot=None)
    if getattr(args, "k_shot", None) is not None and getattr(args, "support_size", None) is not None:
        raise ConfigError(["--k-shot and --support-size are mutually exclusive"])
    ablation = getattr(args, "ablation", None) or run_raw.get("ablation", "none")
    if ablation not in ABLATION_PRESETS:
        raise ConfigError([f"ablation must be one of {sorted(ABLATION_PRESETS)}"])
    overrides.update(ABLATION_PRESETS[ablation])
    if getattr(args, "encoder_mod", None):
        overrides["encoder_mode"] = args.encoder_mod
    if getattr(args, "predictor_mod", None):
        overrides["predictor_mode"] = args.predictor_mod
    tc = tc.replace(**overrides).validate()

    metric = (getattr(args, "metric", None) or run_raw.get("metric", "roc_auc")).replace("-", "_")
    if metric not in ("roc_auc", "delta_auprc"):
        raise ConfigError([f"metric must be roc-auc or delta-auprc, got {metric!r}"])
    data = run_raw.get("data") or {"synthetic": dict(DEFAULT_SYNTHETIC)}
    if ("synthetic" in data) == ("train" in data or "test" in data):
        raise ConfigError(["data must name either task files or a synthetic spec, not both"])
    for key in ("train", "valid", "test"):
        if key in data and not Path(data[key]).is_file():
            raise ConfigError([f"data file {data[key]!r} does not exist"])
    out = Path(args.out) if getattr(args, "out", None) else None
    ckpt = Path(args.ckpt) if getattr(args, "ckpt", None) else None
    return RunConfig(tc, data, metric, ablation, int(run_raw.get("eval_episodes_per_task", 20)), out, ckpt)


def load_data(rc: RunConfig) -> Dict[str, List[Task]]:
    if "synthetic" in rc.data:
        s = {**DEFAULT_SYNTHETIC, **rc.data["synthetic"]}
        tasks = generate_synthetic_tasks(s["seed"], s["n_tasks"], s["graphs_per_task"], SyntheticSpec(d_in=rc.train.model.d_in))
        n_tr, n_va = s["n_train"], s["n_valid"]
        return {"train": tasks[:n_tr], "valid": tasks[n_tr : n_tr + n_va], "test": tasks[n_tr + n_va :]}
    return {k: load_tasks(rc.data[k]) if k in rc.data else [] for k in ("train", "valid", "test")}


def _out_dir(rc: RunConfig, default: str) -> Path:
    out = rc.out or Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, rc: RunConfig, extra: Optional[dict] = None) -> None:
    manifest = {
        "command": command,
        "package_version": __version__,
        "checkpoint_format": CHECKPOINT_FORMAT,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "seed": rc.train.seed,
        "config": rc.to_dict(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")


def write_log_csv(path: Path, rows: Sequence[dict]) -> None:
    cols = ["episode", "task_id", "loss", "metric"]
    for r in rows:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in cols})


def _require(tasks: List[Task], what: str) -> List[Task]:
    if not tasks:
        raise CliError("DataError", f"no {what} tasks available")
    return tasks


def _load_ckpt(rc: RunConfig):
    if rc.ckpt is None:
        raise CliError("UsageError", "--ckpt is required")
    if not rc.ckpt.is_file():
        raise CliError("FileNotFound", f"checkpoint {rc.ckpt} does not exist")
    params, tc = load_checkpoint(rc.ckpt)
    return params, tc


def _report_eval(out: Path, rep, name: str = "eval.json") -> None:
    (out / name).write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    print(f"{rep.metric} mean {rep.mean:.6f} over {len(rep.per_task)} tasks ({rep.skipped} episodes skipped)")


def cmd_train(args, maml: bool = False) -> int:
    rc = build_run_config(args)
    tc = rc.train
    if maml:
        tc = tc.replace(task_adapt=False, query_adapt=False)
        rc.train = tc
    data = load_data(rc)
    out = _out_dir(rc, "runs/maml" if maml else "runs/train")
    rows: List[dict] = []
    if maml:
        res = maml_train(_require(data["train"], "training"), tc, on_episode=rows.append)
    else:
        res = train(_require(data["train"], "training"), tc, valid_tasks=data["valid"] or None, on_episode=rows.append)
    ckpt = rc.ckpt or out / "checkpoint.json"
    save_checkpoint(ckpt, res.params, tc)
    write_log_csv(out / "train_log.csv", rows)
    extra = {"checkpoint": str(ckpt), "best_episode": res.best_episode}
    if data["test"]:
        net = network_for(res.params, tc.model)
        rep = evaluate(net, res.params, data["test"], tc, rc.eval_episodes_per_task, rc.metric, seed=tc.seed, adapt=maml)
        _report_eval(out, rep)
        extra["eval_mean"] = rep.mean
    write_manifest(out, "maml-train" if maml else "train", rc, extra)
    print(f"checkpoint written to {ckpt}")
    return 0


def cmd_eval(args, maml: bool = False) -> int:
    rc = build_run_config(args)
    params, tc = _load_ckpt(rc)
    tc = tc.replace(seed=rc.train.seed if args.seed is not None else tc.seed)
    data = load_data(rc)
    out = _out_dir(rc, "runs/eval")
    rep = evaluate(network_for(params, tc.model), params, _require(data["test"], "test"), tc, rc.eval_episodes_per_task, rc.metric, seed=tc.seed, adapt=maml)
    _report_eval(out, rep)
    write_manifest(out, "maml-eval" if maml else "eval", rc, {"checkpoint": str(rc.ckpt), "eval_mean": rep.mean})
    return 0


def cmd_ablate(args) -> int:
    rc = build_run_config(args)
    data = load_data(rc)
    out = _out_dir(rc, "runs/ablate")
    rows = run_ablation(
        _require(data["train"], "training"),
        _require(data["test"], "test"),
        rc.train,
        rc.eval_episodes_per_task,
        rc.metric,
        on_variant=lambda r: print(f"{r['variant']:<18} {r['mean']:.4f}", flush=True),
    )
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["variant", "metric", "mean", "final_loss"])
        w.writeheader()
        w.writerows(rows)
    write_manifest(out, "ablate", rc, {"rows": len(rows)})
    return 0


def cmd_gen_data(args) -> int:
    if args.out is None:
        raise CliError("UsageError", "--out FILE is required")
    spec = SyntheticSpec(d_in=args.d_in)
    tasks = generate_synthetic_tasks(args.seed if args.seed is not None else 0, args.tasks, args.graphs_per_task, spec)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_tasks(tasks, args.out)
    print(f"wrote {len(tasks)} tasks to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    ok = True
    for name, rep in gradcheck_suite(args.seed if args.seed is not None else 0):
        print(f"{'PASS' if rep.passed else 'FAIL'} {name}: max rel err {rep.worst:.3e} (tol {rep.tol:g}, {rep.entries_checked} entries)")
        ok &= rep.passed
    return 0 if ok else 1


def cmd_dump_embeddings(args) -> int:
    rc = build_run_config(args)
    if rc.ckpt is not None:
        params, tc = _load_ckpt(rc)
    else:
        tc = rc.train
        params = PaciaNet(tc.model).init_params(tc.seed)
    data = load_data(rc)
    tasks = data["test"] or data["train"]
    task = _require(tasks, "any")[min(args.task_index, len(tasks) - 1)]
    episode = sample_episode(task, np.random.default_rng(tc.seed), k_shot=tc.k_shot, support_size=tc.support_size, query_size=tc.query_size)
    out = _out_dir(rc, "runs/embeddings")
    stages = ["pre", "post_task_adapt", "post_refine"] if args.stage == "all" else [args.stage]
    for stage in stages:
        rows = dump_embeddings(PaciaNet(tc.model), params, episode, stage, tc)
        path = out / f"embeddings_{stage}.csv"
        write_embeddings_csv(rows, path)
        print(f"{stage}: {len(rows)} rows -> {path}")
    write_manifest(out, "dump-embeddings", rc, {"task_id": task.task_id, "stages": stages})
    return 0


def cmd_params(args) -> int:
    rc = build_run_config(args)
    net = PaciaNet(rc.train.model)
    print(json.dumps(adaptive_parameter_report(net, net.init_params(rc.train.seed), rc.train), sort_keys=True))
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--episodes", type=int, help="maximum training episodes")
    p.add_argument("--k-shot", type=int)
    p.add_argument("--support-size", type=int)
    p.add_argument("--query-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--ablation", choices=sorted(ABLATION_PRESETS))
    p.add_argument("--encoder-mod", choices=["N", "D", "ND", "off"])
    p.add_argument("--predictor-mod", choices=["N", "D", "ND", "off"])
    p.add_argument("--metric", choices=["roc-auc", "delta-auprc"])
    p.add_argument("--model", choices=["paper", "desk"], help="architecture preset (default paper)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--ckpt", help="checkpoint path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pacia", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    table = {
        "train": ("meta-train and checkpoint", cmd_train),
        "eval": ("evaluate a checkpoint", cmd_eval),
        "ablate": ("train and evaluate the ablation grid", cmd_ablate),
        "dump-embeddings": ("export embeddings at one or all stages", cmd_dump_embeddings),
        "maml-train": ("first-order MAML baseline training", lambda a: cmd_train(a, maml=True)),
        "maml-eval": ("evaluate a checkpoint with test-time MAML adaptation", lambda a: cmd_eval(a, maml=True)),
        "params": ("report adaptive vs shared parameter counts", cmd_params),
    }
    for name, (help_text, fn) in table.items():
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name == "dump-embeddings":
            p.add_argument("--stage", choices=["pre", "post_task_adapt", "post_refine", "all"], default="all")
            p.add_argument("--task-index", type=int, default=0)
        p.set_defaults(func=fn)
    g = sub.add_parser("gen-data", help="write synthetic tasks as JSON lines")
    g.add_argument("--seed", type=int)
    g.add_argument("--tasks", type=int, default=50)
    g.add_argument("--graphs-per-task", type=int, default=60)
    g.add_argument("--d-in", type=int, default=8)
    g.add_argument("--out", help="output file")
    g.set_defaults(func=cmd_gen_data)
    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_gradcheck)
    return parser


def _error_line(kind: str, message: str, problems: Sequence[str] = ()) -> str:
    return json.dumps({"error": kind, "message": message, "problems": list(problems)})


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as err:
        print(_error_line(err.kind, err.message, err.problems), file=sys.stderr)
        return 2 if err.kind in ("ConfigError", "UsageError") else 1
    except ConfigError as err:
        print(_error_line("ConfigError", str(err), err.problems), file=sys.stderr)
        return 2
    except (ValueError, OSError, FloatingPointError) as err:
        print(_error_line(type(err).__name__, str(err)), file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
