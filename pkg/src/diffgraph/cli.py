"""Command-line driver: ``diffgraph <command> ...``.

Exit codes: 0 success, 1 domain error, 2 usage error.

Every option can also come from ``--config file.json`` (a flat object keyed
by option name, dashes or underscores). Explicit flags win over the config
file, which wins over built-in defaults.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from . import persistence as pio
from .embeddings import embedder_from_env
from .errors import DiffGraphError, IoFailureError
from .graph_store import UniversalGraph, load_graph, save_graph
from .llm import llm_from_env
from .pipeline import ABLATIONS, GRAPH_ABLATIONS, Pipeline
from .planner import VgaeDims, VgaeParams, load_params, plan
from .registration import add_expert
from .selection import DEFAULT_K1, DEFAULT_K2
from .testbed import (
    SPEC_FILE,
    Testbed,
    TestbedScorer,
    TestbedSpec,
    group_softmax,
    read_prompt_file,
    write_prompt_file,
)
from .trainer import AdamWState, TrainConfig, report_json, save_checkpoint, train
from .workflows import (
    DEFAULT_NR,
    build_graph,
    heldout_prompts,
    read_expert_dir,
    read_expert_file,
    reference_candidates,
    run_scaling,
    training_prompts,
    write_expert_dir,
)

DEFAULTS: dict[str, Any] = {
    "nr": DEFAULT_NR, "k1": DEFAULT_K1, "k2": DEFAULT_K2,
    "d_node": 32, "d_h1": 64, "d_h": 32, "d_ffn": 64,
    "epochs": TrainConfig.epochs, "steps": TrainConfig.max_steps,
    "batch": TrainConfig.batch_size, "lr": TrainConfig.lr, "seed": 0,
    "n": 200, "split": "heldout", "epoch": 2023,
}


class UsageError(Exception):
    """Bad flags or config; exit code 2."""


# -- option resolution --------------------------------------------------------

def _load_config(path: str | None) -> dict[str, Any]:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config must be a JSON object")
    return {k.replace("-", "_"): v for k, v in data.items()}


class Options:
    """Flag value if given, else config value, else default."""

    def __init__(self, args: argparse.Namespace, config: dict[str, Any]):
        self._args = args
        self._config = config

    def get(self, name: str, default: Any = None) -> Any:
        value = getattr(self._args, name, None)
        if value is not None:
            return value
        if name in self._config:
            return self._config[name]
        return DEFAULTS.get(name, default)

    def require(self, name: str) -> Any:
        value = self.get(name)
        if value is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")
        return value


# -- shared helpers -----------------------------------------------------------

def _emit(obj: Any) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _load_testbed(path: str | os.PathLike) -> Testbed:
    return Testbed(TestbedSpec.load(path))


def _bundle_testbed(graph_dir: str | os.PathLike) -> Testbed:
    path = Path(graph_dir) / SPEC_FILE
    if not path.exists():
        raise IoFailureError(f"{graph_dir} has no {SPEC_FILE}; rebuild it with build-graph")
    return _load_testbed(path)


def _save_bundle(graph: UniversalGraph, testbed: Testbed, out: str | os.PathLike) -> None:
    save_graph(graph, out)
    pio.write_bytes(Path(out) / SPEC_FILE, testbed.spec.to_json().encode("utf-8"))


def _dims(opts: Options, d_node: int) -> VgaeDims:
    return VgaeDims(d_node=d_node, d_h1=int(opts.get("d_h1")), d_h=int(opts.get("d_h")),
                    d_ffn=int(opts.get("d_ffn")))


def _pipeline(opts: Options, graph: UniversalGraph, testbed: Testbed,
              ablation: str | None = None) -> Pipeline:
    return Pipeline(graph, testbed, llm_from_env(), embedder_from_env(graph.d_node),
                    int(opts.get("k1")), int(opts.get("k2")), ablation, int(opts.get("seed")))


def _prompts(opts: Options, testbed: Testbed, fallback) -> list:
    path = opts.get("prompts")
    if path:
        try:
            return read_prompt_file(testbed, path)
        except OSError as exc:
            raise IoFailureError(f"cannot read prompts {path}: {exc}") from exc
    return fallback()


# -- commands -----------------------------------------------------------------

def cmd_testbed_spec(opts: Options) -> dict:
    fields = dict(opts.get("testbed", {}) or {})
    fields.setdefault("seed", int(opts.get("seed")))
    try:
        spec = TestbedSpec.from_dict(fields)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad testbed fields: {exc}") from exc
    spec.save(opts.require("out"))
    return {"out": str(opts.require("out")), "spec": asdict(spec)}


def cmd_make_prompts(opts: Options) -> dict:
    testbed = _load_testbed(opts.require("testbed"))
    split, n = opts.get("split"), int(opts.get("n"))
    require = opts.get("require")
    kwargs = {"require": [int(a) for a in require]} if require else {}
    if split == "train":
        prompts = training_prompts(testbed, n, **kwargs)
    elif split == "heldout":
        prompts = heldout_prompts(testbed, n, **kwargs)
    elif split == "reference":
        prompts = reference_candidates(testbed, n)
    else:
        raise UsageError(f"unknown split {split!r}")
    write_prompt_file(opts.require("out"), prompts)
    return {"out": str(opts.require("out")), "n": len(prompts), "split": split}


def cmd_export_experts(opts: Options) -> dict:
    testbed = _load_testbed(opts.require("testbed"))
    attrs = opts.get("attributes")
    clusters = opts.get("clusters")
    sources = testbed.build_ecosystem(
        epoch_tag=int(opts.get("epoch")),
        clusters=None if clusters is None else [int(c) for c in clusters],
        attributes=None if attrs is None else [int(a) for a in attrs])
    paths = write_expert_dir(opts.require("out"), sources, testbed.spec)
    return {"out": str(opts.require("out")), "experts": [p.name for p in paths]}


def cmd_build_graph(opts: Options) -> dict:
    out = opts.require("out")
    if opts.get("experts"):
        exp_dir = Path(opts.get("experts"))
        testbed = _load_testbed(exp_dir / SPEC_FILE)
        sources = read_expert_dir(exp_dir)
    elif opts.get("testbed"):
        testbed = _load_testbed(opts.get("testbed"))
        sources = testbed.build_ecosystem()
    else:
        raise UsageError("build-graph needs --testbed or --experts")
    candidates = None
    if opts.get("ref_prompts"):
        try:
            candidates = read_prompt_file(testbed, opts.get("ref_prompts"))
        except OSError as exc:
            raise IoFailureError(f"cannot read {opts.get('ref_prompts')}: {exc}") from exc
    d_node = int(opts.get("d_node"))
    built = build_graph(testbed, sources, n_ref=int(opts.get("nr")), llm=llm_from_env(),
                        embedder=embedder_from_env(d_node), d_node=d_node, candidates=candidates)
    _save_bundle(built.graph, testbed, out)
    return {"out": str(out), "experts": len(built.graph), "edges": built.graph.n_edges(),
            "ref_prompts": built.graph.n_ref, "scorer_calls": built.scorer.generate_calls,
            "_seconds": sum(r.wall_time for r in built.reports)}


def cmd_add_expert(opts: Options) -> dict:
    graph_dir = opts.require("graph")
    testbed = _bundle_testbed(graph_dir)
    graph = load_graph(graph_dir)
    scorer = TestbedScorer(testbed)
    added = []
    for path in opts.require("expert"):
        source = read_expert_file(path)
        before = scorer.generate_calls
        report = add_expert(graph, source, llm_from_env(), embedder_from_env(graph.d_node), scorer)
        added.append({"id": source.id, "scorer_calls": scorer.generate_calls - before,
                      "_seconds": report.wall_time})
    _save_bundle(graph, testbed, graph_dir)
    return {"graph": str(graph_dir), "added": added, "experts": len(graph),
            "edges": graph.n_edges()}


def cmd_remove_expert(opts: Options) -> dict:
    graph_dir = opts.require("graph")
    testbed = _bundle_testbed(graph_dir)
    graph = load_graph(graph_dir)
    removed = [graph.remove_expert(i).id for i in opts.require("id")]
    _save_bundle(graph, testbed, graph_dir)
    return {"graph": str(graph_dir), "removed": removed, "experts": len(graph),
            "edges": graph.n_edges()}


def _train_config(opts: Options) -> TrainConfig:
    base = TrainConfig()
    fields = {k: opts.get(k) for k in ("baseline", "kl_weight", "entropy_weight",
                                        "weight_decay", "rollouts_per_prompt")
              if opts.get(k) is not None}
    steps = opts.get("steps")
    return replace(base, batch_size=int(opts.get("batch")), epochs=int(opts.get("epochs")),
                   max_steps=None if steps in (None, 0) else int(steps),
                   lr=float(opts.get("lr")), seed=int(opts.get("seed")), **fields)


def cmd_train(opts: Options) -> dict:
    graph_dir = opts.require("graph")
    out = opts.require("out")
    testbed = _bundle_testbed(graph_dir)
    graph = load_graph(graph_dir)
    ablation = opts.get("ablate")
    if ablation is not None and ablation not in GRAPH_ABLATIONS:
        raise UsageError(f"train --ablate must be one of {GRAPH_ABLATIONS}")
    cfg = _train_config(opts)
    pipeline = _pipeline(opts, graph, testbed, ablation)
    prompts = _prompts(opts, testbed, lambda: training_prompts(testbed))
    params = VgaeParams.initialize(_dims(opts, graph.d_node), cfg.seed)
    log_path = opts.get("log") or f"{out}.log.jsonl"
    lines: list[str] = []
    t0 = time.perf_counter()
    params, state = train(params, pipeline, prompts, cfg,
                          log=lambda rep: lines.append(report_json(rep, cfg.lr)))
    save_checkpoint(out, params, state, cfg)
    pio.write_bytes(log_path, "".join(line + "\n" for line in lines).encode("utf-8"))
    last = json.loads(lines[-1]) if lines else {}
    return {"out": str(out), "log": str(log_path), "steps": state.step,
            "final_mean_reward": last.get("mean_reward"),
            "_seconds": time.perf_counter() - t0}


def _rounded(xs) -> list[float]:
    return [round(float(x), 12) for x in xs]


def cmd_infer(opts: Options) -> dict:
    graph_dir = opts.require("graph")
    testbed = _bundle_testbed(graph_dir)
    graph = load_graph(graph_dir)
    params = load_params(opts.require("vgae"))
    pipeline = _pipeline(opts, graph, testbed)
    try:
        prompt = testbed.parse_prompt(opts.require("prompt"))
    except ValueError as exc:
        raise DiffGraphError(str(exc)) from exc
    prep = pipeline.prepare(prompt)
    mp = plan(prep.subgraph, params, "infer")
    u, metrics = pipeline.reward(prep, mp.w)
    shares = group_softmax(mp.w, prep.subgraph.n_ckpt)[0]
    return {"prompt": prompt.text, "ckpt": prep.subgraph.ckpt_ids,
            "peft": prep.subgraph.peft_ids, "w": _rounded(mp.w), "shares": _rounded(shares),
            "reward": round(u, 12), "metrics": _rounded(metrics)}


def cmd_eval(opts: Options) -> dict:
    graph_dir = opts.require("graph")
    testbed = _bundle_testbed(graph_dir)
    graph = load_graph(graph_dir)
    ablation = opts.get("ablate")
    if ablation is not None and ablation not in ABLATIONS:
        raise UsageError(f"--ablate must be one of {ABLATIONS}")
    vgae = opts.get("vgae")
    if vgae is None and ablation not in ("equal", "random"):
        raise UsageError("--vgae is required unless --ablate is equal or random")
    params = load_params(vgae) if vgae else None
    pipeline = _pipeline(opts, graph, testbed, ablation)
    prompts = _prompts(opts, testbed, lambda: heldout_prompts(testbed))
    report = pipeline.evaluate(params, prompts)
    out: dict[str, Any] = {"n_prompts": len(prompts), "ablation": ablation,
                           "mean_reward": round(report.mean_reward, 12),
                           "metric_means": _rounded(report.metric_means)}
    if opts.get("oracle"):
        oracle_pipe = pipeline.with_ablation(None)
        rows = []
        for prompt, res in zip(prompts, report.results):
            best = oracle_pipe.oracle(prompt)[1]
            rows.append({"prompt_id": res.prompt_id, "reward": round(res.reward, 12),
                         "oracle": round(best, 12),
                         "ratio": round(res.reward / best, 12) if best > 0 else 0.0})
        ratios = np.array([r["ratio"] for r in rows])
        out["oracle_mean"] = round(float(np.mean([r["oracle"] for r in rows])), 12) if rows else 0.0
        out["ratio_mean"] = round(float(ratios.mean()), 12) if rows else 0.0
        out["frac_ratio_ge_0.9"] = round(float(np.mean(ratios >= 0.9)), 12) if rows else 0.0
        out["per_prompt"] = rows
    return out


def cmd_scaling(opts: Options) -> dict:
    testbed = _load_testbed(opts.require("testbed"))
    cfg = _train_config(opts)
    report = run_scaling(testbed, cfg)
    out_dir = Path(opts.require("out"))
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailureError(f"cannot create {out_dir}: {exc}") from exc
    data = report.to_dict()
    pio.write_bytes(out_dir / "scaling.json",
                    (json.dumps(data, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return data


COMMANDS = {
    "testbed-spec": cmd_testbed_spec, "make-prompts": cmd_make_prompts,
    "export-experts": cmd_export_experts, "build-graph": cmd_build_graph,
    "add-expert": cmd_add_expert, "remove-expert": cmd_remove_expert,
    "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "scaling": cmd_scaling,
}


# -- human-readable output ----------------------------------------------------

def _print_human(command: str, result: dict, verbose: bool) -> None:
    secs = result.get("_seconds")
    if command == "build-graph":
        print(f"built {result['out']}: {result['experts']} experts, {result['edges']} edges, "
              f"{result['ref_prompts']} reference prompts in {secs:.3f}s")
    elif command == "add-expert":
        for a in result["added"]:
            line = f"added {a['id']}: calibrated in {a['_seconds']:.4f}s"
            if verbose:
                line += f" ({a['scorer_calls']} scorer calls)"
            print(line)
        print(f"graph now has {result['experts']} experts, {result['edges']} edges")
    elif command == "remove-expert":
        print(f"removed {', '.join(result['removed'])}; "
              f"graph now has {result['experts']} experts, {result['edges']} edges")
    elif command == "train":
        print(f"trained {result['steps']} steps in {secs:.1f}s; "
              f"last batch mean reward {result['final_mean_reward']}")
        print(f"checkpoint {result['out']}, log {result['log']}")
    elif command == "infer":
        print(f"prompt:  {result['prompt']}")
        print(f"ckpt:    {', '.join(result['ckpt'])}")
        print(f"peft:    {', '.join(result['peft']) or '-'}")
        print("w:       " + " ".join(f"{x:.4f}" for x in result["w"]))
        print("shares:  " + " ".join(f"{x:.4f}" for x in result["shares"]))
        print(f"reward:  {result['reward']:.6f}")
        print("metrics: " + " ".join(f"{x:.4f}" for x in result["metrics"]))
    elif command == "eval":
        print(f"{result['n_prompts']} prompts, ablation={result['ablation'] or 'none'}")
        print(f"mean reward {result['mean_reward']:.6f}")
        print("metric means " + " ".join(f"{x:.4f}" for x in result["metric_means"]))
        if "oracle_mean" in result:
            print(f"oracle mean {result['oracle_mean']:.6f}, mean ratio {result['ratio_mean']:.4f}, "
                  f"ratio>=0.9 on {100 * result['frac_ratio_ge_0.9']:.1f}% of prompts")
    elif command == "scaling":
        print(f"{'setting':<16}{'reward':>10}")
        print(f"{'2023':<16}{result['reward_old']:>10.6f}")
        print(f"{'2023->2025':<16}{result['reward_inserted']:>10.6f}")
        print(f"{'2025 retrained':<16}{result['reward_retrained']:>10.6f}")
        print(f"ordering holds: {result['ordering_holds']}; retained "
              f"{100 * result['retained_fraction']:.1f}% of retrained reward; "
              f"scorer calls per insert {sorted(set(result['scorer_calls']))}; "
              f"existing features unchanged: {result['features_unchanged']}")
    else:
        _emit(_public(result))


def _public(result: Any) -> Any:
    """Drop timing fields (prefixed ``_``) so JSON output is reproducible."""
    if isinstance(result, dict):
        return {k: _public(v) for k, v in result.items() if not k.startswith("_")}
    if isinstance(result, list):
        return [_public(v) for v in result]
    return result


# -- argument parsing ---------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with option values")
    common.add_argument("--seed", type=int)
    common.add_argument("--json", action="store_true", default=None,
                        help="machine-readable output without timings")
    common.add_argument("--verbose", action="store_true", default=None)

    ap = _Parser(prog="diffgraph", description="Expert-graph model merging on a synthetic testbed.")
    ap.add_argument("--version", action="version", version=f"diffgraph {__version__}")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("testbed-spec", parents=[common], help="write a testbed.json")
    p.add_argument("--out")

    p = sub.add_parser("make-prompts", parents=[common], help="write a prompt corpus")
    p.add_argument("--testbed")
    p.add_argument("--split", choices=("train", "heldout", "reference"))
    p.add_argument("--n", type=int)
    p.add_argument("--require", type=int, nargs="+", help="attribute indices, one must appear")
    p.add_argument("--out")

    p = sub.add_parser("export-experts", parents=[common], help="write testbed experts as files")
    p.add_argument("--testbed")
    p.add_argument("--epoch", type=int)
    p.add_argument("--clusters", type=int, nargs="*")
    p.add_argument("--attributes", type=int, nargs="*")
    p.add_argument("--out")

    p = sub.add_parser("build-graph", parents=[common], help="register and calibrate experts")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--testbed")
    src.add_argument("--experts")
    p.add_argument("--ref-prompts", dest="ref_prompts")
    p.add_argument("--nr", type=int)
    p.add_argument("--d-node", dest="d_node", type=int)
    p.add_argument("--out")

    p = sub.add_parser("add-expert", parents=[common], help="insert experts training-free")
    p.add_argument("--graph")
    p.add_argument("--expert", nargs="+")

    p = sub.add_parser("remove-expert", parents=[common], help="remove experts by id")
    p.add_argument("--graph")
    p.add_argument("--id", nargs="+")

    def dims_and_selection(p):
        p.add_argument("--k1", type=int)
        p.add_argument("--k2", type=int)

    p = sub.add_parser("train", parents=[common], help="train the merging planner")
    p.add_argument("--graph")
    p.add_argument("--prompts")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int, help="step cap (0 = no cap)")
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--ablate", help="train under a graph ablation")
    p.add_argument("--log")
    p.add_argument("--out")
    dims_and_selection(p)

    p = sub.add_parser("infer", parents=[common], help="plan and merge for one prompt")
    p.add_argument("--graph")
    p.add_argument("--vgae")
    p.add_argument("--prompt")
    dims_and_selection(p)

    p = sub.add_parser("eval", parents=[common], help="evaluate on a prompt corpus")
    p.add_argument("--graph")
    p.add_argument("--vgae")
    p.add_argument("--prompts")
    p.add_argument("--oracle", action="store_true", default=None)
    p.add_argument("--ablate")
    dims_and_selection(p)

    p = sub.add_parser("scaling", parents=[common], help="2023 vs 2023->2025 vs retrained")
    p.add_argument("--testbed")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("no command given (try --help)")
        opts = Options(args, _load_config(args.config))
        result = COMMANDS[args.command](opts)
    except UsageError as exc:
        print(f"diffgraph: usage error: {exc}", file=sys.stderr)
        return 2
    except (DiffGraphError, ValueError, OSError) as exc:
        print(f"diffgraph: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    if opts.get("json"):
        _emit(_public(result))
    else:
        _print_human(args.command, result, bool(opts.get("verbose")))
    return 0


if __name__ == "__main__":
    sys.exit(main())
