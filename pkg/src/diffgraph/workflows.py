"""Standard testbed workflows shared by the CLI, benchmarks and acceptance tests."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import persistence as pio
from .embeddings import Embedder, HashEmbedder
from .errors import IoFailureError
from .graph_store import UniversalGraph
from .llm import LlmClient, StubLlm
from .merger import decode_payload, encode_payload
from .pipeline import Pipeline
from .planner import VgaeDims, VgaeParams
from .registration import CalibrationReport, add_expert, select_reference_prompts
from .testbed import SPEC_FILE, ExpertSource, SyntheticPrompt, Testbed, TestbedScorer, TestbedSpec
from .trainer import TrainConfig, train

# instance ranges keep reference, training and held-out prompts disjoint
REF_FIRST = 0
TRAIN_FIRST = 100_000
HELDOUT_FIRST = 200_000
SCALING_FIRST = 300_000

DEFAULT_NR = 16
DEFAULT_CANDIDATES = 64


@dataclass
class BuiltGraph:
    graph: UniversalGraph
    scorer: TestbedScorer
    reports: list[CalibrationReport]


def reference_candidates(testbed: Testbed, n: int = DEFAULT_CANDIDATES) -> list[SyntheticPrompt]:
    return testbed.sample_prompts(n, REF_FIRST, max_attrs=1)


def build_graph(testbed: Testbed, sources: Sequence[ExpertSource], n_ref: int = DEFAULT_NR,
                n_candidates: int = DEFAULT_CANDIDATES, llm: LlmClient | None = None,
                embedder: Embedder | None = None, d_node: int = 32,
                candidates: Sequence[SyntheticPrompt] | None = None) -> BuiltGraph:
    llm = llm or StubLlm()
    embedder = embedder or HashEmbedder(d_node)
    if candidates is None:
        candidates = reference_candidates(testbed, n_candidates)
    refs = select_reference_prompts([(p.id, p.text) for p in candidates], n_ref, embedder)
    scorer = TestbedScorer(testbed, candidates)
    graph = UniversalGraph(refs, embedder.d_node)
    reports = [add_expert(graph, src, llm, embedder, scorer) for src in sources]
    return BuiltGraph(graph, scorer, reports)


def training_prompts(testbed: Testbed, n: int = 400, **kwargs) -> list[SyntheticPrompt]:
    return testbed.sample_prompts(n, TRAIN_FIRST, **kwargs)


def heldout_prompts(testbed: Testbed, n: int = 200, **kwargs) -> list[SyntheticPrompt]:
    return testbed.sample_prompts(n, HELDOUT_FIRST, **kwargs)


# -- expert files -------------------------------------------------------------
#
# One expert per file: a JSON header line {id, kind, homepage_text,
# registered_at} followed by the payload record (its own header + body).

EXPERT_SUFFIX = ".expert"


def encode_expert(source: ExpertSource) -> bytes:
    head = pio.dump_header({"id": source.id, "kind": source.kind,
                            "homepage_text": source.homepage_text,
                            "registered_at": int(source.registered_at)})
    return head + encode_payload(source.payload)


def decode_expert(blob: bytes, path: str | os.PathLike = "<bytes>") -> ExpertSource:
    meta, rest = pio.split_header(blob, path)
    for key in ("id", "kind", "homepage_text"):
        if key not in meta:
            raise IoFailureError(f"{path}: expert header lacks {key!r}")
    payload = decode_payload(rest, path)
    if payload.kind != meta["kind"]:
        raise IoFailureError(f"{path}: header kind {meta['kind']} but payload is {payload.kind}")
    return ExpertSource(meta["id"], meta["kind"], meta["homepage_text"], payload,
                        int(meta.get("registered_at", 0)))


def write_expert_file(path: str | os.PathLike, source: ExpertSource) -> None:
    pio.write_bytes(path, encode_expert(source))


def read_expert_file(path: str | os.PathLike) -> ExpertSource:
    return decode_expert(pio.read_bytes(path), path)


def write_expert_dir(directory: str | os.PathLike, sources: Sequence[ExpertSource],
                     spec: TestbedSpec) -> list[Path]:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailureError(f"cannot create {directory}: {exc}") from exc
    pio.write_bytes(directory / SPEC_FILE, spec.to_json().encode("utf-8"))
    paths = []
    for i, src in enumerate(sources):
        path = directory / f"{i:04d}-{src.id}{EXPERT_SUFFIX}"
        write_expert_file(path, src)
        paths.append(path)
    return paths


def read_expert_dir(directory: str | os.PathLike) -> list[ExpertSource]:
    directory = Path(directory)
    if not directory.is_dir():
        raise IoFailureError(f"{directory} is not a directory")
    return [read_expert_file(p) for p in sorted(directory.glob(f"*{EXPERT_SUFFIX}"))]


# -- scaling protocol ---------------------------------------------------------

@dataclass
class ScalingReport:
    old_attributes: list[int]
    new_attributes: list[int]
    inserted: list[str]
    scorer_calls: list[int]
    features_unchanged: bool
    reward_old: float
    reward_inserted: float
    reward_retrained: float
    n_prompts: int

    @property
    def ordering_holds(self) -> bool:
        return self.reward_old < self.reward_inserted

    @property
    def retained_fraction(self) -> float:
        return self.reward_inserted / self.reward_retrained if self.reward_retrained else 0.0

    def to_dict(self) -> dict:
        return {
            "old_attributes": self.old_attributes, "new_attributes": self.new_attributes,
            "inserted": self.inserted, "scorer_calls": self.scorer_calls,
            "features_unchanged": self.features_unchanged,
            "reward_old": round(self.reward_old, 12),
            "reward_inserted": round(self.reward_inserted, 12),
            "reward_retrained": round(self.reward_retrained, 12),
            "retained_fraction": round(self.retained_fraction, 12),
            "ordering_holds": self.ordering_holds, "n_prompts": self.n_prompts,
        }


def _feature_snapshot(graph: UniversalGraph) -> dict[str, bytes]:
    snap = {f"node:{e.id}": e.node_feature.tobytes() for e in graph.experts}
    snap.update({f"edge:{e.id}": graph.scores(e.id).tobytes()
                 for e in graph.experts if graph.is_calibrated(e.id)})
    snap.update({f"ref:{r.id}": r.node_feature.tobytes() for r in graph.ref_prompts})
    return snap


def run_scaling(testbed: Testbed, cfg: TrainConfig | None = None, n_new: int = 2,
                n_train: int = 400, n_eval: int = 200, dims: VgaeDims | None = None,
                n_ref: int = DEFAULT_NR) -> ScalingReport:
    """Era-2023 graph, then era-2025 experts inserted without retraining.

    The last ``n_new`` attributes only exist in 2025. Evaluation prompts all
    require at least one of them.
    """
    cfg = cfg or TrainConfig()
    n_attr = testbed.spec.n_attributes
    if not 0 < n_new < n_attr:
        raise ValueError("n_new must leave at least one old attribute")
    old = list(range(n_attr - n_new))
    new = list(range(n_attr - n_new, n_attr))

    built = build_graph(testbed, testbed.build_ecosystem(epoch_tag=2023, attributes=old),
                        n_ref=n_ref)
    graph = built.graph
    dims = dims or VgaeDims(d_node=graph.d_node)
    train_old = training_prompts(testbed, n_train, attributes=old)
    params_old, _ = train(VgaeParams.initialize(dims, cfg.seed), Pipeline(graph, testbed),
                          train_old, cfg)

    eval_prompts = heldout_prompts(testbed, n_eval, require=new)
    reward_old = Pipeline(graph, testbed).evaluate(params_old, eval_prompts).mean_reward

    grown = graph.copy()
    before = _feature_snapshot(grown)
    llm, embedder = StubLlm(), HashEmbedder(grown.d_node)
    inserted, calls = [], []
    for src in testbed.build_ecosystem(epoch_tag=2025, clusters=[], attributes=new):
        start = built.scorer.generate_calls
        add_expert(grown, src, llm, embedder, built.scorer)
        inserted.append(src.id)
        calls.append(built.scorer.generate_calls - start)
    after = _feature_snapshot(grown)
    unchanged = all(after.get(k) == v for k, v in before.items())
    reward_inserted = Pipeline(grown, testbed).evaluate(params_old, eval_prompts).mean_reward

    train_all = training_prompts(testbed, n_train)
    params_new, _ = train(VgaeParams.initialize(dims, cfg.seed), Pipeline(grown, testbed),
                          train_all, cfg)
    reward_retrained = Pipeline(grown, testbed).evaluate(params_new, eval_prompts).mean_reward
    return ScalingReport(old, new, inserted, calls, unchanged, reward_old, reward_inserted,
                         reward_retrained, len(eval_prompts))
