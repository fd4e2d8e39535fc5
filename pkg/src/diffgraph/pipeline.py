"""End-to-end request pipeline over the testbed, including degraded variants.

    prompt -> select experts -> activate subgraph -> plan -> merge -> generate -> score

Per-prompt selection and activation are cached: both depend only on the
prompt text and the (fixed) graph.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .embeddings import Embedder, HashEmbedder
from .graph_store import Subgraph, UniversalGraph
from .llm import LlmClient, StubLlm
from .merger import MergedModel, merge_weights
from .planner import MergePlan, VgaeParams, plan
from .selection import DEFAULT_K1, DEFAULT_K2, SelectionResult, select_experts
from .testbed import SyntheticPrompt, Testbed, group_softmax

ABLATIONS = ("equal", "random", "no-calibration", "no-registration", "no-esa",
             "random-activation", "no-filter")
# variants that change what the planner sees (and so also apply during training)
GRAPH_ABLATIONS = ("no-calibration", "no-registration", "random-activation", "no-filter")
NO_ESA_TOP = 4


@dataclass(eq=False)
class Prepared:
    prompt: SyntheticPrompt
    selection: SelectionResult
    subgraph: Subgraph

    @property
    def ckpt_payloads(self):
        return [e.payload for e in self.subgraph.selected_experts[:self.subgraph.n_ckpt]]

    @property
    def peft_payloads(self):
        return [e.payload for e in self.subgraph.selected_experts[self.subgraph.n_ckpt:]]


@dataclass
class PromptResult:
    prompt_id: str
    text: str
    ckpt: list[str]
    peft: list[str]
    w: list[float]
    reward: float
    metrics: list[float]


@dataclass
class EvalReport:
    mean_reward: float
    metric_means: list[float]
    results: list[PromptResult] = field(default_factory=list)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.results])


class Pipeline:
    def __init__(self, graph: UniversalGraph, testbed: Testbed, llm: LlmClient | None = None,
                 embedder: Embedder | None = None, k1: int = DEFAULT_K1, k2: int = DEFAULT_K2,
                 ablation: str | None = None, seed: int = 0):
        if ablation is not None and ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {ablation!r}; choose from {ABLATIONS}")
        self.graph = graph
        self.testbed = testbed
        self.llm = llm or StubLlm()
        self.embedder = embedder or HashEmbedder(graph.d_node)
        self.k1, self.k2 = k1, k2
        self.ablation = ablation
        self.seed = seed
        self._cache: dict[tuple[str, int], Prepared] = {}

    def with_ablation(self, ablation: str | None) -> "Pipeline":
        return Pipeline(self.graph, self.testbed, self.llm, self.embedder, self.k1, self.k2,
                        ablation, self.seed)

    # -- preparation -------------------------------------------------------

    def _cache_key(self, prompt: SyntheticPrompt) -> tuple[str, int]:
        # random activation draws a fresh subset per prompt instance
        return (prompt.text, prompt.instance if self.ablation == "random-activation" else -1)

    def prepare(self, prompt: SyntheticPrompt) -> Prepared:
        key = self._cache_key(prompt)
        hit = self._cache.get(key)
        if hit is not None:
            return Prepared(prompt, hit.selection, hit.subgraph)
        selection = select_experts(self.graph, prompt.text, self.llm, self.embedder,
                                   self.k1, self.k2, use_filter=self.ablation != "no-filter")
        if self.ablation == "random-activation":
            selection = self._random_selection(selection, prompt)
        x_p = self.embedder.embed(prompt.text)
        sub = self.graph.activate_subgraph(selection.ids, x_p)
        if self.ablation == "no-calibration":
            sub = replace(sub, scores=np.zeros_like(sub.scores))
        elif self.ablation == "no-registration":
            sub = _zero_expert_features(sub)
        prepared = Prepared(prompt, selection, sub)
        self._cache[key] = prepared
        return prepared

    def _random_selection(self, selection: SelectionResult, prompt: SyntheticPrompt) -> SelectionResult:
        """Same number of experts as the agent picked, drawn uniformly, >= 1 CKPT."""
        rng = np.random.default_rng([self.seed, 0xAC7, prompt.instance])
        ids = [e.id for e in self.graph.experts if self.graph.is_calibrated(e.id)]
        ckpt = [e.id for e in self.graph.experts_of_kind("CKPT") if self.graph.is_calibrated(e.id)]
        n = min(len(selection.ids), len(ids))
        first = ckpt[int(rng.integers(len(ckpt)))]
        rest = [i for i in ids if i != first]
        picked = [first] + [rest[i] for i in rng.choice(len(rest), size=n - 1, replace=False)]
        kinds = {e.id: e.kind for e in self.graph.experts}
        return SelectionResult([i for i in picked if kinds[i] == "CKPT"],
                               [i for i in picked if kinds[i] == "PEFT"],
                               selection.summary, selection.attributes)

    # -- single request ----------------------------------------------------

    def merged(self, prep: Prepared, w: np.ndarray) -> MergedModel:
        n_ckpt = prep.subgraph.n_ckpt
        w = np.asarray(w, dtype=np.float64)
        return merge_weights(w[:n_ckpt], w[n_ckpt:], prep.ckpt_payloads, prep.peft_payloads)

    def reward(self, prep: Prepared, w: np.ndarray) -> tuple[float, np.ndarray]:
        y = self.testbed.generate(self.merged(prep, w), prep.prompt)
        metrics = self.testbed.score(y, prep.prompt)
        return float(metrics.mean()), metrics

    def coefficients(self, params: VgaeParams | None, prep: Prepared) -> np.ndarray:
        """Inference-time coefficients, honouring coefficient-level ablations."""
        E = prep.subgraph.n_experts
        if self.ablation == "random":
            rng = np.random.default_rng([self.seed, 0x5A4D, prep.prompt.instance])
            return rng.uniform(-2.0, 2.0, size=E)
        if self.ablation == "equal" or params is None:
            return np.full(E, 0.5)
        return plan(prep.subgraph, params, "infer").w

    def run(self, params: VgaeParams | None, prompt: SyntheticPrompt) -> PromptResult:
        if self.ablation == "no-esa":
            prep, w = self._no_esa(params, prompt)
        else:
            prep = self.prepare(prompt)
            w = self.coefficients(params, prep)
        u, metrics = self.reward(prep, w)
        return PromptResult(prompt.id, prompt.text, prep.subgraph.ckpt_ids,
                            prep.subgraph.peft_ids, [float(x) for x in w], u,
                            [float(m) for m in metrics])

    def _no_esa(self, params: VgaeParams | None, prompt: SyntheticPrompt):
        """Plan over every expert, keep the top few by coefficient (>= 1 CKPT)."""
        ids = [e.id for e in self.graph.experts if self.graph.is_calibrated(e.id)]
        x_p = self.embedder.embed(prompt.text)
        full = self.graph.activate_subgraph(ids, x_p)
        w_full = plan(full, params, "infer").w if params is not None else np.full(len(ids), 0.5)
        order = sorted(range(len(w_full)), key=lambda i: (-w_full[i], i))
        ckpt_pos = [i for i in order if i < full.n_ckpt]
        keep = [ckpt_pos[0]] + [i for i in order if i != ckpt_pos[0]][:NO_ESA_TOP - 1]
        keep_ids = [full.selected_experts[i].id for i in keep]
        sub = self.graph.activate_subgraph(keep_ids, x_p)
        pos = {e.id: i for i, e in enumerate(full.selected_experts)}
        w = np.array([w_full[pos[e.id]] for e in sub.selected_experts])
        sel = SelectionResult(sub.ckpt_ids, sub.peft_ids, prompt.text, [])
        return Prepared(prompt, sel, sub), w

    # -- batch helpers -----------------------------------------------------

    def evaluate(self, params: VgaeParams | None, prompts: Sequence[SyntheticPrompt]) -> EvalReport:
        results = [self.run(params, p) for p in prompts]
        if not results:
            return EvalReport(0.0, [0.0] * 5, [])
        metrics = np.array([r.metrics for r in results])
        return EvalReport(float(np.mean([r.reward for r in results])),
                          [float(m) for m in metrics.mean(axis=0)], results)

    def oracle(self, prompt: SyntheticPrompt, **kwargs) -> tuple[np.ndarray, float]:
        prep = self.prepare(prompt)
        return self.testbed.oracle_coefficients(prep.ckpt_payloads, prep.peft_payloads,
                                                prompt, **kwargs)

    def fast_rewards(self, prep: Prepared, W: np.ndarray) -> np.ndarray:
        """Rewards for many coefficient vectors via the fused kernel."""
        proj, target = self.testbed.projected_outputs(prep.ckpt_payloads, prep.peft_payloads,
                                                      prep.prompt)
        return self.testbed.shares_reward(group_softmax(W, prep.subgraph.n_ckpt), proj, target)


def _zero_expert_features(sub: Subgraph) -> Subgraph:
    # planner-side only: the graph keeps its unit-norm features for retrieval
    from .graph_store import ExpertRecord
    zeroed = [ExpertRecord(e.id, e.kind, e.description, e.node_feature, e.payload,
                           e.version, e.registered_at) for e in sub.selected_experts]
    for rec in zeroed:
        rec.node_feature = np.zeros_like(rec.node_feature)
    return replace(sub, selected_experts=zeroed, prompt_edges=np.zeros_like(sub.prompt_edges))
