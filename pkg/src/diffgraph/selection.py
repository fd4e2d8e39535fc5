"""Expert selection: parse the prompt, retrieve by embedding, filter with the LLM."""
from __future__ import annotations

from dataclasses import dataclass, field

from .embeddings import Embedder, top_k
from .errors import FilterEmptiedCkptError, FilterProtocolError, NoCkptExpertsError
from .graph_store import UniversalGraph
from .llm import Candidate, LlmClient
from .merger import CKPT, PEFT

DEFAULT_K1 = 3
DEFAULT_K2 = 3


@dataclass
class SelectionResult:
    ckpt: list[str]
    peft: list[str]
    summary: str
    attributes: list[str]
    similarity: dict[str, float] = field(default_factory=dict)

    @property
    def ids(self) -> list[str]:
        return self.ckpt + self.peft


def _ranked(pool: dict[str, float]) -> list[str]:
    return [eid for eid, _ in sorted(pool.items(), key=lambda kv: (-kv[1], kv[0]))]


def retrieve_candidates(graph: UniversalGraph, user_prompt: str, llm: LlmClient,
                        embedder: Embedder, k1: int = DEFAULT_K1, k2: int = DEFAULT_K2):
    """Embedding retrieval stage only.

    Returns (summary, attributes, ckpt scores, peft scores) where the score
    dicts map candidate id to its retrieval similarity.
    """
    ckpt_pool = [(e.id, e.node_feature) for e in graph.experts_of_kind(CKPT)
                 if graph.is_calibrated(e.id)]
    if not ckpt_pool:
        raise NoCkptExpertsError("graph has no calibrated CKPT expert")
    peft_pool = [(e.id, e.node_feature) for e in graph.experts_of_kind(PEFT)
                 if graph.is_calibrated(e.id)]

    summary = llm.summarize_prompt(user_prompt)
    ckpt_scores = dict(top_k(embedder.embed(summary), ckpt_pool, k1))

    attributes = llm.extract_attributes(user_prompt)
    peft_scores: dict[str, float] = {}
    if peft_pool:
        for attr in attributes:
            for eid, sim in top_k(embedder.embed(attr), peft_pool, k2):
                if sim > peft_scores.get(eid, float("-inf")):
                    peft_scores[eid] = sim
    return summary, attributes, ckpt_scores, peft_scores


def select_experts(graph: UniversalGraph, user_prompt: str, llm: LlmClient, embedder: Embedder,
                   k1: int = DEFAULT_K1, k2: int = DEFAULT_K2,
                   use_filter: bool = True) -> SelectionResult:
    """Two-stage expert selection (retrieval, then LLM review).

    ``use_filter=False`` returns the retrieval candidates unfiltered.
    """
    summary, attributes, ckpt_scores, peft_scores = retrieve_candidates(
        graph, user_prompt, llm, embedder, k1, k2)
    ckpt_ids, peft_ids = _ranked(ckpt_scores), _ranked(peft_scores)

    if use_filter:
        candidates = [Candidate(eid, CKPT, graph.expert(eid).description) for eid in ckpt_ids]
        candidates += [Candidate(eid, PEFT, graph.expert(eid).description) for eid in peft_ids]
        needs = {"summary": summary, "attributes": list(attributes)}
        kept = llm.filter_experts(needs, candidates)
        offered = set(ckpt_ids) | set(peft_ids)
        invented = [eid for eid in kept if eid not in offered]
        if invented:
            raise FilterProtocolError(f"filter returned unknown ids {invented}")
        kept_set = set(kept)
        ckpt_ids = [eid for eid in ckpt_ids if eid in kept_set]
        peft_ids = [eid for eid in peft_ids if eid in kept_set]
        if not ckpt_ids:
            raise FilterEmptiedCkptError("filter removed every CKPT candidate")

    sims = {**ckpt_scores, **peft_scores}
    return SelectionResult(ckpt_ids, peft_ids, summary, list(attributes),
                           {eid: sims[eid] for eid in ckpt_ids + peft_ids})
