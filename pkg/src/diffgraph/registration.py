"""Graph construction agent: node registration, node calibration, reference prompts."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .embeddings import Embedder
from .errors import InsufficientCandidatesError
from .graph_store import CalibrationEdge, ExpertRecord, ReferencePrompt, UniversalGraph
from .llm import LlmClient


class QualityScorer(Protocol):
    def evaluate_expert(self, payload, ref_prompt: ReferencePrompt) -> np.ndarray:
        """Five metric scores of the expert used alone on one reference prompt."""
        ...


@dataclass
class CalibrationReport:
    expert_id: str
    scores: np.ndarray      # (N_r, 5)
    wall_time: float

    def edges(self, ref_prompts: Sequence[ReferencePrompt]) -> list[CalibrationEdge]:
        return [CalibrationEdge(self.expert_id, rp.id, self.scores[j])
                for j, rp in enumerate(ref_prompts)]


def register_node(source, llm: LlmClient, embedder: Embedder) -> ExpertRecord:
    """Describe an expert from its homepage and embed the description."""
    description = llm.summarize_expert(source.homepage_text)
    return ExpertRecord(
        id=source.id,
        kind=source.kind,
        description=description,
        node_feature=embedder.embed(description),
        payload=source.payload,
        version=1,
        registered_at=getattr(source, "registered_at", 0),
    )


def calibrate_node(record: ExpertRecord, ref_prompts: Sequence[ReferencePrompt],
                   scorer: QualityScorer) -> list[CalibrationEdge]:
    return calibrate_with_report(record, ref_prompts, scorer).edges(ref_prompts)


def calibrate_with_report(record: ExpertRecord, ref_prompts: Sequence[ReferencePrompt],
                          scorer: QualityScorer) -> CalibrationReport:
    start = time.perf_counter()
    rows = []
    for rp in ref_prompts:
        s = np.asarray(scorer.evaluate_expert(record.payload, rp), dtype=np.float64)
        rows.append(np.clip(s, 0.0, 1.0))
    scores = np.stack(rows).astype(np.float32) if rows else np.zeros((0, 5), np.float32)
    return CalibrationReport(record.id, scores, time.perf_counter() - start)


def add_expert(graph: UniversalGraph, source, llm: LlmClient, embedder: Embedder,
               scorer: QualityScorer) -> CalibrationReport:
    """Register, calibrate and insert one expert; no existing feature changes."""
    record = register_node(source, llm, embedder)
    report = calibrate_with_report(record, graph.ref_prompts, scorer)
    graph.insert_expert(record, report.edges(graph.ref_prompts))
    return report


def select_reference_prompts(candidates: Sequence[tuple[str, str]], count: int,
                             embedder: Embedder) -> list[ReferencePrompt]:
    """Farthest-point sampling over ``(id, text)`` candidates in embedding space.

    Starts from the candidate nearest the centroid, then repeatedly adds the
    candidate whose distance to the chosen set is largest. Ties go to the
    smaller id.
    """
    if count > len(candidates):
        raise InsufficientCandidatesError(
            f"asked for {count} reference prompts from {len(candidates)} candidates")
    if count <= 0:
        return []
    order = sorted(range(len(candidates)), key=lambda i: candidates[i][0])
    ids = [candidates[i][0] for i in order]
    texts = [candidates[i][1] for i in order]
    feats = np.stack([embedder.embed(t) for t in texts])
    X = feats.astype(np.float64)
    centroid = X.mean(axis=0)
    d0 = np.linalg.norm(X - centroid, axis=1)
    first = int(np.argmin(d0))            # argmin returns the first (= smallest id) tie
    chosen = [first]
    mind = np.linalg.norm(X - X[first], axis=1)
    while len(chosen) < count:
        mind_masked = mind.copy()
        mind_masked[chosen] = -np.inf
        nxt = int(np.argmax(mind_masked))
        chosen.append(nxt)
        mind = np.minimum(mind, np.linalg.norm(X - X[nxt], axis=1))
    return [ReferencePrompt(ids[i], texts[i], feats[i]) for i in chosen]
