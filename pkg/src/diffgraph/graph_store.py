"""The universal expert graph: data model, mutation, activation, persistence.

The graph is bipartite. Expert nodes carry a text-embedding feature and a
parameter payload; reference-prompt nodes carry a text-embedding feature;
every calibrated expert has exactly one edge to each reference prompt, and
that edge holds the expert's five quality scores on the prompt.

Mutations are in place and require exclusive access; concurrent readers are
fine as long as no writer is active.
"""
from __future__ import annotations

import json
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import persistence as pio
from .embeddings import cosine
from .errors import (
    DimensionMismatchError,
    DuplicateIdError,
    FormatVersionMismatchError,
    IncompleteCalibrationError,
    IoFailureError,
    NoCkptSelectedError,
    UncalibratedExpertError,
    UnknownIdError,
)
from .merger import CKPT, PEFT, ExpertPayload, decode_payload, encode_payload

FORMAT_VERSION = 1
D_EDGE = 5
EXPERT_KINDS = (CKPT, PEFT)
_NORM_TOL = 1e-6


def _check_unit(vec: np.ndarray, d_node: int, what: str) -> None:
    if vec.shape != (d_node,):
        raise DimensionMismatchError(f"{what}: feature shape {vec.shape}, expected ({d_node},)")
    norm = float(np.linalg.norm(vec.astype(np.float64)))
    if abs(norm - 1.0) > _NORM_TOL:
        raise DimensionMismatchError(f"{what}: feature norm {norm} is not 1")


@dataclass(eq=False)
class ExpertRecord:
    id: str
    kind: str
    description: str
    node_feature: np.ndarray
    payload: ExpertPayload
    version: int = 1
    registered_at: int = 0

    def __post_init__(self):
        if self.kind not in EXPERT_KINDS:
            raise ValueError(f"unknown expert kind {self.kind!r}")
        if self.payload.kind != self.kind:
            raise ValueError(f"{self.id}: payload kind {self.payload.kind} != {self.kind}")
        self.node_feature = np.asarray(self.node_feature, dtype=np.float32)

    def same_as(self, other: "ExpertRecord", ignore_version: bool = False) -> bool:
        return (self.id == other.id and self.kind == other.kind
                and self.description == other.description
                and self.node_feature.tobytes() == other.node_feature.tobytes()
                and self.payload.same_as(other.payload)
                and self.registered_at == other.registered_at
                and (ignore_version or self.version == other.version))


@dataclass(eq=False)
class ReferencePrompt:
    id: str
    text: str
    node_feature: np.ndarray

    def __post_init__(self):
        self.node_feature = np.asarray(self.node_feature, dtype=np.float32)

    def same_as(self, other: "ReferencePrompt") -> bool:
        return (self.id == other.id and self.text == other.text
                and self.node_feature.tobytes() == other.node_feature.tobytes())


@dataclass(eq=False)
class CalibrationEdge:
    expert_id: str
    ref_prompt_id: str
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float32)


class UniversalGraph:
    """Bipartite expert / reference-prompt graph."""

    def __init__(self, ref_prompts: Sequence[ReferencePrompt], d_node: int,
                 d_edge: int = D_EDGE, format_version: int = FORMAT_VERSION):
        if d_node < 1 or d_edge < 1:
            raise ValueError("d_node and d_edge must be positive")
        self.d_node = d_node
        self.d_edge = d_edge
        self.format_version = format_version
        seen = set()
        for rp in ref_prompts:
            if rp.id in seen:
                raise DuplicateIdError(f"reference prompt {rp.id!r} appears twice")
            seen.add(rp.id)
            _check_unit(rp.node_feature, d_node, f"reference prompt {rp.id!r}")
        self.ref_prompts: list[ReferencePrompt] = list(ref_prompts)
        self._ref_index = {rp.id: j for j, rp in enumerate(self.ref_prompts)}
        self._experts: dict[str, ExpertRecord] = {}
        self._scores: dict[str, np.ndarray] = {}

    # -- queries -----------------------------------------------------------

    @property
    def n_ref(self) -> int:
        return len(self.ref_prompts)

    @property
    def experts(self) -> list[ExpertRecord]:
        return list(self._experts.values())

    def expert(self, expert_id: str) -> ExpertRecord:
        try:
            return self._experts[expert_id]
        except KeyError:
            raise UnknownIdError(f"unknown expert {expert_id!r}") from None

    def __contains__(self, expert_id: str) -> bool:
        return expert_id in self._experts

    def __len__(self) -> int:
        return len(self._experts)

    def experts_of_kind(self, kind: str) -> list[ExpertRecord]:
        return [e for e in self._experts.values() if e.kind == kind]

    def is_calibrated(self, expert_id: str) -> bool:
        self.expert(expert_id)
        return expert_id in self._scores

    def scores(self, expert_id: str) -> np.ndarray:
        """(N_r, d_edge) score matrix of a calibrated expert, rows in ref-prompt order."""
        self.expert(expert_id)
        try:
            return self._scores[expert_id]
        except KeyError:
            raise UncalibratedExpertError(f"expert {expert_id!r} is not calibrated") from None

    @property
    def edges(self) -> list[CalibrationEdge]:
        return list(self.iter_edges())

    def iter_edges(self) -> Iterator[CalibrationEdge]:
        for eid in self._experts:
            mat = self._scores.get(eid)
            if mat is None:
                continue
            for j, rp in enumerate(self.ref_prompts):
                yield CalibrationEdge(eid, rp.id, mat[j])

    def n_edges(self) -> int:
        return sum(m.shape[0] for m in self._scores.values())

    def degree(self, expert_id: str) -> int:
        self.expert(expert_id)
        mat = self._scores.get(expert_id)
        return 0 if mat is None else mat.shape[0]

    # -- mutation ----------------------------------------------------------

    def _score_matrix(self, expert_id: str, edges: Iterable[CalibrationEdge]) -> np.ndarray:
        mat = np.full((self.n_ref, self.d_edge), np.nan, dtype=np.float32)
        seen = set()
        for edge in edges:
            if edge.expert_id != expert_id:
                raise IncompleteCalibrationError(
                    f"edge for {edge.expert_id!r} passed while inserting {expert_id!r}")
            j = self._ref_index.get(edge.ref_prompt_id)
            if j is None:
                raise IncompleteCalibrationError(
                    f"edge to unknown reference prompt {edge.ref_prompt_id!r}")
            if j in seen:
                raise IncompleteCalibrationError(
                    f"duplicate edge to reference prompt {edge.ref_prompt_id!r}")
            if edge.scores.shape != (self.d_edge,):
                raise DimensionMismatchError(
                    f"edge scores have shape {edge.scores.shape}, expected ({self.d_edge},)")
            if not np.all((edge.scores >= 0.0) & (edge.scores <= 1.0)):
                raise ValueError("calibration scores must lie in [0, 1]")
            seen.add(j)
            mat[j] = edge.scores
        if len(seen) != self.n_ref:
            missing = [rp.id for j, rp in enumerate(self.ref_prompts) if j not in seen]
            raise IncompleteCalibrationError(f"missing edges to {missing}")
        mat.setflags(write=False)
        return mat

    def insert_expert(self, record: ExpertRecord,
                      edges: Sequence[CalibrationEdge] | None) -> "UniversalGraph":
        """Add an expert and its calibration edges.

        ``edges=None`` registers an isolated (uncalibrated) node. Nothing that
        already exists in the graph is modified.
        """
        if record.id in self._experts:
            raise DuplicateIdError(f"expert {record.id!r} already in graph")
        _check_unit(record.node_feature, self.d_node, f"expert {record.id!r}")
        mat = None if edges is None else self._score_matrix(record.id, edges)
        record.node_feature.setflags(write=False)
        self._experts[record.id] = record
        if mat is not None:
            self._scores[record.id] = mat
        return self

    def calibrate_expert(self, expert_id: str, edges: Sequence[CalibrationEdge]) -> "UniversalGraph":
        """Attach calibration edges to an isolated expert node."""
        self.expert(expert_id)
        if expert_id in self._scores:
            raise DuplicateIdError(f"expert {expert_id!r} is already calibrated")
        self._scores[expert_id] = self._score_matrix(expert_id, edges)
        return self

    def remove_expert(self, expert_id: str) -> ExpertRecord:
        """Drop an expert node and its incident edges; returns the removed record."""
        record = self.expert(expert_id)
        del self._experts[expert_id]
        self._scores.pop(expert_id, None)
        return record

    def replace_expert(self, record: ExpertRecord,
                       edges: Sequence[CalibrationEdge]) -> "UniversalGraph":
        """Swap in a new version of an existing expert (remove + insert)."""
        old_scores = self._scores.get(record.id)
        old = self.remove_expert(record.id)
        if record.version <= old.version:
            record.version = old.version + 1
        try:
            return self.insert_expert(record, edges)
        except Exception:
            self._experts[old.id] = old
            if old_scores is not None:
                self._scores[old.id] = old_scores
            raise

    def copy(self) -> "UniversalGraph":
        g = UniversalGraph(self.ref_prompts, self.d_node, self.d_edge, self.format_version)
        g._experts = dict(self._experts)
        g._scores = dict(self._scores)
        return g

    # -- comparison --------------------------------------------------------

    def equals(self, other: "UniversalGraph", ignore_versions: bool = False) -> bool:
        if (self.d_node, self.d_edge, self.format_version) != \
                (other.d_node, other.d_edge, other.format_version):
            return False
        if len(self.ref_prompts) != len(other.ref_prompts) or not all(
                a.same_as(b) for a, b in zip(self.ref_prompts, other.ref_prompts)):
            return False
        if set(self._experts) != set(other._experts):
            return False
        for eid, rec in self._experts.items():
            if not rec.same_as(other._experts[eid], ignore_versions):
                return False
            a, b = self._scores.get(eid), other._scores.get(eid)
            if (a is None) != (b is None):
                return False
            if a is not None and a.tobytes() != b.tobytes():
                return False
        return True

    def __eq__(self, other) -> bool:
        if not isinstance(other, UniversalGraph):
            return NotImplemented
        return self.equals(other)

    __hash__ = None  # mutable

    # -- activation --------------------------------------------------------

    def activate_subgraph(self, selected: Sequence[str],
                          user_prompt_feature: np.ndarray) -> "Subgraph":
        """Induced subgraph for one request.

        CKPT experts come first (in the given order), then PEFT experts, then
        every reference prompt in graph order. The user prompt node connects to
        each selected expert with weight ``max(0, cosine)``.
        """
        x_p = np.asarray(user_prompt_feature, dtype=np.float32)
        if x_p.shape != (self.d_node,):
            raise DimensionMismatchError(
                f"user prompt feature shape {x_p.shape}, expected ({self.d_node},)")
        if len(set(selected)) != len(selected):
            raise DuplicateIdError("selection contains duplicate ids")
        records = [self.expert(eid) for eid in selected]
        for rec in records:
            if rec.id not in self._scores:
                raise UncalibratedExpertError(f"expert {rec.id!r} is not calibrated")
        ckpt = [r for r in records if r.kind == CKPT]
        peft = [r for r in records if r.kind == PEFT]
        if not ckpt:
            raise NoCkptSelectedError("selection holds no CKPT expert")
        ordered = ckpt + peft
        scores = np.stack([self._scores[r.id] for r in ordered]) if ordered else \
            np.zeros((0, self.n_ref, self.d_edge), np.float32)
        prompt_edges = np.array(
            [max(0.0, cosine(x_p, r.node_feature)) for r in ordered], dtype=np.float64)
        return Subgraph(
            user_prompt_feature=x_p,
            selected_experts=ordered,
            ref_prompts=list(self.ref_prompts),
            scores=scores,
            prompt_edges=prompt_edges,
            n_ckpt=len(ckpt),
        )


@dataclass(eq=False)
class Subgraph:
    user_prompt_feature: np.ndarray
    selected_experts: list[ExpertRecord]
    ref_prompts: list[ReferencePrompt]
    scores: np.ndarray          # (E, R, d_edge)
    prompt_edges: np.ndarray    # (E,)
    n_ckpt: int

    @property
    def n_experts(self) -> int:
        return len(self.selected_experts)

    @property
    def n_peft(self) -> int:
        return self.n_experts - self.n_ckpt

    @property
    def n_nodes(self) -> int:
        return 1 + self.n_experts + len(self.ref_prompts)

    @property
    def edges(self) -> list[CalibrationEdge]:
        return [CalibrationEdge(e.id, rp.id, self.scores[i, j])
                for i, e in enumerate(self.selected_experts)
                for j, rp in enumerate(self.ref_prompts)]

    def node_features(self) -> np.ndarray:
        """Rows: user prompt, selected experts, reference prompts."""
        rows = [self.user_prompt_feature]
        rows += [e.node_feature for e in self.selected_experts]
        rows += [r.node_feature for r in self.ref_prompts]
        return np.stack(rows).astype(np.float64)

    @property
    def ckpt_ids(self) -> list[str]:
        return [e.id for e in self.selected_experts[:self.n_ckpt]]

    @property
    def peft_ids(self) -> list[str]:
        return [e.id for e in self.selected_experts[self.n_ckpt:]]


# -- persistence -------------------------------------------------------------

MANIFEST = "manifest.json"
EDGES = "edges.coo"
NODE_FEATURES = "node_features.bin"
EDGE_FEATURES = "edge_features.bin"
PAYLOAD_DIR = "payloads"


def graph_bundle_files(graph: UniversalGraph) -> dict[str, bytes]:
    """Serialise a graph into ``{relative path: bytes}``."""
    experts = graph.experts
    node_rows = [e.node_feature for e in experts] + [r.node_feature for r in graph.ref_prompts]
    node_mat = np.stack(node_rows) if node_rows else np.zeros((0, graph.d_node), np.float32)
    coo_lines = []
    edge_rows = []
    for i, e in enumerate(experts):
        mat = graph._scores.get(e.id)
        if mat is None:
            continue
        for j in range(graph.n_ref):
            coo_lines.append(f"{i} {j}\n")
            edge_rows.append(mat[j])
    edge_mat = np.stack(edge_rows) if edge_rows else np.zeros((0, graph.d_edge), np.float32)

    files: dict[str, bytes] = {
        EDGES: "".join(coo_lines).encode("utf-8"),
        NODE_FEATURES: pio.to_f32_bytes(node_mat),
        EDGE_FEATURES: pio.to_f32_bytes(edge_mat),
    }
    expert_entries = []
    for i, e in enumerate(experts):
        rel = f"{PAYLOAD_DIR}/{i:06d}.payload"
        files[rel] = encode_payload(e.payload)
        expert_entries.append({
            "id": e.id, "kind": e.kind, "description": e.description,
            "version": e.version, "registered_at": e.registered_at, "payload_file": rel,
        })
    manifest = {
        "format_version": graph.format_version,
        "d_node": graph.d_node,
        "d_edge": graph.d_edge,
        "experts": expert_entries,
        "ref_prompts": [{"id": r.id, "text": r.text} for r in graph.ref_prompts],
        "sha256": {name: pio.sha256_hex(data) for name, data in sorted(files.items())},
    }
    files[MANIFEST] = (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8")
    return files


def save_graph(graph: UniversalGraph, directory: str | os.PathLike) -> None:
    directory = Path(directory)
    files = graph_bundle_files(graph)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        payload_dir = directory / PAYLOAD_DIR
        if payload_dir.exists():
            shutil.rmtree(payload_dir)
        payload_dir.mkdir()
    except OSError as exc:
        raise IoFailureError(f"cannot prepare bundle directory {directory}: {exc}") from exc
    # manifest last, so a torn write never looks like a complete bundle
    for name, data in files.items():
        if name != MANIFEST:
            pio.write_bytes(directory / name, data)
    pio.write_bytes(directory / MANIFEST, files[MANIFEST])


def load_graph(directory: str | os.PathLike) -> UniversalGraph:
    directory = Path(directory)
    try:
        manifest = json.loads(pio.read_bytes(directory / MANIFEST).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IoFailureError(f"{directory}: malformed manifest: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionMismatchError(
            f"bundle format_version {version!r}, this build reads {FORMAT_VERSION}")
    d_node, d_edge = int(manifest["d_node"]), int(manifest["d_edge"])
    sums = manifest.get("sha256", {})
    experts_meta, refs_meta = manifest["experts"], manifest["ref_prompts"]
    n_exp, n_ref = len(experts_meta), len(refs_meta)

    def body(name: str) -> bytes:
        return pio.read_bytes(directory / name)

    def checked(name: str, data: bytes) -> bytes:
        if name not in sums:
            raise IoFailureError(f"manifest has no checksum for {name}")
        pio.verify_checksum(data, sums[name], name)
        return data

    node_bytes = body(NODE_FEATURES)
    node_mat = pio.from_f32_bytes(node_bytes, (n_exp + n_ref, d_node))
    checked(NODE_FEATURES, node_bytes)

    coo_bytes = checked(EDGES, body(EDGES))
    pairs = []
    for lineno, line in enumerate(coo_bytes.decode("utf-8").splitlines(), 1):
        parts = line.split()
        if len(parts) != 2:
            raise IoFailureError(f"{EDGES}:{lineno}: malformed edge line")
        pairs.append((int(parts[0]), int(parts[1])))
    if pairs != sorted(pairs):
        raise IoFailureError(f"{EDGES}: edges are not sorted")
    edge_bytes = body(EDGE_FEATURES)
    edge_mat = pio.from_f32_bytes(edge_bytes, (len(pairs), d_edge))
    checked(EDGE_FEATURES, edge_bytes)

    refs = [ReferencePrompt(m["id"], m["text"], node_mat[n_exp + j])
            for j, m in enumerate(refs_meta)]
    graph = UniversalGraph(refs, d_node, d_edge, version)

    by_expert: dict[int, list[tuple[int, np.ndarray]]] = {}
    for row, (i, j) in enumerate(pairs):
        if not (0 <= i < n_exp and 0 <= j < n_ref):
            raise IoFailureError(f"{EDGES}: edge ({i}, {j}) out of range")
        by_expert.setdefault(i, []).append((j, edge_mat[row]))

    for i, meta in enumerate(experts_meta):
        rel = meta["payload_file"]
        payload = decode_payload(checked(rel, body(rel)), rel)
        record = ExpertRecord(
            id=meta["id"], kind=meta["kind"], description=meta["description"],
            node_feature=node_mat[i], payload=payload,
            version=int(meta["version"]), registered_at=int(meta["registered_at"]))
        edges = None
        if i in by_expert:
            edges = [CalibrationEdge(meta["id"], refs[j].id, s) for j, s in by_expert[i]]
        graph.insert_expert(record, edges)
    return graph
