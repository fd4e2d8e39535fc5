"""Synthetic expert ecosystem with an exact quality oracle.

A "model" is a linear map ``W`` (d_out x d_task) and "generation" is the
product ``y = W p`` for a prompt feature ``p``. Each cluster (subject) has an
ideal checkpoint ``W*_k`` and each attribute an ideal rank-r delta
``D*_a = B*_a A*_a``; the ideal output for a prompt is
``(W*_k + sum_a D*_a) p``. Experts are noisy copies of these ideals, each with
its own noise level, so some copies are better than others and only
measuring them tells which.

Five metrics compare an output to the ideal through five fixed orthonormal
projections: ``m_k = exp(-||P_k (y - y*)|| / tau)``.
"""
from __future__ import annotations

import itertools
import json
import os
import re
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import kernels
from .errors import PayloadMismatchError, ShapeMismatchError
from .merger import CKPT, PEFT, CkptPayload, ExpertPayload, MergedModel, PeftPayload

CLUSTER_NAMES = ("forest", "city", "portrait", "ocean", "desert", "mountain", "space", "garden")
ATTRIBUTE_NAMES = ("rain", "bloom", "neon", "fog", "snow", "sunset", "glow", "ink",
                   "mist", "dusk", "gold", "chrome")

# rng stream tags, fixed so that each structure has its own reproducible stream
_T_BASE, _T_CLUSTER, _T_DELTA, _T_METRIC, _T_CENTER, _T_PROMPT, _T_EXPERT, _T_SAMPLE = range(1, 9)

SPEC_FILE = "testbed.json"


@dataclass(frozen=True)
class TestbedSpec:
    d_task: int = 8
    d_out: int = 8
    n_clusters: int = 4
    n_attributes: int = 6
    peft_rank: int = 2
    n_metrics: int = 5
    metric_dim: int = 4
    tau: float = 1.0
    noise_scale: float = 0.1
    quality_spread: float = 4.0
    cluster_scale: float = 0.8
    delta_scale: float = 0.3
    prompt_jitter: float = 0.2
    seed: int = 0

    __test__ = False  # not a pytest class

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "TestbedSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown testbed fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TestbedSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())


@dataclass(frozen=True)
class SyntheticPrompt:
    text: str
    feature: np.ndarray = field(compare=False)
    cluster: int
    attributes: tuple[int, ...]
    instance: int

    @property
    def id(self) -> str:
        return f"inst:{self.instance}"

    def line(self) -> str:
        return f"{self.text} #{self.instance}"


@dataclass
class ExpertSource:
    """An expert as found "online": id, kind, homepage text and payload."""

    id: str
    kind: str
    homepage_text: str
    payload: ExpertPayload
    registered_at: int = 0
    # testbed bookkeeping, invisible to the agents
    skill: str = ""
    noise: float = 0.0


_PROMPT_RE = re.compile(
    r"^\s*subject:([A-Za-z0-9_-]+)\s*(?:;\s*attrs:([A-Za-z0-9_-]+(?:\s*,\s*[A-Za-z0-9_-]+)*))?\s*$")
_INSTANCE_RE = re.compile(r"^(.*?)\s*#(\d+)\s*$")


def _names(pool: Sequence[str], n: int, prefix: str) -> list[str]:
    if n <= len(pool):
        return list(pool[:n])
    return list(pool) + [f"{prefix}{i}" for i in range(len(pool), n)]


class Testbed:
    """All ground-truth structures derived from a :class:`TestbedSpec`."""

    __test__ = False

    def __init__(self, spec: TestbedSpec = TestbedSpec()):
        self.spec = spec
        s = spec
        self.cluster_names = _names(CLUSTER_NAMES, s.n_clusters, "c")
        self.attribute_names = _names(ATTRIBUTE_NAMES, s.n_attributes, "a")
        self._cluster_index = {n: i for i, n in enumerate(self.cluster_names)}
        self._attr_index = {n: i for i, n in enumerate(self.attribute_names)}

        scale = 1.0 / np.sqrt(s.d_task)
        rng = self._rng(_T_BASE)
        self.W_base = rng.standard_normal((s.d_out, s.d_task)) * scale
        self.W_star = np.stack([
            self.W_base + s.cluster_scale * scale * self._rng(_T_CLUSTER, k).standard_normal(
                (s.d_out, s.d_task))
            for k in range(s.n_clusters)])
        self.B_star, self.A_star = [], []
        for a in range(s.n_attributes):
            r = self._rng(_T_DELTA, a)
            self.B_star.append(r.standard_normal((s.d_out, s.peft_rank)) * np.sqrt(s.delta_scale))
            self.A_star.append(r.standard_normal((s.peft_rank, s.d_task))
                               * np.sqrt(s.delta_scale) * scale)
        self.D_star = np.stack([B @ A for B, A in zip(self.B_star, self.A_star)])
        projections = []
        for k in range(s.n_metrics):
            q, _ = np.linalg.qr(self._rng(_T_METRIC, k).standard_normal((s.d_out, s.metric_dim)))
            projections.append(q.T)          # (metric_dim, d_out), orthonormal rows
        self.projections = np.stack(projections)
        centers = self._rng(_T_CENTER).standard_normal((s.n_clusters, s.d_task))
        self.centers = centers / np.linalg.norm(centers, axis=1, keepdims=True)

    def _rng(self, *key: int) -> np.random.Generator:
        return np.random.default_rng([self.spec.seed, *key])

    # -- prompts -----------------------------------------------------------

    def prompt_text(self, cluster: int, attributes: Sequence[int]) -> str:
        text = f"subject:{self.cluster_names[cluster]}"
        if attributes:
            text += "; attrs:" + ",".join(self.attribute_names[a] for a in attributes)
        return text

    def make_prompt(self, cluster: int, attributes: Sequence[int], instance: int) -> SyntheticPrompt:
        if not 0 <= cluster < self.spec.n_clusters:
            raise ValueError(f"cluster {cluster} out of range")
        attributes = tuple(sorted(set(int(a) for a in attributes)))
        rng = self._rng(_T_PROMPT, instance, cluster, *attributes)
        noise = rng.standard_normal(self.spec.d_task) / np.sqrt(self.spec.d_task)
        feature = self.centers[cluster] + self.spec.prompt_jitter * noise
        return SyntheticPrompt(self.prompt_text(cluster, attributes), feature,
                               cluster, attributes, int(instance))

    def parse_prompt(self, text: str, instance: int | None = None) -> SyntheticPrompt:
        """Rebuild a prompt from ``"subject:x; attrs:a,b #instance"``."""
        m = _INSTANCE_RE.match(text)
        if m:
            text, tagged = m.group(1), int(m.group(2))
            instance = tagged if instance is None else instance
        m = _PROMPT_RE.match(text)
        if not m:
            raise ValueError(f"not a testbed prompt: {text!r}")
        try:
            cluster = self._cluster_index[m.group(1)]
            attrs = [self._attr_index[a.strip()] for a in m.group(2).split(",")] if m.group(2) else []
        except KeyError as exc:
            raise ValueError(f"unknown testbed token {exc} in {text!r}") from None
        return self.make_prompt(cluster, attrs, 0 if instance is None else instance)

    def sample_prompts(self, n: int, first_instance: int, attributes: Sequence[int] | None = None,
                       max_attrs: int = 2, require: Sequence[int] | None = None,
                       clusters: Sequence[int] | None = None) -> list[SyntheticPrompt]:
        """``n`` prompts with instances ``first_instance ..``.

        ``attributes`` restricts which attributes may appear; ``require``
        forces at least one of the given attributes into every prompt.
        """
        pool = list(range(self.spec.n_attributes)) if attributes is None else list(attributes)
        clusters = list(range(self.spec.n_clusters)) if clusters is None else list(clusters)
        out = []
        for i in range(n):
            inst = first_instance + i
            rng = self._rng(_T_SAMPLE, inst)
            k = int(clusters[rng.integers(len(clusters))])
            n_attr = int(rng.integers(0, min(max_attrs, len(pool)) + 1))
            attrs = list(rng.choice(pool, size=n_attr, replace=False)) if n_attr else []
            if require:
                if not set(attrs) & set(require):
                    extra = int(require[rng.integers(len(require))])
                    attrs = (attrs[1:] if len(attrs) >= max_attrs else attrs) + [extra]
            out.append(self.make_prompt(k, attrs, inst))
        return out

    # -- ground truth ------------------------------------------------------

    def target(self, prompt: SyntheticPrompt) -> np.ndarray:
        W = self.W_star[prompt.cluster].copy()
        for a in prompt.attributes:
            W += self.D_star[a]
        return W @ prompt.feature

    def generate(self, merged: MergedModel | np.ndarray, prompt: SyntheticPrompt) -> np.ndarray:
        W = merged.W_bold if isinstance(merged, MergedModel) else np.asarray(merged)
        if W.shape != (self.spec.d_out, self.spec.d_task):
            raise ShapeMismatchError(f"model shape {W.shape} does not fit the testbed")
        return W @ prompt.feature

    def score(self, y: np.ndarray, prompt: SyntheticPrompt) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (self.spec.d_out,):
            raise ShapeMismatchError(f"output shape {y.shape}, expected ({self.spec.d_out},)")
        diff = self.projections @ (y - self.target(prompt))
        return np.exp(-np.linalg.norm(diff, axis=1) / self.spec.tau)

    def scalar(self, y: np.ndarray, prompt: SyntheticPrompt) -> float:
        return float(self.score(y, prompt).mean())

    def reward(self, merged: MergedModel, prompt: SyntheticPrompt) -> float:
        return self.scalar(self.generate(merged, prompt), prompt)

    # -- experts -----------------------------------------------------------

    def quality_multiplier(self, rng: np.random.Generator) -> float:
        spread = self.spec.quality_spread
        if spread <= 1.0:
            return 1.0
        return float(np.exp(rng.uniform(-np.log(spread), np.log(spread))))

    def ckpt_source(self, cluster: int, copy: int, epoch: int) -> ExpertSource:
        s = self.spec
        rng = self._rng(_T_EXPERT, epoch, 0, cluster, copy)
        noise = s.noise_scale * self.quality_multiplier(rng)
        W = self.W_star[cluster] + noise * rng.standard_normal((s.d_out, s.d_task))
        name = self.cluster_names[cluster]
        home = (f"Expert for subject:{name}, release {epoch} build {copy}. Fine-tuned on "
                f"{name} imagery and tested on showcase prompts.")
        return ExpertSource(f"ckpt-{name}-{epoch}-{copy}", CKPT, home, CkptPayload(W),
                            epoch, skill=f"subject:{name}", noise=noise)

    def peft_source(self, attribute: int, copy: int, epoch: int) -> ExpertSource:
        s = self.spec
        rng = self._rng(_T_EXPERT, epoch, 1, attribute, copy)
        noise = s.noise_scale * self.quality_multiplier(rng)
        B = self.B_star[attribute] + noise * rng.standard_normal(self.B_star[attribute].shape)
        A = self.A_star[attribute] + noise * rng.standard_normal(self.A_star[attribute].shape)
        name = self.attribute_names[attribute]
        home = (f"LoRA adding attr:{name} to any scene, release {epoch} build {copy}. "
                f"Works with most checkpoints.")
        return ExpertSource(f"peft-{name}-{epoch}-{copy}", PEFT, home, PeftPayload(B, A),
                            epoch, skill=f"attr:{name}", noise=noise)

    def distractor_source(self, cluster: int, epoch: int) -> ExpertSource:
        """Plausible description for ``cluster`` but a payload from another cluster."""
        s = self.spec
        rng = self._rng(_T_EXPERT, epoch, 2, cluster)
        wrong = (cluster + 1) % s.n_clusters
        W = self.W_star[wrong] + s.noise_scale * rng.standard_normal((s.d_out, s.d_task))
        name = self.cluster_names[cluster]
        home = (f"Expert for subject:flamingo in a {name} setting. "
                f"Red feathered birds. Release {epoch}.")
        return ExpertSource(f"distractor-{name}-{epoch}", CKPT, home, CkptPayload(W),
                            epoch, skill="subject:flamingo", noise=s.noise_scale)

    def build_ecosystem(self, n_ckpt_per_cluster: int = 2, n_peft_per_attribute: int = 2,
                        epoch_tag: int = 2023, clusters: Sequence[int] | None = None,
                        attributes: Sequence[int] | None = None,
                        distractors: bool = False) -> list[ExpertSource]:
        if n_ckpt_per_cluster < 1 or n_peft_per_attribute < 1:
            raise ValueError("expert counts must be >= 1")
        clusters = range(self.spec.n_clusters) if clusters is None else clusters
        attributes = range(self.spec.n_attributes) if attributes is None else attributes
        out = [self.ckpt_source(k, c, epoch_tag)
               for k in clusters for c in range(n_ckpt_per_cluster)]
        out += [self.peft_source(a, c, epoch_tag)
                for a in attributes for c in range(n_peft_per_attribute)]
        if distractors:
            out += [self.distractor_source(k, epoch_tag) for k in clusters]
        return out

    # -- oracle ------------------------------------------------------------

    def projected_outputs(self, ckpt: Sequence[ExpertPayload], peft: Sequence[ExpertPayload],
                          prompt: SyntheticPrompt) -> tuple[np.ndarray, np.ndarray]:
        """Metric projections of each expert's stand-alone contribution and of the target."""
        ys = [p.dense() @ prompt.feature for p in list(ckpt) + list(peft)]
        Y = np.stack(ys)                                         # (n, d_out)
        proj = np.einsum("kqd,nd->nkq", self.projections, Y)
        return proj, self.projections @ self.target(prompt)

    def shares_reward(self, shares: np.ndarray, proj: np.ndarray, proj_target: np.ndarray) -> np.ndarray:
        return kernels.batch_rewards(np.ascontiguousarray(shares, dtype=np.float64),
                                     np.ascontiguousarray(proj, dtype=np.float64),
                                     np.ascontiguousarray(proj_target, dtype=np.float64),
                                     float(self.spec.tau))

    def oracle_coefficients(self, ckpt: Sequence[ExpertPayload], peft: Sequence[ExpertPayload],
                            prompt: SyntheticPrompt, resolution: float = 0.5,
                            bound: float = 2.0, max_grid_experts: int = 4,
                            n_random: int = 10_000, seed: int = 0) -> tuple[np.ndarray, float]:
        """Best pre-softmax coefficients for this expert set, by exhaustive search.

        Grid over ``{-bound, ..., bound}`` with the first entry of each group
        pinned to 0 (softmax is shift invariant) when there are at most
        ``max_grid_experts`` experts, otherwise ``n_random`` seeded uniform samples.
        """
        nc, npf = len(ckpt), len(peft)
        if nc == 0:
            raise ValueError("oracle needs at least one CKPT expert")
        proj, proj_target = self.projected_outputs(ckpt, peft, prompt)
        if nc + npf <= max_grid_experts:
            steps = int(round(2 * bound / resolution))
            grid = np.linspace(-bound, bound, steps + 1)
            free = max(nc - 1, 0) + max(npf - 1, 0)
            combos = np.array(list(itertools.product(grid, repeat=free))) if free else np.zeros((1, 0))
            W = np.zeros((len(combos), nc + npf))
            cols = [i for i in range(1, nc)] + [nc + j for j in range(1, npf)]
            W[:, cols] = combos
        else:
            rng = np.random.default_rng([self.spec.seed, 99, seed])
            W = rng.uniform(-bound, bound, size=(n_random, nc + npf))
        shares = group_softmax(W, nc)
        rewards = self.shares_reward(shares, proj, proj_target)
        best = int(np.argmax(rewards))   # first maximum wins ties
        return W[best], float(rewards[best])


def group_softmax(W: np.ndarray, n_ckpt: int) -> np.ndarray:
    """Row-wise softmax applied separately to the CKPT and PEFT column groups."""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    out = np.empty_like(W)
    for sl in (slice(0, n_ckpt), slice(n_ckpt, W.shape[1])):
        block = W[:, sl]
        if block.shape[1] == 0:
            continue
        e = np.exp(block - block.max(axis=1, keepdims=True))
        out[:, sl] = e / e.sum(axis=1, keepdims=True)
    return out


class TestbedScorer:
    """Scores a single expert on reference prompts, counting generation calls."""

    __test__ = False

    def __init__(self, testbed: Testbed, prompts: Sequence[SyntheticPrompt] = ()):
        self.testbed = testbed
        self._prompts = {p.id: p for p in prompts}
        self.generate_calls = 0

    def add_prompts(self, prompts: Sequence[SyntheticPrompt]) -> None:
        self._prompts.update({p.id: p for p in prompts})

    def prompt_for(self, ref_prompt) -> SyntheticPrompt:
        p = self._prompts.get(ref_prompt.id)
        if p is None:
            instance = int(ref_prompt.id.split(":", 1)[1]) if ref_prompt.id.startswith("inst:") else None
            p = self.testbed.parse_prompt(ref_prompt.text, instance)
            self._prompts[p.id] = p
        return p

    def standalone_model(self, payload: ExpertPayload) -> MergedModel:
        s = self.testbed.spec
        if not isinstance(payload, (CkptPayload, PeftPayload)) or payload.shape != (s.d_out, s.d_task):
            raise PayloadMismatchError("payload is not a testbed payload of matching shape")
        if payload.kind == CKPT:
            return MergedModel(payload.dense())
        return MergedModel(self.testbed.W_base + payload.dense())

    def evaluate_expert(self, payload: ExpertPayload, ref_prompt) -> np.ndarray:
        model = self.standalone_model(payload)
        prompt = self.prompt_for(ref_prompt)
        self.generate_calls += 1
        y = self.testbed.generate(model, prompt)
        return np.clip(self.testbed.score(y, prompt), 0.0, 1.0)


def read_prompt_file(testbed: Testbed, path: str | os.PathLike) -> list[SyntheticPrompt]:
    """One prompt per line; lines without ``#instance`` use their 0-based line number."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            m = _INSTANCE_RE.match(line)
            out.append(testbed.parse_prompt(line) if m else testbed.parse_prompt(line, lineno))
    return out


def write_prompt_file(path: str | os.PathLike, prompts: Sequence[SyntheticPrompt]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in prompts:
            fh.write(p.line() + "\n")
