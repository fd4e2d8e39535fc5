"""Policy-gradient training of the merging planner.

The reward path (merge -> generate -> score) is a black box; only the
log-density of the sampled coefficients is differentiated:

    loss = -(1/B) sum_b (u_b - baseline) * log P(w_b)
           [+ kl_weight * KL - entropy_weight * summed Beta entropy]
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import persistence as pio
from .errors import IoFailureError, NonFiniteGradientError
from .pipeline import EvalReport, Pipeline
from .planner import (
    PARAM_NAMES,
    VgaeParams,
    beta_entropy,
    decode_params,
    encode_params,
    kl_to_prior,
    rollout_gradient,
    sample_rollout,
)
from .testbed import SyntheticPrompt

BASELINES = ("none", "batch_mean", "prompt_mean")
ESTIMATORS = ("score", "literal")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    rollouts_per_prompt: int = 4
    epochs: int = 50
    max_steps: int | None = 2000
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.99)
    weight_decay: float = 1e-4
    adam_eps: float = 1e-8
    baseline: str = "prompt_mean"
    estimator: str = "score"
    kl_weight: float = 0.0
    entropy_weight: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.rollouts_per_prompt < 1:
            raise ValueError("rollouts_per_prompt must be >= 1")
        if self.baseline == "prompt_mean" and self.rollouts_per_prompt < 2:
            raise ValueError("prompt_mean baseline needs rollouts_per_prompt >= 2")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")


@dataclass
class AdamWState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: VgaeParams) -> "AdamWState":
        return cls(0, {n: np.zeros_like(a) for n, a in params.items()},
                   {n: np.zeros_like(a) for n, a in params.items()})

    def copy(self) -> "AdamWState":
        return AdamWState(self.step, {n: a.copy() for n, a in self.m.items()},
                          {n: a.copy() for n, a in self.v.items()})


def adamw_update(params: VgaeParams, grads: dict[str, np.ndarray], state: AdamWState,
                 cfg: TrainConfig) -> tuple[VgaeParams, AdamWState]:
    """One AdamW step with decoupled weight decay; returns new objects."""
    b1, b2 = cfg.betas
    t = state.step + 1
    new_arrays, m, v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m[name] = b1 * state.m[name] + (1 - b1) * g
        v[name] = b2 * state.v[name] + (1 - b2) * g * g
        mhat = m[name] / (1 - b1 ** t)
        vhat = v[name] / (1 - b2 ** t)
        decayed = p * (1 - cfg.lr * cfg.weight_decay)
        new_arrays[name] = decayed - cfg.lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    return VgaeParams(params.dims, new_arrays), AdamWState(t, m, v)


@dataclass
class TrainStepReport:
    step: int
    mean_reward: float
    grad_norm: float
    samples: list[tuple[str, float, float]] = field(default_factory=list)
    loss: float = 0.0


def baselines(rewards: np.ndarray, groups: np.ndarray | None, cfg: TrainConfig) -> np.ndarray:
    """Per-rollout baseline values.

    ``prompt_mean`` uses the leave-one-out mean of the other rollouts drawn
    for the same prompt.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if cfg.baseline == "none":
        return np.zeros_like(rewards)
    if cfg.baseline == "batch_mean" or groups is None:
        return np.full_like(rewards, rewards.mean())
    out = np.empty_like(rewards)
    for g in np.unique(groups):
        idx = np.flatnonzero(groups == g)
        if idx.size < 2:
            out[idx] = rewards[idx]
            continue
        total = rewards[idx].sum()
        out[idx] = (total - rewards[idx]) / (idx.size - 1)
    return out


def batch_loss_and_grad(params: VgaeParams, rollouts, rewards: np.ndarray,
                        cfg: TrainConfig, groups: np.ndarray | None = None
                        ) -> tuple[float, dict[str, np.ndarray]]:
    """Surrogate loss and its gradient for already-sampled rollouts."""
    B = len(rollouts)
    base = baselines(rewards, groups, cfg)
    grads = {n: np.zeros_like(a) for n, a in params.items()}
    loss = 0.0
    for ro, u, b in zip(rollouts, rewards, base):
        adv = (u - b) / B
        if cfg.estimator == "literal":
            prob = float(np.exp(min(ro.log_prob, 50.0)))
            loss -= adv * prob
            coef = -adv * prob
        else:
            loss -= adv * ro.log_prob
            coef = -adv
        kl_w = cfg.kl_weight / B
        if kl_w:
            loss += kl_w * kl_to_prior(ro)
        ent_w = -cfg.entropy_weight / B
        if ent_w:
            loss += ent_w * float(np.sum(beta_entropy(ro.beta.alpha, ro.beta.beta)))
        g = rollout_gradient(ro, params, coef, kl_w, ent_w)
        for n in grads:
            grads[n] += g[n]
    return loss, grads


def grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def train_step(params: VgaeParams, state: AdamWState, pipeline: Pipeline,
               prompt_batch: Sequence[SyntheticPrompt], cfg: TrainConfig,
               rng: np.random.Generator) -> tuple[VgaeParams, AdamWState, TrainStepReport]:
    rollouts, rewards, samples, groups = [], [], [], []
    for gi, prompt in enumerate(prompt_batch):
        prep = pipeline.prepare(prompt)
        for _ in range(cfg.rollouts_per_prompt):
            seed = int(rng.integers(0, 2 ** 63 - 1))
            ro = sample_rollout(prep.subgraph, params, seed)
            u, _ = pipeline.reward(prep, ro.w)
            rollouts.append(ro)
            rewards.append(u)
            groups.append(gi)
            samples.append((prompt.id, u, ro.log_prob))
    rewards = np.asarray(rewards)
    if not np.all(np.isfinite(rewards)):
        raise NonFiniteGradientError("non-finite reward in batch")
    loss, grads = batch_loss_and_grad(params, rollouts, rewards, cfg, np.asarray(groups))
    gn = grad_norm(grads)
    if not np.isfinite(gn):
        raise NonFiniteGradientError("gradient is not finite; step aborted")
    new_params, new_state = adamw_update(params, grads, state, cfg)
    report = TrainStepReport(new_state.step, float(rewards.mean()), gn, samples, loss)
    return new_params, new_state, report


def train(params: VgaeParams, pipeline: Pipeline, prompts: Sequence[SyntheticPrompt],
          cfg: TrainConfig, state: AdamWState | None = None,
          log: Callable[[TrainStepReport], None] | None = None) -> tuple[VgaeParams, AdamWState]:
    """Epochs of shuffled minibatches (prompts drawn without replacement per epoch)."""
    if not prompts:
        raise ValueError("no training prompts")
    rng = np.random.default_rng([cfg.seed, 0x7124])
    state = state or AdamWState.zeros_like(params)
    steps = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(prompts))
        for start in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                return params, state
            batch = [prompts[i] for i in order[start:start + cfg.batch_size]]
            params, state, report = train_step(params, state, pipeline, batch, cfg, rng)
            steps += 1
            if log is not None:
                log(report)
    return params, state


def evaluate(params: VgaeParams | None, pipeline: Pipeline,
             prompts: Sequence[SyntheticPrompt]) -> EvalReport:
    return pipeline.evaluate(params, prompts)


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path: str | os.PathLike, params: VgaeParams, state: AdamWState,
                    cfg: TrainConfig) -> None:
    """``path`` gets vgae.bin; ``path + '.opt'`` gets the optimizer moments."""
    pio.write_bytes(path, encode_params(params, {"train_config": asdict(cfg)}))
    m = VgaeParams(params.dims, state.m)
    v = VgaeParams(params.dims, state.v)
    blob = (encode_params(m, {"step": state.step, "moment": "m"})
            + encode_params(v, {"step": state.step, "moment": "v"}))
    pio.write_bytes(str(path) + ".opt", blob)


def load_optimizer_state(path: str | os.PathLike) -> AdamWState:
    blob = pio.read_bytes(path)
    # two vgae records back to back; the first ends after its header + body
    header, _ = pio.split_header(blob, path)
    try:
        n_values = sum(int(np.prod(a["shape"])) for a in header["arrays"])
    except (KeyError, TypeError) as exc:
        raise IoFailureError(f"{path}: bad optimizer header: {exc}") from exc
    split = blob.index(b"\n") + 1 + 4 * n_values
    m, extra = decode_params(blob[:split], path)
    v, _ = decode_params(blob[split:], path)
    if set(m.arrays) != set(PARAM_NAMES) or "step" not in extra:
        raise IoFailureError(f"{path}: incomplete optimizer state")
    return AdamWState(int(extra["step"]), dict(m.arrays), dict(v.arrays))


def report_json(report: TrainStepReport, lr: float) -> str:
    return json.dumps({"step": report.step, "mean_reward": round(report.mean_reward, 12),
                       "grad_norm": round(report.grad_norm, 12), "lr": lr}, sort_keys=True)
