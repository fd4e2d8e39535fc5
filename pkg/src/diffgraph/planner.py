"""Merging planner: a VGAE that turns an activated subgraph into merge coefficients.

Encoder: two independent two-layer GCNs produce the mean and log-std of a
Gaussian latent per node, over a weighted adjacency whose expert/reference
weights are ``softplus(edge_proj . scores)``. Decoder: an FFN reads
``[h_prompt, h_expert_i]`` and emits ``(a_i, b_i)``; the coefficient for
expert ``i`` follows ``Beta(1 + e^a_i, 1 + e^b_i)``.

Gradients are hand-derived (reverse mode) through the log-density of the
sampled coefficients, the reparameterised Gaussian latent, both GCNs and the
normalised adjacency, including ``edge_proj``.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np
from scipy.special import betaln, digamma, polygamma

from . import persistence as pio
from .errors import (
    DimensionMismatchError,
    FormatVersionMismatchError,
    IoFailureError,
    NonFiniteOutputError,
)
from .graph_store import Subgraph

EXP_CLAMP = 30.0
INIT_EDGE_PROJ = -2.0
INIT_SIG_W2 = -1.5
VGAE_FORMAT_VERSION = 1
_W_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True)
class VgaeDims:
    d_node: int = 32
    d_h1: int = 64
    d_h: int = 32
    d_ffn: int = 64
    d_edge: int = 5

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "edge_proj": (self.d_edge,),
            "mu_W1": (self.d_node, self.d_h1),
            "mu_W2": (self.d_h1, self.d_h),
            "sig_W1": (self.d_node, self.d_h1),
            "sig_W2": (self.d_h1, self.d_h),
            "dec_W1": (2 * self.d_h, self.d_ffn),
            "dec_b1": (self.d_ffn,),
            "dec_W2": (self.d_ffn, 2),
            "dec_b2": (2,),
        }


PARAM_NAMES = tuple(VgaeDims().shapes())
ENCODER_NAMES = ("edge_proj", "mu_W1", "mu_W2", "sig_W1", "sig_W2")
DECODER_NAMES = ("dec_W1", "dec_b1", "dec_W2", "dec_b2")


@dataclass(eq=False)
class VgaeParams:
    dims: VgaeDims
    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        shapes = self.dims.shapes()
        if set(self.arrays) != set(shapes):
            raise DimensionMismatchError(f"parameter names {sorted(self.arrays)} != {sorted(shapes)}")
        for name, shape in shapes.items():
            arr = np.asarray(self.arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise DimensionMismatchError(f"{name}: shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise NonFiniteOutputError(f"{name} holds non-finite values")
            self.arrays[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in PARAM_NAMES:
            yield name, self.arrays[name]

    @classmethod
    def zeros(cls, dims: VgaeDims) -> "VgaeParams":
        return cls(dims, {n: np.zeros(s) for n, s in dims.shapes().items()})

    @classmethod
    def initialize(cls, dims: VgaeDims, seed: int = 0) -> "VgaeParams":
        """Glorot-uniform hidden layers with three deliberate offsets.

        The decoder output layer starts at zero, so every expert starts at
        w = 0.5. ``edge_proj`` starts negative: calibration edges then weigh
        less than the self loops and expert rows stay distinguishable after
        two rounds of smoothing. ``sig_W2`` starts negative so that the
        sampled latent noise is small next to ``mu``.
        """
        rng = np.random.default_rng([seed, 0x56474145])
        arrays = {}
        for name, shape in dims.shapes().items():
            if name in ("dec_W2", "dec_b2", "dec_b1"):
                arrays[name] = np.zeros(shape)
            elif name == "edge_proj":
                arrays[name] = np.full(shape, INIT_EDGE_PROJ)
            elif name == "sig_W2":
                arrays[name] = np.full(shape, INIT_SIG_W2)
            else:
                limit = np.sqrt(6.0 / (shape[0] + shape[1]))
                arrays[name] = rng.uniform(-limit, limit, shape)
        return cls(dims, arrays)

    def copy(self) -> "VgaeParams":
        return VgaeParams(self.dims, {n: a.copy() for n, a in self.arrays.items()})

    def same_as(self, other: "VgaeParams") -> bool:
        return self.dims == other.dims and all(
            self.arrays[n].tobytes() == other.arrays[n].tobytes() for n in PARAM_NAMES)

    def as_float32(self) -> "VgaeParams":
        """Values rounded to what ``vgae.bin`` can hold."""
        return VgaeParams(self.dims, {n: a.astype(np.float32).astype(np.float64)
                                      for n, a in self.arrays.items()})


@dataclass(eq=False)
class EncodedSubgraph:
    mu: np.ndarray          # (1 + E, d_h)
    log_sigma: np.ndarray
    h: np.ndarray
    eps: np.ndarray | None  # noise used in sample mode (rng trace)


def _clamp(x: np.ndarray) -> np.ndarray:
    # both sides: above, exp overflows; below, 1 + exp(x) rounds to exactly 1
    return np.clip(x, -EXP_CLAMP, EXP_CLAMP)


@dataclass(eq=False)
class BetaParams:
    a: np.ndarray
    b: np.ndarray

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 + np.exp(_clamp(self.a))

    @property
    def beta(self) -> np.ndarray:
        return 1.0 + np.exp(_clamp(self.b))

    def mean(self) -> np.ndarray:
        al, be = self.alpha, self.beta
        return al / (al + be)


@dataclass(eq=False)
class MergePlan:
    w: np.ndarray
    ckpt_slice: slice
    peft_slice: slice
    log_prob: float | None = None
    beta: BetaParams | None = None


# -- numerics ---------------------------------------------------------------

def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def beta_log_pdf(w, alpha, beta) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return (alpha - 1.0) * np.log(w) + (beta - 1.0) * np.log1p(-w) - betaln(alpha, beta)


def beta_entropy(alpha, beta) -> np.ndarray:
    """Differential entropy of Beta(alpha, beta), elementwise."""
    alpha, beta = np.asarray(alpha, dtype=np.float64), np.asarray(beta, dtype=np.float64)
    return (betaln(alpha, beta) - (alpha - 1) * digamma(alpha) - (beta - 1) * digamma(beta)
            + (alpha + beta - 2) * digamma(alpha + beta))


def beta_entropy_grad(alpha, beta) -> tuple[np.ndarray, np.ndarray]:
    """(dH/dalpha, dH/dbeta) of the Beta entropy."""
    t = (alpha + beta - 2) * polygamma(1, alpha + beta)
    return (t - (alpha - 1) * polygamma(1, alpha), t - (beta - 1) * polygamma(1, beta))


def sample_beta(rng: np.random.Generator, alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Beta draws via numpy (two-Gamma construction), kept strictly inside (0, 1)."""
    w = rng.beta(alpha, beta)
    return np.clip(w, _W_EPS, 1.0 - _W_EPS)


# -- forward ----------------------------------------------------------------

def _check_dims(sub: Subgraph, params: VgaeParams) -> None:
    d = params.dims
    if sub.user_prompt_feature.shape != (d.d_node,):
        raise DimensionMismatchError(
            f"subgraph node features have d_node={sub.user_prompt_feature.shape}, params expect {d.d_node}")
    if sub.scores.shape[2:] != (d.d_edge,) and sub.n_experts:
        raise DimensionMismatchError(f"edge features have d_edge={sub.scores.shape[2]}, params expect {d.d_edge}")
    if sub.n_experts < 1:
        raise DimensionMismatchError("subgraph has no expert nodes")


def _adjacency(sub: Subgraph, edge_proj: np.ndarray):
    E, R = sub.n_experts, len(sub.ref_prompts)
    n = 1 + E + R
    if sub.scores.shape != (E, R, edge_proj.shape[0]):
        raise DimensionMismatchError(
            f"scores shape {sub.scores.shape} vs ({E}, {R}, {edge_proj.shape[0]})")
    pre = sub.scores.astype(np.float64) @ edge_proj          # (E, R)
    S = softplus(pre)
    M = np.eye(n)
    M[0, 1:1 + E] = sub.prompt_edges
    M[1:1 + E, 0] = sub.prompt_edges
    M[1:1 + E, 1 + E:] = S
    M[1 + E:, 1:1 + E] = S.T
    deg = M.sum(axis=1)
    r = 1.0 / np.sqrt(deg)
    A_hat = M * np.outer(r, r)     # outer product keeps A_hat bitwise symmetric
    return A_hat, M, r, pre


def build_adjacency(sub: Subgraph, edge_proj: np.ndarray) -> np.ndarray:
    """Symmetric-normalised ``D^-1/2 (A + I) D^-1/2`` of the activated subgraph."""
    return _adjacency(sub, np.asarray(edge_proj, dtype=np.float64))[0]


@dataclass(eq=False)
class _Trace:
    sub: Subgraph
    A_hat: np.ndarray
    M: np.ndarray
    r: np.ndarray
    pre: np.ndarray
    X: np.ndarray
    AX: np.ndarray
    Z1m: np.ndarray
    H1m: np.ndarray
    Z1s: np.ndarray
    H1s: np.ndarray
    mu: np.ndarray
    log_sigma: np.ndarray
    eps: np.ndarray | None
    h: np.ndarray
    dec_in: np.ndarray | None = None
    dec_z: np.ndarray | None = None
    dec_g: np.ndarray | None = None
    a: np.ndarray | None = None
    b: np.ndarray | None = None


def _encode_trace(sub: Subgraph, params: VgaeParams, eps: np.ndarray | None) -> _Trace:
    _check_dims(sub, params)
    A_hat, M, r, pre = _adjacency(sub, params["edge_proj"])
    X = sub.node_features()
    AX = A_hat @ X
    Z1m = AX @ params["mu_W1"]
    H1m = np.maximum(Z1m, 0.0)
    Z1s = AX @ params["sig_W1"]
    H1s = np.maximum(Z1s, 0.0)
    keep = 1 + sub.n_experts
    mu = (A_hat @ (H1m @ params["mu_W2"]))[:keep]
    log_sigma = (A_hat @ (H1s @ params["sig_W2"]))[:keep]
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(log_sigma))):
        raise NonFiniteOutputError("encoder produced non-finite latents")
    h = mu if eps is None else mu + np.exp(log_sigma) * eps
    return _Trace(sub, A_hat, M, r, pre, X, AX, Z1m, H1m, Z1s, H1s, mu, log_sigma, eps, h)


def _decode_trace(tr: _Trace, params: VgaeParams) -> _Trace:
    h = tr.h
    E = h.shape[0] - 1
    tr.dec_in = np.concatenate([np.broadcast_to(h[0], (E, h.shape[1])), h[1:]], axis=1)
    tr.dec_z = tr.dec_in @ params["dec_W1"] + params["dec_b1"]
    tr.dec_g = np.maximum(tr.dec_z, 0.0)
    out = tr.dec_g @ params["dec_W2"] + params["dec_b2"]
    tr.a, tr.b = out[:, 0].copy(), out[:, 1].copy()
    if not (np.all(np.isfinite(tr.a)) and np.all(np.isfinite(tr.b))):
        raise NonFiniteOutputError("decoder produced non-finite Beta logits")
    return tr


def encode(sub: Subgraph, params: VgaeParams, mode: str = "mean",
           seed: int | None = None) -> EncodedSubgraph:
    """Gaussian latents for the prompt and expert nodes.

    ``mode="sample"`` draws ``h = mu + sigma * eps`` with ``eps`` from ``seed``;
    ``mode="mean"`` returns ``h = mu``.
    """
    if mode == "mean":
        tr = _encode_trace(sub, params, None)
    elif mode == "sample":
        rng = np.random.default_rng(seed)
        eps = rng.standard_normal((1 + sub.n_experts, params.dims.d_h))
        tr = _encode_trace(sub, params, eps)
    else:
        raise ValueError(f"unknown encode mode {mode!r}")
    return EncodedSubgraph(tr.mu, tr.log_sigma, tr.h, tr.eps)


def decode(enc: EncodedSubgraph, params: VgaeParams) -> BetaParams:
    if enc.h.shape[0] < 2:
        raise DimensionMismatchError("need at least one expert row to decode")
    h = enc.h
    E = h.shape[0] - 1
    x = np.concatenate([np.broadcast_to(h[0], (E, h.shape[1])), h[1:]], axis=1)
    g = np.maximum(x @ params["dec_W1"] + params["dec_b1"], 0.0)
    out = g @ params["dec_W2"] + params["dec_b2"]
    if not np.all(np.isfinite(out)):
        raise NonFiniteOutputError("decoder produced non-finite Beta logits")
    return BetaParams(out[:, 0].copy(), out[:, 1].copy())


def _slices(sub: Subgraph) -> tuple[slice, slice]:
    return slice(0, sub.n_ckpt), slice(sub.n_ckpt, sub.n_experts)


def plan(sub: Subgraph, params: VgaeParams, mode: str = "infer",
         seed: int | None = None) -> MergePlan:
    """Merge coefficients: Beta means (``infer``) or seeded Beta samples (``train``)."""
    ck, pf = _slices(sub)
    if mode == "infer":
        bp = decode(encode(sub, params, "mean"), params)
        return MergePlan(bp.mean(), ck, pf, None, bp)
    if mode == "train":
        rollout = sample_rollout(sub, params, seed)
        return MergePlan(rollout.w, ck, pf, rollout.log_prob, rollout.beta)
    raise ValueError(f"unknown plan mode {mode!r}")


# -- training rollouts and gradients -----------------------------------------

@dataclass(eq=False)
class Rollout:
    """One stochastic plan with everything needed to differentiate its log-density."""

    trace: _Trace
    w: np.ndarray
    log_prob: float
    beta: BetaParams


def frozen_rollout(sub: Subgraph, params: VgaeParams, eps: np.ndarray, w: np.ndarray) -> Rollout:
    """Re-evaluate a rollout at fixed noise ``eps`` and fixed coefficients ``w``."""
    tr = _decode_trace(_encode_trace(sub, params, eps), params)
    bp = BetaParams(tr.a, tr.b)
    lp = float(np.sum(beta_log_pdf(w, bp.alpha, bp.beta)))
    return Rollout(tr, np.asarray(w, dtype=np.float64), lp, bp)


def sample_rollout(sub: Subgraph, params: VgaeParams, seed) -> Rollout:
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((1 + sub.n_experts, params.dims.d_h))
    tr = _decode_trace(_encode_trace(sub, params, eps), params)
    bp = BetaParams(tr.a, tr.b)
    w = sample_beta(rng, bp.alpha, bp.beta)
    lp = float(np.sum(beta_log_pdf(w, bp.alpha, bp.beta)))
    return Rollout(tr, w, lp, bp)


def kl_to_prior(rollout: Rollout) -> float:
    """Mean over latent rows of KL(N(mu, sigma^2) || N(0, I))."""
    tr = rollout.trace
    ls = tr.log_sigma
    kl = 0.5 * np.sum(tr.mu ** 2 + np.exp(2 * ls) - 1.0 - 2.0 * ls, axis=1)
    return float(kl.mean())


def rollout_gradient(rollout: Rollout, params: VgaeParams, lp_coef: float,
                     kl_weight: float = 0.0, ent_coef: float = 0.0) -> dict[str, np.ndarray]:
    """Gradient of ``lp_coef * log_prob + kl_weight * KL + ent_coef * sum(H)``.

    ``H`` is the entropy of each expert's Beta; a negative ``ent_coef``
    rewards spread.
    """
    tr = rollout.trace

    # log Beta density -> (a, b)
    al, be = rollout.beta.alpha, rollout.beta.beta
    w = rollout.w
    psi_ab = digamma(al + be)
    dal = np.log(w) - digamma(al) + psi_ab
    dbe = np.log1p(-w) - digamma(be) + psi_ab
    if ent_coef:
        hal, hbe = beta_entropy_grad(al, be)
        dal = lp_coef * dal + ent_coef * hal
        dbe = lp_coef * dbe + ent_coef * hbe
    else:
        dal, dbe = lp_coef * dal, lp_coef * dbe
    da = dal * np.where(np.abs(tr.a) < EXP_CLAMP, np.exp(_clamp(tr.a)), 0.0)
    db = dbe * np.where(np.abs(tr.b) < EXP_CLAMP, np.exp(_clamp(tr.b)), 0.0)
    return backprop_logits(tr, params, da, db, kl_weight)


def backprop_logits(tr: _Trace, params: VgaeParams, da: np.ndarray, db: np.ndarray,
                    kl_weight: float = 0.0) -> dict[str, np.ndarray]:
    """Reverse pass from upstream gradients on the decoder logits ``(a, b)``."""
    sub = tr.sub
    E = sub.n_experts
    d_h = params.dims.d_h
    grads = {n: np.zeros_like(a) for n, a in params.items()}

    # decoder FFN
    dO = np.stack([da, db], axis=1)                          # (E, 2)
    grads["dec_W2"] = tr.dec_g.T @ dO
    grads["dec_b2"] = dO.sum(axis=0)
    dZ = (dO @ params["dec_W2"].T) * (tr.dec_z > 0)
    grads["dec_W1"] = tr.dec_in.T @ dZ
    grads["dec_b1"] = dZ.sum(axis=0)
    dIn = dZ @ params["dec_W1"].T
    dh = np.zeros((1 + E, d_h))
    dh[0] = dIn[:, :d_h].sum(axis=0)
    dh[1:] = dIn[:, d_h:]

    # reparameterised latent
    sigma = np.exp(tr.log_sigma)
    dmu = dh.copy()
    dls = dh * sigma * tr.eps if tr.eps is not None else np.zeros_like(dh)
    if kl_weight:
        rows = tr.mu.shape[0]
        dmu += kl_weight * tr.mu / rows
        dls += kl_weight * (sigma ** 2 - 1.0) / rows

    n = tr.A_hat.shape[0]
    A_hat = tr.A_hat
    dA = np.zeros((n, n))
    dAX = np.zeros_like(tr.AX)
    for dout_kept, Z1, H1, W1n, W2n in (
            (dmu, tr.Z1m, tr.H1m, "mu_W1", "mu_W2"),
            (dls, tr.Z1s, tr.H1s, "sig_W1", "sig_W2")):
        dout = np.zeros((n, d_h))
        dout[:1 + E] = dout_kept
        P = H1 @ params[W2n]
        dA += dout @ P.T
        dP = A_hat.T @ dout
        grads[W2n] = H1.T @ dP
        dZ1 = (dP @ params[W2n].T) * (Z1 > 0)
        grads[W1n] = tr.AX.T @ dZ1
        dAX += dZ1 @ params[W1n].T
    dA += dAX @ tr.X.T

    # normalised adjacency -> raw weights -> edge_proj
    r, M = tr.r, tr.M
    dM = dA * r[:, None] * r[None, :]
    g = dA * M
    dr = (g * r[None, :]).sum(axis=1) + (g * r[:, None]).sum(axis=0)
    ddeg = dr * (-0.5) * r ** 3
    dM += ddeg[:, None]
    dS = dM[1:1 + E, 1 + E:] + dM[1 + E:, 1:1 + E].T      # (E, R)
    dpre = dS * sigmoid(tr.pre)
    grads["edge_proj"] = np.einsum("er,erk->k", dpre, sub.scores.astype(np.float64))
    return grads


# -- vgae.bin ---------------------------------------------------------------

def encode_params(params: VgaeParams, extra: dict | None = None) -> bytes:
    arrays = []
    chunks = []
    for name, arr in params.items():
        mat = arr.reshape(1, -1) if arr.ndim == 1 else arr
        arrays.append({"name": name, "shape": list(arr.shape)})
        chunks.append(pio.to_f32_bytes(mat))
    body = b"".join(chunks)
    header = {"format_version": VGAE_FORMAT_VERSION, "dims": asdict(params.dims),
              "arrays": arrays, "dtype": pio.DTYPE_TAG, "sha256": pio.sha256_hex(body)}
    if extra:
        header["extra"] = extra
    return pio.dump_header(header) + body


def decode_params(blob: bytes, path: str | os.PathLike = "<bytes>") -> tuple[VgaeParams, dict]:
    header, body = pio.split_header(blob, path)
    if header.get("format_version") != VGAE_FORMAT_VERSION:
        raise FormatVersionMismatchError(
            f"{path}: vgae format_version {header.get('format_version')!r}")
    try:
        dims = VgaeDims(**header["dims"])
        layout = [(a["name"], tuple(a["shape"])) for a in header["arrays"]]
    except (KeyError, TypeError) as exc:
        raise IoFailureError(f"{path}: bad vgae header: {exc}") from exc
    total = sum(int(np.prod(s)) for _, s in layout) * 4
    if len(body) != total:
        raise DimensionMismatchError(f"{path}: body holds {len(body)} bytes, layout needs {total}")
    pio.verify_checksum(body, header.get("sha256", ""), str(path))
    arrays, pos = {}, 0
    for name, shape in layout:
        nbytes = int(np.prod(shape)) * 4
        arrays[name] = pio.from_f32_bytes(body[pos:pos + nbytes], shape).astype(np.float64)
        pos += nbytes
    return VgaeParams(dims, arrays), header.get("extra", {})


def save_params(path: str | os.PathLike, params: VgaeParams, extra: dict | None = None) -> None:
    pio.write_bytes(path, encode_params(params, extra))


def load_params(path: str | os.PathLike) -> VgaeParams:
    return decode_params(pio.read_bytes(path), path)[0]
