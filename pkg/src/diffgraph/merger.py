"""Softmax merging of checkpoint matrices and low-rank deltas."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import persistence as pio
from .errors import (
    EmptyInputError,
    IoFailureError,
    ShapeMismatchError,
    SliceMismatchError,
)

CKPT = "CKPT"
PEFT = "PEFT"


@dataclass(eq=False)
class CkptPayload:
    """Full parameter matrix of a checkpoint expert, shape (d_out, d_task)."""

    W: np.ndarray

    kind = CKPT

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float32)
        if self.W.ndim != 2 or not np.all(np.isfinite(self.W)):
            raise ShapeMismatchError("CKPT payload must be a finite 2-D matrix")

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.shape

    def dense(self) -> np.ndarray:
        return self.W.astype(np.float64)

    def same_as(self, other) -> bool:
        return isinstance(other, CkptPayload) and self.W.tobytes() == other.W.tobytes() \
            and self.W.shape == other.W.shape


@dataclass(eq=False)
class PeftPayload:
    """Low-rank delta ``B @ A`` with B (d_out, r) and A (r, d_task)."""

    B: np.ndarray
    A: np.ndarray

    kind = PEFT

    def __post_init__(self):
        self.B = np.asarray(self.B, dtype=np.float32)
        self.A = np.asarray(self.A, dtype=np.float32)
        if self.B.ndim != 2 or self.A.ndim != 2 or self.B.shape[1] != self.A.shape[0]:
            raise ShapeMismatchError(
                f"PEFT factors do not chain: B{self.B.shape} A{self.A.shape}"
            )
        if self.B.shape[1] < 1:
            raise ShapeMismatchError("PEFT rank must be >= 1")
        if not (np.all(np.isfinite(self.B)) and np.all(np.isfinite(self.A))):
            raise ShapeMismatchError("PEFT factors must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.B.shape[0], self.A.shape[1])

    @property
    def rank(self) -> int:
        return self.B.shape[1]

    def dense(self) -> np.ndarray:
        return self.B.astype(np.float64) @ self.A.astype(np.float64)

    def same_as(self, other) -> bool:
        return (isinstance(other, PeftPayload)
                and self.B.shape == other.B.shape and self.A.shape == other.A.shape
                and self.B.tobytes() == other.B.tobytes()
                and self.A.tobytes() == other.A.tobytes())


ExpertPayload = Union[CkptPayload, PeftPayload]


@dataclass(eq=False)
class MergedModel:
    W_bold: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.W_bold)):
            raise ShapeMismatchError("merged parameters are not finite")


def softmax(v: Sequence[float] | np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise EmptyInputError("softmax of an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input must be finite")
    e = np.exp(v - v.max())
    return e / e.sum()


def _check_shapes(payloads: Sequence[ExpertPayload], shape: tuple[int, int] | None):
    for p in payloads:
        if shape is None:
            shape = p.shape
        elif p.shape != shape:
            raise ShapeMismatchError(f"payload shape {p.shape} != {shape}")
    return shape


def merge_weights(w_ckpt, w_peft, ckpt_payloads: Sequence[ExpertPayload],
                  peft_payloads: Sequence[ExpertPayload]) -> MergedModel:
    """``W + dW`` with softmax-normalised weights applied per group."""
    w_ckpt = np.asarray(w_ckpt, dtype=np.float64)
    w_peft = np.asarray(w_peft, dtype=np.float64)
    if len(ckpt_payloads) == 0:
        raise SliceMismatchError("at least one CKPT payload is required")
    if w_ckpt.shape != (len(ckpt_payloads),) or w_peft.shape != (len(peft_payloads),):
        raise SliceMismatchError(
            f"coefficients ({w_ckpt.size}, {w_peft.size}) do not match "
            f"payloads ({len(ckpt_payloads)}, {len(peft_payloads)})"
        )
    if any(p.kind != CKPT for p in ckpt_payloads) or any(p.kind != PEFT for p in peft_payloads):
        raise SliceMismatchError("payload kinds do not match their group")
    shape = _check_shapes(list(ckpt_payloads) + list(peft_payloads), None)

    if len(ckpt_payloads) == 1 and len(peft_payloads) == 0:
        # exact identity: softmax([x]) == [1] and dW == 0
        return MergedModel(ckpt_payloads[0].W.astype(np.float64))

    s = softmax(w_ckpt)
    W = np.zeros(shape, dtype=np.float64)
    for share, p in zip(s, ckpt_payloads):
        W += share * p.dense()
    if len(peft_payloads):
        t = softmax(w_peft)
        for share, p in zip(t, peft_payloads):
            W += share * p.dense()
    return MergedModel(W)


def merge(plan, ckpt_payloads: Sequence[ExpertPayload],
          peft_payloads: Sequence[ExpertPayload]) -> MergedModel:
    """Merge using a MergePlan's coefficient vector and group slices."""
    w = np.asarray(plan.w, dtype=np.float64)
    ck, pf = plan.ckpt_slice, plan.peft_slice
    if ck.start != 0 or ck.stop != pf.start or pf.stop != w.size:
        raise SliceMismatchError("plan slices do not partition the coefficient vector")
    return merge_weights(w[ck], w[pf], ckpt_payloads, peft_payloads)


# -- payload files ---------------------------------------------------------

def encode_payload(payload: ExpertPayload) -> bytes:
    if payload.kind == CKPT:
        body = pio.to_f32_bytes(payload.W)
        header = {"kind": CKPT, "d_out": payload.shape[0], "d_task": payload.shape[1]}
    else:
        body = pio.to_f32_bytes(payload.B) + pio.to_f32_bytes(payload.A)
        header = {"kind": PEFT, "d_out": payload.shape[0], "d_task": payload.shape[1],
                  "r": payload.rank}
    header["dtype"] = pio.DTYPE_TAG
    header["sha256"] = pio.sha256_hex(body)
    return pio.dump_header(header) + body


def decode_payload(blob: bytes, path: str | os.PathLike = "<bytes>") -> ExpertPayload:
    header, body = pio.split_header(blob, path)
    try:
        kind, d_out, d_task = header["kind"], int(header["d_out"]), int(header["d_task"])
    except (KeyError, TypeError, ValueError) as exc:
        raise IoFailureError(f"{path}: bad payload header") from exc
    if kind == CKPT:
        W = pio.from_f32_bytes(body, (d_out, d_task))
        pio.verify_checksum(body, header.get("sha256", ""), str(path))
        return CkptPayload(W)
    if kind == PEFT:
        r = int(header["r"])
        nb = d_out * r * 4
        expected = nb + r * d_task * 4
        if len(body) != expected:
            from .errors import DimensionMismatchError
            raise DimensionMismatchError(f"{path}: payload body length {len(body)} != {expected}")
        pio.verify_checksum(body, header.get("sha256", ""), str(path))
        return PeftPayload(pio.from_f32_bytes(body[:nb], (d_out, r)),
                           pio.from_f32_bytes(body[nb:], (r, d_task)))
    raise IoFailureError(f"{path}: unknown payload kind {kind!r}")


def write_payload(path: str | os.PathLike, payload: ExpertPayload) -> None:
    pio.write_bytes(path, encode_payload(payload))


def read_payload(path: str | os.PathLike) -> ExpertPayload:
    return decode_payload(pio.read_bytes(path), path)
