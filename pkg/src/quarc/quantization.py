"""Per-tensor fake quantization with a straight-through estimator.

Forward is ``s * round(clamp(x / s, -Q_N, Q_P))`` with half-to-even rounding.
Backward passes the upstream gradient where ``x / s`` lies inside the clamp
range and zeroes it elsewhere. The scale gets the LSQ gradient, multiplied by
``scale_grad_factor``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError, NumericError
from .tensor import CustomGradRule, Tensor

SCALE_FLOOR = 1e-8

WEIGHT = "weight-signed"
ACTIVATION = "activation-unsigned"


def quant_bounds(bits: int, mode: str) -> tuple[int, int]:
    if bits < 2:
        raise ConfigError(f"bitwidth must be >= 2, got {bits}")
    if mode == WEIGHT:
        return 2 ** (bits - 1), 2 ** (bits - 1) - 1
    if mode == ACTIVATION:
        return 0, 2**bits - 1
    raise ConfigError(f"unknown quantization mode {mode!r}")


@dataclass
class QuantSpec:
    bits: int
    mode: str = WEIGHT
    scale: Tensor = field(default_factory=lambda: Tensor(np.float32(1.0)))
    scale_grad_factor: float = 1.0
    learnable: bool = True

    def __post_init__(self):
        self.q_n, self.q_p = quant_bounds(self.bits, self.mode)
        if not isinstance(self.scale, Tensor):
            self.scale = Tensor(np.asarray(self.scale, dtype=np.float32))
        self.scale.requires_grad = self.learnable
        if self.scale.item() <= 0:
            raise ContractError("quantization scale must be positive")

    @property
    def s(self) -> float:
        return self.scale.item()

    def project(self) -> None:
        """Clamp the scale back to the positive floor after an update."""
        np.maximum(self.scale.data, SCALE_FLOOR, out=self.scale.data)

    def to_dict(self) -> dict:
        return {
            "bits": self.bits,
            "mode": self.mode,
            "scale": self.s,
            "scale_grad_factor": self.scale_grad_factor,
            "learnable": self.learnable,
        }

    @classmethod
    def from_dict(cls, d: dict, dtype=np.float32) -> "QuantSpec":
        return cls(
            bits=int(d["bits"]),
            mode=d["mode"],
            scale=Tensor(np.asarray(d["scale"], dtype=dtype)),
            scale_grad_factor=float(d["scale_grad_factor"]),
            learnable=bool(d["learnable"]),
        )


def lsq_grad_factor(n_elements: int, q_p: int) -> float:
    return 1.0 / math.sqrt(n_elements * q_p)


def init_scale(values, spec_or_qp) -> float:
    """Calibrated starting scale ``2 * mean|v| / sqrt(Q_P)``, floored at 1e-8."""
    v = np.asarray(values.data if isinstance(values, Tensor) else values, dtype=np.float64)
    if v.size == 0:
        raise ContractError("init_scale needs at least one value")
    q_p = spec_or_qp.q_p if isinstance(spec_or_qp, QuantSpec) else int(spec_or_qp)
    return max(2.0 * float(np.mean(np.abs(v))) / math.sqrt(q_p), SCALE_FLOOR)


def _fq(x: np.ndarray, s, q_n: int, q_p: int):
    with np.errstate(over="ignore"):  # huge ratios saturate in the clamp
        v = x / s
    k = np.round(np.clip(v, -q_n, q_p))  # np.round is half-to-even
    return (k * s).astype(x.dtype, copy=False), v, k


def quantize_forward(x, spec: QuantSpec) -> np.ndarray:
    """Quantize-dequantize an array (no graph recording)."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if not np.all(np.isfinite(x)):
        raise NumericError("quantize_forward: non-finite input")
    s = spec.scale.data.astype(x.dtype) if x.dtype.kind == "f" else spec.s
    if s <= 0:
        raise ContractError("quantize_forward: scale must be positive")
    return _fq(x, s, spec.q_n, spec.q_p)[0]


def _ste_grads(upstream: np.ndarray, v: np.ndarray, k: np.ndarray, q_n: int, q_p: int, g: float):
    inside = (v >= -q_n) & (v <= q_p)
    grad_x = np.where(inside, upstream, 0).astype(upstream.dtype)
    dq_ds = np.where(inside, k - v, np.where(v < -q_n, -q_n, q_p))
    grad_s = float(np.sum(upstream.astype(np.float64) * dq_ds)) * g
    return grad_x, grad_s


def quantize_backward(upstream, x, spec: QuantSpec) -> tuple[np.ndarray, float]:
    """Straight-through gradient for ``x`` and the LSQ gradient for the scale."""
    upstream = np.asarray(upstream)
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if upstream.shape != x.shape:
        raise ContractError(f"quantize_backward: shapes {upstream.shape} vs {x.shape}")
    s = spec.scale.data.astype(x.dtype)
    _, v, k = _fq(x, s, spec.q_n, spec.q_p)
    return _ste_grads(upstream, v, k, spec.q_n, spec.q_p, spec.scale_grad_factor)


def fake_quant(x: Tensor, spec: QuantSpec) -> Tensor:
    """Graph-recorded fake quantization node for ``x`` and the spec's scale."""
    q_n, q_p, g = spec.q_n, spec.q_p, spec.scale_grad_factor

    def fwd(xd, sd):
        if sd <= 0:
            raise ContractError("fake_quant: scale must be positive")
        out, v, k = _fq(xd, sd.astype(xd.dtype), q_n, q_p)
        return out, (v, k, sd)

    def bwd(up, ctx):
        v, k, sd = ctx
        gx, gs = _ste_grads(up, v, k, q_n, q_p, g)
        return gx, np.asarray(gs, dtype=sd.dtype).reshape(sd.shape)

    return CustomGradRule("fake_quant", fwd, bwd)(x, spec.scale)


def make_spec(values, bits: int, mode: str = WEIGHT, learnable: bool = True,
              dtype=np.float32, n_elements: Optional[int] = None) -> QuantSpec:
    """Build a spec whose scale is calibrated from ``values``."""
    q_n, q_p = quant_bounds(bits, mode)
    v = np.asarray(values.data if isinstance(values, Tensor) else values)
    s = init_scale(v, q_p)
    n = n_elements if n_elements is not None else v.size
    return QuantSpec(
        bits=bits,
        mode=mode,
        scale=Tensor(np.asarray(s, dtype=dtype)),
        scale_grad_factor=lsq_grad_factor(n, q_p),
        learnable=learnable,
    )
