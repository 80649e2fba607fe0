"""Style normalization and restitution block.

The block normalizes its input with instance norm, splits the residual the
normalization removed into a kept part and a discarded part using a learned
per-channel gate, and adds the kept part back.  In training mode the
discarded part is also added to the normalized map ("contaminated" branch)
so the dual causality loss can compare both.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import diffcore as dc
from .diffcore import Parameter, Tensor

MAIN = "snr"
CONV = "conv"
DUAL_GATE = "dual_gate"
VARIANTS = (MAIN, CONV, DUAL_GATE)


def hidden_width(channels: int, r: int) -> int:
    if channels < 1 or r < 1:
        raise ValueError("channels and r must be positive")
    return max(1, channels // r)


def _normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


@dataclass
class GateParams:
    """Two bias-free FC layers of the SE-style gate: c -> c//r -> c."""

    w1: Parameter
    w2: Parameter

    @classmethod
    def init(cls, channels: int, r: int, rng: np.random.Generator, dtype=np.float32, prefix: str = "gate"):
        h = hidden_width(channels, r)
        return cls(
            w1=Parameter(_normal(rng, (h, channels), np.sqrt(2.0 / channels), dtype), name=f"{prefix}.w1"),
            w2=Parameter(_normal(rng, (channels, h), np.sqrt(1.0 / h), dtype), name=f"{prefix}.w2"),
        )

    def parameters(self) -> dict[str, Parameter]:
        return {"w1": self.w1, "w2": self.w2}


@dataclass
class SnrParams:
    gamma: Parameter
    beta: Parameter
    gate: GateParams
    r: int = 16

    @classmethod
    def init(cls, channels: int, r: int = 16, rng: np.random.Generator | None = None, dtype=np.float32):
        rng = np.random.default_rng(0) if rng is None else rng
        return cls(
            gamma=Parameter(np.ones(channels, dtype=dtype), name="gamma"),
            beta=Parameter(np.zeros(channels, dtype=dtype), name="beta"),
            gate=GateParams.init(channels, r, rng, dtype),
            r=r,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def parameters(self) -> dict[str, Parameter]:
        out = {"gamma": self.gamma, "beta": self.beta}
        out.update({f"gate.{k}": v for k, v in self.gate.parameters().items()})
        return out


@dataclass
class ConvSplitParams:
    """1x1 convolutions for the convolutional split variant (no bias)."""

    gamma: Parameter
    beta: Parameter
    w_plus: Parameter
    w_minus: Parameter

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator | None = None, dtype=np.float32):
        rng = np.random.default_rng(0) if rng is None else rng
        std = np.sqrt(1.0 / channels)
        return cls(
            gamma=Parameter(np.ones(channels, dtype=dtype), name="gamma"),
            beta=Parameter(np.zeros(channels, dtype=dtype), name="beta"),
            w_plus=Parameter(_normal(rng, (channels, channels, 1, 1), std, dtype), name="w_plus"),
            w_minus=Parameter(_normal(rng, (channels, channels, 1, 1), std, dtype), name="w_minus"),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def parameters(self) -> dict[str, Parameter]:
        return {"gamma": self.gamma, "beta": self.beta, "w_plus": self.w_plus, "w_minus": self.w_minus}


@dataclass
class DualGateParams:
    """Two unshared gates, one per residual half."""

    gamma: Parameter
    beta: Parameter
    gate_plus: GateParams
    gate_minus: GateParams
    r: int = 16

    @classmethod
    def init(cls, channels: int, r: int = 16, rng: np.random.Generator | None = None, dtype=np.float32):
        rng = np.random.default_rng(0) if rng is None else rng
        return cls(
            gamma=Parameter(np.ones(channels, dtype=dtype), name="gamma"),
            beta=Parameter(np.zeros(channels, dtype=dtype), name="beta"),
            gate_plus=GateParams.init(channels, r, rng, dtype, "gate_plus"),
            gate_minus=GateParams.init(channels, r, rng, dtype, "gate_minus"),
            r=r,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def parameters(self) -> dict[str, Parameter]:
        out = {"gamma": self.gamma, "beta": self.beta}
        out.update({f"gate_plus.{k}": v for k, v in self.gate_plus.parameters().items()})
        out.update({f"gate_minus.{k}": v for k, v in self.gate_minus.parameters().items()})
        return out


@dataclass
class SnrTrace:
    """Every intermediate of one forward pass.

    ``R_minus``, ``F_minus`` and ``f_minus`` are None in inference mode.  ``a``
    is the per-sample gate [n, c] (the kept-part gate for the dual-gate
    variant, None for the conv variant); ``a_minus`` is only set by the
    dual-gate variant.
    """

    F: Tensor
    F_tilde: Tensor
    R: Tensor
    a: Optional[Tensor]
    R_plus: Tensor
    R_minus: Optional[Tensor]
    F_plus: Tensor
    F_minus: Optional[Tensor]
    f_tilde: Tensor
    f_plus: Tensor
    f_minus: Optional[Tensor]
    a_minus: Optional[Tensor] = None

    def arrays(self) -> dict[str, np.ndarray]:
        """Numpy views of the populated fields, e.g. for SNRT dumps."""
        return {f.name: getattr(self, f.name).data for f in fields(self) if getattr(self, f.name) is not None}


def _check_input(F: Tensor, channels: int) -> None:
    if F.ndim != 4:
        raise ValueError(f"SNR input must be [n, c, h, w], got {F.shape}")
    if F.shape[1] != channels:
        raise ValueError(f"SNR built for {channels} channels, got input with {F.shape[1]}")
    if F.shape[2] * F.shape[3] < 1:
        raise ValueError("zero spatial extent")


def pooled_normalized(F: Tensor, beta: Tensor) -> Tensor:
    """Spatial mean of the instance-normalized map, which is exactly beta per sample.

    Pooling the computed map instead would return beta plus rounding noise;
    when beta is near zero that noise alone decides the cosine distances.
    """
    ones = Tensor(np.ones((F.shape[0], 1), dtype=beta.dtype))
    return ones * dc.reshape(beta, (1, -1))


def channel_gate(R: Tensor, gate: GateParams) -> Tensor:
    """a = sigmoid(W2 relu(W1 pool(R))), one gate vector per sample."""
    if R.ndim != 4 or R.shape[1] != gate.w1.shape[1]:
        raise ValueError(f"gate built for {gate.w1.shape[1]} channels, residual is {R.shape}")
    z = dc.relu(dc.linear(dc.global_avg_pool(R), gate.w1))
    return dc.sigmoid(dc.linear(z, gate.w2))


def disentangle(R: Tensor, a: Tensor) -> tuple[Tensor, Tensor]:
    """Split R channel-wise into a*R and (1-a)*R."""
    return dc.scale_channels(R, a), dc.scale_channels(R, 1.0 - a)


def snr_forward(
    F: Tensor,
    params: SnrParams,
    training: bool = True,
    gate_override: float | None = None,
    eps: float = dc.IN_EPS,
) -> SnrTrace:
    """Run the block. ``gate_override`` pins every gate entry to a constant (tests only)."""
    _check_input(F, params.channels)
    F_tilde = dc.instance_norm(F, params.gamma, params.beta, eps)
    R = F - F_tilde
    if gate_override is None:
        a = channel_gate(R, params.gate)
    else:
        a = Tensor(np.full(F.shape[:2], gate_override, dtype=F.dtype))
    R_plus = dc.scale_channels(R, a)
    F_plus = F_tilde + R_plus
    R_minus = F_minus = f_minus = None
    if training:
        R_minus = dc.scale_channels(R, 1.0 - a)
        F_minus = F_tilde + R_minus
        f_minus = dc.global_avg_pool(F_minus)
    return SnrTrace(
        F=F, F_tilde=F_tilde, R=R, a=a,
        R_plus=R_plus, R_minus=R_minus,
        F_plus=F_plus, F_minus=F_minus,
        f_tilde=pooled_normalized(F, params.beta),
        f_plus=dc.global_avg_pool(F_plus),
        f_minus=f_minus,
    )


def snr_variant_forward(F: Tensor, variant: str, params, training: bool = True, eps: float = dc.IN_EPS) -> SnrTrace:
    """Design-choice variants: ``conv`` (1x1 conv + ReLU splits) or ``dual_gate``."""
    if variant == MAIN:
        return snr_forward(F, params, training, eps=eps)
    if variant not in (CONV, DUAL_GATE):
        raise ValueError(f"unknown SNR variant {variant!r}")
    _check_input(F, params.channels)
    F_tilde = dc.instance_norm(F, params.gamma, params.beta, eps)
    R = F - F_tilde
    a = a_minus = None
    if variant == CONV:
        R_plus = dc.relu(dc.conv2d(R, params.w_plus, padding=0))
    else:
        a = channel_gate(R, params.gate_plus)
        R_plus = dc.scale_channels(R, a)
    F_plus = F_tilde + R_plus
    R_minus = F_minus = f_minus = None
    if training:
        if variant == CONV:
            R_minus = dc.relu(dc.conv2d(R, params.w_minus, padding=0))
        else:
            a_minus = channel_gate(R, params.gate_minus)
            R_minus = dc.scale_channels(R, a_minus)
        F_minus = F_tilde + R_minus
        f_minus = dc.global_avg_pool(F_minus)
    return SnrTrace(
        F=F, F_tilde=F_tilde, R=R, a=a,
        R_plus=R_plus, R_minus=R_minus,
        F_plus=F_plus, F_minus=F_minus,
        f_tilde=pooled_normalized(F, params.beta),
        f_plus=dc.global_avg_pool(F_plus),
        f_minus=f_minus,
        a_minus=a_minus,
    )
