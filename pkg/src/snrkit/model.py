"""Four-stage toy ReID backbone with a pluggable module after every stage.

Each stage is conv3x3(stride) -> norm -> ReLU -> conv3x3 -> norm -> ReLU,
followed by the stage's mode module.  A tail block (conv3x3 -> norm -> ReLU,
no module) sits between the last stage and the head, like the final
convolutional block of a ResNet; global pooling right after an instance norm
would return beta for every sample.  The head is global pooling -> FC
embedding -> batch-norm neck -> bias-free classifier.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import diffcore as dc
from . import snr as snr_mod
from .diffcore import Parameter, RunningStats, Tensor
from .losses import DEFAULT_LAMBDAS

MODES = ("none", "in_only", "snr", "snr_conv", "snr_g2")
TRACE_MODES = ("snr", "snr_conv", "snr_g2")
NORMS = ("batch_norm", "instance_norm")


@dataclass
class StageSpec:
    in_channels: int
    out_channels: int
    stride: int = 2
    mode: str = "none"


@dataclass
class ModelConfig:
    stages: list[StageSpec] = field(
        default_factory=lambda: [
            StageSpec(3, 16), StageSpec(16, 32), StageSpec(32, 64), StageSpec(64, 128)
        ]
    )
    embedding_dim: int = 128
    num_identities: int = 30
    lambdas: list[float] = field(default_factory=lambda: list(DEFAULT_LAMBDAS))
    baseline_norm: str = "batch_norm"
    reduction: int = 16
    input_shape: tuple[int, int, int] = (3, 64, 32)
    seed: int = 0
    dtype: str = "float32"
    tail: bool = True

    def validate(self) -> None:
        if not self.stages:
            raise ValueError("at least one stage is required")
        if self.stages[0].in_channels != self.input_shape[0]:
            raise ValueError("first stage must consume the input channels")
        for prev, cur in zip(self.stages, self.stages[1:]):
            if prev.out_channels != cur.in_channels:
                raise ValueError(
                    f"channel chain broken: {prev.out_channels} -> {cur.in_channels}"
                )
        for s in self.stages:
            if s.mode not in MODES:
                raise ValueError(f"unknown stage mode {s.mode!r}")
            if min(s.in_channels, s.out_channels, s.stride) < 1:
                raise ValueError("stage extents must be positive")
        if len(self.lambdas) != len(self.stages):
            raise ValueError("one lambda per stage is required")
        if self.baseline_norm not in NORMS:
            raise ValueError(f"unknown baseline_norm {self.baseline_norm!r}")
        if self.embedding_dim < 1 or self.num_identities < 1:
            raise ValueError("embedding_dim and num_identities must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["stages"] = [StageSpec(**s) for s in d.get("stages", [])] or cls().stages
        if "input_shape" in d:
            d["input_shape"] = tuple(d["input_shape"])
        if "lambda" in d:
            d["lambdas"] = d.pop("lambda")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


def with_modes(config: ModelConfig, modes, baseline_norm: str | None = None) -> ModelConfig:
    if isinstance(modes, str):
        modes = [modes] * len(config.stages)
    stages = [replace(s, mode=m) for s, m in zip(config.stages, modes)]
    return replace(config, stages=stages, baseline_norm=baseline_norm or config.baseline_norm)


# scheme name -> per-stage mode builder and in-block norm
SCHEMES = {
    "Baseline": ("none", "batch_norm"),
    "Baseline-A-IN": ("none", "instance_norm"),
    "Baseline-IN": ("in_only", "batch_norm"),
    "Baseline-SNR": ("snr", "batch_norm"),
    "SNR_conv": ("snr_conv", "batch_norm"),
    "SNR_g2": ("snr_g2", "batch_norm"),
}


def scheme_config(name: str, base: ModelConfig | None = None) -> ModelConfig:
    """Model config for a named scheme; ``SNR-stage<k>`` places one block after stage k (1-based)."""
    base = ModelConfig() if base is None else base
    if name in SCHEMES:
        mode, norm = SCHEMES[name]
        return with_modes(base, mode, norm)
    if name.startswith("SNR-stage"):
        k = int(name[len("SNR-stage"):])
        if not 1 <= k <= len(base.stages):
            raise ValueError(f"no stage {k}")
        modes = ["snr" if i == k - 1 else "none" for i in range(len(base.stages))]
        return with_modes(base, modes, "batch_norm")
    raise ValueError(f"unknown scheme {name!r}")


class Norm:
    """In-block normalization: batch norm or (affine) instance norm."""

    def __init__(self, kind: str, c: int, dtype):
        self.kind = kind
        self.gamma = Parameter(np.ones(c, dtype=dtype))
        self.beta = Parameter(np.zeros(c, dtype=dtype))
        self.stats = RunningStats.zeros(c, dtype) if kind == "batch_norm" else None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if self.kind == "batch_norm":
            return dc.batch_norm(x, self.gamma, self.beta, self.stats, training)
        return dc.instance_norm(x, self.gamma, self.beta)

    def parameters(self) -> dict[str, Parameter]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        if self.stats is None:
            return {}
        return {"running_mean": self.stats.mean, "running_var": self.stats.var}


class ModeBlock:
    """The module placed after a stage: nothing, plain IN, or an SNR variant."""

    def __init__(self, mode: str, c: int, r: int, rng: np.random.Generator, dtype):
        self.mode = mode
        if mode == "in_only":
            self.params = {"gamma": Parameter(np.ones(c, dtype=dtype)), "beta": Parameter(np.zeros(c, dtype=dtype))}
        elif mode == "snr":
            self.snr = snr_mod.SnrParams.init(c, r, rng, dtype)
        elif mode == "snr_conv":
            self.snr = snr_mod.ConvSplitParams.init(c, rng, dtype)
        elif mode == "snr_g2":
            self.snr = snr_mod.DualGateParams.init(c, r, rng, dtype)

    def __call__(self, x: Tensor, training: bool, gate_override=None) -> tuple[Tensor, Optional[snr_mod.SnrTrace]]:
        if self.mode == "none":
            return x, None
        if self.mode == "in_only":
            return dc.instance_norm(x, self.params["gamma"], self.params["beta"]), None
        if self.mode == "snr":
            trace = snr_mod.snr_forward(x, self.snr, training, gate_override=gate_override)
        else:
            variant = snr_mod.CONV if self.mode == "snr_conv" else snr_mod.DUAL_GATE
            trace = snr_mod.snr_variant_forward(x, variant, self.snr, training)
        return trace.F_plus, trace

    def parameters(self) -> dict[str, Parameter]:
        if self.mode == "none":
            return {}
        if self.mode == "in_only":
            return dict(self.params)
        return self.snr.parameters()


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


@dataclass
class ForwardOutput:
    embeddings: Tensor
    logits: Tensor
    traces: dict[int, snr_mod.SnrTrace]
    stage_pooled: list[np.ndarray]


class Model:
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        dtype = np.dtype(config.dtype)
        # separate streams: backbone weights do not depend on which modules are plugged in
        rng = np.random.default_rng([config.seed, 0])
        block_rng = np.random.default_rng([config.seed, 1])
        self.stages = []
        for spec in config.stages:
            cin, cout = spec.in_channels, spec.out_channels
            st = {
                "conv1": Parameter(_he(rng, (cout, cin, 3, 3), cin * 9, dtype)),
                "norm1": Norm(config.baseline_norm, cout, dtype),
                "conv2": Parameter(_he(rng, (cout, cout, 3, 3), cout * 9, dtype)),
                "norm2": Norm(config.baseline_norm, cout, dtype),
                "block": ModeBlock(spec.mode, cout, config.reduction, block_rng, dtype),
            }
            self.stages.append(st)
        c_last = config.stages[-1].out_channels
        self.tail = None
        if config.tail:
            self.tail = {
                "conv": Parameter(_he(rng, (c_last, c_last, 3, 3), c_last * 9, dtype)),
                "norm": Norm(config.baseline_norm, c_last, dtype),
            }
        e = config.embedding_dim
        self.emb_w = Parameter(_he(rng, (e, c_last), c_last, dtype) * np.sqrt(0.5))
        self.emb_b = Parameter(np.zeros(e, dtype=dtype))
        self.neck = Norm("batch_norm", e, dtype)
        self.cls_w = Parameter((rng.standard_normal((config.num_identities, e)) * 0.01).astype(dtype))

    # bookkeeping -------------------------------------------------------------
    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for i, st in enumerate(self.stages):
            p = f"stage{i + 1}"
            out[f"{p}.conv1"] = st["conv1"]
            out[f"{p}.conv2"] = st["conv2"]
            for k in ("norm1", "norm2"):
                for name, t in st[k].parameters().items():
                    out[f"{p}.{k}.{name}"] = t
            for name, t in st["block"].parameters().items():
                out[f"{p}.{st['block'].mode}.{name}"] = t
        if self.tail is not None:
            out["tail.conv"] = self.tail["conv"]
            for name, t in self.tail["norm"].parameters().items():
                out[f"tail.norm.{name}"] = t
        out["head.emb_w"] = self.emb_w
        out["head.emb_b"] = self.emb_b
        for name, t in self.neck.parameters().items():
            out[f"head.neck.{name}"] = t
        out["head.cls_w"] = self.cls_w
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, st in enumerate(self.stages):
            for k in ("norm1", "norm2"):
                for name, arr in st[k].buffers().items():
                    out[f"stage{i + 1}.{k}.{name}"] = arr
        if self.tail is not None:
            for name, arr in self.tail["norm"].buffers().items():
                out[f"tail.norm.{name}"] = arr
        for name, arr in self.neck.buffers().items():
            out[f"head.neck.{name}"] = arr
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data for k, v in self.named_parameters().items()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        bufs = self.named_buffers()
        missing = (set(params) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)
        for k, arr in bufs.items():
            arr[...] = state[k]

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    # forward ------------------------------------------------------------------
    def forward(self, x, training: bool = False, gate_override: float | None = None) -> ForwardOutput:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.config.dtype))
        if x.ndim != 4 or x.shape[1:] != tuple(self.config.input_shape):
            raise ValueError(f"expected input [n, {self.config.input_shape}], got {x.shape}")
        traces = {}
        pooled = []
        h = x
        for i, (spec, st) in enumerate(zip(self.config.stages, self.stages)):
            h = dc.relu(st["norm1"](dc.conv2d(h, st["conv1"], stride=spec.stride), training))
            h = dc.relu(st["norm2"](dc.conv2d(h, st["conv2"]), training))
            h, trace = st["block"](h, training, gate_override)
            if trace is not None:
                traces[i] = trace
            pooled.append(h.data.astype(np.float64).mean(axis=(2, 3)))
        if self.tail is not None:
            h = dc.relu(self.tail["norm"](dc.conv2d(h, self.tail["conv"]), training))
        feat = dc.global_avg_pool(h)
        emb = dc.linear(feat, self.emb_w, self.emb_b)
        logits = dc.linear(self.neck(emb, training), self.cls_w)
        return ForwardOutput(emb, logits, traces, pooled)

    __call__ = forward


def build_model(config: ModelConfig) -> Model:
    return Model(config)


def parameter_count(model: Model) -> int:
    return int(sum(p.data.size for p in model.named_parameters().values() if p.trainable))


def snr_overhead(channels: int, r: int = 16) -> int:
    """Closed-form parameter count of one main-variant block: gamma, beta, W1, W2."""
    return 2 * channels + 2 * channels * snr_mod.hidden_width(channels, r)
