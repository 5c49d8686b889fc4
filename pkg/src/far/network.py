"""Backbone, attention gates, restoration split and classifiers.

Parameters live in a flat ``name -> float32 array`` dict. Every name carries a
group tag that decides which losses may update it during training:

* ``theta``  backbone convolutions
* ``phi``    alignment gate (or its 1x1-conv replacement)
* ``psi``    restoration gate
* ``omega``  shared classifier
* ``expert`` per-source-domain classifiers
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tape, Tensor

GROUPS = ("theta", "phi", "psi", "omega", "expert")

# attention modes
PARALLEL = "parallel"
CHANNEL_ONLY = "channel"
SPATIAL_ONLY = "spatial"
CONV1X1 = "conv"
NO_ATTENTION = "none"


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    image_size: int = 16
    widths: Tuple[int, ...] = (16, 32, 32)
    n_classes: int = 4
    n_experts: int = 3
    reduction: int = 8
    attention: str = PARALLEL
    restoration: bool = True
    experts: bool = True

    @property
    def feature_channels(self) -> int:
        return self.widths[-1]

    @property
    def feature_size(self) -> int:
        s = self.image_size
        for _ in self.widths:
            s //= 2
        return s

    def validate(self) -> None:
        c = self.feature_channels
        if self.attention not in (PARALLEL, CHANNEL_ONLY, SPATIAL_ONLY, CONV1X1, NO_ATTENTION):
            raise ValueError(f"unknown attention mode {self.attention!r}")
        if c % self.reduction:
            raise ValueError(f"reduction ratio {self.reduction} does not divide {c} channels")
        if self.feature_size < 1:
            raise ValueError(f"image size {self.image_size} too small for {len(self.widths)} blocks")
        if self.restoration and self.attention == NO_ATTENTION:
            raise ValueError("restoration needs an alignment stage")


@dataclass
class ParamSpec:
    name: str
    group: str
    shape: Tuple[int, ...]
    fan_in: int  # 0 means zero init (biases)


def _gate_specs(prefix: str, group: str, c: int, r: int) -> List[ParamSpec]:
    h = c // r
    return [
        ParamSpec(f"{prefix}.ch.w1", group, (c, h), c),
        ParamSpec(f"{prefix}.ch.b1", group, (h,), 0),
        ParamSpec(f"{prefix}.ch.w2", group, (h, c), h),
        ParamSpec(f"{prefix}.ch.b2", group, (c,), 0),
        ParamSpec(f"{prefix}.sp.k1", group, (2, 2, 3, 3), 18),
        ParamSpec(f"{prefix}.sp.b1", group, (2,), 0),
        ParamSpec(f"{prefix}.sp.k2", group, (1, 2, 3, 3), 18),
        ParamSpec(f"{prefix}.sp.b2", group, (1,), 0),
    ]


def param_specs(cfg: ModelConfig) -> List[ParamSpec]:
    specs: List[ParamSpec] = []
    cin = cfg.in_channels
    for i, w in enumerate(cfg.widths):
        specs.append(ParamSpec(f"backbone.conv{i}.k", "theta", (w, cin, 3, 3), cin * 9))
        specs.append(ParamSpec(f"backbone.conv{i}.b", "theta", (w,), 0))
        cin = w
    c = cfg.feature_channels
    if cfg.attention == CONV1X1:
        specs.append(ParamSpec("fa.conv.k", "phi", (c, c, 1, 1), c))
        specs.append(ParamSpec("fa.conv.b", "phi", (c,), 0))
    elif cfg.attention != NO_ATTENTION:
        specs += _gate_specs("fa", "phi", c, cfg.reduction)
    if cfg.restoration:
        specs += _gate_specs("fr", "psi", c, cfg.reduction)
    specs.append(ParamSpec("cls.w", "omega", (c, cfg.n_classes), c))
    specs.append(ParamSpec("cls.b", "omega", (cfg.n_classes,), 0))
    if cfg.experts:
        for i in range(cfg.n_experts):
            specs.append(ParamSpec(f"expert{i}.w", "expert", (c, cfg.n_classes), c))
            specs.append(ParamSpec(f"expert{i}.b", "expert", (cfg.n_classes,), 0))
    return specs


@dataclass
class ForwardBundle:
    F: Tensor
    A: Tensor
    R: Optional[Tensor]
    R_plus: Optional[Tensor]
    R_minus: Optional[Tensor]
    pooled_F: Tensor
    f: Tensor
    f_plus: Tensor
    f_minus: Optional[Tensor]
    logits_plus: Tensor
    logits: Optional[Tensor]
    logits_minus: Optional[Tensor]
    expert_logits: List[Optional[Tensor]] = field(default_factory=list)
    gate_fa: Optional[Tuple[Optional[Tensor], Optional[Tensor]]] = None
    gate_fr: Optional[Tuple[Optional[Tensor], Optional[Tensor]]] = None


class FarModel:
    """Parameter container plus the forward computation."""

    def __init__(self, cfg: ModelConfig, params: Optional[Dict[str, np.ndarray]] = None, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.specs = param_specs(cfg)
        self.groups = {s.name: s.group for s in self.specs}
        self.gate_evaluations = 0
        if params is None:
            params = init_params(self.specs, np.random.default_rng(seed))
        for s in self.specs:
            if s.name not in params:
                raise KeyError(f"missing parameter {s.name}")
            if tuple(params[s.name].shape) != s.shape:
                raise DimensionError(f"parameter {s.name}: expected {s.shape}, got {params[s.name].shape}")
        self.params = {s.name: np.asarray(params[s.name], dtype=np.float32) for s in self.specs}

    def names(self, group: Optional[str] = None) -> List[str]:
        return [s.name for s in self.specs if group is None or s.group == group]

    def n_params(self, group: Optional[str] = None) -> int:
        return sum(self.params[n].size for n in self.names(group))

    def bind(self, tape: Tape, dtype=np.float32) -> Dict[str, Tensor]:
        return {n: tape.watch(v, name=n, dtype=dtype) for n, v in self.params.items()}

    def constants(self) -> Dict[str, Tensor]:
        return {n: Tensor(v) for n, v in self.params.items()}

    def copy(self) -> "FarModel":
        return FarModel(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def forward(self, x, p: Optional[Dict[str, Tensor]] = None,
                expert_rows: Optional[Sequence[Optional[np.ndarray]]] = None) -> ForwardBundle:
        return forward(x, self, p, expert_rows)

    def predict(self, x, p: Optional[Dict[str, Tensor]] = None) -> np.ndarray:
        return predict(x, self, p)


def init_params(specs: Sequence[ParamSpec], rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Kaiming-uniform (fan-in) weights, zero biases."""
    out = {}
    for s in specs:
        if s.fan_in == 0:
            out[s.name] = np.zeros(s.shape, dtype=np.float32)
        else:
            bound = np.sqrt(6.0 / s.fan_in)
            out[s.name] = rng.uniform(-bound, bound, size=s.shape).astype(np.float32)
    return out


def _as_batch(x) -> Tuple[Tensor, bool]:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    if t.ndim == 3:
        return ad.reshape(t, (1,) + t.shape), True
    if t.ndim != 4:
        raise DimensionError(f"expected an image or a batch of images, got {t.shape}")
    return t, False


def extract(x, p: Dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Backbone feature map: conv3x3 + bias + ReLU + 2x2 average pool per block."""
    xb, single = _as_batch(x)
    expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
    if xb.shape[1:] != expected:
        raise DimensionError(f"input {xb.shape[1:]} does not match configured {expected}")
    h = xb
    for i in range(len(cfg.widths)):
        h = ad.conv2d(h, p[f"backbone.conv{i}.k"], padding=1)
        h = ad.avg_pool2(ad.relu(ad.add_channel(h, p[f"backbone.conv{i}.b"])))
    return ad.reshape(h, h.shape[1:]) if single else h


def channel_gate(F: Tensor, p: Dict[str, Tensor], prefix: str) -> Tensor:
    z = ad.relu(ad.linear(ad.global_avg_pool(F), p[f"{prefix}.ch.w1"], p[f"{prefix}.ch.b1"]))
    return ad.sigmoid(ad.linear(z, p[f"{prefix}.ch.w2"], p[f"{prefix}.ch.b2"]))


def spatial_gate(F: Tensor, p: Dict[str, Tensor], prefix: str) -> Tensor:
    z = ad.relu(ad.add_channel(ad.conv2d(ad.channel_pool(F), p[f"{prefix}.sp.k1"], padding=1), p[f"{prefix}.sp.b1"]))
    s = ad.sigmoid(ad.add_channel(ad.conv2d(z, p[f"{prefix}.sp.k2"], padding=1), p[f"{prefix}.sp.b2"]))
    n, _, h, w = s.shape
    return ad.reshape(s, (n, h, w))


def gate_responses(F: Tensor, p: Dict[str, Tensor], prefix: str, mode: str = PARALLEL):
    """Channel vector ``a[n, c]`` and spatial map ``S[n, h, w]``, both read from ``F``.

    A disabled branch is returned as ``None`` (its response is the constant 1).
    """
    a = channel_gate(F, p, prefix) if mode in (PARALLEL, CHANNEL_ONLY) else None
    s = spatial_gate(F, p, prefix) if mode in (PARALLEL, SPATIAL_ONLY) else None
    return a, s


def apply_gate(F: Tensor, a: Optional[Tensor], s: Optional[Tensor]) -> Tensor:
    out = F
    if a is not None:
        out = ad.channel_scale(out, a)
    if s is not None:
        out = ad.spatial_scale(out, s)
    return out


def attend_parallel(F: Tensor, p: Dict[str, Tensor], prefix: str = "fa", mode: str = PARALLEL) -> Tensor:
    """``A[i, j, k] = S[i, j] * a[k] * F[i, j, k]``."""
    Fb, single = _as_batch(F)
    a, s = gate_responses(Fb, p, prefix, mode)
    A = apply_gate(Fb, a, s)
    return ad.reshape(A, A.shape[1:]) if single else A


def gate_map(a: Optional[Tensor], s: Optional[Tensor], shape: Tuple[int, ...]) -> Tensor:
    """Combined response ``G[n, c, h, w] = S[n, h, w] * a[n, c]`` as a dense tensor."""
    ones = Tensor(np.ones(shape, dtype=np.float32))
    return apply_gate(ones, a, s)


def restore_split(R: Tensor, p: Dict[str, Tensor], prefix: str = "fr", mode: str = PARALLEL):
    """Split the residual into ``(G * R, (1 - G) * R)``."""
    Rb, single = _as_batch(R)
    a, s = gate_responses(Rb, p, prefix, mode)
    G = gate_map(a, s, Rb.shape)
    plus = ad.mul(G, Rb)
    minus = ad.mul(ad.shift(ad.neg(G), 1.0), Rb)
    if single:
        return ad.reshape(plus, R.shape), ad.reshape(minus, R.shape)
    return plus, minus


def classify(f: Tensor, p: Dict[str, Tensor], prefix: str = "cls") -> Tensor:
    return ad.linear(f, p[f"{prefix}.w"], p[f"{prefix}.b"])


def forward(x, model: FarModel, p: Optional[Dict[str, Tensor]] = None,
            expert_rows: Optional[Sequence[Optional[np.ndarray]]] = None) -> ForwardBundle:
    """Full pass. ``expert_rows[i]`` restricts expert ``i`` to those batch rows
    (``None`` entries skip the expert); by default every expert sees every row."""
    cfg = model.cfg
    if p is None:
        p = model.constants()
    xb, _ = _as_batch(x)
    F = extract(xb, p, cfg)
    pooled_F = ad.global_avg_pool(F)
    gate_fa = gate_fr = None
    if cfg.attention == NO_ATTENTION:
        A = F
    elif cfg.attention == CONV1X1:
        A = ad.relu(ad.add_channel(ad.conv2d(F, p["fa.conv.k"]), p["fa.conv.b"]))
    else:
        model.gate_evaluations += 1
        gate_fa = gate_responses(F, p, "fa", cfg.attention)
        A = apply_gate(F, *gate_fa)
    f = ad.global_avg_pool(A) if A is not F else pooled_F
    R = R_plus = R_minus = f_minus = logits = logits_minus = None
    if cfg.restoration:
        R = ad.sub(F, A)
        gmode = cfg.attention if cfg.attention in (CHANNEL_ONLY, SPATIAL_ONLY) else PARALLEL
        model.gate_evaluations += 1
        gate_fr = gate_responses(R, p, "fr", gmode)
        G = gate_map(*gate_fr, R.shape)
        R_plus = ad.mul(G, R)
        R_minus = ad.mul(ad.shift(ad.neg(G), 1.0), R)
        f_plus = ad.global_avg_pool(ad.add(A, R_plus))
        f_minus = ad.global_avg_pool(ad.add(A, R_minus))
        logits = classify(f, p)
        logits_minus = classify(f_minus, p)
    else:
        f_plus = f
    logits_plus = classify(f_plus, p)
    experts: List[Optional[Tensor]] = []
    if cfg.experts:
        for i in range(cfg.n_experts):
            idx = None if expert_rows is None else expert_rows[i]
            if expert_rows is not None and idx is None:
                experts.append(None)
                continue
            src = pooled_F if idx is None else ad.rows(pooled_F, idx)
            experts.append(classify(src, p, f"expert{i}"))
    return ForwardBundle(F, A, R, R_plus, R_minus, pooled_F, f, f_plus, f_minus,
                         logits_plus, logits, logits_minus, experts, gate_fa, gate_fr)


def inference_logits(x, model: FarModel, p: Optional[Dict[str, Tensor]] = None) -> Tensor:
    """Shared-classifier logits on the restored feature; experts are not touched."""
    cfg = model.cfg
    if p is None:
        p = model.constants()
    xb, _ = _as_batch(x)
    F = extract(xb, p, cfg)
    if cfg.attention == NO_ATTENTION:
        A = F
    elif cfg.attention == CONV1X1:
        A = ad.relu(ad.add_channel(ad.conv2d(F, p["fa.conv.k"]), p["fa.conv.b"]))
    else:
        model.gate_evaluations += 1
        A = apply_gate(F, *gate_responses(F, p, "fa", cfg.attention))
    if cfg.restoration:
        R = ad.sub(F, A)
        gmode = cfg.attention if cfg.attention in (CHANNEL_ONLY, SPATIAL_ONLY) else PARALLEL
        model.gate_evaluations += 1
        G = gate_map(*gate_responses(R, p, "fr", gmode), R.shape)
        A = ad.add(A, ad.mul(G, R))
    return classify(ad.global_avg_pool(A), p)


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(np.asarray(logits), axis=-1)


def predict(x, model: FarModel, p: Optional[Dict[str, Tensor]] = None, batch_size: int = 256) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    out = []
    for i in range(0, arr.shape[0], batch_size):
        out.append(argmax_lowest(inference_logits(arr[i:i + batch_size], model, p).data))
    res = np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
    return res[0] if single else res
