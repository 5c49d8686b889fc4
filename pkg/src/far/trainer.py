"""Per-loss routed SGD training, DG/UDA loops and FARC checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tape, Tensor
from .data import LabeledSet, MultiDomainBatch, epoch_batches, steps_per_epoch
from .network import CONV1X1, NO_ATTENTION, PARALLEL, FarModel, ModelConfig, predict

log = logging.getLogger(__name__)

CKPT_MAGIC = b"FARC"
CKPT_VERSION = 1

# which parameter groups each loss may update
ROUTES = {
    "cls": ("theta", "phi", "psi", "omega", "expert"),
    "align": ("phi",),
    "dre": ("psi",),
    "consist": ("omega",),
}
LOSS_ORDER = ("cls", "align", "dre", "consist")


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Recipe:
    """Which modules exist and which objectives are active."""

    attention: str = PARALLEL
    restoration: bool = True
    experts: bool = True
    align: bool = True
    dre: str = "ranked"  # ranked | plus | minus | entropy | off
    routing: str = "selective"  # selective: per-loss groups; joint: one summed step on everything

    def model_config(self, base: ModelConfig) -> ModelConfig:
        return replace(base, attention=self.attention, restoration=self.restoration, experts=self.experts)

    def routes(self) -> Dict[str, tuple]:
        if self.routing == "joint":
            return {k: ROUTES["cls"] for k in ROUTES}
        if self.routing != "selective":
            raise L.ConfigError(f"routing must be 'selective' or 'joint', got {self.routing!r}")
        r = dict(ROUTES)
        if self.attention == NO_ATTENTION:
            # no separate alignment module: the backbone produces the aligned feature
            r["align"] = ("theta",)
        return r


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "uda"
    epochs: int = 40
    batch_per_domain: int = 16
    lr_init: float = 0.05
    lr_min: float = 0.0
    momentum: float = 0.9
    weights: L.LossWeights = L.LossWeights()
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in ("dg", "uda"):
            raise L.ConfigError(f"mode must be 'dg' or 'uda', got {self.mode!r}")
        if self.epochs < 1:
            raise L.ConfigError("epochs must be >= 1")
        if not 0 <= self.momentum < 1:
            raise L.ConfigError("momentum must lie in [0, 1)")
        if self.lr_min > self.lr_init:
            raise L.ConfigError("lr_min must not exceed lr_init")
        if self.batch_per_domain < 2:
            raise L.ConfigError("batch_per_domain must be >= 2")


def cosine_lr(t: int, total: int, lr_init: float, lr_min: float) -> float:
    if total <= 0 or t >= total:
        return lr_min if t >= total else lr_init
    t = max(t, 0)
    return lr_min + 0.5 * (lr_init - lr_min) * (1 + math.cos(math.pi * t / total))


def sgd_momentum_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
                      velocity: Dict[str, np.ndarray], lr: float, momentum: float) -> None:
    """In place: ``v <- momentum * v + g``; ``w <- w - lr * v`` for each key of ``grads``."""
    for name, g in grads.items():
        w = params[name]
        if g.shape != w.shape:
            raise ad.ContractError(f"gradient for {name} has shape {g.shape}, parameter {w.shape}")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(w)
        v = (np.float32(momentum) * v + g.astype(np.float32)).astype(np.float32)
        velocity[name] = v
        params[name] = (w - np.float32(lr) * v).astype(np.float32)


class SGDMomentum:
    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float) -> None:
        sgd_momentum_step(params, grads, self.velocity, lr, self.momentum)


# ---------------------------------------------------------------------------
# losses on a batch


def _source_rows(batch: MultiDomainBatch) -> np.ndarray:
    return np.concatenate([np.arange(b.rows.start, b.rows.stop) for b in batch.source_blocks])


def compute_losses(model: FarModel, p: Dict[str, Tensor], batch: MultiDomainBatch, recipe: Recipe,
                   teacher_probs: Optional[np.ndarray] = None) -> Dict[str, Optional[Tensor]]:
    """All component losses for one batch, as tensors on ``p``'s tape.

    ``teacher_probs`` replaces the (detached) expert probabilities; the
    finite-difference check uses it to hold the teacher fixed.
    """
    src_blocks = batch.source_blocks
    tgt = batch.target_block
    expert_rows = None
    if model.cfg.experts:
        expert_rows = [np.arange(b.rows.start, b.rows.stop) for b in src_blocks]
    x = Tensor(batch.images.astype(next(iter(p.values())).dtype, copy=False))
    fb = model.forward(x, p, expert_rows)
    src = _source_rows(batch)
    labels = batch.labels[src]
    shared = ad.rows(fb.logits_plus, src) if tgt is not None else fb.logits_plus
    out: Dict[str, Optional[Tensor]] = {k: None for k in ("cls", "align", "dre_plus", "dre_minus", "consist")}

    l_cls = L.cross_entropy(shared, labels)
    if model.cfg.experts:
        terms = [L.cross_entropy(e, batch.labels[b.rows]) for e, b in zip(fb.expert_logits, src_blocks)]
        l_cls = ad.add(l_cls, ad.scale(L._sum(terms), 1.0 / len(terms)))
    out["cls"] = l_cls

    if recipe.align:
        feats = fb.f if recipe.attention != NO_ATTENTION else fb.pooled_F
        sources = [ad.rows(feats, np.arange(b.rows.start, b.rows.stop)) for b in src_blocks]
        target = ad.rows(feats, np.arange(tgt.rows.start, tgt.rows.stop)) if tgt is not None else None
        out["align"] = L.moment_distance(sources, target)

    if model.cfg.restoration and recipe.dre != "off":
        if recipe.dre == "entropy":
            lp, lm = L.entropy_only_loss(fb.logits_plus, fb.logits_minus)
        else:
            lp, lm = L.dre_loss(fb.logits_plus, fb.logits, fb.logits_minus)
        out["dre_plus"], out["dre_minus"] = lp, lm

    if model.cfg.experts:
        teacher = ad.concat_rows(list(fb.expert_logits))
        teacher_p = ad.softmax(teacher)
        if teacher_probs is not None:
            teacher_p = Tensor(np.asarray(teacher_probs, dtype=teacher_p.dtype))
        out["consist"] = L.consist_l1(teacher_p, ad.softmax(shared))
    return out


def _dre_root(losses: Dict[str, Optional[Tensor]], recipe: Recipe) -> Optional[Tensor]:
    lp, lm = losses["dre_plus"], losses["dre_minus"]
    if lp is None:
        return None
    if recipe.dre == "plus":
        return lp
    if recipe.dre == "minus":
        return lm
    return ad.add(lp, lm)


def loss_roots(losses: Dict[str, Optional[Tensor]], recipe: Recipe, w: L.LossWeights) -> Dict[str, Optional[Tensor]]:
    """Weighted scalar per routed objective; ``None`` when inactive or zero-weighted."""
    raw = {"cls": losses["cls"], "align": losses["align"], "dre": _dre_root(losses, recipe),
           "consist": losses["consist"]}
    lam = {"cls": w.cls, "align": w.align, "dre": w.dre, "consist": w.consist}
    return {k: (ad.scale(v, lam[k]) if v is not None and lam[k] != 0 else None) for k, v in raw.items()}


def _bundle(losses: Dict[str, Optional[Tensor]], w: L.LossWeights) -> L.LossBundle:
    val = {k: (float(v.data) if v is not None else 0.0) for k, v in losses.items()}
    for k, v in val.items():
        if not math.isfinite(v):
            raise TrainingError(f"loss {k} is not finite ({v})")
    return L.compose_total(val["align"], val["dre_plus"], val["dre_minus"], val["cls"], val["consist"], w)


def routed_step(model: FarModel, batch: MultiDomainBatch, cfg: TrainConfig, recipe: Recipe,
                opt: SGDMomentum, lr: float, only: Optional[Sequence[str]] = None) -> L.LossBundle:
    """One batch: a single forward, then for each objective its own backward
    restricted to its routed groups, applied in order cls, align, dre, consist.
    With ``recipe.routing == "joint"`` the weighted objectives are summed and
    applied as one ordinary step to every parameter.

    ``only`` limits the update to a subset of objectives (all losses are still
    computed and reported).
    """
    tape = Tape()
    p = model.bind(tape)
    losses = compute_losses(model, p, batch, recipe)
    bundle = _bundle(losses, cfg.weights)
    roots = loss_roots(losses, recipe, cfg.weights)
    routes = recipe.routes()
    if recipe.routing == "joint":
        active = [roots[k] for k in LOSS_ORDER if roots[k] is not None and (only is None or k in only)]
        roots = {k: None for k in LOSS_ORDER}
        roots["cls"] = L._sum(active) if active else None
    for key in LOSS_ORDER:
        root = roots[key]
        if root is None or (only is not None and recipe.routing != "joint" and key not in only):
            continue
        names = [n for n in model.names() if model.groups[n] in routes[key]]
        if not names:
            continue
        g = ad.backward(tape, root, wrt=[p[n] for n in names])
        grads = {n: g[p[n]] for n in names}
        for n, v in grads.items():
            if not np.all(np.isfinite(v)):
                raise TrainingError(f"non-finite gradient of loss {key} for {n}")
        opt.step(model.params, grads, lr)
    return bundle


def masked_reference_step(model: FarModel, batch: MultiDomainBatch, cfg: TrainConfig, recipe: Recipe,
                          velocity: Dict[str, np.ndarray], lr: float) -> None:
    """Oracle for :func:`routed_step` on flat parameter vectors.

    Every objective is differentiated w.r.t. *all* parameters, then a 0/1
    mask per objective selects the routed entries. Momentum advances only
    where the mask is set.
    """
    names = model.names()
    sizes = [model.params[n].size for n in names]
    tape = Tape()
    p = model.bind(tape)
    roots = loss_roots(compute_losses(model, p, batch, recipe), recipe, cfg.weights)
    routes = recipe.routes()
    if recipe.routing == "joint":
        active = [r for r in roots.values() if r is not None]
        roots = {k: None for k in LOSS_ORDER}
        roots["cls"] = L._sum(active) if active else None
    w = np.concatenate([model.params[n].ravel() for n in names])
    v = np.concatenate([velocity.get(n, np.zeros_like(model.params[n])).ravel() for n in names])
    for key in LOSS_ORDER:
        if roots[key] is None:
            continue
        g_all = ad.backward(tape, roots[key])
        g = np.concatenate([g_all[p[n]].ravel() for n in names]).astype(np.float32)
        mask = np.concatenate([np.full(s, model.groups[n] in routes[key]) for n, s in zip(names, sizes)])
        v_new = (np.float32(cfg.momentum) * v + g).astype(np.float32)
        v = np.where(mask, v_new, v)
        w = np.where(mask, (w - np.float32(lr) * v).astype(np.float32), w)
    off = 0
    for n, s in zip(names, sizes):
        model.params[n] = w[off:off + s].reshape(model.params[n].shape).astype(np.float32)
        if np.any(v[off:off + s]) or n in velocity:
            velocity[n] = v[off:off + s].reshape(model.params[n].shape).astype(np.float32)
        off += s


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainData:
    sources: List[LabeledSet]
    target: Optional[LabeledSet]  # unlabeled training images (UDA) or None
    evals: Dict[str, LabeledSet] = field(default_factory=dict)  # per-domain labelled test sets


def accuracy(model: FarModel, ds: LabeledSet) -> float:
    if len(ds) == 0 or not ds.has_labels:
        raise ad.ContractError("accuracy needs a non-empty labelled set")
    return float(np.mean(predict(ds.images, model) == ds.labels))


LOSS_COLUMNS = ("l_cls", "l_align", "l_dre_plus", "l_dre_minus", "l_consist")


@dataclass
class TrainState:
    model: FarModel
    opt: SGDMomentum
    epoch: int = 0  # number of completed epochs
    log: List[dict] = field(default_factory=list)


def train(model: FarModel, data: TrainData, cfg: TrainConfig, recipe: Recipe = Recipe(),
          state: Optional[TrainState] = None, stop_after: Optional[int] = None,
          on_epoch: Optional[Callable[[TrainState], None]] = None) -> TrainState:
    """Run (or resume) training.

    Batches for epoch ``e`` come from ``default_rng([seed, e + 1])``, so a
    resumed run reproduces the uninterrupted one given params and velocity.
    ``stop_after`` ends the loop after that many completed epochs.
    """
    cfg.validate()
    if state is None:
        state = TrainState(model, SGDMomentum(cfg.momentum))
    target = None
    if cfg.mode == "uda":
        if data.target is None:
            raise L.ConfigError("UDA mode needs unlabeled target images")
        target = data.target.unlabeled()
    m = cfg.batch_per_domain
    steps = steps_per_epoch(data.sources, target, m)
    total = cfg.epochs * steps
    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(state.epoch, last):
        rng = np.random.default_rng([cfg.seed, epoch + 1])
        sums = dict.fromkeys(LOSS_COLUMNS, 0.0)
        lr = cfg.lr_init
        for k, batch in enumerate(epoch_batches(data.sources, target, m, rng)):
            t = epoch * steps + k
            lr = cosine_lr(t, total, cfg.lr_init, cfg.lr_min)
            bundle = routed_step(model, batch, cfg, recipe, state.opt, lr)
            row = {"epoch": epoch, "step": t, "lr": lr, **bundle.as_dict()}
            state.log.append(row)
            for c in LOSS_COLUMNS:
                sums[c] += row[c]
        summary = {"epoch": epoch, "step": "end", "lr": lr, **{c: sums[c] / steps for c in LOSS_COLUMNS}}
        for name, ds in data.evals.items():
            summary[f"acc_{name}"] = accuracy(model, ds)
        state.log.append(summary)
        state.epoch = epoch + 1
        log.info("epoch %d  l_cls %.4f  %s", epoch, summary["l_cls"],
                 " ".join(f"{k}={v:.3f}" for k, v in summary.items() if k.startswith("acc_")))
        if on_epoch is not None:
            on_epoch(state)
    return state


# ---------------------------------------------------------------------------
# FARC checkpoints


def save_checkpoint(path, model: FarModel, opt: SGDMomentum, meta: Optional[dict] = None) -> None:
    names = model.names()
    out = bytearray(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(names)))
    for n in names:
        nb, gb = n.encode(), model.groups[n].encode()
        shape = model.params[n].shape
        out += struct.pack("<H", len(nb)) + nb + struct.pack("<H", len(gb)) + gb
        out += struct.pack("<I", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
    for n in names:
        out += np.ascontiguousarray(model.params[n], dtype="<f4").tobytes()
    for n in names:
        v = opt.velocity.get(n, np.zeros_like(model.params[n]))
        out += np.ascontiguousarray(v, dtype="<f4").tobytes()
    body = json.dumps(meta or {}, sort_keys=True).encode()
    out += struct.pack("<I", len(body)) + body
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path, model: FarModel, opt: Optional[SGDMomentum] = None) -> dict:
    """Restore params (and velocities) into ``model`` in place; returns the metadata."""
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError("bad magic, expected b'FARC' at byte offset 0")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    manifest = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, off)
        name = buf[off + 2:off + 2 + ln].decode()
        off += 2 + ln
        (lg,) = struct.unpack_from("<H", buf, off)
        group = buf[off + 2:off + 2 + lg].decode()
        off += 2 + lg
        (nd,) = struct.unpack_from("<I", buf, off)
        shape = struct.unpack_from(f"<{nd}I", buf, off + 4)
        off += 4 + 4 * nd
        manifest.append((name, group, tuple(shape)))
    expected = {n: (model.groups[n], model.params[n].shape) for n in model.names()}
    for name, group, shape in manifest:
        if name not in expected:
            raise CheckpointError(f"checkpoint parameter {name} does not exist in the model")
        if expected[name] != (group, shape):
            raise CheckpointError(f"parameter {name}: checkpoint has {group} {shape}, model has "
                                  f"{expected[name][0]} {expected[name][1]}")
    missing = set(expected) - {m[0] for m in manifest}
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)}")
    params, vels = {}, {}
    for name, _, shape in manifest:
        size = int(np.prod(shape))
        params[name] = np.frombuffer(buf, "<f4", size, off).astype(np.float32).reshape(shape)
        off += 4 * size
    for name, _, shape in manifest:
        size = int(np.prod(shape))
        vels[name] = np.frombuffer(buf, "<f4", size, off).astype(np.float32).reshape(shape)
        off += 4 * size
    (lm,) = struct.unpack_from("<I", buf, off)
    meta = json.loads(buf[off + 4:off + 4 + lm].decode())
    model.params.update(params)
    if opt is not None:
        opt.velocity = vels
    return meta
