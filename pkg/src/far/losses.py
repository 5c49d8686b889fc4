"""Training objectives and their weighted composition."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor

ENTROPY_FLOOR = 1e-12


class ConfigError(ValueError):
    pass


def _rows2d(t: Tensor) -> Tensor:
    return ad.reshape(t, (1,) + t.shape) if t.ndim == 1 else t


def domain_moments(feats: Tensor) -> Tuple[Tensor, Tensor]:
    """Per-dimension mean and population variance of ``feats[m, c]``."""
    if feats.ndim != 2:
        raise ContractError(f"expected an m x c feature block, got {feats.shape}")
    m = feats.shape[0]
    if m < 1:
        raise ContractError("a domain batch needs at least one sample")
    mu = ad.mean(feats, axis=0)
    centered = ad.add_channel(feats, ad.neg(mu))
    var = ad.mean(ad.square(centered), axis=0)
    return mu, var


def moment_distance(sources: Sequence[Tensor], target: Optional[Tensor] = None) -> Tensor:
    """Mean/variance moment distance between source domains (and a target).

    Each entry of ``sources`` is an ``m x c`` block of pooled features from one
    domain. Source-target terms are averaged over the N sources, pairwise
    source terms over the N(N-1)/2 pairs; the latter vanish when N == 1.
    """
    n = len(sources)
    if n == 0:
        raise ContractError("moment distance needs at least one source domain")
    moments = [domain_moments(s) for s in sources]
    total = None

    def acc(term):
        nonlocal total
        total = term if total is None else ad.add(total, term)

    for k in (0, 1):
        if target is not None:
            tk = domain_moments(target)[k]
            terms = [ad.norm2(ad.sub(m[k], tk)) for m in moments]
            acc(ad.scale(_sum(terms), 1.0 / n))
        if n > 1:
            terms = [ad.norm2(ad.sub(moments[i][k], moments[j][k]))
                     for i in range(n) for j in range(i + 1, n)]
            acc(ad.scale(_sum(terms), 1.0 / len(terms)))
    if total is None:
        return Tensor(np.zeros((), dtype=sources[0].dtype))
    return total


def _sum(terms):
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def entropy(p: Tensor, check: bool = True) -> Tensor:
    """Row-wise Shannon entropy (nats) of probability vectors; 0 log 0 = 0."""
    if check:
        d = p.data
        if np.any(d < -1e-6) or np.any(np.abs(d.sum(axis=-1) - 1) > 1e-4):
            raise ContractError("entropy expects normalized non-negative probabilities")
    plogp = ad.mul(p, ad.log(ad.clamp_min(p, ENTROPY_FLOOR)))
    return ad.neg(ad.sum_(plogp, axis=-1))


def prediction_entropy(logits: Tensor) -> Tensor:
    return entropy(ad.softmax(_rows2d(logits)), check=False)


def dre_loss(logits_plus: Tensor, logits_ref: Tensor, logits_minus: Tensor) -> Tuple[Tensor, Tensor]:
    """Dual ranking entropy terms, ranked per sample then batch-averaged.

    ``l_plus`` penalises the enhanced prediction for being less certain than
    the reference, ``l_minus`` the contaminated one for being more certain.
    """
    e_plus = prediction_entropy(logits_plus)
    e_ref = prediction_entropy(logits_ref)
    e_minus = prediction_entropy(logits_minus)
    l_plus = ad.mean(ad.softplus(ad.sub(e_plus, e_ref)))
    l_minus = ad.mean(ad.softplus(ad.sub(e_ref, e_minus)))
    return l_plus, l_minus


def entropy_only_loss(logits_plus: Tensor, logits_minus: Tensor) -> Tuple[Tensor, Tensor]:
    """Unranked replacement: minimise E(f+) and maximise E(f-) up to ln n."""
    n = logits_plus.shape[-1]
    l_plus = ad.mean(prediction_entropy(logits_plus))
    l_minus = ad.shift(ad.neg(ad.mean(prediction_entropy(logits_minus))), math.log(n))
    return l_plus, l_minus


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean ``-log softmax(logits)[label]`` over rows."""
    z = _rows2d(logits)
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if lab.shape[0] != z.shape[0]:
        raise ContractError(f"{lab.shape[0]} labels for {z.shape[0]} rows")
    if lab.size and (lab.min() < 0 or lab.max() >= z.shape[-1]):
        raise ContractError(f"label out of range [0, {z.shape[-1]})")
    return ad.neg(ad.mean(ad.pick(ad.log_softmax(z), lab)))


def _check_prob(p: np.ndarray, what: str) -> None:
    if np.any(p < -1e-6) or np.any(np.abs(p.sum(axis=-1) - 1) > 1e-4):
        raise ContractError(f"{what} is not a probability vector")


def consist_l1(expert_probs: Tensor, shared_probs: Tensor) -> Tensor:
    """Batch mean of ``sum |expert - shared|``. The expert side is the teacher
    and carries no gradient."""
    e, s = _rows2d(expert_probs), _rows2d(shared_probs)
    _check_prob(e.data, "expert_probs")
    _check_prob(s.data, "shared_probs")
    teacher = ad.detach(e)
    return ad.mean(ad.sum_(ad.abs_(ad.sub(s, teacher)), axis=-1))


@dataclass(frozen=True)
class LossWeights:
    align: float = 0.5
    dre: float = 0.1
    cls: float = 1.0
    consist: float = 100.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be non-negative")


@dataclass
class LossBundle:
    l_align: float
    l_dre_plus: float
    l_dre_minus: float
    l_cls: float
    l_consist: float
    weights: LossWeights

    @property
    def total(self) -> float:
        w = self.weights
        return (w.align * self.l_align + w.dre * (self.l_dre_plus + self.l_dre_minus)
                + w.cls * self.l_cls + w.consist * self.l_consist)

    def as_dict(self):
        return {"l_cls": self.l_cls, "l_align": self.l_align, "l_dre_plus": self.l_dre_plus,
                "l_dre_minus": self.l_dre_minus, "l_consist": self.l_consist}


def compose_total(l_align=0.0, l_dre_plus=0.0, l_dre_minus=0.0, l_cls=0.0, l_consist=0.0,
                  weights: Optional[LossWeights] = None):
    """Weighted sum of component losses.

    Components may be floats (returns a :class:`LossBundle`) or tensors
    (returns the weighted tensor, ready for :func:`autodiff.backward`).
    """
    w = weights or LossWeights()
    comps = (l_align, l_dre_plus, l_dre_minus, l_cls, l_consist)
    if not any(isinstance(c, Tensor) for c in comps):
        return LossBundle(float(l_align), float(l_dre_plus), float(l_dre_minus), float(l_cls),
                          float(l_consist), w)
    total = None
    for c, lam in zip(comps, (w.align, w.dre, w.dre, w.cls, w.consist)):
        if isinstance(c, Tensor):
            term = ad.scale(c, lam)
            total = term if total is None else ad.add(total, term)
    return total
