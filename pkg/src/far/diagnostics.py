"""Evaluation and analysis: accuracy, feature divergence, activation maps,
and the variant runner for the ablation ladder."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import data as D
from . import losses as L
from . import network as N
from . import trainer as T

VAR_FLOOR = 1e-6
STAGES = ("F", "A", "A+R+")


class VariantId(enum.Enum):
    Baseline = "Baseline"
    BaselineAlign = "BaselineAlign"
    BaselineAttAlign = "BaselineAttAlign"
    FAR = "FAR"
    FARConv = "FARConv"
    FARGateC = "FARGateC"
    FARGateS = "FARGateS"
    FARNoDRE = "FARNoDRE"
    FARNoDREPlus = "FARNoDREPlus"
    FARNoDREMinus = "FARNoDREMinus"
    FARNoRanking = "FARNoRanking"
    FARNoTS = "FARNoTS"

    @classmethod
    def parse(cls, name: str) -> "VariantId":
        try:
            return cls(name)
        except ValueError:
            raise L.ConfigError(f"unknown variant {name!r}; choose from {[v.value for v in cls]}") from None


LADDER = (VariantId.Baseline, VariantId.BaselineAlign, VariantId.BaselineAttAlign, VariantId.FAR)

_BARE = dict(restoration=False, experts=False, dre="off", routing="joint")
# variant -> (recipe, loss-weight overrides)
VARIANTS: Dict[VariantId, Tuple[T.Recipe, dict]] = {
    VariantId.Baseline: (T.Recipe(attention=N.NO_ATTENTION, align=False, **_BARE), {}),
    VariantId.BaselineAlign: (T.Recipe(attention=N.NO_ATTENTION, align=True, **_BARE), {}),
    VariantId.BaselineAttAlign: (T.Recipe(attention=N.PARALLEL, align=True, **_BARE), {}),
    VariantId.FAR: (T.Recipe(), {}),
    VariantId.FARConv: (T.Recipe(attention=N.CONV1X1), {}),
    VariantId.FARGateC: (T.Recipe(attention=N.CHANNEL_ONLY), {}),
    VariantId.FARGateS: (T.Recipe(attention=N.SPATIAL_ONLY), {}),
    VariantId.FARNoDRE: (T.Recipe(), {"dre": 0.0}),
    VariantId.FARNoDREPlus: (T.Recipe(dre="minus"), {}),
    VariantId.FARNoDREMinus: (T.Recipe(dre="plus"), {}),
    VariantId.FARNoRanking: (T.Recipe(dre="entropy"), {}),
    VariantId.FARNoTS: (T.Recipe(experts=False), {"consist": 0.0}),
}


def variant_setup(variant: VariantId, weights: L.LossWeights) -> Tuple[T.Recipe, L.LossWeights]:
    recipe, overrides = VARIANTS[variant]
    return recipe, replace(weights, **overrides)


# ---------------------------------------------------------------------------
# metrics


def accuracy(model: N.FarModel, ds: D.LabeledSet) -> float:
    return T.accuracy(model, ds)


def _gauss_kl(mu1, var1, mu2, var2):
    return 0.5 * np.log(var2 / var1) + (var1 + (mu1 - mu2) ** 2) / (2 * var2) - 0.5


def symmetric_kl(a, b) -> float:
    """Mean over dimensions of the averaged two-way KL between per-dimension Gaussian fits."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ad.ContractError("symmetric_kl needs at least 2 samples per side")
    if a.shape[1] != b.shape[1]:
        raise ad.DimensionError(f"feature lengths differ: {a.shape[1]} vs {b.shape[1]}")
    mu_a, mu_b = a.mean(0), b.mean(0)
    va, vb = a.var(0) + VAR_FLOOR, b.var(0) + VAR_FLOOR
    kl = 0.5 * (_gauss_kl(mu_a, va, mu_b, vb) + _gauss_kl(mu_b, vb, mu_a, va))
    return float(np.mean(kl))


@dataclass
class DivergenceReport:
    stage: str
    domains: List[str]
    matrix: np.ndarray

    @property
    def mean(self) -> float:
        n = len(self.domains)
        if n < 2:
            return 0.0
        return float(self.matrix[~np.eye(n, dtype=bool)].mean())

    def as_dict(self) -> dict:
        return {"stage": self.stage, "domains": list(self.domains),
                "matrix": self.matrix.tolist(), "mean": self.mean}


def stage_features(model: N.FarModel, images: np.ndarray, batch_size: int = 256) -> Dict[str, np.ndarray]:
    """Pooled per-sample vectors of F, A and A+R+ (A+R+ equals A without restoration)."""
    out = {s: [] for s in STAGES}
    for i in range(0, len(images), batch_size):
        fb = model.forward(images[i:i + batch_size])
        out["F"].append(fb.pooled_F.data)
        out["A"].append(fb.f.data)
        out["A+R+"].append(fb.f_plus.data)
    return {s: np.concatenate(v).astype(np.float64) for s, v in out.items()}


def divergence_profile(model: N.FarModel, test_sets: Mapping[str, D.LabeledSet]) -> List[DivergenceReport]:
    if len(test_sets) < 2:
        raise ad.ContractError("divergence_profile needs at least 2 domains")
    names = list(test_sets)
    feats = {n: stage_features(model, test_sets[n].images) for n in names}
    reports = []
    for stage in STAGES:
        k = len(names)
        mat = np.zeros((k, k))
        for i in range(k):
            for j in range(i + 1, k):
                mat[i, j] = mat[j, i] = symmetric_kl(feats[names[i]][stage], feats[names[j]][stage])
        reports.append(DivergenceReport(stage, names, mat))
    return reports


def activation_map(feature) -> np.ndarray:
    """Channel sum of a c×h×w map, scaled to unit Frobenius norm (zero stays zero)."""
    arr = feature.data if isinstance(feature, ad.Tensor) else np.asarray(feature)
    if arr.ndim != 3:
        raise ad.DimensionError(f"activation_map expects c x h x w, got {arr.shape}")
    m = arr.astype(np.float64).sum(axis=0)
    norm = np.sqrt((m * m).sum())
    return m / norm if norm > 0 else np.zeros_like(m)


def entropy_stats(model: N.FarModel, ds: D.LabeledSet) -> Dict[str, float]:
    """Mean prediction entropy of the shared classifier on f+, f and f-."""
    fb = model.forward(ds.images)
    out = {}
    for key, logits in (("plus", fb.logits_plus), ("ref", fb.logits), ("minus", fb.logits_minus)):
        if logits is not None:
            out[key] = float(L.prediction_entropy(logits).data.mean())
    return out


# ---------------------------------------------------------------------------
# variant runner


@dataclass(frozen=True)
class Benchmark:
    """A leave-one-domain-out experiment on generated domains."""

    domains: Tuple[D.DomainSpec, ...] = field(default_factory=lambda: tuple(D.default_domains()))
    n_classes: int = 4
    image_size: int = 16
    n_train: int = 512
    n_test: int = 256
    held_out: int = 3
    data_seed: int = 0
    model: N.ModelConfig = N.ModelConfig()
    train: T.TrainConfig = T.TrainConfig()

    def splits(self) -> Tuple[List[D.LabeledSet], List[D.LabeledSet]]:
        train = [D.generate(s, self.n_train, self.n_classes, self.domain_seed(s, "train"), self.image_size)
                 for s in self.domains]
        test = [D.generate(s, self.n_test, self.n_classes, self.domain_seed(s, "test"), self.image_size)
                for s in self.domains]
        return train, test

    def domain_seed(self, spec: D.DomainSpec, split: str) -> int:
        return self.data_seed * 10_000 + (0 if split == "train" else 5_000) + spec.domain_id

    def train_data(self, train: Sequence[D.LabeledSet], test: Sequence[D.LabeledSet]) -> T.TrainData:
        sources, target = D.leave_one_domain_out(train, self.held_out, self.train.mode)
        evals = {f"d{t.domain_id}": t for t in test}
        return T.TrainData(sources, target if self.train.mode == "uda" else None, evals)


@dataclass
class VariantResult:
    variant: VariantId
    seed: int
    target_acc: float
    accs: Dict[str, float]
    state: T.TrainState
    divergence: Optional[List[DivergenceReport]] = None

    def row(self) -> dict:
        row = {"variant": self.variant.value, "seed": self.seed, "target_acc": self.target_acc}
        row.update({f"acc_{k}": v for k, v in self.accs.items()})
        if self.divergence:
            row.update({f"div_{r.stage}": r.mean for r in self.divergence})
        return row


def run_variant(variant, bench: Benchmark = Benchmark(), seed: int = 0, divergence: bool = False,
                splits=None) -> VariantResult:
    """Train ``variant`` on the benchmark split and score every domain's test set."""
    if not isinstance(variant, VariantId):
        variant = VariantId.parse(variant)
    recipe, weights = variant_setup(variant, bench.train.weights)
    cfg = replace(bench.train, weights=weights, seed=seed)
    model = N.FarModel(recipe.model_config(replace(bench.model, n_classes=bench.n_classes,
                                                   image_size=bench.image_size)), seed=seed)
    train, test = splits if splits is not None else bench.splits()
    data = bench.train_data(train, test)
    data.evals = {}
    state = T.train(model, data, cfg, recipe)
    accs = {f"d{t.domain_id}": accuracy(model, t) for t in test}
    result = VariantResult(variant, seed, accs[f"d{bench.held_out}"], accs, state)
    if divergence:
        result.divergence = divergence_profile(model, {f"d{t.domain_id}": t for t in test})
    return result


def summarize(results: Sequence[VariantResult]) -> List[dict]:
    """Mean and (population) std of target accuracy per variant, in first-seen order."""
    order: List[VariantId] = []
    by: Dict[VariantId, List[float]] = {}
    for r in results:
        if r.variant not in by:
            order.append(r.variant)
            by[r.variant] = []
        by[r.variant].append(r.target_acc)
    return [{"variant": v.value, "n_seeds": len(by[v]), "mean_acc": float(np.mean(by[v])),
             "std_acc": float(np.std(by[v]))} for v in order]


def ladder_verdict(summary: Sequence[dict]) -> dict:
    """Checks FAR >= BaselineAttAlign >= BaselineAlign >= Baseline and FAR > Baseline."""
    means = {row["variant"]: row["mean_acc"] for row in summary}
    needed = [v.value for v in LADDER]
    missing = [v for v in needed if v not in means]
    if missing:
        return {"complete": False, "missing": missing, "holds": None}
    chain = [means[v] for v in reversed(needed)]
    ordered = all(a >= b for a, b in zip(chain, chain[1:]))
    strict = means["FAR"] > means["Baseline"]
    return {"complete": True, "holds": bool(ordered and strict), "ordered": bool(ordered),
            "far_beats_baseline": bool(strict), "means": {v: means[v] for v in needed}}

