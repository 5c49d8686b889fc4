"""Flat ``key = value`` experiment configuration.

Per-domain settings use ``domain.<i>.<field>`` keys; ``domains`` sets how
many exist. Lists are comma separated. Unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from . import data as D
from . import diagnostics as G
from . import losses as L
from . import network as N
from . import trainer as T

ConfigError = L.ConfigError


def _floats(text: str) -> Tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _names(text: str) -> Tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_BENCH = G.Benchmark()
_TRAIN = _BENCH.train

# key -> (parser, default)
GLOBAL_KEYS: Dict[str, Tuple[Callable[[str], object], object]] = {
    "mode": (str, _TRAIN.mode),
    "epochs": (int, _TRAIN.epochs),
    "batch_per_domain": (int, _TRAIN.batch_per_domain),
    "lr_init": (float, _TRAIN.lr_init),
    "lr_min": (float, _TRAIN.lr_min),
    "momentum": (float, _TRAIN.momentum),
    "lambda_align": (float, _TRAIN.weights.align),
    "lambda_dre": (float, _TRAIN.weights.dre),
    "lambda_cls": (float, _TRAIN.weights.cls),
    "lambda_consist": (float, _TRAIN.weights.consist),
    "seed": (int, 0),
    "n_classes": (int, _BENCH.n_classes),
    "image_size": (int, _BENCH.image_size),
    "n_train": (int, _BENCH.n_train),
    "n_test": (int, _BENCH.n_test),
    "held_out": (int, _BENCH.held_out),
    "data_seed": (int, _BENCH.data_seed),
    "domains": (int, len(_BENCH.domains)),
    "widths": (_ints, _BENCH.model.widths),
    "reduction": (int, _BENCH.model.reduction),
    "variant": (str, G.VariantId.FAR.value),
    "variants": (_names, tuple(v.value for v in G.LADDER)),
    "seeds": (_ints, (0, 1, 2, 3, 4)),
    "data_dir": (str, "data"),
    "diagnose_samples": (int, 4),
}

DOMAIN_FIELDS = {"shift": _floats, "scale": _floats, "rho": float, "noise_std": float}


def _domain_default(i: int, field: str):
    specs = {s.domain_id: s for s in _BENCH.domains}
    spec = specs.get(i, D.DomainSpec(i, noise_std=_BENCH.domains[0].noise_std))
    return {"shift": tuple(spec.style_shift), "scale": tuple(spec.style_scale),
            "rho": spec.rho, "noise_std": spec.noise_std}[field]


def parse_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; later keys win."""
    out: Dict[str, str] = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{no}: empty key")
        out[key] = value
    return out


def parse_override(item: str) -> Tuple[str, str]:
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, value = (p.strip() for p in item.split("=", 1))
    return key, value


@dataclass(frozen=True)
class Config:
    values: Tuple[Tuple[str, object], ...]

    def __getitem__(self, key: str):
        return dict(self.values)[key]

    def as_dict(self) -> Dict[str, object]:
        return dict(self.values)

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.values)

    # -- views ---------------------------------------------------------

    def domain_specs(self) -> List[D.DomainSpec]:
        v = self.as_dict()
        specs = []
        for i in range(v["domains"]):
            spec = D.DomainSpec(i, v[f"domain.{i}.shift"], v[f"domain.{i}.scale"],
                                v[f"domain.{i}.rho"], v[f"domain.{i}.noise_std"])
            spec.validate()
            specs.append(spec)
        return specs

    def train_config(self) -> T.TrainConfig:
        v = self.as_dict()
        w = L.LossWeights(align=v["lambda_align"], dre=v["lambda_dre"], cls=v["lambda_cls"],
                          consist=v["lambda_consist"])
        cfg = T.TrainConfig(mode=v["mode"], epochs=v["epochs"], batch_per_domain=v["batch_per_domain"],
                            lr_init=v["lr_init"], lr_min=v["lr_min"], momentum=v["momentum"],
                            weights=w, seed=v["seed"])
        cfg.validate()
        return cfg

    def benchmark(self) -> G.Benchmark:
        v = self.as_dict()
        n_sources = v["domains"] - 1
        model = N.ModelConfig(image_size=v["image_size"], widths=tuple(v["widths"]), n_classes=v["n_classes"],
                              n_experts=n_sources, reduction=v["reduction"])
        model.validate()
        if not 0 <= v["held_out"] < v["domains"]:
            raise ConfigError(f"held_out={v['held_out']} is not a domain id (0..{v['domains'] - 1})")
        return G.Benchmark(domains=tuple(self.domain_specs()), n_classes=v["n_classes"],
                           image_size=v["image_size"], n_train=v["n_train"], n_test=v["n_test"],
                           held_out=v["held_out"], data_seed=v["data_seed"], model=model,
                           train=self.train_config())


def resolve(file_values: Mapping[str, str] = (), overrides: Sequence[Tuple[str, str]] = ()) -> Config:
    """Merge defaults, file values and overrides (in that order of precedence)."""
    raw = dict(file_values)
    raw.update(dict(overrides))
    out: Dict[str, object] = {}
    for key, (parse, default) in GLOBAL_KEYS.items():
        out[key] = _convert(key, parse, raw.pop(key)) if key in raw else default
    n = out["domains"]
    if n < 2:
        raise ConfigError("domains must be at least 2")
    for i in range(n):
        for field, parse in DOMAIN_FIELDS.items():
            key = f"domain.{i}.{field}"
            out[key] = _convert(key, parse, raw.pop(key)) if key in raw else _domain_default(i, field)
    if raw:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(raw))}")
    for key in ("mode",):
        if out[key] not in ("dg", "uda"):
            raise ConfigError(f"mode must be 'dg' or 'uda', got {out[key]!r}")
    for name in (out["variant"],) + tuple(out["variants"]):
        G.VariantId.parse(name)
    return Config(tuple(out.items()))


def _convert(key: str, parse, text: str):
    try:
        return parse(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def load(path: Optional[str], overrides: Sequence[Tuple[str, str]] = ()) -> Config:
    values: Dict[str, str] = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                values = parse_text(fh.read(), str(path))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return resolve(values, overrides)
