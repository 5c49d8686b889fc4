"""``far`` command line: dataset generation, training, ablation ladders, diagnostics."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import struct
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import config as C
from . import data as D
from . import diagnostics as G
from . import network as N
from . import trainer as T

log = logging.getLogger("far")

STAGE_SLUG = {"F": "F", "A": "A", "A+R+": "ApRp"}


class FarError(Exception):
    pass


def _num(v) -> str:
    if isinstance(v, float):
        return f"{v:.9g}"
    return "" if v is None else str(v)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(row.get(h)) for h in header])


def write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise FarError(f"cannot create output directory {out}: {e.strerror}") from None
    return out


def _config(args, seed_key: str = "seed") -> C.Config:
    overrides = [C.parse_override(s) for s in args.set]
    if args.seed is not None:
        overrides.append((seed_key, str(args.seed)))
    return C.load(args.config, overrides)


def fard_name(domain_id: int, split: str) -> str:
    return f"d{domain_id}_{split}.fard"


def load_splits(cfg: C.Config) -> Tuple[List[D.LabeledSet], List[D.LabeledSet]]:
    root = Path(cfg["data_dir"])
    splits: Dict[str, List[D.LabeledSet]] = {"train": [], "test": []}
    for spec in cfg.domain_specs():
        for split in splits:
            path = root / fard_name(spec.domain_id, split)
            if not path.is_file():
                raise FarError(f"missing dataset file {path} (run 'far dataset gen' first)")
            ds = D.load(path)
            if ds.domain_id != spec.domain_id or ds.images.shape[2] != cfg["image_size"]:
                raise FarError(f"{path} does not match the configured domain/image size")
            splits[split].append(ds)
    return splits["train"], splits["test"]


# ---------------------------------------------------------------------------
# dataset


def cmd_dataset_gen(args) -> int:
    cfg = _config(args, "data_seed")
    bench = cfg.benchmark()
    out = _out_dir(args)
    files = []
    train, test = bench.splits()
    for split, sets in (("train", train), ("test", test)):
        for spec, ds in zip(bench.domains, sets):
            path = out / fard_name(spec.domain_id, split)
            D.save(ds, path)
            files.append({"path": path.name, "domain": spec.domain_id, "split": split, "n": len(ds),
                          "seed": bench.domain_seed(spec, split), "sha256": sha256_file(path)})
    manifest = {
        "data_seed": bench.data_seed,
        "n_classes": bench.n_classes,
        "image_size": bench.image_size,
        "files": files,
        "specs": {str(s.domain_id): {"digest": s.digest(), "style_shift": list(s.style_shift),
                                     "style_scale": list(s.style_scale), "rho": s.rho, "noise_std": s.noise_std}
                  for s in bench.domains},
    }
    write_json(out / "manifest.json", manifest)
    print(f"wrote {len(files)} files to {out}")
    return 0


def cmd_dataset_inspect(args) -> int:
    ds = D.load(args.path)
    info = {"domain_id": ds.domain_id, "n": len(ds), "shape": list(ds.images.shape[1:]),
            "n_classes": ds.n_classes, "has_labels": ds.has_labels,
            "channel_means": [float(f"{m:.6g}") for m in ds.images.mean(axis=(0, 2, 3))]}
    if ds.has_labels:
        info["class_counts"] = np.bincount(ds.labels, minlength=ds.n_classes).tolist()
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# train


def metrics_header(n_domains: int) -> List[str]:
    return ["epoch", "step", "lr", *T.LOSS_COLUMNS] + [f"acc_d{i}" for i in range(n_domains)]


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.dry_run:
        sys.stdout.write(cfg.to_text())
        return 0
    bench = cfg.benchmark()
    variant = G.VariantId.parse(cfg["variant"])
    recipe, weights = G.variant_setup(variant, bench.train.weights)
    train_cfg = replace(bench.train, weights=weights)
    train, test = load_splits(cfg)
    out = _out_dir(args)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    model = N.FarModel(recipe.model_config(bench.model), seed=train_cfg.seed)
    state = T.train(model, bench.train_data(train, test), train_cfg, recipe)
    write_csv(out / "metrics.csv", metrics_header(len(bench.domains)), state.log)
    T.save_checkpoint(out / "checkpoint.farc", model, state.opt,
                      {"config": cfg.to_text(), "variant": variant.value, "epoch": state.epoch})
    final = state.log[-1]
    print(f"target d{bench.held_out} accuracy {final[f'acc_d{bench.held_out}']:.4f}; wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# ablation


def _ablation_job(job):
    cfg_text, variant, seed = job
    cfg = C.resolve(C.parse_text(cfg_text))
    bench = cfg.benchmark()
    res = G.run_variant(variant, bench, seed, splits=load_splits(cfg))
    return res.row()


def cmd_ablation(args) -> int:
    cfg = _config(args, "seeds")
    if args.dry_run:
        sys.stdout.write(cfg.to_text())
        return 0
    bench = cfg.benchmark()
    load_splits(cfg)  # fail early on missing data
    out = _out_dir(args)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    jobs = [(cfg.to_text(), v, s) for v in cfg["variants"] for s in cfg["seeds"]]
    workers = max(1, min(int(os.environ.get("FAR_THREADS", "1") or 1), len(jobs)))
    if workers == 1:
        rows = [_ablation_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_ablation_job, jobs))
    n_dom = len(bench.domains)
    for r in rows:
        r["target_domain"] = bench.held_out
    write_csv(out / "runs.csv", ["variant", "seed", "target_domain", "target_acc"] +
              [f"acc_d{i}" for i in range(n_dom)], rows)
    results = [G.VariantResult(G.VariantId(r["variant"]), r["seed"], r["target_acc"], {}, None) for r in rows]
    summary = G.summarize(results)
    for s in summary:
        s["target_domain"] = bench.held_out
    write_csv(out / "summary.csv", ["variant", "target_domain", "n_seeds", "mean_acc", "std_acc"], summary)
    verdict = {"ladder": G.ladder_verdict(summary)}
    means = {s["variant"]: s["mean_acc"] for s in summary}
    if "FAR" in means and "FARNoDRE" in means:
        verdict["dre"] = {"holds": means["FAR"] >= means["FARNoDRE"], "FAR": means["FAR"],
                          "FARNoDRE": means["FARNoDRE"]}
    write_json(out / "verdict.json", verdict)
    for s in summary:
        print(f"{s['variant']:<18} {s['mean_acc']:.4f} ± {s['std_acc']:.4f}  (n={s['n_seeds']})")
    return 0


# ---------------------------------------------------------------------------
# diagnose


def to_pgm(m: np.ndarray) -> str:
    lo, hi = float(m.min()), float(m.max())
    scaled = np.zeros(m.shape, dtype=int) if hi <= lo else np.rint((m - lo) / (hi - lo) * 255).astype(int)
    h, w = m.shape
    lines = ["P2", f"{w} {h}", "255"] + [" ".join(str(v) for v in row) for row in scaled]
    return "\n".join(lines) + "\n"


def stage_maps(fb: N.ForwardBundle) -> Dict[str, np.ndarray]:
    plus = fb.A.data + fb.R_plus.data if fb.R_plus is not None else fb.A.data
    return {"F": fb.F.data, "A": fb.A.data, "A+R+": plus}


def cmd_diagnose(args) -> int:
    if args.checkpoint is None:
        raise FarError("diagnose needs --checkpoint PATH")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FarError(f"missing checkpoint {ckpt}")
    meta = read_checkpoint_meta(ckpt)
    overrides = [C.parse_override(s) for s in args.set]
    cfg = C.resolve(C.parse_text(meta.get("config", "")), overrides) if args.config is None else _config(args)
    bench = cfg.benchmark()
    recipe, _ = G.variant_setup(G.VariantId.parse(meta.get("variant", cfg["variant"])), bench.train.weights)
    model = N.FarModel(recipe.model_config(bench.model))
    T.load_checkpoint(ckpt, model)
    _, test = load_splits(cfg)
    out = _out_dir(args)
    named = {f"d{t.domain_id}": t for t in test}
    reports = G.divergence_profile(model, named)
    write_json(out / "divergence_report.json", {"stages": {r.stage: r.as_dict() for r in reports}})
    maps_dir = out / "maps"
    maps_dir.mkdir(exist_ok=True)
    rows = []
    k = cfg["diagnose_samples"]
    for name, ds in named.items():
        fb = model.forward(ds.images)
        maps = stage_maps(fb)
        pooled = {"F": fb.pooled_F.data, "A": fb.f.data, "A+R+": fb.f_plus.data}
        for stage in G.STAGES:
            for i in range(min(k, len(ds))):
                (maps_dir / f"{name}_s{i}_{STAGE_SLUG[stage]}.pgm").write_text(
                    to_pgm(G.activation_map(maps[stage][i])), encoding="ascii")
            for i in range(len(ds)):
                row = {"stage": stage, "domain": name, "sample": i, "label": int(ds.labels[i])}
                row.update({f"f{j}": float(v) for j, v in enumerate(pooled[stage][i])})
                rows.append(row)
    c = model.cfg.feature_channels
    write_csv(out / "features.csv", ["stage", "domain", "sample", "label"] + [f"f{j}" for j in range(c)], rows)
    for r in reports:
        print(f"divergence {r.stage:<5} {r.mean:.6g}")
    return 0


def read_checkpoint_meta(path: Path) -> dict:
    """Metadata block of a FARC file without building a model."""
    buf = Path(path).read_bytes()
    if buf[:4] != T.CKPT_MAGIC:
        raise T.CheckpointError("bad magic, expected b'FARC' at byte offset 0")
    _, count = struct.unpack_from("<II", buf, 4)
    off, sizes = 12, []
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, off)
        off += 2 + ln
        (lg,) = struct.unpack_from("<H", buf, off)
        off += 2 + lg
        (nd,) = struct.unpack_from("<I", buf, off)
        shape = struct.unpack_from(f"<{nd}I", buf, off + 4)
        off += 4 + 4 * nd
        sizes.append(int(np.prod(shape)))
    off += 8 * sum(sizes)
    (lm,) = struct.unpack_from("<I", buf, off)
    return json.loads(buf[off + 4:off + 4 + lm].decode())


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(f"far-error: {message}\n")
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--seed", type=int,
                        help="training seed; the data seed for 'dataset gen', the seed list for 'ablation'")
    common.add_argument("--out", default="far-out", metavar="DIR", help="output directory")
    common.add_argument("--dry-run", action="store_true", help="print the resolved config and stop")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="far", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    ds = sub.add_parser("dataset", help="generate or inspect FARD files")
    dsub = ds.add_subparsers(dest="action", required=True, parser_class=_Parser)
    dsub.add_parser("gen", parents=[common], help="write train/test FARD files per domain").set_defaults(
        fn=cmd_dataset_gen)
    insp = dsub.add_parser("inspect", help="summarise a FARD file")
    insp.add_argument("path")
    insp.set_defaults(fn=cmd_dataset_inspect)
    sub.add_parser("train", parents=[common], help="train one variant").set_defaults(fn=cmd_train)
    sub.add_parser("ablation", parents=[common], help="variants x seeds ladder").set_defaults(fn=cmd_ablation)
    diag = sub.add_parser("diagnose", parents=[common], help="divergence, maps and features of a checkpoint")
    diag.add_argument("--checkpoint", metavar="PATH")
    diag.set_defaults(fn=cmd_diagnose)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    if getattr(args, "dry_run", False) and args.fn is cmd_dataset_gen:
        sys.stdout.write(_config(args, "data_seed").to_text())
        return 0
    try:
        return args.fn(args)
    except (FarError, C.ConfigError, D.FormatError, D.ContractError, D.ConfigError, T.CheckpointError,
            T.TrainingError, ValueError, OSError) as e:
        sys.stderr.write(f"far-error: {e}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
