"""``detnas`` command line: search, derive, eval, count-space, selfcheck, gen-data."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from datetime import datetime
from pathlib import Path

import numpy as np

from detnas.cli.config import RunConfig, load_config
from detnas.cli.selfcheck import run_selfcheck
from detnas.cli.synthetic import gen_synthetic_dataset, load_dataset, save_dataset, to_detection_set
from detnas.errors import ConfigError, DetNASError, InputError
from detnas.search.train import TrainMetrics, run_search, train_derived
from detnas.supernet import ArchParams, Genotype, count_params_flops, count_search_space, derive, preset
from detnas.supernet.counting import SINGLE_C3_NOTE, TOTAL_NOTE
from detnas.supernet.spec import LEVELS, SearchSpaceSpec

log = logging.getLogger("detnas")

FULL_LEVELS = ("s", "m", "l", "x")


def run_dir(root, command: str) -> Path:
    """Fresh timestamped directory under ``root``; existing runs are never reused."""
    root = Path(root)
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    for i in range(1000):
        path = root / (f"{command}-{stamp}" + (f"-{i}" if i else ""))
        try:
            path.mkdir(parents=True)
            return path
        except FileExistsError:
            continue
    raise ConfigError(f"could not create a run directory under {root}")


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "level", None):
        cfg.level, cfg.spec = args.level, None
    if getattr(args, "seed", None) is not None:
        cfg.search.seed = args.seed
        cfg.data.seed = args.seed
    cfg.validate()
    return cfg


def dataset_for(cfg: RunConfig, data_dir=None):
    if data_dir:
        ds, _ = load_dataset(data_dir)
        if ds.num_classes != cfg.data.num_classes:
            raise ConfigError(f"dataset has {ds.num_classes} classes, config says {cfg.data.num_classes}")
        return ds
    samples = gen_synthetic_dataset(cfg.data.n_train, cfg.data.synthetic(), cfg.data.seed)
    return to_detection_set(samples, cfg.data.num_classes)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _log_row(row: dict) -> None:
    log.info("epoch %d  weight_loss %.4f  arch_loss %.4f  tau %.3f",
             row["epoch"], row["weight_loss"], row["arch_loss"], row["tau"])


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    out = run_dir(args.out, "gen-data")
    samples = gen_synthetic_dataset(cfg.data.n_train, cfg.data.synthetic(), cfg.data.seed)
    save_dataset(samples, cfg.data.synthetic(), out / "data")
    _write_json(out / "config.json", cfg.to_dict())
    print(f"wrote {len(samples)} samples to {out / 'data'}")
    return 0


def cmd_search(args) -> int:
    cfg = resolve_config(args)
    spec = cfg.search_space()
    ds = dataset_for(cfg, args.data)
    out = run_dir(args.out, "search")
    _write_json(out / "config.json", cfg.to_dict())
    start = time.perf_counter()
    genotype, metrics = run_search(spec, ds, cfg.search, log=_log_row)
    (out / "genotype.json").write_text(genotype.to_json())
    metrics.write_csv(out / "metrics.csv")
    _write_json(out / "alphas.json", {"spec": spec.to_dict(), "alphas": metrics.alphas})
    params, macs = count_params_flops(genotype, (cfg.data.image_size, cfg.data.image_size))
    summary = [
        f"level {spec.level}, {len(ds)} images, {cfg.search.epochs} epochs, {time.perf_counter() - start:.1f}s",
        f"weight loss {metrics.rows[0]['weight_loss']:.4f} -> {metrics.rows[-1]['weight_loss']:.4f}",
        f"derived network: {params} params, {macs} MACs at {cfg.data.image_size}x{cfg.data.image_size}",
        f"outputs in {out}",
    ]
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))
    return 0


def _load_alphas(path) -> ArchParams:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"architecture checkpoint not found: {path}")
    doc = json.loads(path.read_text())
    try:
        spec = SearchSpaceSpec.from_dict(doc["spec"])
        return ArchParams(spec, doc["alphas"], dtype=np.float64)
    except KeyError as e:
        raise InputError(f"{path}: missing field {e}") from None


def cmd_derive(args) -> int:
    if args.alphas:
        params = _load_alphas(args.alphas)
    else:
        cfg = resolve_config(args)
        params = ArchParams(cfg.search_space(), dtype=np.float64)
    genotype = derive(params)
    out = run_dir(args.out, "derive")
    (out / "genotype.json").write_text(genotype.to_json())
    print(f"derived {genotype.level} genotype -> {out / 'genotype.json'}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    path = Path(args.genotype)
    if not path.is_file():
        raise FileNotFoundError(f"genotype not found: {path}")
    genotype = Genotype.from_json(path.read_text())
    ds = dataset_for(cfg, args.data)
    epochs = cfg.eval_epochs if args.epochs is None else args.epochs
    out = run_dir(args.out, "eval")
    _write_json(out / "config.json", cfg.to_dict())
    metrics: TrainMetrics = train_derived(genotype, ds, epochs, cfg.search, log=_log_row)
    metrics.write_csv(out / "metrics.csv")
    losses = metrics.column("weight_loss")
    params, macs = count_params_flops(genotype, (cfg.data.image_size, cfg.data.image_size))
    summary = [
        f"{genotype.level} genotype, {len(ds)} images, {epochs} epochs",
        "loss per epoch: " + " ".join(f"{v:.4f}" for v in losses),
        f"{params} params, {macs} MACs",
        f"outputs in {out}",
    ]
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))
    return 0 if np.all(np.isfinite(losses)) else 1


def count_table(levels) -> tuple:
    rows, lines = [], []
    lines.append(f"{'level':<6}{'backbone':>10}{'fpn':>10}{'total':>10}   exact total")
    for level in levels:
        size = count_search_space(preset(level))
        bb, fpn, total = size.rounded_product()
        rows.append({
            "level": level, "backbone": size.backbone, "fpn": size.fpn, "total": size.total,
            "backbone_2sf": bb, "fpn_2sf": fpn, "total_2sf": total, "exact_total_2sf": size.formatted()[2],
            "single_c3_fpn_2sf": count_search_space(preset(level), per_scale_c3=False).formatted()[1],
        })
        lines.append(f"{level:<6}{bb:>10}{fpn:>10}{total:>10}   {size.total}")
    lines += [SINGLE_C3_NOTE, TOTAL_NOTE]
    return rows, lines


def cmd_count_space(args) -> int:
    levels = FULL_LEVELS if not args.level else (args.level.split("-")[0],)
    rows, lines = count_table(levels)
    print("\n".join(lines))
    if args.out:
        out = run_dir(args.out, "count-space")
        _write_json(out / "counts.json", {"rows": [{k: str(v) if isinstance(v, int) else v for k, v in r.items()}
                                                   for r in rows]})
        (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return 0


def cmd_selfcheck(args) -> int:
    results = run_selfcheck(args.seed or 0)
    failed = [r for r in results if not r[1]]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if args.out:
        out = run_dir(args.out, "selfcheck")
        _write_json(out / "selfcheck.json", [
            {"check": n, "ok": ok, "detail": d, "seconds": round(s, 3)} for n, ok, d, s in results
        ])
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="detnas", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="runs"):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="overrides the search and data seeds")
        sp.add_argument("--out", default=out_default, help="root directory for timestamped run folders")
        sp.add_argument("--level", choices=LEVELS, help="search-space preset (overrides the config)")
        sp.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
        return sp

    s = common(sub.add_parser("search", help="bi-level search; writes genotype.json and metrics.csv"))
    s.add_argument("--data", help="dataset directory from gen-data (default: generate from the config)")
    s.set_defaults(fn=cmd_search)

    d = common(sub.add_parser("derive", help="genotype from an architecture checkpoint (or zero weights)"))
    d.add_argument("--alphas", help="alphas.json written by search")
    d.set_defaults(fn=cmd_derive)

    e = common(sub.add_parser("eval", help="train a genotype's network from scratch"))
    e.add_argument("--genotype", required=True)
    e.add_argument("--data")
    e.add_argument("--epochs", type=int)
    e.set_defaults(fn=cmd_eval)

    c = common(sub.add_parser("count-space", help="exact search-space sizes"), out_default=None)
    c.set_defaults(fn=cmd_count_space)

    k = common(sub.add_parser("selfcheck", help="run the invariant suite; nonzero exit on failure"), out_default=None)
    k.set_defaults(fn=cmd_selfcheck)

    g = common(sub.add_parser("gen-data", help="write a synthetic dataset"))
    g.set_defaults(fn=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (DetNASError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"detnas {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
