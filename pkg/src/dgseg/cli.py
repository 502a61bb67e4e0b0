"""Command-line entry point: ``dgseg {stats,preprocess,train,eval,ablate}``.

Run configs are YAML files with three sections::

    train:   # TrainConfig fields, with a nested ``model`` block
      iterations: 2000
      p: 0.1
    data:
      train: {synthetic: {seed: 0, n: 64, domain: A}}   # or {dir: path/to/domain}
      eval:
        B: {synthetic: {seed: 5000, n: 64, domain: B}}
    style: {synthetic: {seed: 10000, n: 256}}           # or {corpus: dir} / {stats: file.json}

Every report is printed as an aligned table and also written as
line-delimited JSON records.  Any library error exits with status 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from . import data as D
from .errors import ConfigurationError, DgsegError
from .experiment import summarize
from .metrics import ablation_report, evaluate
from .style import StyleStats, extract_style, fit_style_stats, fit_style_stats_from_dir
from .training import ABLATION_ROWS, TrainConfig, ablation_config, load_config, load_state, run_training


def _write_records(path: Path | None, records: list[dict]) -> None:
    if path is None:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def load_dataset(spec: dict, size: int | None = None, classes: int | None = None) -> list[D.SegSample]:
    """Build a dataset from a ``{synthetic: {...}}`` or ``{dir: path}`` spec."""
    if "synthetic" in spec:
        s = dict(spec["synthetic"])
        domain = s.pop("domain", "A")
        if domain not in ("A", "B"):
            raise ConfigurationError(f"synthetic domain must be 'A' or 'B', got {domain!r}")
        a, b = D.synth_two_domain(int(s.get("seed", 0)), int(s.get("n", 64)), int(s.get("size", size or 32)),
                                  int(s.get("classes", classes or 3)))
        return a if domain == "A" else b
    if "dir" in spec:
        d = Path(spec["dir"])
        return D.load_pairs(D.pair_files(d), domain=spec.get("domain", d.name))
    raise ConfigurationError(f"dataset spec needs 'synthetic' or 'dir': {spec}")


def load_style(spec: dict | None, size: int = 32, classes: int = 3) -> StyleStats | None:
    if not spec:
        return None
    if "stats" in spec:
        return StyleStats.load(spec["stats"])
    if "corpus" in spec:
        return fit_style_stats_from_dir(spec["corpus"])
    if "synthetic" in spec:
        s = spec["synthetic"]
        corpus = D.synth_style_corpus(int(s.get("seed", 10_000)), int(s.get("n", 256)), size, classes)
        return fit_style_stats([extract_style(x) for x in corpus])
    raise ConfigurationError(f"style spec needs 'stats', 'corpus' or 'synthetic': {spec}")


def _read_run_config(path: str) -> tuple[TrainConfig, dict]:
    raw = load_config(path)
    unknown = set(raw) - {"train", "data", "style"}
    if unknown:
        raise ConfigurationError(f"{path}: unknown sections {sorted(unknown)}")
    return TrainConfig.from_dict(raw.get("train") or {}), raw


def _sizes(cfg: TrainConfig) -> tuple[int, int]:
    return cfg.model.backbone.image_size[0], cfg.model.num_classes


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_stats(args) -> int:
    stats = fit_style_stats_from_dir(args.corpus)
    stats.save(args.out)
    c = stats.dim // 2
    print(f"fitted style statistics from {stats.count} images -> {args.out}")
    print(f"{'channel':<8}{'mean(mu)':>10}{'mean(sd)':>10}{'std(mu)':>10}{'std(sd)':>10}")
    for i in range(c):
        print(f"{i:<8}{stats.mean[i]:10.4f}{stats.mean[c + i]:10.4f}{stats.std[i]:10.4f}{stats.std[c + i]:10.4f}")
    return 0


def cmd_preprocess(args) -> int:
    src, out = Path(args.src), Path(args.out)
    records = []
    if args.benchmark:
        bench = D.BENCHMARKS.get(args.benchmark)
        if bench is None:
            raise ConfigurationError(f"unknown benchmark {args.benchmark!r}")
        split = D.build_split(src, args.benchmark, args.manifest)
        jobs = [("train", bench.source, args.map_source), ("test", bench.target, args.map_target)]
        for which, domain, mname in jobs:
            ddir = D._domain_dir(src, bench.group, domain, which)
            if not split[which]:
                continue
            mapping = D.load_mapping(mname) if mname else None
            rec = D.preprocess_domain(ddir, out / bench.group / domain / which, args.tile, args.stride,
                                      mapping, domain)
            records.append({"split": which, **rec})
        summary = {"benchmark": args.benchmark, "counts": split["counts"], "warnings": split["warnings"]}
        if "count_check" in split:
            summary["count_check"] = split["count_check"]
    else:
        mapping = D.load_mapping(args.map_source) if args.map_source else None
        records.append(D.preprocess_domain(src, out, args.tile, args.stride, mapping, args.domain or src.name))
        summary = {}
    out.mkdir(parents=True, exist_ok=True)
    manifest = {**summary, "tile": args.tile, "stride": args.stride or args.tile, "domains": records}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    print(f"{'split':<8}{'domain':<20}{'pairs':>8}{'tiles':>8}")
    for r in records:
        print(f"{r.get('split', '-'):<8}{r['domain']:<20}{r['source_pairs']:>8}{r['tiles']:>8}")
    _write_records(out / "manifest.jsonl", [{k: v for k, v in r.items() if k != "files"} for r in records])
    return 0


def cmd_train(args) -> int:
    cfg, raw = _read_run_config(args.config)
    if args.iterations:
        cfg = cfg.replace(iterations=args.iterations)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    size, k = _sizes(cfg)
    dspec = (raw.get("data") or {}).get("train")
    if not dspec:
        raise ConfigurationError("config has no data.train section")
    dataset = load_dataset(dspec, size, k)
    stats = load_style(raw.get("style"), size, k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = None
    if not args.resume:
        (out / "metrics.jsonl").unlink(missing_ok=True)
    else:
        state = load_state(args.resume)
        state.config = cfg
    state, records = run_training(cfg, dataset, stats, state=state, log_path=out / "metrics.jsonl",
                                  checkpoint_dir=out)
    last = records[-1] if records else {}
    print(f"trained {state.iteration} iterations; styled samples {state.styled_count}")
    if last:
        print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in last.items()))
    print(f"checkpoint: {out / 'last.bin'}")
    return 0


def cmd_eval(args) -> int:
    state = load_state(args.checkpoint)
    size, k = _sizes(state.config)
    if args.data_dir:
        dataset = load_dataset({"dir": args.data_dir}, size, k)
    else:
        dataset = load_dataset({"synthetic": {"seed": args.synthetic_seed, "n": args.n, "domain": args.domain}},
                               size, k)
    names = args.class_names.split(",") if args.class_names else None
    report = evaluate(state, dataset, class_names=names)
    print(report.table())
    rec = {"checkpoint": str(args.checkpoint), **report.record()}
    _write_records(Path(args.records) if args.records else None, [rec])
    print(json.dumps(rec))
    return 0


def cmd_ablate(args) -> int:
    base, raw = _read_run_config(args.config)
    if args.iterations:
        base = base.replace(iterations=args.iterations)
    size, k = _sizes(base)
    dspec = raw.get("data") or {}
    if not dspec.get("train") or not dspec.get("eval"):
        raise ConfigurationError("ablation config needs data.train and data.eval sections")
    runs = {r: ablation_config(base, r) for r in args.rows}
    for extra in args.runs or []:
        runs[Path(extra).stem] = _read_run_config(extra)[0]
    baseline = args.baseline or next(iter(runs))
    out = Path(args.out) if args.out else None
    scores: dict[str, dict[str, list[float]]] = {name: {d: [] for d in dspec["eval"]} for name in runs}
    for seed in args.seeds:
        train = load_dataset(_reseed(dspec["train"], seed), size, k)
        evals = {d: load_dataset(_reseed(s, seed), size, k) for d, s in dspec["eval"].items()}
        stats = load_style(_reseed(raw.get("style"), seed), size, k)
        for name, cfg in runs.items():
            state, _ = run_training(cfg.replace(seed=seed), train, stats)
            for d, ds in evals.items():
                scores[name][d].append(100 * evaluate(state, ds).miou)
            print(f"seed {seed} {name}: " + " ".join(f"{d}={v[-1]:.2f}" for d, v in scores[name].items()),
                  flush=True)
    medians = {name: summarize(s) for name, s in scores.items()}
    report = ablation_report(medians, baseline)
    print(report.table())
    if out:
        _write_records(out / "ablation.jsonl", report.records())
        _write_records(out / "ablation_runs.jsonl", [{"run": n, "scores": s} for n, s in scores.items()])
    return 0


def _reseed(spec: dict | None, seed: int) -> dict | None:
    """Offset any synthetic seed in ``spec`` by the run seed."""
    if not spec or "synthetic" not in spec:
        return spec
    s = dict(spec["synthetic"])
    s["seed"] = int(s.get("seed", 0)) + seed
    return {**spec, "synthetic": s}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dgseg", description="Domain-generalised segmentation toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="fit style statistics from an image corpus")
    p.add_argument("corpus")
    p.add_argument("-o", "--out", default="style_stats.json")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("preprocess", help="tile, remap and split a dataset")
    p.add_argument("src")
    p.add_argument("out")
    p.add_argument("--tile", type=int, required=True)
    p.add_argument("--stride", type=int)
    p.add_argument("--benchmark", help="benchmark id; src is then the benchmark root")
    p.add_argument("--manifest", help="JSON file of official train/test counts")
    p.add_argument("--map-source", help="label mapping for the source (or only) domain")
    p.add_argument("--map-target", help="label mapping for the target domain")
    p.add_argument("--domain")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train from a YAML config")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data-dir")
    p.add_argument("--domain", default="B", choices=["A", "B"])
    p.add_argument("--synthetic-seed", type=int, default=5000)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--class-names")
    p.add_argument("--records")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run ablation rows and emit a comparison table")
    p.add_argument("config")
    p.add_argument("--rows", nargs="*", default=["R1", "R2", "R3", "R4", "R8"], choices=sorted(ABLATION_ROWS))
    p.add_argument("--runs", nargs="*", help="extra run configs, named by file stem")
    p.add_argument("--seeds", nargs="*", type=int, default=[0])
    p.add_argument("--baseline")
    p.add_argument("--iterations", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DgsegError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
