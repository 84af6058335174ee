"""Command-line entry point.

One subcommand per capability: mask generation, gradient verification,
training, ablation grids, kernel benchmarks, checkpoint evaluation.
Structural settings come from JSON config files; flags cover paths,
seeds, and iteration counts only.

Exit codes: 0 success, 2 usage error, 3 data or config error,
4 numerical failure (training divergence, gradient check above
tolerance). PARGO_SEED sets the default seed; an explicit --seed wins.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .errors import PargoError, TrainingDivergedError
from .gradcheck import projector_gradcheck
from .kernels import BenchConfig, bench
from .masks import CascadeSpec, PartitionSpec, build_cpp_mask, build_pg_mask, export_mask
from .pipeline import TrainConfig, ablate, ablation_csv, gen_dataset, load_pipeline
from .pipeline import evaluate as evaluate_pipeline
from .pipeline import mean_accuracy_by_variant, metrics_jsonl, save_pipeline, train_run
from .pipeline import StubEncoder, split_dataset
from .projector import ParGoConfig

GRADCHECK_TOL = 1e-5


def _default_seed() -> int | None:
    raw = os.environ.get("PARGO_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise PargoError(f"PARGO_SEED must be an integer, got {raw!r}") from None


def _resolve_seed(args) -> int | None:
    if args.seed is not None:
        return args.seed
    return _default_seed()


def _load_json(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as e:
        raise PargoError(f"{path}: not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise PargoError(f"{path}: expected a JSON object")
    return data


def _write_json(path: str | Path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_gen_masks(args) -> int:
    wants_pg = args.nv is not None
    wants_cpp = args.layer is not None
    if not wants_pg and not wants_cpp:
        raise PargoError("nothing to do: pass --nv for the partition mask and/or --layer for a cascade mask")
    if wants_cpp and args.layers is None:
        raise PargoError("--layer requires --layers (total layer count)")
    fmt = args.format
    out = args.out or f"mask.{fmt}"
    written = []
    jobs = []
    if wants_pg:
        mask = build_pg_mask(PartitionSpec(args.nv, getattr(args, "np"), args.ng))
        jobs.append(("pg", mask))
    if wants_cpp:
        mask = build_cpp_mask(CascadeSpec(getattr(args, "np"), args.layers), args.layer)
        jobs.append((f"cpp_l{args.layer}", mask))
    for tag, mask in jobs:
        path = Path(out) if len(jobs) == 1 else Path(f"{out}.{tag}.{fmt}")
        path.write_bytes(export_mask(mask, fmt))
        written.append(str(path))
        print(f"wrote {mask.rows}x{mask.cols} mask to {path}")
    meta = {
        "command": "gen-masks",
        "config": {"nv": args.nv, "np": getattr(args, "np"), "ng": args.ng, "layers": args.layers, "layer": args.layer, "format": fmt},
        "files": written,
    }
    _write_json(f"{out}.meta.json", meta)
    return 0


def cmd_gradcheck(args) -> int:
    config = ParGoConfig.from_dict(_load_json(args.config))
    seed = _resolve_seed(args) or 0
    report = projector_gradcheck(config, seed=seed, eps=args.eps, max_entries_per_param=args.max_entries)
    print(f"max_rel_error {report.max_rel_err:.6e} (worst {report.worst_param}{list(report.worst_index)}, {report.checked} coords)")
    if args.out:
        _write_json(
            args.out,
            {
                "command": "gradcheck",
                "config": config.to_dict(),
                "seed": seed,
                "eps": args.eps,
                "max_rel_error": report.max_rel_err,
                "worst_param": report.worst_param,
                "checked": report.checked,
            },
        )
    return 0 if report.max_rel_err < GRADCHECK_TOL else 4


def _metrics_with_header(tc: TrainConfig, result) -> str:
    header = json.dumps(
        {"config": tc.to_dict(), "run_id": result.run_id, "seed": result.seed}, sort_keys=True
    )
    return header + "\n" + metrics_jsonl(result.records)


def cmd_train(args) -> int:
    tc = TrainConfig.from_dict(_load_json(args.config))
    seed = _resolve_seed(args)
    seeds = (seed,) if seed is not None else tc.seeds
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {"command": "train", "config": tc.to_dict(), "runs": []}
    for s in seeds:
        result = train_run(tc, s)
        metrics_path = out_dir / f"metrics_s{s}.jsonl"
        ckpt_path = out_dir / f"checkpoint_s{s}.pargo"
        metrics_path.write_text(_metrics_with_header(tc, result), encoding="utf-8")
        save_pipeline(ckpt_path, tc, s, result.projector, result.readout)
        summary["runs"].append(
            {
                "seed": s,
                "run_id": result.run_id,
                "final_val_acc": result.final_val_acc,
                "metrics": metrics_path.name,
                "checkpoint": ckpt_path.name,
            }
        )
        print(f"seed {s}: val_acc {result.final_val_acc:.4f} ({result.run_id})")
    _write_json(out_dir / "train_meta.json", summary)
    return 0


def cmd_ablate(args) -> int:
    tc = TrainConfig.from_dict(_load_json(args.config))
    seed = _resolve_seed(args)
    if seed is not None:
        tc = dataclasses.replace(tc, seeds=(seed,))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = ablate(tc)
    (out_dir / "ablation.csv").write_text(ablation_csv(rows), encoding="utf-8")
    means = mean_accuracy_by_variant(rows)
    _write_json(
        out_dir / "ablation_meta.json",
        {"command": "ablate", "config": tc.to_dict(), "mean_val_acc": means},
    )
    for variant, acc in means.items():
        print(f"{variant}: mean val_acc {acc:.4f}")
    return 0


def cmd_bench(args) -> int:
    data = _load_json(args.config) if args.config else {}
    known = {f.name for f in dataclasses.fields(BenchConfig)}
    extra = set(data) - known
    if extra:
        raise PargoError(f"unknown bench config keys {sorted(extra)}")
    seed = _resolve_seed(args)
    if seed is not None:
        data["seed"] = seed
    config = BenchConfig(**data)
    doc = bench(config, iters=args.iters, warmup=args.warmup)
    for rep in doc["reports"]:
        print(
            f"{rep['variant']}: {rep['ns_per_call_median'] / 1e6:.3f} ms/call, "
            f"scoreav {rep['flops_scoreav']} flops, projection {rep['flops_projection']} flops"
        )
    print(f"max_abs_diff {doc['max_abs_diff']:.3e}")
    if args.out:
        _write_json(args.out, doc)
    return 0


def cmd_eval(args) -> int:
    tc, seed, proj, readout = load_pipeline(args.ckpt)
    encoder = StubEncoder(tc.g, tc.n_symbols, tc.projector.c, seed=tc.data_seed, dtype=tc.projector.dtype)
    if args.data:
        override = _load_json(args.data)
        extra = set(override) - {"seed", "count"}
        if extra:
            raise PargoError(f"eval data overrides support only seed and count, got {sorted(extra)}")
        data_seed = int(override.get("seed", tc.data_seed))
        count = int(override.get("count", tc.count))
        samples = gen_dataset(data_seed, count, tc.g, tc.n_symbols)
        split = "all"
    else:
        samples = split_dataset(gen_dataset(tc.data_seed, tc.count, tc.g, tc.n_symbols))[1]
        split = "val"
    acc = evaluate_pipeline(proj, readout, samples, tc.task, encoder)
    doc = {
        "command": "eval",
        "task": tc.task,
        "split": split,
        "count": len(samples),
        "accuracy": acc,
        "checkpoint_seed": seed,
        "config": tc.to_dict(),
    }
    print(f"{tc.task} accuracy {acc:.4f} on {len(samples)} samples")
    if args.out:
        _write_json(args.out, doc)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pargo", description="Partial-global token projector toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="seed override (default: PARGO_SEED or command default)")

    p = sub.add_parser("gen-masks", help="export attention masks")
    common(p)
    p.add_argument("--nv", type=int, default=None, help="visual feature count (writes the partition mask)")
    p.add_argument("--np", type=int, default=0, dest="np", help="partial token count")
    p.add_argument("--ng", type=int, default=0, help="global token count")
    p.add_argument("--layers", type=int, default=None, help="total layer count for the cascade schedule")
    p.add_argument("--layer", type=int, default=None, help="1-based layer whose cascade mask to write")
    p.add_argument("--format", choices=("csv", "pgm"), default="csv")
    p.add_argument("--out", default=None, help="output path (prefix when writing both masks)")
    p.set_defaults(func=cmd_gen_masks)

    p = sub.add_parser("gradcheck", help="verify projector gradients by central differences")
    common(p)
    p.add_argument("--config", required=True, help="projector config JSON (must use float64)")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--max-entries", type=int, default=None, help="probe at most this many coordinates per tensor")
    p.add_argument("--out", default=None, help="write the report JSON here")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train projector plus readout on a grid task")
    common(p)
    p.add_argument("--config", required=True, help="train config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="token-budget ablation grid")
    common(p)
    p.add_argument("--config", required=True, help="base train config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="time dense vs block attention kernels")
    common(p)
    p.add_argument("--config", default=None, help="bench config JSON (optional)")
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--out", default=None, help="write the report JSON here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="evaluate a saved pipeline checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True, help="pipeline checkpoint path")
    p.add_argument("--data", default=None, help="JSON overriding dataset seed/count")
    p.add_argument("--out", default=None, help="write the result JSON here")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingDivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except PargoError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (OSError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
