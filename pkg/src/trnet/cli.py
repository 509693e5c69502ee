"""Command line interface.

Subcommands: analyze (cost tables for an arch file), plan (merge-order
search and bound checks), decompose (fit a ring to a .trt tensor),
verify (self-check suites), train (run a training config).

Exit codes: 0 success, 1 a verification or training failure, 2 usage
or schema errors (schema messages carry the JSON pointer of the
offending field).  TRNET_SEED sets the default seed.
"""

from __future__ import annotations

import argparse
import csv
import importlib.resources
import json
import os
import sys
from pathlib import Path

import numpy as np

from .archspec import ArchError, load_arch
from .costs import arch_cost
from .planner import best_plan, cost_plan, enumerate_plans, verify_bounds
from .ring import ALSOptions, decomp, save_ring
from .tensor import load_trt, save_trt
from .train import TrainConfig, load_mnist, synthetic_blobs, train
from .verify import SUITES, run_suite

__all__ = ["main"]


class UsageError(Exception):
    pass


def _default_seed() -> int:
    raw = os.environ.get("TRNET_SEED", "")
    if not raw:
        return 0
    try:
        return int(raw)
    except ValueError as exc:
        raise UsageError(f"TRNET_SEED must be an integer, got {raw!r}") from exc


def _resolve_arch_path(path: str) -> str:
    """Literal path first, then the arch files bundled with the package."""
    if os.path.exists(path):
        return path
    name = os.path.basename(path)
    bundled = importlib.resources.files("trnet").joinpath("specs", name)
    if bundled.is_file():
        return str(bundled)
    raise UsageError(f"arch file not found: {path}")


# --- analyze -----------------------------------------------------------------

def _format_table(rows, header) -> str:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()
             for r in [header] + rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def cmd_analyze(args) -> int:
    arch = load_arch(_resolve_arch_path(args.arch))
    rank = args.rank if args.rank is not None else arch.default_rank
    cost = arch_cost(arch, batch=args.batch)
    symbolic = args.symbolic or rank is None

    header = ["layer", "kind", "params", "params_tr", "macs", "macs_tr"]
    if not symbolic:
        header += ["compress", "speedup"]
    header += ["note"]
    rows = []
    for r in cost.rows:
        note = "; ".join(
            f"{key}: published {pub}, derived {got}"
            for key, pub, got in r.reference_mismatches)
        if symbolic:
            row = [r.name, r.kind, r.params_uncompressed, r.symbolic_params(),
                   r.macs_uncompressed, r.symbolic_macs()]
        else:
            sb = r.speedup_bound(rank)
            row = [r.name, r.kind, r.params_uncompressed, r.params_tr(rank),
                   r.macs_uncompressed, r.macs_tr(rank),
                   f"{r.compression(rank):.2f}x" if r.params_r2 else "-",
                   f"{sb:.2f}x" if sb is not None else "-"]
        rows.append(row + [note])
    if symbolic:
        total = ["total", "", cost.total_params_uncompressed,
                 f"{cost.total_params_r2} r^2",
                 cost.total_macs_uncompressed,
                 f"{cost.total_macs_r3} r^3 + {cost.total_macs_r2} r^2", ""]
    else:
        total = ["total", "", cost.total_params_uncompressed,
                 cost.total_params_tr(rank),
                 cost.total_macs_uncompressed, cost.total_macs_tr(rank),
                 f"{cost.total_compression(rank):.2f}x" if cost.total_params_r2 else "-",
                 f"{cost.total_macs_ratio(rank):.2f}x" if cost.total_macs_tr(rank) else "-",
                 ""]
    rows.append(total)

    print(f"arch: {arch.name}  (batch={args.batch}"
          + (f", rank={rank})" if not symbolic else ", symbolic)"))
    print(_format_table(rows, header))

    if args.csv:
        out = sys.stdout if args.csv == "-" else open(args.csv, "w", newline="")
        try:
            w = csv.writer(out)
            w.writerow(["layer", "kind", "repeat", "params_uncompressed", "params_r2",
                        "macs_uncompressed", "macs_r3", "macs_r2", "mismatches"])
            for r in cost.rows:
                w.writerow([r.name, r.kind, r.repeat, r.params_uncompressed,
                            r.params_r2, r.macs_uncompressed, r.macs_r3, r.macs_r2,
                            "; ".join(f"{k}={pub}|{got}"
                                      for k, pub, got in r.reference_mismatches)])
            w.writerow(["total", "", "", cost.total_params_uncompressed,
                        cost.total_params_r2, cost.total_macs_uncompressed,
                        cost.total_macs_r3, cost.total_macs_r2, ""])
        finally:
            if out is not sys.stdout:
                out.close()
    return 0


# --- plan --------------------------------------------------------------------

def _parse_dims(raw: str):
    try:
        dims = tuple(int(p) for p in raw.split(","))
    except ValueError as exc:
        raise UsageError(f"--dims wants comma-separated integers, got {raw!r}") from exc
    if len(dims) < 2 or any(s < 1 for s in dims):
        raise UsageError(f"--dims needs at least two sizes >= 1, got {raw!r}")
    return dims


def cmd_plan(args) -> int:
    dims = _parse_dims(args.dims)
    best = best_plan(dims, args.rank)
    report = {
        "dims": list(dims),
        "rank": args.rank,
        "plan_count": len(enumerate_plans(len(dims))),
        "best": {
            "tree": best.plan.notation(),
            "flops_2x": best.cost.flops_2x,
            "macs": best.cost.macs,
            "peak_memory_floats": best.cost.peak_memory_floats,
        },
    }
    if args.all:
        report["plans"] = [
            {"tree": p.notation(),
             "flops_2x": cost_plan(dims, args.rank, p).flops_2x,
             "peak_memory_floats": cost_plan(dims, args.rank, p).peak_memory_floats}
            for p in enumerate_plans(len(dims))]
    code = 0
    if args.check_bounds:
        if len(set(dims)) != 1:
            raise UsageError("--check-bounds needs uniform dims")
        rep = verify_bounds(len(dims), dims[0], args.rank)
        report["bounds"] = {
            "flops_window": [rep.flops_low, rep.flops_high],
            "memory_window": [rep.mem_low, rep.mem_high],
            "observed_flops": [rep.min_flops, rep.max_flops],
            "observed_memory": [rep.min_mem, rep.max_mem],
            "balanced_is_min": rep.balanced_is_min,
            "passed": rep.passed,
            "failures": [list(f) for f in rep.failures],
        }
        if not rep.passed:
            code = 1
    print(json.dumps(report, indent=2, sort_keys=True))
    return code


# --- decompose ---------------------------------------------------------------

def cmd_decompose(args) -> int:
    try:
        target = load_trt(args.input)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read {args.input}: {exc}") from exc
    opts = ALSOptions(max_sweeps=args.max_sweeps, tol=args.tol, seed=args.seed)
    try:
        result = decomp(target, args.rank, opts=opts)
    except np.linalg.LinAlgError as exc:
        print(f"decomposition failed: {exc}", file=sys.stderr)
        return 1
    save_ring(args.out, result.ring)
    print(json.dumps({
        "input": args.input,
        "modes": list(target.shape),
        "rank": args.rank,
        "sweeps": len(result.sweep_errors),
        "starts": result.attempts,
        "final_error": result.final_error,
        "out": args.out,
    }, indent=2, sort_keys=True))
    return 0


# --- verify ------------------------------------------------------------------

def cmd_verify(args) -> int:
    results = run_suite(args.suite, seed=args.seed)
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        extra = f"  [{r.detail}]" if r.detail else ""
        print(f"{status}  {r.name}: observed={r.observed:.3e} tol={r.tolerance:.3e}{extra}")
    if failed:
        out = Path(args.out or ".")
        out.mkdir(parents=True, exist_ok=True)
        for r in failed:
            stem = "".join(ch if ch.isalnum() else "-" for ch in r.name)
            for key, arr in r.witness.items():
                save_trt(out / f"witness-{stem}-{key}.trt", np.asarray(arr, dtype=np.float64))
        print(f"witness tensors written to {out}", file=sys.stderr)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


# --- train -------------------------------------------------------------------

def _make_datasets(config: TrainConfig, data_dir, seed: int):
    ds = dict(config.dataset or {})
    kind = ds.pop("kind", "mnist")
    if kind == "mnist":
        directory = ds.pop("dir", None) or data_dir
        if ds:
            raise UsageError(f"unknown mnist dataset keys: {sorted(ds)}")
        if not directory:
            raise UsageError("mnist training needs --data-dir (or dataset.dir)")
        return load_mnist(directory, "train"), load_mnist(directory, "test")
    if kind == "blobs":
        classes = int(ds.pop("classes", 4))
        per_class = int(ds.pop("per_class", 64))
        test_per_class = int(ds.pop("test_per_class", per_class))
        feature_shape = tuple(ds.pop("feature_shape", [784]))
        separation = float(ds.pop("separation", 6.0))
        if ds:
            raise UsageError(f"unknown blobs dataset keys: {sorted(ds)}")
        return (synthetic_blobs(classes, per_class, feature_shape, separation,
                                seed=seed, noise_stream=0, name="blobs-train"),
                synthetic_blobs(classes, test_per_class, feature_shape, separation,
                                seed=seed, noise_stream=1, name="blobs-test"))
    raise UsageError(f"unknown dataset kind {kind!r}")


def cmd_train(args) -> int:
    try:
        config = TrainConfig.from_json(args.config, seed_override=args.seed)
    except (OSError, ValueError) as exc:
        if isinstance(exc, ArchError):
            raise
        raise UsageError(f"bad config: {exc}") from exc
    train_ds, test_ds = _make_datasets(config, args.data_dir, config.seed)
    log = train(config, train_ds, test_ds, out_dir=args.out,
                timestamps=not args.no_timestamps)
    last = log.rows[-1]
    print(f"epochs={last['epoch']} train_error={last['train_error']:.4f} "
          f"test_error={last['test_error']:.4f} loss={last['loss']:.6f}"
          + ("  [aborted: non-finite loss]" if log.aborted else ""))
    if args.out:
        print(f"outputs written to {args.out}")
    return 1 if log.aborted else 0


# --- wiring ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trnet",
        description="Tensor-ring compression toolkit: cost analysis, merge "
                    "planning, decomposition, verification, training.")
    sub = parser.add_subparsers(dest="command", required=True)
    seed_default = None  # resolved lazily so TRNET_SEED is read at run time

    p = sub.add_parser("analyze", help="cost table for an arch file")
    p.add_argument("arch", help="arch JSON (literal path or bundled name)")
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--symbolic", action="store_true",
                   help="print coefficients of r^2/r^3 instead of numbers")
    p.add_argument("--csv", metavar="PATH", default=None,
                   help="also write machine-readable rows ('-' for stdout)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("plan", help="merge-order search over one core run")
    p.add_argument("--dims", required=True, help="comma-separated mode sizes")
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--all", action="store_true", help="list every plan")
    p.add_argument("--check-bounds", action="store_true",
                   help="exhaustively check the uniform-mode cost window")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("decompose", help="fit a ring to a .trt tensor")
    p.add_argument("--input", required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--out", required=True, help="output .trm ring file")
    p.add_argument("--max-sweeps", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--seed", type=int, default=seed_default)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("verify", help="run self-check suites")
    p.add_argument("--suite", default="all", choices=sorted(SUITES) + ["all"])
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--out", default=None,
                   help="directory for failure witness tensors (default: cwd)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train", help="train from a config JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--data-dir", default=None, help="IDX file directory for mnist")
    p.add_argument("--out", default=None, help="output directory for log/model")
    p.add_argument("--seed", type=int, default=seed_default,
                   help="override the config seed")
    p.add_argument("--no-timestamps", action="store_true",
                   help="zero the wall-time column for byte-identical logs")
    p.set_defaults(func=cmd_train)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if getattr(args, "seed", None) is None and args.command in ("decompose", "verify"):
            args.seed = _default_seed()
        return args.func(args)
    except ArchError as exc:
        where = f" (at {exc.pointer})" if exc.pointer and exc.pointer not in str(exc) else ""
        print(f"error: {exc}{where}", file=sys.stderr)
        return 2
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
