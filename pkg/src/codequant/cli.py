"""Command line front end.

Subcommands:
    generate    write the synthetic full-precision model container
    pipeline    quantize per the config, write container(s) and report(s)
    eval        like pipeline but report only, nothing else written
    bench-gemm  time the clustered kernels, print CSV
    inspect     print a container's config and tensor manifest

Exit codes: 0 success, 2 bad config, 3 numeric divergence, 4 I/O or format
error (see errors.py).
"""

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from . import kernels
from .container import (DTYPE_F32, DTYPE_INT8, DTYPE_NIBBLE, read_container,
                        save_model)
from .errors import ConfigError, DivergenceError, FormatError
from .lutgemm import BENCH_HEADER, bench_gemm
from .model import generate_synthetic_model
from .pipeline import (PipelineConfig, load_config, resolve_config,
                       run_pipeline)

_DTYPE_NAMES = {DTYPE_F32: "f32", DTYPE_NIBBLE: "nibble", DTYPE_INT8: "int8"}


def _load(args) -> PipelineConfig:
    if args.config is None:
        return resolve_config({})
    return load_config(args.config)


def _seed_path(path: str, seed: int, many: bool) -> str:
    """report.txt -> report.seed3.txt when a run covers several seeds."""
    if not many:
        return path
    stem, ext = os.path.splitext(path)
    return f"{stem}.seed{seed}{ext}"


def _out_dir(path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def _run_seeds(cfg: PipelineConfig, seeds, threads: int):
    """Each seed is an independent job; results come back in seed order
    regardless of how many workers ran them."""
    if threads <= 1 or len(seeds) == 1:
        return [run_pipeline(cfg, seed=s, threads=threads) for s in seeds]
    with ThreadPoolExecutor(max_workers=min(threads, len(seeds))) as pool:
        futures = [pool.submit(run_pipeline, cfg, seed=s, threads=1)
                   for s in seeds]
        return [f.result() for f in futures]


def cmd_generate(args) -> int:
    cfg = _load(args)
    mcfg = cfg.model
    if args.seed is not None:
        from dataclasses import replace
        mcfg = replace(mcfg, seed=args.seed)
    model = generate_synthetic_model(mcfg, outlier_channels=cfg.outlier_channels,
                                     outlier_scale=cfg.outlier_scale)
    path = args.out or cfg.model_path
    _out_dir(path)
    save_model(model, path)
    print(f"wrote {path}")
    return 0


def _pipeline_common(args, write_models: bool) -> int:
    cfg = _load(args)
    seeds = (args.seed,) if args.seed is not None else cfg.eval_seeds
    results = _run_seeds(cfg, seeds, args.threads)
    many = len(seeds) > 1
    report_base = args.out or cfg.report_path
    for seed, result in zip(seeds, results):
        rpath = _seed_path(report_base, seed, many)
        _out_dir(rpath)
        with open(rpath, "w", encoding="utf-8", newline="\n") as f:
            f.write(result.report.render())
        if write_models:
            mpath = _seed_path(cfg.model_path, seed, many)
            _out_dir(mpath)
            save_model(result.model, mpath)
        print(f"seed {seed}: final_hidden_rel_error = "
              f"{result.report.final_error!r} -> {rpath}")
    return 0


def cmd_pipeline(args) -> int:
    return _pipeline_common(args, write_models=True)


def cmd_eval(args) -> int:
    return _pipeline_common(args, write_models=False)


def cmd_bench_gemm(args) -> int:
    cfg = _load(args)
    if args.backends == "all":
        names = kernels.available_backends()
    elif args.backends == "active":
        names = [kernels.backend_name()]
    else:
        names = [n.strip() for n in args.backends.split(",") if n.strip()]
    lines = []
    for name in names:
        try:
            backend = kernels.get_backend(name)
        except (ValueError, RuntimeError) as exc:
            raise ConfigError(str(exc)) from None
        rows = bench_gemm(cfg.bench_shapes, repeats=cfg.bench_repeats,
                          threads=args.threads, seed=cfg.model.seed,
                          backend=backend)
        lines.append(f"# backend: {name}")
        lines.append(BENCH_HEADER)
        lines.extend(row.line() for row in rows)
    text = "\n".join(lines) + "\n"
    if args.out:
        _out_dir(args.out)
        with open(args.out, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_inspect(args) -> int:
    config, tensors = read_container(args.path)
    print(f"container = {args.path}")
    for key in sorted(config):
        print(f"config.{key} = {config[key]}")
    for name, (code, arr) in tensors.items():
        dtype = _DTYPE_NAMES.get(code, f"code{code}")
        shape = "x".join(str(d) for d in arr.shape)
        print(f"tensor.{name} = {dtype} {shape}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="codequant",
        description="Rotation + clustering post-training quantization "
                    "pipeline on synthetic MoE models.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", metavar="PATH",
                           help="flat key = value config file (defaults used if omitted)")
        p.add_argument("--seed", type=int, metavar="N",
                       help="override the config's seed(s) with one seed")
        p.add_argument("--out", metavar="PATH", help="output path override")
        p.add_argument("--threads", type=int, default=1, metavar="N",
                       help="worker threads; never changes results")

    p = sub.add_parser("generate", help="write the synthetic model container")
    common(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("pipeline", help="quantize, write containers and reports")
    common(p)
    p.set_defaults(fn=cmd_pipeline)

    p = sub.add_parser("eval", help="run the pipeline but write reports only")
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench-gemm", help="time the clustered GEMM kernels")
    common(p)
    p.add_argument("--backends", default="active",
                   help="'active', 'all', or comma-separated backend names")
    p.set_defaults(fn=cmd_bench_gemm)

    p = sub.add_parser("inspect", help="print a container's manifest")
    p.add_argument("path", help="container file")
    p.set_defaults(fn=cmd_inspect)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 1) is not None and getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return 3
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
