"""Command-line entry point: ``mgua run|fem|snn|sparse|gen-mesh|ablate``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from . import sparse as sp
from .errors import MguaError, StageError
from .fem import ElementType, load_mesh, read_stage1, write_stage1
from .precision import PrecisionConfig
from .snn import SystolicConfig, spikes_from_document, write_spike_json, write_spikes_packed
from .synthetic import generate_synthetic_mesh, write_mesh

log = logging.getLogger("mgua")


def _systolic(text: str) -> SystolicConfig:
    return SystolicConfig(*(int(t) for t in text.split(",")))


def _add_run_options(p: argparse.ArgumentParser, *, mesh: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int)
    if mesh:
        p.add_argument("--mesh", help="mesh JSON (overrides the config)")
    p.add_argument("--output-dir", "--out", dest="output_dir")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--fixed-precision", type=PrecisionConfig.parse, metavar="UP,UM,UQ,US")
    p.add_argument("--fixed-parallelism", type=_systolic, metavar="M,V,N,S")
    p.add_argument("--structured-only", action="store_true", default=None)
    p.add_argument("--compression", choices=("index", "bitmap"))
    p.add_argument("--fused", action="store_true", default=None, help="fused multiply-add rounding")
    p.add_argument("--memory-in", "--load-memory", dest="memory_in", help="warm-start memory snapshot")
    p.add_argument("--memory-out", "--dump-memory", dest="memory_out", help="write the final memory snapshot")
    p.add_argument("--report")
    p.add_argument("--report-format", choices=("json", "csv"))
    p.add_argument("--timing", action="store_true", default=None, help="add wall time to the report")


def _config(args) -> pl.RunConfig:
    cfg = pl.RunConfig.load(args.config) if args.config else pl.RunConfig()
    keys = ("seed", "mesh", "output_dir", "batch_size", "epsilon", "fixed_precision", "fixed_parallelism",
            "structured_only", "compression", "fused", "memory_in", "memory_out", "report",
            "report_format", "timing")
    cfg = pl.with_overrides(cfg, **{k: getattr(args, k, None) for k in keys})
    if getattr(args, "variant", None):
        cfg = pl.apply_ablation(cfg, args.variant)
    return cfg


def _write_stage_report(cfg: pl.RunConfig, name: str, summary: dict, memory, state) -> Path:
    out = Path(cfg.output_dir)
    if cfg.memory_out:
        pl.save_state(cfg.memory_out, memory, state)
    report = pl.assemble_report(cfg, {name: summary}, {
        "memory_hash_final": pl._json_hash(pl.state_snapshot(memory, state)),
    })
    path = Path(cfg.report) if cfg.report else out / f"report_{name}.{cfg.report_format}"
    path.write_text(pl.render_report(report, cfg.report_format))
    return path


def cmd_run(args) -> int:
    cfg = _config(args)
    result = pl.run_pipeline(cfg)
    t = result.report["totals"]
    print(f"report: {result.paths['report']}")
    print(f"output: {result.paths['output']} shape={list(result.output.shape)}")
    print(f"cost units (modeled): {t['cost_units']:.6g}  macs: {t['macs']}  cycles: {t['cycles']}")
    warnings = result.report["stages"]["sparse"]["low_density_warnings"]
    if warnings:
        log.warning("%d stage-3 tensors fell below 10%% density", warnings)
    return 0


def cmd_fem(args) -> int:
    cfg = _config(args)
    if not cfg.mesh:
        raise SystemExit("fem: --mesh is required")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    memory, state = pl.load_state(cfg)
    try:
        res = pl.run_fem_stage(load_mesh(cfg.mesh), memory, fixed_precision=cfg.fixed_precision,
                               batch_size=cfg.batch_size, fused=cfg.fused, cost_table=cfg.cost_table)
    except MguaError as exc:
        raise StageError("fem", exc) from exc
    write_stage1(out / "stage1", res.matrices, res.per_element)
    print(_write_stage_report(cfg, "fem", res.summary, memory, state))
    return 0


def cmd_snn(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    memory, state = pl.load_state(cfg)
    try:
        matrices, _ = read_stage1(args.input)
        doc, summary = pl.run_snn_from_matrices(matrices, cfg, memory)
    except MguaError as exc:
        raise StageError("snn", exc) from exc
    if args.spike_format == "packed":
        q = spikes_from_document(doc)
        meta = doc["metadata"]
        write_spikes_packed(out / "spikes.mgsp", q, SystolicConfig(meta["M"], meta["V"], meta["N"], meta["S"]))
    else:
        write_spike_json(out / "spikes.json", doc)
    print(_write_stage_report(cfg, "snn", summary, memory, state))
    return 0


def cmd_sparse(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    memory, state = pl.load_state(cfg)
    try:
        res = pl.run_sparse_from_spikes(pl.load_spikes(args.input), cfg, memory, state)
    except MguaError as exc:
        raise StageError("sparse", exc) from exc
    sp.write_compressed(out / "output.mgua", res.compressed, fmt=cfg.compression)
    pl.write_output_tensor(out / "output", res.outputs[None])
    if res.summary["low_density_warnings"]:
        log.warning("%d tensors fell below 10%% density", res.summary["low_density_warnings"])
    print(_write_stage_report(cfg, "sparse", res.summary, memory, state))
    return 0


def cmd_gen_mesh(args) -> int:
    doc, kappas = generate_synthetic_mesh(args.n, args.kappa_min, args.kappa_max, args.type, args.seed)
    if args.out:
        write_mesh(args.out, doc)
        print(f"{args.out}: {args.n} {args.type} elements, kappa in [{kappas.min():.4g}, {kappas.max():.4g}]")
    else:
        sys.stdout.write(json.dumps(doc, sort_keys=True) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgua", description="Memory-guided unified accelerator model")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="full three-stage pipeline")
    _add_run_options(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="full pipeline with an ablation preset")
    p.add_argument("--variant", required=True, choices=sorted(pl.ABLATIONS))
    _add_run_options(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("fem", help="stage 1 only: mesh -> element matrices")
    _add_run_options(p)
    p.set_defaults(func=cmd_fem)

    p = sub.add_parser("snn", help="stage 2 only: stage-1 sidecar -> spike JSON")
    p.add_argument("--input", required=True, type=Path, help="stage1.json sidecar")
    p.add_argument("--spike-format", choices=("json", "packed"), default="json")
    _add_run_options(p, mesh=False)
    p.set_defaults(func=cmd_snn)

    p = sub.add_parser("sparse", help="stage 3 only: spike JSON -> compressed output")
    p.add_argument("--input", required=True, type=Path, help="spike JSON document or packed spike file")
    _add_run_options(p, mesh=False)
    p.set_defaults(func=cmd_sparse)

    p = sub.add_parser("gen-mesh", help="synthetic mesh with controlled condition numbers")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--kappa-min", type=float, required=True)
    p.add_argument("--kappa-max", type=float, required=True)
    p.add_argument("--type", choices=[t.value for t in ElementType], default="tet4")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="write here instead of stdout")
    p.set_defaults(func=cmd_gen_mesh)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MguaError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
