"""End-to-end run: mesh -> element matrices -> spiking layers -> sparse output.

Each stage can also be run on its own from the persisted artifact of the
previous one; the per-stage random streams are derived from (seed, stage)
so standalone and fused runs agree.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import sparse as sp
from .errors import ContractError, MguaError, StageError
from .fem import (
    KAPPA_SOFT_LIMIT,
    ElementType,
    Mesh,
    _assemble_batch,
    _geometry_batch,
    assemble_batch,
    condition_number,
    element_l2_error,
    load_mesh,
    read_stage1,
    tabulate_basis,
    write_stage1,
    FP64_CONFIG,
)
from .memory import AdaptiveMemory
from .precision import PrecisionConfig, PrecisionLevel, round_to
from .snn import (
    SPIKE_MAGIC,
    LayerSpec,
    QuantizedTensor,
    SystolicConfig,
    pack_spikes,
    random_weights,
    run_snn_stage,
    spikes_from_document,
    unpack_spikes,
    write_spike_json,
)

COST_TABLE = {"fp64": 4.0, "fp32": 1.0, "bf16": 0.3, "fp16": 0.3, "int8": 0.2, "spike": 0.1}
COST_NOTE = "modeled, not measured: relative cost units per operation; only ratios between runs mean anything"
STAGE_FEM, STAGE_SNN, STAGE_SPARSE = 1, 2, 3

ABLATIONS = {
    "no-adaptive-precision": {"fixed_precision": "fp32,fp32,bf16,fp16"},
    "no-adaptive-parallelism": {"fixed_parallelism": [4, 4, 4, 4]},
    "structured-only": {"structured_only": True},
    "bitmap": {"compression": "bitmap"},
}


def cost_model(counters: dict, table: dict | None = None) -> float:
    """Sum of op count times unit cost over the counter categories."""
    table = COST_TABLE if table is None else table
    unknown = set(counters) - set(table)
    if unknown:
        raise ContractError(f"no unit cost for {sorted(unknown)}")
    return float(sum(n * table[k] for k, n in sorted(counters.items())))


def stage_rng(seed: int, stage: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, stage, stream])


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("MGUA_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class LayerConfig:
    layer_type: str = "conv"
    out_channels: int | None = None  # None keeps the input channel count
    weight_bits: int = 4
    weights: str | None = None  # path to an integer .npy (M, V) array


@dataclass
class RunConfig:
    seed: int = 0
    batch_size: int = 32
    mesh: str | None = None
    output_dir: str = "mgua_out"
    fixed_precision: PrecisionConfig | None = None
    fixed_parallelism: SystolicConfig | None = None
    structured_only: bool = False
    compression: str = "index"
    fused: bool = False
    epsilon: float = 0.1
    layers: list[LayerConfig] = field(
        default_factory=lambda: [LayerConfig("conv"), LayerConfig("pointwise")]
    )
    memory_in: str | None = None
    memory_out: str | None = None
    cost_table: dict[str, float] = field(default_factory=lambda: dict(COST_TABLE))
    report: str | None = None
    report_format: str = "json"
    timing: bool = False

    def __post_init__(self):
        if not 0 <= self.seed < 2 ** 64:
            raise ContractError("seed must be a 64-bit unsigned integer")
        if self.batch_size < 1:
            raise ContractError("batch_size must be positive")
        if self.compression not in ("index", "bitmap"):
            raise ContractError(f"compression must be index or bitmap, not {self.compression!r}")
        if self.report_format not in ("json", "csv"):
            raise ContractError("report_format must be json or csv")
        if not 0 <= self.epsilon <= 1:
            raise ContractError("epsilon must lie in [0, 1]")
        if not self.layers:
            raise ContractError("need at least one layer")

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        obj = dict(obj)
        known = set(cls.__dataclass_fields__)
        extra = set(obj) - known
        if extra:
            raise ContractError(f"unknown config keys {sorted(extra)}")
        fp = obj.get("fixed_precision")
        if isinstance(fp, str):
            obj["fixed_precision"] = PrecisionConfig.parse(fp)
        elif isinstance(fp, (list, tuple)):
            obj["fixed_precision"] = PrecisionConfig(*(PrecisionLevel.parse(t) for t in fp))
        par = obj.get("fixed_parallelism")
        if par is not None:
            if isinstance(par, str):
                par = [int(t) for t in par.split(",")]
            obj["fixed_parallelism"] = SystolicConfig(*par)
        if "layers" in obj:
            obj["layers"] = [LayerConfig(**l) for l in obj["layers"]]
        if "cost_table" in obj:
            obj["cost_table"] = {**COST_TABLE, **obj["cost_table"]}
        return cls(**obj)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        base = Path(path).parent
        cfg = cls.from_json(json.loads(Path(path).read_text()))
        # relative paths in a config file are relative to the file
        for name in ("mesh", "memory_in", "memory_out", "output_dir", "report"):
            val = getattr(cfg, name)
            if val is not None and not Path(val).is_absolute():
                setattr(cfg, name, str(base / val))
        for layer in cfg.layers:
            if layer.weights and not Path(layer.weights).is_absolute():
                layer.weights = str(base / layer.weights)
        return cfg

    def to_json(self) -> dict:
        d = asdict(self)
        d["fixed_precision"] = self.fixed_precision.to_token() if self.fixed_precision else None
        d["fixed_parallelism"] = list(self.fixed_parallelism.tile) if self.fixed_parallelism else None
        return d

    def semantic_hash(self) -> str:
        """Hash over everything that can change results (paths and report options excluded)."""
        d = self.to_json()
        for k in ("mesh", "output_dir", "memory_in", "memory_out", "report", "report_format", "timing"):
            d.pop(k)
        for layer in d["layers"]:
            if layer["weights"]:
                layer["weights"] = _file_hash(layer["weights"])
        return _json_hash(d)


def apply_ablation(config: RunConfig, variant: str) -> RunConfig:
    try:
        preset = ABLATIONS[variant]
    except KeyError:
        raise ContractError(f"unknown ablation {variant!r}; choose from {sorted(ABLATIONS)}") from None
    merged = {**config.to_json(), **preset}
    merged["layers"] = [asdict(l) for l in config.layers]
    return RunConfig.from_json(merged)


def _json_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _summary(errors: Sequence[float], counters: Counter, table: dict, **extra) -> dict:
    errs = np.asarray(errors, dtype=np.float64)
    return {
        "l2_error_mean": float(errs.mean()) if errs.size else 0.0,
        "l2_error_max": float(errs.max()) if errs.size else 0.0,
        "counters": dict(sorted(counters.items())),
        "cost_units": cost_model(counters, table),
        **extra,
    }


# ---------------------------------------------------------------------------
# Stage 1


@dataclass
class FemStageResult:
    matrices: np.ndarray  # (n_e, m, m), zero-padded for mixed element types
    per_element: list[dict]
    summary: dict


def _assemble_group(coords, etype, config, coeffs, symmetric, fused):
    """Emulated and fp64 matrices for one group, plus a per-element geometry-failure mask.

    A failure is a Jacobian determinant that is nonpositive or non-finite when
    computed at u_m, or a non-finite emulated matrix. Failed elements are
    emitted as zero matrices, so their scored error is exactly 1.
    """
    B = tabulate_basis(etype, config.u_p)
    C, det, gops = _geometry_batch(coords, etype, config.u_m, coeffs, fused, strict=False)
    with np.errstate(invalid="ignore", over="ignore"):
        A, macs = _assemble_batch(B, C, config.u_q, config.u_s, symmetric, fused)
        failed = ~np.all(det > 0, axis=1) | ~np.all(np.isfinite(A), axis=(1, 2))
    A = np.where(failed[:, None, None], 0.0, A)
    if config == FP64_CONFIG and not fused:
        ref = A
    else:
        ref, _, _ = assemble_batch(coords, etype, FP64_CONFIG, coeffs, symmetric=symmetric)
    return A, ref, macs, gops, failed


def run_fem_stage(mesh: Mesh, memory: AdaptiveMemory, *, fixed_precision: PrecisionConfig | None = None,
                  batch_size: int = 32, fused: bool = False, symmetric: bool = True,
                  cost_table: dict | None = None, threads: int | None = None) -> FemStageResult:
    """Assemble every element under a memory-selected (or fixed) precision configuration.

    Outcomes are recorded per element; the precision policy adapts once per
    batch of ``batch_size`` elements.
    """
    table = COST_TABLE if cost_table is None else cost_table
    threads = worker_count() if threads is None else threads
    n_e = mesh.n_elements
    m = max(e.type.n_nodes for e in mesh.elements)
    matrices = np.zeros((n_e, m, m))
    per_element: list[dict] = [{} for _ in range(n_e)]
    errors = np.zeros(n_e)
    counters: Counter = Counter()
    configs: Counter = Counter()
    changes = []
    geometry_failures = 0
    kappas = [condition_number(mesh.element_coords(e), e.type, e.id) for e in mesh.elements]

    with ThreadPoolExecutor(max_workers=threads) as pool:
        for start in range(0, n_e, batch_size):
            batch = mesh.elements[start:start + batch_size]
            groups: dict[tuple[ElementType, PrecisionConfig], list] = {}
            for el in batch:
                cfg = fixed_precision or memory.memory_lookup(kappas[el.id], el.type)
                groups.setdefault((el.type, cfg), []).append(el)
            jobs = [
                (np.stack([mesh.element_coords(e) for e in els]), etype, cfg,
                 np.array([e.coeff for e in els]), symmetric, fused)
                for (etype, cfg), els in groups.items()
            ]
            outcomes = list(pool.map(lambda job: _assemble_group(*job), jobs))
            for ((etype, cfg), els), (A, ref, macs, gops, failed) in zip(groups.items(), outcomes):
                nb = etype.n_nodes
                for i, el in enumerate(els):
                    err = element_l2_error(A[i], ref[i])
                    matrices[el.id, :nb, :nb] = A[i]
                    errors[el.id] = err
                    per_element[el.id] = {
                        "id": el.id, "type": etype.value, "kappa": kappas[el.id],
                        "config": cfg.to_token(), "l2_error": err, "macs": macs,
                        "geometry_ops": gops, "geometry_failure": bool(failed[i]),
                    }
                    geometry_failures += bool(failed[i])
                counters[cfg.u_q.value] += macs * len(els)
                counters[cfg.u_m.value] += gops * len(els)
                configs[cfg.to_token()] += len(els)
            if fixed_precision is None:
                # record in element order so the policy state does not depend on grouping
                for el in batch:
                    rec = per_element[el.id]
                    cfg = PrecisionConfig.parse(rec["config"])
                    unit = rec["macs"] * table[cfg.u_q.value] + rec["geometry_ops"] * table[cfg.u_m.value]
                    memory.record_outcome(memory.precision_key(rec["kappa"], el.type), rec["l2_error"],
                                          unit, payload=cfg)
                changes.extend(memory.adapt_policy())

    summary = _summary(
        errors, counters, table,
        macs=int(sum(counters.values())),
        cycles=0,
        utilization=None,
        saturation_events=sum(1 for c in changes if c.saturated),
        flagged_elements=int(sum(k >= KAPPA_SOFT_LIMIT for k in kappas)),
        geometry_failures=geometry_failures,
        selected_configs=dict(sorted(configs.items())),
        policy_changes=len(changes),
    )
    return FemStageResult(matrices, per_element, summary)


# ---------------------------------------------------------------------------
# Stage 2


def stage2_input(matrices: np.ndarray) -> np.ndarray:
    """(n_e, m, m) element matrices -> (V=m, N=m, S=n_e) layer input."""
    return np.ascontiguousarray(np.asarray(matrices, dtype=np.float64).transpose(1, 2, 0))


def build_layers(layer_configs: Sequence[LayerConfig], in_channels: int, seed: int) -> list[LayerSpec]:
    rng = stage_rng(seed, STAGE_SNN, 1)
    layers = []
    for lc in layer_configs:
        if lc.weights:
            w = np.load(lc.weights)
            if w.ndim != 2 or w.shape[1] != in_channels or not np.issubdtype(w.dtype, np.integer):
                raise ContractError(f"{lc.weights}: need integer weights of shape (M, {in_channels})")
        else:
            w = random_weights(rng, lc.out_channels or in_channels, in_channels, lc.weight_bits)
        layers.append(LayerSpec(lc.layer_type, w, lc.weight_bits))
        in_channels = w.shape[0]
    return layers


def run_snn_from_matrices(matrices, config: RunConfig, memory: AdaptiveMemory):
    x = stage2_input(matrices)
    layers = build_layers(config.layers, x.shape[0], config.seed)
    doc, results = run_snn_stage(
        x, layers, memory, stage_rng(config.seed, STAGE_SNN),
        fixed_parallelism=config.fixed_parallelism, epsilon=config.epsilon,
        batch_size=config.batch_size,
    )
    counters: Counter = Counter()
    for r in results:
        counters["spike"] += r.trace.macs
        counters["int8"] += r.shift_adds
    cycles = sum(r.trace.cycles for r in results)
    pe_cycles = sum(r.trace.pe_count * r.trace.cycles for r in results)
    active = sum(r.trace.active_pe_cycles for r in results)
    summary = _summary(
        [r.error for r in results], counters, config.cost_table,
        macs=int(sum(r.trace.macs for r in results)),
        cycles=int(cycles),
        utilization=active / pe_cycles if pe_cycles else 0.0,
        saturation_events=sum(r.saturated for r in results),
        selected_configs=[r.to_json() for r in results],
    )
    return doc, summary


# ---------------------------------------------------------------------------
# Stage 3


@dataclass
class SparseStageResult:
    compressed: list[sp.CompressedTensor]
    outputs: np.ndarray  # (n_tensors, rows, P)
    per_tensor: list[dict]
    summary: dict


def run_sparse_stage(tensors: Sequence[np.ndarray], b_matrix: np.ndarray, memory: AdaptiveMemory,
                     state: sp.CurriculumState, rng: np.random.Generator, *, epsilon: float = 0.1,
                     batch_size: int = 32, cost_table: dict | None = None) -> SparseStageResult:
    """Select a pattern per tensor, prune, compress and multiply by ``b_matrix``.

    Curriculum and memory updates are applied at batch boundaries.
    """
    table = COST_TABLE if cost_table is None else cost_table
    b_matrix = np.asarray(b_matrix, dtype=np.float64)
    compressed, outputs, per_tensor = [], [], []
    counters: Counter = Counter()
    patterns: Counter = Counter()
    pending = []
    cycles = macs = 0
    tiles_pe_cycles = 0
    low_density = 0

    def flush():
        for pattern, chars, retention, cost in pending:
            sp.curriculum_update(state, pattern, retention)
            memory.sparsity_store(pattern, chars, retention, cost)
        pending.clear()

    for i, t in enumerate(tensors):
        t = round_to(np.asarray(t, dtype=np.float64), PrecisionLevel.FP32)
        chars = sp.analyze_sparsity(t)
        low_density += chars.low_density
        choice = sp.curriculum_select(chars, state, memory, rng, epsilon)
        pattern = sp.materialize(choice, t, chars)
        pruned = sp.prune_to_pattern(t, pattern)
        c = sp.compress(pruned, pattern)
        out, trace = sp.sparse_mac(c, b_matrix)
        dense = t.reshape(c.rows, c.width) @ b_matrix
        retention = sp.accuracy_retention(out, dense)
        dense_macs = c.rows * c.width * b_matrix.shape[1]
        cost = trace.macs / dense_macs if dense_macs else 0.0
        compressed.append(c)
        outputs.append(out)
        per_tensor.append({
            "index": i, "pattern": pattern.kind.value, "stage": state.stage,
            "density": chars.density, "retention": retention, "macs": trace.macs,
            "cycles": trace.cycles, "low_density": chars.low_density,
        })
        counters["fp32"] += trace.macs
        patterns[pattern.kind.value] += 1
        cycles += trace.cycles
        macs += trace.macs
        tiles_pe_cycles += sp.ARRAY_DIM * sp.ARRAY_DIM * trace.cycles
        pending.append((pattern, chars, retention, cost))
        if (i + 1) % batch_size == 0:
            flush()
    flush()

    retentions = [p["retention"] for p in per_tensor]
    summary = _summary(
        [1.0 - r for r in retentions], counters, table,
        macs=int(macs),
        cycles=int(cycles),
        utilization=macs / tiles_pe_cycles if tiles_pe_cycles else 0.0,
        saturation_events=0,
        retention_mean=float(np.mean(retentions)) if retentions else 0.0,
        low_density_warnings=int(low_density),
        selected_configs=dict(sorted(patterns.items())),
        curriculum_stage=state.stage,
    )
    return SparseStageResult(compressed, np.array(outputs), per_tensor, summary)


def load_spikes(path: str | Path) -> QuantizedTensor:
    """Read either spike artifact (JSON document or packed binary)."""
    data = Path(path).read_bytes()
    if data[:4] == SPIKE_MAGIC:
        return unpack_spikes(data)[0]
    return spikes_from_document(json.loads(data))


def stage3_tensors(spikes: dict | QuantizedTensor) -> np.ndarray:
    """Dequantized (M_L, m, n_e) spike tensor -> n_e tensors of shape (M_L, m)."""
    q = spikes if isinstance(spikes, QuantizedTensor) else spikes_from_document(spikes)
    return np.ascontiguousarray(q.dequantize().transpose(2, 0, 1))


def stage3_operand(m: int, seed: int) -> np.ndarray:
    return stage_rng(seed, STAGE_SPARSE, 1).normal(size=(m, m))


def run_sparse_from_spikes(spike_doc: dict | QuantizedTensor, config: RunConfig, memory: AdaptiveMemory,
                           state: sp.CurriculumState | None = None):
    tensors = stage3_tensors(spike_doc)
    if state is None:
        state = new_curriculum(config)
    b_matrix = stage3_operand(tensors.shape[2], config.seed)
    return run_sparse_stage(
        list(tensors), b_matrix, memory, state, stage_rng(config.seed, STAGE_SPARSE),
        epsilon=config.epsilon, batch_size=config.batch_size, cost_table=config.cost_table,
    )


def new_curriculum(config: RunConfig) -> sp.CurriculumState:
    return sp.CurriculumState(max_stage=1 if config.structured_only else 2)


# ---------------------------------------------------------------------------
# Persistence helpers


def load_state(config: RunConfig) -> tuple[AdaptiveMemory, sp.CurriculumState]:
    state = new_curriculum(config)
    if not config.memory_in:
        return AdaptiveMemory(), state
    obj = json.loads(Path(config.memory_in).read_text())
    memory = AdaptiveMemory.from_snapshot(obj["memory"])
    if obj.get("curriculum"):
        saved = sp.CurriculumState.from_json(obj["curriculum"])
        state.stage = min(saved.stage, state.max_stage)
        state.window.extend(saved.window)
    return memory, state


def state_snapshot(memory: AdaptiveMemory, state: sp.CurriculumState | None) -> dict:
    return {"memory": memory.snapshot(), "curriculum": state.to_json() if state else None}


def save_state(path: str | Path, memory: AdaptiveMemory, state: sp.CurriculumState | None) -> None:
    Path(path).write_text(json.dumps(state_snapshot(memory, state), sort_keys=True) + "\n")


def write_output_tensor(prefix: str | Path, tensor: np.ndarray) -> None:
    """Little-endian fp64 binary plus a JSON sidecar describing its shape."""
    prefix = Path(prefix)
    tensor = np.asarray(tensor, dtype="<f8")
    prefix.with_suffix(".bin").write_bytes(tensor.tobytes())
    side = {"shape": list(tensor.shape), "dtype": "float64", "data": prefix.with_suffix(".bin").name,
            "layout": "B x C_o x H_o x W_o"}
    prefix.with_suffix(".json").write_text(json.dumps(side, sort_keys=True) + "\n")


def read_output_tensor(json_path: str | Path) -> np.ndarray:
    json_path = Path(json_path)
    side = json.loads(json_path.read_text())
    data = np.frombuffer((json_path.parent / side["data"]).read_bytes(), dtype="<f8")
    return data.reshape(side["shape"]).astype(np.float64)


# ---------------------------------------------------------------------------
# Report


def assemble_report(config: RunConfig, stages: dict[str, dict], provenance: dict,
                    wall_time: float | None = None) -> dict:
    totals_counters: Counter = Counter()
    for s in stages.values():
        totals_counters.update(s["counters"])
    totals = {
        "macs": sum(s["macs"] for s in stages.values()),
        "cycles": sum(s["cycles"] for s in stages.values()),
        "saturation_events": sum(s["saturation_events"] for s in stages.values()),
        "cost_units": sum(s["cost_units"] for s in stages.values()),
        "counters": dict(sorted(totals_counters.items())),
    }
    if wall_time is not None:
        totals["wall_time_s"] = wall_time
    return {
        "provenance": {"seed": config.seed, "config_hash": config.semantic_hash(), **provenance},
        "cost_table": {"units": dict(sorted(config.cost_table.items())), "note": COST_NOTE},
        "stages": stages,
        "totals": totals,
    }


def report_rows(report: dict) -> list[tuple[str, str, Any]]:
    rows = []
    for k, v in report["provenance"].items():
        rows.append(("provenance", k, v))
    for name, s in report["stages"].items():
        for k, v in s.items():
            if isinstance(v, (dict, list)):
                v = json.dumps(v, sort_keys=True)
            rows.append((name, k, v))
    for k, v in report["totals"].items():
        rows.append(("totals", k, json.dumps(v, sort_keys=True) if isinstance(v, dict) else v))
    return rows


def render_report(report: dict, fmt: str = "json") -> str:
    if fmt == "json":
        return json.dumps(report, indent=1, sort_keys=True) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("section", "metric", "value"))
    w.writerows(report_rows(report))
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Full run


@dataclass
class RunResult:
    report: dict
    output: np.ndarray
    paths: dict[str, Path]


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (MguaError, ValueError, OSError) as exc:
        raise StageError(name, exc) from exc


def run_pipeline(config: RunConfig) -> RunResult:
    """Stage 1 -> 2 -> 3 with every intermediate artifact written to ``output_dir``."""
    if not config.mesh:
        raise ContractError("config has no mesh path")
    t0 = time.perf_counter()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    memory, state = _stage("setup", load_state, config)
    initial_hash = _json_hash(state_snapshot(memory, state))

    mesh = _stage("fem", load_mesh, config.mesh)
    fem = _stage("fem", run_fem_stage, mesh, memory, fixed_precision=config.fixed_precision,
                 batch_size=config.batch_size, fused=config.fused, cost_table=config.cost_table)
    _stage("fem", write_stage1, out / "stage1", fem.matrices, fem.per_element)
    # downstream stages consume the persisted artifact, exactly as a standalone run would
    matrices, _ = _stage("fem", read_stage1, out / "stage1.json")

    doc, snn_summary = _stage("snn", run_snn_from_matrices, matrices, config, memory)
    _stage("snn", write_spike_json, out / "spikes.json", doc)
    q = spikes_from_document(doc)
    last = doc["metadata"]
    (out / "spikes.mgsp").write_bytes(
        pack_spikes(q, SystolicConfig(last["M"], last["V"], last["N"], last["S"]))
    )

    res = _stage("sparse", run_sparse_from_spikes, doc, config, memory, state)
    _stage("sparse", sp.write_compressed, out / "output.mgua", res.compressed, fmt=config.compression)
    output = res.outputs[None]  # (B=1, C_o=n_e, H_o, W_o)
    write_output_tensor(out / "output", output)

    final_snapshot = state_snapshot(memory, state)
    if config.memory_out:
        save_state(config.memory_out, memory, state)
    provenance = {
        "mesh_hash": _file_hash(config.mesh),
        "memory_hash_initial": initial_hash,
        "memory_hash_final": _json_hash(final_snapshot),
    }
    stages = {"fem": fem.summary, "snn": snn_summary, "sparse": res.summary}
    wall = time.perf_counter() - t0 if config.timing else None
    report = assemble_report(config, stages, provenance, wall)
    report_path = Path(config.report) if config.report else out / f"report.{config.report_format}"
    report_path.write_text(render_report(report, config.report_format))
    paths = {
        "stage1": out / "stage1.json", "spikes": out / "spikes.json", "spikes_packed": out / "spikes.mgsp",
        "compressed": out / "output.mgua", "output": out / "output.json", "report": report_path,
    }
    return RunResult(report, output, paths)


def with_overrides(config: RunConfig, **kw) -> RunConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
