"""Stage 2: bit-serial spike matmul on a tiled (M, V, N, S) systolic array.

Multi-bit activations are quantized to unsigned b-bit integers (sign carried
by a separate negative pass), split into b binary bit-planes, multiplied
plane by plane against integer weights, and recombined by shift-add.

Array axes follow the dataflow naming: V input channels, N spatial
positions, S time steps; weights are (M output channels, V).
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import ContractError, FormatError

if TYPE_CHECKING:
    from .memory import AdaptiveMemory

MAX_BITS = 8
ACC_MAX = 2 ** 31 - 1
ACC_MIN = -(2 ** 31)
TILE_SIZES = (1, 2, 4, 8, 16)
PE_BUDGET = 256


@dataclass(frozen=True)
class SystolicConfig:
    M: int = 4
    V: int = 4
    N: int = 4
    S: int = 4

    def __post_init__(self):
        for name in "MVNS":
            if getattr(self, name) not in TILE_SIZES:
                raise ContractError(f"{name}={getattr(self, name)} not in {TILE_SIZES}")
        if self.pe_count > PE_BUDGET:
            raise ContractError(f"M*V*N*S = {self.pe_count} exceeds PE budget {PE_BUDGET}")

    @property
    def tile(self) -> tuple[int, int, int, int]:
        return (self.M, self.V, self.N, self.S)

    @property
    def pe_count(self) -> int:
        return self.M * self.V * self.N * self.S

    def __str__(self) -> str:
        return "x".join(map(str, self.tile))


DEFAULT_SYSTOLIC = SystolicConfig(4, 4, 4, 4)


def candidate_configs() -> list[SystolicConfig]:
    """Every tiling with sides in TILE_SIZES and at most PE_BUDGET PEs."""
    return [
        SystolicConfig(*t)
        for t in itertools.product(TILE_SIZES, repeat=4)
        if np.prod(t) <= PE_BUDGET
    ]


def _ceil_div(a, b):
    return -(-np.asarray(a) // np.asarray(b))


def predicted_utilization(dims, tiles) -> np.ndarray:
    """Closed-form utilization prod_d D_d / (t_d * ceil(D_d / t_d)).

    ``dims`` (..., 4) workload sizes (M, V, N, S); ``tiles`` broadcastable (..., 4).
    """
    dims = np.asarray(dims, dtype=np.int64)
    tiles = np.asarray(tiles, dtype=np.int64)
    return np.prod(dims / (tiles * _ceil_div(dims, tiles)), axis=-1)


def predicted_cycles(dims, tiles) -> np.ndarray:
    return np.prod(_ceil_div(np.asarray(dims), np.asarray(tiles)), axis=-1)


@dataclass
class SystolicTrace:
    pe_count: int = 0
    cycles: int = 0
    active_pe_cycles: int = 0
    macs: int = 0

    @property
    def utilization(self) -> float:
        if self.cycles == 0:
            return 0.0
        return self.active_pe_cycles / (self.pe_count * self.cycles)

    def merge(self, other: "SystolicTrace") -> "SystolicTrace":
        if self.pe_count and other.pe_count and self.pe_count != other.pe_count:
            raise ContractError("cannot merge traces from differently sized arrays")
        return SystolicTrace(
            self.pe_count or other.pe_count,
            self.cycles + other.cycles,
            self.active_pe_cycles + other.active_pe_cycles,
            self.macs + other.macs,
        )

    def to_json(self) -> dict:
        return {
            "cycles": self.cycles,
            "active_pe_cycles": self.active_pe_cycles,
            "macs": self.macs,
            "utilization": self.utilization,
        }


# ---------------------------------------------------------------------------
# Quantization and bit-planes


@dataclass
class QuantizedTensor:
    ints: np.ndarray  # magnitudes in [0, 2**b - 1]
    negative: np.ndarray  # sign mask
    b: int
    scale: float

    @property
    def positive_part(self) -> np.ndarray:
        return np.where(self.negative, 0, self.ints)

    @property
    def negative_part(self) -> np.ndarray:
        return np.where(self.negative, self.ints, 0)

    @property
    def signed_ints(self) -> np.ndarray:
        return np.where(self.negative, -self.ints, self.ints)

    def dequantize(self) -> np.ndarray:
        return self.scale * self.signed_ints.astype(np.float64)


def _check_bits(b: int) -> None:
    if not (isinstance(b, (int, np.integer)) and 1 <= b <= MAX_BITS):
        raise ContractError(f"bit-width must be an integer in [1, {MAX_BITS}], got {b!r}")


def quantize(x, b: int) -> QuantizedTensor:
    """Unsigned affine quantization of |x| to b bits with round-half-even."""
    _check_bits(b)
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ContractError("cannot quantize non-finite values")
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    scale = peak / (2 ** b - 1) if peak > 0 else 1.0
    if scale == 0.0:  # subnormal peak: the step underflows
        scale = float(np.nextafter(0.0, 1.0))
    ints = np.rint(np.abs(x) / scale).astype(np.int64)
    ints = np.minimum(ints, 2 ** b - 1)
    return QuantizedTensor(ints, np.signbit(x) & (ints != 0), int(b), scale)


def decompose_multibit(ints: np.ndarray, b: int) -> list[np.ndarray]:
    """Split nonnegative b-bit integers into b binary planes, LSB first."""
    _check_bits(b)
    ints = np.asarray(ints, dtype=np.int64)
    if ints.size and (ints.min() < 0 or ints.max() >= 2 ** b):
        raise ContractError(f"values out of range for {b}-bit decomposition")
    return [((ints >> j) & 1).astype(np.uint8) for j in range(b)]


def systolic_matmul(spikes, weights, config: SystolicConfig) -> tuple[np.ndarray, SystolicTrace]:
    """Integer ``partials[m, n, s] = sum_v spikes[v, n, s] * weights[m, v]``.

    The workload is cut into (M, V, N, S) tiles; each tile step takes one
    cycle and occupies as many PEs as it has real (unpadded) positions.
    Tile order: M outermost, then N, S, with V innermost.
    """
    spikes = np.asarray(spikes)
    weights = np.asarray(weights)
    if spikes.ndim != 3 or weights.ndim != 2 or weights.shape[1] != spikes.shape[0]:
        raise ContractError(f"shape mismatch: spikes {spikes.shape}, weights {weights.shape}")
    if spikes.size and not np.isin(spikes, (0, 1)).all():
        raise ContractError("spike tensor must be binary")
    Mt, Vt = weights.shape
    _, Nt, St = spikes.shape
    tm, tv, tn, ts = config.tile
    cm, cv, cn, cs = (int(_ceil_div(d, t)) for d, t in zip((Mt, Vt, Nt, St), config.tile))

    W = np.zeros((cm * tm, cv * tv), dtype=np.int64)
    W[:Mt, :Vt] = weights
    X = np.zeros((cv * tv, cn * tn, cs * ts), dtype=np.int64)
    X[:Vt, :Nt, :St] = spikes
    W = W.reshape(cm, tm, cv, tv)
    X = X.reshape(cv, tv, cn, tn, cs, ts)
    # per-tile products summed over the V tiles of each output tile
    out = np.einsum("aibj,bjcdek->aicdek", W, X, optimize=True)
    partials = out.reshape(cm * tm, cn * tn, cs * ts)[:Mt, :Nt, :St]

    occ = [
        np.minimum(t, d - t * np.arange(c))
        for d, t, c in zip((Mt, Vt, Nt, St), config.tile, (cm, cv, cn, cs))
    ]
    active = int(np.prod([o.sum() for o in occ]))
    trace = SystolicTrace(config.pe_count, cm * cv * cn * cs, active, Mt * Vt * Nt * St)
    return partials, trace


def shift_add_reconstruct(partials: Sequence[np.ndarray]) -> tuple[np.ndarray, bool]:
    """Combine per-plane partial sums as ``sum_j partials[j] << j``.

    Emulates a 32-bit accumulator: on overflow the result saturates and the
    returned flag is True.
    """
    if not len(partials):
        raise ContractError("need at least one plane")
    acc = np.zeros(np.shape(partials[0]), dtype=np.int64)
    saturated = False
    for j, p in enumerate(partials):
        p = np.asarray(p, dtype=np.int64)
        term = p << j
        if np.any(term > ACC_MAX) or np.any(term < ACC_MIN):
            saturated = True
        acc = acc + np.clip(term, ACC_MIN, ACC_MAX)
        if np.any(acc > ACC_MAX) or np.any(acc < ACC_MIN):
            saturated = True
            acc = np.clip(acc, ACC_MIN, ACC_MAX)
    return acc, saturated


def bit_serial_matmul(ints, weights, b: int, config: SystolicConfig):
    """decompose -> per-plane systolic matmul -> shift-add for unsigned ``ints``."""
    planes = decompose_multibit(ints, b)
    trace = SystolicTrace(config.pe_count)
    partials = []
    for plane in planes:
        p, t = systolic_matmul(plane, weights, config)
        partials.append(p)
        trace = trace.merge(t)
    result, saturated = shift_add_reconstruct(partials)
    return result, trace, saturated


# ---------------------------------------------------------------------------
# Layer execution


LAYER_TYPES = ("conv", "linear", "depthwise", "pointwise", "residual", "readout")


@dataclass
class LayerSpec:
    layer_type: str
    weights: np.ndarray  # signed integers, (M, V)
    weight_bits: int = 4

    def __post_init__(self):
        if self.layer_type not in LAYER_TYPES:
            raise ContractError(f"unknown layer type {self.layer_type!r}; expected one of {LAYER_TYPES}")
        self.weights = np.asarray(self.weights, dtype=np.int64)
        _check_bits(self.weight_bits)
        lim = 2 ** (self.weight_bits - 1) if self.weight_bits > 1 else 1
        if self.weights.size and np.abs(self.weights).max() > lim:
            raise ContractError(f"weights exceed {self.weight_bits}-bit range")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]


def random_weights(rng: np.random.Generator, out_ch: int, in_ch: int, bits: int) -> np.ndarray:
    lim = 2 ** (bits - 1) - 1 if bits > 1 else 1
    return rng.integers(-lim, lim + 1, size=(out_ch, in_ch), dtype=np.int64)


@dataclass
class LayerFeatures:
    value_range: float
    size: int


@dataclass
class LayerResult:
    layer_type: str
    b: int
    config: SystolicConfig
    output: np.ndarray
    trace: SystolicTrace
    saturated: bool
    error: float
    shift_adds: int

    def to_json(self) -> dict:
        return {
            "layer_type": self.layer_type,
            "b": self.b,
            "M": self.config.M, "V": self.config.V, "N": self.config.N, "S": self.config.S,
            "out_channels": int(self.output.shape[0]),
            "saturated": self.saturated,
            "reconstruction_error": self.error,
            "shift_adds": self.shift_adds,
            **self.trace.to_json(),
        }


def run_layer(x, layer: LayerSpec, b: int, config: SystolicConfig) -> LayerResult:
    """Quantize ``x`` (V, N, S), run both sign passes bit-serially, dequantize."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != layer.weights.shape[1]:
        raise ContractError(f"layer expects {layer.weights.shape[1]} input channels, got shape {x.shape}")
    q = quantize(x, b)
    pos, t_pos, sat_pos = bit_serial_matmul(q.positive_part, layer.weights, b, config)
    neg, t_neg, sat_neg = bit_serial_matmul(q.negative_part, layer.weights, b, config)
    out = q.scale * (pos - neg).astype(np.float64)
    oracle = np.einsum("mv,vns->mns", layer.weights.astype(np.float64), x)
    ref = np.linalg.norm(oracle)
    err = float(np.linalg.norm(out - oracle) / ref) if ref > 0 else float(np.linalg.norm(out))
    return LayerResult(
        layer.layer_type, b, config, out, t_pos.merge(t_neg), sat_pos or sat_neg, err,
        shift_adds=2 * b * int(np.prod(out.shape)),
    )


def spike_document(q: QuantizedTensor, layers: Sequence[LayerResult]) -> dict:
    """JSON-ready spike trains of the final layer plus per-layer metadata."""
    last = layers[-1]
    pos = decompose_multibit(q.positive_part, q.b)
    neg = decompose_multibit(q.negative_part, q.b)
    return {
        "spike_trains": [[p.tolist() for p in pos], [n.tolist() for n in neg]],
        "metadata": {
            "b": q.b,
            "M": last.config.M, "V": last.config.V, "N": last.config.N, "S": last.config.S,
            "scale": q.scale,
            "shape": list(q.ints.shape),
            "layers": [
                {"b": r.b, "M": r.config.M, "V": r.config.V, "N": r.config.N, "S": r.config.S}
                for r in layers
            ],
        },
    }


def run_snn_stage(x, layers: Sequence[LayerSpec], memory: "AdaptiveMemory",
                  rng: np.random.Generator, *, fixed_parallelism: SystolicConfig | None = None,
                  epsilon: float = 0.1, batch_size: int = 32):
    """Run every layer in sequence with memory-guided bit-width and tiling.

    Returns (spike document, list of LayerResult); each result carries its
    own trace and reconstruction error.
    Policy state is updated at batch boundaries (every ``batch_size`` layers).
    """
    from .memory import layer_bucket

    if not layers:
        raise ContractError("need at least one layer")
    x = np.asarray(x, dtype=np.float64)
    results: list[LayerResult] = []
    pending: list[tuple[LayerFeatures, LayerResult, tuple]] = []

    def flush():
        for feats, res, dims in pending:
            memory.update_experience(feats, res.b, res.error, float(res.trace.macs))
            memory.record_utilization(res.layer_type, layer_bucket(dims[0]), dims, res.config,
                                      res.trace.utilization)
        pending.clear()

    for i, layer in enumerate(layers):
        feats = LayerFeatures(float(np.max(np.abs(x))) if x.size else 0.0, int(x.size))
        b = memory.choose_bitwidth(feats, rng, epsilon)
        dims = (layer.out_channels, *x.shape)
        if fixed_parallelism is not None:
            config = fixed_parallelism
        else:
            history = memory.utilization_history(layer.layer_type, layer_bucket(dims[0]))
            config = memory.parallelism_policy(layer.layer_type, history, bucket=layer_bucket(dims[0]),
                                               rng=rng, epsilon=epsilon)
        res = run_layer(x, layer, b, config)
        results.append(res)
        pending.append((feats, res, dims))
        x = res.output
        if (i + 1) % batch_size == 0:
            flush()
    flush()

    q_out = quantize(x, results[-1].b)
    return spike_document(q_out, results), results


def spikes_from_document(doc: dict) -> QuantizedTensor:
    """Rebuild the quantized tensor carried by a spike JSON document."""
    try:
        meta = doc["metadata"]
        pos_planes, neg_planes = doc["spike_trains"]
        b = int(meta["b"])
        shape = tuple(meta["shape"])
        scale = float(meta["scale"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed spike document: {exc}") from exc
    if len(pos_planes) != b or len(neg_planes) != b:
        raise FormatError(f"expected {b} planes per sign")
    weights = (1 << np.arange(b, dtype=np.int64)).reshape((b,) + (1,) * len(shape))
    pos = (np.asarray(pos_planes, dtype=np.int64).reshape((b,) + shape) * weights).sum(axis=0)
    neg = (np.asarray(neg_planes, dtype=np.int64).reshape((b,) + shape) * weights).sum(axis=0)
    if np.any((pos != 0) & (neg != 0)):
        raise FormatError("an entry is spiking on both sign passes")
    return QuantizedTensor(pos + neg, neg != 0, b, scale)


# ---------------------------------------------------------------------------
# Packed spike file: 64-byte header, then bit-packed planes (positive pass
# first, LSB plane first), each plane np.packbits(bitorder="little").

SPIKE_MAGIC = b"MGSP"
SPIKE_VERSION = 1
_SPIKE_HEADER = struct.Struct("<4sHBB4I4Bd")  # magic, version, b, ndim, shape[4], M V N S, scale


def write_spikes_packed(path: str | Path, q: QuantizedTensor, config: SystolicConfig) -> None:
    Path(path).write_bytes(pack_spikes(q, config))


def pack_spikes(q: QuantizedTensor, config: SystolicConfig) -> bytes:
    shape = tuple(q.ints.shape)
    if len(shape) > 4:
        raise ContractError("packed spike format supports at most 4 dimensions")
    dims = list(shape) + [0] * (4 - len(shape))
    header = _SPIKE_HEADER.pack(SPIKE_MAGIC, SPIKE_VERSION, q.b, len(shape), *dims,
                                config.M, config.V, config.N, config.S, q.scale)
    header = header.ljust(64, b"\0")
    body = b"".join(
        np.packbits(p.ravel(), bitorder="little").tobytes()
        for part in (q.positive_part, q.negative_part)
        for p in decompose_multibit(part, q.b)
    )
    return header + body


def unpack_spikes(data: bytes) -> tuple[QuantizedTensor, SystolicConfig]:
    if len(data) < 64:
        raise FormatError("truncated spike header")
    magic, version, b, ndim, *rest = _SPIKE_HEADER.unpack_from(data)
    if magic != SPIKE_MAGIC or version != SPIKE_VERSION:
        raise FormatError(f"not a packed spike file (magic {magic!r}, version {version})")
    dims, (M, V, N, S), scale = rest[:4], rest[4:8], rest[8]
    shape = tuple(dims[:ndim])
    count = int(np.prod(shape)) if shape else 1
    plane_bytes = (count + 7) // 8
    if len(data) != 64 + 2 * b * plane_bytes:
        raise FormatError("spike payload length does not match header")
    ints = []
    off = 64
    for _ in range(2):
        acc = np.zeros(count, dtype=np.int64)
        for j in range(b):
            bits = np.unpackbits(np.frombuffer(data, np.uint8, plane_bytes, off), count=count,
                                 bitorder="little")
            acc += bits.astype(np.int64) << j
            off += plane_bytes
        ints.append(acc.reshape(shape))
    pos, neg = ints
    q = QuantizedTensor(pos + neg, neg != 0, b, scale)
    return q, SystolicConfig(M, V, N, S)


def read_spikes_packed(path: str | Path):
    return unpack_spikes(Path(path).read_bytes())


def write_spike_json(path: str | Path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, separators=(",", ":"), sort_keys=True) + "\n")


def read_spike_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
