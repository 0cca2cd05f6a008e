"""Stage 3: N:M structured (and learned) sparsity with 2-bit in-group indices.

Tensors are viewed as 2-D ``(rows, K)`` with groups running along the last
axis. When K is not a multiple of the group size the row is zero-padded;
padded slots are never kept.
"""

from __future__ import annotations

import enum
import math
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .errors import ContractError, FormatError

if TYPE_CHECKING:
    from .memory import AdaptiveMemory

NONZERO_EPS = 1e-12
MIN_DENSITY = 0.10
CURRICULUM_WINDOW = 20
CURRICULUM_THETA = 0.95
SELECT_LAMBDA = 0.1
LEARNED_BUDGET = 0.5  # learned patterns never spend more MACs than 2:4
ARRAY_DIM = 4  # output-stationary PE array is ARRAY_DIM x ARRAY_DIM


class PatternKind(enum.Enum):
    P2_4 = "2:4"
    P1_4 = "1:4"
    P1_3 = "1:3"
    LEARNED = "learned"

    @property
    def structured(self) -> bool:
        return self is not PatternKind.LEARNED

    @property
    def group_size(self) -> int:
        return 3 if self is PatternKind.P1_3 else 4

    @property
    def keep(self) -> int | None:
        return {"2:4": 2, "1:4": 1, "1:3": 1}.get(self.value)


STRUCTURED = (PatternKind.P2_4, PatternKind.P1_4, PatternKind.P1_3)


@dataclass(frozen=True)
class SparsityPattern:
    kind: PatternKind
    keep_counts: tuple[int, ...] | None = None  # LEARNED only; one entry per group

    def __post_init__(self):
        if self.kind.structured and self.keep_counts is not None:
            raise ContractError("structured patterns have fixed keep counts")
        if self.keep_counts is not None and any(not 0 <= k <= 4 for k in self.keep_counts):
            raise ContractError("learned keep counts must lie in [0, 4]")

    @property
    def group_size(self) -> int:
        return self.kind.group_size

    def __str__(self) -> str:
        return self.kind.value


P2_4 = SparsityPattern(PatternKind.P2_4)
P1_4 = SparsityPattern(PatternKind.P1_4)
P1_3 = SparsityPattern(PatternKind.P1_3)


def _as_rows(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 0:
        raise ContractError("need at least a 1-D tensor")
    return x.reshape(-1, x.shape[-1]) if x.ndim > 1 else x.reshape(1, -1)


def _grouped(x2: np.ndarray, gs: int):
    """Pad rows to a multiple of gs. Returns (groups (n_groups, gs), pad mask)."""
    R, K = x2.shape
    G = -(-K // gs)
    padded = np.zeros((R, G * gs), dtype=x2.dtype)
    padded[:, :K] = x2
    pad = np.zeros((R, G * gs), dtype=bool)
    pad[:, K:] = True
    return padded.reshape(R * G, gs), pad.reshape(R * G, gs)


def _effective_keep(pattern: SparsityPattern, pad: np.ndarray) -> np.ndarray:
    real = (~pad).sum(axis=1)
    if pattern.kind.structured:
        return np.minimum(pattern.kind.keep, real)
    counts = np.asarray(pattern.keep_counts, dtype=np.int64)
    if counts.shape != (pad.shape[0],):
        raise ContractError(f"learned pattern has {counts.size} groups, tensor has {pad.shape[0]}")
    if np.any(counts > real):
        raise ContractError("learned keep count exceeds the real entries of a padded group")
    return counts


def _rank_mask(order_key: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Mask of the first ``keep[g]`` entries of each group in ascending key order."""
    order = np.argsort(order_key, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(order.shape[1])[None, :].repeat(order.shape[0], 0), axis=1)
    return ranks < keep[:, None]


# ---------------------------------------------------------------------------
# Analysis


@dataclass
class SparsityCharacteristics:
    shape: tuple[int, ...]
    density: float
    histogram: dict[int, int]
    group_variance: float
    low_density: bool
    # fraction of squared magnitude each pattern would keep
    energy_kept: dict[PatternKind, float] = field(default_factory=dict)
    learned_density: float = 1.0

    @property
    def memory_class(self) -> tuple[int, int]:
        decile = min(int(self.density * 10), 9)
        tercile = 0 if self.group_variance < 0.25 else (1 if self.group_variance < 1.0 else 2)
        return decile, tercile

    def predicted_cost(self, kind: PatternKind) -> float:
        if kind is PatternKind.LEARNED:
            return self.learned_density
        return kind.keep / kind.group_size

    def predicted_retention(self, kind: PatternKind) -> float:
        return 1.0 - math.sqrt(max(0.0, 1.0 - self.energy_kept[kind]))

    def to_json(self) -> dict:
        return {
            "density": self.density,
            "histogram": {str(k): v for k, v in sorted(self.histogram.items())},
            "group_variance": self.group_variance,
            "low_density": self.low_density,
        }


def analyze_sparsity(x) -> SparsityCharacteristics:
    """Density, per-group nonzero histogram (groups of 4) and group-count variance.

    ``low_density`` is set (not raised) when density falls below 10%.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ContractError("cannot analyze an empty tensor")
    nz = np.abs(x) > NONZERO_EPS
    density = float(nz.sum() / x.size)
    groups, pad = _grouped(_as_rows(nz), 4)
    counts = groups.sum(axis=1)
    hist = {int(k): int(v) for k, v in zip(*np.unique(counts, return_counts=True))}

    rows = _as_rows(x)
    total = float(np.sum(rows * rows))
    learned_density = float(min(max(density, MIN_DENSITY), LEARNED_BUDGET))
    energy = {}
    for kind in PatternKind:
        if kind is PatternKind.LEARNED:
            kept = prune_to_pattern(rows, learned_pattern(rows, learned_density))
        else:
            kept = prune_to_pattern(rows, SparsityPattern(kind))
        energy[kind] = float(np.sum(kept * kept) / total) if total > 0 else 1.0
    return SparsityCharacteristics(
        tuple(x.shape), density, hist, float(np.var(counts)), density < MIN_DENSITY,
        energy, learned_density,
    )


# ---------------------------------------------------------------------------
# Pruning and compression


def prune_to_pattern(x, pattern: SparsityPattern) -> np.ndarray:
    """Keep the largest-magnitude entries of each group; ties go to the lower index."""
    x = np.asarray(x)
    x2 = _as_rows(x)
    gs = pattern.group_size
    groups, pad = _grouped(x2, gs)
    keep = _effective_keep(pattern, pad)
    key = np.where(pad, np.inf, -np.abs(groups).astype(np.float64))
    mask = _rank_mask(key, keep)
    out = np.where(mask, groups, 0).reshape(x2.shape[0], -1)[:, : x2.shape[1]]
    return out.reshape(x.shape).astype(x.dtype, copy=False)


def learned_pattern(x, target_density: float) -> SparsityPattern:
    """Per-group keep counts from a global magnitude ranking under a density budget."""
    if not MIN_DENSITY <= target_density <= 1.0:
        raise ContractError(f"target density {target_density} outside [{MIN_DENSITY}, 1]")
    x = np.asarray(x)
    total = int(np.rint(target_density * x.size))
    groups, pad = _grouped(_as_rows(x), 4)
    key = np.where(pad, np.inf, -np.abs(groups).astype(np.float64)).ravel()
    order = np.argsort(key, kind="stable")
    mask = np.zeros(key.size, dtype=bool)
    mask[order[:total]] = True
    counts = mask.reshape(groups.shape).sum(axis=1)
    return SparsityPattern(PatternKind.LEARNED, tuple(int(c) for c in counts))


@dataclass
class CompressedTensor:
    values: np.ndarray  # kept entries, group-major
    indices: np.ndarray  # uint8 in-group position of each kept entry
    group_size: int
    keep_counts: np.ndarray  # uint8, one per group
    shape: tuple[int, ...]
    pattern: SparsityPattern

    @property
    def n_groups(self) -> int:
        return int(self.keep_counts.size)

    @property
    def rows(self) -> int:
        return int(np.prod(self.shape[:-1])) if len(self.shape) > 1 else 1

    @property
    def width(self) -> int:
        return int(self.shape[-1])

    @property
    def groups_per_row(self) -> int:
        return -(-self.width // self.group_size)

    @property
    def n_kept(self) -> int:
        return int(self.values.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CompressedTensor):
            return NotImplemented
        return (
            self.group_size == other.group_size
            and self.shape == other.shape
            and self.pattern.kind == other.pattern.kind
            and np.array_equal(self.keep_counts, other.keep_counts)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )


def compress(x_pruned, pattern: SparsityPattern) -> CompressedTensor:
    """Pack a pattern-conforming tensor into values + 2-bit in-group indices.

    A group with fewer nonzeros than its keep count is filled up with its
    lowest-index zeros.
    """
    x = np.asarray(x_pruned)
    gs = pattern.group_size
    groups, pad = _grouped(_as_rows(x), gs)
    keep = _effective_keep(pattern, pad)
    nonzero = (groups != 0) & ~pad
    nnz = nonzero.sum(axis=1)
    bad = np.flatnonzero(nnz > keep)
    if bad.size:
        g = int(bad[0])
        raise ContractError(
            f"group {g} has {int(nnz[g])} nonzeros but pattern {pattern} keeps {int(keep[g])}"
        )
    category = np.where(pad, 2, np.where(nonzero, 0, 1))
    mask = _rank_mask(category, keep)
    _, idx = np.nonzero(mask)
    if pattern.kind.structured:
        stored = pattern
    else:
        stored = SparsityPattern(PatternKind.LEARNED, tuple(int(k) for k in keep))
    return CompressedTensor(
        values=groups[mask].copy(),
        indices=idx.astype(np.uint8),
        group_size=gs,
        keep_counts=keep.astype(np.uint8),
        shape=tuple(x.shape),
        pattern=stored,
    )


def _positions(c: CompressedTensor) -> tuple[np.ndarray, np.ndarray]:
    """Row and logical column of each kept value."""
    group_of = np.repeat(np.arange(c.n_groups), c.keep_counts.astype(np.int64))
    rows = group_of // c.groups_per_row
    cols = (group_of % c.groups_per_row) * c.group_size + c.indices.astype(np.int64)
    return rows, cols


def decompress(c: CompressedTensor) -> np.ndarray:
    out = np.zeros((c.rows, c.width), dtype=c.values.dtype)
    rows, cols = _positions(c)
    out[rows, cols] = c.values
    return out.reshape(c.shape)


@dataclass
class SparseTrace:
    macs: int = 0
    cycles: int = 0
    tiles: int = 0

    @property
    def utilization(self) -> float:
        return self.macs / (ARRAY_DIM * ARRAY_DIM * self.cycles) if self.cycles else 0.0

    def to_json(self) -> dict:
        return {"macs": self.macs, "cycles": self.cycles, "tiles": self.tiles,
                "utilization": self.utilization}


def sparse_mac(a: CompressedTensor, b) -> tuple[np.ndarray, SparseTrace]:
    """``result[i, k] = sum over kept a[i, j] * b[j, k]`` on an output-stationary array.

    Outputs are tiled 4x4, one per PE. Each cycle every PE of a tile consumes
    one kept entry of its row with the B operand gathered by index, so a
    tile takes as many cycles as its longest row has kept entries.
    """
    b = np.asarray(b)
    if b.ndim != 2 or b.shape[0] != a.width:
        raise ContractError(f"inner dimensions disagree: A is {a.rows}x{a.width}, B is {b.shape}")
    rows, cols = _positions(a)
    integer = np.issubdtype(a.values.dtype, np.integer) and np.issubdtype(b.dtype, np.integer)
    dt = np.int64 if integer else np.float64
    out = np.zeros((a.rows, b.shape[1]), dtype=dt)
    np.add.at(out, rows, a.values.astype(dt)[:, None] * b[cols].astype(dt))

    per_row = np.bincount(rows, minlength=a.rows) if rows.size else np.zeros(a.rows, dtype=np.int64)
    row_tiles = -(-a.rows // ARRAY_DIM)
    col_tiles = -(-b.shape[1] // ARRAY_DIM)
    padded = np.zeros(row_tiles * ARRAY_DIM, dtype=np.int64)
    padded[: a.rows] = per_row
    longest = padded.reshape(row_tiles, ARRAY_DIM).max(axis=1)
    trace = SparseTrace(
        macs=int(per_row.sum()) * b.shape[1],
        cycles=int(longest.sum()) * col_tiles,
        tiles=row_tiles * col_tiles,
    )
    return out, trace


# ---------------------------------------------------------------------------
# Storage footprints (index vs bitmap)


def index_format_bytes(c: CompressedTensor, value_bytes: int = 4) -> int:
    return c.n_groups + (c.n_kept + 3) // 4 + c.n_kept * value_bytes


def bitmap_format_bytes(c: CompressedTensor, value_bytes: int = 4) -> int:
    return (c.n_groups * c.group_size + 7) // 8 + c.n_kept * value_bytes


def dense_bytes(c: CompressedTensor, value_bytes: int = 4) -> int:
    return c.rows * c.width * value_bytes


# ---------------------------------------------------------------------------
# Compressed-tensor file. Layout (little-endian) is described in docs/formats.md.

FILE_MAGIC = b"MGUA"
FILE_VERSION = 1
FORMAT_INDEX, FORMAT_BITMAP = 0, 1
DTYPE_F32, DTYPE_I8 = 0, 1
_PATTERN_TAGS = {PatternKind.P2_4: 0, PatternKind.P1_4: 1, PatternKind.P1_3: 2, PatternKind.LEARNED: 3}
_HEADER = struct.Struct("<4sHBBBBB x 4I II")


def _pack_2bit(idx: np.ndarray) -> bytes:
    n = idx.size
    padded = np.zeros(-(-n // 4) * 4, dtype=np.uint8)
    padded[:n] = idx
    q = padded.reshape(-1, 4)
    return (q[:, 0] | (q[:, 1] << 2) | (q[:, 2] << 4) | (q[:, 3] << 6)).astype(np.uint8).tobytes()


def _unpack_2bit(data: bytes, n: int) -> np.ndarray:
    b = np.frombuffer(data, dtype=np.uint8)
    out = np.stack([(b >> s) & 3 for s in (0, 2, 4, 6)], axis=1).ravel()
    return out[:n].astype(np.uint8)


def encode_compressed(c: CompressedTensor, *, fmt: str = "index", dtype: str | None = None) -> bytes:
    """Serialize to bytes. ``dtype`` is "f32" or "i8" (default: i8 for integer values)."""
    if len(c.shape) > 4:
        raise ContractError("compressed file supports at most 4 dimensions")
    if dtype is None:
        dtype = "i8" if np.issubdtype(c.values.dtype, np.integer) else "f32"
    if dtype == "i8":
        if c.values.size and (c.values.max() > 127 or c.values.min() < -128):
            raise ContractError("values do not fit int8")
        vals = c.values.astype("<i1").tobytes()
        dcode = DTYPE_I8
    elif dtype == "f32":
        vals = c.values.astype("<f4").tobytes()
        dcode = DTYPE_F32
    else:
        raise ContractError(f"unknown dtype {dtype!r}")
    fcode = {"index": FORMAT_INDEX, "bitmap": FORMAT_BITMAP}[fmt]
    dims = list(c.shape) + [0] * (4 - len(c.shape))
    header = _HEADER.pack(FILE_MAGIC, FILE_VERSION, fcode, _PATTERN_TAGS[c.pattern.kind], c.group_size,
                          dcode, len(c.shape), *dims, c.n_groups, c.n_kept).ljust(64, b"\0")
    if fcode == FORMAT_INDEX:
        body = c.keep_counts.astype(np.uint8).tobytes() + _pack_2bit(c.indices)
    else:
        bits = np.zeros((c.n_groups, c.group_size), dtype=np.uint8)
        group_of = np.repeat(np.arange(c.n_groups), c.keep_counts.astype(np.int64))
        bits[group_of, c.indices] = 1
        body = np.packbits(bits.ravel(), bitorder="little").tobytes()
    return header + body + vals


def decode_compressed(data: bytes, offset: int = 0) -> tuple[CompressedTensor, int]:
    """Parse one record starting at ``offset``; returns (tensor, next offset)."""
    if len(data) - offset < 64:
        raise FormatError("truncated compressed-tensor header")
    magic, version, fcode, ptag, gs, dcode, ndim, *rest = _HEADER.unpack_from(data, offset)
    if magic != FILE_MAGIC or version != FILE_VERSION:
        raise FormatError(f"bad magic/version {magic!r}/{version}")
    dims, n_groups, n_kept = rest[:4], rest[4], rest[5]
    shape = tuple(dims[:ndim])
    kind = {v: k for k, v in _PATTERN_TAGS.items()}.get(ptag)
    if kind is None or gs not in (3, 4) or dcode not in (DTYPE_F32, DTYPE_I8):
        raise FormatError("unknown pattern tag, group size or dtype")
    pos = offset + 64
    if fcode == FORMAT_INDEX:
        keep = np.frombuffer(data, np.uint8, n_groups, pos).copy()
        pos += n_groups
        nb = (n_kept + 3) // 4
        idx = _unpack_2bit(data[pos: pos + nb], n_kept)
        pos += nb
    elif fcode == FORMAT_BITMAP:
        nb = (n_groups * gs + 7) // 8
        bits = np.unpackbits(np.frombuffer(data, np.uint8, nb, pos), count=n_groups * gs,
                             bitorder="little").reshape(n_groups, gs)
        pos += nb
        keep = bits.sum(axis=1).astype(np.uint8)
        idx = np.nonzero(bits)[1].astype(np.uint8)
    else:
        raise FormatError(f"unknown storage format code {fcode}")
    if int(keep.sum()) != n_kept:
        raise FormatError("keep counts disagree with the kept-entry total")
    vsize = 4 if dcode == DTYPE_F32 else 1
    end = pos + n_kept * vsize
    if end > len(data):
        raise FormatError("truncated value payload")
    if dcode == DTYPE_F32:
        values = np.frombuffer(data, "<f4", n_kept, pos).astype(np.float32)
    else:
        values = np.frombuffer(data, "<i1", n_kept, pos).astype(np.int8)
    pattern = SparsityPattern(kind, tuple(int(k) for k in keep) if kind is PatternKind.LEARNED else None)
    return CompressedTensor(values, idx, gs, keep, shape, pattern), end


def write_compressed(path: str | Path, tensors: Sequence[CompressedTensor], *, fmt: str = "index",
                     dtype: str | None = None) -> None:
    """Write one or more records back to back."""
    Path(path).write_bytes(b"".join(encode_compressed(t, fmt=fmt, dtype=dtype) for t in tensors))


def read_compressed(path: str | Path) -> list[CompressedTensor]:
    data = Path(path).read_bytes()
    out, pos = [], 0
    while pos < len(data):
        t, pos = decode_compressed(data, pos)
        out.append(t)
    return out


# ---------------------------------------------------------------------------
# Curriculum


def permitted_kinds(stage: int) -> tuple[PatternKind, ...]:
    return ((PatternKind.P2_4,), STRUCTURED, STRUCTURED + (PatternKind.LEARNED,))[stage]


@dataclass
class CurriculumState:
    stage: int = 0
    window: deque = field(default_factory=lambda: deque(maxlen=CURRICULUM_WINDOW))
    max_stage: int = 2
    history: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.stage <= self.max_stage <= 2:
            raise ContractError("stage must lie in [0, max_stage] and max_stage in [0, 2]")

    def to_json(self) -> dict:
        return {"stage": self.stage, "max_stage": self.max_stage, "window": list(self.window)}

    @classmethod
    def from_json(cls, obj: dict) -> "CurriculumState":
        st = cls(obj["stage"], max_stage=obj["max_stage"])
        st.window.extend(obj["window"])
        return st


def pattern_scores(characteristics: SparsityCharacteristics, kinds: Iterable[PatternKind],
                   memory: "AdaptiveMemory | None" = None) -> dict[PatternKind, float]:
    """Predicted ``retention - lambda * cost``, replaced by stored experience when present."""
    kinds = list(kinds)
    scores = {
        k: characteristics.predicted_retention(k) - SELECT_LAMBDA * characteristics.predicted_cost(k)
        for k in kinds
    }
    if memory is not None:
        scores.update(memory.sparsity_scores(characteristics, kinds))
    return scores


def curriculum_select(characteristics: SparsityCharacteristics, state: CurriculumState,
                      memory: "AdaptiveMemory | None" = None, rng: np.random.Generator | None = None,
                      epsilon: float = 0.0) -> SparsityPattern:
    kinds = permitted_kinds(state.stage)
    if epsilon > 0:
        if rng is None:
            raise ContractError("exploration needs a random generator")
        if rng.random() < epsilon:
            return SparsityPattern(kinds[int(rng.integers(len(kinds)))])
    scores = pattern_scores(characteristics, kinds, memory)
    # kinds are ordered structured-first, so max() keeps structured on ties
    best = max(kinds, key=lambda k: scores[k])
    return SparsityPattern(best)


def curriculum_update(state: CurriculumState, pattern: SparsityPattern,
                      accuracy_retention: float) -> CurriculumState:
    """Advance a stage once a full window averages at least the threshold."""
    if not 0 <= accuracy_retention <= 1:
        raise ContractError(f"retention {accuracy_retention} outside [0, 1]")
    state.window.append(float(accuracy_retention))
    if (len(state.window) == CURRICULUM_WINDOW and state.stage < state.max_stage
            and float(np.mean(state.window)) >= CURRICULUM_THETA):
        state.stage += 1
        state.window.clear()
    state.history.append(state.stage)
    return state


def materialize(pattern: SparsityPattern, x, characteristics: SparsityCharacteristics) -> SparsityPattern:
    """Give a bare LEARNED choice concrete keep counts for ``x``."""
    if pattern.kind is PatternKind.LEARNED and pattern.keep_counts is None:
        return learned_pattern(x, characteristics.learned_density)
    return pattern


def accuracy_retention(output, dense_output) -> float:
    """1 - relative L2 error of the sparse stage output, clipped to [0, 1]."""
    ref = np.linalg.norm(dense_output)
    if ref == 0:
        return 1.0 if np.linalg.norm(output) == 0 else 0.0
    return float(np.clip(1.0 - np.linalg.norm(np.asarray(output) - dense_output) / ref, 0.0, 1.0))
