"""Memory-guided adaptation shared by all three stages.

Long-term memory is an LRU store of policy records (one per
precision / parallelism / sparsity key); short-term memory is a ring
buffer of recent outcomes per kind. Every policy here is tabular and
deterministic given the seeded generator passed in.
"""

from __future__ import annotations

import enum
import json
import math
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

import numpy as np

from .errors import ContractError, FormatError
from .fem import KAPPA_SOFT_LIMIT, ElementType
from .precision import LADDER, PrecisionConfig, PrecisionLevel
from .snn import (
    DEFAULT_SYSTOLIC, LAYER_TYPES, MAX_BITS, LayerFeatures, SystolicConfig, candidate_configs,
    predicted_cycles, predicted_utilization,
)
from .sparse import PatternKind, SparsityPattern

LONG_TERM_CAPACITY = 10000
SHORT_TERM_CAPACITY = 100
EXPERIENCE_CAPACITY = 1000
EMA_ALPHA = 0.2
TAU_HI = 1e-4
TAU_LO = 1e-8
LOW_ROUNDS_TO_RELAX = 3
MIN_RECORDS = 5
TAU_BITWIDTH = 1e-2
SPARSITY_LAMBDA = 0.1
N_BUCKETS = 7

BF16, FP32, FP64 = PrecisionLevel.BF16, PrecisionLevel.FP32, PrecisionLevel.FP64

# Default precision tiers; escalation/de-escalation moves between them.
PRECISION_TIERS = (
    PrecisionConfig(BF16, BF16, FP32, FP32),
    PrecisionConfig.uniform(FP32),
    PrecisionConfig.uniform(FP64),
)


class PolicyKind(enum.Enum):
    PRECISION = "precision"
    PARALLELISM = "parallelism"
    SPARSITY = "sparsity"


def _sparsity_tags() -> tuple[str, ...]:
    return tuple(f"d{d}/{k.value}" for d in range(10) for k in PatternKind)


TAG_VOCABULARY = {
    PolicyKind.PRECISION: tuple(t.value for t in ElementType),
    PolicyKind.PARALLELISM: LAYER_TYPES,
    PolicyKind.SPARSITY: _sparsity_tags(),
}


@dataclass(frozen=True)
class PolicyKey:
    kind: PolicyKind
    bucket: int
    tag: str

    def __post_init__(self):
        if not 0 <= self.bucket < N_BUCKETS:
            raise ContractError(f"bucket {self.bucket} outside [0, {N_BUCKETS - 1}]")
        if self.tag not in TAG_VOCABULARY[self.kind]:
            raise ContractError(f"tag {self.tag!r} not in the {self.kind.value} vocabulary")

    def to_json(self) -> list:
        return [self.kind.value, self.bucket, self.tag]

    @classmethod
    def from_json(cls, obj) -> "PolicyKey":
        kind, bucket, tag = obj
        return cls(PolicyKind(kind), int(bucket), tag)


@dataclass
class PolicyRecord:
    payload: Any
    error_ema: float | None = None
    cost_ema: float | None = None
    hits: int = 0
    pinned: bool = False

    def observe(self, error: float, cost: float) -> None:
        if self.error_ema is None:
            self.error_ema, self.cost_ema = error, cost
        else:
            self.error_ema = (1 - EMA_ALPHA) * self.error_ema + EMA_ALPHA * error
            self.cost_ema = (1 - EMA_ALPHA) * self.cost_ema + EMA_ALPHA * cost


class LongTermMemory:
    """Capacity-bounded mapping with least-recently-used eviction.

    ``get`` and ``put`` refresh recency; ``peek`` does not. Iteration order
    is least- to most-recently used.
    """

    def __init__(self, capacity: int = LONG_TERM_CAPACITY):
        if capacity < 1:
            raise ContractError("capacity must be positive")
        self.capacity = capacity
        self._data: OrderedDict = OrderedDict()
        self.evictions = 0

    def __len__(self) -> int:
        return len(self._data)

    def __contains__(self, key) -> bool:
        return key in self._data

    def __iter__(self) -> Iterator:
        return iter(self._data)

    def get(self, key, default=None):
        if key not in self._data:
            return default
        self._data.move_to_end(key)
        return self._data[key]

    def peek(self, key, default=None):
        return self._data.get(key, default)

    def put(self, key, value) -> Any:
        """Insert or replace; returns the evicted key, if any."""
        if key in self._data:
            self._data[key] = value
            self._data.move_to_end(key)
            return None
        self._data[key] = value
        if len(self._data) > self.capacity:
            evicted, _ = self._data.popitem(last=False)
            self.evictions += 1
            return evicted
        return None

    def items(self):
        return self._data.items()


class ShortTermMemory:
    def __init__(self, capacity: int = SHORT_TERM_CAPACITY):
        self.capacity = capacity
        self._buf: deque = deque(maxlen=capacity)

    def append(self, record) -> None:
        self._buf.append(record)

    def __len__(self) -> int:
        return len(self._buf)

    def __iter__(self):
        return iter(self._buf)


@dataclass
class BatchRecord:
    key: PolicyKey
    payload: Any
    error: float
    cost: float


@dataclass
class UtilizationRecord:
    key: PolicyKey
    dims: tuple[int, int, int, int]
    config: SystolicConfig
    utilization: float


@dataclass
class PolicyChange:
    key: PolicyKey
    old: Any
    new: Any
    saturated: bool = False


@dataclass
class ExperienceRecord:
    feature_class: tuple[int, int]
    b: int
    error: float
    cost: float


def kappa_bucket(kappa: float) -> int:
    return int(min(max(math.floor(math.log10(kappa)), 0), N_BUCKETS - 1))


def layer_bucket(out_channels: int) -> int:
    return int(min(max(math.floor(math.log2(max(out_channels, 1))), 0), N_BUCKETS - 1))


def feature_class(features: LayerFeatures) -> tuple[int, int]:
    rng = features.value_range
    r = int(np.clip(math.floor(math.log2(rng)), -32, 32)) if rng > 0 else -32
    s = int(math.floor(math.log10(max(features.size, 1))))
    return (r, s)


def default_precision(bucket: int, flagged: bool) -> PrecisionConfig:
    if flagged or bucket >= 4:
        return PRECISION_TIERS[2]
    if bucket >= 2:
        return PRECISION_TIERS[1]
    return PRECISION_TIERS[0]


def _tier_of(config: PrecisionConfig) -> int:
    """Highest tier the config dominates rung by rung."""
    best = 0
    for i, tier in enumerate(PRECISION_TIERS):
        if all(_ladder_pos(c) >= _ladder_pos(t) for c, t in zip(config.as_tuple(), tier.as_tuple())):
            best = i
    return best


def _ladder_pos(level: PrecisionLevel) -> int:
    return LADDER.index(level) if level in LADDER else 0


def escalate(config: PrecisionConfig) -> PrecisionConfig:
    """Raise every rung to at least the next tier; u_s follows u_q."""
    tier = _tier_of(config)
    if tier == len(PRECISION_TIERS) - 1:
        return config
    target = PRECISION_TIERS[tier + 1].as_tuple()
    rungs = [max(c, t, key=_ladder_pos) for c, t in zip(config.as_tuple()[:3], target[:3])]
    return PrecisionConfig(*rungs, rungs[2])


def deescalate(config: PrecisionConfig) -> PrecisionConfig:
    tier = _tier_of(config)
    return PRECISION_TIERS[max(tier - 1, 0)] if tier > 0 else config


class AdaptiveMemory:
    """All long-term stores, short-term buffers and tabular policies."""

    def __init__(self, capacity: int = LONG_TERM_CAPACITY, short_capacity: int = SHORT_TERM_CAPACITY):
        self.long_term = {k: LongTermMemory(capacity) for k in PolicyKind}
        self.short_term = {k: ShortTermMemory(short_capacity) for k in PolicyKind}
        self.experience: deque[ExperienceRecord] = deque(maxlen=EXPERIENCE_CAPACITY)
        self.experience_ema: dict[tuple[tuple[int, int], int], float] = {}
        self._low_rounds: dict[PolicyKey, int] = {}
        self._candidates = candidate_configs()
        self._cand_tiles = np.array([c.tile for c in self._candidates])

    # -- precision ---------------------------------------------------------

    @staticmethod
    def precision_key(kappa: float, element_type) -> PolicyKey:
        et = element_type.value if isinstance(element_type, ElementType) else str(element_type)
        return PolicyKey(PolicyKind.PRECISION, kappa_bucket(kappa), et)

    def memory_lookup(self, kappa: float, element_type) -> PrecisionConfig:
        """Precision configuration for an element with condition number ``kappa``."""
        if not (math.isfinite(kappa) and kappa >= 1):
            raise ContractError(f"condition number must be finite and >= 1, got {kappa}")
        key = self.precision_key(kappa, element_type)
        store = self.long_term[PolicyKind.PRECISION]
        rec = store.get(key)
        flagged = kappa >= KAPPA_SOFT_LIMIT
        if rec is None:
            rec = PolicyRecord(default_precision(key.bucket, flagged), pinned=flagged)
            store.put(key, rec)
        else:
            rec.hits += 1
        if flagged and rec.payload != PRECISION_TIERS[2]:
            return PRECISION_TIERS[2]
        return rec.payload

    def record_outcome(self, key: PolicyKey, observed_error: float, observed_cost: float,
                       payload: Any = None) -> None:
        if not (observed_error >= 0 and observed_cost >= 0):
            raise ContractError("error and cost must be nonnegative")
        store = self.long_term[key.kind]
        rec = store.peek(key)
        if rec is None:
            if payload is None:
                if key.kind is not PolicyKind.PRECISION:
                    raise ContractError(f"no record for {key} and no payload given")
                payload = default_precision(key.bucket, key.bucket >= 3)
            rec = PolicyRecord(payload, pinned=key.kind is PolicyKind.PRECISION and key.bucket >= 3)
            store.put(key, rec)
        rec.observe(float(observed_error), float(observed_cost))
        self.short_term[key.kind].append(
            BatchRecord(key, payload if payload is not None else rec.payload,
                        float(observed_error), float(observed_cost))
        )

    def adapt_policy(self) -> list[PolicyChange]:
        """Batch-boundary precision adjustment with a hysteresis band."""
        store = self.long_term[PolicyKind.PRECISION]
        groups: dict[PolicyKey, list[float]] = {}
        for r in self.short_term[PolicyKind.PRECISION]:
            rec = store.peek(r.key)
            if rec is not None and r.payload == rec.payload:
                groups.setdefault(r.key, []).append(r.error)

        changes = []
        for key in sorted(groups, key=lambda k: (k.bucket, k.tag)):
            errs = groups[key]
            if len(errs) < MIN_RECORDS:
                continue
            rec = store.peek(key)
            mean = float(np.mean(errs))
            if not mean <= TAU_HI:
                self._low_rounds[key] = 0
                new = escalate(rec.payload)
                if new == rec.payload:
                    changes.append(PolicyChange(key, rec.payload, new, saturated=True))
                else:
                    changes.append(PolicyChange(key, rec.payload, new))
                    rec.payload = new
            elif mean < TAU_LO:
                n = self._low_rounds.get(key, 0) + 1
                self._low_rounds[key] = n
                if n >= LOW_ROUNDS_TO_RELAX and not rec.pinned:
                    new = deescalate(rec.payload)
                    self._low_rounds[key] = 0
                    if new != rec.payload:
                        changes.append(PolicyChange(key, rec.payload, new))
                        rec.payload = new
            else:
                self._low_rounds[key] = 0
        return changes

    # -- parallelism -------------------------------------------------------

    def parallelism_policy(self, layer_type: str, utilization_history: Sequence = (), *,
                           bucket: int = 0, rng: np.random.Generator | None = None,
                           epsilon: float = 0.0) -> SystolicConfig:
        """Tiling for a layer: best predicted utilization over the recorded workloads.

        ``utilization_history`` holds workload dims (M, V, N, S) or
        UtilizationRecord objects. With no history the stored choice (or the
        4x4x4x4 default) is used. Exploration picks a uniform random candidate
        with probability ``epsilon``.
        """
        if layer_type not in LAYER_TYPES:
            raise ContractError(f"unknown layer type {layer_type!r}")
        key = PolicyKey(PolicyKind.PARALLELISM, bucket, layer_type)
        store = self.long_term[PolicyKind.PARALLELISM]
        dims = [tuple(h.dims) if isinstance(h, UtilizationRecord) else tuple(h) for h in utilization_history]
        if dims:
            best = self._best_tiling(np.array(dims, dtype=np.int64))
            rec = store.get(key)
            if rec is None:
                store.put(key, PolicyRecord(best))
            else:
                rec.payload = best
                rec.hits += 1
        else:
            rec = store.get(key)
            if rec is not None:
                rec.hits += 1
            best = rec.payload if rec is not None else DEFAULT_SYSTOLIC
        if epsilon > 0:
            if rng is None:
                raise ContractError("exploration needs a random generator")
            if rng.random() < epsilon:
                return self._candidates[int(rng.integers(len(self._candidates)))]
        return best

    def _best_tiling(self, dims: np.ndarray) -> SystolicConfig:
        tiles = self._cand_tiles[:, None, :]
        util = predicted_utilization(dims[None, :, :], tiles).mean(axis=1)
        cycles = predicted_cycles(dims[None, :, :], tiles).sum(axis=1)
        spread = np.abs(np.log2(self._cand_tiles) - 2).sum(axis=1)
        # max utilization, then fewest cycles, then closest to the 4x4x4x4 default
        order = np.lexsort((spread, cycles, -np.round(util, 12)))
        return self._candidates[int(order[0])]

    def record_utilization(self, layer_type: str, bucket: int, dims, config: SystolicConfig,
                           utilization: float) -> None:
        key = PolicyKey(PolicyKind.PARALLELISM, bucket, layer_type)
        store = self.long_term[PolicyKind.PARALLELISM]
        rec = store.peek(key)
        if rec is None:
            rec = PolicyRecord(config)
            store.put(key, rec)
        rec.observe(1.0 - utilization, float(np.prod(dims)))
        self.short_term[PolicyKind.PARALLELISM].append(
            UtilizationRecord(key, tuple(int(d) for d in dims), config, float(utilization))
        )

    def utilization_history(self, layer_type: str, bucket: int) -> list[UtilizationRecord]:
        key = PolicyKey(PolicyKind.PARALLELISM, bucket, layer_type)
        return [r for r in self.short_term[PolicyKind.PARALLELISM] if r.key == key]

    # -- bit-width ---------------------------------------------------------

    def predict_bitwidth(self, features: LayerFeatures) -> int:
        """Smallest recorded width whose error EMA is within TAU_BITWIDTH, else 8."""
        if not self.experience_ema:
            return MAX_BITS
        target = feature_class(features)
        classes = sorted({c for c, _ in self.experience_ema})
        nearest = min(classes, key=lambda c: (abs(c[0] - target[0]) + abs(c[1] - target[1]), c))
        ok = [b for (c, b), e in self.experience_ema.items() if c == nearest and e <= TAU_BITWIDTH]
        return min(ok) if ok else MAX_BITS

    def choose_bitwidth(self, features: LayerFeatures, rng: np.random.Generator | None = None,
                        epsilon: float = 0.0) -> int:
        """``predict_bitwidth`` with epsilon-greedy exploration over [1, 8]."""
        b = self.predict_bitwidth(features)
        if epsilon > 0 and rng is not None and rng.random() < epsilon:
            b = int(rng.integers(1, MAX_BITS + 1))
        return b

    def update_experience(self, features: LayerFeatures, b: int, error: float, cost: float) -> None:
        if not 1 <= b <= MAX_BITS:
            raise ContractError(f"bit-width {b} outside [1, {MAX_BITS}]")
        cls = feature_class(features)
        self.experience.append(ExperienceRecord(cls, int(b), float(error), float(cost)))
        k = (cls, int(b))
        prev = self.experience_ema.get(k)
        self.experience_ema[k] = error if prev is None else (1 - EMA_ALPHA) * prev + EMA_ALPHA * error

    # -- sparsity ----------------------------------------------------------

    @staticmethod
    def _sparsity_key(characteristics, kind: PatternKind) -> PolicyKey:
        decile, tercile = characteristics.memory_class
        return PolicyKey(PolicyKind.SPARSITY, tercile, f"d{decile}/{kind.value}")

    def sparsity_store(self, pattern: SparsityPattern, characteristics, accuracy_retention: float,
                       cost: float) -> None:
        """Record a pattern outcome. ``cost`` is normalized (sparse MACs / dense MACs)."""
        if not 0 <= accuracy_retention <= 1:
            raise ContractError(f"retention {accuracy_retention} outside [0, 1]")
        key = self._sparsity_key(characteristics, pattern.kind)
        self.record_outcome(key, 1.0 - accuracy_retention, cost, payload=SparsityPattern(pattern.kind))

    def sparsity_scores(self, characteristics, permitted: Iterable[PatternKind] | None = None) -> dict:
        """Stored score ``retention - lambda * cost`` per pattern kind with a record."""
        store = self.long_term[PolicyKind.SPARSITY]
        kinds = list(PatternKind) if permitted is None else [k for k in PatternKind if k in set(permitted)]
        out = {}
        for kind in kinds:
            rec = store.get(self._sparsity_key(characteristics, kind))
            if rec is not None and rec.error_ema is not None:
                out[kind] = (1.0 - rec.error_ema) - SPARSITY_LAMBDA * rec.cost_ema
        return out

    def sparsity_lookup(self, characteristics, permitted: Iterable[PatternKind] | None = None
                        ) -> SparsityPattern | None:
        scores = self.sparsity_scores(characteristics, permitted)
        if not scores:
            return None
        # PatternKind order puts structured patterns before LEARNED; max keeps the first on ties
        best = max(scores, key=lambda k: scores[k])
        return SparsityPattern(best)

    # -- persistence -------------------------------------------------------

    def snapshot(self) -> dict:
        return {
            "version": 1,
            "long_term": {
                kind.value: {
                    "capacity": store.capacity,
                    "entries": [
                        {"key": key.to_json(), "payload": _payload_to_json(rec.payload),
                         "error_ema": rec.error_ema, "cost_ema": rec.cost_ema,
                         "hits": rec.hits, "pinned": rec.pinned}
                        for key, rec in store.items()
                    ],
                }
                for kind, store in self.long_term.items()
            },
            "short_term": {
                kind.value: [_short_record_to_json(r) for r in buf]
                for kind, buf in self.short_term.items()
            },
            "experience": [
                {"class": list(r.feature_class), "b": r.b, "error": r.error, "cost": r.cost}
                for r in self.experience
            ],
            "experience_ema": [
                {"class": list(c), "b": b, "ema": e} for (c, b), e in sorted(self.experience_ema.items())
            ],
            "low_rounds": [
                {"key": k.to_json(), "rounds": n}
                for k, n in sorted(self._low_rounds.items(), key=lambda kv: (kv[0].bucket, kv[0].tag))
            ],
        }

    @classmethod
    def from_snapshot(cls, snap: dict) -> "AdaptiveMemory":
        if snap.get("version") != 1:
            raise FormatError(f"unsupported memory snapshot version {snap.get('version')!r}")
        lt = snap["long_term"]
        mem = cls(capacity=lt[PolicyKind.PRECISION.value]["capacity"])
        for kind in PolicyKind:
            block = lt[kind.value]
            store = LongTermMemory(block["capacity"])
            for e in block["entries"]:
                store.put(PolicyKey.from_json(e["key"]),
                          PolicyRecord(_payload_from_json(e["payload"]), e["error_ema"], e["cost_ema"],
                                       e["hits"], e["pinned"]))
            mem.long_term[kind] = store
            for r in snap["short_term"][kind.value]:
                mem.short_term[kind].append(_short_record_from_json(r))
        for r in snap["experience"]:
            mem.experience.append(ExperienceRecord(tuple(r["class"]), r["b"], r["error"], r["cost"]))
        for r in snap["experience_ema"]:
            mem.experience_ema[(tuple(r["class"]), r["b"])] = r["ema"]
        for r in snap["low_rounds"]:
            mem._low_rounds[PolicyKey.from_json(r["key"])] = r["rounds"]
        return mem

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.snapshot(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "AdaptiveMemory":
        return cls.from_snapshot(json.loads(Path(path).read_text()))


def _payload_to_json(p) -> dict:
    if isinstance(p, PrecisionConfig):
        return {"precision": p.to_token()}
    if isinstance(p, SystolicConfig):
        return {"systolic": list(p.tile)}
    if isinstance(p, SparsityPattern):
        return {"sparsity": p.kind.value}
    raise ContractError(f"cannot serialize payload {p!r}")


def _payload_from_json(obj: dict):
    if "precision" in obj:
        return PrecisionConfig.parse(obj["precision"])
    if "systolic" in obj:
        return SystolicConfig(*obj["systolic"])
    if "sparsity" in obj:
        return SparsityPattern(PatternKind(obj["sparsity"]))
    raise FormatError(f"unknown payload {obj!r}")


def _short_record_to_json(r) -> dict:
    if isinstance(r, UtilizationRecord):
        return {"key": r.key.to_json(), "dims": list(r.dims), "config": list(r.config.tile),
                "utilization": r.utilization}
    return {"key": r.key.to_json(), "payload": _payload_to_json(r.payload), "error": r.error, "cost": r.cost}


def _short_record_from_json(obj: dict):
    key = PolicyKey.from_json(obj["key"])
    if "dims" in obj:
        return UtilizationRecord(key, tuple(obj["dims"]), SystolicConfig(*obj["config"]), obj["utilization"])
    return BatchRecord(key, _payload_from_json(obj["payload"]), obj["error"], obj["cost"])
