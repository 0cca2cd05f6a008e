"""Stage 1: mixed-precision element assembly for the Poisson stiffness form.

The element matrix is ``A = sum_s sum_t B_s C_st B_t^T`` with B_s the
reference basis gradients at quadrature point s and C_st the geometry
tensor. For quadrature-based Poisson assembly C_st vanishes off the
diagonal, so only the (s, s) pairs contribute.

All kernels work on batches of same-type elements (leading axis E) so a
whole batch is rounded in one numpy pass per elementary operation.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from .errors import ContractError, FormatError, GeometryError, MeshParseError, MeshValidationError
from .precision import PrecisionConfig, PrecisionLevel, mac_in, round_to

KAPPA_SOFT_LIMIT = 1000.0


class ElementType(enum.Enum):
    TRI3 = "tri3"
    TET4 = "tet4"
    HEX8 = "hex8"

    @property
    def dim(self) -> int:
        return 2 if self is ElementType.TRI3 else 3

    @property
    def n_nodes(self) -> int:
        return {"tri3": 3, "tet4": 4, "hex8": 8}[self.value]

    @property
    def n_quad(self) -> int:
        return {"tri3": 3, "tet4": 4, "hex8": 8}[self.value]


_HEX_CORNERS = np.array(
    [[-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
     [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1]],
    dtype=np.float64,
)


def reference_nodes(etype: ElementType) -> np.ndarray:
    if etype is ElementType.TRI3:
        return np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    if etype is ElementType.TET4:
        return np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    return _HEX_CORNERS.copy()


def quadrature(etype: ElementType) -> tuple[np.ndarray, np.ndarray]:
    """Points and weights on the reference element."""
    if etype is ElementType.TRI3:
        pts = np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]])
        return pts, np.full(3, 1 / 6)
    if etype is ElementType.TET4:
        a = (5 + 3 * np.sqrt(5)) / 20
        b = (5 - np.sqrt(5)) / 20
        pts = np.array([[b, b, b], [a, b, b], [b, a, b], [b, b, a]])
        return pts, np.full(4, 1 / 24)
    g = 1 / np.sqrt(3)
    pts = np.array([[x, y, z] for z in (-g, g) for y in (-g, g) for x in (-g, g)])
    return pts, np.ones(8)


def _reference_gradients(etype: ElementType) -> np.ndarray:
    """fp64 basis gradients, shape (n_q, n_b, dim)."""
    pts, _ = quadrature(etype)
    if etype is ElementType.TRI3:
        g = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
        return np.broadcast_to(g, (3, 3, 2)).copy()
    if etype is ElementType.TET4:
        g = np.array([[-1.0, -1, -1], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
        return np.broadcast_to(g, (4, 4, 3)).copy()
    out = np.empty((8, 8, 3))
    for s, (x, y, z) in enumerate(pts):
        for i, (xi, yi, zi) in enumerate(_HEX_CORNERS):
            fx, fy, fz = 1 + xi * x, 1 + yi * y, 1 + zi * z
            out[s, i] = (xi * fy * fz / 8, yi * fx * fz / 8, zi * fx * fy / 8)
    return out


@lru_cache(maxsize=None)
def _tabulated(etype: ElementType, level: PrecisionLevel) -> np.ndarray:
    b = round_to(_reference_gradients(etype), level)
    b.setflags(write=False)
    return b


def tabulate_basis(etype: ElementType, u_p: PrecisionLevel) -> np.ndarray:
    """Reference basis gradients at each quadrature point, rounded to ``u_p``.

    Returns a read-only array of shape (n_q, n_b, dim), cached per
    (element type, level).
    """
    return _tabulated(etype, u_p)


# ---------------------------------------------------------------------------
# Mesh


@dataclass(frozen=True)
class Element:
    id: int
    type: ElementType
    nodes: tuple[int, ...]
    coeff: float = 1.0


@dataclass
class Mesh:
    nodes: np.ndarray
    elements: list[Element]
    boundary_conditions: list[tuple[int, float]] = field(default_factory=list)
    default_coeff: float = 1.0

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    def element_coords(self, element: Element) -> np.ndarray:
        return self.nodes[list(element.nodes)]

    def to_json(self) -> dict:
        return {
            "nodes": self.nodes.tolist(),
            "elements": [
                {"type": e.type.value, "nodes": list(e.nodes), "coeff": e.coeff}
                for e in self.elements
            ],
            "boundary_conditions": [{"node": n, "value": v} for n, v in self.boundary_conditions],
            "material_properties": {"default_coeff": self.default_coeff},
        }


MESH_SCHEMA = {
    "type": "object",
    "required": ["nodes", "elements"],
    "properties": {
        "nodes": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "array", "minItems": 2, "maxItems": 3, "items": {"type": "number"}},
        },
        "elements": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["type", "nodes"],
                "properties": {
                    "type": {"enum": [t.value for t in ElementType]},
                    "nodes": {"type": "array", "items": {"type": "integer"}},
                    "coeff": {"type": "number"},
                },
            },
        },
        "boundary_conditions": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["node", "value"],
                "properties": {"node": {"type": "integer"}, "value": {"type": "number"}},
            },
        },
        "material_properties": {
            "type": "object",
            "properties": {"default_coeff": {"type": "number"}},
        },
    },
}


def parse_mesh(document: str | bytes | dict) -> Mesh:
    """Parse and validate a mesh JSON document.

    Raises MeshParseError (with a JSONPath-style ``path``) on schema problems,
    MeshValidationError on bad indices/counts and GeometryError on inverted or
    degenerate elements.
    """
    if isinstance(document, dict):
        doc = document
    else:
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as exc:
            raise MeshParseError("$", f"invalid JSON ({exc.msg} at line {exc.lineno})") from exc

    errors = sorted(
        jsonschema.Draft202012Validator(MESH_SCHEMA).iter_errors(doc),
        key=lambda e: list(e.absolute_path),
    )
    if errors:
        err = errors[0]
        path = err.json_path
        if err.validator == "required":
            missing = next(p for p in err.validator_value if p not in err.instance)
            path = f"{path}.{missing}"
        raise MeshParseError(path, err.message)

    nodes = doc["nodes"]
    dim = len(nodes[0])
    if any(len(n) != dim for n in nodes):
        raise MeshValidationError("all nodes must have the same number of coordinates")
    coords = np.asarray(nodes, dtype=np.float64)
    default_coeff = float(doc.get("material_properties", {}).get("default_coeff", 1.0))

    elements = []
    for i, e in enumerate(doc["elements"]):
        etype = ElementType(e["type"])
        idx = tuple(e["nodes"])
        if len(idx) != etype.n_nodes:
            raise MeshValidationError(
                f"element {i}: {etype.value} needs {etype.n_nodes} nodes, got {len(idx)}"
            )
        if etype.dim != dim:
            raise MeshValidationError(f"element {i}: {etype.value} requires {etype.dim}D nodes, mesh is {dim}D")
        bad = [j for j in idx if not 0 <= j < len(coords)]
        if bad:
            raise MeshValidationError(f"element {i}: node index {bad[0]} out of range [0, {len(coords)})")
        elements.append(Element(i, etype, idx, float(e.get("coeff", default_coeff))))

    bcs = []
    for k, bc in enumerate(doc.get("boundary_conditions", [])):
        if not 0 <= bc["node"] < len(coords):
            raise MeshValidationError(f"boundary condition {k}: node {bc['node']} out of range")
        bcs.append((int(bc["node"]), float(bc["value"])))

    mesh = Mesh(coords, elements, bcs, default_coeff)
    for el in elements:
        det = jacobian_determinants(mesh.element_coords(el), el.type)
        if not np.all(det > 0):
            raise GeometryError(el.id, f"nonpositive Jacobian determinant (min {det.min():.3g})")
    return mesh


def load_mesh(path: str | Path) -> Mesh:
    return parse_mesh(Path(path).read_text())


# ---------------------------------------------------------------------------
# Geometry


def jacobians(coords: np.ndarray, etype: ElementType) -> np.ndarray:
    """fp64 Jacobians dx/dxi at every quadrature point, shape (n_q, dim, dim)."""
    grads = _reference_gradients(etype)
    return np.einsum("ia,sib->sab", coords, grads)


def jacobian_determinants(coords: np.ndarray, etype: ElementType) -> np.ndarray:
    return np.linalg.det(jacobians(coords, etype))


def condition_number(coords: np.ndarray, etype: ElementType, element_id: int = -1) -> float:
    """sigma_max / sigma_min of the element Jacobian (quadrature mean for HEX8)."""
    J = jacobians(np.asarray(coords, dtype=np.float64), etype).mean(axis=0)
    sv = np.linalg.svd(J, compute_uv=False)
    if not np.all(np.isfinite(sv)) or sv[-1] <= 0 or sv[-1] <= sv[0] * np.finfo(float).eps:
        raise GeometryError(element_id, "singular Jacobian")
    return float(sv[0] / sv[-1])


def _ops(level: PrecisionLevel, fused: bool):
    """Rounded multiply, add and MAC closures at ``level``."""

    def rnd(x):
        return round_to(x, level)

    def mac(acc, a, b):
        if fused:
            return mac_in(a, b, acc, level, fused=True)
        return rnd(acc + rnd(a * b))

    return rnd, mac


def _geometry_batch(coords, etype, u_m, coeffs, fused=False, strict=True):
    """Geometry tensors for E same-type elements.

    coords: (E, n_b, dim); coeffs: (E,). Returns (C (E, n_q, dim, dim),
    detJ (E, n_q), op count per element). With ``strict`` off, a Jacobian
    that turns singular or inverted at ``u_m`` is carried through instead of
    raising, so its element simply comes out wrong (or non-finite).
    """
    if strict:
        return _geometry_core(coords, etype, u_m, coeffs, fused, strict)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        return _geometry_core(coords, etype, u_m, coeffs, fused, strict)


def _geometry_core(coords, etype, u_m, coeffs, fused, strict):
    rnd, mac = _ops(u_m, fused)
    dim = etype.dim
    E = coords.shape[0]
    X = rnd(coords)
    G = tabulate_basis(etype, u_m)
    _, w = quadrature(etype)
    w = rnd(w)
    nq, nb = G.shape[0], G.shape[1]

    J = np.zeros((E, nq, dim, dim))
    for i in range(nb):
        J = mac(J, X[:, None, i, :, None], G[None, :, i, None, :])

    if dim == 2:
        cof = np.empty_like(J)
        cof[..., 0, 0] = J[..., 1, 1]
        cof[..., 0, 1] = -J[..., 1, 0]
        cof[..., 1, 0] = -J[..., 0, 1]
        cof[..., 1, 1] = J[..., 0, 0]
        det = rnd(rnd(J[..., 0, 0] * J[..., 1, 1]) - rnd(J[..., 0, 1] * J[..., 1, 0]))
        det_ops = 2
    else:
        cof = np.empty_like(J)
        for a in range(3):
            a1, a2 = (a + 1) % 3, (a + 2) % 3
            for b in range(3):
                b1, b2 = (b + 1) % 3, (b + 2) % 3
                cof[..., a, b] = rnd(rnd(J[..., a1, b1] * J[..., a2, b2])
                                     - rnd(J[..., a1, b2] * J[..., a2, b1]))
        det = np.zeros(J.shape[:-2])
        for b in range(3):
            det = mac(det, J[..., 0, b], cof[..., 0, b])
        det_ops = 18 + 3
    if strict and (np.any(det <= 0) or not np.all(np.isfinite(det))):
        bad = int(np.argwhere(~(det > 0) | ~np.isfinite(det))[0][0])
        raise GeometryError(bad, f"singular or inverted Jacobian at precision {u_m}")

    inv = rnd(np.swapaxes(cof, -1, -2) / det[..., None, None])
    K = np.zeros_like(J)
    for c in range(dim):
        K = mac(K, inv[..., :, None, c], inv[..., None, :, c])
    scale = rnd(rnd(w[None, :] * det) * rnd(coeffs)[:, None])
    C = rnd(scale[..., None, None] * K)
    ops = nq * (nb * dim * dim + det_ops + dim * dim + dim ** 3 + 2 + dim * dim)
    return C, det, ops


def geometry_tensor(coords, etype: ElementType, u_m: PrecisionLevel, coeff: float = 1.0,
                    fused: bool = False) -> np.ndarray:
    """Per-quadrature-point ``w * detJ * coeff * J^-1 J^-T`` computed at ``u_m``."""
    C, _, _ = _geometry_batch(np.asarray(coords, dtype=np.float64)[None], etype, u_m,
                              np.array([coeff], dtype=np.float64), fused)
    return C[0]


def _quadrature_couplings(nq: int) -> list[tuple[int, int]]:
    # C_st is zero for s != t in this bilinear form.
    return [(s, t) for s in range(nq) for t in range(nq) if s == t]


def _assemble_batch(B, C, u_q, u_s, symmetric=True, fused=False):
    """B: (n_q, n_b, dim); C: (E, n_q, dim, dim). Returns (A (E, n_b, n_b), macs)."""
    rnd, mac = _ops(u_q, fused)
    B = rnd(B)
    C = rnd(C)
    E = C.shape[0]
    nq, nb, dim = B.shape
    A = np.zeros((E, nb, nb))
    macs = 0
    for s, t in _quadrature_couplings(nq):
        T = np.zeros((E, nb, dim))
        for a in range(dim):
            T = mac(T, B[None, s, :, a, None], C[:, s, None, a, :])
        macs += nb * dim * dim
        for b in range(dim):
            A = mac(A, T[:, :, None, b], B[None, None, t, :, b])
        macs += dim * (nb * (nb + 1) // 2 if symmetric else nb * nb)
    if symmetric:
        upper = np.triu(A)
        A = upper + np.swapaxes(np.triu(A, 1), -1, -2)
    return round_to(A, u_s), macs


@dataclass
class ElementMatrix:
    element_id: int
    A: np.ndarray
    kappa: float
    config: PrecisionConfig
    macs: int = 0
    geometry_ops: int = 0

    @property
    def flagged(self) -> bool:
        return self.kappa >= KAPPA_SOFT_LIMIT


def assemble_element(B, C, u_q: PrecisionLevel, u_s: PrecisionLevel, *, symmetric: bool = True,
                     fused: bool = False) -> tuple[np.ndarray, int]:
    """Assemble one element matrix from tabulated gradients and geometry.

    ``B`` is (n_q, n_b, dim), ``C`` is (n_q, dim, dim). Returns the matrix and
    the number of MACs executed at ``u_q``.
    """
    B = np.asarray(B, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    if B.ndim != 3 or C.ndim != 3 or C.shape[0] != B.shape[0] or C.shape[1:] != (B.shape[2], B.shape[2]):
        raise ContractError(f"shape mismatch: B {B.shape} vs C {C.shape}")
    A, macs = _assemble_batch(B, C[None], u_q, u_s, symmetric, fused)
    return A[0], macs


def assemble_batch(coords: np.ndarray, etype: ElementType, config: PrecisionConfig,
                   coeffs: np.ndarray, *, symmetric: bool = True, fused: bool = False,
                   strict: bool = True):
    """Assemble E same-type elements under one configuration.

    Returns (A (E, n_b, n_b), macs per element at u_q, geometry ops per element at u_m).
    ``strict=False`` lets elements whose Jacobian degenerates at u_m through
    (see ``_geometry_batch``).
    """
    coords = np.asarray(coords, dtype=np.float64)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coords.ndim != 3 or coords.shape[1:] != (etype.n_nodes, etype.dim):
        raise ContractError(f"coords shape {coords.shape} does not fit {etype.value}")
    if len(coords) == 0:
        nb = etype.n_nodes
        return np.zeros((0, nb, nb)), 0, 0
    B = tabulate_basis(etype, config.u_p)
    C, _, gops = _geometry_batch(coords, etype, config.u_m, coeffs, fused, strict)
    with np.errstate(invalid="ignore", over="ignore"):
        A, macs = _assemble_batch(B, C, config.u_q, config.u_s, symmetric, fused)
    return A, macs, gops


FP64_CONFIG = PrecisionConfig.uniform(PrecisionLevel.FP64)


def reference_assembly(coords, etype: ElementType, coeff: float = 1.0, *,
                       symmetric: bool = True) -> np.ndarray:
    """All-fp64 element matrix; the ground truth for error measurement."""
    A, _, _ = assemble_batch(np.asarray(coords)[None], etype, FP64_CONFIG, [coeff], symmetric=symmetric)
    return A[0]


def element_l2_error(A, A_ref) -> float:
    """Relative Frobenius error ``||A - A_ref|| / ||A_ref||``."""
    A = np.asarray(A, dtype=np.float64)
    A_ref = np.asarray(A_ref, dtype=np.float64)
    if A.shape != A_ref.shape:
        raise ContractError(f"shape mismatch: {A.shape} vs {A_ref.shape}")
    ref = np.linalg.norm(A_ref)
    with np.errstate(invalid="ignore", over="ignore"):
        diff = np.linalg.norm(A - A_ref)
    if ref == 0:
        return 0.0 if diff == 0 else float("inf")
    if np.isnan(diff):
        return float("inf")
    return float(diff / ref)


# ---------------------------------------------------------------------------
# Stage-1 tensor artifact: raw little-endian array + JSON sidecar


def write_stage1(prefix: str | Path, matrices: np.ndarray, per_element: Sequence[dict]) -> tuple[Path, Path]:
    """Write ``prefix.bin`` and ``prefix.json``.

    Uses fp32 when every value is exactly representable there, else fp64.
    """
    prefix = Path(prefix)
    matrices = np.asarray(matrices, dtype=np.float64)
    as32 = matrices.astype("<f4")
    dtype = "float32" if np.array_equal(as32.astype(np.float64), matrices, equal_nan=True) else "float64"
    data = as32 if dtype == "float32" else matrices.astype("<f8")
    bin_path = prefix.with_suffix(".bin")
    json_path = prefix.with_suffix(".json")
    bin_path.write_bytes(data.tobytes())
    sidecar = {
        "shape": list(matrices.shape),
        "dtype": dtype,
        "data": bin_path.name,
        "per_element": list(per_element),
    }
    json_path.write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    return bin_path, json_path


def read_stage1(json_path: str | Path) -> tuple[np.ndarray, dict]:
    json_path = Path(json_path)
    sidecar = json.loads(json_path.read_text())
    try:
        dt = {"float32": "<f4", "float64": "<f8"}[sidecar["dtype"]]
    except KeyError:
        raise FormatError(f"unsupported stage-1 dtype {sidecar.get('dtype')!r}") from None
    raw = (json_path.parent / sidecar["data"]).read_bytes()
    shape = tuple(sidecar["shape"])
    arr = np.frombuffer(raw, dtype=dt)
    if arr.size != int(np.prod(shape)):
        raise FormatError(f"stage-1 payload has {arr.size} values, sidecar says {shape}")
    return arr.reshape(shape).astype(np.float64), sidecar
