"""Seeded generators: conditioned meshes, a heterogeneous layer suite and sparse tensor suites."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.stats import special_ortho_group

from .errors import ContractError
from .fem import ElementType, Mesh, condition_number, parse_mesh, reference_nodes
from .snn import LayerSpec, random_weights

KAPPA_TOLERANCE = 0.05


def _rotation(rng: np.random.Generator, dim: int) -> np.ndarray:
    return special_ortho_group.rvs(dim, random_state=rng)


def conditioned_map(kappa: float, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Affine map with unit determinant and singular-value ratio ``kappa``."""
    root = np.sqrt(kappa)
    sigma = np.array([root, 1 / root]) if dim == 2 else np.array([root, 1.0, 1 / root])
    return _rotation(rng, dim) @ np.diag(sigma) @ _rotation(rng, dim).T


def generate_synthetic_mesh(n_elements: int, kappa_min: float, kappa_max: float,
                            element_type: ElementType | str = ElementType.TET4, seed: int = 0):
    """Disconnected elements whose Jacobian condition numbers are log-uniform in the range.

    Returns (mesh document dict, achieved kappas). The document records
    target and achieved kappas under ``metadata``.
    """
    etype = ElementType(element_type)
    if n_elements < 1:
        raise ContractError("need at least one element")
    if not (1 <= kappa_min <= kappa_max and np.isfinite(kappa_max)):
        raise ContractError(f"invalid condition-number range [{kappa_min}, {kappa_max}]")
    rng = np.random.default_rng(seed)
    ref = reference_nodes(etype)
    targets = np.exp(rng.uniform(np.log(kappa_min), np.log(kappa_max), n_elements))
    nodes, elements, achieved = [], [], []
    for k, target in enumerate(targets):
        if kappa_min == kappa_max == 1:
            J = np.eye(etype.dim)
        else:
            J = conditioned_map(target, etype.dim, rng)
        shift = rng.uniform(-10, 10, etype.dim)
        coords = ref @ J.T + shift
        kappa = condition_number(coords, etype, k)
        if abs(kappa - target) > KAPPA_TOLERANCE * target:
            raise ContractError(f"element {k}: achieved kappa {kappa:.4g} misses target {target:.4g}")
        base = len(nodes)
        nodes.extend(coords.tolist())
        elements.append({"type": etype.value, "nodes": list(range(base, base + etype.n_nodes))})
        achieved.append(kappa)
    doc = {
        "nodes": nodes,
        "elements": elements,
        "material_properties": {"default_coeff": 1.0},
        "metadata": {"seed": seed, "kappa_target": targets.tolist(), "kappa_achieved": achieved},
    }
    return doc, np.array(achieved)


def write_mesh(path: str | Path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def bundled_mesh_path() -> Path:
    return Path(str(resources.files("mgua") / "data" / "two_triangles.json"))


def bundled_mesh() -> Mesh:
    return parse_mesh(bundled_mesh_path().read_text())


# ---------------------------------------------------------------------------
# Layer suite for the parallelism A/B

SUITE_CHANNELS = (2, 3, 6, 7, 12, 64)
SUITE_TYPES = ("conv", "depthwise", "pointwise", "linear", "residual", "readout")
SUITE_INPUT = (16, 16, 8)  # (V, N, S)


def heterogeneous_layer_suite(seed: int = 0, weight_bits: int = 4):
    """(input tensor, chained layers) with output channels 2, 3, 6, 7, 12, 64."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=SUITE_INPUT)
    layers, in_ch = [], SUITE_INPUT[0]
    for lt, out_ch in zip(SUITE_TYPES, SUITE_CHANNELS):
        layers.append(LayerSpec(lt, random_weights(rng, out_ch, in_ch, weight_bits), weight_bits))
        in_ch = out_ch
    return x, layers


# ---------------------------------------------------------------------------
# Sparse tensor suites

IRREGULAR_COUNT_PROBS = (0.45, 0.10, 0.10, 0.10, 0.25)  # P(nonzeros per group = 0..4)


def _with_group_counts(rng, counts: np.ndarray, rows: int, cols: int) -> np.ndarray:
    groups = counts.size
    vals = rng.normal(size=(groups, 4))
    order = np.argsort(rng.random((groups, 4)), axis=1)
    mask = np.zeros((groups, 4), dtype=bool)
    np.put_along_axis(mask, order, np.arange(4)[None, :] < counts[:, None], axis=1)
    return np.where(mask, vals, 0.0).reshape(rows, cols)


def irregular_tensor_suite(n: int = 60, rows: int = 16, cols: int = 32, seed: int = 0) -> list[np.ndarray]:
    """Tensors whose per-group nonzero counts swing between empty and full groups."""
    if cols % 4:
        raise ContractError("cols must be a multiple of 4")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        counts = rng.choice(5, size=rows * cols // 4, p=IRREGULAR_COUNT_PROBS)
        out.append(_with_group_counts(rng, counts, rows, cols))
    return out


def structured_tensor_suite(n: int = 40, rows: int = 16, cols: int = 32, seed: int = 1) -> list[np.ndarray]:
    """2:4-conforming tensors (exactly two nonzeros per group)."""
    rng = np.random.default_rng(seed)
    return [_with_group_counts(rng, np.full(rows * cols // 4, 2), rows, cols) for _ in range(n)]
