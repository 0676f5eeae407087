"""Load cases and meshes for the bundled design experiments.

Element edges are 1 m, plane-stress thickness 1 m, forces in N.

- ``tensile-bar``: 80 x 20, left edge clamped, horizontal pull at the
  right-edge midpoint.
- ``bending-beam``: 40 x 20, left edge clamped, moment at the right-edge
  midpoint as an equal and opposite horizontal force pair on the two nodes
  adjacent to the midpoint (lever arm 2 m).
- ``multi-load``: 40 x 40, left edge clamped, two separate load cases at the
  right-edge midpoint (horizontal ``f1``, downward ``f2``); the objective is
  the summed compliance.
- ``prosthesis``: a curved stem mesh of 2032 quads standing in for an
  implant, clamped at the top, with two side compressions and a bottom
  shear as three load cases.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from . import fem

TARGET_VOLUME = 0.3


def _clamp_left(mesh: fem.QuadMesh) -> np.ndarray:
    nelx, nely = mesh.grid
    nodes = [fem.grid_node(mesh, 0, iy) for iy in range(nely + 1)]
    return np.array([[2 * n, 2 * n + 1] for n in nodes]).ravel()


def _with(mesh: fem.QuadMesh, fixed, loads, name) -> fem.QuadMesh:
    return fem.QuadMesh(mesh.nodes, mesh.elements, fixed, loads, grid=mesh.grid, name=name)


def tensile_bar(force: float = 5e5, nelx: int = 80, nely: int = 20) -> fem.QuadMesh:
    m = fem.rectangular_mesh(nelx, nely)
    F = np.zeros((1, m.n_dofs))
    F[0, 2 * fem.grid_node(m, nelx, nely // 2)] = force
    return _with(m, _clamp_left(m), F, "tensile-bar")


def bending_beam(moment: float = 1e6, nelx: int = 40, nely: int = 20, lever: int = 2) -> fem.QuadMesh:
    if lever % 2 or lever <= 0:
        raise ValueError("lever arm must be a positive even number of elements")
    m = fem.rectangular_mesh(nelx, nely)
    F = np.zeros((1, m.n_dofs))
    mid = nely // 2
    f = moment / lever
    F[0, 2 * fem.grid_node(m, nelx, mid + lever // 2)] = f
    F[0, 2 * fem.grid_node(m, nelx, mid - lever // 2)] = -f
    return _with(m, _clamp_left(m), F, "bending-beam")


MULTI_LOAD_CASES = {
    "tension": (5e6, 1e5),
    "bending": (0.5e5, 1e5),
}


def multi_load(f1: float, f2: float, nelx: int = 40, nely: int = 40, name: str = "multi-load") -> fem.QuadMesh:
    m = fem.rectangular_mesh(nelx, nely)
    F = np.zeros((2, m.n_dofs))
    n = fem.grid_node(m, nelx, nely // 2)
    F[0, 2 * n] = f1
    F[1, 2 * n + 1] = -f2
    return _with(m, _clamp_left(m), F, name)


def prosthesis_mesh(n_along: int = 127, n_across: int = 16, force: float = 1e5) -> fem.QuadMesh:
    """Curved tapered stem; element count ``n_along * n_across`` (2032 by default)."""
    s = np.linspace(0.0, 1.0, n_along + 1)
    u = np.linspace(-0.5, 0.5, n_across + 1)
    # centreline: a gentle arc from the neck (top) to the distal tip
    length, bend = 120.0, 0.5
    theta = bend * s
    radius = length / bend
    cx = radius * (1.0 - np.cos(theta))
    cy = length - radius * np.sin(theta)
    nx, ny = np.cos(theta), -np.sin(theta)  # unit normal pointing to the +x side
    width = 22.0 - 12.0 * s
    X = cx[:, None] + u[None, :] * width[:, None] * nx[:, None]
    Y = cy[:, None] + u[None, :] * width[:, None] * ny[:, None]
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    nid = np.arange(len(nodes)).reshape(n_along + 1, n_across + 1)
    a, b = np.meshgrid(np.arange(n_along), np.arange(n_across), indexing="ij")
    # counterclockwise for the downward-running centreline
    elements = np.stack([nid[a + 1, b], nid[a + 1, b + 1], nid[a, b + 1], nid[a, b]], axis=-1).reshape(-1, 4)
    fixed = np.concatenate([[2 * n, 2 * n + 1] for n in nid[0]])
    F = np.zeros((3, 2 * len(nodes)))
    i1, i2 = int(0.35 * n_along), int(0.65 * n_along)
    left, right = nid[i1, 0], nid[i2, -1]
    F[0, 2 * left : 2 * left + 2] = force * np.array([nx[i1], ny[i1]])  # push inward from the -x side
    F[1, 2 * right : 2 * right + 2] = -force * np.array([nx[i2], ny[i2]])  # push inward from the +x side
    tip = nid[-1, n_across // 2]
    F[2, 2 * tip : 2 * tip + 2] = force * np.array([nx[-1], ny[-1]])  # shear across the distal face
    return fem.QuadMesh(nodes, elements, fixed, F, name="prosthesis")


def default_prosthesis_path() -> Path:
    return Path(__file__).parent / "data" / "prosthesis_mesh.json"


PRESETS = {
    "tensile-bar": lambda: tensile_bar(),
    "bending-beam": lambda: bending_beam(),
    "multi-load-tension": lambda: multi_load(*MULTI_LOAD_CASES["tension"], name="multi-load-tension"),
    "multi-load-bending": lambda: multi_load(*MULTI_LOAD_CASES["bending"], name="multi-load-bending"),
    "prosthesis": lambda: fem.QuadMesh.load(default_prosthesis_path()),
}


def preset_mesh(name: str) -> fem.QuadMesh:
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def mesh_summary(mesh: fem.QuadMesh) -> dict:
    lo, hi = mesh.nodes.min(axis=0), mesh.nodes.max(axis=0)
    return {"elements": mesh.n_elements, "nodes": mesh.n_nodes, "load_cases": len(mesh.loads),
            "bbox": [float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])],
            "aspect": float((hi[0] - lo[0]) / max(hi[1] - lo[1], 1e-300)) if math.isfinite(hi[1]) else None}
