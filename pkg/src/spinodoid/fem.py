"""Plane-stress linear elasticity on bilinear quadrilaterals.

Voigt order is (11, 22, 12) with engineering shear strain, unit thickness.
Covers element stiffness (2x2 Gauss), sparse assembly and solve, periodic
homogenization of pixel microstructures by mutual element energies, tensor
rotation and symmetry reduction, and the relative RMS error between constant
vectors.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .generation import SpinodoidClass

__all__ = [
    "BaseMaterial",
    "QuadMesh",
    "SolverError",
    "plane_stress",
    "rectangular_mesh",
    "element_kinematics",
    "element_stiffness",
    "element_stiffnesses",
    "assemble",
    "solve",
    "homogenize",
    "rotation_matrix",
    "rotate_tensor",
    "mandel",
    "reduce_constants",
    "expand_constants",
    "constant_names",
    "directional_modulus",
    "voigt_reuss_bounds",
    "rrmse",
    "write_tensor_csv",
    "read_tensor_csv",
]

VOID_RATIO = 1e-6
MESH_SCHEMA = "spinodoid.quadmesh/1"

_G = 1.0 / math.sqrt(3.0)
# natural coordinates of the 4 Gauss points and the 4 nodes (counterclockwise)
GAUSS_POINTS = np.array([[-_G, -_G], [_G, -_G], [_G, _G], [-_G, _G]])
_NODE_SIGNS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


class SolverError(RuntimeError):
    """Raised when an equilibrium system cannot be solved reliably."""


@dataclass(frozen=True)
class BaseMaterial:
    E: float = 1.0e9
    nu: float = 0.35

    def __post_init__(self):
        if not self.E > 0:
            raise ValueError("Young's modulus must be positive")
        if not -1.0 < self.nu < 0.5:
            raise ValueError("Poisson's ratio must lie in (-1, 0.5)")

    @property
    def C(self) -> np.ndarray:
        return plane_stress(self.E, self.nu)


def plane_stress(E: float, nu: float) -> np.ndarray:
    f = E / (1.0 - nu**2)
    return f * np.array([[1.0, nu, 0.0], [nu, 1.0, 0.0], [0.0, 0.0, 0.5 * (1.0 - nu)]])


# --------------------------------------------------------------------------
# meshes


@dataclass
class QuadMesh:
    """Nodes, counterclockwise quads, fixed DOFs and nodal load cases.

    DOF ``2*i`` is the x displacement of node ``i`` and ``2*i + 1`` the y
    displacement. ``loads`` has shape ``(n_cases, 2 * n_nodes)``. ``grid``
    is ``(nelx, nely)`` for structured meshes whose element ``e`` sits at
    column ``e % nelx`` and row ``e // nelx`` (row 0 at the bottom).
    """

    nodes: np.ndarray
    elements: np.ndarray
    fixed_dofs: np.ndarray
    loads: np.ndarray
    grid: tuple[int, int] | None = None
    name: str = ""
    _kin: tuple | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float).reshape(-1, 2)
        self.elements = np.asarray(self.elements, dtype=np.int64).reshape(-1, 4)
        self.fixed_dofs = np.unique(np.asarray(self.fixed_dofs, dtype=np.int64))
        loads = np.asarray(self.loads, dtype=float)
        if loads.ndim == 1:
            loads = loads[None, :]
        self.loads = loads
        if self.grid is not None:
            self.grid = (int(self.grid[0]), int(self.grid[1]))
        n = self.n_dofs
        if self.loads.shape[1] != n:
            raise ValueError(f"loads have {self.loads.shape[1]} columns, expected {n}")
        if self.elements.size and (self.elements.min() < 0 or self.elements.max() >= len(self.nodes)):
            raise ValueError("element connectivity references missing nodes")
        if self.fixed_dofs.size and (self.fixed_dofs.min() < 0 or self.fixed_dofs.max() >= n):
            raise ValueError("fixed DOF index out of range")
        if self.grid is not None and self.grid[0] * self.grid[1] != len(self.elements):
            raise ValueError("grid shape does not match the element count")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_dofs(self) -> int:
        return 2 * len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def edofs(self) -> np.ndarray:
        e = self.elements
        return np.stack([2 * e, 2 * e + 1], axis=-1).reshape(-1, 8)

    @property
    def free_dofs(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n_dofs), self.fixed_dofs)

    def kinematics(self) -> tuple[np.ndarray, np.ndarray]:
        if self._kin is None:
            self._kin = element_kinematics(self.nodes[self.elements])
        return self._kin

    def centroids(self) -> np.ndarray:
        return self.nodes[self.elements].mean(axis=1)

    def areas(self) -> np.ndarray:
        return self.kinematics()[1].sum(axis=1)

    def normalized_centroids(self) -> np.ndarray:
        """Centroids with each bounding-box axis mapped to [0, 1]."""
        c = self.centroids()
        lo = self.nodes.min(axis=0)
        span = self.nodes.max(axis=0) - lo
        span[span == 0] = 1.0
        return (c - lo) / span

    def to_dict(self) -> dict:
        cases = []
        for f in self.loads:
            fx, fy = f[0::2], f[1::2]
            idx = np.nonzero((fx != 0) | (fy != 0))[0]
            cases.append([[int(i), float(fx[i]), float(fy[i])] for i in idx])
        out = {
            "schema": MESH_SCHEMA,
            "name": self.name,
            "nodes": self.nodes.tolist(),
            "elements": self.elements.tolist(),
            "fixed_dofs": self.fixed_dofs.tolist(),
            "load_cases": cases,
        }
        if self.grid is not None:
            out["grid"] = list(self.grid)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "QuadMesh":
        if d.get("schema", MESH_SCHEMA) != MESH_SCHEMA:
            raise ValueError(f"unsupported mesh schema {d.get('schema')!r}")
        nodes = np.asarray(d["nodes"], dtype=float)
        loads = np.zeros((max(1, len(d["load_cases"])), 2 * len(nodes)))
        for c, case in enumerate(d["load_cases"]):
            for node, fx, fy in case:
                loads[c, 2 * int(node)] += fx
                loads[c, 2 * int(node) + 1] += fy
        grid = tuple(d["grid"]) if d.get("grid") else None
        return cls(nodes, d["elements"], d["fixed_dofs"], loads, grid=grid, name=d.get("name", ""))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "QuadMesh":
        return cls.from_dict(json.loads(Path(path).read_text()))


def rectangular_mesh(nelx: int, nely: int, h: float = 1.0) -> QuadMesh:
    """Structured ``nelx x nely`` grid of square elements of size ``h``; no BCs or loads."""
    xs, ys = np.meshgrid(np.arange(nelx + 1) * h, np.arange(nely + 1) * h)
    nodes = np.column_stack([xs.ravel(), ys.ravel()])
    iy, ix = np.divmod(np.arange(nelx * nely), nelx)
    n0 = iy * (nelx + 1) + ix
    elements = np.column_stack([n0, n0 + 1, n0 + nelx + 2, n0 + nelx + 1])
    return QuadMesh(nodes, elements, [], np.zeros(2 * len(nodes)), grid=(nelx, nely))


def grid_node(mesh: QuadMesh, ix: int, iy: int) -> int:
    nelx, _ = mesh.grid
    return iy * (nelx + 1) + ix


# --------------------------------------------------------------------------
# element matrices


def _shape_derivatives() -> np.ndarray:
    """dN/d(xi, eta) at the Gauss points, shape (4 gp, 2, 4 nodes)."""
    xi, eta = GAUSS_POINTS[:, 0:1], GAUSS_POINTS[:, 1:2]
    sx, sy = _NODE_SIGNS[:, 0], _NODE_SIGNS[:, 1]
    dxi = 0.25 * sx * (1.0 + eta * sy)
    deta = 0.25 * sy * (1.0 + xi * sx)
    return np.stack([dxi, deta], axis=1)


_DN = _shape_derivatives()


def element_kinematics(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Strain-displacement matrices and quadrature weights.

    coords: (E, 4, 2) node coordinates. Returns ``B`` of shape (E, 4, 3, 8)
    and ``wdet`` of shape (E, 4) (Gauss weight times Jacobian determinant).
    """
    coords = np.asarray(coords, dtype=float)
    if coords.ndim == 2:
        coords = coords[None]
    jac = np.einsum("gak,ekb->egab", _DN, coords)
    det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    if np.any(det <= 0):
        bad = np.unique(np.nonzero(det <= 0)[0])
        raise ValueError(f"non-positive Jacobian in elements {bad[:10].tolist()}")
    inv = np.empty_like(jac)
    inv[..., 0, 0] = jac[..., 1, 1] / det
    inv[..., 1, 1] = jac[..., 0, 0] / det
    inv[..., 0, 1] = -jac[..., 0, 1] / det
    inv[..., 1, 0] = -jac[..., 1, 0] / det
    dndx = np.einsum("egab,gbk->egak", inv, _DN)
    B = np.zeros(dndx.shape[:2] + (3, 8))
    B[..., 0, 0::2] = dndx[..., 0, :]
    B[..., 1, 1::2] = dndx[..., 1, :]
    B[..., 2, 0::2] = dndx[..., 1, :]
    B[..., 2, 1::2] = dndx[..., 0, :]
    return B, det


def element_stiffness(C: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """8x8 stiffness of one quad with (4, 2) counterclockwise node coordinates."""
    B, wdet = element_kinematics(np.asarray(coords, dtype=float)[None])
    return element_stiffnesses(np.asarray(C, dtype=float)[None], B, wdet)[0]


def element_stiffnesses(C: np.ndarray, B: np.ndarray, wdet: np.ndarray) -> np.ndarray:
    """Batched ``sum_g w_g det_g B_g^T C_e B_g``; C is (E, 3, 3)."""
    return np.einsum("eg,egia,eij,egjb->eab", wdet, B, C, B, optimize=True)


def assemble(mesh: QuadMesh, C: np.ndarray) -> sp.csc_matrix:
    B, wdet = mesh.kinematics()
    ke = element_stiffnesses(_per_element(C, mesh.n_elements), B, wdet)
    edof = mesh.edofs
    rows = np.repeat(edof, 8, axis=1).ravel()
    cols = np.tile(edof, (1, 8)).ravel()
    n = mesh.n_dofs
    return sp.csc_matrix((ke.ravel(), (rows, cols)), shape=(n, n))


def _per_element(C, n_elements):
    C = np.asarray(C, dtype=float)
    if C.ndim == 2:
        C = np.broadcast_to(C, (n_elements, 3, 3))
    if C.shape != (n_elements, 3, 3):
        raise ValueError(f"expected ({n_elements}, 3, 3) element tensors, got {C.shape}")
    return C


def _factor(K: sp.csc_matrix):
    try:
        return splu(K)
    except RuntimeError as exc:
        raise SolverError(f"singular stiffness matrix (under-constrained?): {exc}") from None


def solve(mesh: QuadMesh, C: np.ndarray, rtol: float = 1e-8) -> np.ndarray:
    """Displacements for every load case, shape (n_cases, n_dofs).

    Sparse LU (SuperLU) on the reduced symmetric system. The residual of each
    case is checked against ``rtol * ||F||``.
    """
    K = assemble(mesh, C)
    free = mesh.free_dofs
    Kff = K[free][:, free].tocsc()
    F = mesh.loads[:, free].T
    U = np.zeros_like(mesh.loads)
    if not np.any(F):
        return U
    lu = _factor(Kff)
    X = lu.solve(F)
    # one step of iterative refinement tightens the energy to near round-off
    X += lu.solve(F - Kff @ X)
    res = np.linalg.norm(Kff @ X - F, axis=0)
    fn = np.linalg.norm(F, axis=0)
    if not np.all(np.isfinite(X)) or np.any(res > rtol * np.maximum(fn, 1e-300)):
        raise SolverError(f"solve residual {res.max():.3e} exceeds tolerance")
    if np.any(np.einsum("ic,ic->c", X, F) < 0):
        raise SolverError("negative compliance: stiffness matrix is indefinite")
    U[:, free] = X.T
    return U


# --------------------------------------------------------------------------
# homogenization

_UNIT_COORDS = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def _affine_displacements() -> np.ndarray:
    """Element nodal displacements of the three unit macro strains, shape (8, 3)."""
    x, y = _UNIT_COORDS[:, 0], _UNIT_COORDS[:, 1]
    u0 = np.zeros((8, 3))
    u0[0::2, 0] = x
    u0[1::2, 1] = y
    u0[0::2, 2] = 0.5 * y
    u0[1::2, 2] = 0.5 * x
    return u0


def homogenize(micro: np.ndarray, base: BaseMaterial = BaseMaterial(), void_ratio: float = VOID_RATIO) -> np.ndarray:
    """Effective plane-stress tensor of a periodic pixel microstructure.

    Every pixel is a unit square element, solid where ``micro`` is nonzero
    and ``void_ratio * C_base`` elsewhere. Periodicity is imposed by
    identifying opposite boundary nodes (the pixel grid becomes a torus with
    ``ny * nx`` nodes), one node is pinned against translation, and the three
    unit strains are applied as body loads. The tensor follows from the
    summed element mutual energies divided by the cell area.
    """
    micro = np.asarray(micro)
    if micro.ndim != 2 or micro.size == 0:
        raise ValueError("microstructure must be a nonempty 2D array")
    solid = micro != 0
    if not solid.any():
        raise ValueError("microstructure has no solid pixels")
    ny, nx = micro.shape
    ke = element_stiffness(base.C, _UNIT_COORDS)
    u0 = _affine_displacements()
    fe = ke @ u0

    iy, ix = np.divmod(np.arange(nx * ny), nx)
    node = lambda y, x: (y % ny) * nx + (x % nx)  # noqa: E731
    en = np.column_stack([node(iy, ix), node(iy, ix + 1), node(iy + 1, ix + 1), node(iy + 1, ix)])
    edof = np.stack([2 * en, 2 * en + 1], axis=-1).reshape(-1, 8)
    w = np.where(solid.ravel(), 1.0, void_ratio)

    n = 2 * nx * ny
    rows = np.repeat(edof, 8, axis=1).ravel()
    cols = np.tile(edof, (1, 8)).ravel()
    K = sp.csc_matrix(((w[:, None, None] * ke).ravel(), (rows, cols)), shape=(n, n))
    F = np.zeros((n, 3))
    np.add.at(F, edof, w[:, None, None] * fe)

    free = np.arange(2, n)
    chi = np.zeros((n, 3))
    chi[free] = _factor(K[free][:, free].tocsc()).solve(F[free])
    if not np.all(np.isfinite(chi)):
        raise SolverError("homogenization solve produced non-finite values")

    rel = u0[None, :, :] - chi[edof]  # (E, 8, 3)
    CH = np.einsum("e,eai,ab,ebj->ij", w, rel, ke, rel, optimize=True) / (nx * ny)
    return 0.5 * (CH + CH.T)


# --------------------------------------------------------------------------
# tensor utilities


def rotation_matrix(gamma: float) -> np.ndarray:
    """Voigt map taking material-frame stiffness to a frame rotated by ``gamma``.

    ``rotate_tensor(C, g) = R(g) C R(g)^T``; a material whose stiff axis is x
    ends up stiff along the direction at angle ``g`` from x.
    """
    c, s = math.cos(gamma), math.sin(gamma)
    return np.array(
        [
            [c * c, s * s, -2.0 * c * s],
            [s * s, c * c, 2.0 * c * s],
            [c * s, -c * s, c * c - s * s],
        ]
    )


def rotation_matrix_derivative(gamma: float) -> np.ndarray:
    c2, s2 = math.cos(2 * gamma), math.sin(2 * gamma)
    return np.array([[-s2, s2, -2.0 * c2], [s2, -s2, 2.0 * c2], [c2, -c2, -2.0 * s2]])


def rotate_tensor(C: np.ndarray, gamma: float) -> np.ndarray:
    R = rotation_matrix(gamma)
    return R @ np.asarray(C, dtype=float) @ R.T


_MANDEL = np.array([1.0, 1.0, math.sqrt(2.0)])


def mandel(C: np.ndarray) -> np.ndarray:
    """Mandel form of a Voigt stiffness; its eigenvalues are rotation invariant."""
    return _MANDEL[:, None] * np.asarray(C) * _MANDEL[None, :]


_CONSTANT_NAMES = {
    SpinodoidClass.ISOTROPIC: ("mu", "lambda"),
    SpinodoidClass.MONOCLINIC: ("C11", "C12", "C13", "C22", "C23", "C33"),
    SpinodoidClass.ORTHOTROPIC: ("C11", "C12", "C22", "C33"),
}
_ENTRY = {"C11": (0, 0), "C12": (0, 1), "C13": (0, 2), "C22": (1, 1), "C23": (1, 2), "C33": (2, 2)}


def constant_names(kind) -> tuple[str, ...]:
    return _CONSTANT_NAMES[SpinodoidClass(kind)]


def reduce_constants(C: np.ndarray, kind) -> tuple[np.ndarray, float]:
    """Class-reduced constant vector and the relative residual of the reduction.

    Isotropic: least-squares (mu, lambda) of the form
    ``[[l+2m, l, 0], [l, l+2m, 0], [0, 0, m]]``. Monoclinic: the six entries.
    Orthotropic: C11, C12, C22, C33 (C13, C23 dropped).
    """
    kind = SpinodoidClass(kind)
    C = np.asarray(C, dtype=float)
    if kind is SpinodoidClass.ISOTROPIC:
        # rows: C11, C22, C12, C33 in terms of (mu, lambda)
        A = np.array([[2.0, 1.0], [2.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
        b = np.array([C[0, 0], C[1, 1], C[0, 1], C[2, 2]])
        vec = np.linalg.lstsq(A, b, rcond=None)[0]
    else:
        vec = np.array([C[_ENTRY[n]] for n in constant_names(kind)])
    back = expand_constants(vec, kind)
    resid = float(np.linalg.norm(back - C) / max(np.linalg.norm(C), 1e-300))
    return vec, resid


def expand_constants(vec, kind) -> np.ndarray:
    kind = SpinodoidClass(kind)
    vec = np.asarray(vec, dtype=float)
    if kind is SpinodoidClass.ISOTROPIC:
        mu, lam = vec
        return np.array([[lam + 2 * mu, lam, 0.0], [lam, lam + 2 * mu, 0.0], [0.0, 0.0, mu]])
    C = np.zeros((3, 3))
    for name, v in zip(constant_names(kind), vec):
        i, j = _ENTRY[name]
        C[i, j] = C[j, i] = v
    return C


def expansion_basis(kind) -> np.ndarray:
    """Linear map from constants to Voigt entries, shape (n_constants, 3, 3)."""
    n = len(constant_names(kind))
    return np.stack([expand_constants(np.eye(n)[i], kind) for i in range(n)])


def directional_modulus(C: np.ndarray, theta) -> np.ndarray:
    """Young's modulus along direction(s) ``theta`` from the compliance of C."""
    S = np.linalg.inv(np.asarray(C, dtype=float))
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    n = np.stack([c * c, s * s, c * s], axis=-1)
    return 1.0 / np.einsum("...i,ij,...j->...", n, S, n)


def voigt_reuss_bounds(volume_fraction: float, base: BaseMaterial = BaseMaterial(), void_ratio: float = VOID_RATIO):
    """(Voigt, Reuss) bound tensors of a two-phase solid/soft-void mixture."""
    Cs = base.C
    Cv = void_ratio * Cs
    f = volume_fraction
    voigt = f * Cs + (1 - f) * Cv
    reuss = np.linalg.inv(f * np.linalg.inv(Cs) + (1 - f) * np.linalg.inv(Cv))
    return voigt, reuss


def rrmse(c, c_ref) -> float:
    """``sqrt( mean((c - c_ref)^2) / sum(c_ref^2) )``."""
    c = np.asarray(c, dtype=float).ravel()
    c_ref = np.asarray(c_ref, dtype=float).ravel()
    if c.shape != c_ref.shape or c.size == 0:
        raise ValueError("constant vectors must be nonempty and of equal length")
    denom = float(np.sum(c_ref**2))
    if denom == 0.0:
        raise ValueError("reference constants have zero norm")
    return math.sqrt(float(np.mean((c - c_ref) ** 2)) / denom)


def write_tensor_csv(path, C: np.ndarray) -> None:
    rows = [",".join(repr(float(v)) for v in row) for row in np.asarray(C)]
    Path(path).write_text("\n".join(rows) + "\n")


def read_tensor_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)
