"""Neural-field multiscale compliance optimization with spinodoid surrogates.

A small coordinate network maps each macro element centroid to a spinodoid
design (type fractions, macro density, micro density, frequency, rotation
and anisotropy). Surrogate-predicted material-frame moduli are rotated,
penalized SIMP-style and assembled into a finite element model. The
gradient of the loss with respect to the network weights is propagated by
hand-written vector-Jacobian products through every stage; compliance is
self-adjoint, so one solve per load case suffices.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fem
from .generation import SQRT2_2, SpinodoidClass, SpinodoidDescriptor
from .provenance import provenance
from .surrogate import SurrogateSet

log = logging.getLogger(__name__)

__all__ = [
    "DesignNet",
    "DesignFields",
    "ProblemSpec",
    "OptimState",
    "DivergenceError",
    "forward_fields",
    "penalized_moduli",
    "objective_and_constraint",
    "loss",
    "evaluate",
    "optimize",
    "reference_compliance",
    "export_design",
]

KINDS = tuple(SpinodoidClass)
FLOOR = 1e-6
# smallest Mandel eigenvalue a surrogate tensor may have, relative to E
SPD_FLOOR = 1e-4
COMPLIANCE_SCALES = ("voigt", "initial", "none")
_MANDEL_D = np.array([1.0, 1.0, math.sqrt(2.0)])
HIDDEN = 20
N_OUT = 10

# affine range maps applied after the output sigmoids
RANGES = {
    "rho_M": (0.0, 1.0),
    "rho_m": (0.3, 0.7),
    "k": (10.0, 30.0),
    "gamma": (0.0, math.pi),
    "alpha_mon": (0.5, 0.9),
    "alpha1_ort": (0.5, 0.9),
    "alpha2_ort": (0.5, 0.9),
}
FIELD_NAMES = tuple(RANGES)
_LO = np.array([v[0] for v in RANGES.values()])
_SPAN = np.array([v[1] - v[0] for v in RANGES.values()])


class DivergenceError(RuntimeError):
    def __init__(self, message: str, state: "OptimState"):
        super().__init__(message)
        self.state = state


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# --------------------------------------------------------------------------
# network


@dataclass
class DesignNet:
    """2 -> 20 -> 10 network with logistic hidden units."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    SHAPES = (("W1", (2, HIDDEN)), ("b1", (HIDDEN,)), ("W2", (HIDDEN, N_OUT)), ("b2", (N_OUT,)))

    @classmethod
    def init(cls, seed: int, input_scale: float = 1.0) -> "DesignNet":
        """Glorot-uniform weights; ``input_scale`` stretches the first layer.

        With ``input_scale > 1`` each hidden unit becomes a sigmoid ridge of
        slope up to ``input_scale * a1`` whose midline passes through a
        random point of the unit square (``b1 = -c @ W1``).
        """
        rng = np.random.default_rng(seed)
        a1 = math.sqrt(6.0 / (2 + HIDDEN))
        a2 = math.sqrt(6.0 / (HIDDEN + N_OUT))
        W1 = input_scale * rng.uniform(-a1, a1, (2, HIDDEN))
        W2 = rng.uniform(-a2, a2, (HIDDEN, N_OUT))
        if input_scale == 1.0:
            b1 = np.zeros(HIDDEN)
        else:
            centers = rng.uniform(0.0, 1.0, (HIDDEN, 2))
            b1 = -np.einsum("hd,dh->h", centers, W1)
        return cls(W1=W1, b1=b1, W2=W2, b2=np.zeros(N_OUT))

    @classmethod
    def zeros(cls) -> "DesignNet":
        return cls.from_vector(np.zeros(cls.size()))

    @classmethod
    def size(cls) -> int:
        return sum(int(np.prod(s)) for _, s in cls.SHAPES)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n, _ in self.SHAPES])

    @classmethod
    def from_vector(cls, v) -> "DesignNet":
        v = np.asarray(v, dtype=float)
        if v.shape != (cls.size(),):
            raise ValueError(f"expected {cls.size()} weights, got {v.shape}")
        parts, i = {}, 0
        for name, shape in cls.SHAPES:
            n = int(np.prod(shape))
            parts[name] = v[i : i + n].reshape(shape).copy()
            i += n
        return cls(**parts)

    def to_dict(self) -> dict:
        return {n: getattr(self, n).tolist() for n, _ in self.SHAPES}

    @classmethod
    def from_dict(cls, d) -> "DesignNet":
        return cls(**{n: np.asarray(d[n], dtype=float).reshape(s) for n, s in cls.SHAPES})


@dataclass
class DesignFields:
    """Per-element design variables and the intermediates needed for backprop."""

    t: np.ndarray  # (E, 3) type fractions, iso/mono/ortho
    values: np.ndarray  # (E, 7) in FIELD_NAMES order
    x: np.ndarray
    hidden: np.ndarray
    sig: np.ndarray  # (E, 7) output sigmoids

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[:, FIELD_NAMES.index(name)]

    def as_dict(self) -> dict:
        d = {f"t_{k.value}": self.t[:, i] for i, k in enumerate(KINDS)}
        d.update({n: self.values[:, i] for i, n in enumerate(FIELD_NAMES)})
        return d


def type_mask(allowed) -> np.ndarray:
    allowed = {SpinodoidClass(a) for a in allowed}
    if not allowed:
        raise ValueError("at least one spinodoid type must be allowed")
    return np.array([k in allowed for k in KINDS])


def forward_fields(net: DesignNet, centroids, allowed=KINDS) -> DesignFields:
    """Network outputs at normalized centroids mapped into the design ranges."""
    x = np.atleast_2d(np.asarray(centroids, dtype=float))
    h = _sigmoid(x @ net.W1 + net.b1)
    o = h @ net.W2 + net.b2
    mask = type_mask(allowed)
    logits = np.where(mask, o[:, :3], -np.inf)
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    t = e / e.sum(axis=1, keepdims=True)
    sig = _sigmoid(o[:, 3:])
    return DesignFields(t=t, values=_LO + _SPAN * sig, x=x, hidden=h, sig=sig)


def _fields_backward(net: DesignNet, f: DesignFields, dt: np.ndarray, dvalues: np.ndarray) -> np.ndarray:
    """VJP from (dL/dt, dL/dvalues) to the flat weight gradient."""
    dlog = f.t * (dt - np.sum(f.t * dt, axis=1, keepdims=True))
    draw = dvalues * _SPAN * f.sig * (1.0 - f.sig)
    do = np.concatenate([dlog, draw], axis=1)
    dW2 = f.hidden.T @ do
    db2 = do.sum(axis=0)
    dh = do @ net.W2.T
    dz = dh * f.hidden * (1.0 - f.hidden)
    dW1 = f.x.T @ dz
    db1 = dz.sum(axis=0)
    return np.concatenate([dW1.ravel(), db1, dW2.ravel(), db2])


# --------------------------------------------------------------------------
# problem definition


@dataclass
class ProblemSpec:
    mesh: fem.QuadMesh
    target_volume: float = 0.3
    allowed: tuple = KINDS
    iterations: int = 300
    learning_rate: float = 0.1
    p_start: float = 1.0
    p_step: float = 0.02
    p_max: float = 8.0
    eta0: float = 0.05
    delta_eta: float = 0.15
    tol: float = 1e-4
    window: int = 10
    g_tol: float = 0.01
    compliance_scale: str = "initial"
    initial_rho_m: float = 0.65
    input_scale: float = 20.0
    single_scale: bool = False
    baseline_rho_m: float = 0.7
    baseline_k: float = 20.0
    spd_floor: float = SPD_FLOOR * fem.BaseMaterial().E
    name: str = ""

    def __post_init__(self):
        if not 0.0 < self.target_volume < 1.0:
            raise ValueError("target volume must lie in (0, 1)")
        self.allowed = tuple(SpinodoidClass(a) for a in self.allowed)
        type_mask(self.allowed)
        if self.single_scale:
            self.allowed = (SpinodoidClass.ISOTROPIC,)
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if self.g_tol <= 0:
            raise ValueError("g_tol must be positive")
        if self.p_start < 1.0 or self.p_step < 0 or self.p_max < self.p_start:
            raise ValueError("continuation must start at p >= 1 and be nondecreasing")

        lo, hi = RANGES["rho_m"]
        if not lo < self.initial_rho_m < hi or self.target_volume >= self.initial_rho_m:
            raise ValueError("initial_rho_m must lie inside the microscale range and above the target volume")
        if self.compliance_scale not in COMPLIANCE_SCALES:
            raise ValueError(f"compliance_scale must be one of {COMPLIANCE_SCALES}")

    def penalty_exponent(self, n: int) -> float:
        return min(self.p_start + self.p_step * n, self.p_max)

    def config(self) -> dict:
        return {
            "name": self.name or self.mesh.name,
            "target_volume": self.target_volume,
            "allowed": [k.value for k in self.allowed],
            "iterations": self.iterations,
            "learning_rate": self.learning_rate,
            "p_start": self.p_start, "p_step": self.p_step, "p_max": self.p_max,
            "eta0": self.eta0, "delta_eta": self.delta_eta,
            "tol": self.tol, "window": self.window, "g_tol": self.g_tol,
            "compliance_scale": self.compliance_scale,
            "initial_rho_m": self.initial_rho_m,
            "input_scale": self.input_scale,
            "single_scale": self.single_scale,
            "baseline_rho_m": self.baseline_rho_m, "baseline_k": self.baseline_k,
            "elements": self.mesh.n_elements,
        }


# --------------------------------------------------------------------------
# material model


def spd_floor(C: np.ndarray, delta: float):
    """Smoothly lift Mandel eigenvalues below ``delta``: ``lam -> delta * softplus(lam / delta)``.

    GP predictions can dip below zero where the data jump across the
    percolation threshold; this keeps every tensor positive definite while
    leaving eigenvalues well above ``delta`` unchanged to round-off.
    Returns the lifted tensors and the data needed by :func:`spd_floor_vjp`.
    """
    D = _MANDEL_D
    M = D[:, None] * C * D[None, :]
    lam, V = np.linalg.eigh(M)
    z = lam / delta
    f = delta * np.logaddexp(0.0, z)
    fp = _sigmoid(z)
    Mf = np.einsum("eij,ej,ekj->eik", V, f, V)
    diff = lam[:, :, None] - lam[:, None, :]
    same = np.abs(diff) <= 1e-12 * np.maximum(np.abs(lam[:, :, None]), delta)
    with np.errstate(divide="ignore", invalid="ignore"):
        F = np.where(same, 0.5 * (fp[:, :, None] + fp[:, None, :]), (f[:, :, None] - f[:, None, :]) / diff)
    return Mf / D[:, None] / D[None, :], (V, F)


def spd_floor_vjp(G: np.ndarray, saved) -> np.ndarray:
    V, F = saved
    D = _MANDEL_D
    GM = G / D[:, None] / D[None, :]
    inner = np.einsum("eji,ejk,ekl->eil", V, GM, V) * F
    GMin = np.einsum("eij,ejk,elk->eil", V, inner, V)
    return D[:, None] * GMin * D[None, :]


@dataclass
class _TypeModel:
    kind: SpinodoidClass
    C: np.ndarray  # (E, 3, 3) rotated tensors
    C0: np.ndarray  # (E, 3, 3) material frame
    floor_data: tuple
    dq: np.ndarray  # (E, c, d) surrogate gradients w.r.t. raw inputs
    input_fields: tuple
    input_active: np.ndarray  # (E, d) 0/1 clip masks


def _surrogate_inputs(kind: SpinodoidClass, f: DesignFields, spec: ProblemSpec):
    E = len(f.t)
    if spec.single_scale:
        raw = np.column_stack([np.full(E, spec.baseline_rho_m), np.full(E, spec.baseline_k)])
        return raw, (None, None), np.zeros_like(raw)
    names = {
        SpinodoidClass.ISOTROPIC: ("rho_m", "k"),
        SpinodoidClass.MONOCLINIC: ("rho_m", "k", "alpha_mon"),
        SpinodoidClass.ORTHOTROPIC: ("rho_m", "k", "alpha1_ort", "alpha2_ort"),
    }[kind]
    raw = np.column_stack([f[n] for n in names])
    active = np.ones_like(raw)
    if kind is SpinodoidClass.ORTHOTROPIC:
        # below sqrt(2)/2 the retained sectors cover the whole ring
        low = raw[:, 2:] < SQRT2_2
        raw[:, 2:] = np.where(low, SQRT2_2, raw[:, 2:])
        active[:, 2:] = ~low
    return raw, names, active


def _rotations(gamma: np.ndarray):
    c, s = np.cos(gamma), np.sin(gamma)
    R = np.empty((len(gamma), 3, 3))
    R[:, 0] = np.stack([c * c, s * s, -2 * c * s], axis=1)
    R[:, 1] = np.stack([s * s, c * c, 2 * c * s], axis=1)
    R[:, 2] = np.stack([c * s, -c * s, c * c - s * s], axis=1)
    c2, s2 = np.cos(2 * gamma), np.sin(2 * gamma)
    dR = np.empty_like(R)
    dR[:, 0] = np.stack([-s2, s2, -2 * c2], axis=1)
    dR[:, 1] = np.stack([s2, -s2, 2 * c2], axis=1)
    dR[:, 2] = np.stack([c2, -c2, -2 * s2], axis=1)
    return R, dR


def _type_models(f: DesignFields, surrogates: dict, spec: ProblemSpec) -> list[_TypeModel]:
    models = []
    gamma = f["gamma"]
    R, _ = _rotations(gamma)
    for kind in spec.allowed:
        if kind not in surrogates:
            raise KeyError(f"no surrogate for allowed type {kind.value}")
        sur: SurrogateSet = surrogates[kind]
        raw, names, active = _surrogate_inputs(kind, f, spec)
        q, dq = sur.predict(raw, with_grad=True)
        C0, floor_data = spd_floor(np.einsum("ec,cij->eij", q, fem.expansion_basis(kind)), spec.spd_floor)
        C = C0 if kind is SpinodoidClass.ISOTROPIC else np.einsum("eij,ejk,elk->eil", R, C0, R)
        models.append(_TypeModel(kind, C, C0, floor_data, dq, names, active))
    return models


def penalized_moduli(fields: DesignFields, surrogates: dict, p: float, spec: ProblemSpec | None = None):
    """SIMP-combined element tensors ``sum_ty [(1-floor) (rho_M t)^p + floor] C_ty``."""
    spec = spec or ProblemSpec(mesh=_DUMMY_MESH)
    return _penalized(fields, _type_models(fields, surrogates, spec), p, spec)[0]


def _penalized(f: DesignFields, models: list[_TypeModel], p: float, spec: ProblemSpec):
    rho_M = f["rho_M"]
    Ct = np.zeros((len(rho_M), 3, 3))
    weights = []
    for m in models:
        t = np.ones(len(rho_M)) if spec.single_scale else f.t[:, m.kind.index]
        s = rho_M * t
        w = (1.0 - FLOOR) * s**p + FLOOR
        Ct += w[:, None, None] * m.C
        weights.append((s, w))
    return Ct, weights


def objective_and_constraint(Ct: np.ndarray, spec: ProblemSpec, fields: DesignFields):
    """Total compliance over load cases and the volume constraint value."""
    J, _, _ = _compliance(spec.mesh, Ct)
    return J, _volume(fields, spec)[0]


def _compliance(mesh: fem.QuadMesh, Ct: np.ndarray):
    U = fem.solve(mesh, Ct)
    J_cases = np.einsum("cd,cd->c", mesh.loads, U)
    return float(J_cases.sum()), J_cases, U


def _volume(f: DesignFields, spec: ProblemSpec):
    A = spec.mesh.areas()
    rho_m = np.ones(len(A)) if spec.single_scale else f["rho_m"]
    rho = f["rho_M"] * rho_m
    denom = spec.target_volume * A.sum()
    return float(rho @ A / denom - 1.0), A / denom, rho_m


def loss(J: float, g: float, n_opt: int, eta0: float = 0.05, delta_eta: float = 0.15) -> float:
    """Compliance plus the growing quadratic volume penalty."""
    return J + (eta0 + n_opt * delta_eta) * g * g


def _compliance_sensitivity(mesh: fem.QuadMesh, U: np.ndarray) -> np.ndarray:
    """dJ/dC_e for each element, summed over load cases: -sum wdet (B u)(B u)^T."""
    B, wdet = mesh.kinematics()
    ue = U[:, mesh.edofs]  # (cases, E, 8)
    eps = np.einsum("egia,cea->cegi", B, ue)
    return -np.einsum("eg,cegi,cegj->eij", wdet, eps, eps)


@dataclass
class Evaluation:
    loss: float
    J: float
    g: float
    J_cases: np.ndarray
    fields: DesignFields
    Ct: np.ndarray
    grad: np.ndarray | None = None


def evaluate(net: DesignNet, spec: ProblemSpec, surrogates: dict, n_opt: int, p: float,
             J0: float = 1.0, with_grad: bool = True) -> Evaluation:
    """Forward pass and (optionally) the reverse-mode gradient of the loss in the weights."""
    mesh = spec.mesh
    f = forward_fields(net, mesh.normalized_centroids(), spec.allowed)
    models = _type_models(f, surrogates, spec)
    Ct, weights = _penalized(f, models, p, spec)
    J, J_cases, U = _compliance(mesh, Ct)
    g, dg_drho, rho_m = _volume(f, spec)
    coef = spec.eta0 + n_opt * spec.delta_eta
    ell = loss(J / J0, g, n_opt, spec.eta0, spec.delta_eta)
    ev = Evaluation(ell, J, g, J_cases, f, Ct)
    if not with_grad:
        return ev

    E = mesh.n_elements
    dt = np.zeros((E, 3))
    dv = np.zeros((E, len(FIELD_NAMES)))
    iM, im, ig = (FIELD_NAMES.index(n) for n in ("rho_M", "rho_m", "gamma"))

    # volume penalty
    dl_dg = 2.0 * coef * g
    dv[:, iM] += dl_dg * dg_drho * rho_m
    if not spec.single_scale:
        dv[:, im] += dl_dg * dg_drho * f["rho_M"]

    # compliance through the SIMP mix
    G = _compliance_sensitivity(mesh, U) / J0
    R, dR = _rotations(f["gamma"])
    for m, (s, w) in zip(models, weights):
        ds = (1.0 - FLOOR) * p * s ** (p - 1.0) * np.einsum("eij,eij->e", G, m.C)
        if spec.single_scale:
            dv[:, iM] += ds
        else:
            dv[:, iM] += ds * f.t[:, m.kind.index]
            dt[:, m.kind.index] += ds * f["rho_M"]
        GC = w[:, None, None] * G  # dL/dC for this type
        if m.kind is SpinodoidClass.ISOTROPIC:
            GC0 = GC
        else:
            GC0 = np.einsum("eji,ejk,ekl->eil", R, GC, R)
            # d/dgamma of R C0 R^T contracted with the symmetric GC
            dv[:, ig] += 2.0 * np.einsum("eij,ejk,ekl,eil->e", dR, m.C0, R.transpose(0, 2, 1), GC)
        GC0 = spd_floor_vjp(GC0, m.floor_data)
        dq = np.einsum("eij,cij->ec", GC0, fem.expansion_basis(m.kind))
        draw = np.einsum("ec,ecd->ed", dq, m.dq) * m.input_active
        for j, name in enumerate(m.input_fields):
            if name is not None:
                dv[:, FIELD_NAMES.index(name)] += draw[:, j]

    ev.grad = _fields_backward(net, f, dt, dv)
    return ev


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    net: DesignNet
    spec: ProblemSpec
    seed: int
    iteration: int = 0
    p: float = 1.0
    J0: float = 1.0
    history: list = field(default_factory=list)  # dicts: iteration, p, J, g, loss
    converged: bool = False

    def checkpoint(self) -> dict:
        return {
            "schema": "spinodoid.design/1",
            "seed": self.seed,
            "iteration": self.iteration,
            "p": self.p,
            "J0": self.J0,
            "converged": self.converged,
            "config": self.spec.config(),
            "weights": self.net.to_dict(),
            "provenance": provenance({**self.spec.config(), "seed": self.seed}),
        }

    def save_checkpoint(self, path) -> None:
        Path(path).write_text(json.dumps(self.checkpoint(), indent=1, sort_keys=True))


class _Adam:
    def __init__(self, n, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.k = 0

    def step(self, x, g):
        self.k += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1**self.k)
        vh = self.v / (1 - self.b2**self.k)
        return x - self.lr * mh / (np.sqrt(vh) + self.eps)


def _logit(y):
    return math.log(y / (1.0 - y))


def start_uniform(net: DesignNet, spec: ProblemSpec) -> DesignNet:
    """Shift the density output biases so the initial design is feasible.

    On average over the elements, rho_m starts at ``spec.initial_rho_m`` and
    rho_M at ``target_volume / rho_m``, so the composed density matches the
    target. The middle of the rho_m range sits at the percolation threshold
    of the level-cut microstructures, where the surrogate stiffness is
    nearly zero; starting there gives a first compliance orders of magnitude
    above later ones and the resulting gradient spike stalls the adaptive
    step sizes for hundreds of iterations.
    """
    h = _sigmoid(spec.mesh.normalized_centroids() @ net.W1 + net.b1)
    o = (h @ net.W2).mean(axis=0)
    b2 = net.b2.copy()
    rho_m = 1.0 if spec.single_scale else spec.initial_rho_m
    for name, value in (("rho_M", spec.target_volume / rho_m), ("rho_m", spec.initial_rho_m)):
        i = FIELD_NAMES.index(name)
        lo, hi = RANGES[name]
        b2[3 + i] = _logit((value - lo) / (hi - lo)) - o[3 + i]
    return DesignNet(net.W1, net.b1, net.W2, b2)


def reference_compliance(spec: ProblemSpec, surrogates: dict | None = None, net: DesignNet | None = None) -> float:
    """Scale that divides J inside the loss.

    ``voigt``: compliance of the domain filled uniformly with base material
    scaled by the target volume, i.e. the stiffest homogeneous design of the
    same mass. It does not depend on the network or the allowed types, so
    losses of different runs on one preset are directly comparable.
    ``initial``: compliance of the initial design. ``none``: 1.
    """
    if spec.compliance_scale == "none":
        return 1.0
    if spec.compliance_scale == "initial":
        return evaluate(net, spec, surrogates, 0, spec.p_start, with_grad=False).J
    C = spec.target_volume * fem.BaseMaterial().C
    return _compliance(spec.mesh, np.broadcast_to(C, (spec.mesh.n_elements, 3, 3)))[0]


def optimize(spec: ProblemSpec, surrogates: dict, seed: int = 0, callback=None) -> OptimState:
    """Adam on the network weights with SIMP continuation; returns the final state."""
    net = start_uniform(DesignNet.init(seed, spec.input_scale), spec)
    state = OptimState(net=net, spec=spec, seed=seed, p=spec.p_start)
    state.J0 = reference_compliance(spec, surrogates, net)
    adam = _Adam(DesignNet.size(), spec.learning_rate)
    x = net.to_vector()
    losses = []
    for n in range(spec.iterations):
        p = spec.penalty_exponent(n)
        ev = evaluate(state.net, spec, surrogates, n, p, state.J0)
        if not (np.isfinite(ev.loss) and np.all(np.isfinite(ev.grad))):
            raise DivergenceError(f"non-finite loss at iteration {n}", state)
        state.iteration, state.p = n, p
        state.history.append({"iteration": n, "p": p, "J": ev.J, "g": ev.g, "loss": ev.loss})
        losses.append(ev.loss)
        if callback:
            callback(state, ev)
        if len(losses) > spec.window and abs(ev.g) <= spec.g_tol:
            ref = losses[-1 - spec.window]
            if abs(losses[-1] - ref) / max(abs(losses[-1]), 1e-300) < spec.tol:
                state.converged = True
                break
        x = adam.step(x, ev.grad)
        state.net = DesignNet.from_vector(x)
    return state


def final_evaluation(state: OptimState, surrogates: dict) -> Evaluation:
    return evaluate(state.net, state.spec, surrogates, state.iteration, state.p, state.J0, with_grad=False)


# --------------------------------------------------------------------------
# export


def design_table(state: OptimState, surrogates: dict | None = None) -> dict:
    """Per-element design with hard-thresholded type and solid flag."""
    spec = state.spec
    f = forward_fields(state.net, spec.mesh.normalized_centroids(), spec.allowed)
    c = spec.mesh.centroids()
    kind_idx = np.argmax(f.t, axis=1)
    table = {"element": np.arange(spec.mesh.n_elements), "x": c[:, 0], "y": c[:, 1]}
    table.update(f.as_dict())
    table["type"] = np.array([KINDS[i].value for i in kind_idx])
    table["solid"] = (f["rho_M"] >= 0.5).astype(int)
    return table


def table_descriptors(table: dict) -> list[SpinodoidDescriptor | None]:
    """Solid elements as spinodoid descriptors; void elements as ``None``."""
    out = []
    for i in range(len(table["element"])):
        if not table["solid"][i]:
            out.append(None)
            continue
        kind = SpinodoidClass(str(table["type"][i]))
        kw = {}
        if kind is SpinodoidClass.MONOCLINIC:
            kw["alpha_mon"] = float(table["alpha_mon"][i])
        elif kind is SpinodoidClass.ORTHOTROPIC:
            kw["alpha1_ort"] = float(table["alpha1_ort"][i])
            kw["alpha2_ort"] = float(table["alpha2_ort"][i])
        out.append(SpinodoidDescriptor(kind, float(table["rho_m"][i]), float(table["k"][i]),
                                       gamma=float(table["gamma"][i]), **kw))
    return out


def export_design(state: OptimState, out_dir, tile_size: int = 100, seed: int | None = None,
                  render: bool = True, stitch=None) -> dict:
    """Write the design CSV, history CSV, checkpoint and (for grid meshes) images."""
    from . import io as sio
    from .stitching import StitchParams, assemble_global, tiles_from_descriptors, write_sidecar

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = state.spec
    table = design_table(state)
    cfg = {**spec.config(), "seed": state.seed, "tile_size": tile_size}
    header = provenance(cfg)
    paths = {"design": out / "design.csv", "history": out / "history.csv", "checkpoint": out / "checkpoint.json"}
    sio.write_table_csv(paths["design"], table, header)
    hist = {k: np.array([h[k] for h in state.history]) for k in ("iteration", "p", "J", "g", "loss")}
    sio.write_table_csv(paths["history"], hist, header)
    state.save_checkpoint(paths["checkpoint"])
    if not np.any(table["solid"]):
        warnings.warn("design has no solid elements; the rendered structure is blank", RuntimeWarning)
    if not render:
        return {k: str(v) for k, v in paths.items()}

    mesh = spec.mesh
    paths["density"] = out / "density.png"
    paths["types"] = out / "types.png"
    sio.save_field_png(paths["density"], sio.element_raster(mesh, table["rho_M"] * table["rho_m"]), header)
    sio.save_type_png(paths["types"], mesh, table, header)
    if mesh.grid is not None:
        nelx, nely = mesh.grid
        descs = table_descriptors(table)
        base = int(state.seed if seed is None else seed)
        # image rows run top to bottom, mesh rows bottom to top
        grid = [[descs[(nely - 1 - r) * nelx + c] for c in range(nelx)] for r in range(nely)]
        seeds = [[base * 1_000_003 + (nely - 1 - r) * nelx + c for c in range(nelx)] for r in range(nely)]
        if any(d is not None for row in grid for d in row):
            tiles = tiles_from_descriptors(grid, seeds, tile_size)
            params = stitch or StitchParams.for_tile_size(tile_size)
            image, cuts = assemble_global(tiles, params, return_cuts=True)
            write_sidecar(out / "structure.json", tiles, cuts, params, {"provenance": header})
        else:
            image = np.zeros((nely * tile_size, nelx * tile_size), dtype=np.uint8)
        paths["structure"] = out / "structure.png"
        sio.save_binary_png(paths["structure"], image, header)
    return {k: str(v) for k, v in paths.items()}


_DUMMY_MESH = fem.rectangular_mesh(1, 1)
