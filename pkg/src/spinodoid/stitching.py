"""Seam blending and amplification for grids of spinodoid tiles.

Two neighbouring tiles of edge ``l`` are treated as one pair domain with
pixel coordinate ``x = 1 .. 2l`` along the blend axis (tile 1 covers
``1..l``). Each tile's phase field is periodic, so either field can be read
anywhere in the pair domain. Within a grid every tile half pairs with its
nearer neighbour; horizontal seams are processed first, then vertical ones.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .generation import SpinodoidDescriptor, binarize, reconstruct_phase_field, sample_white_noise

__all__ = [
    "StitchParams",
    "TileGrid",
    "interp_weight",
    "amplify_factor",
    "blend_pair",
    "amplify",
    "assemble_global",
    "seam_margin",
    "tiles_from_descriptors",
    "write_sidecar",
    "concatenate_tiles",
    "canonical_microstructures",
    "seam_rrmse",
]

# interpolation weight below which a pixel counts as tile interior
INTERIOR_WEIGHT = 1e-4


@dataclass(frozen=True)
class StitchParams:
    zeta: float = 5e-5
    eta: float = 10.0
    tile_size: int = 500

    def __post_init__(self):
        if not self.zeta > 0:
            raise ValueError("zeta must be positive")
        if not self.eta >= 0:
            raise ValueError("eta must be non-negative")
        if self.tile_size < 8:
            raise ValueError("tile_size must be at least 8")

    @classmethod
    def for_tile_size(cls, tile_size: int, eta: float = 10.0, reference: "StitchParams | None" = None):
        """Scale zeta so the transition covers the same fraction of a tile as the defaults."""
        ref = reference or cls()
        zeta = ref.zeta * (ref.tile_size / tile_size) ** 2
        return cls(zeta=zeta, eta=eta, tile_size=tile_size)


def interp_weight(x, l: int, zeta: float) -> np.ndarray:
    """Weight of the second tile at pair coordinate ``x`` (1-based, 1..2l)."""
    x = np.asarray(x, dtype=float)
    # ratio of Gaussians centred on 1 and 2l, written as a logistic for stability
    z = zeta * (2 * l - 1) * (2 * x - 2 * l - 1)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def amplify_factor(x, l: int, params: StitchParams) -> np.ndarray:
    """Multiplier ``1 + eta * g(x)`` with ``g = lam`` up to ``l`` and ``1 - lam`` beyond."""
    x = np.asarray(x, dtype=float)
    lam = interp_weight(x, l, params.zeta)
    g = np.where(x <= l, lam, 1.0 - lam)
    g = np.where((x < 1) | (x > 2 * l), 0.0, g)
    return 1.0 + params.eta * g


def _axis(axis) -> int:
    if axis in (1, "x", "horizontal"):
        return 1
    if axis in (0, "y", "vertical"):
        return 0
    raise ValueError(f"unknown blend axis {axis!r}")


def blend_pair(phi1, phi2, params: StitchParams, axis="horizontal") -> np.ndarray:
    """Blend two equal tiles over the doubled domain along ``axis``.

    The result has length ``2l`` along the axis; ``phi1`` dominates near the
    first pixel and ``phi2`` near the last.
    """
    phi1 = np.asarray(phi1, dtype=float)
    phi2 = np.asarray(phi2, dtype=float)
    if phi1.shape != phi2.shape:
        raise ValueError(f"tile shapes differ: {phi1.shape} vs {phi2.shape}")
    ax = _axis(axis)
    l = phi1.shape[ax]
    lam = interp_weight(np.arange(1, 2 * l + 1), l, params.zeta)
    lam = lam[:, None] if ax == 0 else lam[None, :]
    a = np.concatenate([phi1, phi1], axis=ax)
    b = np.concatenate([phi2, phi2], axis=ax)
    return (1.0 - lam) * a + lam * b


def amplify(phi_int, params: StitchParams, axis="horizontal") -> np.ndarray:
    """Scale a blended pair field by the seam multiplier along ``axis``."""
    phi_int = np.asarray(phi_int, dtype=float)
    ax = _axis(axis)
    n = phi_int.shape[ax]
    if n % 2:
        raise ValueError("pair field must have even length along the blend axis")
    m = amplify_factor(np.arange(1, n + 1), n // 2, params)
    m = m[:, None] if ax == 0 else m[None, :]
    return m * phi_int


def seam_margin(l: int, zeta: float) -> int:
    """Pixels next to a seam whose interpolation weight exceeds ``INTERIOR_WEIGHT``."""
    # lam = logistic(2 zeta (2l-1) (x - l - 1/2)); solve lam = INTERIOR_WEIGHT
    logit = math.log(INTERIOR_WEIGHT / (1.0 - INTERIOR_WEIGHT))
    d = -logit / (2.0 * zeta * (2 * l - 1))
    return int(min(math.ceil(d - 0.5), l // 4))


@dataclass
class TileGrid:
    """Row-major grid of square phase-field tiles; ``None`` marks an empty (void) tile."""

    phases: list  # rows x cols of (l, l) arrays or None
    rho_m: np.ndarray  # (rows, cols)
    descriptors: list | None = None
    seeds: list | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rho_m = np.asarray(self.rho_m, dtype=float)
        if self.rho_m.ndim != 2 or len(self.phases) != self.rho_m.shape[0]:
            raise ValueError("rho_m must be (rows, cols) and match the phase grid")
        size = None
        for row in self.phases:
            if len(row) != self.cols:
                raise ValueError("ragged tile grid")
            for p in row:
                if p is None:
                    continue
                p = np.asarray(p)
                if p.ndim != 2 or p.shape[0] != p.shape[1]:
                    raise ValueError("tiles must be square")
                if size is None:
                    size = p.shape[0]
                elif p.shape[0] != size:
                    raise ValueError("all tiles must share one size")
                if not np.all(np.isfinite(p)):
                    raise ValueError("tile phase fields must be finite")
        if size is None:
            raise ValueError("grid has no active tiles")
        if size < 8:
            raise ValueError("tile size must be at least 8")
        self._l = size

    @property
    def rows(self) -> int:
        return self.rho_m.shape[0]

    @property
    def cols(self) -> int:
        return self.rho_m.shape[1]

    @property
    def tile_size(self) -> int:
        return self._l

    def active(self, r: int, c: int) -> bool:
        return 0 <= r < self.rows and 0 <= c < self.cols and self.phases[r][c] is not None


def tiles_from_descriptors(descriptors, seeds, tile_size: int) -> TileGrid:
    """Reconstruct every tile of a (rows, cols) descriptor grid; ``None`` entries stay void."""
    phases, rho = [], []
    for drow, srow in zip(descriptors, seeds):
        prow, rrow = [], []
        for d, s in zip(drow, srow):
            if d is None:
                prow.append(None)
                rrow.append(0.0)
                continue
            noise = sample_white_noise(int(s), tile_size, tile_size)
            prow.append(reconstruct_phase_field(d, noise))
            rrow.append(d.rho_m)
        phases.append(prow)
        rho.append(rrow)
    return TileGrid(phases, np.array(rho), descriptors=descriptors, seeds=seeds)


def _tile_cut(phase: np.ndarray, rho: float, margin: int, sides) -> float:
    """Quantile cut on the part of a tile not touched by any active seam."""
    top, bottom, left, right = sides
    l = phase.shape[0]
    core = phase[margin * top : l - margin * bottom, margin * left : l - margin * right]
    return binarize(core, rho)[1]


def _blend_strip(fields, active, params: StitchParams, amp: bool, ax: int):
    """Blend a line of tiles along one axis; fields are same-shape arrays or None."""
    n = len(fields)
    if all(f is None for f in fields):
        return list(fields)
    l = next(f for f in fields if f is not None).shape[ax]
    local = np.arange(1, l + 1)
    half = local > l / 2  # second half of a tile pairs with the next tile
    x_next = local  # coordinate inside pair (i, i+1) for pixels of tile i
    x_prev = local + l  # coordinate inside pair (i-1, i) for pixels of tile i
    lam_next = interp_weight(x_next, l, params.zeta)
    lam_prev = interp_weight(x_prev, l, params.zeta)
    mul_next = amplify_factor(x_next, l, params)
    mul_prev = amplify_factor(x_prev, l, params)

    def shape(v):
        return v[:, None] if ax == 0 else v[None, :]

    out = []
    for i in range(n):
        f = fields[i]
        if f is None:
            out.append(None)
            continue
        g = f.copy()
        if i + 1 < n and active[i + 1]:
            lam = np.where(half, lam_next, 0.0)
            mix = (1.0 - shape(lam)) * f + shape(lam) * fields[i + 1]
            mul = np.where(half, mul_next, 1.0) if amp else np.ones(l)
            g = np.where(shape(half), shape(mul) * mix, g)
        if i > 0 and active[i - 1]:
            lam = np.where(~half, lam_prev, 1.0)
            mix = (1.0 - shape(lam)) * fields[i - 1] + shape(lam) * f
            mul = np.where(~half, mul_prev, 1.0) if amp else np.ones(l)
            g = np.where(shape(~half), shape(mul) * mix, g)
        out.append(g)
    return out


def assemble_global(tiles: TileGrid, params: StitchParams | None = None, return_cuts: bool = False):
    """Blend, amplify and binarize a tile grid into one (rows*l, cols*l) image.

    Solid pixels are 1. Each tile's cut is its own volume-fraction quantile on
    the interior away from active seams; seam pixels compare against the
    cut values blended with the same weights as the phase fields.
    """
    l = tiles.tile_size
    params = params or StitchParams.for_tile_size(l)
    R, Cn = tiles.rows, tiles.cols
    margin = seam_margin(l, params.zeta)

    fields = [[None] * Cn for _ in range(R)]
    cuts = [[None] * Cn for _ in range(R)]
    isolated = np.zeros((R, Cn), dtype=bool)
    for r in range(R):
        for c in range(Cn):
            if not tiles.active(r, c):
                continue
            phase = np.asarray(tiles.phases[r][c], dtype=float)
            sides = (tiles.active(r - 1, c), tiles.active(r + 1, c), tiles.active(r, c - 1), tiles.active(r, c + 1))
            centred = phase - phase.mean()
            fields[r][c] = centred
            isolated[r, c] = not any(sides)
            cuts[r][c] = _tile_cut(centred, float(tiles.rho_m[r, c]), margin, sides)

    act = np.array([[tiles.active(r, c) for c in range(Cn)] for r in range(R)])

    def cut_field(r, c):
        return None if cuts[r][c] is None else np.full((l, l), cuts[r][c])

    cut_maps = [[cut_field(r, c) for c in range(Cn)] for r in range(R)]
    for r in range(R):
        fields[r] = _blend_strip(fields[r], act[r], params, True, 1)
        cut_maps[r] = _blend_strip(cut_maps[r], act[r], params, False, 1)
    for c in range(Cn):
        col = _blend_strip([fields[r][c] for r in range(R)], act[:, c], params, True, 0)
        ccol = _blend_strip([cut_maps[r][c] for r in range(R)], act[:, c], params, False, 0)
        for r in range(R):
            fields[r][c] = col[r]
            cut_maps[r][c] = ccol[r]

    image = np.zeros((R * l, Cn * l), dtype=np.uint8)
    for r in range(R):
        for c in range(Cn):
            if not act[r, c]:
                continue
            if isolated[r, c]:
                block, cuts[r][c] = binarize(tiles.phases[r][c], float(tiles.rho_m[r, c]))
            else:
                block = (fields[r][c] <= cut_maps[r][c]).astype(np.uint8)
            image[r * l : (r + 1) * l, c * l : (c + 1) * l] = block
    if return_cuts:
        return image, np.array([[np.nan if v is None else v for v in row] for row in cuts])
    return image


def concatenate_tiles(tiles: TileGrid) -> np.ndarray:
    """Per-tile binarization placed side by side with no seam treatment."""
    l = tiles.tile_size
    image = np.zeros((tiles.rows * l, tiles.cols * l), dtype=np.uint8)
    for r in range(tiles.rows):
        for c in range(tiles.cols):
            if tiles.active(r, c):
                bits, _ = binarize(tiles.phases[r][c], float(tiles.rho_m[r, c]))
                image[r * l : (r + 1) * l, c * l : (c + 1) * l] = bits
    return image


def _descriptor_dict(d: SpinodoidDescriptor | None):
    if d is None:
        return None
    out = {"kind": d.kind.value, "rho_m": d.rho_m, "k": d.k, "gamma": d.gamma}
    for name in ("alpha_mon", "alpha1_ort", "alpha2_ort"):
        if getattr(d, name) is not None:
            out[name] = getattr(d, name)
    return out


def write_sidecar(path, tiles: TileGrid, cuts: np.ndarray, params: StitchParams, extra: dict | None = None):
    """Per-tile descriptor, seed and cut value as JSON next to an assembled image."""
    entries = []
    for r in range(tiles.rows):
        for c in range(tiles.cols):
            d = tiles.descriptors[r][c] if tiles.descriptors else None
            s = tiles.seeds[r][c] if tiles.seeds else None
            cut = cuts[r, c]
            entries.append({
                "row": r, "col": c, "active": tiles.active(r, c),
                "rho_m": float(tiles.rho_m[r, c]),
                "descriptor": _descriptor_dict(d),
                "seed": None if s is None else int(s),
                "cut": None if not np.isfinite(cut) else float(cut),
            })
    doc = {"schema": "spinodoid.tiles/1", "rows": tiles.rows, "cols": tiles.cols,
           "tile_size": tiles.tile_size,
           "params": {"zeta": params.zeta, "eta": params.eta, "tile_size": params.tile_size},
           "tiles": entries, **(extra or {})}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))
    return doc


def canonical_microstructures(rho_m: float = 0.7, k: float = 15.0) -> dict[str, SpinodoidDescriptor]:
    """Four reference microstructures: isotropic, two monoclinic, one orthotropic."""
    return {
        "isotropic": SpinodoidDescriptor("isotropic", rho_m, k),
        "monoclinic-a": SpinodoidDescriptor("monoclinic", rho_m, k, gamma=math.pi / 4, alpha_mon=0.5),
        "monoclinic-b": SpinodoidDescriptor("monoclinic", rho_m, k, gamma=2.0, alpha_mon=0.8),
        "orthotropic": SpinodoidDescriptor("orthotropic", rho_m, k, alpha1_ort=0.9, alpha2_ort=0.8),
    }


def seam_rrmse(desc: SpinodoidDescriptor, tile_size: int = 100, seeds=(1, 2, 3, 4),
               params: StitchParams | None = None, base=None) -> dict:
    """Homogenized constants of a 2x2 tile block before and after seam treatment.

    "Before" places the per-tile binarizations side by side; "after" is
    :func:`assemble_global`. Both are homogenized periodically and compared
    on the six independent Voigt entries, normalized by the treated ones.
    """
    from . import fem

    base = base or fem.BaseMaterial()
    params = params or StitchParams.for_tile_size(tile_size)
    s = list(seeds)
    tiles = tiles_from_descriptors([[desc, desc], [desc, desc]], [s[:2], s[2:]], tile_size)
    before = concatenate_tiles(tiles)
    after = assemble_global(tiles, params)
    iu = np.triu_indices(3)
    c_before = fem.homogenize(before, base)[iu]
    c_after = fem.homogenize(after, base)[iu]
    return {"before": c_before, "after": c_after, "rrmse": fem.rrmse(c_before, c_after),
            "images": (before, after)}
