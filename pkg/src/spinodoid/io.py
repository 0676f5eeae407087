"""File formats: provenance-headed CSV tables, PNG renders and RLE text.

Image convention: solid pixels are black (0), void pixels white (255).
Every PNG carries the JSON provenance block in a ``provenance`` text chunk;
every CSV starts with a ``# {json}`` line.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from PIL.PngImagePlugin import PngInfo

from . import fem

SOLID, VOID = 0, 255

# type-map legend, RGB
TYPE_COLORS = {
    "isotropic": (46, 160, 67),
    "monoclinic": (214, 39, 40),
    "orthotropic": (31, 119, 180),
    "void": (255, 255, 255),
}


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_table_csv(path, table: dict, header: dict | None = None) -> None:
    """Columns of equal length, floats written with full round-trip precision."""
    cols = list(table)
    n = {len(np.atleast_1d(table[c])) for c in cols}
    if len(n) > 1:
        raise ValueError("table columns differ in length")
    buf = io.StringIO()
    if header is not None:
        buf.write("# " + json.dumps(header, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    arrays = [np.atleast_1d(table[c]) for c in cols]
    for row in zip(*arrays):
        w.writerow([_fmt(v) for v in row])
    Path(path).write_text(buf.getvalue())


def read_table_csv(path) -> tuple[dict, dict]:
    """Inverse of :func:`write_table_csv`; numeric columns come back as float arrays."""
    text = Path(path).read_text()
    header = {}
    if text.startswith("# "):
        first, _, text = text.partition("\n")
        header = json.loads(first[2:])
    rows = list(csv.reader(io.StringIO(text)))
    cols = rows[0]
    table = {}
    for j, c in enumerate(cols):
        vals = [r[j] for r in rows[1:]]
        try:
            table[c] = np.array([float(v) for v in vals])
        except ValueError:
            table[c] = np.array(vals)
    return header, table


def _pnginfo(header: dict | None) -> PngInfo | None:
    if header is None:
        return None
    info = PngInfo()
    info.add_text("provenance", json.dumps(header, sort_keys=True))
    return info


def save_binary_png(path, bits: np.ndarray, header: dict | None = None) -> None:
    bits = np.asarray(bits)
    img = np.where(bits.astype(bool), SOLID, VOID).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path, pnginfo=_pnginfo(header))


def load_binary_png(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("L"))
    return (img < 128).astype(np.uint8)


def png_provenance(path) -> dict | None:
    text = Image.open(path).text.get("provenance")
    return None if text is None else json.loads(text)


def save_field_png(path, values: np.ndarray, header: dict | None = None) -> None:
    """Gray image of a [0, 1] density map; 1 renders black."""
    v = np.clip(np.nan_to_num(np.asarray(values, dtype=float), nan=0.0), 0.0, 1.0)
    img = np.round(255.0 * (1.0 - v)).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path, pnginfo=_pnginfo(header))


def element_raster(mesh: fem.QuadMesh, values, pixels_per_unit: float = 8.0, fill=np.nan) -> np.ndarray:
    """Per-element values on an image grid (row 0 at the top).

    Structured meshes map one element to one pixel; other meshes are
    rasterized polygon by polygon.
    """
    values = np.asarray(values)
    if mesh.grid is not None:
        nelx, nely = mesh.grid
        return values.reshape(nely, nelx)[::-1]
    lo = mesh.nodes.min(axis=0)
    span = mesh.nodes.max(axis=0) - lo
    W = max(1, int(np.ceil(span[0] * pixels_per_unit)))
    H = max(1, int(np.ceil(span[1] * pixels_per_unit)))
    index = Image.new("I", (W, H), -1)
    draw = ImageDraw.Draw(index)
    for e, quad in enumerate(mesh.elements):
        pts = (mesh.nodes[quad] - lo) * pixels_per_unit
        draw.polygon([(float(x), float(H - y)) for x, y in pts], fill=e)
    idx = np.asarray(index)
    out = np.full(idx.shape, fill, dtype=values.dtype if values.dtype.kind != "f" else float)
    hit = idx >= 0
    out[hit] = values[idx[hit]]
    return out


def save_type_png(path, mesh: fem.QuadMesh, table: dict, header: dict | None = None, scale: int = 8) -> None:
    """Colour map of the selected type per element; void elements are white."""
    names = np.where(np.asarray(table["solid"]).astype(bool), np.asarray(table["type"]), "void")
    codes = {k: i for i, k in enumerate(TYPE_COLORS)}
    idx = np.array([codes[str(n)] for n in names])
    raster = element_raster(mesh, idx.astype(float))
    raster = np.nan_to_num(raster, nan=codes["void"]).astype(int)
    palette = np.array(list(TYPE_COLORS.values()), dtype=np.uint8)
    rgb = palette[raster]
    if mesh.grid is not None and scale > 1:
        rgb = np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)
    Image.fromarray(rgb, mode="RGB").save(path, pnginfo=_pnginfo(header))


def rle_encode(bits: np.ndarray) -> str:
    """Row-major run lengths, first run counts void pixels: ``H W\\nr1 r2 ...``."""
    bits = np.asarray(bits).astype(bool)
    flat = bits.ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return f"{bits.shape[0]} {bits.shape[1]}\n" + " ".join(map(str, runs)) + "\n"


def rle_decode(text: str) -> np.ndarray:
    head, _, body = text.strip().partition("\n")
    h, w = map(int, head.split())
    runs = [int(v) for v in body.split()]
    values = np.arange(len(runs)) % 2
    flat = np.repeat(values, runs).astype(np.uint8)
    if flat.size != h * w:
        raise ValueError("run lengths do not cover the image")
    return flat.reshape(h, w)
