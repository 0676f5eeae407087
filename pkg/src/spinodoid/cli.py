"""Command-line interface: ``spinodoid <command> [options]``.

Commands
    gen-dataset   build one class's data repository (CSV with JSON header)
    train-gp      fit one GP per constant, write model JSON and a test report
    optimize      run a preset or mesh-file design problem and export results
    render        re-render density/type/structure images from a design CSV
    stitch-demo   seam blending demo and the canonical before/after RRMSE report

Options may also come from a TOML file (``--config``); keys mirror the long
option names with dashes replaced by underscores, and unknown keys are
rejected. Command-line flags override the file.

Exit codes
    0  success
    1  unexpected internal error
    2  usage or configuration error
    3  missing or malformed input file
    4  finite element solver failure
    5  repository sample failure
    6  optimization diverged
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, fem
from .generation import SpinodoidClass, SpinodoidDescriptor

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger("spinodoid")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_INPUT, EXIT_SOLVER, EXIT_SAMPLE, EXIT_DIVERGED = range(7)


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


def _kinds(values) -> tuple[SpinodoidClass, ...]:
    if not values:
        return tuple(SpinodoidClass)
    out = []
    for v in values:
        for part in str(v).split(","):
            part = part.strip()
            if part:
                out.append(SpinodoidClass(part))
    return tuple(dict.fromkeys(out))


def _parse_descriptor(text: str) -> SpinodoidDescriptor:
    """``kind:key=value,key=value`` e.g. ``monoclinic:rho_m=0.5,k=15,gamma=0.7,alpha_mon=0.6``."""
    kind, _, rest = text.partition(":")
    kw = {}
    for item in filter(None, rest.split(",")):
        key, _, val = item.partition("=")
        kw[key.strip()] = float(val)
    try:
        return SpinodoidDescriptor(SpinodoidClass(kind.strip()), **kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad descriptor {text!r}: {exc}") from None


# --------------------------------------------------------------------------
# commands


def cmd_gen_dataset(args) -> int:
    from .surrogate import RepositoryError, build_repository

    try:
        ds = build_repository(
            args.kind, n=args.n, seed=args.seed, resolution=args.resolution,
            workers=args.workers, base=fem.BaseMaterial(args.E, args.nu),
            n_realizations=args.realizations, skip_failures=args.skip_failures,
        )
    except RepositoryError as exc:
        log.error("%s", exc)
        return EXIT_SAMPLE
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save(out)
    log.info("wrote %d samples to %s", len(ds), out)
    return EXIT_OK


def cmd_train_gp(args) -> int:
    from . import io as sio
    from .provenance import provenance
    from .surrogate import Dataset, fit_surrogates, held_out_rrmse

    try:
        ds = Dataset.load(args.dataset)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot read dataset {args.dataset}: {exc}") from None
    sur = fit_surrogates(ds, n_restarts=args.restarts, seed=args.seed)
    out = Path(args.out)
    paths = sur.save(out)
    test = ds.test
    pred = sur.predict(ds.raw[test])
    true = ds.constants[test]
    report = {
        "kind": ds.kind.value,
        "n_train": int(len(ds.train)),
        "n_test": int(len(test)),
        "rrmse": held_out_rrmse(sur, ds) if len(test) else None,
        "per_constant_rrmse": {n: fem.rrmse(pred[:, j], true[:, j]) for j, n in enumerate(sur.constant_names)} if len(test) else {},
        "loo_rmse": {n: m.loo_rmse for n, m in zip(sur.constant_names, sur.models)},
        "models": [p.name for p in paths],
        "provenance": provenance({"dataset": ds.meta.get("provenance", {}).get("config_hash"),
                                  "restarts": args.restarts, "seed": args.seed}),
    }
    (out / f"{ds.kind.value}_report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    scatter = {"sample": test}
    for j, n in enumerate(sur.constant_names):
        scatter[f"{n}_true"] = true[:, j]
        scatter[f"{n}_pred"] = pred[:, j]
    sio.write_table_csv(out / f"{ds.kind.value}_scatter.csv", scatter, report["provenance"])
    print(f"{ds.kind.value}: held-out RRMSE {report['rrmse']:.3e} over {len(test)} samples")
    return EXIT_OK


def _load_mesh(args) -> fem.QuadMesh:
    from .presets import preset_mesh

    if args.mesh:
        try:
            return fem.QuadMesh.load(args.mesh)
        except (OSError, ValueError, KeyError) as exc:
            raise InputError(f"cannot read mesh {args.mesh}: {exc}") from None
    try:
        return preset_mesh(args.preset)
    except KeyError as exc:
        raise UsageError(str(exc)) from None


def _load_surrogates(args, kinds):
    from .surrogate import SurrogateSet, default_surrogate_dir

    directory = Path(args.models) if args.models else default_surrogate_dir()
    try:
        return {k: SurrogateSet.load(directory, k) for k in kinds}
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot load surrogates from {directory}: {exc}") from None


def cmd_optimize(args) -> int:
    from . import topopt
    from .stitching import StitchParams

    if not args.preset and not args.mesh:
        raise UsageError("give --preset or --mesh")
    mesh = _load_mesh(args)
    kinds = _kinds(args.types)
    spec = topopt.ProblemSpec(
        mesh=mesh, target_volume=args.volume, allowed=kinds, iterations=args.iterations,
        learning_rate=args.lr, p_start=args.p_start, p_step=args.p_step, p_max=args.p_max,
        eta0=args.eta0, delta_eta=args.delta_eta, single_scale=args.single_scale, input_scale=args.input_scale,
        name=args.preset or Path(args.mesh).stem,
    )
    sur = _load_surrogates(args, spec.allowed)

    def report(state, ev):
        if state.iteration % 25 == 0:
            log.info("it %4d  p %.2f  J %.4e  g %+.4f  loss %.5f", state.iteration, state.p, ev.J, ev.g, ev.loss)

    try:
        state = topopt.optimize(spec, sur, seed=args.seed, callback=report)
    except topopt.DivergenceError as exc:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        exc.state.save_checkpoint(out / "diverged.json")
        log.error("%s (state written to %s)", exc, out / "diverged.json")
        return EXIT_DIVERGED
    final = topopt.final_evaluation(state, sur)
    stitch = StitchParams.for_tile_size(args.tile_size, eta=args.eta, reference=StitchParams(zeta=args.zeta))
    paths = topopt.export_design(state, args.out, tile_size=args.tile_size, render=not args.no_render, stitch=stitch)
    table = topopt.design_table(state)
    solid = table["solid"].astype(bool)
    types, counts = np.unique(table["type"][solid], return_counts=True)
    summary = {
        "J": final.J, "g": final.g, "loss": final.loss, "iterations": state.iteration + 1,
        "converged": state.converged, "p": state.p,
        "solid_elements": int(solid.sum()),
        "type_counts": {str(t): int(c) for t, c in zip(types, counts)},
        "outputs": {k: Path(v).name for k, v in paths.items()},
    }
    Path(args.out, "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    print(f"J = {final.J:.6e}  g = {final.g:+.5f}  types = {summary['type_counts']}")
    return EXIT_OK


def _grid_from_centroids(x, y):
    xs, ys = np.unique(np.round(x, 9)), np.unique(np.round(y, 9))
    if len(xs) * len(ys) != len(x):
        return None
    return len(xs), len(ys)


def cmd_render(args) -> int:
    from . import io as sio
    from .stitching import StitchParams, assemble_global, tiles_from_descriptors
    from .topopt import table_descriptors

    try:
        header, table = sio.read_table_csv(args.design)
    except (OSError, ValueError, IndexError) as exc:
        raise InputError(f"cannot read design {args.design}: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table["solid"] = table["solid"].astype(int)
    if args.mesh or args.preset:
        mesh = _load_mesh(args)
    else:
        grid = _grid_from_centroids(table["x"], table["y"])
        if grid is None:
            raise UsageError("design is not on a regular grid; pass --mesh or --preset")
        mesh = fem.rectangular_mesh(*grid)
    if mesh.n_elements != len(table["element"]):
        raise UsageError("mesh and design have different element counts")
    # sort rows into mesh element order
    order = np.argsort(table["element"])
    table = {k: v[order] for k, v in table.items()}
    sio.save_field_png(out / "density.png", sio.element_raster(mesh, table["rho_M"] * table["rho_m"]), header)
    sio.save_type_png(out / "types.png", mesh, table, header)
    legend = {k: list(v) for k, v in sio.TYPE_COLORS.items()}
    (out / "legend.json").write_text(json.dumps(legend, indent=1, sort_keys=True))
    if mesh.grid is not None:
        nelx, nely = mesh.grid
        l = args.tile_size
        descs = table_descriptors(table)
        grid = [[descs[(nely - 1 - r) * nelx + c] for c in range(nelx)] for r in range(nely)]
        seeds = [[args.seed * 1_000_003 + (nely - 1 - r) * nelx + c for c in range(nelx)] for r in range(nely)]
        if any(d is not None for row in grid for d in row):
            params = StitchParams.for_tile_size(l, eta=args.eta, reference=StitchParams(zeta=args.zeta))
            image = assemble_global(tiles_from_descriptors(grid, seeds, l), params)
        else:
            log.warning("design has no solid elements; structure image is blank")
            image = np.zeros((nely * l, nelx * l), dtype=np.uint8)
        sio.save_binary_png(out / "structure.png", image, header)
        print(f"structure {image.shape[1]}x{image.shape[0]} px from {mesh.n_elements} elements")
    return EXIT_OK


def cmd_stitch_demo(args) -> int:
    from . import io as sio
    from .provenance import provenance
    from .stitching import (StitchParams, TileGrid, assemble_global, canonical_microstructures,
                            seam_rrmse, tiles_from_descriptors)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    l = args.tile_size
    d1 = _parse_descriptor(args.left)
    d2 = _parse_descriptor(args.right)
    config = {"left": args.left, "right": args.right, "tile_size": l, "zeta": args.zeta,
              "etas": list(args.etas), "seed": args.seed}
    header = provenance(config)
    tiles = tiles_from_descriptors([[d1, d2]], [[args.seed, args.seed + 1]], l)
    lone = [TileGrid([[p]], [[r]]) for p, r in zip(tiles.phases[0], tiles.rho_m[0])]
    before = np.hstack([assemble_global(t) for t in lone])
    sio.save_binary_png(out / "before.png", before, header)
    report = {"pair": {}, "provenance": header}
    for eta in args.etas:
        params = StitchParams.for_tile_size(l, eta=eta, reference=StitchParams(zeta=args.zeta))
        img = assemble_global(tiles, params)
        sio.save_binary_png(out / f"after_eta{eta:g}.png", img, header)
        band = img[:, l - 2 : l + 2]
        report["pair"][f"{eta:g}"] = {"solid_fraction": float(img.mean()), "seam_band_fraction": float(band.mean())}
    if args.canonical:
        report["canonical"] = {}
        params = StitchParams.for_tile_size(args.canonical_tile, reference=StitchParams(zeta=args.zeta, eta=args.etas[-1]))
        params = StitchParams(zeta=params.zeta, eta=args.etas[-1], tile_size=params.tile_size)
        for name, d in canonical_microstructures().items():
            r = seam_rrmse(d, tile_size=args.canonical_tile, params=params)
            report["canonical"][name] = {"rrmse": r["rrmse"], "before": r["before"].tolist(), "after": r["after"].tolist()}
            print(f"{name:14s} RRMSE {r['rrmse']:.4f}")
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _common(p):
    p.add_argument("--config", help="TOML file with option defaults")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spinodoid", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dataset", help="build a data repository for one spinodoid class")
    _common(p)
    p.add_argument("--kind", required=False, default="isotropic", choices=[k.value for k in SpinodoidClass])
    p.add_argument("--n", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=100)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--realizations", type=int, default=1, help="noise seeds averaged per sample")
    p.add_argument("--E", type=float, default=1e9)
    p.add_argument("--nu", type=float, default=0.35)
    p.add_argument("--skip-failures", action="store_true")
    p.add_argument("--out", required=False, default="dataset.csv")
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train-gp", help="fit per-constant GP surrogates on a dataset")
    _common(p)
    p.add_argument("--dataset", required=False)
    p.add_argument("--out", default="models")
    p.add_argument("--restarts", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_gp)

    p = sub.add_parser("optimize", help="run a multiscale design problem")
    _common(p)
    p.add_argument("--preset", help="tensile-bar, bending-beam, multi-load-tension, multi-load-bending, prosthesis")
    p.add_argument("--mesh", help="mesh JSON file (overrides --preset)")
    p.add_argument("--types", nargs="*", help="allowed spinodoid types (default: all)")
    p.add_argument("--single-scale", action="store_true", help="solid/void baseline at the 70%% modulus")
    p.add_argument("--volume", type=float, default=0.3)
    p.add_argument("--iterations", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--input-scale", type=float, default=20.0, help="first-layer weight stretch")
    p.add_argument("--p-start", type=float, default=1.0)
    p.add_argument("--p-step", type=float, default=0.02)
    p.add_argument("--p-max", type=float, default=8.0)
    p.add_argument("--eta0", type=float, default=0.05)
    p.add_argument("--delta-eta", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--models", help="surrogate directory (default: bundled models)")
    p.add_argument("--tile-size", type=int, default=100)
    p.add_argument("--zeta", type=float, default=5e-5, help="interpolation constant at 500-pixel tiles")
    p.add_argument("--eta", type=float, default=10.0)
    p.add_argument("--no-render", action="store_true")
    p.add_argument("--out", default="design")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("render", help="render images from a design CSV")
    _common(p)
    p.add_argument("--design", required=False)
    p.add_argument("--preset")
    p.add_argument("--mesh")
    p.add_argument("--tile-size", type=int, default=100)
    p.add_argument("--zeta", type=float, default=5e-5)
    p.add_argument("--eta", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="render")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("stitch-demo", help="seam treatment demo and RRMSE report")
    _common(p)
    p.add_argument("--left", default="isotropic:rho_m=0.5,k=15")
    p.add_argument("--right", default="isotropic:rho_m=0.8,k=15")
    p.add_argument("--tile-size", type=int, default=100)
    p.add_argument("--zeta", type=float, default=5e-5, help="interpolation constant at 500-pixel tiles")
    p.add_argument("--etas", type=float, nargs="+", default=[0.0, 1.0, 10.0])
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--canonical", action="store_true", help="also run the four-microstructure RRMSE report")
    p.add_argument("--canonical-tile", type=int, default=100)
    p.add_argument("--out", default="stitch")
    p.set_defaults(func=cmd_stitch_demo)
    return parser


REQUIRED = {"gen-dataset": ("kind", "out"), "train-gp": ("dataset",), "render": ("design",)}


def _apply_config(parser, sub_args, argv_cmd_tokens, args):
    """Merge TOML values under command-line flags; reject unknown keys."""
    path = args.config
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"invalid TOML in {path}: {exc}") from None
    section = data.get(args.command, data)
    if section is not data:
        extra = set(data) - {args.command}
        if extra:
            raise UsageError(f"unknown config sections: {sorted(extra)}")
    known = {a.dest for a in sub_args._actions} - {"help", "config", "verbose"}
    explicit = {a.dest for a in sub_args._actions for opt in a.option_strings if opt in argv_cmd_tokens}
    for key, value in section.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        if dest not in explicit:
            setattr(args, dest, value)


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            sub_parser = parser._subparsers._group_actions[0].choices[args.command]
            flags = [t.split("=")[0] for t in argv]
            _apply_config(parser, sub_parser, flags, args)
        for key in REQUIRED.get(args.command, ()):
            if getattr(args, key, None) in (None, ""):
                raise UsageError(f"--{key.replace('_', '-')} is required")
        if args.command == "stitch-demo" and args.etas is not None:
            args.etas = [float(e) for e in args.etas]
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except fem.SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # pragma: no cover
        log.exception("unexpected failure")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
