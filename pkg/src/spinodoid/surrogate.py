"""Spinodoid data repository and per-class Gaussian-process surrogates.

Datasets are generated in the material frame (gamma = 0); the rotation angle
is applied to predicted tensors downstream, so GP inputs never include it.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from . import fem
from .generation import SQRT2_2, SpinodoidClass, SpinodoidDescriptor, binarize, reconstruct_phase_field, sample_white_noise
from .gp import GPModel, gp_fit
from .provenance import provenance

log = logging.getLogger(__name__)

__all__ = [
    "DESIGN_BOUNDS",
    "RepositoryError",
    "Dataset",
    "SurrogateSet",
    "descriptor_names",
    "normalize",
    "denormalize",
    "doe_sample",
    "sample_seed",
    "homogenize_descriptor",
    "build_repository",
    "fit_surrogates",
]

DATASET_SCHEMA = "spinodoid.dataset/1"

# material-frame descriptor boxes; gamma is excluded on purpose
DESIGN_BOUNDS: dict[SpinodoidClass, dict[str, tuple[float, float]]] = {
    SpinodoidClass.ISOTROPIC: {"rho_m": (0.0, 1.0), "k": (10.0, 30.0)},
    SpinodoidClass.MONOCLINIC: {"rho_m": (0.0, 1.0), "k": (10.0, 30.0), "alpha_mon": (0.0, 1.0)},
    SpinodoidClass.ORTHOTROPIC: {
        "rho_m": (0.0, 1.0),
        "k": (10.0, 30.0),
        "alpha1_ort": (SQRT2_2, 1.0),
        "alpha2_ort": (SQRT2_2, 1.0),
    },
}


class RepositoryError(RuntimeError):
    def __init__(self, index: int, cause: BaseException):
        super().__init__(f"sample {index} failed: {cause}")
        self.index = index
        self.cause = cause


def descriptor_names(kind) -> tuple[str, ...]:
    return tuple(DESIGN_BOUNDS[SpinodoidClass(kind)])


def _bounds_array(kind) -> np.ndarray:
    return np.array(list(DESIGN_BOUNDS[SpinodoidClass(kind)].values()))


def normalize(kind, raw) -> np.ndarray:
    b = _bounds_array(kind)
    return (np.asarray(raw, dtype=float) - b[:, 0]) / (b[:, 1] - b[:, 0])


def denormalize(kind, s) -> np.ndarray:
    b = _bounds_array(kind)
    return b[:, 0] + np.asarray(s, dtype=float) * (b[:, 1] - b[:, 0])


def descriptor_from_vector(kind, raw) -> SpinodoidDescriptor:
    kind = SpinodoidClass(kind)
    values = dict(zip(descriptor_names(kind), (float(v) for v in raw)))
    return SpinodoidDescriptor(kind, gamma=0.0, **values)


def descriptor_vector(desc: SpinodoidDescriptor) -> np.ndarray:
    return np.array([getattr(desc, n) for n in descriptor_names(desc.kind)], dtype=float)


def doe_sample(kind, n: int, seed: int) -> list[SpinodoidDescriptor]:
    """Latin-hypercube design over the class's material-frame box."""
    if n < 2:
        raise ValueError("a design needs at least two points")
    kind = SpinodoidClass(kind)
    d = len(DESIGN_BOUNDS[kind])
    unit = qmc.LatinHypercube(d=d, seed=np.random.default_rng([seed, kind.index])).random(n)
    raw = denormalize(kind, unit)
    # keep bound-exact values inside the box after the affine map
    b = _bounds_array(kind)
    raw = np.clip(raw, b[:, 0], b[:, 1])
    return [descriptor_from_vector(kind, row) for row in raw]


def sample_seed(seed: int, kind, index: int) -> int:
    """Noise seed of one repository sample: a per-(seed, class) base plus the index."""
    base = int(np.random.SeedSequence([seed, SpinodoidClass(kind).index]).generate_state(1, np.uint32)[0])
    return base + index


def homogenize_descriptor(
    desc: SpinodoidDescriptor,
    noise_seed: int,
    resolution: int = 100,
    base: fem.BaseMaterial = fem.BaseMaterial(),
    n_realizations: int = 1,
) -> np.ndarray:
    """Reconstruct, binarize and homogenize; averaged over ``n_realizations`` seeds."""
    tensors = []
    for r in range(n_realizations):
        noise = sample_white_noise(noise_seed + r * 7919, resolution, resolution)
        phase = reconstruct_phase_field(desc, noise)
        bits, _ = binarize(phase, desc.rho_m)
        if not bits.any():
            # densities below one pixel quantum keep a single solid seed pixel
            bits.flat[np.argmin(phase)] = 1
        tensors.append(fem.homogenize(bits, base))
    return np.mean(tensors, axis=0)


def _sample_job(args):
    index, kind, raw, noise_seed, resolution, E, nu, n_real = args
    desc = descriptor_from_vector(kind, raw)
    try:
        C = homogenize_descriptor(desc, noise_seed, resolution, fem.BaseMaterial(E, nu), n_real)
        vec, _ = fem.reduce_constants(C, kind)
        return index, vec, None
    except Exception as exc:  # reported with the sample index by the caller
        return index, None, f"{type(exc).__name__}: {exc}"


@dataclass
class Dataset:
    """Descriptors and homogenized constants for one spinodoid class."""

    kind: SpinodoidClass
    raw: np.ndarray  # (n, d) descriptors
    constants: np.ndarray  # (n, c) class-reduced constants, Pa
    noise_seeds: np.ndarray
    train: np.ndarray
    test: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = SpinodoidClass(self.kind)

    @property
    def normalized(self) -> np.ndarray:
        return normalize(self.kind, self.raw)

    @property
    def constant_names(self) -> tuple[str, ...]:
        return fem.constant_names(self.kind)

    def __len__(self):
        return len(self.raw)

    def to_csv(self) -> str:
        names = descriptor_names(self.kind)
        header = {
            "schema": DATASET_SCHEMA,
            "kind": self.kind.value,
            "bounds": {k: list(v) for k, v in DESIGN_BOUNDS[self.kind].items()},
            "train": self.train.tolist(),
            "test": self.test.tolist(),
            **self.meta,
        }
        buf = io.StringIO()
        buf.write("# " + json.dumps(header, sort_keys=True) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample", "noise_seed", *names, *(f"s_{n}" for n in names), *self.constant_names])
        s = self.normalized
        for i in range(len(self)):
            w.writerow([i, int(self.noise_seeds[i]), *map(repr, map(float, self.raw[i])),
                        *map(repr, map(float, s[i])), *map(repr, map(float, self.constants[i]))])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path) -> "Dataset":
        text = Path(path).read_text()
        first, _, body = text.partition("\n")
        if not first.startswith("# "):
            raise ValueError(f"{path}: missing JSON metadata header")
        header = json.loads(first[2:])
        if header.get("schema") != DATASET_SCHEMA:
            raise ValueError(f"{path}: unsupported dataset schema")
        kind = SpinodoidClass(header.pop("kind"))
        rows = list(csv.reader(io.StringIO(body)))
        cols = rows[0]
        data = np.array([[float(v) for v in r] for r in rows[1:]]) if len(rows) > 1 else np.zeros((0, len(cols)))
        names = descriptor_names(kind)
        idx = lambda n: cols.index(n)  # noqa: E731
        raw = data[:, [idx(n) for n in names]]
        consts = data[:, [idx(n) for n in fem.constant_names(kind)]]
        seeds = data[:, idx("noise_seed")].astype(np.int64)
        train = np.asarray(header.pop("train"), dtype=np.int64)
        test = np.asarray(header.pop("test"), dtype=np.int64)
        header.pop("schema")
        header.pop("bounds", None)
        return cls(kind, raw, consts, seeds, train, test, header)


def build_repository(
    kind,
    n: int = 600,
    seed: int = 0,
    resolution: int = 100,
    n_test: int | None = None,
    workers: int = 1,
    base: fem.BaseMaterial = fem.BaseMaterial(),
    n_realizations: int = 1,
    skip_failures: bool = False,
    indices=None,
) -> Dataset:
    """DoE -> reconstruction -> homogenization -> constants for one class.

    ``indices`` restricts the work to a subset of the design (used to spot
    check a stored repository); the design itself always has ``n`` points.
    """
    kind = SpinodoidClass(kind)
    descs = doe_sample(kind, n, seed)
    raw = np.array([descriptor_vector(d) for d in descs])
    seeds = np.array([sample_seed(seed, kind, i) for i in range(n)], dtype=np.int64)
    chosen = np.arange(n) if indices is None else np.asarray(sorted(set(int(i) for i in indices)))
    jobs = [(int(i), kind.value, raw[i], int(seeds[i]), resolution, base.E, base.nu, n_realizations) for i in chosen]

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sample_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_sample_job(j) for j in jobs]

    n_const = len(fem.constant_names(kind))
    constants = np.full((len(chosen), n_const), np.nan)
    keep = []
    for row, (i, vec, err) in enumerate(results):
        if err is not None:
            if not skip_failures:
                raise RepositoryError(i, RuntimeError(err))
            log.warning("skipping sample %d: %s", i, err)
            continue
        constants[row] = vec
        keep.append(row)
    keep = np.asarray(keep, dtype=np.int64)

    n_test = max(1, round(n / 6)) if n_test is None else n_test
    perm = np.random.default_rng([seed, kind.index, 1]).permutation(n)
    test_all, train_all = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    kept_ids = chosen[keep]
    remap = {int(s): r for r, s in enumerate(kept_ids)}
    train = np.array([remap[i] for i in train_all if i in remap], dtype=np.int64)
    test = np.array([remap[i] for i in test_all if i in remap], dtype=np.int64)

    config = {"kind": kind.value, "n": n, "seed": seed, "resolution": resolution,
              "E": base.E, "nu": base.nu, "n_realizations": n_realizations}
    meta = {**config, "samples": kept_ids.tolist() if indices is not None else None,
            "provenance": provenance(config)}
    return Dataset(kind, raw[kept_ids], constants[keep], seeds[kept_ids], train, test, meta)


# --------------------------------------------------------------------------
# surrogates


@dataclass
class SurrogateSet:
    """One fitted GP per class-reduced constant, predicting from raw descriptors."""

    kind: SpinodoidClass
    models: list[GPModel]

    def __post_init__(self):
        self.kind = SpinodoidClass(self.kind)
        if len(self.models) != len(fem.constant_names(self.kind)):
            raise ValueError("one model per constant is required")
        self._lo = _bounds_array(self.kind)[:, 0]
        self._span = _bounds_array(self.kind)[:, 1] - self._lo

    @property
    def constant_names(self) -> tuple[str, ...]:
        return fem.constant_names(self.kind)

    def predict(self, raw, with_grad: bool = False):
        """Constants at raw descriptors (m, d) -> (m, c) and optionally d/draw (m, c, d)."""
        raw = np.atleast_2d(np.asarray(raw, dtype=float))
        s = (raw - self._lo) / self._span
        if not with_grad:
            return np.stack([m.predict(s) for m in self.models], axis=1)
        vals, grads = zip(*(m.predict_with_grad(s) for m in self.models))
        return np.stack(vals, axis=1), np.stack(grads, axis=1) / self._span

    def tensors(self, raw) -> np.ndarray:
        q = self.predict(raw)
        basis = fem.expansion_basis(self.kind)
        return np.einsum("mc,cij->mij", q, basis)

    def save(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, model in zip(self.constant_names, self.models):
            p = directory / f"{self.kind.value}_{name}.json"
            model.save(p, extra={"kind": self.kind.value, "constant": name,
                                 "bounds": {k: list(v) for k, v in DESIGN_BOUNDS[self.kind].items()}})
            paths.append(p)
        return paths

    @classmethod
    def load(cls, directory, kind) -> "SurrogateSet":
        kind = SpinodoidClass(kind)
        directory = Path(directory)
        models = [GPModel.load(directory / f"{kind.value}_{n}.json") for n in fem.constant_names(kind)]
        return cls(kind, models)


def fit_surrogates(dataset: Dataset, n_restarts: int = 8, seed: int = 0) -> SurrogateSet:
    X = dataset.normalized[dataset.train]
    models = []
    for j, name in enumerate(dataset.constant_names):
        log.info("fitting %s %s on %d samples", dataset.kind.value, name, len(X))
        models.append(gp_fit(X, dataset.constants[dataset.train, j], n_restarts=n_restarts, seed=seed + j))
    return SurrogateSet(dataset.kind, models)


def held_out_rrmse(surrogates: SurrogateSet, dataset: Dataset) -> float:
    """Relative RMS error of all predicted constants on the test split."""
    pred = surrogates.predict(dataset.raw[dataset.test])
    return fem.rrmse(pred, dataset.constants[dataset.test])


def default_surrogate_dir() -> Path:
    return Path(__file__).parent / "data" / "models"


def default_dataset_path(kind) -> Path:
    return Path(__file__).parent / "data" / f"{SpinodoidClass(kind).value}.csv"


def load_default_surrogates(kinds=tuple(SpinodoidClass)) -> dict[SpinodoidClass, SurrogateSet]:
    return {SpinodoidClass(k): SurrogateSet.load(default_surrogate_dir(), k) for k in kinds}

