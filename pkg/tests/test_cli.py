import json

import numpy as np
import pytest

from spinodoid import fem, io as sio, presets
from spinodoid.cli import (
    EXIT_DIVERGED,
    EXIT_INPUT,
    EXIT_OK,
    EXIT_SAMPLE,
    EXIT_USAGE,
    main,
)


@pytest.fixture(scope="module")
def small_mesh(tmp_path_factory):
    path = tmp_path_factory.mktemp("mesh") / "bar.json"
    presets.tensile_bar(force=1e5, nelx=6, nely=3).save(path)
    return path


def files(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.suffix in (".csv", ".json")}


def test_version(capsys):
    assert main(["--version"]) == 0
    assert "spinodoid" in capsys.readouterr().out


def test_gen_dataset_is_byte_identical(tmp_path):
    args = ["gen-dataset", "--kind", "isotropic", "--n", "4", "--resolution", "64", "--seed", "2"]
    assert main([*args, "--out", str(tmp_path / "a.csv")]) == EXIT_OK
    assert main([*args, "--out", str(tmp_path / "b.csv")]) == EXIT_OK
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes()
    lines = a.decode().splitlines()
    assert len(lines) == 2 + 4
    assert lines[1] == "sample,noise_seed,rho_m,k,s_rho_m,s_k,mu,lambda"


def test_gen_dataset_sample_failure(tmp_path):
    # k reaches 30, above Nyquist on a 32-pixel grid
    rc = main(["gen-dataset", "--kind", "isotropic", "--n", "6", "--resolution", "32", "--out", str(tmp_path / "d.csv")])
    assert rc == EXIT_SAMPLE
    rc = main(["gen-dataset", "--kind", "isotropic", "--n", "6", "--resolution", "32", "--skip-failures",
               "--out", str(tmp_path / "d.csv")])
    assert rc == EXIT_OK


@pytest.mark.parametrize("kind, count", [("isotropic", 2), ("monoclinic", 6), ("orthotropic", 4)])
def test_train_gp_writes_one_model_per_constant(tmp_path, kind, count):
    ds = tmp_path / "d.csv"
    assert main(["gen-dataset", "--kind", kind, "--n", "8", "--resolution", "64", "--out", str(ds)]) == EXIT_OK
    out = tmp_path / "models"
    assert main(["train-gp", "--dataset", str(ds), "--out", str(out), "--restarts", "2"]) == EXIT_OK
    assert len(list(out.glob(f"{kind}_*.json"))) == count + 1  # models plus the report
    report = json.loads((out / f"{kind}_report.json").read_text())
    assert report["n_test"] + report["n_train"] == 8
    assert (out / f"{kind}_scatter.csv").exists()


def test_train_gp_is_byte_identical(tmp_path):
    ds = tmp_path / "d.csv"
    main(["gen-dataset", "--kind", "isotropic", "--n", "8", "--resolution", "64", "--out", str(ds)])
    main(["train-gp", "--dataset", str(ds), "--out", str(tmp_path / "a"), "--restarts", "2"])
    main(["train-gp", "--dataset", str(ds), "--out", str(tmp_path / "b"), "--restarts", "2"])
    assert files(tmp_path / "a") == files(tmp_path / "b")


def test_optimize_and_render_are_byte_identical(tmp_path, small_mesh):
    args = ["optimize", "--mesh", str(small_mesh), "--iterations", "5", "--tile-size", "64", "--seed", "4"]
    assert main([*args, "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main([*args, "--out", str(tmp_path / "b")]) == EXIT_OK
    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    assert a == b
    assert {"design.csv", "history.csv", "checkpoint.json", "summary.json"} <= set(a)
    summary = json.loads(a["summary.json"])
    assert summary["iterations"] == 5
    _, hist = sio.read_table_csv(tmp_path / "a" / "history.csv")
    assert list(hist["iteration"]) == [0, 1, 2, 3, 4]

    r = ["render", "--design", str(tmp_path / "a" / "design.csv"), "--tile-size", "64"]
    assert main([*r, "--out", str(tmp_path / "ra")]) == EXIT_OK
    assert main([*r, "--out", str(tmp_path / "rb")]) == EXIT_OK
    assert files(tmp_path / "ra") == files(tmp_path / "rb")
    assert (tmp_path / "ra" / "structure.png").read_bytes() == (tmp_path / "rb" / "structure.png").read_bytes()
    img = sio.load_binary_png(tmp_path / "ra" / "structure.png")
    assert img.shape == (3 * 64, 6 * 64)


def test_render_single_element(tmp_path):
    table = {"element": [0], "x": [0.5], "y": [0.5], "t_isotropic": [1.0], "t_monoclinic": [0.0],
             "t_orthotropic": [0.0], "rho_M": [0.9], "rho_m": [0.5], "k": [15.0], "gamma": [0.0],
             "alpha_mon": [0.7], "alpha1_ort": [0.8], "alpha2_ort": [0.8], "type": ["isotropic"], "solid": [1]}
    sio.write_table_csv(tmp_path / "d.csv", table)
    assert main(["render", "--design", str(tmp_path / "d.csv"), "--tile-size", "64", "--out", str(tmp_path / "r")]) == 0
    img = sio.load_binary_png(tmp_path / "r" / "structure.png")
    assert img.shape == (64, 64) and abs(img.mean() - 0.5) < 1e-3


def test_config_file_supplies_defaults(tmp_path, small_mesh):
    cfg = tmp_path / "run.toml"
    cfg.write_text(f'[optimize]\nmesh = "{small_mesh}"\niterations = 2\ntypes = ["monoclinic"]\nno_render = true\n')
    assert main(["optimize", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["iterations"] == 2
    assert set(summary["type_counts"]) <= {"monoclinic"}


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text("[optimize]\nlearning_rat = 0.1\n")
    assert main(["optimize", "--preset", "tensile-bar", "--config", str(cfg)]) == EXIT_USAGE


def test_usage_errors(tmp_path):
    assert main(["optimize", "--preset", "bridge", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["optimize", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["train-gp"]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE


def test_missing_inputs(tmp_path):
    assert main(["train-gp", "--dataset", str(tmp_path / "none.csv")]) == EXIT_INPUT
    assert main(["optimize", "--mesh", str(tmp_path / "none.json")]) == EXIT_INPUT
    assert main(["render", "--design", str(tmp_path / "none.csv")]) == EXIT_INPUT


def test_divergence_exit_code(tmp_path):
    m = presets.tensile_bar(nelx=4, nely=2)
    loads = m.loads.copy()
    loads[loads != 0] = np.inf
    bad = fem.QuadMesh(m.nodes, m.elements, m.fixed_dofs, loads, grid=m.grid)
    bad.save(tmp_path / "bad.json")
    rc = main(["optimize", "--mesh", str(tmp_path / "bad.json"), "--iterations", "2", "--out", str(tmp_path / "o")])
    assert rc in (EXIT_DIVERGED, 4)


def test_stitch_demo(tmp_path):
    out = tmp_path / "s"
    assert main(["stitch-demo", "--tile-size", "64", "--etas", "0", "10", "--out", str(out)]) == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert set(report["pair"]) == {"0", "10"}
    band = report["pair"]["10"]["seam_band_fraction"]
    assert 0.5 < band < 0.8
    assert (out / "before.png").exists() and (out / "after_eta10.png").exists()
