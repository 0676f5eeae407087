import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spinodoid import fem, presets, topopt
from spinodoid.generation import SpinodoidClass
from spinodoid.surrogate import load_default_surrogates
from spinodoid.topopt import (
    FIELD_NAMES,
    RANGES,
    DesignNet,
    ProblemSpec,
    evaluate,
    forward_fields,
    loss,
    objective_and_constraint,
    optimize,
    penalized_moduli,
    spd_floor,
    spd_floor_vjp,
    start_uniform,
)

ISO, MONO, ORTHO = SpinodoidClass


@pytest.fixture(scope="module")
def surrogates():
    return load_default_surrogates()


def small_bar():
    return presets.tensile_bar(force=1e5, nelx=8, nely=4)


def net_with_outputs(**values):
    """All-zero network whose constant outputs put each named field at ``values``."""
    net = DesignNet.zeros()
    b2 = net.b2.copy()
    for name, v in values.items():
        lo, hi = RANGES[name]
        y = (v - lo) / (hi - lo)
        b2[3 + FIELD_NAMES.index(name)] = math.log(y / (1 - y)) if 0 < y < 1 else math.copysign(800, y - 0.5)
    return DesignNet(net.W1, net.b1, net.W2, b2)


def random_net(seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return DesignNet.from_vector(scale * rng.normal(size=DesignNet.size()))


# -- design fields --------------------------------------------------------------


def test_zero_network_gives_range_midpoints():
    f = forward_fields(DesignNet.zeros(), np.random.default_rng(0).random((7, 2)))
    np.testing.assert_allclose(f.t, 1 / 3)
    assert np.all(f["rho_M"] == 0.5)
    assert np.all(f["rho_m"] == 0.5)
    np.testing.assert_allclose(f["alpha_mon"], 0.7)
    np.testing.assert_allclose(f["k"], 20.0)
    np.testing.assert_allclose(f["gamma"], math.pi / 2)


def test_single_allowed_type_takes_all_weight():
    f = forward_fields(random_net(1), np.random.default_rng(0).random((9, 2)), allowed=[MONO])
    np.testing.assert_array_equal(f.t, np.tile([0.0, 1.0, 0.0], (9, 1)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(0.01, 50))
def test_fields_stay_in_range_for_any_weights(seed, scale):
    f = forward_fields(random_net(seed, scale), np.random.default_rng(seed).random((12, 2)))
    assert np.all(np.abs(f.t.sum(axis=1) - 1) <= 1e-12)
    assert np.all(f.t >= 0)
    for name, (lo, hi) in RANGES.items():
        assert np.all((f[name] >= lo) & (f[name] <= hi)), name


def test_net_vector_round_trip():
    net = random_net(3)
    back = DesignNet.from_vector(net.to_vector())
    np.testing.assert_array_equal(back.to_vector(), net.to_vector())
    np.testing.assert_array_equal(DesignNet.from_dict(net.to_dict()).to_vector(), net.to_vector())
    assert DesignNet.size() == 2 * 20 + 20 + 20 * 10 + 10


def test_init_is_seeded():
    np.testing.assert_array_equal(DesignNet.init(4).to_vector(), DesignNet.init(4).to_vector())
    assert not np.array_equal(DesignNet.init(4).to_vector(), DesignNet.init(5).to_vector())


def test_glorot_bounds():
    net = DesignNet.init(0, input_scale=1.0)
    assert np.abs(net.W1).max() <= math.sqrt(6 / 22)
    assert np.abs(net.W2).max() <= math.sqrt(6 / 30)
    assert not net.b1.any() and not net.b2.any()


def test_uniform_start_is_feasible_on_average():
    spec = ProblemSpec(mesh=presets.tensile_bar())
    net = start_uniform(DesignNet.init(0, spec.input_scale), spec)
    f = forward_fields(net, spec.mesh.normalized_centroids())
    g = (f["rho_M"] * f["rho_m"]).mean() / spec.target_volume - 1
    assert abs(g) < 0.1
    assert abs(np.mean(f["rho_m"]) - spec.initial_rho_m) < 0.05


# -- penalized moduli -----------------------------------------------------------


def test_full_density_single_type_is_the_surrogate_tensor(surrogates):
    spec = ProblemSpec(mesh=small_bar(), allowed=[ISO])
    f = forward_fields(net_with_outputs(rho_M=1.0, rho_m=0.6, k=20.0), spec.mesh.normalized_centroids(), spec.allowed)
    C = penalized_moduli(f, surrogates, 1.0, spec)
    assert np.all(f["rho_M"] == 1.0)
    expected = surrogates[ISO].tensors(np.column_stack([f["rho_m"], f["k"]]))
    # the gradient-carrying prediction path sums in a different order
    np.testing.assert_allclose(C, expected, rtol=1e-8)


def test_zero_density_leaves_only_the_floors(surrogates):
    spec = ProblemSpec(mesh=small_bar())
    f = forward_fields(net_with_outputs(rho_M=0.0), spec.mesh.normalized_centroids())
    C = penalized_moduli(f, surrogates, 3.0, spec)
    full = sum(penalized_moduli(f, {k: surrogates[k]}, 3.0, ProblemSpec(mesh=small_bar(), allowed=[k])) for k in SpinodoidClass)
    assert np.all(f["rho_M"] == 0)
    np.testing.assert_allclose(C, full, rtol=1e-12)
    np.testing.assert_allclose(C[0, 0, 0], topopt.FLOOR * sum(
        topopt._type_models(f, surrogates, spec)[i].C[0, 0, 0] for i in range(3)), rtol=1e-12)


def test_penalty_lowers_moduli_at_half_density(surrogates):
    spec = ProblemSpec(mesh=small_bar(), allowed=[MONO])
    f = forward_fields(net_with_outputs(rho_M=0.5, rho_m=0.6), spec.mesh.normalized_centroids(), spec.allowed)
    C1, C2, C3 = (penalized_moduli(f, surrogates, p, spec)[0] for p in (1.0, 2.0, 3.0))
    big = np.abs(C1) > 1e-3 * np.abs(C1).max()
    assert np.all(np.abs(C2[big]) < np.abs(C1[big]))
    assert np.all(np.abs(C3[big]) < np.abs(C2[big]))


def test_missing_surrogate_is_reported(surrogates):
    spec = ProblemSpec(mesh=small_bar(), allowed=[ISO, ORTHO])
    f = forward_fields(DesignNet.zeros(), spec.mesh.normalized_centroids(), spec.allowed)
    with pytest.raises(KeyError):
        penalized_moduli(f, {ISO: surrogates[ISO]}, 1.0, spec)


def test_rotated_tensors_are_positive_definite(surrogates):
    spec = ProblemSpec(mesh=small_bar())
    f = forward_fields(random_net(8, 3.0), spec.mesh.normalized_centroids())
    C = penalized_moduli(f, surrogates, 3.0, spec)
    np.testing.assert_allclose(C, C.transpose(0, 2, 1), rtol=1e-12, atol=1e-6)
    assert np.all(np.linalg.eigvalsh(C) > 0)


# -- SPD floor --------------------------------------------------------------------


def test_floor_leaves_stiff_tensors_alone():
    C = fem.plane_stress(1e9, 0.35)[None]
    out, _ = spd_floor(C, 1e5)
    np.testing.assert_allclose(out, C, rtol=1e-12)


def test_floor_lifts_negative_eigenvalues():
    C = np.diag([1e9, -2e6, 3e8])[None]
    out, _ = spd_floor(C, 1e5)
    assert np.linalg.eigvalsh(out).min() > 0


def test_floor_vector_jacobian_product():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(4, 3, 3)) * 3e5
    C = A + A.transpose(0, 2, 1)
    G = rng.normal(size=(4, 3, 3))
    G = G + G.transpose(0, 2, 1)
    _, saved = spd_floor(C, 1e5)
    analytic = np.sum(spd_floor_vjp(G, saved) * C)
    h = 1e-6
    fd = (np.sum(G * spd_floor((1 + h) * C, 1e5)[0]) - np.sum(G * spd_floor((1 - h) * C, 1e5)[0])) / (2 * h)
    assert analytic == pytest.approx(fd, rel=1e-6)


# -- objective, constraint, loss -------------------------------------------------


def test_target_density_gives_zero_constraint(surrogates):
    spec = ProblemSpec(mesh=small_bar())
    f = forward_fields(net_with_outputs(rho_M=0.6, rho_m=0.5), spec.mesh.normalized_centroids())
    C = penalized_moduli(f, surrogates, 1.0, spec)
    _, g = objective_and_constraint(C, spec, f)
    assert abs(g) < 1e-12


def test_doubling_moduli_halves_compliance(surrogates):
    spec = ProblemSpec(mesh=small_bar())
    f = forward_fields(random_net(2), spec.mesh.normalized_centroids())
    C = penalized_moduli(f, surrogates, 2.0, spec)
    J1, _ = objective_and_constraint(C, spec, f)
    J2, _ = objective_and_constraint(2 * C, spec, f)
    assert J2 == pytest.approx(J1 / 2, rel=1e-9)


def test_load_cases_add(surrogates):
    mesh = presets.multi_load(1e5, 2e4, nelx=6, nely=6)
    spec = ProblemSpec(mesh=mesh)
    f = forward_fields(random_net(3), mesh.normalized_centroids())
    C = penalized_moduli(f, surrogates, 1.0, spec)
    total, _ = objective_and_constraint(C, spec, f)
    parts = []
    for case in mesh.loads:
        single = fem.QuadMesh(mesh.nodes, mesh.elements, mesh.fixed_dofs, case[None], grid=mesh.grid)
        parts.append(objective_and_constraint(C, ProblemSpec(mesh=single), f)[0])
    assert total == pytest.approx(sum(parts), rel=1e-10)


def test_loss_examples():
    assert loss(3.5, 0.0, 7) == 3.5
    assert loss(0.0, 0.1, 1) - 0.0 == pytest.approx(0.002, rel=1e-12)


@given(J=st.floats(0, 1e6), g=st.floats(-1, 1).filter(lambda v: abs(v) > 1e-6), n=st.integers(0, 1000))
def test_penalty_grows_with_iteration(J, g, n):
    assert loss(J, g, n + 1) > loss(J, g, n)
    assert loss(J, g, n) >= J


# -- gradient -----------------------------------------------------------------------


class SmoothSurrogate:
    """Closed-form stand-in: base constants times a smooth positive factor of the inputs."""

    def __init__(self, kind):
        self.kind = kind
        C = fem.plane_stress(1e9, 0.35) * np.array([[1.0, 1.0, 0.1], [1.0, 0.7, 0.05], [0.1, 0.05, 1.0]])
        self.q0 = fem.reduce_constants(C, kind)[0] if kind is not ISO else fem.reduce_constants(fem.plane_stress(1e9, 0.35), ISO)[0]

    def predict(self, raw, with_grad=False):
        raw = np.atleast_2d(raw)
        d = raw.shape[1]
        v = np.linspace(0.3, 0.9, d) / np.array([1.0, 20.0, 1.0, 1.0][:d])
        z = raw @ v
        j = np.arange(len(self.q0))
        fac = raw[:, :1] ** 2 * (1.0 + 0.2 * np.sin(z[:, None] + j))
        q = fac * self.q0
        if not with_grad:
            return q
        dfac = np.zeros((len(raw), len(j), d))
        dfac[:, :, 0] = 2 * raw[:, :1] * (1.0 + 0.2 * np.sin(z[:, None] + j))
        dfac += (raw[:, :1] ** 2 * 0.2 * np.cos(z[:, None] + j))[:, :, None] * v
        return q, dfac * self.q0[None, :, None]


def fd_check(spec, sur, h, seed=0, n_weights=20, tol=1e-4):
    net = start_uniform(DesignNet.init(11, spec.input_scale), spec)
    rng = np.random.default_rng(seed)
    x = net.to_vector() + 0.3 * rng.normal(size=DesignNet.size())
    net = DesignNet.from_vector(x)
    J0 = evaluate(net, spec, sur, 0, 1.0, with_grad=False).J
    ev = evaluate(net, spec, sur, 5, 2.5, J0)
    worst = 0.0
    for i in rng.choice(len(x), n_weights, replace=False):
        e = np.zeros_like(x)
        e[i] = h
        lp = evaluate(DesignNet.from_vector(x + e), spec, sur, 5, 2.5, J0, with_grad=False).loss
        lm = evaluate(DesignNet.from_vector(x - e), spec, sur, 5, 2.5, J0, with_grad=False).loss
        fd = (lp - lm) / (2 * h)
        worst = max(worst, abs(ev.grad[i] - fd) / max(abs(fd), 1e-3 * np.abs(ev.grad).max()))
    return worst


@pytest.mark.parametrize("allowed", [tuple(SpinodoidClass), (MONO,), (ORTHO,)])
def test_reverse_mode_gradient_with_smooth_surrogates(allowed):
    sur = {k: SmoothSurrogate(k) for k in SpinodoidClass}
    assert fd_check(ProblemSpec(mesh=small_bar(), allowed=allowed), sur, 1e-6) < 1e-4


@pytest.mark.parametrize("allowed", [tuple(SpinodoidClass), (MONO,), (ORTHO,)])
def test_reverse_mode_gradient_with_fitted_surrogates(surrogates, allowed):
    # GP predictions carry ~1e-9 relative round-off; below h=1e-3 it dominates
    # the first-layer weights, above it truncation error grows
    assert fd_check(ProblemSpec(mesh=small_bar(), allowed=allowed), surrogates, 1e-3) < 1e-4


def test_single_scale_gradient(surrogates):
    spec = ProblemSpec(mesh=small_bar(), single_scale=True)
    assert fd_check(spec, surrogates, 1e-3, n_weights=8) < 1e-4


# -- optimizer ------------------------------------------------------------------------


def test_continuation_schedule():
    spec = ProblemSpec(mesh=small_bar())
    p = [spec.penalty_exponent(n) for n in range(600)]
    assert p[0] == 1.0 and p[1] == pytest.approx(1.02)
    assert np.all(np.diff(p) >= 0) and max(p) == 8.0


def test_problem_validation():
    with pytest.raises(ValueError):
        ProblemSpec(mesh=small_bar(), target_volume=1.0)
    with pytest.raises(ValueError):
        ProblemSpec(mesh=small_bar(), allowed=[])
    with pytest.raises(ValueError):
        ProblemSpec(mesh=small_bar(), p_start=0.5)
    with pytest.raises(ValueError):
        ProblemSpec(mesh=small_bar(), compliance_scale="max")


def test_runs_are_deterministic(surrogates):
    spec = ProblemSpec(mesh=small_bar(), allowed=[MONO], iterations=8)
    a = optimize(spec, surrogates, seed=3)
    b = optimize(spec, surrogates, seed=3)
    assert a.history == b.history
    np.testing.assert_array_equal(a.net.to_vector(), b.net.to_vector())


def test_history_is_recorded(surrogates):
    spec = ProblemSpec(mesh=small_bar(), iterations=6)
    seen = []
    st_ = optimize(spec, surrogates, seed=0, callback=lambda s, ev: seen.append(ev.loss))
    assert [h["iteration"] for h in st_.history] == list(range(6))
    assert [h["loss"] for h in st_.history] == seen
    assert all(b["p"] >= a["p"] for a, b in zip(st_.history, st_.history[1:]))
    # the first loss is the initial design's compliance over itself plus the penalty
    assert st_.history[0]["loss"] == pytest.approx(1 + spec.eta0 * st_.history[0]["g"] ** 2)


def test_convergence_waits_for_the_volume_constraint(surrogates):
    # a loose loss tolerance leaves |g| as the only thing holding the run
    spec = ProblemSpec(mesh=small_bar(), iterations=60, tol=1.0, g_tol=2e-2)
    st_ = optimize(spec, surrogates, seed=1)
    gs = [abs(h["g"]) for h in st_.history]
    assert st_.converged and gs[-1] <= spec.g_tol
    assert all(g > spec.g_tol for g in gs[spec.window:-1])


def test_divergence_is_reported(surrogates):
    mesh = small_bar()
    bad = fem.QuadMesh(mesh.nodes, mesh.elements, mesh.fixed_dofs, mesh.loads * np.nan, grid=mesh.grid)
    with pytest.raises((topopt.DivergenceError, fem.SolverError)):
        optimize(ProblemSpec(mesh=bad, iterations=3, compliance_scale="none"), surrogates)


# -- export ---------------------------------------------------------------------------


def test_export_writes_design_files(tmp_path, surrogates):
    spec = ProblemSpec(mesh=presets.tensile_bar(nelx=4, nely=2), allowed=[ORTHO], iterations=2)
    state = optimize(spec, surrogates, seed=1)
    paths = topopt.export_design(state, tmp_path, tile_size=64)
    for key in ("design", "history", "checkpoint", "density", "types", "structure"):
        assert (tmp_path / paths[key].split("/")[-1]).exists()
    table = topopt.design_table(state)
    assert set(table["type"]) == {"orthotropic"}


def test_empty_design_warns(tmp_path, surrogates):
    spec = ProblemSpec(mesh=presets.tensile_bar(nelx=2, nely=1), iterations=1)
    state = topopt.OptimState(net=net_with_outputs(rho_M=0.0), spec=spec, seed=0)
    with pytest.warns(RuntimeWarning):
        topopt.export_design(state, tmp_path, tile_size=64)
    from spinodoid import io as sio

    assert not sio.load_binary_png(tmp_path / "structure.png").any()


def test_single_element_design_renders_one_tile(tmp_path, surrogates):
    mesh = presets.tensile_bar(nelx=1, nely=1)
    spec = ProblemSpec(mesh=mesh, allowed=[ISO])
    state = topopt.OptimState(net=net_with_outputs(rho_M=1.0, rho_m=0.6), spec=spec, seed=0)
    topopt.export_design(state, tmp_path, tile_size=64)
    from spinodoid import io as sio

    img = sio.load_binary_png(tmp_path / "structure.png")
    assert img.shape == (64, 64)
    assert img.mean() == pytest.approx(0.6, abs=1e-3)
