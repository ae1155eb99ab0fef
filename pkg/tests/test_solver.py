import numpy as np
import pytest

from cemixed.cem import build_pi, build_velocity_space
from cemixed.fields import SourceSpec, generate_channelized, corner_source, uniform_field, zero_source
from cemixed.grid import ConfigurationError, build_fine_grid
from cemixed.solver import (
    FineOperators,
    Trajectory,
    assemble_reduced,
    backward_euler,
    prolongate,
    solve_fine_reference,
    solve_steady,
    time_grid,
)
from cemixed.spectral import select_basis


def m_norm_sq(M, P):
    return np.einsum("ij,ij->i", P, (M @ P.T).T)


def zero_mean(fine, rng, rho=1.0):
    h = rng.standard_normal(fine.n_cells)
    return h - np.average(h, weights=np.broadcast_to(rho, h.shape))


@pytest.fixture(scope="module")
def reduced(small):
    ops = FineOperators.build(small.fine, small.kappa, 1.0)
    cem = build_velocity_space(small.fine, small.kappa, small.spectral, 2)
    return small, ops, assemble_reduced(ops, cem, small.spectral)


def test_reduced_symmetry(reduced):
    _, _, sys = reduced
    assert np.abs(sys.A - sys.A.T).max() <= 1e-12 * np.abs(sys.A).max()
    assert np.abs(sys.M - sys.M.T).max() <= 1e-12 * np.abs(sys.M).max()
    np.linalg.cholesky(sys.A)
    np.linalg.cholesky(sys.M)


def test_reduced_mass_block_diagonal(reduced):
    s, _, sys = reduced
    J = 3
    for a in range(s.part.n_elements):
        for b in range(s.part.n_elements):
            if a != b:
                assert np.all(sys.M[a * J : (a + 1) * J, b * J : (b + 1) * J] == 0)


def test_Lz1_mass_is_diagonal_closed_form(small):
    sb = select_basis(small.spectra, 1)
    rho = 2.5
    ops = FineOperators.build(small.fine, small.kappa, rho)
    cem = build_velocity_space(small.fine, small.kappa, sb, 1)
    sys = assemble_reduced(ops, cem, sb)
    area_K = small.part.Hx * small.part.Hy
    expect = [
        rho * area_K / np.sum(small.kt[cells] * small.fine.cell_area) for cells in small.part.element_cells
    ]
    assert np.allclose(np.diag(sys.M), expect, rtol=1e-12)
    assert np.all(sys.M - np.diag(np.diag(sys.M)) == 0)


def test_reduced_load_of_corner_source_has_zero_mean(reduced):
    s, _, sys = reduced
    load = sys.load(corner_source(24, 24).f(0.0))
    # sum over elements of (f, 1_K) recovered from the constant modes
    total = sum(load[s.spectral.index(e, 0)] / spec.eigenvectors[0, 0] for e, spec in enumerate(s.spectra))
    assert abs(total) <= 1e-14


def test_reduced_dimension_mismatch(reduced, tiny):
    s, ops, _ = reduced
    cem = build_velocity_space(tiny.fine, tiny.kappa, tiny.spectral, 1)
    with pytest.raises(ConfigurationError):
        assemble_reduced(ops, cem, tiny.spectral)


def test_time_grid():
    t = time_grid(1e-2, 1.0)
    assert len(t) == 101 and t[-1] == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ConfigurationError):
        time_grid(0.3, 1.0)
    with pytest.raises(ConfigurationError):
        time_grid(-1.0, 1.0)


def test_zero_data_gives_zero_trajectory(reduced):
    s, ops, sys = reduced
    src = zero_source(s.fine, np.zeros(s.fine.n_cells))
    ms = backward_euler(sys, src, 1e-2, 0.2)
    assert np.all(ms.pressure == 0) and np.all(ms.velocity == 0)
    fine = solve_fine_reference(ops, src, 1e-2, 0.2)
    assert np.all(fine.pressure == 0) and np.all(fine.velocity == 0)


def test_hundred_steps(reduced):
    s, _, sys = reduced
    traj = backward_euler(sys, corner_source(24, 24), 1e-2, 1.0)
    assert traj.n_steps == 100
    assert traj.pressure.shape == (101, sys.n_pressure)


def test_energy_dissipation_multiscale(reduced):
    s, _, sys = reduced
    rng = np.random.default_rng(3)
    tau = 1e-2
    g = rng.standard_normal(s.fine.n_cells)
    # pi keeps constants; a zero multiscale mean keeps the decay above rounding
    h_p = g - build_pi(s.spectral)(g).mean()
    ms = backward_euler(sys, zero_source(s.fine, h_p), tau, 0.25)
    pn = m_norm_sq(sys.M, ms.pressure)
    vn = m_norm_sq(sys.A, ms.velocity)
    assert np.all(2 * tau * vn[1:] + pn[1:] <= pn[:-1])
    assert np.all(pn[1:] < pn[:-1])


def test_energy_dissipation_fine(small):
    ops = FineOperators.build(small.fine, small.kappa, 1.0)
    rng = np.random.default_rng(4)
    tau = 1e-2
    tr = solve_fine_reference(ops, zero_source(small.fine, zero_mean(small.fine, rng)), tau, 0.25)
    pn = m_norm_sq(ops.M, tr.pressure)
    vn = m_norm_sq(ops.A, tr.velocity)
    assert np.all(2 * tau * vn[1:] + pn[1:] <= pn[:-1])
    assert np.all(pn[1:] < pn[:-1])


def test_stability_bound(reduced):
    s, ops, sys = reduced
    tau, T = 1e-2, 1.0
    src = corner_source(24, 24)
    rho = src.rho
    fine_t = solve_fine_reference(ops, src, tau, T)
    ms = backward_euler(sys, src, tau, T)
    times = time_grid(tau, T)
    forcing = sum(tau * np.sum(src.f(t) ** 2 / rho) * s.fine.cell_area for t in times[1:])
    bound = 4 * (src.h_p @ (ops.M @ src.h_p) + forcing)
    assert m_norm_sq(ops.M, fine_t.pressure).max() <= bound
    assert m_norm_sq(sys.M, ms.pressure).max() <= bound


def test_schur_and_monolithic_agree():
    fine = build_fine_grid(12, 12)
    kappa = generate_channelized(12, 12, 3, 1e3, seed=9)
    ops = FineOperators.build(fine, kappa, 1.0)
    src = corner_source(12, 12)
    a = solve_fine_reference(ops, src, 5e-2, 0.5, method="monolithic")
    b = solve_fine_reference(ops, src, 5e-2, 0.5, method="schur")
    scale = np.abs(a.pressure).max()
    assert np.abs(a.pressure - b.pressure).max() <= 1e-9 * scale
    assert np.abs(a.velocity - b.velocity).max() <= 1e-9 * np.abs(a.velocity).max()
    with pytest.raises(ValueError):
        solve_fine_reference(ops, src, 5e-2, 0.5, method="cg")


def test_long_time_limit_is_steady_solution():
    fine = build_fine_grid(20, 20)
    ops = FineOperators.build(fine, uniform_field(20, 20), 1.0)
    src = corner_source(20, 20)
    tr = solve_fine_reference(ops, src, 0.5, 50.0)
    v_s, p_s = solve_steady(ops, src.f(0.0))
    assert np.abs(tr.pressure[-1] - p_s).max() <= 1e-9 * np.abs(p_s).max()
    assert np.abs(tr.velocity[-1] - v_s).max() <= 1e-9 * np.abs(v_s).max()


def manufactured(n, tau=1e-4, T=0.1):
    fine = build_fine_grid(n, n)
    h = 1.0 / n
    e = np.arange(n + 1) * h
    # exact cell averages of cos(pi x) and edge averages of sin/cos
    cavg = (np.sin(np.pi * e[1:]) - np.sin(np.pi * e[:-1])) / (np.pi * h)
    avg_p = np.outer(cavg, cavg).ravel()  # row iy, column ix
    ops = FineOperators.build(fine, uniform_field(n, n), 1.0)
    sx = np.sin(np.pi * e[1:-1])
    vx = np.outer(cavg, np.pi * sx).ravel()  # x-edges: (iy, ix)
    vy = np.outer(np.pi * sx, cavg).ravel()  # y-edges: (iy, ix)
    src = SourceSpec(
        f=lambda t: (2 * np.pi**2 - 1) * np.exp(-t) * avg_p,
        rho=np.ones(fine.n_cells),
        h_p=avg_p.copy(),
        h_v=np.concatenate([vx, vy]),
    )
    tr = solve_fine_reference(ops, src, tau, T)
    # exact L2 error against p(T) = e^{-T} cos(pi x) cos(pi y)
    c2 = (h / 2 + (np.sin(2 * np.pi * e[1:]) - np.sin(2 * np.pi * e[:-1])) / (4 * np.pi)) / h
    sq = np.outer(c2, c2).ravel()
    pT = tr.pressure[-1]
    a = np.exp(-T)
    err2 = np.sum(pT**2 - 2 * pT * a * avg_p + a**2 * sq) * h * h
    return np.sqrt(max(err2, 0.0))


def test_manufactured_solution_first_order():
    errs = [manufactured(n, tau=1e-3, T=0.05) for n in (8, 16, 32)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 0.9)


def test_prolongate(reduced):
    s, _, sys = reduced
    z = Trajectory(np.array([0.0, 1.0]), np.zeros((2, sys.n_velocity)), np.zeros((2, sys.n_pressure)), "multiscale")
    pz = prolongate(sys, z)
    assert pz.kind == "fine" and not pz.pressure.any() and not pz.velocity.any()
    e = np.zeros((2, sys.n_pressure))
    e[1, 7] = 1.0
    one = prolongate(sys, Trajectory(np.array([0.0, 1.0]), e.copy(), e, "multiscale"))
    assert np.array_equal(one.pressure[1], sys.pressure_basis[:, 7].toarray().ravel())
    assert np.array_equal(one.velocity[1], sys.velocity_basis[:, 7].toarray().ravel())
    with pytest.raises(ValueError):
        prolongate(sys, pz)


def test_trajectory_exports(tmp_path, reduced):
    s, ops, _ = reduced
    tr = solve_fine_reference(ops, corner_source(24, 24), 0.1, 0.3)
    tr.to_csv(tmp_path / "t.csv", {"p_rho": np.sqrt(m_norm_sq(ops.M, tr.pressure))})
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "n,t,p_rho" and len(lines) == 5
    tr.save_snapshots(tmp_path / "s.npz", [0, 3])
    data = np.load(tmp_path / "s.npz")
    assert np.array_equal(data["pressure"][1], tr.pressure[3])
    assert str(data["kind"]) == "fine"


def test_default_initial_coefficients_project_h_p(reduced):
    s, _, sys = reduced
    h = np.random.default_rng(8).standard_normal(s.fine.n_cells)
    ms = backward_euler(sys, zero_source(s.fine, h), 0.1, 0.1)
    P = sys.pressure_basis.toarray()
    assert np.allclose(ms.pressure[0], P.T @ (sys.s_weights * h), rtol=1e-13, atol=1e-13)
