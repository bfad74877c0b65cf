"""Direct solver contract, FEM solves, best approximation, PG pipeline."""

import numpy as np
import pytest
import scipy.sparse as sp

from mspgfem import correctors as corr
from mspgfem.assembly import (ProblemData, assemble_form, assemble_load, v_norm,
                              v_norm_error)
from mspgfem.grid import (DIRICHLET, build_mesh, free_nodes, refine_uniform,
                          unit_interval, unit_square)
from mspgfem.interpolation import build_i_h, prolongation_matrix
from mspgfem.problems import builtin_problem, plane_wave, robin_trace
from mspgfem.solver import (SingularMatrixError, assemble_pg_system,
                            best_approximation, best_approximation_of_fine,
                            factorize, solve_mspgfem, solve_standard_fem)


def test_factorize_identity():
    A = sp.eye(5, format="csc")
    rhs = np.arange(5, dtype=complex)
    assert np.allclose(factorize(A).solve(rhs), rhs, atol=1e-15)


def test_factorize_complex_symmetric_oracle():
    # dense 2x2 oracle: det = 2*1 - i*i = 3, x = (1/3, -i/3)
    A = sp.csc_matrix(np.array([[2.0, 1j], [1j, 1.0]]))
    b = np.array([1.0, 0.0], dtype=complex)
    x = factorize(A).solve(b)
    assert np.abs(x - np.array([1 / 3, -1j / 3])).max() < 1e-14
    assert np.linalg.norm(A @ x - b) <= 1e-12


def test_factorize_singular_reports_pivot():
    A = sp.csc_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(SingularMatrixError, match="singular") as info:
        factorize(A)
    assert info.value.pivot == 1


def test_factorize_rejects_nonsquare():
    with pytest.raises(ValueError, match="square"):
        factorize(sp.csr_matrix(np.ones((2, 3))))


def test_solve_many_columns():
    A = sp.csc_matrix(np.diag([2.0, 4.0, 8.0]))
    X = factorize(A).solve_many(np.eye(3, dtype=complex))
    assert np.allclose(X, np.diag([0.5, 0.25, 0.125]))


def plane_wave_1d(kappa):
    u = lambda x: np.exp(-1j * kappa * np.asarray(x)[:, 0])
    grad = lambda x: (-1j * kappa) * u(x)[:, None]
    return ProblemData(f=None, g=robin_trace(u, grad, kappa), u_exact=u,
                       grad_u_exact=grad)


def test_fem_1d_first_order_convergence():
    kappa = 1.0
    data = plane_wave_1d(kappa)
    errs = []
    for n in (8, 16, 32, 64):
        mesh = build_mesh(unit_interval(), (n,))
        dm = free_nodes(mesh)
        u = solve_standard_fem(mesh, dm, kappa, data)
        errs.append(v_norm_error(mesh, dm, kappa, data.u_exact,
                                 data.grad_u_exact, u))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 0.9)


def test_fem_poisson_dense_oracle():
    dom = unit_square(outer_tags=np.full((2, 2), DIRICHLET))
    mesh = build_mesh(dom, (4, 4))
    dm = free_nodes(mesh)
    assert dm.n == 9
    data = ProblemData(f=lambda x: np.ones(len(x), dtype=complex))
    u = solve_standard_fem(mesh, dm, 0.0, data)
    A = assemble_form(mesh, dm, 0.0).matrix.toarray()
    F = assemble_load(mesh, dm, data)
    want = np.linalg.solve(A, F)
    assert np.abs(u - want).max() < 1e-10
    res = np.linalg.norm(A @ u - F) / np.linalg.norm(F)
    assert res < 1e-12


def test_fem_residual_bound():
    dom, data = builtin_problem("plane_wave_2d", kappa=8.0)
    mesh = build_mesh(dom, (32, 32))
    dm = free_nodes(mesh)
    u = solve_standard_fem(mesh, dm, 8.0, data)
    A = assemble_form(mesh, dm, 8.0).matrix
    F = assemble_load(mesh, dm, data)
    assert np.linalg.norm(A @ u - F) / np.linalg.norm(F) < 1e-10


def test_best_approximation_reproduces_coarse_targets():
    mesh = build_mesh(unit_square(), (8, 8))
    dm = free_nodes(mesh)
    # target is itself bilinear on every cell only if globally affine
    u = lambda x: (2.0 + 1j) * x[:, 0] - 0.5 * x[:, 1] + 3.0
    grad = lambda x: np.tile(np.array([2.0 + 1j, -0.5]), (len(x), 1))
    v = best_approximation(mesh, dm, 2.0, u, grad)
    want = u(mesh.vertex_coords(dm.free))
    assert np.abs(v - want).max() < 1e-11


def test_best_approximation_orthogonality():
    kappa = 2 ** 3
    dom, data = builtin_problem("plane_wave_2d", kappa)
    mesh = build_mesh(dom, (16, 16))
    dm = free_nodes(mesh)
    v = best_approximation(mesh, dm, kappa, data.u_exact, data.grad_u_exact, order=6)
    parts = assemble_form(mesh, dm, kappa, robin_facets=np.array([], dtype=int))
    G = parts.S + kappa ** 2 * parts.M
    rhs = v_inner_products(mesh, dm, kappa, data.u_exact, data.grad_u_exact, order=6)
    # <u - v, w>_V for a hat w reduces to the normal-equation residual entry
    resid = rhs - G @ v
    rng = np.random.default_rng(4)
    scale = v_norm(mesh, dm, kappa, v)
    for _ in range(10):
        w = rng.standard_normal(dm.n) + 1j * rng.standard_normal(dm.n)
        pairing = np.vdot(w, resid)
        assert abs(pairing) <= 1e-9 * scale * v_norm(mesh, dm, kappa, w)
    # quadrature stability of the projection itself
    v9 = best_approximation(mesh, dm, kappa, data.u_exact, data.grad_u_exact, order=9)
    assert v_norm(mesh, dm, kappa, v - v9) / scale < 1e-9


def test_best_approximation_first_order_decay():
    kappa = 2 ** 4
    dom, data = builtin_problem("plane_wave_2d", kappa)
    errs = []
    for k in (4, 5, 6, 7):
        mesh = build_mesh(dom, (2 ** k, 2 ** k))
        dm = free_nodes(mesh)
        v = best_approximation(mesh, dm, kappa, data.u_exact, data.grad_u_exact)
        errs.append(v_norm_error(mesh, dm, kappa, data.u_exact,
                                 data.grad_u_exact, v))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 0.7)
    assert np.all(np.diff(errs) < 0)


def test_best_approximation_of_fine_matches_exact_target():
    kappa = 4.0
    dom, data = builtin_problem("plane_wave_2d", kappa)
    coarse = build_mesh(dom, (8, 8))
    fine, _ = refine_uniform(coarse, 3)
    cdm, fdm = free_nodes(coarse), free_nodes(fine)
    P = prolongation_matrix(coarse, cdm, fine, fdm)
    parts = assemble_form(fine, fdm, kappa)
    target = data.u_exact(fine.vertex_coords(fdm.free))
    v = best_approximation_of_fine(coarse, cdm, kappa, P, parts, target)
    # projection of a fine field reproduces any coarse field exactly
    w = best_approximation_of_fine(coarse, cdm, kappa, P, parts, P @ v)
    assert np.abs(w - v).max() < 1e-11 * np.abs(v).max()


def ms_setup(nc, levels, kappa, holes=()):
    dom, data = builtin_problem("plane_wave_2d", kappa)
    if holes:
        dom, data = builtin_problem("scatterers_2d", kappa)
    coarse = build_mesh(dom, (nc, nc))
    fine, _ = refine_uniform(coarse, levels)
    return dom, data, coarse, free_nodes(coarse), fine, free_nodes(fine)


def test_mspg_ideal_identity_smoke():
    kappa = 2.0
    _, data, coarse, cdm, fine, fdm = ms_setup(4, 2, kappa)
    res = solve_mspgfem(coarse, cdm, fine, fdm, kappa, None, data)
    u_h = solve_standard_fem(fine, fdm, kappa, data)
    ih = build_i_h(coarse, cdm, fine, fdm)
    want = ih.matrix @ u_h
    rel = v_norm(coarse, cdm, kappa, res.u - want) / v_norm(coarse, cdm, kappa, want)
    assert rel < 1e-10


def test_mspg_galerkin_orthogonality():
    kappa = 4.0
    _, data, coarse, cdm, fine, fdm = ms_setup(8, 2, kappa)
    ih = build_i_h(coarse, cdm, fine, fdm)
    P = prolongation_matrix(coarse, cdm, fine, fdm)
    cache = corr.build_cache(coarse, cdm, fine, fdm, ih, P, kappa, 2,
                             check_resolution=False)
    basis = corr.build_test_basis(cache, P)
    A = assemble_form(fine, fdm, kappa).matrix
    F = assemble_load(fine, fdm, data)
    K, Fc = assemble_pg_system(basis, A, F)
    u_H = factorize(K).solve(Fc)
    u_h = factorize(A.tocsc()).solve(F)
    resid = basis.matrix.conjugate() @ (A @ (u_h - P @ u_H))
    scale = np.abs(basis.matrix.conjugate() @ F).max()
    assert np.abs(resid).max() / scale < 1e-8


def test_mspg_error_vs_best_approximation_ordering():
    kappa = 2 ** 3
    _, data, coarse, cdm, fine, fdm = ms_setup(16, 2, kappa)
    res = solve_mspgfem(coarse, cdm, fine, fdm, kappa, 2, data)
    err_ms = v_norm_error(coarse, cdm, kappa, data.u_exact, data.grad_u_exact, res.u)
    ba = best_approximation(coarse, cdm, kappa, data.u_exact, data.grad_u_exact)
    err_ba = v_norm_error(coarse, cdm, kappa, data.u_exact, data.grad_u_exact, ba)
    assert err_ba <= err_ms + 1e-8
    assert err_ms <= 2.5 * err_ba
    assert res.orthogonality_residual < 1e-10
    assert res.n_classes == 49


def test_mspg_zero_data_gives_zero():
    kappa = 2.0
    _, _, coarse, cdm, fine, fdm = ms_setup(4, 1, kappa)
    res = solve_mspgfem(coarse, cdm, fine, fdm, kappa, 1,
                        ProblemData(f=None, g=None))
    assert np.abs(res.u).max() == 0.0


def test_pg_system_cached_vs_percell():
    kappa = 3.0
    _, data, coarse, cdm, fine, fdm = ms_setup(8, 1, kappa)
    ih = build_i_h(coarse, cdm, fine, fdm)
    P = prolongation_matrix(coarse, cdm, fine, fdm)
    cache = corr.build_cache(coarse, cdm, fine, fdm, ih, P, kappa, 2,
                             check_resolution=False)
    basis_cached = corr.build_test_basis(cache, P)
    groups = []
    for cell in coarse.active_cells:
        ec = corr.solve_element_corrector(coarse, cdm, fine, fdm, ih, P, kappa,
                                          int(cell), 2, check_resolution=False)
        groups.append((np.array([cell]), ec))
    basis_direct = corr._accumulate_basis(coarse, cdm, fine, fdm, groups, P)
    A = assemble_form(fine, fdm, kappa).matrix
    F = assemble_load(fine, fdm, data)
    K1, F1 = assemble_pg_system(basis_cached, A, F)
    K2, F2 = assemble_pg_system(basis_direct, A, F)
    diff = np.abs((K1 - K2).toarray()).max()
    assert diff < 1e-12 * np.abs(K2.toarray()).max()
    assert np.abs(F1 - F2).max() < 1e-12 * np.abs(F2).max()


def test_export_solution_table(tmp_path):
    from mspgfem.solver import export_solution_table
    mesh = build_mesh(unit_square(), (4, 4))
    dm = free_nodes(mesh)
    vals = np.arange(dm.n, dtype=complex) * (1 + 1j)
    export_solution_table(mesh, dm, vals, tmp_path / "u.txt")
    lines = (tmp_path / "u.txt").read_text().strip().splitlines()
    assert len(lines) == dm.n + 1
    assert lines[0].startswith("# vertex")
