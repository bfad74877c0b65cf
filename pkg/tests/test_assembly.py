"""Element integrals, form assembly, loads and V-norms."""

import numpy as np
import pytest
import scipy.sparse.linalg as spla

from mspgfem import assembly
from mspgfem.assembly import (ProblemData, assemble_form, assemble_load,
                              element_matrices, v_norm, v_norm_error)
from mspgfem.grid import (DIRICHLET, MeshError, build_mesh, free_nodes,
                          unit_cube, unit_interval, unit_square)
from mspgfem.problems import builtin_problem


def robin_mesh(n, dim=2):
    dom = {1: unit_interval, 2: unit_square, 3: unit_cube}[dim]()
    mesh = build_mesh(dom, (n,) * dim)
    return mesh, free_nodes(mesh)


def test_element_matrices_1d():
    h = 0.37
    loc = element_matrices([h])
    assert np.allclose(loc.S, np.array([[1, -1], [-1, 1]]) / h, rtol=1e-14)
    assert np.allclose(loc.M, h * np.array([[2, 1], [1, 2]]) / 6, rtol=1e-14)


def test_element_matrices_2d_unit_cell():
    loc = element_matrices([1.0, 1.0])
    assert np.allclose(np.diag(loc.S), 2.0 / 3.0, rtol=1e-14)
    # boundary mass of a face: 1D mass of its edge
    bm = loc.face_mass[(0, 0)]
    assert np.allclose(bm[np.ix_([0, 2], [0, 2])], np.array([[2, 1], [1, 2]]) / 6)
    assert np.all(bm[[1, 3], :] == 0) and np.all(bm[:, [1, 3]] == 0)


@pytest.mark.parametrize("widths", [[0.5], [0.3, 0.7], [0.2, 0.4, 0.9]])
def test_element_stiffness_annihilates_constants(widths):
    loc = element_matrices(widths)
    assert np.abs(loc.S.sum(axis=1)).max() < 1e-13


def test_degenerate_cell_raises():
    with pytest.raises(MeshError, match="degenerate"):
        element_matrices([0.5, 0.0])


def test_form_kappa_zero_has_constant_kernel():
    mesh, dm = robin_mesh(8)
    parts = assemble_form(mesh, dm, kappa=0.0, robin_facets=np.array([], dtype=int))
    A = parts.matrix
    ones = np.ones(dm.n)
    assert np.abs(A @ ones).max() < 1e-13
    assert parts.B.nnz == 0


def test_form_single_interior_cell_has_no_boundary_block():
    mesh, dm = robin_mesh(8)
    cell = mesh.cell_id([[4, 4]])[0]
    parts = assemble_form(mesh, dm, kappa=2.0, region=np.array([cell]))
    assert parts.B.nnz == 0
    assert parts.S.nnz == 16


def test_form_region_rejects_inactive_cells():
    dom = unit_square(holes=(np.array([[0.25, 0.5], [0.25, 0.5]]),))
    mesh = build_mesh(dom, (8, 8))
    dm = free_nodes(mesh)
    hole_cell = mesh.cell_id([[3, 3]])[0]
    with pytest.raises(MeshError, match="inactive"):
        assemble_form(mesh, dm, kappa=1.0, region=np.array([hole_cell]))


def test_form_antisymmetry_identity():
    """a(v,w) - conj(a(w,v)) = -2i kappa (v,w) on the Robin boundary."""
    mesh, dm = robin_mesh(8)
    kappa = 3.0
    parts = assemble_form(mesh, dm, kappa)
    A = parts.matrix
    rng = np.random.default_rng(3)
    for _ in range(5):
        v = rng.standard_normal(dm.n) + 1j * rng.standard_normal(dm.n)
        w = rng.standard_normal(dm.n) + 1j * rng.standard_normal(dm.n)
        a_vw = np.vdot(w, A @ v)
        a_wv = np.vdot(v, A @ w)
        lhs = a_vw - np.conj(a_wv)
        rhs = -2j * kappa * np.vdot(w, parts.B @ v)
        assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(a_vw))


def test_symmetry_of_parts():
    mesh, dm = robin_mesh(8)
    parts = assemble_form(mesh, dm, kappa=2.0)
    for X in (parts.S, parts.M, parts.B):
        diff = (X - X.T).tocoo()
        scale = np.abs(X.data).max()
        assert (np.abs(diff.data).max() if diff.nnz else 0.0) < 1e-13 * scale
    assert parts.M.diagonal().min() > 0


def test_positive_definite_v_inner_product():
    mesh, dm = robin_mesh(6)
    parts = assemble_form(mesh, dm, kappa=1.0)
    G = (parts.S + parts.M).toarray()
    assert np.linalg.eigvalsh(G).min() > 0

    dom = unit_square(outer_tags=np.array([[DIRICHLET] * 2] * 2))
    mesh = build_mesh(dom, (6, 6))
    dm = free_nodes(mesh)
    parts = assemble_form(mesh, dm, kappa=0.0)
    assert np.linalg.eigvalsh(parts.S.toarray()).min() > 0


def test_subdomain_additivity():
    mesh, dm = robin_mesh(6)
    full = assemble_form(mesh, dm, kappa=2.0)
    acc_S = acc_M = acc_B = None
    for cell in mesh.active_cells:
        p = assemble_form(mesh, dm, kappa=2.0, region=np.array([cell]))
        acc_S = p.S if acc_S is None else acc_S + p.S
        acc_M = p.M if acc_M is None else acc_M + p.M
        acc_B = p.B if acc_B is None else acc_B + p.B
    for X, Y in ((full.S, acc_S), (full.M, acc_M), (full.B, acc_B)):
        diff = (X - Y).tocoo()
        scale = max(np.abs(X.data).max(), 1.0)
        assert (np.abs(diff.data).max() if diff.nnz else 0.0) < 1e-14 * scale


def test_load_partition_of_unity():
    mesh, dm = robin_mesh(8)
    F = assemble_load(mesh, dm, ProblemData(f=lambda x: np.ones(len(x))))
    assert F.sum() == pytest.approx(1.0, abs=1e-13)
    F = assemble_load(mesh, dm, ProblemData(g=lambda x, nu: np.ones(len(x))))
    assert F.sum() == pytest.approx(4.0, abs=1e-12)


def test_load_quadrature_insensitive_plane_wave():
    _, data = builtin_problem("plane_wave_2d", kappa=2 ** 5)
    mesh, dm = robin_mesh(64)
    F4 = assemble_load(mesh, dm, data, order=4)
    F8 = assemble_load(mesh, dm, data, order=8)
    rel = np.linalg.norm(F4 - F8) / np.linalg.norm(F8)
    assert rel < 1e-6


def test_v_norm_constant_field():
    mesh, dm = robin_mesh(8)
    assert v_norm(mesh, dm, 2.0, np.ones(dm.n)) == pytest.approx(2.0, rel=1e-13)
    assert v_norm(mesh, dm, 2.0, np.zeros(dm.n)) == 0.0


def test_v_norm_sine_interpolant_converges():
    target = np.sqrt(0.5 + np.pi ** 2 / 2)
    errs = []
    for n in (8, 16, 32, 64):
        mesh, dm = robin_mesh(n, dim=1)
        x = mesh.vertex_coords(dm.free)[:, 0]
        vals = np.sin(np.pi * x).astype(complex)
        errs.append(abs(v_norm(mesh, dm, 1.0, vals) - target))
    assert errs[-1] < 1e-3
    assert errs[0] > errs[-1]


def test_v_norm_region_variant():
    mesh, dm = robin_mesh(8)
    half = mesh.active_cells[mesh.cell_multi(mesh.active_cells)[:, 0] < 4]
    other = np.setdiff1d(mesh.active_cells, half)
    v = np.cos(mesh.vertex_coords(dm.free).sum(axis=1)).astype(complex)
    full = v_norm(mesh, dm, 1.5, v)
    a = v_norm(mesh, dm, 1.5, v, region=half)
    b = v_norm(mesh, dm, 1.5, v, region=other)
    assert full ** 2 == pytest.approx(a ** 2 + b ** 2, rel=1e-12)


def test_v_norm_error_exact_constant():
    mesh, dm = robin_mesh(8)
    one = lambda x: np.ones(len(x), dtype=complex)
    zero_grad = lambda x: np.zeros((len(x), 2))
    err = v_norm_error(mesh, dm, 2.0, one, zero_grad, np.ones(dm.n, dtype=complex))
    assert err < 1e-13


def test_v_norm_error_interpolant_first_order():
    _, data = builtin_problem("plane_wave_2d", kappa=4.0)
    errs = []
    for n in (8, 16, 32):
        mesh, dm = robin_mesh(n)
        vals = data.u_exact(mesh.vertex_coords(dm.free))
        errs.append(v_norm_error(mesh, dm, 4.0, data.u_exact, data.grad_u_exact, vals))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 0.8)


def test_v_norm_error_quadrature_refinement_oracle():
    kappa = 2 ** 4
    _, data = builtin_problem("plane_wave_2d", kappa=kappa)
    mesh, dm = robin_mesh(32)
    vals = data.u_exact(mesh.vertex_coords(dm.free))
    e5 = v_norm_error(mesh, dm, kappa, data.u_exact, data.grad_u_exact, vals, order=5)
    e12 = v_norm_error(mesh, dm, kappa, data.u_exact, data.grad_u_exact, vals, order=12)
    assert abs(e5 - e12) / e12 < 1e-3


def test_v_norm_error_requires_gradient():
    mesh, dm = robin_mesh(4)
    with pytest.raises(ValueError, match="gradient"):
        v_norm_error(mesh, dm, 1.0, lambda x: np.ones(len(x)), None, np.ones(dm.n))


def test_export_triplets(tmp_path):
    mesh, dm = robin_mesh(4)
    parts = assemble_form(mesh, dm, kappa=1.0)
    assembly.export_triplets(parts.matrix, tmp_path / "A.mtx")
    text = (tmp_path / "A.mtx").read_text()
    assert "coordinate" in text.splitlines()[0]
