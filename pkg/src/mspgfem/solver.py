"""Sparse complex direct solves and the discrete problems built on them:
the coarse Petrov-Galerkin system, standard Galerkin FEM on either scale,
and the V-norm best approximation.

All systems go through one factorize-once/solve-many wrapper around a sparse
LU decomposition; factorizations are immutable and safe for concurrent solves
with distinct right-hand sides.
"""

from __future__ import annotations

import dataclasses
import time

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import assembly
from .assembly import ProblemData, assemble_form, assemble_load
from .grid import DofMap, StructuredMesh

_DENSE_PIVOT_LIMIT = 4096


class SingularMatrixError(RuntimeError):
    """Structural or numerical singularity found during factorization."""

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class Factorization:
    """Reusable direct factorization of a square sparse complex matrix."""

    def __init__(self, lu, shape):
        self._lu = lu
        self.shape = shape

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(rhs, dtype=complex))

    def solve_many(self, rhs_block: np.ndarray) -> np.ndarray:
        """Solve for each column of a dense right-hand-side block."""
        return self._lu.solve(np.asarray(rhs_block, dtype=complex))


def _locate_pivot(A: sp.csc_matrix):
    if A.shape[0] > _DENSE_PIVOT_LIMIT:
        return None
    import scipy.linalg
    dense = A.toarray()
    _, _, U = scipy.linalg.lu(dense)
    diag = np.abs(np.diagonal(U))
    scale = max(np.abs(dense).max(), 1.0)
    bad = np.flatnonzero(diag <= 1e-14 * scale)
    return int(bad[0]) if len(bad) else None


def factorize(A) -> Factorization:
    """LU-factorize a square sparse matrix for repeated solves."""
    A = sp.csc_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"matrix must be square, got {A.shape}")
    if A.dtype != complex:
        A = A.astype(complex)
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        if "singular" in str(exc).lower():
            pivot = _locate_pivot(A)
            where = f" (pivot index {pivot})" if pivot is not None else ""
            raise SingularMatrixError(f"matrix is singular{where}", pivot=pivot) from exc
        raise
    return Factorization(lu, A.shape)


def solve_standard_fem(mesh: StructuredMesh, dofmap: DofMap, kappa: float,
                       data: ProblemData, order: int = 5) -> np.ndarray:
    """Galerkin solution with the full Helmholtz form on the mesh's free nodes."""
    A = assemble_form(mesh, dofmap, kappa).matrix
    F = assemble_load(mesh, dofmap, data, order=order)
    return factorize(A).solve(F)


def v_inner_products(mesh: StructuredMesh, dofmap: DofMap, kappa: float,
                     u_exact, grad_u_exact, order: int = 5) -> np.ndarray:
    """V-inner products of an exact field against every nodal basis function,
    by tensor Gauss quadrature over the active cells."""
    rhs = np.zeros(dofmap.n, dtype=complex)
    pts, wts = assembly._tensor_points(order, mesh.dim)
    phi = assembly._shape_values(pts)
    dphi = assembly._shape_gradients(pts, mesh.widths)
    jac = float(np.prod(mesh.widths))
    cells = mesh.active_cells
    for start in range(0, len(cells), assembly._CHUNK):
        blk = cells[start:start + assembly._CHUNK]
        multi = mesh.cell_multi(blk)
        coords = (mesh.origin + (multi[:, None, :] + pts[None, :, :]) * mesh.widths)
        flat = coords.reshape(-1, mesh.dim)
        uv = np.asarray(u_exact(flat)).reshape(len(blk), -1)
        gv = np.asarray(grad_u_exact(flat)).reshape(len(blk), -1, mesh.dim)
        dofs = dofmap.index[mesh.cell_vertices(blk)]
        for c in range(phi.shape[0]):
            contrib = kappa ** 2 * (uv * phi[c]) @ wts
            for a in range(mesh.dim):
                contrib = contrib + (gv[:, :, a] * dphi[c, :, a]) @ wts
            ok = dofs[:, c] >= 0
            np.add.at(rhs, dofs[ok, c], jac * contrib[ok])
    return rhs


def best_approximation(mesh: StructuredMesh, dofmap: DofMap, kappa: float,
                       u_exact, grad_u_exact, order: int = 5) -> np.ndarray:
    """V-norm projection of an exact field onto the mesh's Q1 space.

    Solves the Hermitian positive-definite normal equations; the right-hand
    side pairs the target with every basis function by tensor Gauss quadrature.
    """
    if grad_u_exact is None:
        raise ValueError("best approximation of an exact field needs its gradient")
    parts = assemble_form(mesh, dofmap, kappa, robin_facets=np.array([], dtype=int))
    G = parts.S + kappa ** 2 * parts.M
    rhs = v_inner_products(mesh, dofmap, kappa, u_exact, grad_u_exact, order)
    return factorize(G).solve(rhs)


def best_approximation_of_fine(coarse: StructuredMesh, coarse_dofmap: DofMap,
                               kappa: float, P: sp.spmatrix,
                               fine_parts: assembly.FormParts,
                               fine_values: np.ndarray) -> np.ndarray:
    """V-norm projection of a fine field onto the coarse space, exactly
    through the nested-space inner products."""
    Gf = fine_parts.S + kappa ** 2 * fine_parts.M
    G = (P.T @ (Gf @ P)).tocsc()
    rhs = P.T @ (Gf @ fine_values)
    return factorize(G).solve(rhs)


@dataclasses.dataclass(eq=False)
class MsPGResult:
    """Coarse multiscale Petrov-Galerkin solution with diagnostics."""

    u: np.ndarray
    u_fine: np.ndarray
    n_classes: int
    orthogonality_residual: float
    solve_residual: float
    timings: dict


def assemble_pg_system(test_basis, fine_matrix: sp.spmatrix, fine_load: np.ndarray):
    """Coarse system pairing prolonged trial hats against corrected test
    functions: K[i, j] = form(trial_j, test_i), F[i] = load(test_i)."""
    Lt = test_basis.matrix
    P = test_basis.P
    if Lt.shape[1] != fine_matrix.shape[0]:
        raise ValueError("test basis and fine operator do not share a dof map")
    K = (Lt.conjugate() @ (fine_matrix @ P)).tocsc()
    F = Lt.conjugate() @ fine_load
    return K, F


def solve_mspgfem(coarse: StructuredMesh, coarse_dofmap: DofMap,
                  fine: StructuredMesh, fine_dofmap: DofMap,
                  kappa: float, m, data: ProblemData, order: int = 5,
                  cache=None, n_jobs: int = 1) -> MsPGResult:
    """Full multiscale Petrov-Galerkin pipeline on a nested mesh pair.

    ``m`` is the oversampling order; ``m=None`` solves the idealized
    whole-domain corrector problems instead (used by small-problem oracles).
    A prebuilt corrector cache may be passed to skip the patch solves.
    """
    from . import correctors, interpolation

    timings = {}
    t0 = time.perf_counter()
    i_h = interpolation.build_i_h(coarse, coarse_dofmap, fine, fine_dofmap)
    P = interpolation.prolongation_matrix(coarse, coarse_dofmap, fine, fine_dofmap)
    timings["interpolation"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    fine_parts = assemble_form(fine, fine_dofmap, kappa)
    A_fine = fine_parts.matrix
    F_fine = assemble_load(fine, fine_dofmap, data, order=order)
    timings["fine_assembly"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if m is None:
        ideal = correctors.IdealCorrectorSolver(
            coarse, coarse_dofmap, fine, fine_dofmap, i_h, P, kappa)
        basis = correctors.build_ideal_test_basis(ideal, P)
        n_classes = coarse.n_cells
    else:
        if cache is None:
            cache = correctors.build_cache(coarse, coarse_dofmap, fine, fine_dofmap,
                                           i_h, P, kappa, m, n_jobs=n_jobs)
        basis = correctors.build_test_basis(cache, P)
        n_classes = cache.n_solves
    timings["correctors"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    K, F = assemble_pg_system(basis, A_fine, F_fine)
    try:
        u = factorize(K).solve(F)
    except SingularMatrixError as exc:
        raise SingularMatrixError(
            f"coarse Petrov-Galerkin matrix is singular ({exc}); increase the "
            "oversampling order m or refine the meshes", pivot=exc.pivot) from exc
    timings["coarse_solve"] = time.perf_counter() - t0

    scale = np.linalg.norm(F)
    ortho = float(np.linalg.norm(F - K @ u) / scale) if scale > 0 else 0.0
    return MsPGResult(u=u, u_fine=P @ u, n_classes=n_classes,
                      orthogonality_residual=ortho, solve_residual=ortho,
                      timings=timings)


def export_solution_table(mesh: StructuredMesh, dofmap: DofMap, values: np.ndarray, path):
    """Node-value text table: vertex id, coordinates, re, im."""
    values = np.asarray(values)
    with open(path, "w") as fh:
        fh.write("# vertex " + " ".join(f"x{a}" for a in range(mesh.dim)) + " re im\n")
        coords = mesh.vertex_coords(dofmap.free)
        for vid, xyz, val in zip(dofmap.free, coords, values):
            pos = " ".join(f"{x:.16g}" for x in xyz)
            fh.write(f"{vid} {pos} {val.real:.16g} {val.imag:.16g}\n")
