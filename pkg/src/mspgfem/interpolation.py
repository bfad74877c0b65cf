"""Quasi-interpolation from fine to coarse fields: cellwise L2 projection
followed by vertex averaging, plus the kernel constraints used by the
patch-local corrector problems and the coarse-to-fine prolongation.

All maps are assembled once per nested mesh pair and are immutable; they can
be shared read-only by concurrent patch solves.
"""

from __future__ import annotations

import dataclasses
from itertools import product

import numpy as np
import scipy.sparse as sp

from . import assembly
from .grid import DofMap, MeshError, StructuredMesh, refinement_factor


@dataclasses.dataclass(eq=False)
class QuasiInterpolator:
    """Sparse projection from fine free dofs onto coarse free-node values."""

    matrix: sp.csr_matrix
    coarse: StructuredMesh
    coarse_dofmap: DofMap
    fine: StructuredMesh
    fine_dofmap: DofMap
    factor: int


@dataclasses.dataclass(eq=False)
class KernelConstraints:
    """Quasi-interpolation rows restricted to one patch's fine dofs.

    A patch-supported fine field w satisfies I_H w = 0 exactly when C w = 0;
    rows that vanish identically on the patch are dropped.
    """

    C: sp.csr_matrix
    rows: np.ndarray
    patch_dofs: np.ndarray


def _local_fine_offsets(dim: int, r: int) -> np.ndarray:
    """Fine-vertex lattice of one coarse cell, x fastest, shape ((r+1)^d, d)."""
    offs = list(product(range(r + 1), repeat=dim))
    return np.array([o[::-1] for o in offs], dtype=int)


def local_projection(widths, r: int) -> np.ndarray:
    """Cellwise L2-projection matrix from fine Q1 coefficients to the 2^d
    coarse corner coefficients, exact for the nested tensor-product spaces."""
    widths = np.atleast_1d(np.asarray(widths, dtype=float))
    mats = []
    for H in widths:
        h = H / r
        Mc = assembly._mass_1d(H)
        mix = np.zeros((2, r + 1))
        q, w = assembly.gauss_points(2)
        for k in range(r):
            x = (k + q) * h
            lam = np.stack([1.0 - x / H, x / H])
            mix[:, k] += h * (lam * (w * (1.0 - q))).sum(axis=1)
            mix[:, k + 1] += h * (lam * (w * q)).sum(axis=1)
        mats.append(np.linalg.solve(Mc, mix))
    out = mats[0]
    for P1 in mats[1:]:
        out = np.kron(P1, out)
    return out


def build_pi_h(coarse: StructuredMesh, fine: StructuredMesh,
               fine_dofmap: DofMap) -> sp.csr_matrix:
    """Piecewise L2 projection onto the discontinuous per-cell Q1 space.

    Rows are indexed by (active coarse cell ordinal, corner); constrained fine
    vertices contribute their zero boundary values.
    """
    r = refinement_factor(coarse, fine)
    d = coarse.dim
    Ploc = local_projection(coarse.widths, r)
    offs = _local_fine_offsets(d, r)
    n_loc = len(offs)
    cells = coarse.active_cells
    base = coarse.cell_multi(cells) * r
    fine_vids = np.stack([fine.vertex_id(base + off) for off in offs], axis=1)
    fdofs = fine_dofmap.index[fine_vids]                       # (k, n_loc)
    n_corner = 2 ** d
    rows = (np.repeat(np.arange(len(cells)) * n_corner, n_corner * n_loc)
            + np.tile(np.repeat(np.arange(n_corner), n_loc), len(cells)))
    cols = np.tile(fdofs, (1, n_corner)).ravel()
    data = np.tile(Ploc.ravel(), len(cells))
    keep = cols >= 0
    return sp.coo_matrix((data[keep], (rows[keep], cols[keep])),
                         shape=(len(cells) * n_corner, fine_dofmap.n)).tocsr()


def build_e_h(coarse: StructuredMesh, coarse_dofmap: DofMap) -> sp.csr_matrix:
    """Averaging from per-cell corner coefficients to coarse free-node values.

    Each free vertex takes the arithmetic mean over its adjacent active cells;
    Dirichlet vertices are dropped, so averaged fields vanish on the closed
    Dirichlet boundary.
    """
    d = coarse.dim
    n_corner = 2 ** d
    cells = coarse.active_cells
    multi = coarse.cell_multi(cells)
    offs = coarse.corner_offsets()
    rows, cols, vals = [], [], []
    for c, off in enumerate(offs):
        verts = multi + off
        vids = coarse.vertex_id(verts)
        dofs = coarse_dofmap.index[vids]
        cnt = coarse.vertex_active_count[tuple(verts.T)]
        keep = dofs >= 0
        rows.append(dofs[keep])
        cols.append(np.flatnonzero(keep) * n_corner + c)
        vals.append(1.0 / cnt[keep])
    return sp.coo_matrix((np.concatenate(vals),
                          (np.concatenate(rows), np.concatenate(cols))),
                         shape=(coarse_dofmap.n, len(cells) * n_corner)).tocsr()


def build_i_h(coarse: StructuredMesh, coarse_dofmap: DofMap,
              fine: StructuredMesh, fine_dofmap: DofMap) -> QuasiInterpolator:
    """Compose projection and averaging into the quasi-interpolation matrix."""
    r = refinement_factor(coarse, fine)
    Pi = build_pi_h(coarse, fine, fine_dofmap)
    E = build_e_h(coarse, coarse_dofmap)
    I = (E @ Pi).tocsr()
    I.eliminate_zeros()
    return QuasiInterpolator(matrix=I, coarse=coarse, coarse_dofmap=coarse_dofmap,
                             fine=fine, fine_dofmap=fine_dofmap, factor=r)


def prolongation_matrix(coarse: StructuredMesh, coarse_dofmap: DofMap,
                        fine: StructuredMesh, fine_dofmap: DofMap) -> sp.csr_matrix:
    """Exact Q1 embedding of coarse free fields into the fine free space."""
    r = refinement_factor(coarse, fine)
    d = coarse.dim
    vmulti = fine.vertex_multi(fine_dofmap.free)
    owner = np.minimum(vmulti // r, coarse.n - 1)
    ok = coarse.is_active(coarse.cell_id(owner))
    if not np.all(ok):
        # vertices on coarse grid planes may have their default owner inside a
        # hole; shift down along lattice-aligned axes until an active cell owns them
        on_plane = (vmulti % r == 0) & (owner > 0)
        for combo in product((0, 1), repeat=d):
            bad = np.flatnonzero(~ok)
            if not len(bad):
                break
            shift = np.array(combo[::-1], dtype=int)
            cand = owner[bad] - shift * on_plane[bad]
            good = coarse.is_active(coarse.cell_id(cand))
            owner[bad[good]] = cand[good]
            ok[bad[good]] = True
        if not np.all(ok):
            raise MeshError("free fine vertex without an active owning coarse cell")
    t = vmulti / r - owner
    rows, cols, vals = [], [], []
    for off in coarse.corner_offsets():
        w = np.ones(len(vmulti))
        for a in range(d):
            w *= t[:, a] if off[a] else 1.0 - t[:, a]
        dofs = coarse_dofmap.index[coarse.vertex_id(owner + off)]
        keep = (dofs >= 0) & (w != 0.0)
        rows.append(np.flatnonzero(keep))
        cols.append(dofs[keep])
        vals.append(w[keep])
    P = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(fine_dofmap.n, coarse_dofmap.n)).tocsr()
    P.sum_duplicates()
    return P


def kernel_constraints(i_h: QuasiInterpolator, patch_dofs: np.ndarray) -> KernelConstraints:
    """Constraint rows pinning the quasi-interpolation to zero on a patch."""
    patch_dofs = np.asarray(patch_dofs)
    if len(patch_dofs) == 0:
        raise MeshError("empty patch")
    C = i_h.matrix[:, patch_dofs].tocsr()
    nnz = np.diff(C.indptr)
    rows = np.flatnonzero(nnz > 0)
    return KernelConstraints(C=C[rows], rows=rows, patch_dofs=patch_dofs)


# -- measured-constant diagnostics (recorded, never thresholds) ------------

def measure_approximation_constant(i_h: QuasiInterpolator, n_samples: int = 100,
                                   seed: int = 0) -> float:
    """Largest sampled ratio |v - I_H v|_{L2(T)} / (H |grad v|_{N(T)}).

    Supremum surrogate over random fine fields on hole-free meshes; used to
    track mesh independence of the quasi-interpolation constant.
    """
    coarse, fine = i_h.coarse, i_h.fine
    P = prolongation_matrix(coarse, i_h.coarse_dofmap, fine, i_h.fine_dofmap)
    loc = assembly.element_matrices(fine.widths)
    rng = np.random.default_rng(seed)
    r = i_h.factor
    parent_grid = np.arange(np.prod(coarse.n)).reshape(tuple(coarse.n), order="F")
    worst = 0.0
    for _ in range(n_samples):
        v = rng.standard_normal(i_h.fine_dofmap.n)
        w = v - P @ (i_h.matrix @ v)
        vals_w = assembly.cell_dof_values(fine, i_h.fine_dofmap, w)
        mass_T_fine = np.einsum("ki,ij,kj->k", vals_w, loc.M, vals_w)
        grad_fine = assembly.gradient_energy_per_cell(fine, i_h.fine_dofmap, v)
        # accumulate fine-cell quantities onto the coarse cell grid
        shape = tuple(coarse.n)
        mass_T = np.zeros(shape)
        grad_T = np.zeros(shape)
        fmulti = fine.cell_multi(fine.active_cells) // r
        np.add.at(mass_T, tuple(fmulti.T), mass_T_fine)
        np.add.at(grad_T, tuple(fmulti.T), grad_fine)
        # neighborhood gradient energy via box sums
        nbr = np.zeros(shape)
        for off in product((-1, 0, 1), repeat=coarse.dim):
            src = tuple(slice(max(0, -o), nn - max(0, o)) for o, nn in zip(off, coarse.n))
            dst = tuple(slice(max(0, o), nn - max(0, -o)) for o, nn in zip(off, coarse.n))
            nbr[dst] += grad_T[src]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.sqrt(mass_T) / (coarse.H * np.sqrt(nbr))
        worst = max(worst, float(np.nanmax(ratio)))
    return worst


def measure_v_stability(i_h: QuasiInterpolator, kappa: float, n_samples: int = 100,
                        seed: int = 0) -> float:
    """Largest sampled V-norm amplification of the quasi-interpolation."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_samples):
        v = rng.standard_normal(i_h.fine_dofmap.n)
        num = assembly.v_norm(i_h.coarse, i_h.coarse_dofmap, kappa, i_h.matrix @ v)
        den = assembly.v_norm(i_h.fine, i_h.fine_dofmap, kappa, v)
        worst = max(worst, num / den)
    return worst
