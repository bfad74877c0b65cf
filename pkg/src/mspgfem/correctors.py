"""Patch-localized subscale corrector problems and the corrected test basis.

For every coarse element T and each of its free corner hats, the corrector is
the kernel-constrained fine-scale field solving the patch problem with the
unknown in the second slot of the sesquilinear form.  With the module-wide
convention that matrices store the form trial-in-first-slot, that conjugate-
linear dependence turns into the saddle-point system

    [[conj(A_patch), C^T], [C, 0]] [lam; mu] = [conj(b); 0],

where C holds the quasi-interpolation rows met by the patch and
b_i = form_T(basis_i, hat).  One factorization serves every corner of T.
On structured meshes the patch problems are translation-invariant, so only
one representative per patch configuration class is ever solved; cached
correctors transfer to class members by exact integer index shifts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import warnings
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import scipy.sparse as sp

from . import interpolation
from .assembly import assemble_form, gradient_energy_per_cell
from .grid import (DofMap, MeshError, PatchClass, StructuredMesh,
                   classify_patches, patch, refinement_factor)
from .solver import Factorization, SingularMatrixError, factorize

CACHE_FORMAT_VERSION = 1


@dataclasses.dataclass(eq=False)
class ElementCorrector:
    """Fine-scale correctors of one element's corner hats.

    ``offsets`` are patch fine-vertex lattice offsets relative to the
    element's base fine vertex; ``values[c]`` is the corrector of corner c,
    zero where the corner is constrained.  ``m=None`` marks a whole-domain
    (idealized) corrector.
    """

    cell: int
    m: int | None
    corner_free: np.ndarray
    offsets: np.ndarray
    values: np.ndarray
    kernel_residual: float


@dataclasses.dataclass(eq=False)
class TestBasis:
    """Corrected test functions as rows over the fine free dofs."""

    matrix: sp.csr_matrix
    P: sp.spmatrix

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def resolution_margin(kappa: float, H: float, dim: int, c_ih: float = 1.0) -> float:
    """Ratio of kappa*H to the advisory well-posedness threshold (<= 1 is safe)."""
    c_ol = 3.0 ** dim
    return float(c_ih * np.sqrt(c_ol) * H * kappa * np.sqrt(2.0))


def _warn_resolution(kappa: float, coarse: StructuredMesh, c_ih: float):
    margin = resolution_margin(kappa, coarse.H, coarse.dim, c_ih)
    if margin > 1.0:
        warnings.warn(
            f"resolution condition violated (margin {margin:.2f} > 1 at "
            f"kappa={kappa}, H={coarse.H:.4g}); corrector decay may degrade",
            stacklevel=3)


def patch_fine_dofs(coarse: StructuredMesh, fine: StructuredMesh,
                    fine_dofmap: DofMap, patch_cells: np.ndarray) -> np.ndarray:
    """Free fine dofs of a patch: vertices of the patch's fine cells that are
    neither on the artificial patch boundary nor on the Dirichlet boundary.

    A vertex lies strictly inside the patch exactly when every active fine
    cell containing it belongs to the patch; vertices on the outer domain
    boundary pass that test and stay free unless Dirichlet-tagged.
    """
    r = refinement_factor(coarse, fine)
    base = coarse.cell_multi(patch_cells) * r
    offs = interpolation._local_fine_offsets(coarse.dim, r - 1) if r > 1 else \
        np.zeros((1, coarse.dim), dtype=int)
    fine_cells = np.concatenate([fine.cell_id(base + off) for off in offs])
    conn = fine.cell_vertices(fine_cells)
    verts, local_count = np.unique(conn.ravel(), return_counts=True)
    vmulti = fine.vertex_multi(verts)
    global_count = fine.vertex_active_count[tuple(vmulti.T)]
    dofs = fine_dofmap.index[verts]
    keep = (local_count == global_count) & (dofs >= 0)
    return np.sort(dofs[keep])


def _element_matrix(fine: StructuredMesh, fine_dofmap: DofMap, kappa: float,
                    coarse: StructuredMesh, cell: int, r: int) -> sp.csr_matrix:
    """Fine-space form restricted to one coarse element's fine cells."""
    base = coarse.cell_multi([cell]) * r
    offs = interpolation._local_fine_offsets(coarse.dim, r - 1) if r > 1 else \
        np.zeros((1, coarse.dim), dtype=int)
    fine_cells = np.concatenate([fine.cell_id(base + off) for off in offs])
    return assemble_form(fine, fine_dofmap, kappa, region=fine_cells).matrix


def _corner_dofs(coarse: StructuredMesh, coarse_dofmap: DofMap, cell: int) -> np.ndarray:
    return coarse_dofmap.index[coarse.cell_vertices([cell])[0]]


def _solve_corners(fact: Factorization, A_T: sp.csr_matrix, P: sp.spmatrix,
                   C: sp.csr_matrix, dofs: np.ndarray, corner_dofs: np.ndarray):
    n_p = len(dofs)
    n_corner = len(corner_dofs)
    values = np.zeros((n_corner, n_p), dtype=complex)
    corner_free = corner_dofs >= 0
    kernel_residual = 0.0
    for c in np.flatnonzero(corner_free):
        y = P[:, corner_dofs[c]]
        b = np.asarray((A_T @ y).todense()).ravel()[dofs]
        rhs = np.concatenate([np.conj(b), np.zeros(C.shape[0], dtype=complex)])
        lam = fact.solve(rhs)[:n_p]
        values[c] = lam
        scale = np.abs(lam).max()
        if scale > 0:
            kernel_residual = max(kernel_residual,
                                  float(np.abs(C @ lam).max() / scale))
    return corner_free, values, kernel_residual


def solve_element_corrector(coarse: StructuredMesh, coarse_dofmap: DofMap,
                            fine: StructuredMesh, fine_dofmap: DofMap,
                            i_h: interpolation.QuasiInterpolator, P: sp.spmatrix,
                            kappa: float, cell: int, m: int,
                            check_resolution: bool = True,
                            c_ih: float = 1.0) -> ElementCorrector:
    """Solve the patch corrector problem of one element for all its hats."""
    if check_resolution:
        _warn_resolution(kappa, coarse, c_ih)
    P = P.tocsc()
    r = refinement_factor(coarse, fine)
    cells = patch(coarse, int(cell), m)
    dofs = patch_fine_dofs(coarse, fine, fine_dofmap, cells)
    if len(dofs) == 0:
        raise MeshError(f"patch of cell {cell} has no free fine dofs")
    fine_region = _patch_fine_cells(coarse, fine, cells, r)
    A_p = assemble_form(fine, fine_dofmap, kappa, region=fine_region).matrix
    A_sub = A_p[dofs][:, dofs]
    kc = interpolation.kernel_constraints(i_h, dofs)
    saddle = sp.bmat([[A_sub.conjugate(), kc.C.T], [kc.C, None]], format="csc")
    try:
        fact = factorize(saddle)
    except SingularMatrixError as exc:
        raise SingularMatrixError(
            f"singular corrector system on the patch of cell {cell} ({exc}); "
            "decrease H or refine the fine mesh", pivot=exc.pivot) from exc
    A_T = _element_matrix(fine, fine_dofmap, kappa, coarse, int(cell), r)
    corner_dofs = _corner_dofs(coarse, coarse_dofmap, int(cell))
    corner_free, values, kres = _solve_corners(fact, A_T, P, kc.C, dofs, corner_dofs)
    offsets = fine.vertex_multi(fine_dofmap.free[dofs]) - coarse.cell_multi([cell])[0] * r
    return ElementCorrector(cell=int(cell), m=m, corner_free=corner_free,
                            offsets=offsets.astype(np.int32), values=values,
                            kernel_residual=kres)


def _patch_fine_cells(coarse: StructuredMesh, fine: StructuredMesh,
                      patch_cells: np.ndarray, r: int) -> np.ndarray:
    base = coarse.cell_multi(patch_cells) * r
    offs = interpolation._local_fine_offsets(coarse.dim, r - 1) if r > 1 else \
        np.zeros((1, coarse.dim), dtype=int)
    return np.concatenate([fine.cell_id(base + off) for off in offs])


class IdealCorrectorSolver:
    """Whole-domain corrector problems behind a single factorization.

    Used for the idealized-method oracle and the exponential-decay
    diagnostics, where many elements share the same global saddle system.
    """

    def __init__(self, coarse, coarse_dofmap, fine, fine_dofmap, i_h, P, kappa,
                 check_resolution: bool = True):
        if check_resolution:
            _warn_resolution(kappa, coarse, 1.0)
        self.coarse, self.coarse_dofmap = coarse, coarse_dofmap
        self.fine, self.fine_dofmap = fine, fine_dofmap
        self.P = P.tocsc()
        self.kappa = kappa
        self.r = refinement_factor(coarse, fine)
        A = assemble_form(fine, fine_dofmap, kappa).matrix
        C = i_h.matrix
        self.C = C
        saddle = sp.bmat([[A.conjugate(), C.T], [C, None]], format="csc")
        try:
            self._fact = factorize(saddle)
        except SingularMatrixError as exc:
            raise SingularMatrixError(
                f"singular idealized corrector system ({exc}); decrease H or "
                "refine the fine mesh", pivot=exc.pivot) from exc
        self._all_dofs = np.arange(fine_dofmap.n)
        base = fine.vertex_multi(fine_dofmap.free)
        self._vmulti = base

    def solve(self, cell: int) -> ElementCorrector:
        A_T = _element_matrix(self.fine, self.fine_dofmap, self.kappa,
                              self.coarse, int(cell), self.r)
        corner_dofs = _corner_dofs(self.coarse, self.coarse_dofmap, int(cell))
        corner_free, values, kres = _solve_corners(
            self._fact, A_T, self.P, self.C, self._all_dofs, corner_dofs)
        offsets = self._vmulti - self.coarse.cell_multi([int(cell)])[0] * self.r
        return ElementCorrector(cell=int(cell), m=None, corner_free=corner_free,
                                offsets=offsets.astype(np.int32), values=values,
                                kernel_residual=kres)


def solve_ideal_corrector(coarse, coarse_dofmap, fine, fine_dofmap, i_h, P,
                          kappa, cell, check_resolution=True) -> ElementCorrector:
    """One-shot whole-domain corrector for a single element."""
    solver = IdealCorrectorSolver(coarse, coarse_dofmap, fine, fine_dofmap,
                                  i_h, P, kappa, check_resolution=check_resolution)
    return solver.solve(cell)


@dataclasses.dataclass(eq=False)
class CorrectorCache:
    """Solved representative correctors keyed by patch configuration class."""

    coarse: StructuredMesh
    coarse_dofmap: DofMap
    fine: StructuredMesh
    fine_dofmap: DofMap
    kappa: float
    m: int
    classes: list
    correctors: list

    @property
    def n_solves(self) -> int:
        return len(self.classes)

    def class_index(self) -> np.ndarray:
        """Class ordinal of every cell, indexed by coarse flat cell id."""
        idx = np.full(int(np.prod(self.coarse.n)), -1, dtype=np.int64)
        for k, cls in enumerate(self.classes):
            idx[cls.members] = k
        return idx

    def corrector_for(self, cell: int) -> tuple[np.ndarray, ElementCorrector]:
        """Global fine dof ids and the class corrector, translated to a cell."""
        k = self.class_index()[int(cell)]
        if k < 0:
            raise MeshError(f"cell {cell} is not an active cell of this cache")
        corr = self.correctors[k]
        r = refinement_factor(self.coarse, self.fine)
        base = self.coarse.cell_multi([int(cell)])[0] * r
        verts = self.fine.vertex_id(corr.offsets + base)
        dofs = self.fine_dofmap.index[verts]
        if np.any(dofs < 0):
            raise MeshError(f"translated corrector of cell {cell} hits a "
                            "constrained dof; classification is inconsistent")
        return dofs, corr


def build_cache(coarse, coarse_dofmap, fine, fine_dofmap, i_h, P, kappa, m,
                n_jobs: int = 1, check_resolution: bool = True) -> CorrectorCache:
    """Solve one corrector problem per patch configuration class."""
    if check_resolution:
        _warn_resolution(kappa, coarse, 1.0)
    P = P.tocsc()
    classes = classify_patches(coarse, m)

    def solve_one(cls: PatchClass) -> ElementCorrector:
        return solve_element_corrector(coarse, coarse_dofmap, fine, fine_dofmap,
                                       i_h, P, kappa, cls.representative, m,
                                       check_resolution=False)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            correctors = list(pool.map(solve_one, classes))
    else:
        correctors = [solve_one(cls) for cls in classes]
    return CorrectorCache(coarse=coarse, coarse_dofmap=coarse_dofmap, fine=fine,
                          fine_dofmap=fine_dofmap, kappa=kappa, m=m,
                          classes=classes, correctors=correctors)


def _accumulate_basis(coarse, coarse_dofmap, fine, fine_dofmap, groups, P):
    """Rows of hat-minus-corrector test functions from (members, corrector) pairs."""
    r = refinement_factor(coarse, fine)
    corner_offs = coarse.corner_offsets()
    rows, cols, vals = [], [], []
    for members, corr in groups:
        multi = coarse.cell_multi(members)
        k = corr.values.shape[1]
        for c in np.flatnonzero(corr.corner_free):
            zdofs = coarse_dofmap.index[coarse.vertex_id(multi + corner_offs[c])]
            ok = zdofs >= 0
            if not np.any(ok):
                continue
            base = multi[ok] * r
            verts = (base[:, None, :] + corr.offsets[None, :, :]).reshape(-1, coarse.dim)
            fdofs = fine_dofmap.index[fine.vertex_id(verts)]
            if np.any(fdofs < 0):
                raise MeshError("translated corrector hits a constrained dof")
            rows.append(np.repeat(zdofs[ok], k).astype(np.int64))
            cols.append(fdofs.astype(np.int64))
            vals.append(np.tile(corr.values[c], int(ok.sum())))
    correction = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(coarse_dofmap.n, fine_dofmap.n)).tocsr()
    basis = (P.T.astype(complex) - correction).tocsr()
    return TestBasis(matrix=basis, P=P)


def build_test_basis(cache: CorrectorCache, P: sp.spmatrix) -> TestBasis:
    """Assemble all corrected test functions from a complete cache."""
    groups = [(cls.members, corr) for cls, corr in zip(cache.classes, cache.correctors)]
    return _accumulate_basis(cache.coarse, cache.coarse_dofmap, cache.fine,
                             cache.fine_dofmap, groups, P)


def build_ideal_test_basis(solver: IdealCorrectorSolver, P: sp.spmatrix) -> TestBasis:
    """Whole-domain (idealized) test functions; one solve per element."""
    groups = []
    for cell in solver.coarse.active_cells:
        corr = solver.solve(int(cell))
        groups.append((np.array([cell]), corr))
    return _accumulate_basis(solver.coarse, solver.coarse_dofmap, solver.fine,
                             solver.fine_dofmap, groups, P)


# -- persistent cache ------------------------------------------------------

def cache_key(domain, n, factor, kappa, m) -> str:
    h = hashlib.sha256()
    h.update(np.asarray(domain.extent, dtype=float).tobytes())
    for hole in domain.holes:
        h.update(np.asarray(hole, dtype=float).tobytes())
    h.update(np.asarray(domain.outer_tags, dtype=int).tobytes())
    h.update(np.asarray(n, dtype=int).tobytes())
    h.update(np.int64(factor).tobytes())
    h.update(np.float64(kappa).tobytes())
    h.update(np.int64(m).tobytes())
    return h.hexdigest()


def save_cache(cache: CorrectorCache, path):
    """Versioned binary dump of the per-class corrector vectors."""
    r = refinement_factor(cache.coarse, cache.fine)
    key = cache_key(cache.coarse.domain, cache.coarse.n, r, cache.kappa, cache.m)
    arrays = {
        "format_version": np.int64(CACHE_FORMAT_VERSION),
        "key": np.frombuffer(bytes.fromhex(key), dtype=np.uint8),
        "kappa": np.float64(cache.kappa),
        "m": np.int64(cache.m),
        "n_classes": np.int64(len(cache.classes)),
    }
    for k, (cls, corr) in enumerate(zip(cache.classes, cache.correctors)):
        arrays[f"class{k}_members"] = cls.members
        arrays[f"class{k}_cell"] = np.int64(corr.cell)
        arrays[f"class{k}_corner_free"] = corr.corner_free
        arrays[f"class{k}_offsets"] = corr.offsets
        arrays[f"class{k}_values"] = corr.values
        arrays[f"class{k}_kres"] = np.float64(corr.kernel_residual)
    np.savez_compressed(path, **arrays)


def load_cache(path, coarse, coarse_dofmap, fine, fine_dofmap, kappa, m) -> CorrectorCache:
    """Load a cache dump, validating it against the requested configuration."""
    with np.load(path) as data:
        if int(data["format_version"]) != CACHE_FORMAT_VERSION:
            raise ValueError(f"unsupported cache format {int(data['format_version'])}")
        r = refinement_factor(coarse, fine)
        key = cache_key(coarse.domain, coarse.n, r, kappa, m)
        stored = data["key"].tobytes().hex()
        if stored != key:
            raise ValueError("cache file does not match the requested "
                             "domain/resolution/kappa/m configuration")
        classes = classify_patches(coarse, m)
        if len(classes) != int(data["n_classes"]):
            raise ValueError("cache class count does not match classification")
        correctors = []
        for k, cls in enumerate(classes):
            members = data[f"class{k}_members"]
            if not np.array_equal(members, cls.members):
                raise ValueError(f"cache class {k} membership mismatch")
            correctors.append(ElementCorrector(
                cell=int(data[f"class{k}_cell"]), m=int(m),
                corner_free=data[f"class{k}_corner_free"],
                offsets=data[f"class{k}_offsets"],
                values=data[f"class{k}_values"],
                kernel_residual=float(data[f"class{k}_kres"])))
    return CorrectorCache(coarse=coarse, coarse_dofmap=coarse_dofmap, fine=fine,
                          fine_dofmap=fine_dofmap, kappa=kappa, m=m,
                          classes=classes, correctors=correctors)


# -- decay diagnostics -----------------------------------------------------

def corrector_field(fine_dofmap: DofMap, dofs: np.ndarray, values: np.ndarray) -> np.ndarray:
    out = np.zeros(fine_dofmap.n, dtype=complex)
    out[dofs] = values
    return out


def decay_profile(coarse, coarse_dofmap, fine, fine_dofmap, i_h, P, kappa,
                  cell: int, m_values, check_resolution: bool = True) -> dict:
    """Tail energies and localization errors of one element's correctors.

    For every oversampling order in ``m_values`` this reports the gradient
    norm of the whole-domain corrector outside the m-th order patch (summed
    over the element's free hats) and the gradient norm of the difference to
    the localized corrector, both expected to decay geometrically.
    """
    solver = IdealCorrectorSolver(coarse, coarse_dofmap, fine, fine_dofmap,
                                  i_h, P, kappa, check_resolution=check_resolution)
    ideal = solver.solve(int(cell))
    r = refinement_factor(coarse, fine)
    parent = coarse.cell_id(fine.cell_multi(fine.active_cells) // r)

    free_corners = np.flatnonzero(ideal.corner_free)
    energies = []
    for c in free_corners:
        w = corrector_field(fine_dofmap, np.arange(fine_dofmap.n), ideal.values[c])
        energies.append(gradient_energy_per_cell(fine, fine_dofmap, w))
    energies = np.array(energies)

    tails, loc_errors = [], []
    for m in m_values:
        inside = np.isin(parent, patch(coarse, int(cell), int(m)))
        tails.append(float(np.sqrt(max(energies[:, ~inside].sum(), 0.0))))
        local = solve_element_corrector(coarse, coarse_dofmap, fine, fine_dofmap,
                                        i_h, P, kappa, int(cell), int(m),
                                        check_resolution=False)
        err2 = 0.0
        for c in free_corners:
            diff = corrector_field(fine_dofmap, np.arange(fine_dofmap.n), ideal.values[c])
            vdofs = fine_dofmap.index[fine.vertex_id(
                local.offsets + coarse.cell_multi([int(cell)])[0] * r)]
            diff[vdofs] -= local.values[c]
            err2 += gradient_energy_per_cell(fine, fine_dofmap, diff).sum()
        loc_errors.append(float(np.sqrt(max(err2, 0.0))))
    return {"m": np.asarray(list(m_values), dtype=int),
            "tail": np.array(tails), "localization_error": np.array(loc_errors),
            "kernel_residual": ideal.kernel_residual}


def fitted_decay_ratio(m_values, tails) -> float:
    """Least-squares geometric decay ratio of a positive tail sequence."""
    m_values = np.asarray(m_values, dtype=float)
    tails = np.asarray(tails, dtype=float)
    keep = tails > 0
    slope = np.polyfit(m_values[keep], np.log(tails[keep]), 1)[0]
    return float(np.exp(slope))
