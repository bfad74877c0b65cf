"""Q1 element matrices and assembly of the Helmholtz sesquilinear form.

Inner products conjugate the second argument, and assembled matrices store the
form with the trial function in the first slot: entry (i, j) holds the form
applied to (basis_j, basis_i), so that ``A @ u`` evaluates the form with ``u``
as trial function against every test basis function.  Element integrals are
closed-form; load functionals use tensor Gauss quadrature.
"""

from __future__ import annotations

import dataclasses
from functools import reduce
from itertools import product

import numpy as np
import scipy.sparse as sp

from .grid import ROBIN, DofMap, MeshError, StructuredMesh

_CHUNK = 1 << 16


@dataclasses.dataclass(eq=False)
class ElementMatrices:
    """Exact Q1 integrals on one axis-aligned box cell.

    ``face_mass[(axis, side)]`` embeds the (d-1)-dimensional face mass matrix
    into the full 2^d corner numbering, nonzero only on that face's corners.
    """

    S: np.ndarray
    M: np.ndarray
    face_mass: dict


@dataclasses.dataclass(eq=False)
class FormParts:
    """Real building blocks of the Helmholtz form a = S - kappa^2 M - i kappa B."""

    S: sp.csr_matrix
    M: sp.csr_matrix
    B: sp.csr_matrix
    kappa: float

    @property
    def matrix(self) -> sp.csr_matrix:
        return (self.S - self.kappa ** 2 * self.M - 1j * self.kappa * self.B).tocsr()


@dataclasses.dataclass(eq=False)
class ProblemData:
    """Volume source f(x), Robin datum g(x, nu), optional exact solution."""

    f: object = None
    g: object = None
    u_exact: object = None
    grad_u_exact: object = None


def _mass_1d(h: float) -> np.ndarray:
    return h * np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0


def _stiffness_1d(h: float) -> np.ndarray:
    return np.array([[1.0, -1.0], [-1.0, 1.0]]) / h


def element_matrices(widths) -> ElementMatrices:
    """Local stiffness, mass and per-face boundary mass blocks."""
    widths = np.atleast_1d(np.asarray(widths, dtype=float))
    if np.any(widths <= 0):
        raise MeshError(f"degenerate cell, widths {widths.tolist()}")
    d = len(widths)
    masses = [_mass_1d(h) for h in widths]
    stiffs = [_stiffness_1d(h) for h in widths]

    def chain(mats):
        return reduce(np.kron, mats[::-1]) if mats else np.array([[1.0]])

    M = chain(masses)
    S = np.zeros_like(M)
    for a in range(d):
        S += chain([stiffs[a] if b == a else masses[b] for b in range(d)])

    face_mass = {}
    corners = np.array([o[::-1] for o in product((0, 1), repeat=d)], dtype=int)
    for a in range(d):
        sub = chain([masses[b] for b in range(d) if b != a])
        for s in (0, 1):
            full = np.zeros((2 ** d, 2 ** d))
            idx = np.flatnonzero(corners[:, a] == s)
            full[np.ix_(idx, idx)] = sub
            face_mass[(a, s)] = full
    return ElementMatrices(S=S, M=M, face_mass=face_mass)


def _check_region(mesh: StructuredMesh, region) -> np.ndarray:
    if region is None:
        return mesh.active_cells
    region = np.asarray(region)
    bad = ~mesh.is_active(region)
    if np.any(bad):
        raise MeshError(f"region contains inactive cell {int(region[bad][0])}")
    return region


def _scatter(local: np.ndarray, conn: np.ndarray, dofs: np.ndarray, n: int) -> sp.csr_matrix:
    """Sum one local matrix over all cells of a connectivity table."""
    k, nloc = conn.shape
    rows = np.repeat(dofs, nloc, axis=1).ravel()
    cols = np.tile(dofs, (1, nloc)).ravel()
    data = np.tile(local.ravel(), k)
    keep = (rows >= 0) & (cols >= 0)
    A = sp.coo_matrix((data[keep], (rows[keep], cols[keep])), shape=(n, n))
    return A.tocsr()


def assemble_form(mesh: StructuredMesh, dofmap: DofMap, kappa: float,
                  region=None, robin_facets=None) -> FormParts:
    """Assemble the form over a cell region (default: the whole mesh).

    ``robin_facets`` selects ordinals of the mesh's stored boundary facets
    carrying the absorbing term; by default all Robin facets of region cells,
    which is exactly the part of the global impedance boundary met by the
    region.  Interior artificial region boundaries get no absorbing term.
    """
    region = _check_region(mesh, region)
    loc = element_matrices(mesh.widths)
    conn = mesh.cell_vertices(region)
    dofs = dofmap.index[conn]
    n = dofmap.n
    S = _scatter(loc.S, conn, dofs, n)
    M = _scatter(loc.M, conn, dofs, n)

    if robin_facets is None:
        robin_facets = mesh.facets_of_cells(region, tag=ROBIN)
    robin_facets = np.asarray(robin_facets, dtype=int)
    B = sp.csr_matrix((n, n))
    if len(robin_facets):
        for (a, s) in product(range(mesh.dim), (0, 1)):
            sel = robin_facets[(mesh.facet_axis[robin_facets] == a)
                               & (mesh.facet_side[robin_facets] == s)]
            if not len(sel):
                continue
            fconn = mesh.cell_vertices(mesh.facet_cells[sel])
            B = B + _scatter(loc.face_mass[(a, s)], fconn, dofmap.index[fconn], n)
    return FormParts(S=S, M=M, B=B.tocsr(), kappa=float(kappa))


def gauss_points(order: int):
    """Gauss-Legendre nodes and weights on [0, 1]."""
    if order < 1:
        raise ValueError("quadrature order must be >= 1")
    q, w = np.polynomial.legendre.leggauss(order)
    return (q + 1.0) / 2.0, w / 2.0


def _tensor_points(order: int, dim: int):
    q, w = gauss_points(order)
    pts = np.array(list(product(q, repeat=dim)))[:, ::-1]
    wts = np.prod(np.array(list(product(w, repeat=dim))), axis=1)
    return pts.reshape(-1, dim), wts


def _shape_values(pts: np.ndarray) -> np.ndarray:
    """Q1 shape functions at reference points, shape (2^d, npts)."""
    d = pts.shape[1]
    corners = np.array([o[::-1] for o in product((0, 1), repeat=d)], dtype=int)
    vals = np.ones((len(corners), len(pts)))
    for a in range(d):
        vals *= np.where(corners[:, a:a + 1] == 1, pts[:, a], 1.0 - pts[:, a])
    return vals


def _shape_gradients(pts: np.ndarray, widths) -> np.ndarray:
    """Physical-space Q1 gradients at reference points, shape (2^d, npts, d)."""
    d = pts.shape[1]
    corners = np.array([o[::-1] for o in product((0, 1), repeat=d)], dtype=int)
    grads = np.empty((len(corners), len(pts), d))
    for a in range(d):
        part = np.ones((len(corners), len(pts)))
        for b in range(d):
            if b == a:
                part *= np.where(corners[:, b:b + 1] == 1, 1.0, -1.0) / widths[a]
            else:
                part *= np.where(corners[:, b:b + 1] == 1, pts[:, b], 1.0 - pts[:, b])
        grads[:, :, a] = part
    return grads


def assemble_load(mesh: StructuredMesh, dofmap: DofMap, data: ProblemData,
                  order: int = 5) -> np.ndarray:
    """Load vector of (f, basis) over cells plus (g, basis) over Robin facets."""
    if order < 2:
        raise ValueError("load quadrature order must be >= 2")
    F = np.zeros(dofmap.n, dtype=complex)
    if data.f is not None:
        pts, wts = _tensor_points(order, mesh.dim)
        phi = _shape_values(pts)
        jac = float(np.prod(mesh.widths))
        cells = mesh.active_cells
        for start in range(0, len(cells), _CHUNK):
            blk = cells[start:start + _CHUNK]
            multi = mesh.cell_multi(blk)
            coords = (mesh.origin + (multi[:, None, :] + pts[None, :, :]) * mesh.widths)
            fvals = np.asarray(data.f(coords.reshape(-1, mesh.dim))).reshape(len(blk), -1)
            dofs = dofmap.index[mesh.cell_vertices(blk)]
            contrib = (fvals * (wts * jac)) @ phi.T
            for c in range(phi.shape[0]):
                ok = dofs[:, c] >= 0
                np.add.at(F, dofs[ok, c], contrib[ok, c])
    if data.g is not None:
        F += _robin_load(mesh, dofmap, data.g, order)
    return F


def _robin_load(mesh: StructuredMesh, dofmap: DofMap, g, order: int) -> np.ndarray:
    F = np.zeros(dofmap.n, dtype=complex)
    d = mesh.dim
    robin = np.flatnonzero(mesh.facet_tag == ROBIN)
    corners = mesh.corner_offsets()
    for (a, s) in product(range(d), (0, 1)):
        sel = robin[(mesh.facet_axis[robin] == a) & (mesh.facet_side[robin] == s)]
        if not len(sel):
            continue
        if d == 1:
            pts_face = np.zeros((1, 0))
            wts = np.array([1.0])
        else:
            pts_face, wts = _tensor_points(order, d - 1)
        # embed face reference points into the cell reference cube
        pts = np.empty((len(wts), d))
        other = [b for b in range(d) if b != a]
        pts[:, a] = float(s)
        for k, b in enumerate(other):
            pts[:, b] = pts_face[:, k]
        nu = np.zeros(d)
        nu[a] = -1.0 if s == 0 else 1.0
        jac = float(np.prod(mesh.widths[other])) if other else 1.0
        phi = _shape_values(pts)
        face_corners = np.flatnonzero(corners[:, a] == s)
        multi = mesh.cell_multi(mesh.facet_cells[sel])
        coords = mesh.origin + (multi[:, None, :] + pts[None, :, :]) * mesh.widths
        gvals = np.asarray(g(coords.reshape(-1, d), nu)).reshape(len(sel), -1)
        dofs = dofmap.index[mesh.cell_vertices(mesh.facet_cells[sel])]
        contrib = (gvals * (wts * jac)) @ phi.T
        for c in face_corners:
            ok = dofs[:, c] >= 0
            np.add.at(F, dofs[ok, c], contrib[ok, c])
    return F


def cell_dof_values(mesh: StructuredMesh, dofmap: DofMap, values: np.ndarray,
                    cells=None) -> np.ndarray:
    """Per-cell corner coefficients with zeros at constrained vertices."""
    if cells is None:
        cells = mesh.active_cells
    dofs = dofmap.index[mesh.cell_vertices(cells)]
    vals = np.where(dofs >= 0, values[np.clip(dofs, 0, None)], 0.0)
    return vals


def v_norm(mesh: StructuredMesh, dofmap: DofMap, kappa: float, values: np.ndarray,
           region=None) -> float:
    """Wavenumber-weighted energy norm sqrt(kappa^2 |v|_0^2 + |grad v|_0^2)."""
    region = _check_region(mesh, region)
    loc = element_matrices(mesh.widths)
    vals = cell_dof_values(mesh, dofmap, values, region)
    G = loc.S + kappa ** 2 * loc.M
    energy = np.einsum("ki,ij,kj->", vals.conj(), G, vals).real
    return float(np.sqrt(max(energy, 0.0)))


def v_norm_from_parts(parts: FormParts, values: np.ndarray) -> float:
    x = values
    energy = np.real(np.vdot(x, parts.S @ x) + parts.kappa ** 2 * np.vdot(x, parts.M @ x))
    return float(np.sqrt(max(energy, 0.0)))


def gradient_energy_per_cell(mesh: StructuredMesh, dofmap: DofMap,
                             values: np.ndarray, cells=None) -> np.ndarray:
    """|grad v|_{L2(T)}^2 for each requested active cell."""
    if cells is None:
        cells = mesh.active_cells
    loc = element_matrices(mesh.widths)
    vals = cell_dof_values(mesh, dofmap, values, cells)
    return np.einsum("ki,ij,kj->k", vals.conj(), loc.S, vals).real


def v_norm_error(mesh: StructuredMesh, dofmap: DofMap, kappa: float,
                 u_exact, grad_u_exact, values: np.ndarray, order: int = 5) -> float:
    """Quadrature V-norm distance between an exact field and a Q1 field."""
    if grad_u_exact is None:
        raise ValueError("v_norm_error needs the exact gradient")
    pts, wts = _tensor_points(order, mesh.dim)
    phi = _shape_values(pts)
    dphi = _shape_gradients(pts, mesh.widths)
    jac = float(np.prod(mesh.widths))
    total = 0.0
    cells = mesh.active_cells
    for start in range(0, len(cells), _CHUNK):
        blk = cells[start:start + _CHUNK]
        multi = mesh.cell_multi(blk)
        coords = (mesh.origin + (multi[:, None, :] + pts[None, :, :]) * mesh.widths)
        flat = coords.reshape(-1, mesh.dim)
        uv = np.asarray(u_exact(flat)).reshape(len(blk), -1)
        gv = np.asarray(grad_u_exact(flat)).reshape(len(blk), -1, mesh.dim)
        vals = cell_dof_values(mesh, dofmap, values, blk)
        uh = vals @ phi
        diff2 = kappa ** 2 * np.abs(uv - uh) ** 2
        for a in range(mesh.dim):
            gh = vals @ dphi[:, :, a]
            diff2 += np.abs(gv[:, :, a] - gh) ** 2
        total += float((diff2 @ wts).sum() * jac)
    return float(np.sqrt(max(total, 0.0)))


def export_triplets(matrix, path):
    """Coordinate (triplet) text dump of a sparse matrix, MatrixMarket format."""
    import scipy.io
    scipy.io.mmwrite(str(path), sp.coo_matrix(matrix))
