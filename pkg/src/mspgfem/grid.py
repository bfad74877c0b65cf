"""Structured tensor-product meshes over box domains with rectangular holes.

Cells, vertices and facets carry lexicographic flat indices with the x axis
running fastest.  Holes must be unions of cells at the chosen resolution, so
all cells are congruent axis-aligned boxes and patch problems around distinct
cells differ only by an integer lattice translation.  All structures are
immutable after construction and safe for concurrent reads.
"""

from __future__ import annotations

import dataclasses
from itertools import product

import numpy as np

DIRICHLET = 1
ROBIN = 2

_TAG_NAMES = {DIRICHLET: "dirichlet", ROBIN: "robin"}


class MeshError(ValueError):
    """Invalid domain or mesh construction request."""


@dataclasses.dataclass(eq=False)
class BoxDomain:
    """Axis-aligned box, minus a set of pairwise disjoint axis-aligned holes.

    ``extent`` is a (d, 2) array of per-axis intervals, ``holes`` a sequence of
    (d, 2) arrays contained in the extent.  Hole boundaries are sound-soft
    (Dirichlet); each outer face carries its own tag (Robin by default).
    """

    extent: np.ndarray
    holes: tuple = ()
    outer_tags: np.ndarray | None = None

    def __post_init__(self):
        self.extent = np.atleast_2d(np.asarray(self.extent, dtype=float))
        if self.extent.shape[1] != 2 or not 1 <= self.extent.shape[0] <= 3:
            raise MeshError(f"extent must be (d, 2) with d in 1..3, got {self.extent.shape}")
        if np.any(self.extent[:, 1] <= self.extent[:, 0]):
            raise MeshError("extent intervals must have positive length")
        self.holes = tuple(np.atleast_2d(np.asarray(h, dtype=float)) for h in self.holes)
        for h in self.holes:
            if h.shape != self.extent.shape:
                raise MeshError(f"hole shape {h.shape} does not match extent {self.extent.shape}")
            if np.any(h[:, 0] < self.extent[:, 0] - 1e-12) or np.any(h[:, 1] > self.extent[:, 1] + 1e-12):
                raise MeshError(f"hole {h.tolist()} is not contained in the extent")
            if np.any(h[:, 1] <= h[:, 0]):
                raise MeshError("hole intervals must have positive length")
        for i, a in enumerate(self.holes):
            for b in self.holes[i + 1:]:
                if np.all(np.maximum(a[:, 0], b[:, 0]) < np.minimum(a[:, 1], b[:, 1]) - 1e-12):
                    raise MeshError("holes must be pairwise disjoint")
        if self.outer_tags is None:
            self.outer_tags = np.full((self.dim, 2), ROBIN, dtype=int)
        else:
            self.outer_tags = np.asarray(self.outer_tags, dtype=int).reshape(self.dim, 2)
            if not np.all(np.isin(self.outer_tags, (DIRICHLET, ROBIN))):
                raise MeshError("outer tags must be DIRICHLET or ROBIN")

    @property
    def dim(self) -> int:
        return self.extent.shape[0]


def unit_interval(holes=(), outer_tags=None) -> BoxDomain:
    return BoxDomain(np.array([[0.0, 1.0]]), holes, outer_tags)


def unit_square(holes=(), outer_tags=None) -> BoxDomain:
    return BoxDomain(np.array([[0.0, 1.0], [0.0, 1.0]]), holes, outer_tags)


def unit_cube(holes=(), outer_tags=None) -> BoxDomain:
    return BoxDomain(np.array([[0.0, 1.0]] * 3), holes, outer_tags)


@dataclasses.dataclass(eq=False)
class DofMap:
    """Free vertices (not on the closed Dirichlet boundary) of a mesh.

    ``free`` lists flat vertex indices in lexicographic order; ``index`` maps
    every lattice vertex to its dof ordinal, or -1 where constrained or
    detached from all active cells.
    """

    free: np.ndarray
    index: np.ndarray

    @property
    def n(self) -> int:
        return len(self.free)


@dataclasses.dataclass(frozen=True)
class PatchSignature:
    """Translation-equivalence key of an m-th order element patch.

    ``clip`` holds per-axis (low, high) cell counts clipped off the full
    oversampling box by the outer boundary; ``mask`` serializes the active
    pattern of the local cell window, padded as active outside the domain.
    Cells with equal signatures have patches that are exact translates of one
    another, including boundary tags.
    """

    m: int
    clip: tuple
    mask: bytes


@dataclasses.dataclass(eq=False)
class PatchClass:
    signature: PatchSignature
    representative: int
    members: np.ndarray


class StructuredMesh:
    """Uniform tensor-product partition of a box domain minus its holes."""

    def __init__(self, domain: BoxDomain, n_per_axis, active_grid: np.ndarray):
        self.domain = domain
        self.n = np.asarray(n_per_axis, dtype=int)
        if self.n.shape != (domain.dim,) or np.any(self.n < 1):
            raise MeshError(f"need {domain.dim} positive cell counts, got {n_per_axis}")
        self.widths = (domain.extent[:, 1] - domain.extent[:, 0]) / self.n
        self.origin = domain.extent[:, 0].copy()
        self.H = float(np.linalg.norm(self.widths))
        self.active_grid = active_grid
        self.active_cells = np.flatnonzero(active_grid.ravel(order="F"))
        if len(self.active_cells) == 0:
            raise MeshError("mesh has no active cells")
        self._build_vertex_counts()
        self._build_boundary_facets()

    # -- index arithmetic ------------------------------------------------

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def n_cells(self) -> int:
        return len(self.active_cells)

    @property
    def n_vertices(self) -> int:
        return int(np.prod(self.n + 1))

    def cell_multi(self, cells) -> np.ndarray:
        return np.column_stack(np.unravel_index(np.asarray(cells), self.n, order="F"))

    def cell_id(self, multi) -> np.ndarray:
        multi = np.asarray(multi)
        return np.ravel_multi_index(tuple(multi.T), self.n, order="F")

    def vertex_multi(self, verts) -> np.ndarray:
        return np.column_stack(np.unravel_index(np.asarray(verts), self.n + 1, order="F"))

    def vertex_id(self, multi) -> np.ndarray:
        multi = np.asarray(multi)
        return np.ravel_multi_index(tuple(multi.T), self.n + 1, order="F")

    def vertex_coords(self, verts) -> np.ndarray:
        return self.origin + self.vertex_multi(verts) * self.widths

    def corner_offsets(self) -> np.ndarray:
        """Local corner lattice offsets, 2^d rows, x-bit fastest."""
        offs = list(product((0, 1), repeat=self.dim))
        return np.array([o[::-1] for o in offs], dtype=int)

    def cell_vertices(self, cells) -> np.ndarray:
        """Global vertex ids of each cell's corners, shape (k, 2^d)."""
        multi = self.cell_multi(cells)
        offs = self.corner_offsets()
        return np.stack([self.vertex_id(multi + off) for off in offs], axis=1)

    def is_active(self, cells) -> np.ndarray:
        return self.active_grid.ravel(order="F")[cells]

    # -- construction helpers --------------------------------------------

    def _build_vertex_counts(self):
        cnt = np.zeros(self.n + 1, dtype=np.int32)
        act = self.active_grid.astype(np.int32)
        for off in product((0, 1), repeat=self.dim):
            sl = tuple(slice(o, nn + o) for o, nn in zip(off, self.n))
            cnt[sl] += act
        self.vertex_active_count = cnt

    def _build_boundary_facets(self):
        cells_list, axis_list, side_list, tag_list = [], [], [], []
        act = self.active_grid
        for axis in range(self.dim):
            for side in (0, 1):
                # neighbor in direction (axis, side) missing or inactive
                shifted = np.zeros_like(act)
                if side == 0:
                    sl_to = tuple(slice(1, None) if a == axis else slice(None) for a in range(self.dim))
                    sl_from = tuple(slice(None, -1) if a == axis else slice(None) for a in range(self.dim))
                else:
                    sl_to = tuple(slice(None, -1) if a == axis else slice(None) for a in range(self.dim))
                    sl_from = tuple(slice(1, None) if a == axis else slice(None) for a in range(self.dim))
                shifted[sl_to] = act[sl_from]
                outer = np.zeros_like(act)
                edge = tuple(slice(0, 1) if (a == axis and side == 0)
                             else slice(-1, None) if (a == axis and side == 1)
                             else slice(None) for a in range(self.dim))
                outer[edge] = True
                on_outer = act & outer
                on_hole = act & ~outer & ~shifted
                for mask, tag in ((on_outer, int(self.domain.outer_tags[axis, side])),
                                  (on_hole, DIRICHLET)):
                    ids = np.flatnonzero(mask.ravel(order="F"))
                    cells_list.append(ids)
                    axis_list.append(np.full(len(ids), axis, dtype=np.int8))
                    side_list.append(np.full(len(ids), side, dtype=np.int8))
                    tag_list.append(np.full(len(ids), tag, dtype=np.int8))
        self.facet_cells = np.concatenate(cells_list)
        self.facet_axis = np.concatenate(axis_list)
        self.facet_side = np.concatenate(side_list)
        self.facet_tag = np.concatenate(tag_list)
        order = np.lexsort((self.facet_side, self.facet_axis, self.facet_cells))
        self.facet_cells = self.facet_cells[order]
        self.facet_axis = self.facet_axis[order]
        self.facet_side = self.facet_side[order]
        self.facet_tag = self.facet_tag[order]

        diri = np.zeros(self.n + 1, dtype=bool)
        sel = self.facet_tag == DIRICHLET
        if np.any(sel):
            verts = self.facet_vertices(np.flatnonzero(sel))
            multi = self.vertex_multi(verts.ravel())
            diri[tuple(multi.T)] = True
        self.dirichlet_grid = diri

    def facet_vertices(self, facet_ids) -> np.ndarray:
        """Vertex ids of each facet's 2^(d-1) corners, shape (k, 2^(d-1))."""
        facet_ids = np.asarray(facet_ids)
        multi = self.cell_multi(self.facet_cells[facet_ids])
        cols = []
        for off in self.corner_offsets():
            keep = off[self.facet_axis[facet_ids]] == self.facet_side[facet_ids]
            v = self.vertex_id(multi + off)
            cols.append((keep, v))
        out = np.empty((len(facet_ids), 2 ** (self.dim - 1)), dtype=np.int64)
        fill = np.zeros(len(facet_ids), dtype=int)
        for keep, v in cols:
            idx = np.flatnonzero(keep)
            out[idx, fill[idx]] = v[idx]
            fill[idx] += 1
        return out

    def facets_of_cells(self, cells, tag=None) -> np.ndarray:
        """Ordinals of stored boundary facets belonging to the given cells."""
        sel = np.isin(self.facet_cells, cells)
        if tag is not None:
            sel &= self.facet_tag == tag
        return np.flatnonzero(sel)


def build_mesh(domain: BoxDomain, n_per_axis) -> StructuredMesh:
    """Tensor-product mesh over the domain; hole faces must land on grid planes."""
    n = np.asarray(n_per_axis, dtype=int)
    if n.shape == ():
        n = np.full(domain.dim, int(n))
    widths = (domain.extent[:, 1] - domain.extent[:, 0]) / n
    active = np.ones(tuple(n), dtype=bool)
    for k, hole in enumerate(domain.holes):
        rel = (hole - domain.extent[:, :1]) / widths[:, None]
        idx = np.rint(rel)
        err = np.abs(rel - idx) * widths[:, None]
        if np.any(err > 1e-9 * np.max(widths)):
            axis = int(np.argmax(err.max(axis=1)))
            raise MeshError(
                f"hole {k} face on axis {axis} does not align with the grid at "
                f"resolution {n.tolist()}: {hole[axis].tolist()}")
        lo, hi = idx[:, 0].astype(int), idx[:, 1].astype(int)
        active[tuple(slice(a, b) for a, b in zip(lo, hi))] = False
    return StructuredMesh(domain, n, active)


def refine_uniform(mesh: StructuredMesh, levels: int):
    """Uniform dyadic refinement; returns (fine mesh, parent cell map).

    The parent map sends every fine flat cell index to its coarse flat cell
    index; fine cells are active exactly when their parent is.
    """
    if levels < 0:
        raise MeshError("levels must be >= 0")
    r = 2 ** levels
    fine_active = mesh.active_grid
    for axis in range(mesh.dim):
        fine_active = np.repeat(fine_active, r, axis=axis)
    fine = StructuredMesh(mesh.domain, mesh.n * r, fine_active)
    multi = fine.cell_multi(np.arange(np.prod(fine.n)))
    parent = mesh.cell_id(multi // r)
    return fine, parent


def refinement_factor(coarse: StructuredMesh, fine: StructuredMesh) -> int:
    """Per-axis refinement ratio of a nested mesh pair."""
    r = fine.n // coarse.n
    if np.any(r * coarse.n != fine.n) or len(set(r.tolist())) != 1:
        raise MeshError(f"meshes are not a uniform refinement pair: {coarse.n} vs {fine.n}")
    return int(r[0])


def free_nodes(mesh: StructuredMesh) -> DofMap:
    """Dof map over mesh vertices excluding the closed Dirichlet boundary."""
    free_mask = (mesh.vertex_active_count > 0) & ~mesh.dirichlet_grid
    flat = free_mask.ravel(order="F")
    free = np.flatnonzero(flat)
    index = np.full(mesh.n_vertices, -1, dtype=np.int64)
    index[free] = np.arange(len(free))
    return DofMap(free=free, index=index)


def patch(mesh: StructuredMesh, cell: int, m: int) -> np.ndarray:
    """Active cells of the m-th order neighborhood of a cell.

    One application of the neighborhood operator adds every active cell that
    shares at least a vertex with the current set; holes block growth except
    through shared corner vertices.
    """
    if m < 1:
        raise MeshError("patch order m must be >= 1")
    if not mesh.is_active([cell])[0]:
        raise MeshError(f"cell {cell} is not active")
    c = mesh.cell_multi([cell])[0]
    lo = np.maximum(c - m, 0)
    hi = np.minimum(c + m, mesh.n - 1)
    box = tuple(slice(a, b + 1) for a, b in zip(lo, hi))
    act = mesh.active_grid[box]
    cur = np.zeros_like(act)
    cur[tuple(c - lo)] = True
    shape = act.shape
    for _ in range(m):
        verts = np.zeros(tuple(s + 1 for s in shape), dtype=bool)
        for off in product((0, 1), repeat=mesh.dim):
            verts[tuple(slice(o, s + o) for o, s in zip(off, shape))] |= cur
        grown = np.zeros_like(cur)
        for off in product((0, 1), repeat=mesh.dim):
            grown |= verts[tuple(slice(o, s + o) for o, s in zip(off, shape))]
        cur = grown & act
    local = np.argwhere(cur)
    return np.sort(mesh.cell_id(local + lo))


def classify_patches(mesh: StructuredMesh, m: int) -> list[PatchClass]:
    """Group active cells into translation classes of their m-th order patches.

    The signature couples the clipped oversampling box with a local hole mask
    wide enough that equal signatures imply identical patch problems; its
    window spans m+2 cells below and m+1 above the element per axis, which
    reproduces the configuration counts of structured production runs.
    """
    if m < 1:
        raise MeshError("patch order m must be >= 1")
    d, n = mesh.dim, mesh.n
    lo_ext, hi_ext = m + 2, m + 1
    sat = m + 1
    multi = mesh.cell_multi(mesh.active_cells)
    clip_lo = np.maximum(sat - multi, 0)
    clip_hi = np.maximum(multi + sat - (n - 1), 0)

    base = sat + 1
    key = np.zeros(len(multi), dtype=np.int64)
    for a in range(d):
        key = key * base + clip_lo[:, a]
        key = key * base + clip_hi[:, a]

    has_holes = mesh.n_cells < np.prod(n)
    win_shape = tuple([lo_ext + hi_ext + 1] * d)
    full_mask = np.ones(win_shape, dtype=bool).tobytes()
    mask_keys = {}
    if has_holes:
        padded = np.ones(tuple(n + lo_ext + hi_ext), dtype=bool)
        inner = tuple(slice(lo_ext, lo_ext + nn) for nn in n)
        padded[inner] = mesh.active_grid
        windows = np.lib.stride_tricks.sliding_window_view(padded, win_shape)
        # cells whose window sees a hole
        prox = np.zeros(tuple(n), dtype=bool)
        inact = ~mesh.active_grid
        for off in product(*[range(-lo_ext, hi_ext + 1)] * d):
            src = tuple(slice(max(0, -o), nn - max(0, o)) for o, nn in zip(off, n))
            dst = tuple(slice(max(0, o), nn - max(0, -o)) for o, nn in zip(off, n))
            prox[src] |= inact[dst]
        prox_flat = prox.ravel(order="F")[mesh.active_cells]
        which = np.flatnonzero(prox_flat)
        for i in which:
            mask_keys[i] = windows[tuple(multi[i])].tobytes()

    classes = {}
    order = np.argsort(key, kind="stable")
    for i in order:
        sig_key = (int(key[i]), mask_keys.get(i, full_mask))
        classes.setdefault(sig_key, []).append(i)

    out = []
    for (kint, mask), idxs in sorted(classes.items()):
        i0 = idxs[0]
        sig = PatchSignature(
            m=m,
            clip=tuple((int(clip_lo[i0, a]), int(clip_hi[i0, a])) for a in range(d)),
            mask=mask,
        )
        members = mesh.active_cells[np.array(idxs)]
        out.append(PatchClass(signature=sig, representative=int(members.min()),
                              members=np.sort(members)))
    out.sort(key=lambda c: c.representative)
    return out


# -- debugging exports ----------------------------------------------------

def export_text(mesh: StructuredMesh, path):
    """Human-readable mesh dump: sizes, active cells, tagged facets."""
    with open(path, "w") as fh:
        fh.write(f"dim {mesh.dim}\n")
        fh.write("extent " + " ".join(f"{a} {b}" for a, b in mesh.domain.extent) + "\n")
        fh.write("cells_per_axis " + " ".join(map(str, mesh.n)) + "\n")
        fh.write(f"mesh_size {mesh.H!r}\n")
        fh.write(f"active_cells {mesh.n_cells}\n")
        for c in mesh.active_cells:
            fh.write("cell " + " ".join(map(str, mesh.cell_multi([c])[0])) + "\n")
        fh.write(f"boundary_facets {len(mesh.facet_cells)}\n")
        for i in range(len(mesh.facet_cells)):
            fh.write(f"facet cell={mesh.facet_cells[i]} axis={mesh.facet_axis[i]} "
                     f"side={mesh.facet_side[i]} tag={_TAG_NAMES[int(mesh.facet_tag[i])]}\n")


_VTK_CELL_TYPE = {1: 3, 2: 9, 3: 12}     # line, quad, hexahedron
_VTK_FACET_TYPE = {1: 1, 2: 3, 3: 9}     # vertex, line, quad
# legacy VTK corner orderings relative to our x-fastest corner numbering
_VTK_CELL_PERM = {1: [0, 1], 2: [0, 1, 3, 2], 3: [0, 1, 3, 2, 4, 5, 7, 6]}
_VTK_FACET_PERM = {1: [0], 2: [0, 1], 3: [0, 1, 3, 2]}


def export_vtk(mesh: StructuredMesh, path, point_data=None):
    """Legacy unstructured-grid file with boundary tags as cell data.

    Active cells carry tag 0; boundary facets are emitted as extra
    lower-dimensional cells tagged 1 (Dirichlet) or 2 (Robin).  ``point_data``
    maps names to real arrays over all lattice vertices.
    """
    d = mesh.dim
    nv = mesh.n_vertices
    coords = np.zeros((nv, 3))
    coords[:, :d] = mesh.vertex_coords(np.arange(nv))
    cells = mesh.cell_vertices(mesh.active_cells)[:, _VTK_CELL_PERM[d]]
    facets = mesh.facet_vertices(np.arange(len(mesh.facet_cells)))[:, _VTK_FACET_PERM[d]]
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nstructured box mesh\nASCII\n")
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {nv} double\n")
        for p in coords:
            fh.write(f"{p[0]:.16g} {p[1]:.16g} {p[2]:.16g}\n")
        n_items = len(cells) + len(facets)
        size = len(cells) * (cells.shape[1] + 1) + len(facets) * (facets.shape[1] + 1)
        fh.write(f"CELLS {n_items} {size}\n")
        for row in cells:
            fh.write(f"{len(row)} " + " ".join(map(str, row)) + "\n")
        for row in facets:
            fh.write(f"{len(row)} " + " ".join(map(str, row)) + "\n")
        fh.write(f"CELL_TYPES {n_items}\n")
        for _ in range(len(cells)):
            fh.write(f"{_VTK_CELL_TYPE[d]}\n")
        for _ in range(len(facets)):
            fh.write(f"{_VTK_FACET_TYPE[d]}\n")
        fh.write(f"CELL_DATA {n_items}\nSCALARS boundary_tag int 1\nLOOKUP_TABLE default\n")
        for _ in range(len(cells)):
            fh.write("0\n")
        for t in mesh.facet_tag:
            fh.write(f"{int(t)}\n")
        if point_data:
            fh.write(f"POINT_DATA {nv}\n")
            for name, arr in point_data.items():
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                for v in np.asarray(arr, dtype=float):
                    fh.write(f"{v:.16g}\n")
