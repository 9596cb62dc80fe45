"""Grain-resolved simplex meshes: facet classification, outward normals,
grain-boundary node duplication and per-grain slip-system rotation.

Meshes are linear triangles (2D) or tetrahedra (3D). A facet is addressed
as ``(cell, local_facet)`` where local facet ``i`` consists of all cell
nodes except node ``i``; this addressing survives the connectivity
rewiring done by node duplication. Inner grain-boundary facets appear
twice, once per adjacent grain, with opposite outward normals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .slip import rotate_slip_systems


class TopologyError(ValueError):
    """Mesh connectivity violates an assumption (e.g. untagged cell)."""


class DegenerateFacet(ValueError):
    """A boundary facet has (near-)zero measure."""


@dataclass
class FacetSet:
    """A named set of (cell, local facet) pairs with outward unit normals."""

    cells: np.ndarray                    # (nf,)
    local: np.ndarray                    # (nf,)
    normals: np.ndarray                  # (nf, dim)

    def __len__(self) -> int:
        return len(self.cells)

    @staticmethod
    def empty(dim: int) -> "FacetSet":
        return FacetSet(
            np.zeros(0, dtype=int), np.zeros(0, dtype=int), np.zeros((0, dim))
        )


@dataclass
class ConstraintSet:
    """Master/slave node ties for fields continuous across grain boundaries."""

    pairs: list = field(default_factory=list)   # (master_node, slave_node)

    def __len__(self) -> int:
        return len(self.pairs)

    def master_of(self, n_nodes: int) -> np.ndarray:
        """Array mapping every node to its master (identity if untied)."""
        m = np.arange(n_nodes)
        for master, slave in self.pairs:
            m[slave] = master
        return m


@dataclass
class GrainRegion:
    id: int
    cells: np.ndarray
    slip_systems: list
    rodrigues: tuple


@dataclass
class PolyMesh:
    nodes: np.ndarray                    # (n_nodes, dim)
    cells: np.ndarray                    # (n_cells, dim+1)
    grain_of_cell: np.ndarray            # (n_cells,)
    facet_sets: dict = field(default_factory=dict)
    #: pre-duplication origin of every node (identity before duplication)
    origin_node: np.ndarray = None
    #: (facet, facet) index pairs into facet_sets["inner"] matching the two
    #: copies of each grain-boundary facet
    inner_pairs: list = field(default_factory=list)

    def __post_init__(self):
        if self.origin_node is None:
            self.origin_node = np.arange(len(self.nodes))

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_grains(self) -> int:
        return int(self.grain_of_cell.max()) + 1

    def cell_volumes(self) -> np.ndarray:
        x = self.nodes[self.cells]
        if self.dim == 2:
            a = x[:, 1] - x[:, 0]
            b = x[:, 2] - x[:, 0]
            return 0.5 * np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
        d1, d2, d3 = x[:, 1] - x[:, 0], x[:, 2] - x[:, 0], x[:, 3] - x[:, 0]
        return np.abs(np.einsum("ni,ni->n", np.cross(d1, d2), d3)) / 6.0


def _local_facets(dim: int):
    if dim == 2:
        return [(1, 2), (2, 0), (0, 1)]
    return [(1, 2, 3), (0, 3, 2), (0, 1, 3), (0, 2, 1)]


def facet_nodes(mesh: PolyMesh, cell: int, local: int) -> np.ndarray:
    return mesh.cells[cell][list(_local_facets(mesh.dim)[local])]


def facet_normal_and_measure(mesh: PolyMesh, cell: int, local: int):
    """Outward unit normal and length/area of a boundary facet."""
    conn = mesh.cells[cell]
    fnodes = facet_nodes(mesh, cell, local)
    x = mesh.nodes[fnodes]
    if mesh.dim == 2:
        t = x[1] - x[0]
        measure = float(np.linalg.norm(t))
        n = np.array([t[1], -t[0]])
    else:
        n = np.cross(x[1] - x[0], x[2] - x[0])
        measure = 0.5 * np.linalg.norm(n)
    scale = np.abs(mesh.nodes).max() or 1.0
    if measure < 1e-14 * scale ** (mesh.dim - 1):
        raise DegenerateFacet(f"facet {local} of cell {cell} has zero measure")
    n = n / np.linalg.norm(n)
    opposite = mesh.nodes[conn[local]]
    if np.dot(n, opposite - x[0]) > 0.0:
        n = -n
    return n, measure


def facet_normals(mesh: PolyMesh) -> dict:
    """Recompute outward unit normals for every named facet set."""
    out = {}
    for name, fs in mesh.facet_sets.items():
        normals = np.array(
            [
                facet_normal_and_measure(mesh, c, l)[0]
                for c, l in zip(fs.cells, fs.local)
            ]
        ).reshape(len(fs), mesh.dim)
        out[name] = normals
    return out


def classify_facets(
    nodes: np.ndarray,
    cells: np.ndarray,
    grain_of_cell: np.ndarray,
    outer_keys: set | None = None,
    void_keys: set | None = None,
) -> PolyMesh:
    """Build a PolyMesh with outer / inner / void facet sets.

    A facet key is the sorted node tuple. Facets without a neighbouring
    cell are boundary facets: they are "outer" or "void" either by the
    supplied tagged keys or, failing that, by whether they lie on the
    bounding box. Facets shared by cells of two different grains form the
    "inner" set (both copies).
    """
    nodes = np.asarray(nodes, dtype=float)
    cells = np.asarray(cells, dtype=int)
    grain_of_cell = np.asarray(grain_of_cell, dtype=int)
    if grain_of_cell.min() < 0:
        raise TopologyError("every cell must carry a grain tag")
    dim = nodes.shape[1]
    locals_ = _local_facets(dim)

    by_key: dict = {}
    for c in range(len(cells)):
        for lf, ln in enumerate(locals_):
            key = tuple(sorted(cells[c][list(ln)]))
            by_key.setdefault(key, []).append((c, lf))

    mesh = PolyMesh(nodes, cells, grain_of_cell, {})
    lo, hi = nodes.min(axis=0), nodes.max(axis=0)
    box_tol = 1e-10 * max(np.abs(hi).max(), 1.0)

    sets: dict = {"outer": [], "inner": [], "void": []}
    inner_pairs = []
    for key, members in by_key.items():
        if len(members) > 2:
            raise TopologyError(f"facet {key} shared by {len(members)} cells")
        if len(members) == 2:
            (c1, l1), (c2, l2) = members
            if grain_of_cell[c1] != grain_of_cell[c2]:
                i1 = len(sets["inner"])
                sets["inner"].append((c1, l1))
                sets["inner"].append((c2, l2))
                inner_pairs.append((i1, i1 + 1))
            continue
        (c, lf) = members[0]
        if outer_keys is not None and key in outer_keys:
            sets["outer"].append((c, lf))
        elif void_keys is not None and key in void_keys:
            sets["void"].append((c, lf))
        else:
            # untagged boundary facet: on a bounding-box plane -> outer,
            # otherwise it borders a carved-out void
            coords = nodes[list(key)]
            on_box = any(
                np.all(np.abs(coords[:, ax] - v) <= box_tol)
                for ax in range(dim)
                for v in (lo[ax], hi[ax])
            )
            sets["outer" if on_box else "void"].append((c, lf))

    for name, pairs in sets.items():
        if not pairs:
            mesh.facet_sets[name] = FacetSet.empty(dim)
            continue
        cs = np.array([p[0] for p in pairs], dtype=int)
        ls = np.array([p[1] for p in pairs], dtype=int)
        normals = np.array(
            [facet_normal_and_measure(mesh, c, l)[0] for c, l in pairs]
        )
        mesh.facet_sets[name] = FacetSet(cs, ls, normals)
    mesh.inner_pairs = inner_pairs
    return mesh


def duplicate_grain_boundary_nodes(mesh: PolyMesh):
    """Replicate nodes shared by several grains, one replica per grain.

    Cell connectivity is rewired so each grain references its own replica;
    the returned ConstraintSet ties all replicas to the master (the copy
    kept by the lowest grain index) for the fields that remain continuous.
    The per-grain gradient field needs no constraint: independence across
    grains is exactly what the duplication provides.
    """
    grains_of_node: dict = {}
    for c in range(mesh.n_cells):
        g = int(mesh.grain_of_cell[c])
        for n in mesh.cells[c]:
            grains_of_node.setdefault(int(n), set()).add(g)

    nodes = list(mesh.nodes)
    origin = list(mesh.origin_node)
    replica: dict = {}
    constraints = ConstraintSet()
    for n, gs in sorted(grains_of_node.items()):
        if len(gs) < 2:
            continue
        gs = sorted(gs)
        replica[n] = {gs[0]: n}
        for g in gs[1:]:
            new_id = len(nodes)
            nodes.append(mesh.nodes[n].copy())
            origin.append(mesh.origin_node[n])
            replica[n][g] = new_id
            constraints.pairs.append((n, new_id))

    cells = mesh.cells.copy()
    for c in range(mesh.n_cells):
        g = int(mesh.grain_of_cell[c])
        for j, n in enumerate(cells[c]):
            if int(n) in replica:
                cells[c, j] = replica[int(n)][g]

    out = PolyMesh(
        nodes=np.array(nodes),
        cells=cells,
        grain_of_cell=mesh.grain_of_cell.copy(),
        facet_sets=mesh.facet_sets,
        origin_node=np.array(origin, dtype=int),
        inner_pairs=list(mesh.inner_pairs),
    )
    return out, constraints


def cell_adjacency(mesh: PolyMesh) -> list:
    """Pairs of cells sharing a facet, keyed by pre-duplication node ids.

    Includes pairs across grain boundaries (where the duplicated meshes
    share geometry but not node ids), which makes it suitable for crack
    connectivity analysis across grains.
    """
    locals_ = _local_facets(mesh.dim)
    by_key: dict = {}
    pairs = []
    origin = mesh.origin_node
    for c in range(mesh.n_cells):
        for ln in locals_:
            key = tuple(sorted(int(origin[mesh.cells[c][i]]) for i in ln))
            other = by_key.pop(key, None)
            if other is None:
                by_key[key] = c
            else:
                pairs.append((other, c))
    return pairs


def build_grain_regions(
    mesh: PolyMesh, rodrigues_list, convention: str = "axis_angle_degrees"
) -> list:
    """Per-grain cell sets with rotated slip systems."""
    n_grains = mesh.n_grains
    if len(rodrigues_list) < n_grains:
        raise TopologyError(
            f"{n_grains} grains in mesh but only {len(rodrigues_list)} orientations"
        )
    regions = []
    for g in range(n_grains):
        cells = np.flatnonzero(mesh.grain_of_cell == g)
        systems = rotate_slip_systems(rodrigues_list[g], convention)
        regions.append(
            GrainRegion(
                id=g, cells=cells, slip_systems=systems,
                rodrigues=tuple(rodrigues_list[g]),
            )
        )
    return regions
