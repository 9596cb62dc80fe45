"""Programmatic generation of grain-structure meshes.

Production tessellations come from external tools (Neper + gmsh) through
the MSH reader; the structured generators here cover test fixtures
(strips, bicrystals, quadrant polycrystals) and the reference void layout
of the two-dimensional voided structure. All generators return a
classified :class:`~polyfrac.microstructure.PolyMesh` before node
duplication.
"""

from __future__ import annotations

import io

import numpy as np

from .microstructure import PolyMesh, classify_facets

#: Void centers (units of L) and diameter of the reference 2D voided case.
VOID_CENTERS_REL = ((0.36, 0.415), (0.49, 0.425))
VOID_DIAMETER_REL = 0.045


def paper_void_layout(length_scale: float = 1.0):
    """Void centers and diameter scaled to a structure of size L."""
    centers = np.array(VOID_CENTERS_REL) * length_scale
    return centers, VOID_DIAMETER_REL * length_scale


def rectangle_mesh(
    nx: int,
    ny: int,
    lx: float = 1.0,
    ly: float = 1.0,
    grain_of_centroid=None,
) -> PolyMesh:
    """Structured crossed-diagonal triangulation of [0,lx] x [0,ly].

    ``grain_of_centroid(x, y) -> int`` assigns cells to grains; default is
    a single grain.
    """
    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    nodes = np.array([(x, y) for y in ys for x in xs])

    def nid(i, j):
        return j * (nx + 1) + i

    cells = []
    for j in range(ny):
        for i in range(nx):
            a, b = nid(i, j), nid(i + 1, j)
            c, d = nid(i + 1, j + 1), nid(i, j + 1)
            if (i + j) % 2 == 0:
                cells.append((a, b, c))
                cells.append((a, c, d))
            else:
                cells.append((a, b, d))
                cells.append((b, c, d))
    cells = np.array(cells, dtype=int)
    cent = nodes[cells].mean(axis=1)
    if grain_of_centroid is None:
        grains = np.zeros(len(cells), dtype=int)
    else:
        grains = np.array(
            [int(grain_of_centroid(x, y)) for x, y in cent], dtype=int
        )
    return classify_facets(nodes, cells, grains)


def bicrystal_mesh(nx: int = 8, ny: int = 8, length: float = 1.0) -> PolyMesh:
    """Two-grain square, grain boundary at x = L/2."""
    return rectangle_mesh(
        nx, ny, length, length,
        grain_of_centroid=lambda x, y: 0 if x < 0.5 * length else 1,
    )


def quadrant_mesh(
    n: int = 32,
    length: float = 1.0,
    split_x: float = 0.5,
    split_y: float = 0.35,
) -> PolyMesh:
    """Four-grain square with boundaries at x = split_x L and y = split_y L."""
    def grain(x, y):
        right = x >= split_x * length
        upper = y >= split_y * length
        return (1 if right else 0) + (2 if upper else 0)

    return rectangle_mesh(n, n, length, length, grain_of_centroid=grain)


def voronoi_grains(seeds: np.ndarray):
    """Grain-assignment callable from Voronoi seeds (nearest seed wins)."""
    seeds = np.asarray(seeds, dtype=float)

    def grain(x, y):
        d = ((seeds - (x, y)) ** 2).sum(axis=1)
        return int(np.argmin(d))

    return grain


def carve_voids(mesh: PolyMesh, centers, diameter: float) -> PolyMesh:
    """Remove cells whose centroid falls inside any void disc."""
    centers = np.asarray(centers, dtype=float)
    cent = mesh.nodes[mesh.cells].mean(axis=1)
    keep = np.ones(mesh.n_cells, dtype=bool)
    for c in centers:
        keep &= ((cent - c) ** 2).sum(axis=1) > (0.5 * diameter) ** 2
    cells = mesh.cells[keep]
    used = np.unique(cells)
    remap = -np.ones(mesh.n_nodes, dtype=int)
    remap[used] = np.arange(len(used))
    return classify_facets(
        mesh.nodes[used], remap[cells], mesh.grain_of_cell[keep]
    )


def box_mesh(
    nx: int, ny: int, nz: int,
    lx: float = 1.0, ly: float = 1.0, lz: float = 1.0,
    grain_of_centroid=None,
) -> PolyMesh:
    """Structured tetrahedral mesh of a box (6 tets per hex cell)."""
    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    zs = np.linspace(0.0, lz, nz + 1)
    nodes = np.array([(x, y, z) for z in zs for y in ys for x in xs])

    def nid(i, j, k):
        return (k * (ny + 1) + j) * (nx + 1) + i

    tets_of_hex = [
        (0, 1, 3, 7), (0, 1, 7, 5), (0, 5, 7, 4),
        (1, 2, 3, 7), (1, 6, 2, 7), (1, 5, 6, 7),
    ]
    cells = []
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                corner = [
                    nid(i, j, k), nid(i + 1, j, k), nid(i + 1, j + 1, k),
                    nid(i, j + 1, k), nid(i, j, k + 1), nid(i + 1, j, k + 1),
                    nid(i + 1, j + 1, k + 1), nid(i, j + 1, k + 1),
                ]
                for t in tets_of_hex:
                    cells.append([corner[v] for v in t])
    cells = np.array(cells, dtype=int)
    cent = nodes[cells].mean(axis=1)
    if grain_of_centroid is None:
        grains = np.zeros(len(cells), dtype=int)
    else:
        grains = np.array(
            [int(grain_of_centroid(*c)) for c in cent], dtype=int
        )
    return classify_facets(nodes, cells, grains)


def single_tet_mesh(size: float = 1.0) -> PolyMesh:
    nodes = size * np.array(
        [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    )
    cells = np.array([[0, 1, 2, 3]])
    # tag all faces as outer explicitly: the slanted face is not on a
    # bounding-box plane, so the geometric fallback cannot see it
    outer = {(1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)}
    return classify_facets(nodes, cells, np.zeros(1, dtype=int), outer_keys=outer)


def to_msh(mesh: PolyMesh) -> str:
    """Emit a PolyMesh as MSH 4.1 ASCII with the grain/outer/void tagging."""
    if mesh.dim != 2:
        raise NotImplementedError("MSH export of fixtures is 2D only")
    n_grains = mesh.n_grains
    out = io.StringIO()
    w = out.write
    w("$MeshFormat\n4.1 0 8\n$EndMeshFormat\n")

    names = [(1, 1, "outer"), (1, 2, "void")]
    names += [(2, 10 + g, f"grain{g + 1}") for g in range(n_grains)]
    w("$PhysicalNames\n%d\n" % len(names))
    for dim, tag, name in names:
        w(f'{dim} {tag} "{name}"\n')
    w("$EndPhysicalNames\n")

    # entities: one curve per boundary class, one surface per grain
    lo = mesh.nodes.min(axis=0)
    hi = mesh.nodes.max(axis=0)
    box = f"{lo[0]} {lo[1]} 0 {hi[0]} {hi[1]} 0"
    w("$Entities\n0 2 %d 0\n" % n_grains)
    w(f"1 {box} 1 1 0\n")
    w(f"2 {box} 1 2 0\n")
    for g in range(n_grains):
        w(f"{g + 1} {box} 1 {10 + g} 0\n")
    w("$EndEntities\n")

    w("$Nodes\n")
    w(f"1 {mesh.n_nodes} 1 {mesh.n_nodes}\n")
    w(f"2 1 0 {mesh.n_nodes}\n")
    for i in range(mesh.n_nodes):
        w(f"{i + 1}\n")
    for x, y in mesh.nodes:
        w(f"{float(x)!r} {float(y)!r} 0\n")
    w("$EndNodes\n")

    from .microstructure import facet_nodes

    blocks = []
    tag = 1
    for name, curve in (("outer", 1), ("void", 2)):
        fs = mesh.facet_sets.get(name)
        if fs is None or len(fs) == 0:
            continue
        lines = []
        for c, l in zip(fs.cells, fs.local):
            fn = facet_nodes(mesh, int(c), int(l))
            lines.append((tag, [int(v) + 1 for v in fn]))
            tag += 1
        blocks.append((1, curve, 1, lines))
    for g in range(n_grains):
        rows = []
        for c in np.flatnonzero(mesh.grain_of_cell == g):
            rows.append((tag, [int(v) + 1 for v in mesh.cells[c]]))
            tag += 1
        blocks.append((2, g + 1, 2, rows))

    n_elem = tag - 1
    w("$Elements\n")
    w(f"{len(blocks)} {n_elem} 1 {n_elem}\n")
    for dim, etag, etype, rows in blocks:
        w(f"{dim} {etag} {etype} {len(rows)}\n")
        for t, conn in rows:
            w(" ".join(str(v) for v in [t] + conn) + "\n")
    w("$EndElements\n")
    return out.getvalue()
