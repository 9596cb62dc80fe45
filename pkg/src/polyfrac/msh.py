"""Reader for gmsh MSH 4.1 ASCII meshes with grain physical groups.

The expected tagging contract: each grain is a physical surface (2D) or
volume (3D) named ``grain<i>`` (1-based index); boundary facets may carry
physical names ``outer`` and ``void``. Untagged boundary facets fall back
to a bounding-box classification.
"""

from __future__ import annotations

import re

import numpy as np

from .microstructure import PolyMesh, TopologyError, classify_facets

_CELL_TYPES = {2: 3, 4: 4}       # gmsh element type -> nodes per cell
_FACET_TYPES = {1: 2, 2: 3}      # boundary element types per mesh dim - 1


class ParseError(ValueError):
    """Malformed MSH payload; message names the offending section."""


class _Tokens:
    def __init__(self, text: str):
        self.lines = text.splitlines()
        self.pos = 0
        self.section = "<preamble>"

    def next_line(self) -> str:
        while self.pos < len(self.lines):
            line = self.lines[self.pos].strip()
            self.pos += 1
            if line:
                return line
        raise ParseError(f"unexpected end of file in section {self.section}")


def load_mesh(payload) -> PolyMesh:
    """Parse an MSH 4.1 ASCII payload (str or bytes) into a PolyMesh."""
    if isinstance(payload, bytes):
        payload = payload.decode("utf-8")
    tk = _Tokens(payload)

    phys_names: dict = {}        # (dim, tag) -> name
    entity_phys: dict = {}       # (dim, tag) -> [physical tags]
    node_coords: dict = {}       # node tag -> xyz
    elements: list = []          # (entity_dim, entity_tag, etype, [node tags])

    line = tk.next_line()
    while True:
        if not line.startswith("$"):
            raise ParseError(f"expected section header, got {line!r}")
        section = line[1:]
        tk.section = section
        if section == "MeshFormat":
            ver = tk.next_line().split()
            if not ver or not ver[0].startswith("4"):
                raise ParseError(
                    f"MeshFormat: unsupported version {ver[0] if ver else '?'}"
                )
            if len(ver) > 1 and ver[1] != "0":
                raise ParseError("MeshFormat: binary MSH files are not supported")
            _expect_end(tk, section)
        elif section == "PhysicalNames":
            count = _int(tk.next_line(), section)
            for _ in range(count):
                m = re.match(r"(\d+)\s+(\d+)\s+\"(.*)\"", tk.next_line())
                if not m:
                    raise ParseError("PhysicalNames: malformed entry")
                phys_names[(int(m.group(1)), int(m.group(2)))] = m.group(3)
            _expect_end(tk, section)
        elif section == "Entities":
            counts = [int(v) for v in tk.next_line().split()]
            if len(counts) != 4:
                raise ParseError("Entities: expected 4 counts")
            for dim, num in enumerate(counts):
                for _ in range(num):
                    parts = tk.next_line().split()
                    tag = int(parts[0])
                    skip = 1 + (3 if dim == 0 else 6)
                    n_phys = int(parts[skip])
                    tags = [int(v) for v in parts[skip + 1: skip + 1 + n_phys]]
                    entity_phys[(dim, tag)] = tags
            _expect_end(tk, section)
        elif section == "Nodes":
            header = tk.next_line().split()
            n_blocks = _int(header[0], section)
            for _ in range(n_blocks):
                bdim, btag, _param, n_in_block = (
                    int(v) for v in tk.next_line().split()[:4]
                )
                tags = [_int(tk.next_line(), section) for _ in range(n_in_block)]
                for t in tags:
                    xyz = [float(v) for v in tk.next_line().split()[:3]]
                    node_coords[t] = xyz
            _expect_end(tk, section)
        elif section == "Elements":
            header = tk.next_line().split()
            n_blocks = _int(header[0], section)
            for _ in range(n_blocks):
                bdim, btag, etype, n_in_block = (
                    int(v) for v in tk.next_line().split()[:4]
                )
                for _ in range(n_in_block):
                    vals = [int(v) for v in tk.next_line().split()]
                    elements.append((bdim, btag, etype, vals[1:]))
            _expect_end(tk, section)
        else:
            # skip unknown sections verbatim
            while True:
                line = tk.next_line()
                if line == f"$End{section}":
                    break
        try:
            line = tk.next_line()
        except ParseError:
            break

    if not node_coords or not elements:
        raise ParseError("mesh has no nodes or no elements")
    return _assemble(phys_names, entity_phys, node_coords, elements)


def _expect_end(tk: _Tokens, section: str):
    line = tk.next_line()
    if line != f"$End{section}":
        raise ParseError(f"{section}: missing $End{section} (got {line!r})")


def _int(text, section) -> int:
    try:
        return int(str(text).split()[0])
    except (ValueError, IndexError) as exc:
        raise ParseError(f"{section}: expected integer, got {text!r}") from exc


def _assemble(phys_names, entity_phys, node_coords, elements) -> PolyMesh:
    if any(etype == 4 for _d, _t, etype, _n in elements):
        cell_dim, cell_type = 3, 4
    elif any(etype == 2 and dim == 2 for dim, _t, etype, _n in elements):
        cell_dim, cell_type = 2, 2
    else:
        raise ParseError("Elements: no triangle or tetrahedron cells found")

    tag_to_idx = {}
    coords = np.zeros((len(node_coords), cell_dim))
    for i, (tag, xyz) in enumerate(sorted(node_coords.items())):
        tag_to_idx[tag] = i
        coords[i] = xyz[:cell_dim]

    grain_index: dict = {}
    for key, name in phys_names.items():
        m = re.fullmatch(r"grain(\d+)", name)
        if m:
            grain_index[key] = int(m.group(1)) - 1

    cells, grain_of_cell = [], []
    outer_keys, void_keys = set(), set()
    for dim, etag, etype, nodes in elements:
        names = [
            phys_names.get((dim, p))
            for p in entity_phys.get((dim, etag), [])
        ]
        if etype == cell_type and dim == cell_dim:
            grains = [
                grain_index[(dim, p)]
                for p in entity_phys.get((dim, etag), [])
                if (dim, p) in grain_index
            ]
            if not grains:
                raise TopologyError(
                    f"cell entity {etag} carries no grain physical group"
                )
            cells.append([tag_to_idx[t] for t in nodes])
            grain_of_cell.append(grains[0])
        elif dim == cell_dim - 1 and etype in _FACET_TYPES:
            key = tuple(sorted(tag_to_idx[t] for t in nodes))
            if "outer" in names:
                outer_keys.add(key)
            elif "void" in names:
                void_keys.add(key)

    if not cells:
        raise ParseError("Elements: no grain-tagged cells found")
    return classify_facets(
        coords,
        np.array(cells, dtype=int),
        np.array(grain_of_cell, dtype=int),
        outer_keys=outer_keys or None,
        void_keys=void_keys or None,
    )
