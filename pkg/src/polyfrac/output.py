"""Simulation output: VTU frames, summary CSV and checkpoints.

Each frame is an XML unstructured-grid VTK file carrying nodal u/g/d and
per-cell plastic strain, degradation, local damage, grain index and the
in-plane shear component of the reference second Piola-Kirchhoff stress.
Nodes keep their reference coordinates (deformed views reconstruct from
u); replica nodes are written as-is with continuous fields verified equal
across replicas.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .microstructure import PolyMesh

_VTK_CELL = {2: 5, 3: 10}    # dim -> VTK cell type (triangle / tetra)


@dataclass
class OutputFrame:
    index: int
    time: float
    u: np.ndarray                 # (n_nodes, dim)
    g: np.ndarray                 # (n_nodes, dim)
    d: np.ndarray                 # (n_nodes,)
    eps_p: np.ndarray             # per cell
    g_e: np.ndarray
    phi: np.ndarray
    s12: np.ndarray
    boundary_displacement: float = 0.0
    region_s12: dict = None

    def __post_init__(self):
        if self.region_s12 is None:
            self.region_s12 = {}


def _check_replicas_merged(mesh: PolyMesh, frame: OutputFrame):
    origin = mesh.origin_node
    for values, name in ((frame.u, "u"), (frame.d, "d")):
        by_origin = {}
        for n in range(mesh.n_nodes):
            o = int(origin[n])
            if o in by_origin:
                if not np.allclose(values[by_origin[o]], values[n], atol=1e-14):
                    raise ValueError(
                        f"continuous field {name} differs across replicas of node {o}"
                    )
            else:
                by_origin[o] = n


def _data_array(name: str, data: np.ndarray, components: int = 1) -> str:
    flat = np.asarray(data, dtype=float).reshape(-1)
    body = "\n".join(" ".join(f"{v:.17g}" for v in flat[i: i + 6])
                     for i in range(0, len(flat), 6))
    return (
        f'<DataArray type="Float64" Name="{name}" '
        f'NumberOfComponents="{components}" format="ascii">\n{body}\n</DataArray>\n'
    )


def write_vtu(mesh: PolyMesh, frame: OutputFrame, path: str):
    """Write one unstructured-grid XML VTK frame."""
    _check_replicas_merged(mesh, frame)
    nn, ne, dim = mesh.n_nodes, mesh.n_cells, mesh.dim
    pts = np.zeros((nn, 3))
    pts[:, :dim] = mesh.nodes
    u3 = np.zeros((nn, 3))
    u3[:, :dim] = frame.u
    g3 = np.zeros((nn, 3))
    g3[:, :dim] = frame.g

    out = io.StringIO()
    w = out.write
    w('<?xml version="1.0"?>\n')
    w('<VTKFile type="UnstructuredGrid" version="0.1" byte_order="LittleEndian">\n')
    w("<UnstructuredGrid>\n")
    w(f'<Piece NumberOfPoints="{nn}" NumberOfCells="{ne}">\n')
    w("<Points>\n")
    w(_data_array("Points", pts, 3))
    w("</Points>\n<Cells>\n")
    conn = " ".join(str(v) for v in mesh.cells.reshape(-1))
    offs = " ".join(str((i + 1) * (dim + 1)) for i in range(ne))
    types = " ".join(str(_VTK_CELL[dim]) for _ in range(ne))
    w(f'<DataArray type="Int64" Name="connectivity" format="ascii">\n{conn}\n</DataArray>\n')
    w(f'<DataArray type="Int64" Name="offsets" format="ascii">\n{offs}\n</DataArray>\n')
    w(f'<DataArray type="UInt8" Name="types" format="ascii">\n{types}\n</DataArray>\n')
    w("</Cells>\n<PointData>\n")
    w(_data_array("u", u3, 3))
    w(_data_array("g", g3, 3))
    w(_data_array("d", frame.d))
    w(_data_array("origin_node", mesh.origin_node.astype(float)))
    w("</PointData>\n<CellData>\n")
    w(_data_array("grain", mesh.grain_of_cell.astype(float)))
    w(_data_array("eps_p", frame.eps_p))
    w(_data_array("g_e", frame.g_e))
    w(_data_array("phi", frame.phi))
    w(_data_array("S12", frame.s12))
    w("</CellData>\n</Piece>\n</UnstructuredGrid>\n</VTKFile>\n")
    with open(path, "w") as fh:
        fh.write(out.getvalue())


def read_vtu_cell_data(path: str) -> dict:
    """Read back the cell/point arrays of a frame (round-trip checks)."""
    import xml.etree.ElementTree as ET

    root = ET.parse(path).getroot()
    piece = root.find(".//Piece")
    out = {}
    for da in piece.find("CellData").findall("DataArray"):
        out[da.get("Name")] = np.array(
            [float(v) for v in da.text.split()], dtype=float
        )
    for da in piece.find("PointData").findall("DataArray"):
        n_comp = int(da.get("NumberOfComponents", "1"))
        arr = np.array([float(v) for v in da.text.split()], dtype=float)
        out["point_" + da.get("Name")] = (
            arr.reshape(-1, n_comp) if n_comp > 1 else arr
        )
    pts = piece.find("Points").find("DataArray")
    out["points"] = np.array([float(v) for v in pts.text.split()]).reshape(-1, 3)
    conn = piece.find("Cells").find("DataArray").text.split()
    out["connectivity"] = np.array([int(v) for v in conn])
    return out


class SummaryWriter:
    """Appends one CSV row per accepted step: time, boundary displacement,
    volume-averaged S12 per named region."""

    def __init__(self, path: str, region_names):
        self.path = path
        self.region_names = list(region_names)
        with open(path, "w") as fh:
            cols = ["step", "time", "boundary_displacement"] + [
                f"s12_{name}" for name in self.region_names
            ]
            fh.write(",".join(cols) + "\n")

    def append(self, step: int, time: float, boundary_displacement: float,
               region_s12: dict):
        with open(self.path, "a") as fh:
            vals = [str(step), f"{time:.17g}", f"{boundary_displacement:.17g}"]
            vals += [f"{region_s12[name]:.17g}" for name in self.region_names]
            fh.write(",".join(vals) + "\n")


def save_checkpoint(path: str, problem, runner_state: dict):
    """Snapshot of the committed simulation state plus stepper counters."""
    np.savez(
        path,
        u=problem.u, g=problem.g, d=problem.d,
        fp_inv_n=problem.fp_inv_n, k_n=problem.k_n,
        eps_p_n=problem.eps_p_n, phi_n=problem.phi_n,
        prev_g=problem._prev_committed[0] if problem._prev_committed is not None
        else np.zeros_like(problem.g),
        prev_d=problem._prev_committed[1] if problem._prev_committed is not None
        else np.zeros_like(problem.d),
        has_prev=np.array(problem._prev_committed is not None),
        cell_eps_p=problem.cell_outputs.eps_p,
        cell_g_e=problem.cell_outputs.g_e,
        cell_phi=problem.cell_outputs.phi,
        cell_s12=problem.cell_outputs.s12,
        cell_psi=problem.cell_outputs.psi_plus,
        runner=np.array(list(runner_state.items()), dtype=object),
    )


def load_checkpoint(path: str, problem) -> dict:
    from .fem import CellOutputs

    data = np.load(path, allow_pickle=True)
    problem.u = data["u"].copy()
    problem.g = data["g"].copy()
    problem.d = data["d"].copy()
    problem.fp_inv_n = data["fp_inv_n"].copy()
    problem.k_n = data["k_n"].copy()
    problem.eps_p_n = data["eps_p_n"].copy()
    problem.phi_n = data["phi_n"].copy()
    problem.phi_iter = problem.phi_n.copy()
    if bool(data["has_prev"]):
        problem._prev_committed = (data["prev_g"].copy(), data["prev_d"].copy())
    problem.cell_outputs = CellOutputs(
        eps_p=data["cell_eps_p"].copy(), g_e=data["cell_g_e"].copy(),
        phi=data["cell_phi"].copy(), s12=data["cell_s12"].copy(),
        psi_plus=data["cell_psi"].copy(),
    )
    return {k: v for k, v in data["runner"]}
