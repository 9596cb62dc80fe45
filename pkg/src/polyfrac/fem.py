"""Discretization and assembly of the three coupled weak forms.

Linear simplices carry three nodal fields: displacement u (continuous
across grain boundaries via node ties), the gradient-hardening vector g
(independent per grain, no ties) and the global phase field d (tied).
All constant-gradient terms use single-point quadrature (exact for P1);
mass-like terms use the exact simplex mass matrix and boundary penalty
terms a two-point Gauss (2D) / three-point (3D) facet rule.

Material state lives at one material point per cell (the centroid).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import constitutive as co
from .materials import MaterialParams
from .microstructure import (
    ConstraintSet,
    PolyMesh,
    facet_normal_and_measure,
    facet_nodes,
)
from .slip import slip_dyads


class EmptyRegion(ValueError):
    """A volume average was requested over an empty cell set."""


#: Flexibility (in units of 1/(H_g l_g^2)) realizing micro-free boundaries.
MICRO_FREE_SCALE = 1e6


@dataclass(frozen=True)
class MicroBoundaryCondition:
    """Grain-boundary condition for the gradient-hardening field.

    micro_hard drops the boundary term (weakly enforcing zero summed
    hardening strain); micro_flexible adds the penalty surface term with
    flexibility C(d) = c_gamma0 + c_gamma_d * d; micro_free is realized as
    the large-flexibility limit of micro_flexible.
    """

    kind: str                       # "micro_free" | "micro_hard" | "micro_flexible"
    c_gamma0: float = 0.0           # 1/(stress * length^2)
    c_gamma_d: float = 0.0

    def __post_init__(self):
        if self.kind not in ("micro_free", "micro_hard", "micro_flexible"):
            raise ValueError(f"unknown micro boundary condition {self.kind!r}")
        if self.kind == "micro_flexible":
            if not self.c_gamma0 > 0.0:
                raise ValueError("micro_flexible needs c_gamma0 > 0")
            if self.c_gamma_d < 0.0:
                raise ValueError("c_gamma_d must be >= 0")

    @staticmethod
    def hard() -> "MicroBoundaryCondition":
        return MicroBoundaryCondition("micro_hard")

    @staticmethod
    def free() -> "MicroBoundaryCondition":
        return MicroBoundaryCondition("micro_free")

    @staticmethod
    def flexible(c_gamma0: float, c_gamma_d: float = 0.0) -> "MicroBoundaryCondition":
        return MicroBoundaryCondition("micro_flexible", c_gamma0, c_gamma_d)

    def flexibility(self, d, params: MaterialParams):
        """Effective C(d); None for micro-hard (term dropped)."""
        if self.kind == "micro_hard":
            return None
        if self.kind == "micro_free":
            return np.full_like(np.asarray(d, dtype=float),
                                MICRO_FREE_SCALE * params.flexibility_unit)
        return self.c_gamma0 + self.c_gamma_d * np.asarray(d, dtype=float)


def micro_bc_surface_term(bc: MicroBoundaryCondition, g_at_qp, normal, d_at_qp,
                          params: MaterialParams):
    """Boundary flux C(d) H_g l_g^2 (N.g), conjugate to N.delta-g.

    Zero for micro-hard; micro-free uses the large-flexibility limit.
    """
    c = bc.flexibility(d_at_qp, params)
    if c is None:
        return np.zeros_like(np.asarray(d_at_qp, dtype=float))
    ng = np.einsum("...i,...i->...", np.asarray(g_at_qp, float), np.asarray(normal, float))
    return c * params.grad_hardening * params.grad_length**2 * ng


@dataclass
class LoadProgram:
    """Displacement-controlled simple shear along the first axis.

    The driven displacement is shear_rate * t, or piecewise-linear through
    ``path`` waypoints [(t, displacement), ...] when given (used for
    load/unload histories). A prescribed boundary traction slot exists for
    completeness of the equilibrium weak form but all experiments are
    displacement controlled, so it must stay zero.
    """

    shear_rate: float               # mm / s at the top face
    horizon: float                  # end time [s]
    path: list | None = None
    boundary_traction: float = 0.0

    def __post_init__(self):
        if self.boundary_traction != 0.0:
            raise ValueError("only displacement-controlled loading is supported")

    def displacement(self, t: float) -> float:
        if self.path is None:
            return self.shear_rate * t
        ts = np.array([p[0] for p in self.path])
        us = np.array([p[1] for p in self.path])
        return float(np.interp(t, ts, us))


def apply_shear_loading(layout: "FieldLayout", t: float, program: LoadProgram):
    """Prescribed displacement values for the shear program at time t.

    Returns an (n_nodes, dim) array; only entries flagged in
    ``layout.dirichlet_mask`` are meaningful. The first axis is driven
    proportionally to height (the last axis), the height component is
    clamped on driven boundaries, and in 3D the lateral faces act as
    rollers on the middle axis.
    """
    disp = program.displacement(t)
    coords = layout.mesh.nodes
    dim = layout.dim
    grad_ax = dim - 1
    lo = coords[:, grad_ax].min()
    hgt = coords[:, grad_ax].max() - lo
    values = np.zeros((layout.mesh.n_nodes, dim))
    frac = (coords[:, grad_ax] - lo) / hgt
    values[:, 0] = disp * frac
    return values


@dataclass
class FieldLayout:
    """Dof numbering, node ties and Dirichlet bookkeeping for all fields."""

    mesh: PolyMesh
    constraints: ConstraintSet

    def __post_init__(self):
        mesh = self.mesh
        self.dim = mesh.dim
        nn = mesh.n_nodes
        self.master = self.constraints.master_of(nn)
        self.is_master = self.master == np.arange(nn)

        # grain ownership per node (unique after duplication)
        self.grain_of_node = np.zeros(nn, dtype=int)
        for c in range(mesh.n_cells):
            self.grain_of_node[mesh.cells[c]] = mesh.grain_of_cell[c]

        # driven nodes: everything on the outer boundary
        outer = mesh.facet_sets.get("outer")
        driven = np.zeros(nn, dtype=bool)
        if outer is not None:
            for c, l in zip(outer.cells, outer.local):
                driven[facet_nodes(mesh, int(c), int(l))] = True
        self.dirichlet_mask = np.zeros((nn, self.dim), dtype=bool)
        self.dirichlet_mask[driven, 0] = True
        self.dirichlet_mask[driven, self.dim - 1] = True
        if self.dim == 3:
            ylo, yhi = mesh.nodes[:, 1].min(), mesh.nodes[:, 1].max()
            tol = 1e-10 * max(abs(yhi), 1.0)
            roller = (np.abs(mesh.nodes[:, 1] - ylo) <= tol) | (
                np.abs(mesh.nodes[:, 1] - yhi) <= tol
            )
            self.dirichlet_mask[roller, 1] = True

        self._build_reductions()

    def _build_reductions(self):
        nn, dim = self.mesh.n_nodes, self.dim
        # u: free dofs of master nodes
        u_col = -np.ones((nn, dim), dtype=int)
        nxt = 0
        for n in range(nn):
            if not self.is_master[n]:
                continue
            for c in range(dim):
                if not self.dirichlet_mask[n, c]:
                    u_col[n, c] = nxt
                    nxt += 1
        self.n_u_red = nxt
        u_col = np.where(u_col[self.master] >= 0, u_col[self.master], -1)
        # respecting ties: each node uses its master's column
        for c in range(dim):
            u_col[:, c] = np.where(
                self.dirichlet_mask[self.master, c], -1, u_col[:, c]
            )
        self.u_col = u_col

        # g: all dofs free, grain-blocked numbering
        order = np.lexsort((np.arange(nn), self.grain_of_node))
        gnum = np.empty(nn, dtype=int)
        gnum[order] = np.arange(nn)
        self.g_col = self.n_u_red + (gnum[:, None] * dim + np.arange(dim))
        self.n_g_red = nn * dim
        self.n_ug_red = self.n_u_red + self.n_g_red
        #: reduced-dof ranges of the g block grouped by grain
        self.g_grain_ranges = {}
        counts = np.bincount(self.grain_of_node, minlength=self.mesh.n_grains)
        start = 0
        for g, cnt in enumerate(counts):
            self.g_grain_ranges[g] = (
                self.n_u_red + start * dim, self.n_u_red + (start + cnt) * dim
            )
            start += cnt

        # d: one column per master node
        d_col = -np.ones(nn, dtype=int)
        masters = np.flatnonzero(self.is_master)
        d_col[masters] = np.arange(len(masters))
        self.d_col = d_col[self.master]
        self.n_d_red = len(masters)

        self.t_ug = self._transfer(
            np.concatenate([self.u_col.ravel(), self.g_col.ravel()]),
            self.n_ug_red,
        )
        self.t_d = self._transfer(self.d_col, self.n_d_red)
        self.u_slice = slice(0, self.n_u_red)
        self.g_slice = slice(self.n_u_red, self.n_ug_red)

    @staticmethod
    def _transfer(cols: np.ndarray, n_red: int) -> sp.csr_matrix:
        rows = np.flatnonzero(cols >= 0)
        return sp.csr_matrix(
            (np.ones(len(rows)), (rows, cols[rows])), shape=(len(cols), n_red)
        )


# ----------------------------------------------------------------------
# Quadrature tables
# ----------------------------------------------------------------------

def _mass_matrix_ref(nv: int) -> np.ndarray:
    # exact P1 simplex mass matrix, scaled by the cell volume at use site
    denom = 12.0 if nv == 3 else 20.0
    return (np.ones((nv, nv)) + np.eye(nv)) / denom


def _facet_quadrature(dim: int):
    """(weights, shape values at qp) for a reference facet of unit measure."""
    if dim == 2:
        a = 0.5 / np.sqrt(3.0)
        xs = np.array([0.5 - a, 0.5 + a])
        return np.array([0.5, 0.5]), np.stack([1.0 - xs, xs], axis=1)
    pts = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
    return np.full(3, 1.0 / 3.0), pts


# ----------------------------------------------------------------------
# The assembled problem
# ----------------------------------------------------------------------

@dataclass
class CellOutputs:
    """Per-cell quantities at the committed state (for output/averages)."""

    eps_p: np.ndarray
    g_e: np.ndarray
    phi: np.ndarray
    s12: np.ndarray
    psi_plus: np.ndarray


class FemProblem:
    """State, assembly and update application for the staggered solver."""

    blocks = ("ug", "d")

    def __init__(
        self,
        mesh: PolyMesh,
        constraints: ConstraintSet,
        regions,
        params: MaterialParams,
        bcs: dict,
        load: LoadProgram,
    ):
        self.mesh = mesh
        self.layout = FieldLayout(mesh, constraints)
        self.params = params
        self.bcs = dict(bcs)
        self.load = load
        self.regions = regions

        dim, nv = mesh.dim, mesh.dim + 1
        ne = mesh.n_cells
        x = mesh.nodes[mesh.cells]                       # (ne, nv, dim)
        e = x[:, 1:, :] - x[:, :1, :]                    # (ne, dim, dim)
        self.volumes = mesh.cell_volumes()
        inv = np.linalg.inv(e)                           # rows: d(xi)/dx
        grads = np.zeros((ne, nv, dim))
        grads[:, 1:, :] = np.swapaxes(inv, 1, 2)
        grads[:, 0, :] = -grads[:, 1:, :].sum(axis=1)
        self.grads = grads
        self.mass = self.volumes[:, None, None] * _mass_matrix_ref(nv)

        dyads_per_grain = np.stack(
            [slip_dyads(r.slip_systems) for r in regions]
        )
        self.dyads = dyads_per_grain[mesh.grain_of_cell]
        self.n_sys = self.dyads.shape[1]
        self.f_components = [(i, j) for i in range(dim) for j in range(dim)]

        self._facet_data = self._build_facet_data()

        # committed state (material points at cell centroids)
        self.fp_inv_n = np.broadcast_to(np.eye(3), (ne, 3, 3)).copy()
        self.k_n = np.zeros((ne, self.n_sys))
        self.eps_p_n = np.zeros(ne)
        self.phi_n = np.zeros(ne)

        # nodal fields (full vectors; ties kept exact by construction)
        nn = mesh.n_nodes
        self.u = np.zeros((nn, dim))
        self.g = np.zeros((nn, dim))
        self.d = np.zeros(nn)

        # iterate caches
        self.phi_iter = self.phi_n.copy()
        self._mech: co.PlasticBatchResult | None = None
        self.time = 0.0
        self.dt = 0.0
        self._prev_committed = None     # (g nodal, d nodal) of previous commit
        self.cell_outputs = CellOutputs(
            eps_p=np.zeros(ne), g_e=np.ones(ne), phi=np.zeros(ne),
            s12=np.zeros(ne), psi_plus=np.zeros(ne),
        )
        self.dissipation = {"bulk": 0.0, "boundary": 0.0}

    # -- facet precomputation -------------------------------------------
    def _build_facet_data(self):
        data = []
        wq, shp = _facet_quadrature(self.mesh.dim)
        for name, bc in self.bcs.items():
            fs = self.mesh.facet_sets.get(name)
            if fs is None or len(fs) == 0 or bc.kind == "micro_hard":
                continue
            cells = fs.cells.astype(int)
            local = fs.local.astype(int)
            fnodes = np.array(
                [facet_nodes(self.mesh, int(c), int(l)) for c, l in zip(cells, local)]
            )
            geom = [facet_normal_and_measure(self.mesh, int(c), int(l))
                    for c, l in zip(cells, local)]
            normals = np.array([g[0] for g in geom])
            measures = np.array([g[1] for g in geom])
            data.append({
                "bc": bc, "fnodes": fnodes, "normals": normals,
                "measures": measures, "wq": wq, "shp": shp, "set": name,
            })
        return data

    # -- staggered-problem protocol -------------------------------------
    def fields_of(self, block: str):
        return ("u", "g") if block == "ug" else ("d",)

    def field_slices(self, block: str):
        if block == "ug":
            return {"u": self.layout.u_slice, "g": self.layout.g_slice}
        return {"d": slice(0, self.layout.n_d_red)}

    def set_time(self, t: float, dt: float):
        # seed the whole field with the affine shear increment (the
        # homogeneous elastic solution); without it the boundary jump
        # against the stale interior creates huge spurious strains in the
        # first assembly of every step
        values_new = apply_shear_loading(self.layout, t, self.load)
        values_old = apply_shear_loading(self.layout, self.time, self.load)
        self.u += values_new - values_old
        mask = self.layout.dirichlet_mask
        self.u[mask] = values_new[mask]
        self.time = t
        self.dt = dt
        self._mech = None

    def snapshot(self) -> dict:
        return {
            "u": self.u.copy(), "g": self.g.copy(), "d": self.d.copy(),
            "fp_inv_n": self.fp_inv_n.copy(), "k_n": self.k_n.copy(),
            "eps_p_n": self.eps_p_n.copy(), "phi_n": self.phi_n.copy(),
            "phi_iter": self.phi_iter.copy(), "time": self.time,
        }

    def restore(self, snap: dict):
        self.u = snap["u"].copy()
        self.g = snap["g"].copy()
        self.d = snap["d"].copy()
        self.fp_inv_n = snap["fp_inv_n"].copy()
        self.k_n = snap["k_n"].copy()
        self.eps_p_n = snap["eps_p_n"].copy()
        self.phi_n = snap["phi_n"].copy()
        self.phi_iter = snap["phi_iter"].copy()
        self.time = snap["time"]
        self._mech = None

    # -- kinematics helpers ----------------------------------------------
    def _cell_f(self) -> np.ndarray:
        dim = self.mesh.dim
        u_cells = self.u[self.mesh.cells]
        f_in = np.einsum("nvc,nvd->ncd", u_cells, self.grads) + np.eye(dim)
        f = np.broadcast_to(np.eye(3), (self.mesh.n_cells, 3, 3)).copy()
        f[:, :dim, :dim] = f_in
        return f

    def _cell_divg(self) -> np.ndarray:
        g_cells = self.g[self.mesh.cells]
        return np.einsum("nvc,nvc->n", g_cells, self.grads)

    def _cell_d(self) -> np.ndarray:
        return self.d[self.mesh.cells].mean(axis=1)

    def _run_plastic(self, tangents: bool) -> co.PlasticBatchResult:
        return co.integrate_plastic_batch(
            self.fp_inv_n, self.k_n, self.eps_p_n, self.phi_iter,
            self._cell_f(), self._cell_divg(), self.dt, self.dyads,
            self.params, f_components=self.f_components, tangents=tangents,
        )

    # -- assembly ----------------------------------------------------------
    def assemble(self, block: str, matrix: bool = True, persist: bool = True):
        """Reduced residual (and tangent) of one block at the current state.

        ``persist`` caches the local integration results: the mechanical
        trial state for the ug block, the local damage iterate for the d
        block. Residual checks of the frozen block use persist=False.
        """
        if block == "ug":
            return self._assemble_ug(matrix, persist)
        return self._assemble_d(matrix, persist)

    def residual_norms(self, block: str) -> dict:
        r, _ = self.assemble(block, matrix=False, persist=False)
        return self.norms_of(block, r)

    def norms_of(self, block: str, reduced_vector: np.ndarray) -> dict:
        return {
            f: float(np.linalg.norm(reduced_vector[s]))
            for f, s in self.field_slices(block).items()
        }

    def apply_update(self, block: str, delta_red: np.ndarray):
        if block == "ug":
            full = self.layout.t_ug @ delta_red
            nn, dim = self.mesh.n_nodes, self.mesh.dim
            self.u += full[: nn * dim].reshape(nn, dim)
            self.g += full[nn * dim:].reshape(nn, dim)
        else:
            self.d += self.layout.t_d @ delta_red

    def solve_correction(self, matrix: sp.spmatrix, residual: np.ndarray):
        from scipy.sparse.linalg import spsolve

        return spsolve(matrix.tocsc(), -residual)

    def _assemble_ug(self, matrix: bool, persist: bool):
        mesh, lay = self.mesh, self.layout
        dim, nv, ne, nn = mesh.dim, mesh.dim + 1, mesh.n_cells, mesh.n_nodes
        res = self._run_plastic(tangents=matrix)
        if persist:
            self._mech = res
        vol, grads = self.volumes, self.grads
        p_in = res.p[:, :dim, :dim]

        r_u = np.einsum("n,ncj,nvj->nvc", vol, p_in, grads)
        g_cells = self.g[mesh.cells]
        r_g = np.einsum("nvw,nwc->nvc", self.mass, g_cells)
        r_g += (vol * res.k_sum)[:, None, None] * grads

        r_full = np.zeros(2 * nn * dim)
        conn_u = (mesh.cells[:, :, None] * dim + np.arange(dim)).reshape(ne, -1)
        np.add.at(r_full, conn_u.ravel(), r_u.reshape(ne, -1).ravel())
        np.add.at(r_full, (nn * dim + conn_u).ravel(), r_g.reshape(ne, -1).ravel())

        rows, cols, vals = [], [], []
        if matrix:
            dpdf = res.dP_dF[:, :dim, :dim, :].reshape(ne, dim, dim, dim, dim)
            k_uu = np.einsum("n,nvj,ncjel,nwl->nvcwe", vol, grads, dpdf, grads)
            k_ug = np.einsum("n,nvj,ncj,nwe->nvcwe", vol, grads,
                             res.dP_ddivg[:, :dim, :dim], grads)
            dksf = res.dksum_dF.reshape(ne, dim, dim)
            k_gu = np.einsum("n,nvc,nel,nwl->nvcwe", vol, grads, dksf, grads)
            k_gg = np.einsum("n,nvc,nwe->nvcwe", vol * res.dksum_ddivg, grads, grads)
            k_gg += np.einsum("nvw,ce->nvcwe", self.mass, np.eye(dim))

            iu = np.repeat(conn_u[:, :, None], nv * dim, axis=2)
            ju = np.repeat(conn_u[:, None, :], nv * dim, axis=1)
            ig = nn * dim + iu
            jg = nn * dim + ju
            for kk, (im, jm) in (
                (k_uu, (iu, ju)), (k_ug, (iu, jg)),
                (k_gu, (ig, ju)), (k_gg, (ig, jg)),
            ):
                rows.append(im.ravel())
                cols.append(jm.ravel())
                vals.append(kk.reshape(ne, nv * dim, nv * dim).ravel())

        # micro-flexible boundary terms (g equation only; d frozen here)
        hglg2 = self.params.grad_hardening * self.params.grad_length**2
        for fd in self._facet_data:
            wq, shp = fd["wq"], fd["shp"]           # (nq,), (nq, nvf)
            fn = fd["fnodes"]                        # (nf, nvf)
            nrm = fd["normals"]                      # (nf, dim)
            meas = fd["measures"]                    # (nf,)
            d_qp = np.einsum("qv,fv->fq", shp, self.d[fn])
            c_qp = fd["bc"].flexibility(d_qp, self.params)
            g_qp = np.einsum("qv,fvc->fqc", shp, self.g[fn])
            ng = np.einsum("fqc,fc->fq", g_qp, nrm)
            coef = c_qp * hglg2 * (wq[None, :] * meas[:, None])   # (nf, nq)
            r_surf = np.einsum("fq,fq,qv,fc->fvc", coef, ng, shp, nrm)
            gdofs = nn * dim + (fn[:, :, None] * dim + np.arange(dim))
            np.add.at(r_full, gdofs.reshape(len(fn), -1).ravel(),
                      r_surf.reshape(len(fn), -1).ravel())
            if matrix:
                k_surf = np.einsum("fq,qv,fc,qw,fe->fvcwe", coef, shp, nrm, shp, nrm)
                nfv = fn.shape[1] * dim
                i_s = np.repeat(gdofs.reshape(len(fn), -1)[:, :, None], nfv, axis=2)
                j_s = np.repeat(gdofs.reshape(len(fn), -1)[:, None, :], nfv, axis=1)
                rows.append(i_s.ravel())
                cols.append(j_s.ravel())
                vals.append(k_surf.reshape(len(fn), nfv, nfv).ravel())

        r_red = lay.t_ug.T @ r_full
        k_red = None
        if matrix:
            k_full = sp.coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(2 * nn * dim, 2 * nn * dim),
            ).tocsr()
            k_red = (lay.t_ug.T @ k_full @ lay.t_ug).tocsr()
        return r_red, k_red

    def _assemble_d(self, matrix: bool, persist: bool):
        mesh, lay, prm = self.mesh, self.layout, self.params
        nv, ne, nn = mesh.dim + 1, mesh.n_cells, mesh.n_nodes
        if self._mech is None:
            raise RuntimeError("phase-field assembly requires a mechanical state")
        d_c = self._cell_d()
        phi, dphi_dd = co.integrate_damage_batch(
            self.phi_n, self._mech.psi_plus, self._mech.eps_p, d_c, prm,
        )
        if persist:
            self.phi_iter = phi

        alpha = prm.penalty
        gl = prm.fracture_stiffness          # G0d * l0
        vol, grads = self.volumes, self.grads
        d_cells = self.d[mesh.cells]
        grad_d = np.einsum("nv,nvd->nd", d_cells, grads)

        r_cell = alpha * (phi[:, None] * (vol / nv)[:, None]
                          - np.einsum("nvw,nw->nv", self.mass, d_cells))
        r_cell -= gl * vol[:, None] * np.einsum("nd,nvd->nv", grad_d, grads)

        r_full = np.zeros(nn)
        np.add.at(r_full, mesh.cells.ravel(), r_cell.ravel())
        r_red = lay.t_d.T @ r_full

        k_red = None
        if matrix:
            k_cell = (alpha * dphi_dd * vol / nv**2)[:, None, None] * np.ones((nv, nv))
            k_cell = k_cell - alpha * self.mass
            k_cell -= gl * vol[:, None, None] * np.einsum("nvd,nwd->nvw", grads, grads)
            iv = np.repeat(mesh.cells[:, :, None], nv, axis=2)
            jv = np.repeat(mesh.cells[:, None, :], nv, axis=1)
            k_full = sp.coo_matrix(
                (k_cell.ravel(), (iv.ravel(), jv.ravel())), shape=(nn, nn)
            ).tocsr()
            k_red = (lay.t_d.T @ k_full @ lay.t_d).tocsr()
        return r_red, k_red

    # -- step commitment and diagnostics ----------------------------------
    def commit_step(self):
        """Finalize the accepted step: consistent local update + history."""
        mech = self._run_plastic(tangents=False)
        d_c = self._cell_d()
        phi_new, _ = co.integrate_damage_batch(
            self.phi_n, mech.psi_plus, mech.eps_p, d_c, self.params
        )
        y_phi = co.damage_residual(
            phi_new, mech.psi_plus, mech.eps_p, d_c, self.params
        )
        dlam = self.k_n - mech.k
        bulk = (
            np.einsum("na,na->n", np.abs(mech.tau_hat), dlam)
            + mech.q_stress * (mech.eps_p - self.eps_p_n)
            + np.einsum("na,na->n", mech.kappa, mech.k - self.k_n)
            + y_phi * (phi_new - self.phi_n)
        )
        boundary = self.boundary_dissipation_increment()

        self.fp_inv_n = mech.fp_inv
        self.k_n = mech.k
        self.eps_p_n = mech.eps_p
        self.phi_n = phi_new
        self.phi_iter = phi_new.copy()
        self._prev_committed = (self.g.copy(), self.d.copy())
        self._mech = None

        self.cell_outputs = CellOutputs(
            eps_p=mech.eps_p.copy(),
            g_e=co.degradation(phi_new, mech.eps_p, self.params),
            phi=phi_new.copy(),
            s12=mech.s_ref[:, 0, 1].copy(),
            psi_plus=mech.psi_plus.copy(),
        )
        self.dissipation = {
            "bulk": float(np.dot(bulk, self.volumes)),
            "boundary": float(boundary),
        }
        return self.cell_outputs

    def boundary_dissipation_increment(self) -> float:
        """Discrete dissipation of the flexible boundary terms this step.

        Integrates (1/C) k_sum_boundary * (increment of k_sum_boundary)
        with end-of-step conjugates, where the boundary value of the
        summed hardening strain is C(d) kappa_gamma = -C(d) H_g l_g^2 N.g.
        """
        if self._prev_committed is None:
            return 0.0
        g_old, d_old = self._prev_committed
        hglg2 = self.params.grad_hardening * self.params.grad_length**2
        total = 0.0
        for fd in self._facet_data:
            wq, shp, fn = fd["wq"], fd["shp"], fd["fnodes"]
            nrm, meas = fd["normals"], fd["measures"]
            kap_new = -hglg2 * np.einsum(
                "qv,fvc,fc->fq", shp, self.g[fn], nrm
            )
            kap_old = -hglg2 * np.einsum(
                "qv,fvc,fc->fq", shp, g_old[fn], nrm
            )
            c_new = fd["bc"].flexibility(
                np.einsum("qv,fv->fq", shp, self.d[fn]), self.params
            )
            c_old = fd["bc"].flexibility(
                np.einsum("qv,fv->fq", shp, d_old[fn]), self.params
            )
            ks_new = c_new * kap_new
            ks_old = c_old * kap_old
            total += float(
                np.einsum("fq,q,f->", kap_new * (ks_new - ks_old), wq, meas)
            )
        return total

    # -- postprocessing -----------------------------------------------------
    def region_average(self, selector: str, cells=None) -> float:
        values = {
            "s12": self.cell_outputs.s12,
            "eps_p": self.cell_outputs.eps_p,
            "g_e": self.cell_outputs.g_e,
            "phi": self.cell_outputs.phi,
            "d": self._cell_d(),
        }[selector]
        if cells is None:
            cells = np.arange(self.mesh.n_cells)
        return volume_average(values, self.volumes, cells)


def volume_average(cell_values: np.ndarray, volumes: np.ndarray, cells) -> float:
    """Volume-weighted average of a per-cell quantity over a cell set."""
    cells = np.asarray(cells, dtype=int)
    if cells.size == 0:
        raise EmptyRegion("volume average over an empty cell set")
    v = volumes[cells]
    return float(np.dot(cell_values[cells], v) / v.sum())
