"""Domain partitioning, Total FETI constraints and cluster layout.

The structured mesh is cut into a regular grid of box subdomains, each with
a self-contained local mesh.  Gluing constraints chain the copies of every
shared DOF through consecutive owners (k-1 rows for multiplicity k, +1 in
the lower-numbered subdomain, -1 in the higher); Dirichlet conditions become
one +1 row per owning subdomain with the prescribed value on the right-hand
side, so every subdomain stiffness stays singular.  Multipliers are numbered
gluing first, then Dirichlet, each lexicographically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import Mesh, structured_mesh
from .sparse import SparseCsr

GLUING = "gluing"
DIRICHLET = "dirichlet"


class DecompositionError(ValueError):
    """Invalid partition, constraint or cluster request."""


@dataclass(eq=False)
class Subdomain:
    index: int
    grid_pos: tuple
    mesh: Mesh
    node_l2g: np.ndarray
    dof_l2g: np.ndarray


@dataclass(eq=False)
class Partition:
    mesh: Mesh
    subdomains_per_side: int
    subdomains: list

    @property
    def n_subdomains(self) -> int:
        return len(self.subdomains)

    @property
    def n_dofs_global(self) -> int:
        return self.mesh.n_dofs

    def dof_owners(self):
        """For every global DOF the ascending list of (subdomain, local dof)."""
        owners = [[] for _ in range(self.mesh.n_dofs)]
        for sub in self.subdomains:
            for loc, glob in enumerate(sub.dof_l2g):
                owners[glob].append((sub.index, loc))
        return owners


@dataclass(eq=False)
class SubdomainConstraints:
    multiplier_ids: np.ndarray   # ascending global multiplier ids
    matrix: SparseCsr            # (#local multipliers, #local dofs)


@dataclass(eq=False)
class ConstraintSet:
    n_multipliers: int
    c: np.ndarray
    kinds: np.ndarray            # per multiplier: GLUING or DIRICHLET
    per_subdomain: list          # SubdomainConstraints, by subdomain index

    def apply(self, local_vectors, out=None):
        """B u: sum the per-subdomain constraint rows over local vectors."""
        if out is None:
            out = np.zeros(self.n_multipliers)
        else:
            out[:] = 0.0
        for sc, u in zip(self.per_subdomain, local_vectors):
            ip, ix, dt = sc.matrix.row_arrays()
            contrib = np.zeros(sc.multiplier_ids.shape[0])
            from . import _kernels as _k

            _k.spmv_rows(ip, ix, dt, np.asarray(u, dtype=np.float64), contrib)
            out[sc.multiplier_ids] += contrib
        return out

    def apply_transpose(self, lam):
        """B^T lambda as one vector per subdomain."""
        from . import _kernels as _k

        outs = []
        for sc in self.per_subdomain:
            ip, ix, dt = sc.matrix.row_arrays()
            loc = np.zeros(sc.matrix.shape[1])
            _k.spmv_rows_t(ip, ix, dt, lam[sc.multiplier_ids], loc)
            outs.append(loc)
        return outs

    def restricted_to(self, index) -> "ConstraintSet":
        """Single-subdomain view with multipliers renumbered 0..m-1."""
        sc = self.per_subdomain[index]
        m = sc.multiplier_ids.shape[0]
        return ConstraintSet(
            n_multipliers=m,
            c=self.c[sc.multiplier_ids].copy(),
            kinds=self.kinds[sc.multiplier_ids].copy(),
            per_subdomain=[SubdomainConstraints(np.arange(m, dtype=np.int64), sc.matrix)],
        )


@dataclass(eq=False)
class Cluster:
    index: int
    subdomain_ids: np.ndarray
    dual_ids: np.ndarray         # ascending global multiplier ids in this cluster
    scatter: list                # per subdomain: positions of its multipliers in dual_ids


@dataclass(eq=False)
class ClusterLayout:
    clusters: list
    n_multipliers: int

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)


def partition(mesh: Mesh, subdomains_per_side: int) -> Partition:
    """Cut the structured mesh into a regular grid of box subdomains."""
    sps = int(subdomains_per_side)
    if sps < 1:
        raise DecompositionError("subdomains_per_side must be at least 1")
    cells = mesh.cells_per_side
    if cells % sps != 0:
        raise DecompositionError(f"{cells} cells per side not divisible by {sps} subdomains")
    sub_cells = cells // sps
    dim = mesh.dim
    npts = cells + 1
    dpn = mesh.dofs_per_node

    def global_node(idx):
        out = 0
        for a in reversed(range(dim)):
            out = out * npts + idx[a]
        return out

    subs = []
    grid_shape = (sps,) * dim
    for flat in range(sps ** dim):
        pos = np.unravel_index(flat, grid_shape, order="C")
        pos = tuple(int(p) for p in reversed(pos))  # x fastest
        offset = np.array(pos, dtype=np.int64) * sub_cells
        local = structured_mesh(dim, sub_cells, mesh.physics,
                                index_offset=offset, divisor=cells)
        ln = sub_cells + 1
        node_l2g = np.empty(local.n_nodes, np.int64)
        for li in range(local.n_nodes):
            rem = li
            idx = []
            for _ in range(dim):
                idx.append(rem % ln)
                rem //= ln
            node_l2g[li] = global_node([offset[a] + idx[a] for a in range(dim)])
        dof_l2g = (node_l2g[:, None] * dpn + np.arange(dpn)).ravel()
        subs.append(Subdomain(index=len(subs), grid_pos=pos, mesh=local,
                              node_l2g=node_l2g, dof_l2g=dof_l2g))
    return Partition(mesh=mesh, subdomains_per_side=sps, subdomains=subs)


def build_constraints(part: Partition, dirichlet) -> ConstraintSet:
    """Gluing chains plus Total FETI Dirichlet rows, deterministically numbered."""
    owners = part.dof_owners()
    n_subs = part.n_subdomains

    rows = [[] for _ in range(n_subs)]   # (local multiplier row, local dof, coeff)
    gids = [[] for _ in range(n_subs)]
    c_vals = []
    kinds = []
    mid = 0

    for dof in range(part.n_dofs_global):
        own = owners[dof]
        if len(own) < 2:
            continue
        for t in range(len(own) - 1):
            (sa, la), (sb, lb) = own[t], own[t + 1]
            rows[sa].append((mid, la, 1.0))
            rows[sb].append((mid, lb, -1.0))
            gids[sa].append(mid)
            gids[sb].append(mid)
            c_vals.append(0.0)
            kinds.append(GLUING)
            mid += 1

    for dof, value in sorted(dirichlet):
        own = owners[dof] if 0 <= dof < part.n_dofs_global else []
        if not own:
            raise DecompositionError(f"Dirichlet DOF {dof} not found in any subdomain")
        for s, loc in own:
            rows[s].append((mid, loc, 1.0))
            gids[s].append(mid)
            c_vals.append(float(value))
            kinds.append(DIRICHLET)
            mid += 1

    per_sub = []
    for s, sub in enumerate(part.subdomains):
        ids = np.unique(np.asarray(gids[s], dtype=np.int64))
        lookup = {int(g): i for i, g in enumerate(ids)}
        r = np.array([lookup[g] for g, _, _ in rows[s]], dtype=np.int64)
        cc = np.array([loc for _, loc, _ in rows[s]], dtype=np.int64)
        vv = np.array([v for _, _, v in rows[s]])
        mat = SparseCsr.from_coo(r, cc, vv, (ids.shape[0], sub.mesh.n_dofs))
        per_sub.append(SubdomainConstraints(multiplier_ids=ids, matrix=mat))

    return ConstraintSet(
        n_multipliers=mid,
        c=np.asarray(c_vals),
        kinds=np.asarray(kinds),
        per_subdomain=per_sub,
    )


def build_clusters(part: Partition, constraints: ConstraintSet, n_clusters: int) -> ClusterLayout:
    """Contiguous subdomain-to-cluster assignment with per-cluster dual maps."""
    n_subs = part.n_subdomains
    k = int(n_clusters)
    if k < 1 or n_subs % k != 0:
        raise DecompositionError(f"{n_subs} subdomains not divisible into {n_clusters} clusters")
    per = n_subs // k
    clusters = []
    for ci in range(k):
        sub_ids = np.arange(ci * per, (ci + 1) * per, dtype=np.int64)
        dual = np.unique(np.concatenate(
            [constraints.per_subdomain[s].multiplier_ids for s in sub_ids]
        )) if per else np.empty(0, np.int64)
        scatter = [np.searchsorted(dual, constraints.per_subdomain[s].multiplier_ids)
                   for s in sub_ids]
        clusters.append(Cluster(index=ci, subdomain_ids=sub_ids, dual_ids=dual, scatter=scatter))
    return ClusterLayout(clusters=clusters, n_multipliers=constraints.n_multipliers)
