"""Structured meshes and per-domain finite-element assembly.

Supports heat transfer (1 DOF per node) and linear elasticity (dim DOFs per
node, interleaved) on unit segments, squares and cubes discretized into
linear segments, triangles or tetrahedra.  A dense direct solve serves as
the reference oracle for everything downstream.

Conventions: nodes are ordered lexicographically by (z, y, x); every cube
cell is split into six tetrahedra (Kuhn subdivision); the default load is a
unit body force density on every DOF component so each problem has a
nonzero right-hand side.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np
import scipy.linalg

from .sparse import SparseCsr

PHYSICS = ("heat", "elasticity")

# fixed Poisson ratio; the single material coefficient scales the Young modulus
POISSON = 0.3

_FACE_ALIASES = {
    "left": "x=0", "right": "x=1",
    "bottom": "y=0", "top": "y=1",
    "back": "z=0", "front": "z=1",
}


class MeshError(ValueError):
    """Invalid mesh request or malformed mesh data."""


class DegenerateElementError(ArithmeticError):
    """An element with zero measure was met during assembly."""


class SingularSystemError(ArithmeticError):
    """The constrained global system could not be factorized."""


@dataclass(eq=False, frozen=True)
class Mesh:
    dim: int
    physics: str
    cells_per_side: int
    nodes: np.ndarray          # (n_nodes, dim)
    elements: np.ndarray       # (n_elements, dim + 1)
    boundary: dict = field(repr=False)  # face name -> sorted node ids

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def dofs_per_node(self) -> int:
        return 1 if self.physics == "heat" else self.dim

    @property
    def n_dofs(self) -> int:
        return self.n_nodes * self.dofs_per_node

    def node_dofs(self, nodes) -> np.ndarray:
        """Interleaved DOF ids of the given nodes, ascending."""
        nodes = np.asarray(nodes, dtype=np.int64)
        dpn = self.dofs_per_node
        return (nodes[:, None] * dpn + np.arange(dpn)).ravel()


@dataclass(eq=False)
class GlobalSystem:
    stiffness: SparseCsr
    load: np.ndarray
    dirichlet: tuple = ()

    @property
    def n_dofs(self) -> int:
        return self.load.shape[0]


def _kuhn_tets():
    """Vertex index tuples (by (dx,dy,dz) bit pattern) of the 6-tet split."""
    corner = {(dx, dy, dz): dx + 2 * dy + 4 * dz for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)}
    tets = []
    for axes in permutations(range(3)):
        path = [(0, 0, 0)]
        pos = [0, 0, 0]
        for a in axes:
            pos = list(pos)
            pos[a] = 1
            path.append(tuple(pos))
        tets.append([corner[v] for v in path])
    return tets


_KUHN_TETS = _kuhn_tets()


def structured_mesh(dim, cells_per_side, physics, index_offset=None, divisor=None) -> Mesh:
    """Structured mesh of a box; coordinates are integer indices / divisor.

    ``index_offset``/``divisor`` carve a sub-box of a finer global grid so a
    subdomain mesh reproduces the global node coordinates bit for bit.
    """
    if dim not in (1, 2, 3):
        raise MeshError(f"dim must be 1, 2 or 3, got {dim}")
    if physics not in PHYSICS:
        raise MeshError(f"unknown physics {physics!r}")
    cells = int(cells_per_side)
    if cells < 1:
        raise MeshError("cells_per_side must be at least 1")
    offset = np.zeros(dim, np.int64) if index_offset is None else np.asarray(index_offset, np.int64)
    div = cells if divisor is None else int(divisor)

    npts = cells + 1
    axes = [(offset[a] + np.arange(npts, dtype=np.int64)) / div for a in range(dim)]
    # lexicographic by (z, y, x): x varies fastest
    if dim == 1:
        nodes = axes[0].reshape(-1, 1)
    else:
        grids = np.meshgrid(*axes, indexing="ij")         # grids[a] indexed by (i_0 .. i_dim-1)
        stacked = np.stack([g.transpose(*reversed(range(dim))) for g in grids], axis=-1)
        nodes = stacked.reshape(-1, dim)

    def nid(ix, iy=0, iz=0):
        return (iz * npts + iy) * npts + ix if dim == 3 else (iy * npts + ix if dim == 2 else ix)

    if dim == 1:
        elements = np.stack([np.arange(cells), np.arange(1, cells + 1)], axis=1)
    elif dim == 2:
        quads = []
        for iy in range(cells):
            for ix in range(cells):
                n00, n10 = nid(ix, iy), nid(ix + 1, iy)
                n01, n11 = nid(ix, iy + 1), nid(ix + 1, iy + 1)
                quads.append((n00, n10, n11))
                quads.append((n00, n11, n01))
        elements = np.asarray(quads, dtype=np.int64)
    else:
        cube_rel = np.array(
            [[dx, dy, dz] for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)], dtype=np.int64
        )  # index by dx + 2 dy + 4 dz
        tets = []
        for iz in range(cells):
            for iy in range(cells):
                for ix in range(cells):
                    base = np.array([ix, iy, iz])
                    ids = [nid(*(base + cube_rel[c])) for c in range(8)]
                    for tet in _KUHN_TETS:
                        conn = [ids[v] for v in tet]
                        if _signed_volume(nodes[conn]) < 0:
                            conn[2], conn[3] = conn[3], conn[2]
                        tets.append(conn)
        elements = np.asarray(tets, dtype=np.int64)

    boundary = {}
    names = ("x", "y", "z")
    for a in range(dim):
        lo, hi = nodes[:, a].min(), nodes[:, a].max()
        boundary[f"{names[a]}=0"] = np.flatnonzero(nodes[:, a] == lo).astype(np.int64)
        boundary[f"{names[a]}=1"] = np.flatnonzero(nodes[:, a] == hi).astype(np.int64)

    return Mesh(dim=dim, physics=physics, cells_per_side=cells,
                nodes=np.ascontiguousarray(nodes, dtype=np.float64),
                elements=np.ascontiguousarray(elements), boundary=boundary)


def generate_mesh(dim, cells_per_side, physics) -> Mesh:
    """Structured mesh of the unit segment/square/cube."""
    return structured_mesh(dim, cells_per_side, physics)


def _signed_volume(pts):
    return np.linalg.det(pts[1:] - pts[0]) / 6.0


def _simplex_measure_and_grads(pts):
    """Measure of a linear simplex and the constant shape-function gradients."""
    dim = pts.shape[1]
    jac = pts[1:] - pts[0]
    if dim == 1:
        meas = jac[0, 0]
    elif dim == 2:
        meas = 0.5 * np.linalg.det(jac)
    else:
        meas = np.linalg.det(jac) / 6.0
    if meas == 0.0:
        raise DegenerateElementError("zero-measure element")
    # gradient of shape function a (a >= 1) is row a-1 of J^-T
    inv_jt = np.linalg.inv(jac.T)
    grads = np.empty((dim + 1, dim))
    grads[1:] = inv_jt
    grads[0] = -inv_jt.sum(axis=0)
    return abs(meas), grads


def _elastic_moduli(dim, coefficient):
    """Isotropic stiffness in Voigt form, plane strain in 2D."""
    e, nu = float(coefficient), POISSON
    lam = e * nu / ((1 + nu) * (1 - 2 * nu))
    mu = e / (2 * (1 + nu))
    if dim == 2:
        return np.array([
            [lam + 2 * mu, lam, 0.0],
            [lam, lam + 2 * mu, 0.0],
            [0.0, 0.0, mu],
        ])
    return np.array([
        [lam + 2 * mu, lam, lam, 0, 0, 0],
        [lam, lam + 2 * mu, lam, 0, 0, 0],
        [lam, lam, lam + 2 * mu, 0, 0, 0],
        [0, 0, 0, mu, 0, 0],
        [0, 0, 0, 0, mu, 0],
        [0, 0, 0, 0, 0, mu],
    ], dtype=np.float64)


def _strain_matrix(grads, dim):
    """Voigt strain-displacement matrix for linear shape functions."""
    nn = grads.shape[0]
    if dim == 2:
        b = np.zeros((3, 2 * nn))
        for a in range(nn):
            gx, gy = grads[a]
            b[0, 2 * a] = gx
            b[1, 2 * a + 1] = gy
            b[2, 2 * a] = gy
            b[2, 2 * a + 1] = gx
        return b
    b = np.zeros((6, 3 * nn))
    for a in range(nn):
        gx, gy, gz = grads[a]
        c = 3 * a
        b[0, c] = gx
        b[1, c + 1] = gy
        b[2, c + 2] = gz
        b[3, c] = gy
        b[3, c + 1] = gx
        b[4, c + 1] = gz
        b[4, c + 2] = gy
        b[5, c] = gz
        b[5, c + 2] = gx
    return b


def element_stiffness(pts, physics, coefficient, dim):
    """Exact-symmetric element stiffness for a linear simplex."""
    meas, grads = _simplex_measure_and_grads(pts)
    if physics == "heat":
        ke = coefficient * meas * (grads @ grads.T)
    else:
        b = _strain_matrix(grads, dim)
        d = _elastic_moduli(dim, coefficient)
        ke = meas * (b.T @ d @ b)
    return 0.5 * (ke + ke.T), meas


def assemble_system(mesh: Mesh, physics=None, coefficient=1.0, dirichlet=()) -> GlobalSystem:
    """Element-wise FEM assembly with linear shape functions.

    The load vector carries a constant unit body-force density on every DOF
    component.  The assembled matrix is exactly symmetric: the upper
    triangle is built and mirrored.
    """
    physics = mesh.physics if physics is None else physics
    if physics != mesh.physics:
        raise MeshError("mesh was generated for a different physics")
    if coefficient <= 0:
        raise MeshError("material coefficient must be positive")
    dim = mesh.dim
    dpn = mesh.dofs_per_node
    nverts = dim + 1
    n_dofs = mesh.n_dofs

    rows, cols, vals = [], [], []
    load = np.zeros(n_dofs)
    for conn in mesh.elements:
        ke, meas = element_stiffness(mesh.nodes[conn], physics, coefficient, dim)
        dofs = (conn[:, None] * dpn + np.arange(dpn)).ravel()
        share = meas / nverts
        load[dofs] += share
        rr = np.repeat(dofs, dofs.shape[0])
        cc = np.tile(dofs, dofs.shape[0])
        keep = rr <= cc
        rows.append(rr[keep])
        cols.append(cc[keep])
        vals.append(ke.ravel()[keep])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    off = rows != cols
    stiffness = SparseCsr.from_coo(
        np.concatenate([rows, cols[off]]),
        np.concatenate([cols, rows[off]]),
        np.concatenate([vals, vals[off]]),
        (n_dofs, n_dofs),
    )
    return GlobalSystem(stiffness=stiffness, load=load, dirichlet=tuple(dirichlet))


def dirichlet_dofs(mesh: Mesh, faces, value=0.0):
    """Prescribed (dof, value) pairs on one or more faces of the mesh box."""
    if isinstance(faces, str):
        faces = (faces,)
    nodes = []
    for face in faces:
        name = _FACE_ALIASES.get(face, face)
        if name not in mesh.boundary:
            raise MeshError(f"unknown face {face!r}; have {sorted(mesh.boundary)}")
        nodes.append(mesh.boundary[name])
    node_ids = np.unique(np.concatenate(nodes)) if nodes else np.empty(0, np.int64)
    return [(int(d), float(value)) for d in mesh.node_dofs(node_ids)]


def solve_direct_reference(system: GlobalSystem) -> np.ndarray:
    """Dense factorization solve of the constrained global system.

    An independent oracle for the FETI pipeline: Dirichlet DOFs are
    eliminated here rather than enforced through constraint rows.
    """
    n = system.n_dofs
    a = system.stiffness.to_dense()
    u = np.zeros(n)
    fixed = np.array(sorted(d for d, _ in system.dirichlet), dtype=np.int64)
    if np.unique(fixed).shape[0] != fixed.shape[0]:
        raise MeshError("duplicate Dirichlet DOF")
    for d, v in system.dirichlet:
        u[d] = v
    free = np.setdiff1d(np.arange(n, dtype=np.int64), fixed)
    rhs = system.load[free] - a[np.ix_(free, fixed)] @ u[fixed]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
            u[free] = scipy.linalg.solve(a[np.ix_(free, free)], rhs, assume_a="sym")
    except (scipy.linalg.LinAlgError, scipy.linalg.LinAlgWarning, ValueError) as err:
        raise SingularSystemError(str(err)) from err
    resid = np.linalg.norm(a[free] @ u - system.load[free])
    if not np.isfinite(resid) or resid > 1e-10 * max(np.linalg.norm(system.load), 1.0):
        raise SingularSystemError(f"reference solve residual too large: {resid:.3e}")
    return u
