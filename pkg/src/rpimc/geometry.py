"""Node clouds on box domains, boundary tagging and support-domain search."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

INTERIOR, DIRICHLET, NEUMANN = 0, 1, 2
TAG_NAMES = {INTERIOR: "interior", DIRICHLET: "dirichlet", NEUMANN: "neumann"}
_TAG_CODES = {v: k for k, v in TAG_NAMES.items()}

AXES = "xyz"
_GROW = 1.1


class GeometryError(ValueError):
    pass


def face_names(dim):
    return [f"{AXES[k]}{s}" for k in range(dim) for s in "-+"]


@dataclass(frozen=True, eq=False)
class NodeCloud:
    """Discretization nodes with boundary labels and outward normals.

    Parameters
    ----------
    positions : ndarray, shape (N, dim)
    boundary_tags : ndarray of int8, shape (N,)
        ``INTERIOR``, ``DIRICHLET`` or ``NEUMANN`` per node.
    normals : ndarray, shape (N, dim)
        Unit outward normals on boundary nodes, zero rows elsewhere.
    spacing : float
        Characteristic nodal spacing ``h``.
    faces : ndarray of bool, shape (N, 2*dim), optional
        Box-face membership (columns ordered as :func:`face_names`). Only
        lattice clouds carry it.
    """

    positions: np.ndarray
    boundary_tags: np.ndarray
    normals: np.ndarray
    spacing: float
    faces: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float64)
        tags = np.ascontiguousarray(self.boundary_tags, dtype=np.int8)
        nrm = np.ascontiguousarray(self.normals, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] not in (2, 3):
            raise GeometryError(f"positions must be (N, 2) or (N, 3), got {pos.shape}")
        if tags.shape != (len(pos),) or nrm.shape != pos.shape:
            raise GeometryError("tags/normals do not match positions")
        if not np.isin(tags, (INTERIOR, DIRICHLET, NEUMANN)).all():
            raise GeometryError("unknown boundary tag")
        if not self.spacing > 0:
            raise GeometryError(f"spacing must be positive, got {self.spacing}")
        bnd = tags != INTERIOR
        norms = np.linalg.norm(nrm[bnd], axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            raise GeometryError("boundary normals must have unit length")
        for name, arr in (("positions", pos), ("boundary_tags", tags), ("normals", nrm)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.faces is not None:
            faces = np.array(self.faces, dtype=bool)
            faces.setflags(write=False)
            object.__setattr__(self, "faces", faces)

    @property
    def dim(self):
        return self.positions.shape[1]

    def __len__(self):
        return len(self.positions)

    def indices(self, tag):
        return np.flatnonzero(self.boundary_tags == tag)

    @property
    def on_boundary(self):
        if self.faces is not None:
            return self.faces.any(axis=1)
        return self.boundary_tags != INTERIOR


def generate_regular_grid(box, h):
    """Lattice of nodes with spacing ``h`` over an axis-aligned box.

    ``box`` is ``(lo, hi)`` with one entry per axis. Every node lying on a
    face is tagged Dirichlet until :func:`tag_boundaries` says otherwise.
    Edge and corner normals are the normalized sum of adjacent face normals.
    """
    lo = np.asarray(box[0], dtype=np.float64)
    hi = np.asarray(box[1], dtype=np.float64)
    if lo.shape != hi.shape or lo.ndim != 1 or len(lo) not in (2, 3):
        raise GeometryError("box must be (lo, hi) in 2 or 3 dimensions")
    lengths = hi - lo
    if np.any(lengths <= 0):
        raise GeometryError("box edge lengths must be positive")
    if not h > 0:
        raise GeometryError(f"spacing must be positive, got {h}")
    cells = np.rint(lengths / h)
    if np.any(cells < 1) or np.any(np.abs(cells * h - lengths) > 1e-9 * lengths):
        raise GeometryError(f"spacing {h} does not divide box edges {lengths.tolist()}")
    cells = cells.astype(int)
    axes = []
    for k in range(len(lo)):
        ax = lo[k] + lengths[k] * np.arange(cells[k] + 1) / cells[k]
        ax[-1] = hi[k]
        axes.append(ax)
    idx = np.stack(np.meshgrid(*[np.arange(c + 1) for c in cells], indexing="ij"), -1)
    idx = idx.reshape(-1, len(lo))
    pos = np.column_stack([axes[k][idx[:, k]] for k in range(len(lo))])

    dim = len(lo)
    faces = np.zeros((len(pos), 2 * dim), dtype=bool)
    normals = np.zeros_like(pos)
    for k in range(dim):
        faces[:, 2 * k] = idx[:, k] == 0
        faces[:, 2 * k + 1] = idx[:, k] == cells[k]
        normals[faces[:, 2 * k], k] -= 1.0
        normals[faces[:, 2 * k + 1], k] += 1.0
    bnd = faces.any(axis=1)
    normals[bnd] /= np.linalg.norm(normals[bnd], axis=1)[:, None]
    tags = np.where(bnd, DIRICHLET, INTERIOR).astype(np.int8)
    return NodeCloud(pos, tags, normals, float(h), faces)


def tag_boundaries(cloud, spec):
    """Re-tag lattice boundary nodes from a per-face assignment.

    ``spec`` maps face names (``"x-"``, ``"x+"``, ``"y-"``, ...) to
    ``"dirichlet"`` or ``"neumann"``. A node shared by a Dirichlet and a
    Neumann face ends up Dirichlet.
    """
    if cloud.faces is None:
        raise GeometryError("cloud has no face membership; tags must come from the file")
    names = face_names(cloud.dim)
    missing = [f for f in names if f not in spec]
    if missing:
        raise GeometryError(f"unassigned face(s): {', '.join(missing)}")
    unknown = set(spec) - set(names)
    if unknown:
        raise GeometryError(f"unknown face(s): {', '.join(sorted(unknown))}")
    tags = np.full(len(cloud), INTERIOR, dtype=np.int8)
    for col, name in enumerate(names):
        kind = spec[name]
        if kind not in ("dirichlet", "neumann"):
            raise GeometryError(f"face {name}: expected 'dirichlet' or 'neumann', got {kind!r}")
        if kind == "neumann":
            tags[cloud.faces[:, col]] = NEUMANN
    for col, name in enumerate(names):
        if spec[name] == "dirichlet":
            tags[cloud.faces[:, col]] = DIRICHLET
    return NodeCloud(cloud.positions, tags, cloud.normals, cloud.spacing, cloud.faces)


def uniform_tags(kind, dim):
    return {f: kind for f in face_names(dim)}


# ------------------------------------------------------------------ supports

@dataclass(frozen=True)
class SupportDomain:
    center_index: int
    neighbor_indices: np.ndarray
    box_half_widths: np.ndarray

    def __len__(self):
        return len(self.neighbor_indices)


@dataclass(frozen=True, eq=False)
class SupportSet:
    """Supports of every node in CSR layout (row ``i`` lists node ``i``'s neighbors)."""

    indptr: np.ndarray
    indices: np.ndarray
    half_widths: np.ndarray

    def __len__(self):
        return len(self.indptr) - 1

    def __getitem__(self, i):
        nbrs = self.indices[self.indptr[i]:self.indptr[i + 1]]
        return SupportDomain(int(i), nbrs, self.half_widths[i])

    @property
    def sizes(self):
        return np.diff(self.indptr)


def _min_support(dim):
    return dim + 2


def _box_members(pos, center, half):
    return np.flatnonzero(np.all(np.abs(pos - center) <= half, axis=1))


def _grow(pos, center, half, need):
    half = np.array(half, dtype=np.float64)
    members = _box_members(pos, center, half)
    while len(members) < need:
        half *= _GROW
        members = _box_members(pos, center, half)
    return members, half


def find_support(cloud, center_index, a_c):
    """Nodes inside the box of half-width ``a_c * h`` around one node.

    The box is enlarged by 10% steps until it holds at least ``dim + 2``
    nodes (linear basis size plus one).
    """
    if a_c < 1:
        raise GeometryError(f"dilatation coefficient must be >= 1, got {a_c}")
    need = _min_support(cloud.dim)
    if len(cloud) < need:
        raise GeometryError(f"cloud has {len(cloud)} nodes, a support needs {need}")
    h = cloud.spacing
    half = np.full(cloud.dim, a_c * h + 1e-9 * h)
    members, half = _grow(cloud.positions, cloud.positions[center_index], half, need)
    return SupportDomain(int(center_index), members, half)


def find_support_at(cloud, point, a_c):
    """Support box centred at an arbitrary point (for off-node evaluation)."""
    need = _min_support(cloud.dim)
    if len(cloud) < need:
        raise GeometryError(f"cloud has {len(cloud)} nodes, a support needs {need}")
    h = cloud.spacing
    half = np.full(cloud.dim, a_c * h + 1e-9 * h)
    members, half = _grow(cloud.positions, np.asarray(point, dtype=np.float64), half, need)
    return SupportDomain(-1, members, half)


def find_supports(cloud, a_c, backend=None):
    """Supports for all nodes using uniform binning with bin size ``a_c * h``."""
    if a_c < 1:
        raise GeometryError(f"dilatation coefficient must be >= 1, got {a_c}")
    need = _min_support(cloud.dim)
    if len(cloud) < need:
        raise GeometryError(f"cloud has {len(cloud)} nodes, a support needs {need}")
    h = cloud.spacing
    half = a_c * h + 1e-9 * h
    indptr, indices = kernels.box_neighbors(cloud.positions, half, a_c * h, backend=backend)
    halves = np.full((len(cloud), cloud.dim), half)
    short = np.flatnonzero(np.diff(indptr) < need)
    if len(short):
        rows = [indices[indptr[i]:indptr[i + 1]] for i in range(len(cloud))]
        for i in short:
            rows[i], halves[i] = _grow(cloud.positions, cloud.positions[i], halves[i], need)
        indptr = np.concatenate(([0], np.cumsum([len(r) for r in rows]))).astype(np.int64)
        indices = np.concatenate(rows).astype(np.int64)
    for arr in (indptr, indices, halves):
        arr.setflags(write=False)
    return SupportSet(indptr, indices, halves)


# ------------------------------------------------------------------- file IO

def nearest_neighbor_spacing(positions):
    """Mean distance from each node to its nearest neighbor."""
    from scipy.spatial import cKDTree

    dist, _ = cKDTree(positions).query(positions, k=2)
    return float(dist[:, 1].mean())


def read_cloud(path):
    """Read a text point cloud: header ``dim N`` then ``x y [z] tag nx ny [nz]`` rows."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    try:
        dim, n = (int(t) for t in lines[0].split())
    except (ValueError, IndexError) as exc:
        raise GeometryError(f"{path}: bad header, expected 'dim N'") from exc
    rows = np.array([ln.split() for ln in lines[1:]], dtype=np.float64)
    if rows.shape != (n, 2 * dim + 1):
        raise GeometryError(f"{path}: expected {n} rows of {2 * dim + 1} columns, got {rows.shape}")
    pos = rows[:, :dim]
    tags = rows[:, dim].astype(np.int8)
    normals = rows[:, dim + 1:]
    return NodeCloud(pos, tags, normals, nearest_neighbor_spacing(pos))


def write_cloud(cloud, path):
    with open(path, "w") as fh:
        fh.write(f"{cloud.dim} {len(cloud)}\n")
        for x, t, nv in zip(cloud.positions, cloud.boundary_tags, cloud.normals):
            cols = [repr(float(v)) for v in x] + [str(int(t))] + [repr(float(v)) for v in nv]
            fh.write(" ".join(cols) + "\n")
