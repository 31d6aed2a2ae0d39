"""Triangle meshes: construction, generators, OBJ round-trip, local queries, patching.

Positions are float64 arrays of shape (V, 3); faces are integer arrays of shape
(F, 3). Edges and the offset-indexed adjacency tables are derived once at
construction and never mutated afterwards, so a built mesh can be read from any
number of threads.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "DEFAULT_PATCH_TARGET",
    "DEFAULT_VALENCE_CAP",
    "AdjacencyTable",
    "Element",
    "ElementHandle",
    "Mesh",
    "MeshError",
    "Op",
    "SOURCE_KIND",
    "TARGET_KIND",
    "generate_grid",
    "generate_icosphere",
    "load_obj",
    "partition_patches",
    "query",
    "save_obj",
]

DEFAULT_VALENCE_CAP = 32
DEFAULT_PATCH_TARGET = 512


class MeshError(Exception):
    """Malformed mesh input: bad file records, out-of-range indices, degenerate faces."""


class Element(Enum):
    VERTEX = "vertex"
    EDGE = "edge"
    FACE = "face"


class Op(Enum):
    """Neighborhood access patterns.

    FV: face -> its 3 vertices in stored winding order.
    EV: edge -> its 2 endpoints in canonical (i, j), i < j order.
    VV: vertex -> one-ring vertices, ascending.
    VE: vertex -> incident edges, ascending.
    VF: vertex -> incident faces, ascending.
    V:  vertex -> itself.
    """

    FV = "FV"
    EV = "EV"
    VV = "VV"
    VE = "VE"
    VF = "VF"
    V = "V"


SOURCE_KIND = {
    Op.FV: Element.FACE,
    Op.EV: Element.EDGE,
    Op.VV: Element.VERTEX,
    Op.VE: Element.VERTEX,
    Op.VF: Element.VERTEX,
    Op.V: Element.VERTEX,
}

TARGET_KIND = {
    Op.FV: Element.VERTEX,
    Op.EV: Element.VERTEX,
    Op.VV: Element.VERTEX,
    Op.VE: Element.EDGE,
    Op.VF: Element.FACE,
    Op.V: Element.VERTEX,
}


@dataclass(frozen=True)
class ElementHandle:
    kind: Element
    index: int


class AdjacencyTable:
    """Offset-indexed (CSR-style) one-to-many incidence map.

    `offsets` has length num_sources + 1; the targets of source i are
    `indices[offsets[i]:offsets[i + 1]]`, sorted ascending.
    """

    __slots__ = ("offsets", "indices")

    def __init__(self, offsets: np.ndarray, indices: np.ndarray):
        self.offsets = offsets
        self.indices = indices

    def __len__(self) -> int:
        return len(self.offsets) - 1

    def __getitem__(self, i: int) -> np.ndarray:
        return self.indices[self.offsets[i] : self.offsets[i + 1]]

    def degree(self, i: int) -> int:
        return int(self.offsets[i + 1] - self.offsets[i])

    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)


def _build_csr(src: np.ndarray, dst: np.ndarray, num_sources: int) -> AdjacencyTable:
    order = np.lexsort((dst, src))
    src = src[order]
    dst = dst[order]
    counts = np.bincount(src, minlength=num_sources)
    offsets = np.zeros(num_sources + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return AdjacencyTable(offsets, dst.astype(np.int64))


class Mesh:
    """Indexed triangle mesh with derived edges, adjacency tables, and patches.

    Edges are derived from faces (undirected, deduplicated, canonical i < j
    order, sorted lexicographically). A face-free mesh may instead be built
    from an explicit edge list, which lets edge-based energies run on wire
    networks such as a single spring.
    """

    def __init__(self, positions, faces, edges=None, patch_target: int = DEFAULT_PATCH_TARGET):
        positions = np.array(positions, dtype=np.float64)
        if positions.ndim != 2 or positions.shape[1] != 3:
            raise MeshError(f"positions must be (V, 3), got {positions.shape}")
        faces = np.array(faces, dtype=np.int64).reshape(-1, 3) if np.size(faces) else np.zeros((0, 3), np.int64)
        nv = len(positions)
        if faces.size:
            if faces.min() < 0 or faces.max() >= nv:
                bad = int(np.argmax(np.any((faces < 0) | (faces >= nv), axis=1)))
                raise MeshError(f"face {bad} references a vertex outside 0..{nv - 1}")
            if np.any((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])):
                bad = int(np.argmax(
                    (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
                ))
                raise MeshError(f"face {bad} has repeated vertices")
            if edges is not None:
                raise MeshError("edges are derived from faces; pass explicit edges only for face-free meshes")

        self.positions = positions
        self.faces = faces
        self.edges, self._face_edges = self._derive_edges(faces, edges, nv)

        e = self.edges
        self.vertex_to_vertex = _build_csr(
            np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]]), nv
        )
        eid = np.arange(len(e), dtype=np.int64)
        self.vertex_to_edge = _build_csr(
            np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([eid, eid]), nv
        )
        self.vertex_to_face = _build_csr(
            faces.ravel(), np.repeat(np.arange(len(faces), dtype=np.int64), 3), nv
        )
        self.edge_to_face = _build_csr(
            self._face_edges.ravel(), np.repeat(np.arange(len(faces), dtype=np.int64), 3), len(e)
        )
        self._face_to_face = self._build_face_adjacency()

        self.patch_of_face = partition_patches(self, patch_target)
        self.num_patches = int(self.patch_of_face.max()) + 1 if len(faces) else (1 if len(e) or nv else 0)
        # Edges/vertices inherit the patch of their lowest-index incident face
        # so element evaluation can iterate patch-by-patch for every kind.
        self.patch_of_edge = self._inherit_patch(self.edge_to_face, len(e))
        self.patch_of_vertex = self._inherit_patch(self.vertex_to_face, nv)

    @staticmethod
    def _derive_edges(faces, explicit, nv):
        if len(faces):
            pairs = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
            pairs = np.sort(pairs, axis=1)
            edges = np.unique(pairs, axis=0)
            ekey = edges[:, 0] * nv + edges[:, 1]
            fkey = pairs[:, 0] * nv + pairs[:, 1]
            # pairs were stacked [e01 block; e12 block; e20 block]
            face_edges = np.searchsorted(ekey, fkey).reshape(3, len(faces)).T
            return edges, face_edges.astype(np.int64)
        if explicit is not None and np.size(explicit):
            e = np.array(explicit, dtype=np.int64).reshape(-1, 2)
            if e.min() < 0 or e.max() >= nv:
                raise MeshError("edge references a vertex out of range")
            if np.any(e[:, 0] == e[:, 1]):
                raise MeshError("edge with identical endpoints")
            return np.unique(np.sort(e, axis=1), axis=0), np.zeros((0, 3), np.int64)
        return np.zeros((0, 2), np.int64), np.zeros((0, 3), np.int64)

    def _build_face_adjacency(self) -> AdjacencyTable:
        nf = len(self.faces)
        off = self.edge_to_face.offsets
        idx = self.edge_to_face.indices
        counts = np.diff(off)
        two = np.flatnonzero(counts == 2)
        a = idx[off[two]]
        b = idx[off[two] + 1]
        src = [a, b]
        dst = [b, a]
        for e in np.flatnonzero(counts > 2):  # non-manifold edges; rare
            fs = idx[off[e] : off[e + 1]]
            for i in range(len(fs)):
                for j in range(len(fs)):
                    if i != j:
                        src.append(fs[i : i + 1])
                        dst.append(fs[j : j + 1])
        src = np.concatenate(src) if src else np.zeros(0, np.int64)
        dst = np.concatenate(dst) if dst else np.zeros(0, np.int64)
        return _build_csr(src.astype(np.int64), dst.astype(np.int64), nf)

    def _inherit_patch(self, table: AdjacencyTable, count: int) -> np.ndarray:
        patch = np.zeros(count, dtype=np.int64)
        if len(self.faces) and count:
            has = table.degrees() > 0
            first = table.indices[table.offsets[:-1][has]]
            patch[has] = self.patch_of_face[first]
        return patch

    @property
    def num_vertices(self) -> int:
        return len(self.positions)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def vertex_neighbors(self, v: int) -> np.ndarray:
        return self.vertex_to_vertex[v]

    def __repr__(self) -> str:
        return f"Mesh(V={self.num_vertices}, E={self.num_edges}, F={self.num_faces}, patches={self.num_patches})"


def partition_patches(mesh: Mesh, target_faces: int) -> np.ndarray:
    """Assign every face to a patch by greedy BFS over the face adjacency graph.

    Seeds at the lowest-index unassigned face and closes the patch once it
    holds `target_faces` faces, so patches are face-connected wherever the
    mesh permits and never exceed the target.
    """
    if target_faces < 1:
        raise ValueError("target_faces must be at least 1")
    nf = mesh.num_faces
    patch = np.full(nf, -1, dtype=np.int64)
    adj = mesh._face_to_face
    pid = 0
    for seed in range(nf):
        if patch[seed] != -1:
            continue
        patch[seed] = pid
        count = 1
        q = deque([seed])
        while q and count < target_faces:
            f = q.popleft()
            for nb in adj[f]:
                if patch[nb] == -1 and count < target_faces:
                    patch[nb] = pid
                    count += 1
                    q.append(int(nb))
        pid += 1
    return patch


def query(mesh: Mesh, op: Op, handle: ElementHandle, valence_cap: int = DEFAULT_VALENCE_CAP):
    """Ordered local neighborhood of `handle` under access pattern `op`."""
    expected = SOURCE_KIND[op]
    if handle.kind is not expected:
        raise ValueError(f"{op.name} expects a {expected.value} handle, got {handle.kind.value}")
    i = handle.index
    if op is Op.FV:
        return [ElementHandle(Element.VERTEX, int(v)) for v in mesh.faces[i]]
    if op is Op.EV:
        return [ElementHandle(Element.VERTEX, int(v)) for v in mesh.edges[i]]
    if op is Op.V:
        return [handle]
    if op is Op.VV:
        nbrs = mesh.vertex_to_vertex[i]
    elif op is Op.VE:
        nbrs = mesh.vertex_to_edge[i]
    else:
        nbrs = mesh.vertex_to_face[i]
    if len(nbrs) > valence_cap:
        raise ValueError(
            f"vertex {i} has {len(nbrs)} {op.name} neighbors, exceeding the valence cap {valence_cap}"
        )
    kind = TARGET_KIND[op]
    return [ElementHandle(kind, int(j)) for j in nbrs]


def generate_grid(n: int, spacing: float = 1.0, patch_target: int = DEFAULT_PATCH_TARGET) -> Mesh:
    """Regular n x n vertex grid in the x-y plane, each quad split along the
    (i, j) -> (i+1, j+1) diagonal."""
    if n < 2:
        raise ValueError("grid needs at least 2 vertices per side")
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    positions = np.stack(
        [ii.ravel() * spacing, jj.ravel() * spacing, np.zeros(n * n)], axis=1
    )

    def vid(i, j):
        return j * n + i

    faces = []
    for j in range(n - 1):
        for i in range(n - 1):
            v00 = vid(i, j)
            v10 = vid(i + 1, j)
            v11 = vid(i + 1, j + 1)
            v01 = vid(i, j + 1)
            faces.append((v00, v10, v11))
            faces.append((v00, v11, v01))
    return Mesh(positions, np.array(faces, dtype=np.int64), patch_target=patch_target)


_ICO_T = (1.0 + np.sqrt(5.0)) / 2.0

_ICO_VERTS = [
    (-1, _ICO_T, 0), (1, _ICO_T, 0), (-1, -_ICO_T, 0), (1, -_ICO_T, 0),
    (0, -1, _ICO_T), (0, 1, _ICO_T), (0, -1, -_ICO_T), (0, 1, -_ICO_T),
    (_ICO_T, 0, -1), (_ICO_T, 0, 1), (-_ICO_T, 0, -1), (-_ICO_T, 0, 1),
]

_ICO_FACES = [
    (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
    (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
    (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
    (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
]


def generate_icosphere(subdivisions: int, patch_target: int = DEFAULT_PATCH_TARGET) -> Mesh:
    """Unit sphere from an icosahedron with `subdivisions` rounds of 4-way face splits."""
    if subdivisions < 0:
        raise ValueError("subdivisions must be non-negative")
    verts = [np.asarray(v, dtype=np.float64) / np.linalg.norm(v) for v in _ICO_VERTS]
    faces = list(_ICO_FACES)
    for _ in range(subdivisions):
        midpoint: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in midpoint:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        new_faces = []
        for (a, b, c) in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return Mesh(np.array(verts), np.array(faces, dtype=np.int64), patch_target=patch_target)


def load_obj(path, patch_target: int = DEFAULT_PATCH_TARGET) -> Mesh:
    """Read a Wavefront OBJ with `v` and triangular `f` records (1-indexed).

    `f` entries may carry /vt/vn suffixes, which are ignored. Raises MeshError
    with the offending line number on malformed records.
    """
    positions = []
    faces = []
    with open(path, "r") as fh:
        for ln, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens or tokens[0].startswith("#"):
                continue
            rec = tokens[0]
            if rec == "v":
                if len(tokens) < 4:
                    raise MeshError(f"{path}: line {ln}: vertex record needs 3 coordinates")
                try:
                    positions.append([float(t) for t in tokens[1:4]])
                except ValueError as exc:
                    raise MeshError(f"{path}: line {ln}: bad vertex coordinate: {exc}") from None
            elif rec == "f":
                refs = tokens[1:]
                if len(refs) != 3:
                    raise MeshError(f"{path}: line {ln}: non-triangular face with {len(refs)} vertices")
                idx = []
                for r in refs:
                    head = r.split("/")[0]
                    try:
                        k = int(head)
                    except ValueError:
                        raise MeshError(f"{path}: line {ln}: bad face index {head!r}") from None
                    if k < 1:
                        raise MeshError(f"{path}: line {ln}: face indices must be positive (1-indexed)")
                    idx.append(k - 1)
                faces.append(idx)
            # other record types (vn, vt, o, g, s, usemtl, mtllib, ...) are skipped
    if not faces:
        raise MeshError(f"{path}: no faces")
    try:
        return Mesh(np.array(positions), np.array(faces, dtype=np.int64), patch_target=patch_target)
    except MeshError as exc:
        raise MeshError(f"{path}: {exc}") from None


def save_obj(path, positions, faces) -> None:
    """Write vertices then faces, 1-indexed, 6 significant digits."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    with open(path, "w") as fh:
        for p in positions:
            fh.write(f"v {p[0]:.6g} {p[1]:.6g} {p[2]:.6g}\n")
        for f in faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
