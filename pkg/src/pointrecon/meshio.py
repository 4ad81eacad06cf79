"""Triangle meshes and binary little-endian PLY files."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fileio import atomic_write_bytes


class PlyError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (N, 3) meters
    triangles: np.ndarray  # (M, 3) int
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle indices out of range")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def edges(self) -> np.ndarray:
        """Undirected edges (E, 2), one row per triangle side (with repeats)."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.sort(e, axis=1)

    def euler_characteristic(self) -> int:
        used = np.unique(self.triangles)
        n_edges = len(np.unique(self.edges(), axis=0))
        return int(len(used) - n_edges + len(self.triangles))

    def translated(self, t) -> "TriangleMesh":
        return TriangleMesh(self.vertices + np.asarray(t, dtype=float), self.triangles.copy())

    @staticmethod
    def concatenate(meshes) -> "TriangleMesh":
        verts, tris, off = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + off)
            off += len(m.vertices)
        return TriangleMesh(np.concatenate(verts), np.concatenate(tris))


def weld(mesh: TriangleMesh, tol: float = 1e-7) -> TriangleMesh:
    """Merge vertices closer than ``tol`` (grid-hash) and drop triangles that collapse."""
    if len(mesh.vertices) == 0:
        return TriangleMesh.empty()
    key = np.round(mesh.vertices / tol).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    tris = inverse[mesh.triangles]
    ok = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
    out = TriangleMesh(mesh.vertices[first], tris[ok])
    ok = out.areas() > 0
    return compact(TriangleMesh(out.vertices, out.triangles[ok]))


def compact(mesh: TriangleMesh) -> TriangleMesh:
    """Drop vertices no triangle references."""
    used = np.unique(mesh.triangles)
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(mesh.vertices[used], remap[mesh.triangles])


# ---------------------------------------------------------------- PLY


def ply_bytes(mesh: TriangleMesh) -> bytes:
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {len(mesh.triangles)}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    ).encode("ascii")
    verts = np.ascontiguousarray(mesh.vertices, dtype="<f4").tobytes()
    faces = np.zeros(len(mesh.triangles), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    faces["n"] = 3
    faces["idx"] = mesh.triangles
    return header + verts + faces.tobytes()


def write_ply(mesh: TriangleMesh, path) -> None:
    atomic_write_bytes(path, ply_bytes(mesh))


def parse_ply(buf: bytes) -> TriangleMesh:
    end = buf.find(b"end_header\n")
    if not buf.startswith(b"ply\n") or end < 0:
        raise PlyError("byte 0: not a PLY file (missing 'ply' magic or 'end_header')")
    lines = buf[:end].decode("ascii", errors="replace").splitlines()
    body = end + len(b"end_header\n")
    if "format binary_little_endian 1.0" not in lines:
        raise PlyError("byte 0: only 'binary_little_endian 1.0' PLY files are supported")
    n_vert = n_face = None
    vprops = []
    current = None
    for line in lines:
        parts = line.split()
        if parts[:1] == ["element"]:
            current = parts[1]
            if current == "vertex":
                n_vert = int(parts[2])
            elif current == "face":
                n_face = int(parts[2])
            else:
                raise PlyError(f"unsupported element {current!r}")
        elif parts[:1] == ["property"] and current == "vertex":
            vprops.append((parts[1], parts[2]))
        elif parts[:1] == ["property"] and current == "face":
            if parts[1:4] != ["list", "uchar", "int"]:
                raise PlyError(f"unsupported face property {' '.join(parts[1:])!r}")
    if n_vert is None or n_face is None:
        raise PlyError("header lacks vertex or face element")
    if [p[1] for p in vprops[:3]] != ["x", "y", "z"] or any(t != "float" for t, _ in vprops):
        raise PlyError("vertex properties must be float x, y, z (optionally more floats)")
    stride = 4 * len(vprops)
    vbytes = stride * n_vert
    if len(buf) < body + vbytes:
        got = (len(buf) - body) // stride
        raise PlyError(
            f"byte {len(buf)}: truncated vertex block, expected {n_vert} vertices, found {got} complete"
        )
    verts = np.frombuffer(buf, "<f4", n_vert * len(vprops), body).reshape(n_vert, len(vprops))[:, :3]
    off = body + vbytes
    face_size = 1 + 12
    if len(buf) < off + face_size * n_face:
        got = (len(buf) - off) // face_size
        raise PlyError(f"byte {len(buf)}: truncated face block, expected {n_face} faces, found {got} complete")
    faces = np.frombuffer(buf, dtype=[("n", "u1"), ("idx", "<i4", (3,))], count=n_face, offset=off)
    bad = np.nonzero(faces["n"] != 3)[0]
    if len(bad):
        raise PlyError(f"byte {off + face_size * bad[0]}: face {bad[0]} is not a triangle")
    tris = faces["idx"].astype(np.int64)
    if n_face and (tris.min() < 0 or tris.max() >= n_vert):
        raise PlyError(f"byte {off}: face indices out of range for {n_vert} vertices")
    return TriangleMesh(verts.astype(float), tris)


def read_ply(path) -> TriangleMesh:
    with open(path, "rb") as f:
        return parse_ply(f.read())


def mesh_io(mesh_or_path, path=None, direction: str = "read"):
    """``mesh_io(path)`` reads, ``mesh_io(mesh, path, "write")`` writes."""
    if direction == "write":
        write_ply(mesh_or_path, path)
        return path
    if direction == "read":
        return read_ply(mesh_or_path if path is None else path)
    raise ValueError("direction must be 'read' or 'write'")
