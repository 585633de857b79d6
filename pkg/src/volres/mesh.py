"""Triangle meshes: OFF parsing/writing, normalization and rotation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import FormatError, GeometryError, MeshIndexError, ParseError, RotationSpecError

# bounding-box edge fill ratio used by normalize_mesh
FILL = 0.95


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) == 0:
            raise GeometryError("mesh has no faces")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise GeometryError(
                f"face index out of range [0, {len(self.vertices)}): "
                f"min {self.faces.min()}, max {self.faces.max()}"
            )

    def triangles(self) -> np.ndarray:
        """(F, 3, 3) array of corner coordinates."""
        return self.vertices[self.faces]


def _strip(line: str) -> str:
    i = line.find("#")
    return (line if i < 0 else line[:i]).strip()


def parse_off(data: Union[bytes, str]) -> TriangleMesh:
    """Parse OFF text. Polygons are fan-triangulated; the ModelNet quirk where
    the counts share the header line (``OFF490 518 0``) is accepted."""
    if isinstance(data, bytes):
        data = data.decode("utf-8", errors="replace")
    lines = [(no, _strip(raw)) for no, raw in enumerate(data.splitlines(), start=1)]
    lines = [(no, s) for no, s in lines if s]
    if not lines or not lines[0][1].startswith("OFF"):
        where = lines[0][0] if lines else 1
        raise FormatError("missing OFF header", where)
    it = iter(lines)
    no, header = next(it)
    rest = header[3:].strip()
    if not rest:
        try:
            no, rest = next(it)
        except StopIteration:
            raise FormatError("missing vertex/face counts", no) from None

    def ints(tokens, lineno):
        try:
            return [int(t) for t in tokens]
        except ValueError as e:
            raise ParseError(f"expected integers: {e}", lineno) from None

    counts = ints(rest.split(), no)
    if len(counts) < 2:
        raise ParseError("counts line needs at least 'V F'", no)
    nv, nf = counts[0], counts[1]
    if nv < 0 or nf < 0:
        raise ParseError(f"negative counts {nv} {nf}", no)

    verts = np.empty((nv, 3), dtype=np.float64)
    for i in range(nv):
        try:
            no, s = next(it)
        except StopIteration:
            raise FormatError(f"expected {nv} vertices, found {i}", no) from None
        tok = s.split()
        if len(tok) < 3:
            raise ParseError(f"vertex line needs 3 coordinates, got {len(tok)}", no)
        try:
            verts[i] = [float(t) for t in tok[:3]]
        except ValueError as e:
            raise ParseError(f"bad vertex coordinate: {e}", no) from None

    tris = []
    for i in range(nf):
        try:
            no, s = next(it)
        except StopIteration:
            raise FormatError(f"expected {nf} faces, found {i}", no) from None
        tok = ints(s.split()[:1], no)
        n = tok[0]
        idx = ints(s.split()[1 : 1 + n], no)
        if n < 3 or len(idx) != n:
            raise ParseError(f"face needs >= 3 indices matching its count, got {s!r}", no)
        bad = [j for j in idx if j < 0 or j >= nv]
        if bad:
            raise MeshIndexError(f"vertex index {bad[0]} out of range [0, {nv})", no)
        for j in range(1, n - 1):
            tris.append((idx[0], idx[j], idx[j + 1]))
    if not tris:
        raise FormatError("mesh has no faces", no)
    return TriangleMesh(verts, np.array(tris, dtype=np.int64))


def read_off(path) -> TriangleMesh:
    return parse_off(Path(path).read_bytes())


def write_off(mesh: TriangleMesh) -> str:
    """Serialize with shortest round-trip float formatting."""
    out = ["OFF", f"{len(mesh.vertices)} {len(mesh.faces)} 0"]
    out += [" ".join(repr(float(c)) for c in v) for v in mesh.vertices]
    out += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
    return "\n".join(out) + "\n"


def normalize_mesh(mesh: TriangleMesh, extent: float = 1.0, fill: float = FILL) -> TriangleMesh:
    """Center the bounding box at the origin and scale so its longest edge is
    ``fill * extent``."""
    v = mesh.vertices
    if len(v) == 0:
        raise GeometryError("cannot normalize a mesh without vertices")
    lo, hi = v.min(axis=0), v.max(axis=0)
    span = float((hi - lo).max())
    if not span > 0 or not math.isfinite(span):
        raise GeometryError(f"degenerate mesh: bounding-box extent {span}")
    center = (lo + hi) / 2.0
    scale = fill * extent / span
    return TriangleMesh((v - center) * scale, mesh.faces.copy())


@dataclass(frozen=True)
class RotationSpec:
    axis: tuple
    angle: float

    def __post_init__(self):
        a = np.asarray(self.axis, dtype=np.float64)
        if a.shape != (3,):
            raise RotationSpecError(f"rotation axis must be a 3-vector, got shape {a.shape}")
        if abs(np.linalg.norm(a) - 1.0) > 1e-12:
            raise RotationSpecError(f"rotation axis must be unit length, |axis| = {np.linalg.norm(a)!r}")
        object.__setattr__(self, "axis", tuple(float(c) for c in a))

    def matrix(self) -> np.ndarray:
        """Axis-angle (Rodrigues) rotation matrix."""
        u = np.asarray(self.axis)
        c, s = math.cos(self.angle), math.sin(self.angle)
        cross = np.array([[0.0, -u[2], u[1]], [u[2], 0.0, -u[0]], [-u[1], u[0], 0.0]])
        return c * np.eye(3) + s * cross + (1.0 - c) * np.outer(u, u)


def random_rotation(rng: np.random.Generator) -> RotationSpec:
    """Uniform axis on the sphere, uniform angle in [0, 2 pi)."""
    while True:
        g = rng.standard_normal(3)
        n = np.linalg.norm(g)
        if n > 1e-8:
            break
    axis = g / n
    return RotationSpec(tuple(axis), float(rng.uniform(0.0, 2.0 * math.pi)))


def rotate_mesh(mesh: TriangleMesh, rot: RotationSpec) -> TriangleMesh:
    if rot.angle == 0.0:
        return TriangleMesh(mesh.vertices.copy(), mesh.faces.copy())
    return TriangleMesh(mesh.vertices @ rot.matrix().T, mesh.faces.copy())
