"""Point-cloud and mesh file formats, surface sampling and dataset manifests."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class EmptyCloudError(ValueError):
    pass


class DegenerateMeshError(ValueError):
    pass


@dataclass
class RawPointCloud:
    points: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            pts = pts.reshape(-1, 3)
        if len(pts) == 0:
            raise EmptyCloudError(f"point cloud {self.source_id!r} has no points")
        if not np.all(np.isfinite(pts)):
            raise ValueError(f"point cloud {self.source_id!r} contains non-finite coordinates")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def _lines(data: bytes | str):
    text = data.decode("ascii", errors="replace") if isinstance(data, (bytes, bytearray)) else data
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def _floats(tokens, lineno, n=None):
    try:
        vals = [float(t) for t in (tokens if n is None else tokens[:n])]
    except ValueError:
        raise ParseError(f"non-numeric token in {' '.join(tokens)!r}", lineno) from None
    if not all(np.isfinite(vals)):
        raise ParseError("non-finite coordinate", lineno)
    return vals


def _ints(tokens, lineno):
    try:
        return [int(t) for t in tokens]
    except ValueError:
        raise ParseError(f"non-integer token in {' '.join(tokens)!r}", lineno) from None


def parse_off(data: bytes | str) -> TriangleMesh:
    """ASCII OFF. Polygons with more than three vertices are fan-triangulated."""
    it = _lines(data)
    try:
        lineno, tokens = next(it)
    except StopIteration:
        raise ParseError("empty OFF file") from None
    if tokens[0].upper().startswith("OFF"):
        rest = tokens[0][3:]
        tokens = ([rest] if rest else []) + tokens[1:]
        if not tokens:
            try:
                lineno, tokens = next(it)
            except StopIteration:
                raise ParseError("missing counts line", lineno) from None
    if len(tokens) < 2:
        raise ParseError("counts line must hold 'V F [E]'", lineno)
    nv, nf = _ints(tokens[:2], lineno)
    if nv < 0 or nf < 0:
        raise ParseError("negative element count", lineno)
    verts = []
    for _ in range(nv):
        try:
            lineno, tokens = next(it)
        except StopIteration:
            raise ParseError(f"expected {nv} vertices, file ended after {len(verts)}", lineno) from None
        if len(tokens) < 3:
            raise ParseError("vertex line needs 3 coordinates", lineno)
        verts.append(_floats(tokens, lineno, 3))
    faces = []
    for _ in range(nf):
        try:
            lineno, tokens = next(it)
        except StopIteration:
            raise ParseError(f"expected {nf} faces", lineno) from None
        vals = _ints(tokens, lineno)
        k = vals[0]
        if k < 3 or len(vals) < k + 1:
            raise ParseError(f"face needs at least 3 vertex indices, got {vals[1:]}", lineno)
        idx = vals[1:k + 1]
        for i in idx:
            if i < 0 or i >= nv:
                raise ParseError(f"vertex index {i} out of range for {nv} vertices", lineno)
        faces.extend((idx[0], idx[j], idx[j + 1]) for j in range(1, k - 1))
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3))


def sample_mesh_surface(mesh: TriangleMesh, count: int, seed: int) -> RawPointCloud:
    """Area-weighted triangle choice, then uniform barycentric sampling inside it."""
    if count < 1:
        raise ValueError("count must be >= 1")
    areas = mesh.triangle_areas()
    total = areas.sum()
    if not total > 0:
        raise DegenerateMeshError("mesh has zero total surface area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=count, p=areas / total)
    u = rng.random(count)
    v = rng.random(count)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    a, b, c = (mesh.vertices[mesh.faces[tri, k]] for k in range(3))
    pts = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    return RawPointCloud(pts, "mesh-sample")


def parse_xyz(data: bytes | str, source_id: str = "") -> RawPointCloud:
    pts = []
    for lineno, tokens in _lines(data):
        if len(tokens) < 3:
            raise ParseError("expected at least 3 columns", lineno)
        pts.append(_floats(tokens, lineno, 3))
    if not pts:
        raise EmptyCloudError("XYZ input holds no points")
    return RawPointCloud(np.array(pts), source_id)


def parse_ply_ascii(data: bytes | str, source_id: str = "") -> RawPointCloud:
    it = _lines(data)
    try:
        lineno, tokens = next(it)
    except StopIteration:
        raise ParseError("empty PLY file") from None
    if tokens != ["ply"]:
        raise ParseError("missing 'ply' magic", lineno)
    elements: list[tuple[str, int, list[str]]] = []
    fmt = None
    for lineno, tokens in it:
        key = tokens[0]
        if key == "format":
            fmt = tokens[1] if len(tokens) > 1 else None
        elif key == "element":
            if len(tokens) != 3:
                raise ParseError("malformed element line", lineno)
            elements.append((tokens[1], _ints(tokens[2:3], lineno)[0], []))
        elif key == "property":
            if not elements:
                raise ParseError("property before any element", lineno)
            elements[-1][2].append(tokens[-1])
        elif key == "end_header":
            break
        elif key in ("comment", "obj_info"):
            continue
        else:
            raise ParseError(f"unexpected header keyword {key!r}", lineno)
    else:
        raise ParseError("missing end_header", lineno)
    if fmt != "ascii":
        raise ParseError(f"only ASCII PLY is supported, got format {fmt!r}")
    names = [e[0] for e in elements]
    if "vertex" not in names:
        raise ParseError("PLY header has no vertex element")
    pts = None
    for name, count, props in elements:
        if name != "vertex":
            for _ in range(count):
                next(it, None)
            continue
        try:
            cols = [props.index(c) for c in ("x", "y", "z")]
        except ValueError:
            raise ParseError("vertex element lacks x, y, z properties") from None
        if count == 0:
            raise EmptyCloudError("PLY vertex element is empty")
        rows = []
        for _ in range(count):
            try:
                lineno, tokens = next(it)
            except StopIteration:
                raise ParseError(f"expected {count} vertex records, got {len(rows)}") from None
            if len(tokens) < len(props):
                raise ParseError("vertex record shorter than its property list", lineno)
            vals = _floats([tokens[c] for c in cols], lineno)
            rows.append(vals)
        pts = np.array(rows)
        break
    return RawPointCloud(pts, source_id)


def _fmt(x: float) -> str:
    s = repr(float(x))
    return s[:-2] if s.endswith(".0") else s


def format_xyz(points: np.ndarray) -> str:
    return "".join(f"{_fmt(x)} {_fmt(y)} {_fmt(z)}\n" for x, y, z in np.asarray(points, dtype=np.float64))


def write_xyz(cloud: RawPointCloud | np.ndarray, path) -> None:
    """Shortest round-trip float text, so parse_xyz restores coordinates exactly."""
    pts = cloud.points if isinstance(cloud, RawPointCloud) else np.asarray(cloud)
    Path(path).write_text(format_xyz(pts))


def read_cloud(path, mesh_samples: int = 2048, seed: int = 0) -> RawPointCloud:
    """Load .xyz/.txt, .ply or .off (meshes are surface-sampled)."""
    path = Path(path)
    data = path.read_bytes()
    ext = path.suffix.lower()
    if ext == ".ply":
        return parse_ply_ascii(data, str(path))
    if ext == ".off":
        cloud = sample_mesh_surface(parse_off(data), mesh_samples, seed)
        cloud.source_id = str(path)
        return cloud
    return parse_xyz(data, str(path))


# ---------------------------------------------------------------- manifests

SPLITS = ("train", "test")


@dataclass
class ManifestEntry:
    path: str
    label: Optional[str] = None
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.path in seen:
                raise ValueError(f"duplicate manifest path {e.path!r}")
            seen.add(e.path)

    def __len__(self) -> int:
        return len(self.entries)

    def split(self, name: str) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if e.split == name], self.seed)

    def labels(self) -> list[str]:
        return sorted({e.label for e in self.entries if e.label is not None})

    def dumps(self) -> str:
        return "".join(json.dumps({"path": e.path, "label": e.label, "split": e.split}) + "\n" for e in self.entries)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str, seed: int = 0) -> "DatasetManifest":
        entries = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                entries.append(ManifestEntry(d["path"], d.get("label"), d.get("split", "train")))
            except (json.JSONDecodeError, KeyError, ValueError) as e:
                raise ParseError(f"bad manifest record: {e}", lineno) from None
        return cls(entries, seed)

    @classmethod
    def load(cls, path, seed: int = 0) -> "DatasetManifest":
        m = cls.loads(Path(path).read_text(), seed)
        base = Path(path).parent
        for e in m.entries:
            if not os.path.isabs(e.path):
                e.path = str(base / e.path)
        return m
