"""Mesh and point ingestion plus synthetic labelled shapes with analytic normals."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud, normalize_unit_sphere

SHAPE_KINDS = ("sphere", "cube", "torus", "cylinder")
TORUS_R, TORUS_r = 0.7, 0.3
CYL_RADIUS, CYL_HALF_HEIGHT = 0.6, 0.8


class OffParseError(ValueError):
    """Structured OFF parse failure; ``line`` is 1-based (0 when unknown)."""

    def __init__(self, message: str, line: int = 0):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.reason = message


class OffHeaderError(OffParseError):
    pass


class OffCountError(OffParseError):
    pass


class OffTokenError(OffParseError):
    pass


class OffIndexError(OffParseError):
    pass


class MeshError(ValueError):
    pass


class PointsFormatError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass
class Mesh:
    vertices: np.ndarray   # [V, 3]
    faces: np.ndarray      # [F, 3]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError("face index out of range")


# --------------------------------------------------------------------------
# OFF


def _lines(text: str):
    for no, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].split()
        if body:
            yield no, body


def _float(tok: str, line: int) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise OffTokenError(f"non-numeric token {tok!r}", line) from None
    if not np.isfinite(v):
        raise OffTokenError(f"non-finite value {tok!r}", line)
    return v


def _int(tok: str, line: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise OffTokenError(f"expected an integer, got {tok!r}", line) from None


def parse_off(data: bytes | str) -> Mesh:
    """Parse OFF text; polygons are fan-triangulated.

    Accepts the ModelNet variant where the counts are glued to the header
    (``OFF4 4 0``).
    """
    text = data.decode("utf-8", errors="replace") if isinstance(data, (bytes, bytearray)) else data
    lines = _lines(text)
    first = next(lines, None)
    if first is None or not first[1][0].startswith("OFF"):
        raise OffHeaderError("missing OFF header", first[0] if first else 0)
    line_no, toks = first
    glued = toks[0][3:]
    counts = ([glued] if glued else []) + toks[1:]
    if not counts:
        nxt = next(lines, None)
        if nxt is None:
            raise OffCountError("missing vertex/face counts", line_no)
        line_no, counts = nxt
    if len(counts) < 2:
        raise OffCountError("expected vertex, face (and edge) counts", line_no)
    nv, nf = _int(counts[0], line_no), _int(counts[1], line_no)
    if nv < 0 or nf < 0:
        raise OffCountError("negative element count", line_no)

    verts = []
    for i in range(nv):
        nxt = next(lines, None)
        if nxt is None:
            raise OffCountError(f"expected {nv} vertices, found {i}", line_no)
        line_no, toks = nxt
        if len(toks) < 3:
            raise OffTokenError("vertex needs 3 coordinates", line_no)
        verts.append([_float(t, line_no) for t in toks[:3]])

    tris = []
    for i in range(nf):
        nxt = next(lines, None)
        if nxt is None:
            raise OffCountError(f"expected {nf} faces, found {i}", line_no)
        line_no, toks = nxt
        c = _int(toks[0], line_no)
        if c < 3 or len(toks) < c + 1:
            raise OffCountError(f"face declares {c} vertices but lists {len(toks) - 1}", line_no)
        idx = [_int(t, line_no) for t in toks[1:c + 1]]
        for v in idx:
            if not 0 <= v < nv:
                raise OffIndexError(f"vertex index {v} out of range [0, {nv})", line_no)
        tris.extend([idx[0], idx[j], idx[j + 1]] for j in range(1, c - 1))
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3))


def write_off(mesh: Mesh) -> str:
    out = ["OFF", f"{len(mesh.vertices)} {len(mesh.faces)} 0"]
    out += [" ".join(repr(float(c)) for c in v) for v in mesh.vertices]
    out += ["3 " + " ".join(str(int(i)) for i in f) for f in mesh.faces]
    return "\n".join(out) + "\n"


def triangle_areas(mesh: Mesh) -> np.ndarray:
    a, b, c = (mesh.vertices[mesh.faces[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_surface(mesh: Mesh, n_points: int, rng: np.random.Generator, return_details: bool = False):
    """Area-weighted uniform surface samples with face normals."""
    areas = triangle_areas(mesh)
    total = areas.sum()
    if len(mesh.faces) == 0 or not total > 0:
        raise MeshError("mesh has zero surface area")
    tri = rng.choice(len(areas), size=n_points, p=areas / total)
    r1, r2 = rng.random(n_points), rng.random(n_points)
    s = np.sqrt(r1)
    bary = np.stack([1.0 - s, s * (1.0 - r2), s * r2], axis=1)
    corners = mesh.vertices[mesh.faces[tri]]                 # [P, 3, 3]
    pts = (bary[:, :, None] * corners).sum(axis=1)
    normals = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    cloud = PointCloud(pts, normals=normals)
    if return_details:
        return cloud, tri, bary
    return cloud


# --------------------------------------------------------------------------
# synthetic shapes


def _sphere(n, rng):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v, v.copy()


def _cube(n, rng):
    face = rng.integers(0, 6, size=n)
    axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3))
    rows = np.arange(n)
    pts[rows, axis] = sign
    normals = np.zeros((n, 3))
    normals[rows, axis] = sign
    return pts, normals


def _torus(n, rng, big=TORUS_R, small=TORUS_r):
    theta = np.empty(0)
    while theta.size < n:
        cand = rng.uniform(0, 2 * np.pi, size=2 * n)
        keep = rng.random(2 * n) < (big + small * np.cos(cand)) / (big + small)
        theta = np.concatenate([theta, cand[keep]])
    theta = theta[:n]
    phi = rng.uniform(0, 2 * np.pi, size=n)
    ring = big + small * np.cos(theta)
    pts = np.stack([ring * np.cos(phi), ring * np.sin(phi), small * np.sin(theta)], axis=1)
    normals = np.stack([np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), np.sin(theta)], axis=1)
    return pts, normals


def _cylinder(n, rng, radius=CYL_RADIUS, half=CYL_HALF_HEIGHT):
    side, cap = 2 * np.pi * radius * 2 * half, np.pi * radius ** 2
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    phi = rng.uniform(0, 2 * np.pi, size=n)
    rad = radius * np.sqrt(rng.random(n))
    z = rng.uniform(-half, half, size=n)
    pts = np.empty((n, 3))
    normals = np.zeros((n, 3))
    on_side = part == 0
    pts[on_side] = np.stack([radius * np.cos(phi), radius * np.sin(phi), z], axis=1)[on_side]
    normals[on_side] = np.stack([np.cos(phi), np.sin(phi), np.zeros(n)], axis=1)[on_side]
    for code, sign in ((1, 1.0), (2, -1.0)):
        m = part == code
        pts[m] = np.stack([rad * np.cos(phi), rad * np.sin(phi), np.full(n, sign * half)], axis=1)[m]
        normals[m, 2] = sign
    return pts, normals


GENERATORS = {"sphere": _sphere, "cube": _cube, "torus": _torus, "cylinder": _cylinder}


def torus_implicit(p: np.ndarray, big=TORUS_R, small=TORUS_r) -> np.ndarray:
    q = np.sqrt(p[..., 0] ** 2 + p[..., 1] ** 2) - big
    return q ** 2 + p[..., 2] ** 2 - small ** 2


def synth_shape(kind: str, n_points: int, rng: np.random.Generator, jitter: float = 0.15,
                rotate: bool = True) -> PointCloud:
    """One shape instance: random per-axis stretch and rotation about z, unit-sphere normalised."""
    if kind not in GENERATORS:
        raise ValueError(f"unknown shape kind {kind!r}; choose from {SHAPE_KINDS}")
    pts, normals = GENERATORS[kind](n_points, rng)
    stretch = rng.uniform(1.0 - jitter, 1.0 + jitter, size=3) if jitter else np.ones(3)
    pts = pts * stretch
    normals = normals / stretch
    if rotate:
        a = rng.uniform(0, 2 * np.pi)
        rot = np.array([[np.cos(a), -np.sin(a), 0.0], [np.sin(a), np.cos(a), 0.0], [0.0, 0.0, 1.0]])
        pts, normals = pts @ rot.T, normals @ rot.T
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return normalize_unit_sphere(PointCloud(pts, normals=normals))


@dataclass
class Dataset:
    clouds: list[PointCloud]
    labels: np.ndarray
    split: str = "train"
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.clouds):
            raise DatasetError("one label per cloud required")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DatasetError("label outside class table")

    def __len__(self) -> int:
        return len(self.clouds)

    def coords(self, idx=None) -> np.ndarray:
        idx = range(len(self.clouds)) if idx is None else idx
        return np.stack([self.clouds[i].coords for i in idx])

    def normals(self, idx=None) -> np.ndarray:
        idx = range(len(self.clouds)) if idx is None else idx
        return np.stack([self.clouds[i].normals for i in idx])


def synth_shapes(kinds, per_class: int, n_points: int, rng: np.random.Generator,
                 split: str = "train") -> Dataset:
    kinds = list(kinds)
    clouds, labels = [], []
    for _ in range(per_class):
        for label, kind in enumerate(kinds):
            cloud = synth_shape(kind, n_points, rng)
            cloud.labels = label
            clouds.append(cloud)
            labels.append(label)
    return Dataset(clouds, np.array(labels), split, kinds)


def synth_splits(kinds=SHAPE_KINDS, n_train: int = 200, n_test: int = 80, n_points: int = 256,
                 seed: int = 0) -> tuple[Dataset, Dataset]:
    """Disjoint train/test sets; totals are split evenly across ``kinds``."""
    kinds = list(kinds)
    root = np.random.SeedSequence(seed)
    tr_seq, te_seq = root.spawn(2)
    train = synth_shapes(kinds, n_train // len(kinds), n_points, np.random.default_rng(tr_seq), "train")
    test = synth_shapes(kinds, n_test // len(kinds), n_points, np.random.default_rng(te_seq), "test")
    return train, test


# --------------------------------------------------------------------------
# ModelNet-style directory trees: root/<class>/<split>/*.off


def _file_seed(path: Path, n_points: int) -> int:
    digest = hashlib.sha256(path.read_bytes() + str(n_points).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def load_dataset(root, n_points: int, split: str = "train", classes=None) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if classes is not None:
        wanted = set(classes)
        names = [n for n in names if n in wanted]
    if not names:
        raise DatasetError(f"no classes found under {root}")
    clouds, labels = [], []
    for label, name in enumerate(names):
        files = sorted((root / name / split).glob("*.off"))
        if not files:
            raise DatasetError(f"class {name!r} has no {split} files")
        for f in files:
            mesh = parse_off(f.read_bytes())
            cloud = normalize_unit_sphere(sample_surface(mesh, n_points, np.random.default_rng(_file_seed(f, n_points))))
            cloud.labels = label
            clouds.append(cloud)
            labels.append(label)
    return Dataset(clouds, np.array(labels), split, names)


# --------------------------------------------------------------------------
# PTS text format: "PTS <P> <flags>" then "x y z [nx ny nz] [label]" per line


def write_points(path, cloud: PointCloud) -> None:
    has_n = cloud.normals is not None
    labels = cloud.labels
    if labels is not None and np.ndim(labels) == 0:
        labels = np.full(len(cloud), int(labels))
    flags = ("n" if has_n else "") + ("l" if labels is not None else "") or "-"
    lines = [f"PTS {len(cloud)} {flags}"]
    for i, p in enumerate(cloud.coords):
        row = [f"{v:.9g}" for v in p]
        if has_n:
            row += [f"{v:.9g}" for v in cloud.normals[i]]
        if labels is not None:
            row.append(str(int(labels[i])))
        lines.append(" ".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_points(path) -> PointCloud:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise PointsFormatError("empty file")
    head = lines[0].split()
    if len(head) != 3 or head[0] != "PTS":
        raise PointsFormatError("header must be 'PTS <P> <flags>'")
    try:
        n = int(head[1])
    except ValueError:
        raise PointsFormatError(f"bad point count {head[1]!r}") from None
    flags = head[2]
    if set(flags) - set("nl-"):
        raise PointsFormatError(f"unknown flags {flags!r}")
    has_n, has_l = "n" in flags, "l" in flags
    width = 3 + 3 * has_n + has_l
    body = [ln.split() for ln in lines[1:] if ln.strip()]
    if len(body) < n:
        raise PointsFormatError(f"truncated: expected {n} points, found {len(body)}")
    if n < 1:
        raise PointsFormatError("a cloud needs at least one point")
    rows = body[:n]
    for i, r in enumerate(rows):
        if len(r) != width:
            raise PointsFormatError(f"point {i}: expected {width} columns for flags {flags!r}, got {len(r)}")
    try:
        vals = np.array([[float(t) for t in r[:3 + 3 * has_n]] for r in rows])
        labels = np.array([int(r[-1]) for r in rows]) if has_l else None
    except ValueError as exc:
        raise PointsFormatError(str(exc)) from None
    return PointCloud(vals[:, :3], labels=labels, normals=vals[:, 3:6] if has_n else None)
