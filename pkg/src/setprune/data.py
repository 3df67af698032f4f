"""Point-set data pipeline.

Synthetic parametric shape families (sphere, cube, cylinder, torus,
cone) are triangulated and sampled uniformly by surface area, giving a
desk-scale multi-class dataset for the classifier; OFF meshes can be
loaded for runs on external data.  Point sets round-trip through a
compact binary format (PSET, f32 on disk / f64 in computation) and a
plain-text manifest lists (path, label, split) per sample.

Every generator is a pure function of (spec, n, seed).
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, GeometryError, ParameterError

FAMILIES = ("sphere", "cube", "cylinder", "torus", "cone")

_PSET_MAGIC = b"PSET"
_PSET_VERSION = 1
_UNLABELED = 0xFFFFFFFF


@dataclass(frozen=True)
class PointSet:
    """A set of element embeddings: one row of ``coords`` per element.

    ``ids`` are stable element identifiers (selection traces refer to
    them); ``label`` is a class index, or -1 for unlabeled sets.
    """

    ids: np.ndarray
    coords: np.ndarray
    label: int = -1
    name: str = ""

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[0] < 1:
            raise DataError(f"coords must be (n>=1, d), got {coords.shape}")
        if ids.shape != (coords.shape[0],):
            raise DataError(f"ids shape {ids.shape} does not match n={coords.shape[0]}")
        if len(np.unique(ids)) != len(ids):
            raise DataError("element ids must be unique")
        if not np.all(np.isfinite(coords)):
            raise DataError("coords must be finite")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "coords", coords)

    @classmethod
    def from_coords(cls, coords, label: int = -1, name: str = "") -> "PointSet":
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim != 2:
            raise DataError(f"coords must be 2-D, got ndim={coords.ndim}")
        return cls(np.arange(coords.shape[0]), coords, label, name)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def d(self) -> int:
        return self.coords.shape[1]

    def rows_for(self, keep) -> np.ndarray:
        """Row indices for the given element ids (ids must all exist)."""
        from .errors import UnknownIdError

        sorted_ids, order = self._index()
        keep = np.asarray(keep, dtype=np.int64)
        pos = np.searchsorted(sorted_ids, keep)
        pos_clipped = np.minimum(pos, sorted_ids.size - 1)
        bad = sorted_ids[pos_clipped] != keep
        if np.any(bad):
            raise UnknownIdError(f"unknown element ids {keep[bad][:5].tolist()}")
        return order[pos_clipped]

    def _index(self):
        cached = getattr(self, "_id_order", None)
        if cached is None:
            order = np.argsort(self.ids, kind="stable")
            cached = (self.ids[order], order)
            object.__setattr__(self, "_id_order", cached)
        return cached


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray     # (F, 3) vertex indices

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise FormatError(f"vertices must be (V, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise FormatError(f"faces must be (F, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise FormatError("face indices out of vertex range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    def face_areas(self) -> np.ndarray:
        a = self.vertices[self.faces[:, 0]]
        b = self.vertices[self.faces[:, 1]]
        c = self.vertices[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def cleaned(self, min_area: float = 1e-14) -> "TriangleMesh":
        """Drop degenerate (zero-area) faces."""
        keep = self.face_areas() > min_area
        return TriangleMesh(self.vertices, self.faces[keep])


@dataclass(frozen=True)
class ShapeSpec:
    """Parametric shape family with positive scale/aspect multipliers."""

    family: str
    scale: float = 1.0
    aspect: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ParameterError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        if not (0 < self.scale <= 100) or not (0 < self.aspect <= 100):
            raise ParameterError(
                f"scale/aspect must be in (0, 100], got scale={self.scale} aspect={self.aspect}"
            )


# ---------------------------------------------------------------------------
# parametric meshes
# ---------------------------------------------------------------------------

def _grid_faces(nu: int, nv: int, wrap_u: bool, wrap_v: bool):
    """Quad grid (nu x nv vertices) fan-split into triangles."""
    faces = []
    umax = nu if wrap_u else nu - 1
    vmax = nv if wrap_v else nv - 1
    for i in range(umax):
        i2 = (i + 1) % nu
        for j in range(vmax):
            j2 = (j + 1) % nv
            a, b = i * nv + j, i2 * nv + j
            c, d = i2 * nv + j2, i * nv + j2
            faces.append((a, b, c))
            faces.append((a, c, d))
    return faces


def _sphere_mesh(radius: float, rings: int = 18, segments: int = 28) -> TriangleMesh:
    verts = [(0.0, 0.0, radius)]
    for i in range(1, rings):
        phi = np.pi * i / rings
        for j in range(segments):
            th = 2 * np.pi * j / segments
            verts.append((radius * np.sin(phi) * np.cos(th),
                          radius * np.sin(phi) * np.sin(th),
                          radius * np.cos(phi)))
    verts.append((0.0, 0.0, -radius))
    south = len(verts) - 1
    faces = []
    for j in range(segments):
        faces.append((0, 1 + j, 1 + (j + 1) % segments))
    for i in range(rings - 2):
        base = 1 + i * segments
        nxt = base + segments
        for j in range(segments):
            j2 = (j + 1) % segments
            faces.append((base + j, nxt + j, nxt + j2))
            faces.append((base + j, nxt + j2, base + j2))
    base = 1 + (rings - 2) * segments
    for j in range(segments):
        faces.append((south, base + (j + 1) % segments, base + j))
    return TriangleMesh(np.array(verts), np.array(faces))


def _cube_mesh(side: float) -> TriangleMesh:
    h = side / 2.0
    v = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = []
    for a, b, c, d in quads:
        faces.append((a, b, c))
        faces.append((a, c, d))
    return TriangleMesh(v, np.array(faces))


def _cylinder_mesh(radius: float, height: float, segments: int = 32, bands: int = 8) -> TriangleMesh:
    hh = height / 2.0
    verts = []
    for i in range(bands + 1):
        z = -hh + height * i / bands
        for j in range(segments):
            th = 2 * np.pi * j / segments
            verts.append((radius * np.cos(th), radius * np.sin(th), z))
    faces = []
    for i in range(bands):
        base, nxt = i * segments, (i + 1) * segments
        for j in range(segments):
            j2 = (j + 1) % segments
            faces.append((base + j, base + j2, nxt + j2))
            faces.append((base + j, nxt + j2, nxt + j))
    bot_c = len(verts)
    verts.append((0.0, 0.0, -hh))
    top_c = len(verts)
    verts.append((0.0, 0.0, hh))
    top0 = bands * segments
    for j in range(segments):
        j2 = (j + 1) % segments
        faces.append((bot_c, j2, j))
        faces.append((top_c, top0 + j, top0 + j2))
    return TriangleMesh(np.array(verts), np.array(faces))


def _torus_mesh(big_r: float, small_r: float, seg_u: int = 28, seg_v: int = 14) -> TriangleMesh:
    verts = []
    for i in range(seg_u):
        u = 2 * np.pi * i / seg_u
        for j in range(seg_v):
            v = 2 * np.pi * j / seg_v
            w = big_r + small_r * np.cos(v)
            verts.append((w * np.cos(u), w * np.sin(u), small_r * np.sin(v)))
    faces = _grid_faces(seg_u, seg_v, wrap_u=True, wrap_v=True)
    return TriangleMesh(np.array(verts), np.array(faces))


def _cone_mesh(radius: float, height: float, segments: int = 32) -> TriangleMesh:
    hh = height / 2.0
    verts = [(radius * np.cos(2 * np.pi * j / segments),
              radius * np.sin(2 * np.pi * j / segments), -hh) for j in range(segments)]
    apex = len(verts)
    verts.append((0.0, 0.0, hh))
    center = len(verts)
    verts.append((0.0, 0.0, -hh))
    faces = []
    for j in range(segments):
        j2 = (j + 1) % segments
        faces.append((apex, j, j2))
        faces.append((center, j2, j))
    return TriangleMesh(np.array(verts), np.array(faces))


def shape_mesh(spec: ShapeSpec) -> TriangleMesh:
    """Deterministic triangle mesh for a shape spec.

    Base dimensions are chosen so scale=2 gives a sphere of radius 1 and
    a cube of side 2.
    """
    s, a = spec.scale, spec.aspect
    if spec.family == "sphere":
        mesh = _sphere_mesh(0.5 * s)
    elif spec.family == "cube":
        mesh = _cube_mesh(s)
    elif spec.family == "cylinder":
        mesh = _cylinder_mesh(0.35 * s, 1.0 * s * a)
    elif spec.family == "torus":
        mesh = _torus_mesh(0.35 * s, 0.15 * s * a)
    else:  # cone
        mesh = _cone_mesh(0.45 * s, 1.0 * s * a)
    return mesh.cleaned()


# ---------------------------------------------------------------------------
# sampling and normalization
# ---------------------------------------------------------------------------

def sample_mesh(mesh: TriangleMesh, n: int, seed: int) -> PointSet:
    """Uniform surface sampling: faces by area, then barycentric u,v with
    the fold u+v>1 -> (1-u, 1-v)."""
    if n < 1:
        raise ParameterError(f"need n >= 1 points, got {n}")
    if len(mesh.faces) == 0:
        raise GeometryError("mesh has no faces")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise GeometryError("mesh has zero total surface area")
    rng = np.random.default_rng(seed)
    face_idx = rng.choice(len(mesh.faces), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    fold = u + v > 1.0
    u[fold] = 1.0 - u[fold]
    v[fold] = 1.0 - v[fold]
    tri = mesh.vertices[mesh.faces[face_idx]]
    pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])
    return PointSet.from_coords(pts)


def make_shape(spec: ShapeSpec, n: int, seed: int | None = None) -> PointSet:
    """Sample n surface points from the parametric shape; label = family index."""
    mesh = shape_mesh(spec)
    ps = sample_mesh(mesh, n, spec.seed if seed is None else seed)
    return replace(ps, label=FAMILIES.index(spec.family), name=spec.family)


def normalize(ps: PointSet) -> PointSet:
    """Center at the centroid and divide by the max point norm.

    Idempotent up to 1e-12; an all-identical cloud maps to centered zeros.
    """
    coords = ps.coords - ps.coords.mean(axis=0, keepdims=True)
    max_norm = float(np.linalg.norm(coords, axis=1).max())
    if max_norm > 1e-300:
        coords = coords / max_norm
    return replace(ps, coords=coords)


# ---------------------------------------------------------------------------
# OFF meshes
# ---------------------------------------------------------------------------

def load_off(path) -> TriangleMesh:
    """Parse an OFF mesh; polygon faces are fan-triangulated.

    Tolerates the common header variant where the counts share the OFF
    line.  Degenerate faces are dropped.
    """
    lines = Path(path).read_text().splitlines()
    tokens: list[tuple[int, str]] = []  # (line number, token line) with comments stripped
    for lineno, raw in enumerate(lines, start=1):
        text = raw.split("#", 1)[0].strip()
        if text:
            tokens.append((lineno, text))
    if not tokens:
        raise FormatError(f"{path}: empty OFF file")
    lineno, header = tokens[0]
    rest = tokens[1:]
    if header == "OFF":
        pass
    elif header.startswith("OFF"):
        rest = [(lineno, header[3:].strip())] + rest  # counts glued to the header
    else:
        raise FormatError(f"{path}: line {lineno}: expected OFF header, got {header!r}")
    if not rest:
        raise FormatError(f"{path}: missing counts line")
    lineno, counts = rest[0]
    parts = counts.split()
    if len(parts) < 2:
        raise FormatError(f"{path}: line {lineno}: malformed counts line {counts!r}")
    try:
        nv, nf = int(parts[0]), int(parts[1])
    except ValueError:
        raise FormatError(f"{path}: line {lineno}: malformed counts line {counts!r}") from None
    body = rest[1:]
    if len(body) < nv + nf:
        raise FormatError(f"{path}: expected {nv} vertices + {nf} faces, found {len(body)} lines")
    verts = np.empty((nv, 3))
    for i in range(nv):
        lineno, text = body[i]
        parts = text.split()
        if len(parts) < 3:
            raise FormatError(f"{path}: line {lineno}: vertex needs 3 coordinates")
        try:
            verts[i] = [float(parts[0]), float(parts[1]), float(parts[2])]
        except ValueError:
            raise FormatError(f"{path}: line {lineno}: bad vertex {text!r}") from None
    faces = []
    for i in range(nf):
        lineno, text = body[nv + i]
        parts = text.split()
        try:
            m = int(parts[0])
            idx = [int(p) for p in parts[1:1 + m]]
        except (ValueError, IndexError):
            raise FormatError(f"{path}: line {lineno}: bad face {text!r}") from None
        if m < 3 or len(idx) != m:
            raise FormatError(f"{path}: line {lineno}: face needs >= 3 indices")
        for v in idx:
            if not (0 <= v < nv):
                raise FormatError(f"{path}: line {lineno}: vertex index {v} out of range")
        for j in range(1, m - 1):  # fan split
            faces.append((idx[0], idx[j], idx[j + 1]))
    mesh = TriangleMesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3))
    return mesh.cleaned()


# ---------------------------------------------------------------------------
# PSET binary point-set format
# ---------------------------------------------------------------------------

def save_pset(path, ps: PointSet) -> None:
    """magic "PSET" | u32 version=1 | u32 n | u32 d | u32 label | n*d f32 row-major.

    All integers little-endian; label -1 is stored as 0xFFFFFFFF.
    """
    label = _UNLABELED if ps.label < 0 else ps.label
    header = _PSET_MAGIC + struct.pack("<IIII", _PSET_VERSION, ps.n, ps.d, label)
    payload = ps.coords.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(header + payload)


def load_pset(path) -> PointSet:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != _PSET_MAGIC:
        raise FormatError(f"{path}: not a PSET file")
    version, n, d, label = struct.unpack("<IIII", raw[4:20])
    if version != _PSET_VERSION:
        raise FormatError(f"{path}: unsupported PSET version {version}")
    expected = 20 + 4 * n * d
    if len(raw) != expected:
        raise FormatError(f"{path}: truncated PSET (have {len(raw)} bytes, need {expected})")
    coords = np.frombuffer(raw, dtype="<f4", offset=20).reshape(n, d).astype(np.float64)
    return PointSet.from_coords(coords, label=-1 if label == _UNLABELED else int(label),
                                name=Path(path).stem)


# ---------------------------------------------------------------------------
# datasets and manifests
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    samples: list[PointSet] = field(default_factory=list)
    class_names: tuple[str, ...] = FAMILIES
    split: str = "train"

    def __post_init__(self):
        if self.samples:
            d = self.samples[0].d
            c = len(self.class_names)
            for ps in self.samples:
                if ps.d != d:
                    raise DataError(f"inconsistent point dimension: {ps.d} vs {d}")
                if not (0 <= ps.label < c):
                    raise DataError(f"label {ps.label} outside [0, {c}) for sample {ps.name!r}")

    def __len__(self) -> int:
        return len(self.samples)


def _sample_rng(seed: int, class_idx: int, index: int, split: str):
    return np.random.default_rng([seed, class_idx, index, 0 if split == "train" else 1])


def generate_dataset(outdir, classes=FAMILIES, train_per_class: int = 200,
                     test_per_class: int = 50, n: int = 256, seed: int = 0,
                     size_jitter: float = 0.2) -> list[tuple[str, int, str]]:
    """Write PSET files, manifest.csv and classes.txt; returns manifest rows.

    Per-sample random scale (+-size_jitter) and aspect jitter force the
    classifier to learn shape rather than size.  Manifest rows are
    round-robin over classes so any prefix is class-balanced.
    """
    if n < 1:
        raise ParameterError(f"need n >= 1 points per sample, got {n}")
    for name in classes:
        if name not in FAMILIES:
            raise ParameterError(f"unknown class {name!r}; choose from {FAMILIES}")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows: list[tuple[str, int, str]] = []
    for split, per_class in (("train", train_per_class), ("test", test_per_class)):
        for index in range(per_class):
            for class_idx, family in enumerate(classes):
                rng = _sample_rng(seed, class_idx, index, split)
                scale = 1.0 + size_jitter * float(rng.uniform(-1, 1))
                aspect = 1.0 + size_jitter * float(rng.uniform(-1, 1))
                sample_seed = int(rng.integers(0, 2**31 - 1))
                spec = ShapeSpec(family, scale=scale, aspect=aspect, seed=sample_seed)
                ps = normalize(make_shape(spec, n))
                name = f"{split}_{family}_{index:04d}"
                fname = f"{name}.pset"
                save_pset(outdir / fname, replace(ps, name=name, label=class_idx))
                rows.append((fname, class_idx, split))
    write_manifest(outdir, rows, classes)
    return rows


def write_manifest(outdir, rows, classes) -> None:
    outdir = Path(outdir)
    with open(outdir / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label", "split"])
        for path, label, split in rows:
            writer.writerow([path, label, split])
    (outdir / "classes.txt").write_text("".join(f"{c}\n" for c in classes))


def load_dataset(datadir, split: str) -> Dataset:
    """Load one split of a generated dataset from its manifest."""
    datadir = Path(datadir)
    manifest = datadir / "manifest.csv"
    if not manifest.exists():
        raise DataError(f"no manifest.csv in {datadir}")
    classes_file = datadir / "classes.txt"
    if not classes_file.exists():
        raise DataError(f"no classes.txt in {datadir}")
    class_names = tuple(classes_file.read_text().split())
    samples = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["split"] != split:
                continue
            ps = load_pset(datadir / row["path"])
            expected = int(row["label"])
            if ps.label != expected:
                raise DataError(f"{row['path']}: label {ps.label} disagrees with manifest {expected}")
            samples.append(ps)
    if not samples:
        raise DataError(f"no samples with split={split!r} in {manifest}")
    return Dataset(samples, class_names, split)
