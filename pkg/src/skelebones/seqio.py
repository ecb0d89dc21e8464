"""Vertex-sequence ingestion and rig archive persistence.

File formats are documented in ``docs/formats.md``.
"""

from __future__ import annotations

import io
import json
import logging
import struct
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import se3
from .errors import CorruptArchive, InconsistentTopology, SequenceIOError, ShapeError
from .types import CurveSkeleton, KinematicTree

log = logging.getLogger(__name__)

VSEQ_MAGIC = b"VSEQ"
VSEQ_VERSION = 1
_VSEQ_HEADER = struct.Struct("<4sIIII")

ARCHIVE_SECTIONS = ("WEIGHTS", "BONES", "SKELETON", "TREE", "POSES", "META")
# fixed zip timestamp so identical rigs produce identical bytes
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class VertexSequence:
    positions: np.ndarray  # (F, N, 3)
    faces: np.ndarray | None = None  # (M, 3) int, shared by every frame
    canonical_frame: int = 0

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=float)
        if p.ndim != 3 or p.shape[2] != 3:
            raise ShapeError(f"positions must be (F, N, 3), got {p.shape}")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise ShapeError("sequence needs at least one frame and one vertex")
        if not np.all(np.isfinite(p)):
            raise ValueError("positions contain non-finite values")
        self.positions = p
        if self.faces is not None:
            self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not 0 <= self.canonical_frame < p.shape[0]:
            raise IndexError(f"canonical frame {self.canonical_frame} out of range")
        if self.bbox_diag <= 0:
            raise ValueError("degenerate sequence: bounding-box diagonal is zero")

    @property
    def frame_count(self):
        return self.positions.shape[0]

    @property
    def vertex_count(self):
        return self.positions.shape[1]

    @property
    def canonical(self):
        return self.positions[self.canonical_frame]

    @property
    def bbox_diag(self):
        c = self.positions[self.canonical_frame]
        return float(np.linalg.norm(c.max(axis=0) - c.min(axis=0)))

    def frames(self, index):
        """Sub-sequence keeping the canonical frame at position 0."""
        return VertexSequence(self.positions[index], self.faces, 0)


# -- OBJ directories

def read_obj(path):
    verts, faces = [], []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for line in fh:
            if line.startswith("v "):
                parts = line.split()
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif line.startswith("f "):
                idx = []
                for tok in line.split()[1:]:
                    k = int(tok.split("/")[0])
                    idx.append(k - 1 if k > 0 else len(verts) + k)
                for a in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[a], idx[a + 1]])
    v = np.array(verts, dtype=float).reshape(-1, 3)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3) if faces else None
    return v, f


def write_obj(path, vertices, faces=None):
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in np.asarray(vertices, dtype=float).tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        if faces is not None:
            for a, b, c in faces:
                fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


def save_obj_sequence(seq: VertexSequence, directory, stem="frame"):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(seq.frame_count)))
    for f in range(seq.frame_count):
        write_obj(directory / f"{stem}_{f:0{width}d}.obj", seq.positions[f], seq.faces)


def _load_obj_directory(directory: Path):
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".obj")
    if not files:
        raise SequenceIOError(f"no .obj files in {directory}")
    frames, faces = [], None
    for i, path in enumerate(files):
        try:
            v, fc = read_obj(path)
        except (OSError, ValueError, IndexError) as exc:
            raise SequenceIOError(f"frame {i} ({path.name}): {exc}", frame=i) from exc
        if frames and len(v) != len(frames[0]):
            raise InconsistentTopology(
                f"frame {i} ({path.name}) has {len(v)} vertices, frame 0 has {len(frames[0])}")
        if i == 0:
            faces = fc
        frames.append(v)
    return VertexSequence(np.stack(frames), faces)


# -- binary .vseq

def save_sequence(seq: VertexSequence, path):
    faces = seq.faces if seq.faces is not None else np.zeros((0, 3), dtype=np.int64)
    with open(path, "wb") as fh:
        fh.write(_VSEQ_HEADER.pack(VSEQ_MAGIC, VSEQ_VERSION, seq.frame_count,
                                   seq.vertex_count, len(faces)))
        fh.write(np.ascontiguousarray(faces, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(seq.positions, dtype="<f8").tobytes())


def _read_vseq_header(fh, path):
    raw = fh.read(_VSEQ_HEADER.size)
    if len(raw) != _VSEQ_HEADER.size:
        raise SequenceIOError(f"{path}: truncated header")
    magic, version, f, n, m = _VSEQ_HEADER.unpack(raw)
    if magic != VSEQ_MAGIC:
        raise SequenceIOError(f"{path}: bad magic {magic!r}")
    if version != VSEQ_VERSION:
        raise SequenceIOError(f"{path}: unsupported version {version}")
    return f, n, m


def read_vseq_frame(path, frame):
    """Read a single frame by seeking straight to its block."""
    with open(path, "rb") as fh:
        f, n, m = _read_vseq_header(fh, path)
        if not 0 <= frame < f:
            raise IndexError(f"frame {frame} out of range [0, {f})")
        fh.seek(_VSEQ_HEADER.size + 12 * m + frame * n * 24)
        raw = fh.read(n * 24)
    if len(raw) != n * 24:
        raise SequenceIOError(f"{path}: frame {frame} truncated", frame=frame)
    return np.frombuffer(raw, dtype="<f8").reshape(n, 3).astype(float)


def _load_vseq(path: Path):
    with open(path, "rb") as fh:
        f, n, m = _read_vseq_header(fh, path)
        faces = np.frombuffer(fh.read(12 * m), dtype="<i4").reshape(m, 3).astype(np.int64)
        frames = []
        for i in range(f):
            raw = fh.read(n * 24)
            if len(raw) != n * 24:
                raise SequenceIOError(f"{path}: frame {i} truncated", frame=i)
            frames.append(np.frombuffer(raw, dtype="<f8").reshape(n, 3))
    return VertexSequence(np.stack(frames).astype(float), faces if m else None)


def load_sequence(path) -> VertexSequence:
    """Load a directory of per-frame OBJ files or a single ``.vseq`` file."""
    path = Path(path)
    if path.is_dir():
        return _load_obj_directory(path)
    if not path.exists():
        raise SequenceIOError(f"{path} does not exist")
    if path.suffix.lower() == ".obj":
        v, fc = read_obj(path)
        return VertexSequence(v[None], fc)
    return _load_vseq(path)


# -- rig archives

@dataclass
class RigArchive:
    rest: np.ndarray  # (N, 3) canonical vertex positions
    weights: np.ndarray  # (N, B)
    bone_rotations: np.ndarray  # (F, B, 4)
    bone_translations: np.ndarray  # (F, B, 3)
    skeleton: CurveSkeleton
    tree: KinematicTree
    pose_rotations: np.ndarray  # (F, J, 4) local joint rotations
    root_translations: np.ndarray  # (F, 3)
    canonical_frame: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def frame_count(self):
        return self.bone_rotations.shape[0]

    @property
    def bone_count(self):
        return self.weights.shape[1]

    @property
    def bbox_diag(self):
        return float(np.linalg.norm(self.rest.max(axis=0) - self.rest.min(axis=0)))

    def validate(self):
        n, b = self.weights.shape
        f = self.bone_rotations.shape[0]
        j = self.tree.joint_count
        checks = [
            ("rest_shape", self.rest.shape == (n, 3)),
            ("bone_rotations_shape", self.bone_rotations.shape == (f, b, 4)),
            ("bone_translations_shape", self.bone_translations.shape == (f, b, 3)),
            ("pose_rotations_shape", self.pose_rotations.shape == (f, j, 4)),
            ("root_translations_shape", self.root_translations.shape == (f, 3)),
            ("canonical_frame_range", 0 <= self.canonical_frame < max(f, 1)),
        ]
        for name, ok in checks:
            if not ok:
                raise CorruptArchive(name)
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise CorruptArchive("weights_nonnegative")
        rows = self.weights.sum(axis=1)
        if np.any(np.abs(rows - 1.0) > 1e-6):
            worst = int(np.argmax(np.abs(rows - 1.0)))
            raise CorruptArchive("weights_row_sum", f"row {worst} sums to {rows[worst]:.9g}")
        for name, q in (("bone_quaternion_norm", self.bone_rotations),
                        ("pose_quaternion_norm", self.pose_rotations)):
            if q.size and np.any(np.abs(np.linalg.norm(q, axis=-1) - 1.0) > 1e-9):
                raise CorruptArchive(name)
        try:
            self.tree.validate()
        except ValueError as exc:
            raise CorruptArchive("tree_structure", str(exc)) from exc
        sk = self.skeleton
        m = len(sk.samples)
        if sk.vertex_sample.shape != (n,) or (n and (sk.vertex_sample.min() < 0 or sk.vertex_sample.max() >= m)):
            raise CorruptArchive("skeleton_correspondence")
        if len(sk.edges) and (sk.edges.min() < 0 or sk.edges.max() >= m):
            raise CorruptArchive("skeleton_edges")
        if sk.sample_weights is not None and sk.sample_weights.shape != (m, b):
            raise CorruptArchive("skeleton_weights_shape")


def _npy_bytes(arr):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _write_zip(path, entries):
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, payload in entries:
            info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, payload)


def _read_zip(path):
    try:
        with zipfile.ZipFile(path, "r") as zf:
            out = {}
            for name in zf.namelist():
                data = zf.read(name)
                if name.endswith(".npy"):
                    out[name] = np.lib.format.read_array(io.BytesIO(data), allow_pickle=False)
                else:
                    out[name] = data
            return out
    except (zipfile.BadZipFile, OSError, ValueError) as exc:
        raise CorruptArchive("container", str(exc)) from exc


def _pose_entries(rotations, root_translations):
    return [("POSES/rotations.npy", _npy_bytes(np.asarray(rotations, dtype=float))),
            ("POSES/root_translations.npy", _npy_bytes(np.asarray(root_translations, dtype=float)))]


def _meta_bytes(meta):
    return json.dumps(meta, sort_keys=True, indent=1).encode("utf-8")


def save_rig(rig: RigArchive, path):
    rig.validate()
    sk = rig.skeleton
    sw = sk.sample_weights if sk.sample_weights is not None else np.zeros((len(sk.samples), 0))
    meta = dict(rig.meta)
    meta["canonical_frame"] = int(rig.canonical_frame)
    meta.setdefault("unit", "unspecified")
    entries = [
        ("WEIGHTS/rest.npy", _npy_bytes(rig.rest)),
        ("WEIGHTS/weights.npy", _npy_bytes(rig.weights)),
        ("BONES/rotations.npy", _npy_bytes(rig.bone_rotations)),
        ("BONES/translations.npy", _npy_bytes(rig.bone_translations)),
        ("SKELETON/samples.npy", _npy_bytes(sk.samples)),
        ("SKELETON/edges.npy", _npy_bytes(np.asarray(sk.edges, dtype=np.int64).reshape(-1, 2))),
        ("SKELETON/vertex_sample.npy", _npy_bytes(np.asarray(sk.vertex_sample, dtype=np.int64))),
        ("SKELETON/sample_weights.npy", _npy_bytes(sw)),
        ("TREE/joints.npy", _npy_bytes(rig.tree.joints)),
        ("TREE/parents.npy", _npy_bytes(rig.tree.parents.astype(np.int64))),
        ("TREE/joint_samples.npy", _npy_bytes(rig.tree.joint_samples.astype(np.int64))),
        *_pose_entries(rig.pose_rotations, rig.root_translations),
        ("META/meta.json", _meta_bytes(meta)),
    ]
    _write_zip(path, entries)


def _require(data, name):
    if name not in data:
        raise CorruptArchive("missing_entry", name)
    return data[name]


def load_rig(path) -> RigArchive:
    data = _read_zip(path)
    for section in ARCHIVE_SECTIONS:
        if not any(k.startswith(section + "/") for k in data):
            raise CorruptArchive("missing_section", section)
    try:
        meta = json.loads(_require(data, "META/meta.json").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptArchive("meta_json", str(exc)) from exc
    sw = _require(data, "SKELETON/sample_weights.npy")
    skel = CurveSkeleton(
        samples=_require(data, "SKELETON/samples.npy"),
        edges=_require(data, "SKELETON/edges.npy").reshape(-1, 2),
        vertex_sample=_require(data, "SKELETON/vertex_sample.npy"),
        sample_weights=sw if sw.shape[1] else None,
    )
    tree = KinematicTree(_require(data, "TREE/joints.npy"), _require(data, "TREE/parents.npy"),
                         _require(data, "TREE/joint_samples.npy"))
    rig = RigArchive(
        rest=_require(data, "WEIGHTS/rest.npy"),
        weights=_require(data, "WEIGHTS/weights.npy"),
        bone_rotations=_require(data, "BONES/rotations.npy"),
        bone_translations=_require(data, "BONES/translations.npy"),
        skeleton=skel,
        tree=tree,
        pose_rotations=_require(data, "POSES/rotations.npy"),
        root_translations=_require(data, "POSES/root_translations.npy"),
        canonical_frame=int(meta.get("canonical_frame", 0)),
        meta=meta,
    )
    rig.validate()
    return rig


def save_skeleton(path, skel: CurveSkeleton):
    """Write a curve skeleton as a stand-alone SKELETON section."""
    sw = skel.sample_weights if skel.sample_weights is not None else np.zeros((len(skel.samples), 0))
    _write_zip(path, [
        ("SKELETON/samples.npy", _npy_bytes(np.asarray(skel.samples, dtype=float))),
        ("SKELETON/edges.npy", _npy_bytes(np.asarray(skel.edges, dtype=np.int64).reshape(-1, 2))),
        ("SKELETON/vertex_sample.npy", _npy_bytes(np.asarray(skel.vertex_sample, dtype=np.int64))),
        ("SKELETON/sample_weights.npy", _npy_bytes(sw)),
    ])


def load_skeleton(path, vertex_count=None) -> CurveSkeleton:
    """Read the SKELETON section of a rig archive or a stand-alone skeleton file."""
    data = _read_zip(path)
    samples = np.asarray(_require(data, "SKELETON/samples.npy"), dtype=float)
    edges = np.asarray(_require(data, "SKELETON/edges.npy"), dtype=int).reshape(-1, 2)
    vs = np.asarray(_require(data, "SKELETON/vertex_sample.npy"), dtype=int)
    m = len(samples)
    if samples.ndim != 2 or samples.shape[1] != 3 or m == 0 or not np.all(np.isfinite(samples)):
        raise CorruptArchive("skeleton_samples")
    if len(edges) and (edges.min() < 0 or edges.max() >= m):
        raise CorruptArchive("skeleton_edges")
    if len(vs) and (vs.min() < 0 or vs.max() >= m):
        raise CorruptArchive("skeleton_correspondence")
    if vertex_count is not None and len(vs) != vertex_count:
        raise CorruptArchive("skeleton_vertex_count", f"{len(vs)} correspondences for {vertex_count} vertices")
    return CurveSkeleton(samples, edges, vs)


def save_poses(path, rotations, root_translations, meta=None):
    """Write a query motion file: a POSES section plus META."""
    rotations = np.asarray(rotations, dtype=float)
    root_translations = np.asarray(root_translations, dtype=float)
    if rotations.ndim != 3 or rotations.shape[2] != 4 or root_translations.shape != (rotations.shape[0], 3):
        raise ShapeError(f"poses {rotations.shape} / root translations {root_translations.shape}")
    meta = dict(meta or {})
    meta["joint_count"] = int(rotations.shape[1])
    _write_zip(path, _pose_entries(rotations, root_translations) + [("META/meta.json", _meta_bytes(meta))])


def load_poses(path):
    """Read the POSES section of a rig archive or a query motion file."""
    data = _read_zip(path)
    rot = _require(data, "POSES/rotations.npy")
    trans = _require(data, "POSES/root_translations.npy")
    if rot.ndim != 3 or rot.shape[2] != 4 or trans.shape != (rot.shape[0], 3):
        raise CorruptArchive("pose_shape", f"{rot.shape} / {trans.shape}")
    if np.any(np.abs(np.linalg.norm(rot, axis=-1) - 1.0) > 1e-9):
        raise CorruptArchive("pose_quaternion_norm")
    return rot, trans


# -- viewable export

def bone_palette(count):
    """Deterministic distinct RGB colors (uint8) for ``count`` bones."""
    hues = (np.arange(count) * 0.618033988749895) % 1.0
    h6 = hues * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    v, s = 0.95, 0.75
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    table = np.stack([
        np.stack([np.full_like(f, v), t, np.full_like(f, p)], 1),
        np.stack([q, np.full_like(f, v), np.full_like(f, p)], 1),
        np.stack([np.full_like(f, p), np.full_like(f, v), t], 1),
        np.stack([np.full_like(f, p), q, np.full_like(f, v)], 1),
        np.stack([t, np.full_like(f, p), np.full_like(f, v)], 1),
        np.stack([np.full_like(f, v), np.full_like(f, p), q], 1),
    ], axis=0)
    rgb = table[i, np.arange(count)]
    return np.round(rgb * 255).astype(np.uint8)


KIND_SURFACE, KIND_SKELETON, KIND_JOINT = 0, 1, 2


def export_viewable(rig: RigArchive, frame, path):
    """Write an ASCII PLY with surface points, skeleton polyline and joint markers.

    Every vertex carries the color of its dominant bone and a ``kind`` tag
    (0 surface, 1 skeleton sample, 2 joint). Edge elements hold the skeleton
    polyline followed by the kinematic tree edges.
    """
    from .ik import forward_kinematics

    if not 0 <= frame < rig.frame_count:
        raise IndexError(f"frame {frame} out of range [0, {rig.frame_count})")
    rot, trans = rig.bone_rotations[frame], rig.bone_translations[frame]
    surface = se3.lbs_apply(rig.rest, rig.weights, rot, trans)
    palette = bone_palette(rig.bone_count)
    sk = rig.skeleton
    if sk.sample_weights is not None:
        samples = se3.lbs_apply(sk.samples, sk.sample_weights, rot, trans)
        sample_color = palette[np.argmax(sk.sample_weights, axis=1)]
    else:
        samples = sk.samples
        sample_color = np.zeros((len(samples), 3), dtype=np.uint8)
    gr, gp = forward_kinematics(rig.tree, rig.pose_rotations[frame], rig.root_translations[frame])
    js = rig.tree.joint_samples
    joint_color = np.where((js >= 0)[:, None], sample_color[np.clip(js, 0, None)], palette[0])

    pts = np.concatenate([surface, samples, gp])
    colors = np.concatenate([palette[np.argmax(rig.weights, axis=1)], sample_color, joint_color])
    kinds = np.concatenate([np.full(len(surface), KIND_SURFACE), np.full(len(samples), KIND_SKELETON),
                            np.full(len(gp), KIND_JOINT)])
    off_s, off_j = len(surface), len(surface) + len(samples)
    edges = np.concatenate([np.asarray(sk.edges).reshape(-1, 2) + off_s,
                            rig.tree.edges + off_j]).astype(int)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"comment frame {frame}\n")
        fh.write(f"element vertex {len(pts)}\n")
        fh.write("property double x\nproperty double y\nproperty double z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("property uchar kind\n")
        fh.write(f"element edge {len(edges)}\nproperty int vertex1\nproperty int vertex2\n")
        fh.write("end_header\n")
        for p, c, k in zip(pts.tolist(), colors.tolist(), kinds.tolist()):
            fh.write(f"{p[0]!r} {p[1]!r} {p[2]!r} {c[0]} {c[1]} {c[2]} {k}\n")
        for a, b in edges.tolist():
            fh.write(f"{a} {b}\n")


def read_ply(path):
    """Minimal reader for files written by export_viewable."""
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    end = lines.index("end_header")
    nv = ne = 0
    for line in lines[:end]:
        if line.startswith("element vertex"):
            nv = int(line.split()[2])
        elif line.startswith("element edge"):
            ne = int(line.split()[2])
    body = lines[end + 1:]
    v = np.array([[float(x) for x in ln.split()] for ln in body[:nv]]).reshape(-1, 7)
    e = np.array([[int(x) for x in ln.split()] for ln in body[nv:nv + ne]], dtype=int).reshape(-1, 2)
    return {"points": v[:, :3], "colors": v[:, 3:6].astype(int), "kind": v[:, 6].astype(int), "edges": e}
