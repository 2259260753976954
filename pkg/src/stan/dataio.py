"""File formats and the synthetic dataset generator.

All binary layouts are little-endian and bit-exact across platforms:

TensorFile   magic "STAN" | version u16 | dtype u8 (0=f32) | rank u8 |
             rank * dims u32 | payload f32 row-major
Checkpoint   magic "STCK" | version u16 | count u32 |
             count * (name_len u32, name utf-8, TensorFile bytes) |
             trailer_len u32 | trailer JSON utf-8
Score CSV    header "path,true_label,pred_label,score", floats with 9
             significant digits

Files are written atomically (temp file + rename); images are raw f32
tensors rather than an image codec, which keeps the artifact
bit-reproducible.  Convert real images externally if needed.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import DataError, IoError

TENSOR_MAGIC = b"STAN"
CHECKPOINT_MAGIC = b"STCK"
FORMAT_VERSION = 1
DTYPE_F32 = 0


def _atomic_write(path: str, payload: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


# ---------------------------------------------------------------------------
# TensorFile
# ---------------------------------------------------------------------------


def tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim < 1:
        raise IoError("tensors of rank 0 cannot be serialized (rank >= 1 required)")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim > 255:
        raise IoError("tensor rank exceeds format limit")
    header = TENSOR_MAGIC + struct.pack("<HBB", FORMAT_VERSION, DTYPE_F32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + dims + arr.tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one TensorFile record; returns (array, next offset)."""
    if len(buf) - offset < 8:
        raise IoError("truncated tensor header")
    if buf[offset : offset + 4] != TENSOR_MAGIC:
        raise IoError("bad tensor magic")
    version, dtype, rank = struct.unpack_from("<HBB", buf, offset + 4)
    if version != FORMAT_VERSION:
        raise IoError(f"unsupported tensor format version {version}")
    if dtype != DTYPE_F32:
        raise IoError(f"unsupported dtype code {dtype}")
    if rank < 1:
        raise IoError("tensor rank must be >= 1")
    pos = offset + 8
    if len(buf) - pos < 4 * rank:
        raise IoError("truncated tensor dims")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(dims))
    nbytes = 4 * count
    if len(buf) - pos < nbytes:
        raise IoError("truncated tensor payload")
    arr = np.frombuffer(buf[pos : pos + nbytes], dtype="<f4").reshape(dims)
    return np.array(arr, dtype=np.float32), pos + nbytes


def write_tensor(path: str, arr: np.ndarray) -> None:
    _atomic_write(path, tensor_bytes(arr))


def read_tensor(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise IoError(f"{path}: {len(buf) - end} trailing bytes after tensor payload")
    return arr


# ---------------------------------------------------------------------------
# Checkpoint
# ---------------------------------------------------------------------------


def save_checkpoint(path: str, state: dict[str, np.ndarray], meta: dict) -> None:
    """Archive of named tensors plus a JSON trailer (config hash, seed...)."""
    names = sorted(state)
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", FORMAT_VERSION, len(names))]
    for name in names:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(tensor_bytes(state[name]))
    trailer = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(trailer)))
    parts.append(trailer)
    _atomic_write(path, b"".join(parts))


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    if len(buf) < 10 or buf[:4] != CHECKPOINT_MAGIC:
        raise IoError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != FORMAT_VERSION:
        raise IoError(f"unsupported checkpoint version {version}")
    pos = 10
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(buf) - pos < 4:
            raise IoError("truncated checkpoint record")
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        if name in state:
            raise IoError(f"duplicate tensor name {name!r} in checkpoint")
        state[name], pos = tensor_from_bytes(buf, pos)
    if len(buf) - pos < 4:
        raise IoError("truncated checkpoint trailer")
    (tlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) - pos != tlen:
        raise IoError("checkpoint trailer length mismatch")
    meta = json.loads(buf[pos:].decode("utf-8"))
    return state, meta


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------

SPLITS = ("train", "val", "test")
OPENNESS = ("known", "unknown")


@dataclass
class ManifestEntry:
    path: str
    label: int
    split: str
    openness: str


@dataclass
class Manifest:
    name: str
    image_shape: tuple
    num_known_classes: int
    entries: list[ManifestEntry]
    root: str = "."

    def select(self, split: str | None = None, openness: str | None = None):
        out = self.entries
        if split is not None:
            out = [e for e in out if e.split == split]
        if openness is not None:
            out = [e for e in out if e.openness == openness]
        return out

    def resolve(self, entry: ManifestEntry) -> str:
        return os.path.join(self.root, entry.path)


def _validate_manifest(m: Manifest) -> None:
    if len(m.image_shape) != 3 or m.image_shape[0] != 3:
        raise DataError(f"image_shape must be [3,H,W], got {list(m.image_shape)}")
    if m.num_known_classes < 1:
        raise DataError("manifest needs at least one known class")
    for e in m.entries:
        if e.split not in SPLITS:
            raise DataError(f"bad split {e.split!r} for {e.path}")
        if e.openness not in OPENNESS:
            raise DataError(f"bad openness {e.openness!r} for {e.path}")
        if e.openness == "unknown":
            if e.label != -1:
                raise DataError(f"unknown entry {e.path} must have label -1")
            if e.split in ("train", "val"):
                raise DataError(f"open-set protocol violated: unknown entry {e.path} in {e.split}")
        else:
            if not 0 <= e.label < m.num_known_classes:
                raise DataError(f"known label {e.label} out of range for {e.path}")


def save_manifest(path: str, m: Manifest) -> None:
    doc = {
        "name": m.name,
        "image_shape": list(m.image_shape),
        "num_known_classes": m.num_known_classes,
        "entries": [
            {"path": e.path, "label": e.label, "split": e.split, "openness": e.openness}
            for e in m.entries
        ],
    }
    _atomic_write(path, json.dumps(doc, indent=1).encode("utf-8"))


def load_manifest(path: str) -> Manifest:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON: {e}") from e
    try:
        m = Manifest(
            name=doc["name"],
            image_shape=tuple(doc["image_shape"]),
            num_known_classes=int(doc["num_known_classes"]),
            entries=[ManifestEntry(**e) for e in doc["entries"]],
            root=os.path.dirname(os.path.abspath(path)),
        )
    except (KeyError, TypeError) as e:
        raise DataError(f"{path}: malformed manifest: {e}") from e
    _validate_manifest(m)
    return m


def load_entry_image(m: Manifest, entry: ManifestEntry) -> np.ndarray:
    arr = read_tensor(m.resolve(entry))
    if tuple(arr.shape) != tuple(m.image_shape):
        raise DataError(f"{entry.path}: shape {arr.shape} does not match manifest")
    return arr


# ---------------------------------------------------------------------------
# Synthetic dataset generator
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    k_known: int = 4
    k_unknown: int = 4
    per_class: int = 16
    image_side: int = 32
    inter_class_similarity: float = 0.0
    seed: int = 0
    val_per_class: int | None = None
    test_per_class: int | None = None

    def validate(self) -> None:
        if self.k_known < 2:
            raise DataError("need at least 2 known classes")
        if self.k_unknown < 0:
            raise DataError("k_unknown must be >= 0")
        if self.per_class < 1:
            raise DataError("per_class must be >= 1")
        if not 0.0 <= self.inter_class_similarity < 1.0:
            raise DataError("inter_class_similarity must be in [0, 1)")
        if self.image_side < 8:
            raise DataError("image_side must be >= 8")


def _smooth_field(rng: np.random.Generator, side: int) -> np.ndarray:
    coarse = rng.normal(0.0, 1.0, size=(3, side // 4, side // 4))
    return np.repeat(np.repeat(coarse, 4, axis=1), 4, axis=2)


def generate_synthetic(spec: SyntheticSpec, out_dir: str) -> str:
    """Write a similarity-controlled synthetic dataset; returns manifest path.

    Every class is a shared smooth background plus a class-specific local
    patch motif; motif pattern and position are convex-blended toward a
    global prototype with weight s, so higher s means more similar (harder)
    classes.  Unknown classes use held-out motifs from the same recipe.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    side = spec.image_side
    m = side // 4  # motif patch side
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)

    background = 0.5 * _smooth_field(rng, side)
    proto_pattern = rng.normal(0.0, 1.0, size=(3, m, m))
    proto_loc = np.array([(side - m) / 2.0, (side - m) / 2.0])

    s = spec.inter_class_similarity
    n_classes = spec.k_known + spec.k_unknown
    patterns, locs = [], []
    for _ in range(n_classes):
        raw = rng.normal(0.0, 1.0, size=(3, m, m))
        loc = rng.uniform(0, side - m, size=2)
        patterns.append((1.0 - s) * raw + s * proto_pattern)
        locs.append((1.0 - s) * loc + s * proto_loc)

    val_n = spec.val_per_class if spec.val_per_class is not None else max(2, spec.per_class // 4)
    test_n = spec.test_per_class if spec.test_per_class is not None else max(2, spec.per_class // 2)

    entries = []

    def emit(cls: int, split: str, openness: str, label: int, idx: int) -> None:
        img = background + rng.normal(0.0, 0.1, size=(3, side, side))
        jit = rng.integers(-1, 2, size=2)
        r = int(np.clip(round(locs[cls][0]) + jit[0], 0, side - m))
        c = int(np.clip(round(locs[cls][1]) + jit[1], 0, side - m))
        amp = 1.0 + 0.1 * rng.normal()
        img[:, r : r + m, c : c + m] += amp * patterns[cls]
        rel = os.path.join("images", f"c{cls:03d}_{split}_{idx:04d}.stan")
        write_tensor(os.path.join(out_dir, rel), img.astype(np.float32))
        entries.append(ManifestEntry(path=rel, label=label, split=split, openness=openness))

    for cls in range(spec.k_known):
        for i in range(spec.per_class):
            emit(cls, "train", "known", cls, i)
        for i in range(val_n):
            emit(cls, "val", "known", cls, i)
        for i in range(test_n):
            emit(cls, "test", "known", cls, i)
    for u in range(spec.k_unknown):
        cls = spec.k_known + u
        for i in range(test_n):
            emit(cls, "test", "unknown", -1, i)

    manifest = Manifest(
        name=f"synthetic_s{s:g}_seed{spec.seed}",
        image_shape=(3, side, side),
        num_known_classes=spec.k_known,
        entries=entries,
    )
    manifest_path = os.path.join(out_dir, "manifest.json")
    save_manifest(manifest_path, manifest)
    return manifest_path


# ---------------------------------------------------------------------------
# Score dumps
# ---------------------------------------------------------------------------


def _fmt_float(x: float) -> str:
    x = float(x) + 0.0  # normalize -0.0
    return f"{x:.9g}"


def dump_scores(path: str, rows) -> None:
    """rows: iterable of (path, true_label, pred_label, score)."""
    lines = ["path,true_label,pred_label,score"]
    for p, t, pr, sc in rows:
        lines.append(f"{p},{int(t)},{int(pr)},{_fmt_float(sc)}")
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def parse_scores(path: str) -> list[tuple[str, int, int, float]]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    if not lines or lines[0] != "path,true_label,pred_label,score":
        raise DataError(f"{path}: missing score CSV header")
    out = []
    for ln in lines[1:]:
        p, t, pr, sc = ln.split(",")
        out.append((p, int(t), int(pr), float(sc)))
    return out
