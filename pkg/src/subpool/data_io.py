"""Tensor files, CSV manifests, and the identity-level train/test split.

SPTF layout (all little-endian)::

    offset 0   4 bytes   magic b"SPTF"
    offset 4   uint8     version = 1
    offset 5   uint8     dtype = 1 (float32)
    offset 6   uint16    rank
    offset 8   uint32[rank] dims
    ...        float32[prod(dims)] payload, row-major
"""

from __future__ import annotations

import csv
import io
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SPTF"
VERSION = 1
DTYPE_F32 = 1
MANIFEST_HEADER = ["path", "person_id", "camera_id"]


class TensorFileError(ValueError):
    pass


class ManifestError(ValueError):
    pass


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_tensor(array) -> bytes:
    arr = np.asarray(array)
    if arr.ndim < 1 or arr.ndim > 0xFFFF:
        raise TensorFileError(f"rank must be in [1, 65535], got {arr.ndim}")
    if any(d == 0 for d in arr.shape):
        raise TensorFileError(f"dimensions must be non-zero, got {arr.shape}")
    payload = np.ascontiguousarray(arr, dtype="<f4")
    if not np.all(np.isfinite(payload)):
        raise TensorFileError("payload has non-finite values")
    header = MAGIC + struct.pack("<BBH", VERSION, DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + payload.tobytes()


def decode_tensor(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(data) < 8:
        raise TensorFileError(f"{source}: expected at least 8 header bytes, got {len(data)}")
    if data[:4] != MAGIC:
        raise TensorFileError(f"{source}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, dtype, rank = struct.unpack_from("<BBH", data, 4)
    if version != VERSION:
        raise TensorFileError(f"{source}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise TensorFileError(f"{source}: unsupported dtype code {dtype}")
    if rank == 0:
        raise TensorFileError(f"{source}: rank 0 is not allowed")
    header_len = 8 + 4 * rank
    if len(data) < header_len:
        raise TensorFileError(
            f"{source}: expected {header_len} header bytes, got {len(data)}"
        )
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    if 0 in dims:
        raise TensorFileError(f"{source}: zero dimension in {dims}")
    expected = header_len + 4 * int(np.prod(dims, dtype=np.int64))
    if len(data) != expected:
        raise TensorFileError(
            f"{source}: expected {expected} bytes for shape {dims}, got {len(data)}"
        )
    return np.frombuffer(data, dtype="<f4", offset=header_len).reshape(dims).copy()


def write_tensor(path, array) -> None:
    """Write ``array`` as float32 SPTF; the file appears atomically."""
    _atomic_write(Path(path), encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    return decode_tensor(path.read_bytes(), str(path))


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    person_id: int
    camera_id: int


def load_manifest(path, check_paths: bool = True) -> list[ManifestEntry]:
    """Parse a ``path,person_id,camera_id`` CSV; errors cite the line number.

    Relative tensor paths are resolved against the manifest's directory.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestError(f"{path}:1: empty manifest, expected header") from None
    if [h.strip() for h in header] != MANIFEST_HEADER:
        raise ManifestError(f"{path}:1: header must be {','.join(MANIFEST_HEADER)}, got {header}")
    entries, seen = [], {}
    for row in reader:
        line = reader.line_num
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 3:
            raise ManifestError(f"{path}:{line}: expected 3 fields, got {len(row)}")
        rel, pid, cam = (cell.strip() for cell in row)
        try:
            pid_i, cam_i = int(pid), int(cam)
        except ValueError:
            raise ManifestError(
                f"{path}:{line}: cannot parse person_id={pid!r} camera_id={cam!r}"
            ) from None
        if pid_i < -1 or cam_i < 0:
            raise ManifestError(f"{path}:{line}: ids out of range ({pid_i}, {cam_i})")
        if rel in seen:
            raise ManifestError(f"{path}:{line}: duplicate path {rel!r} (first on line {seen[rel]})")
        seen[rel] = line
        if check_paths and not (path.parent / rel).is_file():
            raise ManifestError(f"{path}:{line}: tensor file {rel!r} not found")
        entries.append(ManifestEntry(rel, pid_i, cam_i))
    return entries


def write_manifest(path, entries) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for e in entries:
        writer.writerow([e.path, e.person_id, e.camera_id])
    _atomic_write(Path(path), buf.getvalue().encode("utf-8"))


@dataclass
class Dataset:
    """Images or feature maps, shape (N, C, H, W), with identity/camera labels."""

    tensors: np.ndarray
    person_ids: np.ndarray
    camera_ids: np.ndarray
    paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.tensors = np.asarray(self.tensors, dtype=np.float64)
        self.person_ids = np.asarray(self.person_ids, dtype=np.int64)
        self.camera_ids = np.asarray(self.camera_ids, dtype=np.int64)
        n = len(self.tensors)
        if self.tensors.ndim != 4:
            raise ValueError(f"tensors must be (N, C, H, W), got {self.tensors.shape}")
        if self.person_ids.shape != (n,) or self.camera_ids.shape != (n,):
            raise ValueError("label arrays must match the number of tensors")
        if not self.paths:
            self.paths = [f"{i:06d}.sptf" for i in range(n)]

    def __len__(self) -> int:
        return len(self.tensors)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.tensors[idx], self.person_ids[idx], self.camera_ids[idx],
            [self.paths[i] for i in idx],
        )

    def entries(self) -> list[ManifestEntry]:
        return [
            ManifestEntry(p, int(i), int(c))
            for p, i, c in zip(self.paths, self.person_ids, self.camera_ids)
        ]


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write one tensor file per sample plus ``manifest.csv``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rel, t in zip(dataset.paths, dataset.tensors):
        (out / rel).parent.mkdir(parents=True, exist_ok=True)
        write_tensor(out / rel, t)
    manifest = out / "manifest.csv"
    write_manifest(manifest, dataset.entries())
    return manifest


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.csv"
    entries = load_manifest(manifest_path)
    if not entries:
        raise ManifestError(f"{manifest_path}: no entries")
    tensors = [read_tensor(manifest_path.parent / e.path) for e in entries]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ManifestError(f"{manifest_path}: tensors have mixed shapes {sorted(shapes)}")
    stacked = np.stack(tensors).astype(np.float64)
    if stacked.ndim == 3:
        stacked = stacked[:, None]
    if stacked.ndim != 4:
        raise ManifestError(f"{manifest_path}: expected (C, H, W) tensors, got {stacked.shape[1:]}")
    return Dataset(
        stacked,
        [e.person_id for e in entries],
        [e.camera_id for e in entries],
        [e.path for e in entries],
    )


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.5
    seed: int = 0
    queries_per_group: int = 1

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if self.queries_per_group < 1:
            raise ValueError("queries_per_group must be >= 1")


@dataclass(frozen=True)
class Split:
    train_ids: np.ndarray
    test_ids: np.ndarray
    train: np.ndarray
    query: np.ndarray
    gallery: np.ndarray


def split_dataset(person_ids, camera_ids, spec: SplitSpec) -> Split:
    """Identity-disjoint train/test split with per-(id, camera) query selection.

    Identities are shuffled with ``spec.seed`` and the first
    ``round(fraction * n_ids)`` go to training. In the test half every
    (id, camera) group of two or more images gives ``q`` queries (at most
    size - 1) and the rest to the gallery; singleton groups are gallery only.
    Junk samples (id -1) never enter training or queries; in the test half
    they are gallery distractors.
    """
    pids = np.asarray(person_ids, dtype=np.int64)
    cams = np.asarray(camera_ids, dtype=np.int64)
    ids = np.unique(pids[pids >= 0])
    if len(ids) < 2:
        raise ValueError(f"need at least 2 identities, got {len(ids)}")
    rng = np.random.default_rng(spec.seed)
    shuffled = ids[rng.permutation(len(ids))]
    n_train = int(np.floor(spec.train_fraction * len(ids) + 0.5))
    if n_train == 0 or n_train == len(ids):
        raise ValueError(
            f"train_fraction {spec.train_fraction} on {len(ids)} identities leaves an empty side"
        )
    train_ids = np.sort(shuffled[:n_train])
    test_ids = np.sort(shuffled[n_train:])

    train = np.flatnonzero(np.isin(pids, train_ids))
    query, gallery = [], list(np.flatnonzero(pids == -1))
    for pid in test_ids:
        for cam in np.unique(cams[pids == pid]):
            group = np.flatnonzero((pids == pid) & (cams == cam))
            if len(group) < 2:
                gallery.extend(group)
                continue
            picked = rng.permutation(group)
            q = min(spec.queries_per_group, len(group) - 1)
            query.extend(picked[:q])
            gallery.extend(picked[q:])
    return Split(
        train_ids, test_ids, train,
        np.sort(np.array(query, dtype=np.int64)),
        np.sort(np.array(gallery, dtype=np.int64)),
    )
