"""Feature tensors, the CADF binary feature-file format, task manifests,
and a deterministic synthetic-feature generator used as a test oracle.

File layouts are specified byte-for-byte in FORMATS.md at the repo root.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import SplitMix64, derive_seed

MAGIC = b"CADF"
FORMAT_VERSION = 1

LABEL_NORMAL = "normal"
LABEL_ANOMALOUS = "anomalous"
SPLIT_TRAIN = "train"
SPLIT_TEST = "test"

_LABEL_TO_U8 = {LABEL_NORMAL: 0, LABEL_ANOMALOUS: 1}
_U8_TO_LABEL = {0: LABEL_NORMAL, 1: LABEL_ANOMALOUS}
_SPLIT_TO_U8 = {SPLIT_TRAIN: 0, SPLIT_TEST: 1}
_U8_TO_SPLIT = {0: SPLIT_TRAIN, 1: SPLIT_TEST}

# magic, version u32, split u8, grid_h/grid_w/dim u16, count u32 -> 19 bytes
_HEADER = struct.Struct("<4sIBHHHI")


class FormatError(ValueError):
    """Raised when a CADF/CADB file violates its byte-level contract."""


@dataclass(frozen=True)
class FeatureGrid:
    """One image's patch-token grid plus its global CLS vector.

    ``patches`` has shape (grid_h, grid_w, dim) and ``cls`` shape (dim,),
    both float32. All entries must be finite.
    """

    image_id: str
    label: str
    cls: np.ndarray
    patches: np.ndarray

    def __post_init__(self):
        patches = np.ascontiguousarray(self.patches, dtype=np.float32)
        cls = np.ascontiguousarray(self.cls, dtype=np.float32)
        if patches.ndim != 3 or min(patches.shape) < 1:
            raise ValueError(f"patches must be (grid_h, grid_w, dim), got {patches.shape}")
        if cls.shape != (patches.shape[2],):
            raise ValueError(f"cls shape {cls.shape} does not match dim {patches.shape[2]}")
        if self.label not in _LABEL_TO_U8:
            raise ValueError(f"unknown label {self.label!r}")
        if len(self.image_id.encode("utf-8")) > 0xFFFF:
            raise ValueError("image_id longer than 65535 bytes")
        if not np.isfinite(patches).all() or not np.isfinite(cls).all():
            raise ValueError("non-finite feature values")
        patches.flags.writeable = False
        cls.flags.writeable = False
        object.__setattr__(self, "patches", patches)
        object.__setattr__(self, "cls", cls)

    @property
    def grid_h(self) -> int:
        return self.patches.shape[0]

    @property
    def grid_w(self) -> int:
        return self.patches.shape[1]

    @property
    def dim(self) -> int:
        return self.patches.shape[2]


@dataclass(frozen=True)
class TaskDataset:
    """An ordered set of feature grids for one task and split.

    Train splits may contain only normal samples; all members share one
    (grid_h, grid_w, dim) shape.
    """

    task_id: str
    split: str
    features: tuple[FeatureGrid, ...]
    source_manifest: Path | None = None

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        if self.split not in _SPLIT_TO_U8:
            raise ValueError(f"unknown split {self.split!r}")
        if not self.features:
            raise ValueError("empty dataset")
        shape = self.features[0].patches.shape
        for g in self.features:
            if g.patches.shape != shape:
                raise ValueError(
                    f"shape heterogeneity: {g.patches.shape} vs {shape} in {self.task_id!r}"
                )
        if self.split == SPLIT_TRAIN:
            for g in self.features:
                if g.label != LABEL_NORMAL:
                    raise ValueError("train split contains anomalous sample")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def grid_h(self) -> int:
        return self.features[0].grid_h

    @property
    def grid_w(self) -> int:
        return self.features[0].grid_w

    @property
    def dim(self) -> int:
        return self.features[0].dim

    def labels(self) -> np.ndarray:
        """Boolean vector, True where the sample is anomalous."""
        return np.array([g.label == LABEL_ANOMALOUS for g in self.features], dtype=bool)


def write_feature_file(dataset: TaskDataset, path: str | Path) -> int:
    """Serialize *dataset* to *path*, returning the byte count written."""
    blob = dataset_to_bytes(dataset)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return len(blob)


def dataset_to_bytes(dataset: TaskDataset) -> bytes:
    out = [
        _HEADER.pack(
            MAGIC,
            FORMAT_VERSION,
            _SPLIT_TO_U8[dataset.split],
            dataset.grid_h,
            dataset.grid_w,
            dataset.dim,
            len(dataset.features),
        )
    ]
    for g in dataset.features:
        ident = g.image_id.encode("utf-8")
        out.append(struct.pack("<BH", _LABEL_TO_U8[g.label], len(ident)))
        out.append(ident)
        out.append(g.cls.astype("<f4", copy=False).tobytes())
        out.append(g.patches.astype("<f4", copy=False).tobytes())
    return b"".join(out)


def read_feature_file(path: str | Path, task_id: str | None = None) -> TaskDataset:
    """Parse a CADF file back into a :class:`TaskDataset`.

    Raises :class:`FormatError` on bad magic, version mismatch, truncation,
    trailing bytes, or non-finite floats.
    """
    path = Path(path)
    return dataset_from_bytes(path.read_bytes(), task_id=task_id or path.stem)


def dataset_from_bytes(blob: bytes, task_id: str = "") -> TaskDataset:
    if len(blob) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, split_u8, gh, gw, dim, count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    if split_u8 not in _U8_TO_SPLIT:
        raise FormatError(f"unknown split byte {split_u8}")
    if min(gh, gw, dim) < 1:
        raise FormatError("zero grid dimension")
    off = _HEADER.size
    cls_bytes = dim * 4
    patch_bytes = gh * gw * dim * 4
    feats = []
    for _ in range(count):
        if off + 3 > len(blob):
            raise FormatError("truncated record")
        label_u8, id_len = struct.unpack_from("<BH", blob, off)
        off += 3
        if label_u8 not in _U8_TO_LABEL:
            raise FormatError(f"unknown label byte {label_u8}")
        end = off + id_len + cls_bytes + patch_bytes
        if end > len(blob):
            raise FormatError("truncated record")
        image_id = blob[off : off + id_len].decode("utf-8")
        off += id_len
        cls = np.frombuffer(blob, dtype="<f4", count=dim, offset=off).copy()
        off += cls_bytes
        patches = (
            np.frombuffer(blob, dtype="<f4", count=gh * gw * dim, offset=off)
            .reshape(gh, gw, dim)
            .copy()
        )
        off += patch_bytes
        if not np.isfinite(cls).all() or not np.isfinite(patches).all():
            raise FormatError(f"non-finite float in record {image_id!r}")
        feats.append(FeatureGrid(image_id, _U8_TO_LABEL[label_u8], cls, patches))
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes")
    return TaskDataset(task_id, _U8_TO_SPLIT[split_u8], tuple(feats))


def datasets_equal(a: TaskDataset, b: TaskDataset) -> bool:
    """Value equality: split, shapes, and bit-exact per-image content."""
    if a.split != b.split or len(a) != len(b):
        return False
    for ga, gb in zip(a.features, b.features):
        if ga.image_id != gb.image_id or ga.label != gb.label:
            return False
        if ga.patches.shape != gb.patches.shape:
            return False
        if ga.cls.tobytes() != gb.cls.tobytes():
            return False
        if ga.patches.tobytes() != gb.patches.tobytes():
            return False
    return True


# ---------------------------------------------------------------------------
# Task manifests


@dataclass(frozen=True)
class ManifestEntry:
    task_id: str
    train_file: Path
    test_file: Path


def write_manifest(path: str | Path, entries: list[ManifestEntry]) -> None:
    """Write a task manifest; list order IS the continual training order."""
    path = Path(path)
    doc = {
        "tasks": [
            {
                "task_id": e.task_id,
                "train_file": str(e.train_file),
                "test_file": str(e.test_file),
            }
            for e in entries
        ]
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    """Load a manifest; relative file paths resolve against the manifest dir."""
    path = Path(path)
    doc = json.loads(path.read_text())
    base = path.parent
    entries = []
    seen = set()
    for item in doc["tasks"]:
        tid = item["task_id"]
        if tid in seen:
            raise ValueError(f"duplicate task_id {tid!r} in manifest")
        seen.add(tid)
        entries.append(
            ManifestEntry(
                task_id=tid,
                train_file=base / item["train_file"],
                test_file=base / item["test_file"],
            )
        )
    if not entries:
        raise ValueError("empty manifest")
    return entries


# ---------------------------------------------------------------------------
# Synthetic generator (test oracle)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic multi-task feature generator.

    ``cluster_spread`` is the per-coordinate noise std around each task's
    per-location base vectors; ``anomaly_delta`` the L2 norm of the single-
    patch perturbation applied to anomalous test images; ``task_separation``
    the CLS-center distance between adjacent tasks.
    """

    seed: int
    n_tasks: int = 1
    n_train: int = 20
    n_test_normal: int = 10
    n_test_anomalous: int = 10
    grid_h: int = 8
    grid_w: int = 8
    dim: int = 16
    cluster_spread: float = 0.05
    anomaly_delta: float = 2.0
    task_separation: float = 0.5

    def __post_init__(self):
        if self.n_tasks < 1 or self.n_train < 1:
            raise ValueError("need at least one task and one training image")
        if min(self.n_test_normal, self.n_test_anomalous) < 0:
            raise ValueError("negative test counts")
        if min(self.grid_h, self.grid_w, self.dim) < 1:
            raise ValueError("grid dimensions must be positive")
        if self.cluster_spread <= 0 or self.task_separation <= 0:
            raise ValueError("cluster_spread and task_separation must be > 0")
        if self.anomaly_delta < 0:
            raise ValueError("anomaly_delta must be >= 0")


def task_center(spec: SyntheticSpec, task_ordinal: int) -> np.ndarray:
    """Deterministic CLS center of task *task_ordinal* (0-based)."""
    mu = np.zeros(spec.dim, dtype=np.float64)
    mu[0] = spec.task_separation * task_ordinal
    return mu


def synthetic_task_id(task_ordinal: int) -> str:
    return f"t{task_ordinal:02d}"


def anomaly_cell(image_id: str) -> tuple[int, int] | None:
    """Ground-truth perturbed cell encoded in a synthetic image_id, if any."""
    if "@" not in image_id:
        return None
    _, _, loc = image_id.rpartition("@")
    i, _, j = loc.partition(",")
    return int(i), int(j)


def generate_synthetic(spec: SyntheticSpec) -> list[tuple[TaskDataset, TaskDataset]]:
    """Generate (train, test) dataset pairs for each task, bit-reproducibly.

    Per task ``t`` a single SplitMix64 stream seeded from (spec.seed, t)
    supplies every draw, in this order: per-location base vectors (row-major,
    standard normal), then per image (train, test-normal, test-anomalous in
    that order): CLS noise first, patch noise row-major. Anomalous images
    additionally draw one u64 (perturbed cell = value mod grid_h*grid_w) and
    a direction vector, normalized to length ``anomaly_delta`` and added to
    that cell's patch. The perturbed cell rides in the image_id after '@'.
    """
    gh, gw, dim = spec.grid_h, spec.grid_w, spec.dim
    n_cells = gh * gw
    sigma = spec.cluster_spread
    out = []
    for t in range(spec.n_tasks):
        stream = SplitMix64(derive_seed(spec.seed, t))
        tid = synthetic_task_id(t)
        mu = task_center(spec, t)
        base = stream.normal_block(n_cells * dim).reshape(gh, gw, dim)

        def draw_normal(image_id: str, label: str = LABEL_NORMAL) -> FeatureGrid:
            cls64 = mu + sigma * stream.normal_block(dim)
            patches64 = base + sigma * stream.normal_block(n_cells * dim).reshape(gh, gw, dim)
            return FeatureGrid(image_id, label, cls64.astype(np.float32), patches64.astype(np.float32))

        def draw_anomalous(image_idx: int) -> FeatureGrid:
            cls64 = mu + sigma * stream.normal_block(dim)
            patches64 = base + sigma * stream.normal_block(n_cells * dim).reshape(gh, gw, dim)
            cell = int(stream.next_u64() % n_cells)
            i, j = divmod(cell, gw)
            g = stream.normal_block(dim)
            norm = float(np.sqrt(np.dot(g, g)))
            if norm == 0.0:  # measure-zero guard
                g = np.zeros(dim)
                g[0] = 1.0
                norm = 1.0
            patches64[i, j] += spec.anomaly_delta * (g / norm)
            return FeatureGrid(
                f"{tid}-anom-{image_idx:04d}@{i},{j}",
                LABEL_ANOMALOUS,
                cls64.astype(np.float32),
                patches64.astype(np.float32),
            )

        train = [draw_normal(f"{tid}-train-{k:04d}") for k in range(spec.n_train)]
        test = [draw_normal(f"{tid}-norm-{k:04d}") for k in range(spec.n_test_normal)]
        test += [draw_anomalous(k) for k in range(spec.n_test_anomalous)]
        out.append(
            (
                TaskDataset(tid, SPLIT_TRAIN, tuple(train)),
                TaskDataset(tid, SPLIT_TEST, tuple(test)),
            )
        )
    return out


def materialize_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> Path:
    """Write synthetic tasks as CADF files plus a manifest; returns manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for train, test in generate_synthetic(spec):
        train_file = out_dir / f"{train.task_id}-train.cadf"
        test_file = out_dir / f"{test.task_id}-test.cadf"
        write_feature_file(train, train_file)
        write_feature_file(test, test_file)
        entries.append(
            ManifestEntry(train.task_id, Path(train_file.name), Path(test_file.name))
        )
    manifest = out_dir / "manifest.json"
    write_manifest(manifest, entries)
    return manifest
