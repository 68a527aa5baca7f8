"""Spatially-indexed memory banks: per-location greedy coresets, CLS
prototypes, threshold calibration, storage accounting, and the CADB file
format (byte layout in FORMATS.md)."""

from __future__ import annotations

import dataclasses
import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .featstore import LABEL_NORMAL, FormatError, TaskDataset
from .metrics import linear_percentile

BANK_MAGIC = b"CADB"
BANK_VERSION = 1
MIN_CORESET = 20
THRESHOLD_QUANTILE = 0.975


@dataclass(frozen=True)
class LocationCoreset:
    """Coreset at one grid cell: selected vectors plus the training-image
    indices they came from (None when provenance was not persisted)."""

    vectors: np.ndarray  # (M, dim) float32, read-only
    source_indices: np.ndarray | None  # (M,) int32

    def __len__(self) -> int:
        return self.vectors.shape[0]


def coreset_size(train_count: int, rho: float) -> int:
    """Per-location coreset size: max(20, floor(D*rho)), capped at D."""
    if not 0.0 < rho <= 1.0:
        raise ValueError("rho must be in (0,1]")
    if train_count < 1:
        raise ValueError("train_count must be >= 1")
    return min(train_count, max(MIN_CORESET, math.floor(train_count * rho)))


def greedy_coreset(pool: np.ndarray, m_target: int) -> LocationCoreset:
    """Farthest-point coreset selection over *pool* ((P, dim) array).

    The seed element is the pool point with maximum L2 distance from the pool
    mean; each subsequent pick maximizes the minimum distance to the selected
    set. Ties break toward the lowest index. Deterministic; squared distances
    are compared in float64.
    """
    pool = np.asarray(pool)
    if pool.ndim != 2 or pool.shape[0] < 1:
        raise ValueError("empty pool")
    if m_target < 1:
        raise ValueError("m_target must be >= 1")
    p64 = pool.astype(np.float64, copy=False)
    n = p64.shape[0]
    m = min(m_target, n)
    mean = p64.mean(axis=0)
    dist = ((p64 - mean) ** 2).sum(axis=1)
    selected = np.empty(m, dtype=np.int32)
    idx = int(np.argmax(dist))
    selected[0] = idx
    mins = ((p64 - p64[idx]) ** 2).sum(axis=1)
    mins[idx] = -1.0  # never re-pick a selected index
    for k in range(1, m):
        idx = int(np.argmax(mins))
        selected[k] = idx
        np.minimum(mins, ((p64 - p64[idx]) ** 2).sum(axis=1), out=mins)
        mins[idx] = -1.0
    vectors = np.ascontiguousarray(pool[selected], dtype=np.float32)
    vectors.flags.writeable = False
    return LocationCoreset(vectors=vectors, source_indices=selected)


@dataclass(frozen=True)
class TaskMemoryBank:
    """One task's immutable memory: per-location coresets (a rectangular
    (grid_h, grid_w, M, dim) tensor), the CLS prototype, and the calibrated
    score threshold."""

    task_id: str
    rho: float
    train_count: int
    threshold: float
    prototype: np.ndarray  # (dim,) float32
    vectors: np.ndarray  # (grid_h, grid_w, M, dim) float32
    source_indices: np.ndarray | None = None  # (grid_h, grid_w, M) int32
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        prototype = np.ascontiguousarray(self.prototype, dtype=np.float32)
        if vectors.ndim != 4:
            raise ValueError("vectors must be (grid_h, grid_w, M, dim)")
        if prototype.shape != (vectors.shape[3],):
            raise ValueError("prototype dim mismatch")
        vectors.flags.writeable = False
        prototype.flags.writeable = False
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "prototype", prototype)

    @property
    def grid_h(self) -> int:
        return self.vectors.shape[0]

    @property
    def grid_w(self) -> int:
        return self.vectors.shape[1]

    @property
    def m(self) -> int:
        return self.vectors.shape[2]

    @property
    def dim(self) -> int:
        return self.vectors.shape[3]

    def coreset(self, i: int, j: int) -> LocationCoreset:
        idx = self.source_indices[i, j] if self.source_indices is not None else None
        return LocationCoreset(vectors=self.vectors[i, j], source_indices=idx)

    # scoring working copies, built once on demand
    def vectors64(self) -> np.ndarray:
        if "v64" not in self._cache:
            self._cache["v64"] = self.vectors.astype(np.float64)
        return self._cache["v64"]

    def cell_norms(self) -> np.ndarray:
        """Squared L2 norms per stored vector, (grid_h, grid_w, M) float64."""
        if "norms" not in self._cache:
            v = self.vectors64()
            self._cache["norms"] = np.einsum("ijkd,ijkd->ijk", v, v)
        return self._cache["norms"]

    def norms32(self) -> np.ndarray:
        if "norms32" not in self._cache:
            self._cache["norms32"] = self.cell_norms().astype(np.float32)
        return self._cache["norms32"]


def fit_task(train: TaskDataset, rho: float, radius: int) -> TaskMemoryBank:
    """Build a task's memory bank from its normal training images.

    Pools every training feature vector per grid cell, selects a greedy
    coreset of size max(20, floor(D*rho)) (capped at D) at each cell,
    stores the mean CLS token as the task prototype, and calibrates the
    anomaly threshold as the 97.5th percentile of the training images' own
    scores against the freshly built bank at neighborhood radius *radius*.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if any(g.label != LABEL_NORMAL for g in train.features):
        raise ValueError("anomalous label in training set")
    d_count = len(train)
    m = coreset_size(d_count, rho)
    gh, gw, dim = train.grid_h, train.grid_w, train.dim
    patches = np.stack([g.patches for g in train.features])  # (D, gh, gw, dim)
    vectors = np.empty((gh, gw, m, dim), dtype=np.float32)
    indices = np.empty((gh, gw, m), dtype=np.int32)
    for i in range(gh):
        for j in range(gw):
            cs = greedy_coreset(patches[:, i, j, :], m)
            vectors[i, j] = cs.vectors
            indices[i, j] = cs.source_indices
    cls_stack = np.stack([g.cls for g in train.features]).astype(np.float64)
    prototype = cls_stack.mean(axis=0).astype(np.float32)
    bank = TaskMemoryBank(
        task_id=train.task_id,
        rho=rho,
        train_count=d_count,
        threshold=0.0,
        prototype=prototype,
        vectors=vectors,
        source_indices=indices,
    )
    from .scoring import score_patch_maps  # deferred: scoring depends on this module

    maps = score_patch_maps(patches, bank, radius)
    self_scores = maps.reshape(d_count, -1).max(axis=1)
    threshold = linear_percentile(self_scores, THRESHOLD_QUANTILE)
    return dataclasses.replace(bank, threshold=float(threshold))


def storage_bytes(bank: TaskMemoryBank) -> tuple[int, int]:
    """(payload bytes, measured serialized size) of a bank.

    Payload counts the coreset tensor plus the prototype at 4 bytes per
    float; the serialized file may add at most 4096 B of header/metadata.
    """
    payload = bank.grid_h * bank.grid_w * bank.m * bank.dim * 4 + bank.dim * 4
    return payload, len(bank_to_bytes(bank))


# ---------------------------------------------------------------------------
# CADB serialization

_BANK_FIXED = struct.Struct("<HHHHIdd")  # grid_h grid_w dim m train_count rho threshold


def bank_to_bytes(bank: TaskMemoryBank) -> bytes:
    ident = bank.task_id.encode("utf-8")
    if len(ident) > 0xFFFF:
        raise ValueError("task_id longer than 65535 bytes")
    return b"".join(
        [
            BANK_MAGIC,
            struct.pack("<I", BANK_VERSION),
            struct.pack("<H", len(ident)),
            ident,
            _BANK_FIXED.pack(
                bank.grid_h,
                bank.grid_w,
                bank.dim,
                bank.m,
                bank.train_count,
                bank.rho,
                bank.threshold,
            ),
            bank.prototype.astype("<f4", copy=False).tobytes(),
            bank.vectors.astype("<f4", copy=False).tobytes(),
        ]
    )


def bank_from_bytes(blob: bytes) -> TaskMemoryBank:
    if len(blob) < 10:
        raise FormatError("truncated header")
    if blob[:4] != BANK_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != BANK_VERSION:
        raise FormatError(f"unsupported version {version}")
    (id_len,) = struct.unpack_from("<H", blob, 8)
    off = 10
    if off + id_len + _BANK_FIXED.size > len(blob):
        raise FormatError("truncated header")
    task_id = blob[off : off + id_len].decode("utf-8")
    off += id_len
    gh, gw, dim, m, train_count, rho, threshold = _BANK_FIXED.unpack_from(blob, off)
    off += _BANK_FIXED.size
    if min(gh, gw, dim, m) < 1:
        raise FormatError("zero bank dimension")
    proto_n, vec_n = dim, gh * gw * m * dim
    end = off + 4 * (proto_n + vec_n)
    if end != len(blob):
        raise FormatError("truncated file" if end > len(blob) else "trailing bytes")
    prototype = np.frombuffer(blob, dtype="<f4", count=proto_n, offset=off).copy()
    off += 4 * proto_n
    vectors = (
        np.frombuffer(blob, dtype="<f4", count=vec_n, offset=off)
        .reshape(gh, gw, m, dim)
        .copy()
    )
    if not np.isfinite(prototype).all() or not np.isfinite(vectors).all():
        raise FormatError("non-finite float in bank")
    return TaskMemoryBank(
        task_id=task_id,
        rho=rho,
        train_count=train_count,
        threshold=threshold,
        prototype=prototype,
        vectors=vectors,
        source_indices=None,
    )


def save_bank(bank: TaskMemoryBank, path: str | Path) -> int:
    blob = bank_to_bytes(bank)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return len(blob)


def load_bank(path: str | Path) -> TaskMemoryBank:
    return bank_from_bytes(Path(path).read_bytes())


def bank_hash(bank: TaskMemoryBank) -> str:
    """SHA-256 over the serialized bank; stable iff the bank is unchanged."""
    return hashlib.sha256(bank_to_bytes(bank)).hexdigest()


def banks_equal(a: TaskMemoryBank, b: TaskMemoryBank) -> bool:
    """Bit-exact equality of everything the CADB file persists."""
    return bank_to_bytes(a) == bank_to_bytes(b)


class BankRegistry:
    """Ordered collection of task banks; order is the training order."""

    def __init__(self, banks: list[TaskMemoryBank] | None = None):
        self._banks: list[TaskMemoryBank] = []
        for b in banks or []:
            self.add(b)

    def add(self, bank: TaskMemoryBank) -> None:
        if any(b.task_id == bank.task_id for b in self._banks):
            raise ValueError(f"duplicate task_id {bank.task_id!r}")
        if self._banks:
            first = self._banks[0]
            if (bank.grid_h, bank.grid_w, bank.dim) != (first.grid_h, first.grid_w, first.dim):
                raise ValueError("bank grid shape mismatch")
        self._banks.append(bank)

    def get(self, task_id: str) -> TaskMemoryBank:
        for b in self._banks:
            if b.task_id == task_id:
                return b
        raise KeyError(task_id)

    @property
    def task_ids(self) -> list[str]:
        return [b.task_id for b in self._banks]

    def __iter__(self):
        return iter(self._banks)

    def __len__(self) -> int:
        return len(self._banks)

    def __getitem__(self, i: int) -> TaskMemoryBank:
        return self._banks[i]
