"""Inference: prototype task routing, neighborhood-restricted patch scoring,
threshold decisions, and a flat-memory-bank baseline.

A patch at cell (i, j) is scored against the union of stored coresets within
Chebyshev radius r of (i, j) — at most (2r+1)^2 * M candidate vectors — and
its score is the L2 distance to the nearest candidate. The image score is the
maximum patch score.

The scan visits coreset cells row-major and, per cell, compares the cell's
vectors against every query patch whose window contains it (one contiguous
GEMM per cell, so a query is never compared against candidates outside its
window). Candidates are ranked by |c|^2 - 2 c.q with cached norms; the
winning candidate's distance is then recomputed as (c-q).(c-q) in float64,
which is cancellation-free — an exact self-match scores exactly 0.0. Ties
resolve to the first candidate in row-major cell order, lowest index within
a cell.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from .featstore import LABEL_ANOMALOUS, LABEL_NORMAL, FeatureGrid, TaskDataset
from .membank import BankRegistry, TaskMemoryBank
from .metrics import linear_percentile

FLAT_CORESET_RATIO = 0.05
FLAT_MIN_CORESET = 500
FLAT_REWEIGHT_NEIGHBORS = 3


@dataclass(frozen=True)
class Neighborhood:
    """Grid cells within Chebyshev radius *radius* of *center*, clipped to
    the grid. radius 0 is exactly the center cell."""

    center: tuple[int, int]
    radius: int
    cells: tuple[tuple[int, int], ...]


def neighborhood(i: int, j: int, radius: int, grid_h: int, grid_w: int) -> Neighborhood:
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if not (0 <= i < grid_h and 0 <= j < grid_w):
        raise ValueError("center outside grid")
    cells = tuple(
        (ii, jj)
        for ii in range(max(0, i - radius), min(grid_h, i + radius + 1))
        for jj in range(max(0, j - radius), min(grid_w, j + radius + 1))
    )
    return Neighborhood(center=(i, j), radius=radius, cells=cells)


@dataclass
class ScoreReport:
    """Per-image scoring outcome against one routed task bank."""

    image_id: str
    routed_task: str
    patch_scores: np.ndarray  # (grid_h, grid_w) float64
    image_score: float
    decision: str
    latency_ns: int = 0


def route(cls_vec: np.ndarray, registry: BankRegistry) -> str:
    """Task whose CLS prototype is nearest to *cls_vec* (earliest task wins ties)."""
    if len(registry) == 0:
        raise ValueError("empty registry")
    q = np.asarray(cls_vec, dtype=np.float64)
    dists = [float(np.linalg.norm(q - b.prototype.astype(np.float64))) for b in registry]
    return registry[int(np.argmin(dists))].task_id


def _check_shapes(shape, bank):
    if tuple(shape) != (bank.grid_h, bank.grid_w, bank.dim):
        raise ValueError(
            f"grid shape {tuple(shape)} does not match bank "
            f"{(bank.grid_h, bank.grid_w, bank.dim)}"
        )


def score_patch_maps(
    patches: np.ndarray, bank: TaskMemoryBank, radius: int, prefilter32: bool = True
) -> np.ndarray:
    """Patch-score maps for a batch: (n, grid_h, grid_w) float64.

    *patches* is (n, grid_h, grid_w, dim). ``prefilter32`` selects the
    float32 GEMM prefilter (default for batches); winners are always refined
    in float64.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    n, gh, gw, dim = patches.shape
    _check_shapes((gh, gw, dim), bank)
    m = bank.m
    v64 = bank.vectors64()
    norms64 = bank.cell_norms()
    if prefilter32:
        v = bank.vectors
        norms = bank.norms32()
        p = np.ascontiguousarray(patches, dtype=np.float32)
        inf = np.float32(np.inf)
    else:
        v = v64
        norms = norms64
        p = np.ascontiguousarray(patches, dtype=np.float64)
        inf = np.inf

    best_rel = np.full((n, gh, gw), inf, dtype=p.dtype)
    best_cell = np.zeros((n, gh, gw), dtype=np.int32)  # flat a*gw + b
    best_m = np.zeros((n, gh, gw), dtype=np.int32)
    for a in range(gh):
        i0, i1 = max(0, a - radius), min(gh, a + radius + 1)
        for b in range(gw):
            j0, j1 = max(0, b - radius), min(gw, b + radius + 1)
            di, dj = i1 - i0, j1 - j0
            q = np.ascontiguousarray(p[:, i0:i1, j0:j1]).reshape(n * di * dj, dim)
            rel = q @ v[a, b].T  # (n*di*dj, m)
            rel *= -2.0
            rel += norms[a, b]
            m_idx = np.argmin(rel, axis=1)
            m_val = np.take_along_axis(rel, m_idx[:, None], axis=1)[:, 0]
            m_idx = m_idx.reshape(n, di, dj)
            m_val = m_val.reshape(n, di, dj)
            window = best_rel[:, i0:i1, j0:j1]
            mask = m_val < window
            np.copyto(window, m_val, where=mask)
            np.copyto(best_m[:, i0:i1, j0:j1], m_idx.astype(np.int32), where=mask)
            np.copyto(best_cell[:, i0:i1, j0:j1], np.int32(a * gw + b), where=mask)

    # exact float64 recomputation of each winner's distance
    p64 = patches.reshape(n * gh * gw, dim).astype(np.float64, copy=False)
    flat_vec = v64.reshape(gh * gw * m, dim)
    winner = best_cell.reshape(-1).astype(np.int64) * m + best_m.reshape(-1)
    out = np.empty(n * gh * gw, dtype=np.float64)
    chunk = max(1, 2_000_000 // max(dim, 1))
    for lo in range(0, out.size, chunk):
        hi = min(out.size, lo + chunk)
        diff = flat_vec[winner[lo:hi]] - p64[lo:hi]
        d2 = np.einsum("nd,nd->n", diff, diff)
        out[lo:hi] = np.sqrt(np.maximum(d2, 0.0))
    return out.reshape(n, gh, gw)


def _decide(image_score: float, threshold: float) -> str:
    return LABEL_ANOMALOUS if image_score > threshold else LABEL_NORMAL


def score_image(grid: FeatureGrid, bank: TaskMemoryBank, radius: int) -> ScoreReport:
    """Score one image against one task bank at neighborhood radius *radius*.

    Single images take the full-float64 path.
    """
    t0 = time.perf_counter_ns()
    patch_scores = score_patch_maps(
        grid.patches[None], bank, radius, prefilter32=False
    )[0]
    image_score = float(patch_scores.max())
    latency = time.perf_counter_ns() - t0
    return ScoreReport(
        image_id=grid.image_id,
        routed_task=bank.task_id,
        patch_scores=patch_scores,
        image_score=image_score,
        decision=_decide(image_score, bank.threshold),
        latency_ns=latency,
    )


def infer(
    grid: FeatureGrid,
    registry: BankRegistry,
    radius: int,
    task_id: str | None = None,
) -> ScoreReport:
    """Route to the nearest prototype (or the oracle *task_id*) and score.

    The routed task's own threshold drives the decision.
    """
    t0 = time.perf_counter_ns()
    routed = task_id if task_id is not None else route(grid.cls, registry)
    bank = registry.get(routed)
    patch_scores = score_patch_maps(
        grid.patches[None], bank, radius, prefilter32=False
    )[0]
    image_score = float(patch_scores.max())
    latency = time.perf_counter_ns() - t0
    return ScoreReport(
        image_id=grid.image_id,
        routed_task=routed,
        patch_scores=patch_scores,
        image_score=image_score,
        decision=_decide(image_score, bank.threshold),
        latency_ns=latency,
    )


def score_dataset(
    dataset: TaskDataset,
    registry: BankRegistry,
    radius: int,
    task_id: str | None = None,
) -> list[ScoreReport]:
    """Batched routing + scoring of a whole dataset (latency not measured)."""
    routed = [
        task_id if task_id is not None else route(g.cls, registry)
        for g in dataset.features
    ]
    patches = np.stack([g.patches for g in dataset.features])
    reports: list[ScoreReport | None] = [None] * len(dataset)
    for tid in sorted(set(routed)):
        bank = registry.get(tid)
        rows = [k for k, r in enumerate(routed) if r == tid]
        maps = score_patch_maps(patches[rows], bank, radius)
        for pos, k in enumerate(rows):
            image_score = float(maps[pos].max())
            reports[k] = ScoreReport(
                image_id=dataset.features[k].image_id,
                routed_task=tid,
                patch_scores=maps[pos],
                image_score=image_score,
                decision=_decide(image_score, bank.threshold),
            )
    return reports  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Flat-bank baseline (single global coreset + replay, 3-NN re-weighted scores)


@dataclass(frozen=True)
class FlatBank:
    """Single global coreset over all patches of the fitted tasks."""

    task_ids: tuple[str, ...]
    vectors: np.ndarray  # (K, dim) float32
    threshold: float
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError("empty bank")
        v.flags.writeable = False
        object.__setattr__(self, "vectors", v)

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def vectors64(self) -> np.ndarray:
        if "v64" not in self._cache:
            self._cache["v64"] = self.vectors.astype(np.float64)
        return self._cache["v64"]

    def norms(self) -> np.ndarray:
        if "norms" not in self._cache:
            v = self.vectors64()
            self._cache["norms"] = np.einsum("kd,kd->k", v, v)
        return self._cache["norms"]

    def neighbor_table(self) -> np.ndarray:
        """(K, b) indices of each bank vector's b nearest bank vectors,
        self-inclusive, b = min(3, K)."""
        if "nn" not in self._cache:
            v = self.vectors64()
            k = self.size
            b = min(FLAT_REWEIGHT_NEIGHBORS, k)
            norms = self.norms()
            table = np.empty((k, b), dtype=np.int64)
            chunk = max(1, 2_000_000 // max(k, 1))
            for lo in range(0, k, chunk):
                hi = min(k, lo + chunk)
                d2 = norms[None, :] - 2.0 * (v[lo:hi] @ v.T) + norms[lo:hi, None]
                part = np.argpartition(d2, b - 1, axis=1)[:, :b] if b < k else np.tile(
                    np.arange(k), (hi - lo, 1)
                )
                order = np.take_along_axis(d2, part, axis=1).argsort(axis=1, kind="stable")
                table[lo:hi] = np.take_along_axis(part, order, axis=1)
            self._cache["nn"] = table
        return self._cache["nn"]


def _flat_nn(patches: np.ndarray, flat: FlatBank) -> tuple[np.ndarray, np.ndarray]:
    """Exact NN distance and match index per patch row ((n, dim) input)."""
    v64 = flat.vectors64()
    norms = flat.norms()
    q = np.asarray(patches, dtype=np.float64).reshape(-1, flat.dim)
    dists = np.empty(q.shape[0], dtype=np.float64)
    matches = np.empty(q.shape[0], dtype=np.int64)
    chunk = max(1, 4_000_000 // max(flat.size, 1))
    for lo in range(0, q.shape[0], chunk):
        hi = min(q.shape[0], lo + chunk)
        rel = norms[None, :] - 2.0 * (q[lo:hi] @ v64.T)
        idx = np.argmin(rel, axis=1)
        diff = v64[idx] - q[lo:hi]
        d2 = np.einsum("nd,nd->n", diff, diff)
        dists[lo:hi] = np.sqrt(np.maximum(d2, 0.0))
        matches[lo:hi] = idx
    return dists, matches


def flat_nn_distances(grid: FeatureGrid, flat: FlatBank) -> np.ndarray:
    """Raw nearest-neighbor distances before re-weighting, (grid_h, grid_w)."""
    gh, gw, dim = grid.patches.shape
    d, _ = _flat_nn(grid.patches.reshape(-1, dim), flat)
    return d.reshape(gh, gw)


def _reweighted_scores(patches: np.ndarray, flat: FlatBank) -> np.ndarray:
    """Per-patch scores w * d_nn with w = 1 - exp(d_nn) / sum_b exp(d_b),
    the sum running over the match's b nearest bank vectors (self included);
    computed shift-stably so large distances cannot overflow."""
    d, m = _flat_nn(patches, flat)
    nn = flat.neighbor_table()[m]  # (n, b)
    v64 = flat.vectors64()
    q = np.asarray(patches, dtype=np.float64).reshape(-1, flat.dim)
    diff = v64[nn] - q[:, None, :]  # (n, b, dim)
    nd = np.sqrt(np.maximum(np.einsum("nbd,nbd->nb", diff, diff), 0.0))
    shift = np.maximum(nd.max(axis=1), d)
    denom = np.exp(np.clip(nd - shift[:, None], -745.0, 0.0)).sum(axis=1)
    w = 1.0 - np.exp(np.clip(d - shift, -745.0, 0.0)) / denom
    return w * d


def fit_flat_bank(
    current: TaskDataset,
    replay: list[TaskDataset] | None = None,
    ratio: float = FLAT_CORESET_RATIO,
    min_size: int = FLAT_MIN_CORESET,
) -> FlatBank:
    """Fit the baseline's single flat bank on the current task plus replay.

    A greedy coreset keeps max(min_size, floor(ratio * pool)) vectors (capped
    at the pool size); the threshold is the 97.5th percentile of the
    re-weighted self-scores of every image that fed the bank.
    """
    from .membank import THRESHOLD_QUANTILE, greedy_coreset

    datasets = [current] + list(replay or [])
    dim = current.dim
    pool = np.concatenate(
        [np.stack([g.patches for g in ds.features]).reshape(-1, dim) for ds in datasets]
    )
    target = min(pool.shape[0], max(min_size, int(ratio * pool.shape[0])))
    coreset = greedy_coreset(pool, target)
    flat = FlatBank(
        task_ids=tuple(ds.task_id for ds in datasets),
        vectors=coreset.vectors,
        threshold=0.0,
    )
    self_scores = []
    for ds in datasets:
        for g in ds.features:
            self_scores.append(float(_reweighted_scores(g.patches, flat).max()))
    threshold = linear_percentile(self_scores, THRESHOLD_QUANTILE)
    return dataclasses.replace(flat, threshold=float(threshold))


def flat_score_image(grid: FeatureGrid, flat: FlatBank) -> ScoreReport:
    """Score one image against the flat bank (routed_task = latest fitted)."""
    t0 = time.perf_counter_ns()
    gh, gw, dim = grid.patches.shape
    if dim != flat.dim:
        raise ValueError(f"grid dim {dim} does not match bank dim {flat.dim}")
    scores = _reweighted_scores(grid.patches, flat).reshape(gh, gw)
    image_score = float(scores.max())
    latency = time.perf_counter_ns() - t0
    return ScoreReport(
        image_id=grid.image_id,
        routed_task=flat.task_ids[0],
        patch_scores=scores,
        image_score=image_score,
        decision=_decide(image_score, flat.threshold),
        latency_ns=latency,
    )


def flat_score_dataset(dataset: TaskDataset, flat: FlatBank) -> list[ScoreReport]:
    """Score every image in *dataset* against the flat bank (no latency)."""
    out = []
    for g in dataset.features:
        scores = _reweighted_scores(g.patches, flat).reshape(g.grid_h, g.grid_w)
        image_score = float(scores.max())
        out.append(
            ScoreReport(
                image_id=g.image_id,
                routed_task=flat.task_ids[0],
                patch_scores=scores,
                image_score=image_score,
                decision=_decide(image_score, flat.threshold),
            )
        )
    return out


def flat_bank_fit_and_score(
    train_tasks: list[TaskDataset],
    test_grid: FeatureGrid,
    replay_per_task: int = 100,
) -> ScoreReport:
    """One-shot baseline: fit on the last task plus a replay buffer of up to
    *replay_per_task* leading train images from each earlier task, then score."""
    if not train_tasks:
        raise ValueError("empty bank")
    current = train_tasks[-1]
    replay = [
        TaskDataset(ds.task_id, ds.split, ds.features[:replay_per_task])
        for ds in train_tasks[:-1]
    ]
    flat = fit_flat_bank(current, replay)
    return flat_score_image(test_grid, flat)
