"""End-to-end continual protocols: sequential fitting, lower-triangular
evaluation, hyperparameter sweeps, latency/storage profiling, and report
files (report.md, matrices.csv, scores.csv, profile.csv)."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import featstore as fs
from . import membank as mb
from . import metrics as mx
from . import scoring as sc

METHODS = ("dinosaur", "flat_baseline")
ROUTINGS = ("prototype", "oracle")
DEFAULT_RHO = 0.10
DEFAULT_RADIUS = 3
SWEEP_RHOS = (0.01, 0.025, 0.05, 0.10, 0.20)
SWEEP_RADII = (0, 1, 2, 3, 4)
REPLAY_PER_TASK = 100


@dataclass
class ProtocolConfig:
    manifest: Path
    method: str = "dinosaur"
    rho: float = DEFAULT_RHO
    radius: int = DEFAULT_RADIUS
    routing: str = "prototype"
    metric_kind: str = "auroc"
    seed: int = 0
    profile: bool = False
    replay_per_task: int = REPLAY_PER_TASK
    sweep_rhos: tuple[float, ...] | None = None
    sweep_radii: tuple[int, ...] | None = None

    def __post_init__(self):
        self.manifest = Path(self.manifest)
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.routing not in ROUTINGS:
            raise ValueError(f"routing must be one of {ROUTINGS}")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must be in (0,1]")
        if self.radius < 0:
            raise ValueError("radius must be >= 0")
        if self.metric_kind not in mx.METRIC_KINDS:
            raise ValueError(f"metric_kind must be one of {mx.METRIC_KINDS}")

    def echo(self) -> dict:
        d = dict(self.__dict__)
        d["manifest"] = str(self.manifest)
        return d


@dataclass
class StageRecord:
    task_id: str
    fit_seconds: float
    eval_seconds: float
    storage_payload: int
    storage_serialized: int


@dataclass
class ProfileStats:
    runs: int
    warmup: int
    mean_ms: float
    std_ms: float
    fps: float
    latencies_ms: tuple[float, ...]


@dataclass
class RunReport:
    config: dict
    task_ids: list[str]
    matrices: dict[str, mx.EvalMatrix]
    summaries: dict[str, mx.MetricSummary]
    fm_flag: str | None
    stages: list[StageRecord]
    hash_history: list[list[str]]
    routing_accuracy: float | None
    final_reports: list[sc.ScoreReport]
    profile: ProfileStats | None = None

    def summary_row(self, method: str | None = None) -> dict:
        method = method or self.config.get("method", "")
        return {
            "method": method,
            "auroc": self.summaries["auroc"].final_mean,
            "accuracy": self.summaries["accuracy"].final_mean,
            "recall": self.summaries["recall"].final_mean,
            "fm": self.summaries[self.config.get("metric_kind", "auroc")].fm,
        }


def metric_values(reports: list[sc.ScoreReport], labels: np.ndarray) -> dict[str, float]:
    """AUROC / accuracy / recall for one test set's reports; decisions come
    from each report's routed threshold."""
    scores = np.array([r.image_score for r in reports])
    decided = np.array([r.decision == fs.LABEL_ANOMALOUS for r in reports])
    accuracy = float((decided == labels).mean())
    n_pos = int(labels.sum())
    recall = float(decided[labels].sum() / n_pos) if n_pos else 0.0
    return {
        "auroc": mx.auroc(scores, labels),
        "accuracy": accuracy,
        "recall": recall,
    }


def run_protocol(config: ProtocolConfig, out_dir: str | Path | None = None) -> RunReport:
    """Train sequentially over the manifest's tasks and evaluate the lower
    triangle a[t][j] for AUROC, accuracy, and recall.

    The spatial-memory method never revisits old features; the flat baseline
    is refit each stage on the current task plus a replay buffer of up to
    ``replay_per_task`` leading train images per previous task. Partial
    report files are flushed if a stage fails and *out_dir* is set.
    """
    entries = fs.load_manifest(config.manifest)
    task_ids = [e.task_id for e in entries]
    matrices = {kind: mx.EvalMatrix(kind) for kind in mx.METRIC_KINDS}
    stages: list[StageRecord] = []
    hash_history: list[list[str]] = []
    registry = mb.BankRegistry()
    flat: sc.FlatBank | None = None
    replay: list[fs.TaskDataset] = []
    test_cache: dict[str, fs.TaskDataset] = {}
    baseline_hashes: list[str] = []
    final_reports: list[sc.ScoreReport] = []
    routing_hits = routing_total = 0

    try:
        for t, entry in enumerate(entries):
            train = fs.read_feature_file(entry.train_file, task_id=entry.task_id)
            test_cache[entry.task_id] = fs.read_feature_file(
                entry.test_file, task_id=entry.task_id
            )
            t0 = time.perf_counter()
            if config.method == "dinosaur":
                bank = mb.fit_task(train, rho=config.rho, radius=config.radius)
                registry.add(bank)
                baseline_hashes.append(mb.bank_hash(bank))
                payload, serialized = mb.storage_bytes(bank)
            else:
                flat = sc.fit_flat_bank(train, replay)
                replay.append(
                    fs.TaskDataset(
                        train.task_id, train.split,
                        train.features[: config.replay_per_task],
                    )
                )
                payload = flat.size * flat.dim * 4
                serialized = payload
            fit_seconds = time.perf_counter() - t0

            t0 = time.perf_counter()
            is_final = t == len(entries) - 1
            row = {kind: [] for kind in mx.METRIC_KINDS}
            for j in range(t + 1):
                tid = task_ids[j]
                test = test_cache[tid]
                if config.method == "dinosaur":
                    oracle_tid = tid if config.routing == "oracle" else None
                    reports = sc.score_dataset(test, registry, config.radius, task_id=oracle_tid)
                else:
                    reports = sc.flat_score_dataset(test, flat)
                values = metric_values(reports, test.labels())
                for kind in mx.METRIC_KINDS:
                    row[kind].append(values[kind])
                if is_final:
                    final_reports.extend(reports)
                    if config.method == "dinosaur" and config.routing == "prototype":
                        routing_hits += sum(r.routed_task == tid for r in reports)
                        routing_total += len(reports)
            for kind in mx.METRIC_KINDS:
                matrices[kind].add_stage(row[kind])
            eval_seconds = time.perf_counter() - t0

            if config.method == "dinosaur":
                current = [mb.bank_hash(b) for b in registry]
                if current != baseline_hashes:
                    raise RuntimeError("stage isolation violated: a prior bank changed")
                hash_history.append(current)
            else:
                hash_history.append([])
            stages.append(
                StageRecord(
                    task_id=entry.task_id,
                    fit_seconds=fit_seconds,
                    eval_seconds=eval_seconds,
                    storage_payload=payload,
                    storage_serialized=serialized,
                )
            )
    except Exception:
        if out_dir is not None:
            _write_partial(Path(out_dir), config, matrices, stages)
        raise

    fm_flag = None
    summaries = {}
    for kind, matrix in matrices.items():
        if matrix.n_stages >= 2:
            summaries[kind] = mx.forgetting(matrix)
        else:
            fm_flag = "T<2"
            summaries[kind] = mx.MetricSummary(
                final_mean=float(np.mean(matrix.rows[-1])), fm=0.0, per_task_f=()
            )

    profile = None
    if config.profile and config.method == "dinosaur" and len(registry):
        sample = test_cache[task_ids[0]].features[0]
        profile = profile_inference(registry, sample, radius=config.radius)

    report = RunReport(
        config=config.echo(),
        task_ids=task_ids,
        matrices=matrices,
        summaries=summaries,
        fm_flag=fm_flag,
        stages=stages,
        hash_history=hash_history,
        routing_accuracy=(
            routing_hits / routing_total if routing_total else None
        ),
        final_reports=final_reports,
        profile=profile,
    )
    if out_dir is not None:
        write_report_files(report, Path(out_dir))
    return report


def profile_inference(
    registry: mb.BankRegistry,
    grid: fs.FeatureGrid,
    runs: int = 30,
    warmup: int = 5,
    radius: int = DEFAULT_RADIUS,
) -> ProfileStats:
    """Monotonic-clock latency of infer() (routing included), single worker.

    Warmup runs are excluded from the statistics; fps = 1000 / mean_ms.
    """
    from threadpoolctl import threadpool_limits

    latencies = []
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            sc.infer(grid, registry, radius)
        for _ in range(runs):
            t0 = time.perf_counter_ns()
            sc.infer(grid, registry, radius)
            latencies.append((time.perf_counter_ns() - t0) / 1e6)
    arr = np.array(latencies)
    mean = float(arr.mean())
    return ProfileStats(
        runs=runs,
        warmup=warmup,
        mean_ms=mean,
        std_ms=float(arr.std()),
        fps=1000.0 / mean if mean > 0 else float("inf"),
        latencies_ms=tuple(latencies),
    )


def profile_fit(train: fs.TaskDataset, rho: float, radius: int) -> tuple[mb.TaskMemoryBank, float]:
    """Fit a task single-worker and report the wall-clock seconds."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        t0 = time.perf_counter()
        bank = mb.fit_task(train, rho=rho, radius=radius)
        dt = time.perf_counter() - t0
    return bank, dt


# ---------------------------------------------------------------------------
# Sweeps


@dataclass
class SweepResult:
    rhos: tuple[float, ...]
    radii: tuple[int, ...]
    values: list[list[float | None]]  # [rho][radius] mean final AUROC
    errors: dict[tuple[float, int], str] = field(default_factory=dict)

    def to_markdown(self) -> str:
        head = "| coreset ratio | " + " | ".join(f"r={r}" for r in self.radii) + " |"
        sep = "|" + "---|" * (len(self.radii) + 1)
        lines = [head, sep]
        for rho, row in zip(self.rhos, self.values):
            cells = " | ".join("—" if v is None else f"{v:.3f}" for v in row)
            lines.append(f"| {rho:g} | {cells} |")
        return "\n".join(lines)


def run_sweep(config: ProtocolConfig) -> SweepResult:
    """One full protocol run per (rho, radius) grid cell; failures are
    recorded per cell and do not stop the rest of the grid."""
    rhos = tuple(config.sweep_rhos or SWEEP_RHOS)
    radii = tuple(config.sweep_radii or SWEEP_RADII)
    if not rhos or not radii:
        raise ValueError("sweep grids must be non-empty")
    values: list[list[float | None]] = []
    errors: dict[tuple[float, int], str] = {}
    for rho in rhos:
        row: list[float | None] = []
        for radius in radii:
            try:
                cell = ProtocolConfig(
                    manifest=config.manifest,
                    method=config.method,
                    rho=rho,
                    radius=radius,
                    routing=config.routing,
                    metric_kind=config.metric_kind,
                    seed=config.seed,
                    replay_per_task=config.replay_per_task,
                )
                report = run_protocol(cell)
                row.append(report.summaries["auroc"].final_mean)
            except Exception as exc:  # per-cell containment
                errors[(rho, radius)] = str(exc)
                row.append(None)
        values.append(row)
    return SweepResult(rhos=rhos, radii=radii, values=values, errors=errors)


# ---------------------------------------------------------------------------
# Report emission


def _matrix_csv_lines(matrices: dict[str, mx.EvalMatrix], task_ids: list[str]) -> list[str]:
    lines = ["metric,stage_task,eval_task,value"]
    for kind, matrix in matrices.items():
        for t, row in enumerate(matrix.rows):
            for j, v in enumerate(row):
                lines.append(f"{kind},{task_ids[t]},{task_ids[j]},{v!r}")
    return lines


def _write_partial(out_dir, config, matrices, stages):
    out_dir.mkdir(parents=True, exist_ok=True)
    task_ids = [s.task_id for s in stages]
    (out_dir / "matrices.csv").write_text(
        "\n".join(_matrix_csv_lines(matrices, task_ids)) + "\n"
    )
    (out_dir / "report.md").write_text(
        "# Continual protocol report (PARTIAL: run failed)\n\n```json\n"
        + json.dumps(config.echo(), indent=2)
        + "\n```\n"
    )


def write_report_files(report: RunReport, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)

    (out_dir / "matrices.csv").write_text(
        "\n".join(_matrix_csv_lines(report.matrices, report.task_ids)) + "\n"
    )

    score_lines = ["image_id,routed_task,image_score,decision,latency_ns"]
    for r in report.final_reports:
        score_lines.append(
            f"{r.image_id},{r.routed_task},{r.image_score!r},{r.decision},{r.latency_ns}"
        )
    (out_dir / "scores.csv").write_text("\n".join(score_lines) + "\n")

    if report.profile is not None:
        prof_lines = ["run,latency_ms"]
        for k, ms in enumerate(report.profile.latencies_ms):
            prof_lines.append(f"{k},{ms!r}")
        prof_lines.append(f"mean_ms,{report.profile.mean_ms!r}")
        prof_lines.append(f"std_ms,{report.profile.std_ms!r}")
        prof_lines.append(f"fps,{report.profile.fps!r}")
        (out_dir / "profile.csv").write_text("\n".join(prof_lines) + "\n")

    method = report.config.get("method", "")
    lines = [
        "# Continual protocol report",
        "",
        "```json",
        json.dumps(report.config, indent=2),
        "```",
        "",
        "## Summary (final stage, averaged over tasks)",
        "",
        "| Method | AUROC | Acc | Recall | FM |",
        "|---|---|---|---|---|",
    ]
    s = report.summaries
    fm = s[report.config.get("metric_kind", "auroc")].fm
    lines.append(
        f"| {method} | {s['auroc'].final_mean:.3f} | {s['accuracy'].final_mean:.3f} "
        f"| {s['recall'].final_mean:.3f} | {fm:.3f} |"
    )
    if report.fm_flag:
        lines.append("")
        lines.append(f"FM flag: {report.fm_flag} (single-task run; FM reported as 0).")
    if report.routing_accuracy is not None:
        lines.append("")
        lines.append(f"Prototype routing accuracy (final stage): {report.routing_accuracy:.3f}")
    lines += [
        "",
        "## Stages",
        "",
        "| # | task | fit s | eval s | payload B | serialized B |",
        "|---|---|---|---|---|---|",
    ]
    for k, st in enumerate(report.stages):
        lines.append(
            f"| {k + 1} | {st.task_id} | {st.fit_seconds:.2f} | {st.eval_seconds:.2f} "
            f"| {st.storage_payload} | {st.storage_serialized} |"
        )
    total_payload = sum(st.storage_payload for st in report.stages)
    lines.append("")
    lines.append(f"Total bank payload: {total_payload} B ({total_payload / 1e6:.1f} MB)")
    for kind, matrix in report.matrices.items():
        lines += ["", f"## Matrix: {kind}", ""]
        header = "| stage \\ task | " + " | ".join(report.task_ids) + " |"
        lines.append(header)
        lines.append("|" + "---|" * (len(report.task_ids) + 1))
        for t, row in enumerate(matrix.rows):
            cells = [f"{v:.3f}" for v in row] + [""] * (len(report.task_ids) - len(row))
            lines.append(f"| {report.task_ids[t]} | " + " | ".join(cells) + " |")
    if report.profile is not None:
        p = report.profile
        lines += [
            "",
            "## Inference profile",
            "",
            f"mean {p.mean_ms:.1f} ms ± {p.std_ms:.1f} ms over {p.runs} runs "
            f"({p.warmup} warmup excluded), {p.fps:.1f} FPS, single worker.",
        ]
    (out_dir / "report.md").write_text("\n".join(lines) + "\n")
