"""Pydantic request/response models for the scoring service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class GridPayload(BaseModel):
    """One image's features, inline. patches is grid_h x grid_w rows of
    dim-length float lists."""

    image_id: str = "inline"
    cls: list[float]
    patches: list[list[list[float]]]


class BankSummary(BaseModel):
    task_id: str
    grid_h: int
    grid_w: int
    dim: int
    m: int
    train_count: int
    rho: float
    threshold: float
    payload_bytes: int


class FitRequest(BaseModel):
    features_path: str
    rho: float = Field(default=0.10, gt=0.0, le=1.0)
    radius: int = Field(default=3, ge=0)
    save_path: str | None = None


class LoadRequest(BaseModel):
    path: str


class InferRequest(BaseModel):
    grid: GridPayload | None = None
    features_path: str | None = None
    index: int = 0
    radius: int | None = Field(default=None, ge=0)
    task_id: str | None = None
    include_patch_scores: bool = False


class ScoreResponse(BaseModel):
    image_id: str
    routed_task: str
    image_score: float
    decision: str
    latency_ns: int
    patch_scores: list[list[float]] | None = None


class ScoreFileRequest(BaseModel):
    features_path: str
    radius: int | None = Field(default=None, ge=0)
    routing: str = "prototype"
    include_patch_scores: bool = False


class ScoreFileResponse(BaseModel):
    reports: list[ScoreResponse]


class ProtocolRequest(BaseModel):
    manifest: str
    method: str = "dinosaur"
    rho: float = Field(default=0.10, gt=0.0, le=1.0)
    radius: int = Field(default=3, ge=0)
    routing: str = "prototype"
    metric_kind: str = "auroc"
    seed: int = 0
    profile: bool = False
    out_dir: str | None = None


class MetricSummaryModel(BaseModel):
    final_mean: float
    fm: float
    per_task_f: list[float]


class ProtocolResponse(BaseModel):
    task_ids: list[str]
    summaries: dict[str, MetricSummaryModel]
    matrices: dict[str, list[list[float]]]
    fm_flag: str | None
    routing_accuracy: float | None
    storage_payload_total: int


class ProfileRequest(BaseModel):
    features_path: str
    index: int = 0
    runs: int = Field(default=30, ge=1)
    warmup: int = Field(default=5, ge=0)
    radius: int | None = Field(default=None, ge=0)


class ProfileResponse(BaseModel):
    runs: int
    warmup: int
    mean_ms: float
    std_ms: float
    fps: float


class HealthResponse(BaseModel):
    status: str
    tasks: list[str]
    default_radius: int
