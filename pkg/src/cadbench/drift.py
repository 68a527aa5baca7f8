"""Deterministic continuous-drift protocol: per-task augmentation schedules
and the pixel transforms (color, Gaussian blur, affine warp) that build the
10-task drifted image sequences from one source image set."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .rng import SplitMix64, derive_seed

TRACKS = ("color", "blur", "geometric")
N_DRIFT_TASKS = 10

# Fixed schedule tables; tasks are 1-based here, intensity strictly increases.
COLOR_BANDS = (
    (0.0, 0.05), (0.05, 0.1), (0.1, 0.15), (0.15, 0.2), (0.2, 0.25),
    (0.25, 0.3), (0.3, 0.35), (0.35, 0.4), (0.4, 0.45), (0.45, 0.5),
)
BLUR_PAIRS = (
    (1, 0.5), (3, 1.0), (5, 1.5), (7, 2.0), (9, 2.5),
    (11, 3.0), (13, 3.5), (15, 4.0), (17, 4.5), (19, 5.0),
)
GEO_NOMINALS = (
    (2, 1, 0.01, 1), (4, 2, 0.02, 2), (6, 3, 0.03, 3), (8, 4, 0.04, 4),
    (10, 5, 0.05, 5), (12, 6, 0.06, 6), (14, 7, 0.07, 7), (16, 8, 0.08, 8),
    (18, 9, 0.09, 9), (20, 10, 0.10, 10),
)

_LUMA = (0.299, 0.587, 0.114)  # Rec.601


@dataclass(frozen=True)
class ColorParams:
    lo: float
    hi: float


@dataclass(frozen=True)
class BlurParams:
    kernel: int
    sigma: float


@dataclass(frozen=True)
class GeoParams:
    rotation: float  # degrees
    tx: float  # pixels
    ty: float
    scale: float  # zoom factor is 1 + scale
    shear: float  # degrees, x-axis


@dataclass(frozen=True)
class DriftPlan:
    """Per-task augmentation parameters for one drift track.

    Geometric parameters are sampled once per task from the window just
    below the nominal tuple (uniforms in (0, 1], so the lower edge is
    exclusive and successive tasks are strictly ordered); color and blur
    tasks use the fixed tables directly.
    """

    track: str
    seed: int
    params: tuple

    @property
    def n_tasks(self) -> int:
        return len(self.params)

    def to_json(self) -> dict:
        return {
            "track": self.track,
            "seed": self.seed,
            "params": [asdict(p) for p in self.params],
        }


def make_plan(track: str, seed: int) -> DriftPlan:
    """Build the 10-task schedule for *track* ("color", "blur", "geometric")."""
    if track not in TRACKS:
        raise ValueError(f"unknown track {track!r}; expected one of {TRACKS}")
    if track == "color":
        params = tuple(ColorParams(lo, hi) for lo, hi in COLOR_BANDS)
    elif track == "blur":
        params = tuple(BlurParams(k, s) for k, s in BLUR_PAIRS)
    else:
        out = []
        for ordinal, (rot, trans, scale, shear) in enumerate(GEO_NOMINALS):
            stream = SplitMix64(derive_seed(seed, ordinal))
            u = stream.uniform_block(5)  # rotation, tx, ty, scale, shear
            out.append(
                GeoParams(
                    rotation=rot - 2.0 + u[0] * 2.0,
                    tx=trans - 1.0 + u[1] * 1.0,
                    ty=trans - 1.0 + u[2] * 1.0,
                    scale=scale - 0.01 + u[3] * 0.01,
                    shear=shear - 1.0 + u[4] * 1.0,
                )
            )
        params = tuple(out)
    return DriftPlan(track=track, seed=seed, params=params)


# ---------------------------------------------------------------------------
# Pixel transforms (uint8 HxWx3 in, uint8 HxWx3 out; float64 internally)


def _as_image(img: np.ndarray) -> np.ndarray:
    a = np.asarray(img)
    if a.ndim != 3 or a.shape[2] != 3 or a.dtype != np.uint8:
        raise ValueError("image must be (H, W, 3) uint8")
    return a


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0.0, 255.0).astype(np.uint8)


def apply_color(img: np.ndarray, v: float, signs: tuple[int, int, int] = (1, 1, 1)) -> np.ndarray:
    """Brightness, contrast, saturation shifts by multiplicative 1 + sign*v.

    Applied in that order; contrast anchors at the image's mean Rec.601
    luminance, saturation at per-pixel luminance. Each stage clamps to
    [0, 255]; quantization to uint8 happens once at the end.
    """
    img = _as_image(img)
    if not 0.0 <= v <= 0.5:
        raise ValueError("v must be in [0, 0.5]")
    fb, fc, fs_ = (1.0 + s * v for s in signs)
    x = img.astype(np.float64)
    x = np.clip(x * fb, 0.0, 255.0)
    luma = x[..., 0] * _LUMA[0] + x[..., 1] * _LUMA[1] + x[..., 2] * _LUMA[2]
    x = np.clip((x - luma.mean()) * fc + luma.mean(), 0.0, 255.0)
    luma = x[..., 0] * _LUMA[0] + x[..., 1] * _LUMA[1] + x[..., 2] * _LUMA[2]
    x = np.clip(luma[..., None] + (x - luma[..., None]) * fs_, 0.0, 255.0)
    return _quantize(x)


def gaussian_kernel(kernel: int, sigma: float) -> np.ndarray:
    """Normalized 1-D kernel g[i] ~ exp(-i^2 / 2 sigma^2), i in [-(k-1)/2, (k-1)/2]."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError("kernel size must be odd and >= 1")
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    half = (kernel - 1) // 2
    i = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(i**2) / (2.0 * sigma * sigma))
    return g / g.sum()


def _convolve_axis(x: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    half = (len(kernel) - 1) // 2
    if half == 0:
        return x
    pad = [(0, 0)] * x.ndim
    pad[axis] = (half, half)
    padded = np.pad(x, pad, mode="reflect")  # reflect-101: edge not repeated
    windows = np.lib.stride_tricks.sliding_window_view(padded, len(kernel), axis=axis)
    return np.einsum("...k,k->...", windows, kernel)


def apply_blur(img: np.ndarray, kernel: int, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, horizontal then vertical, reflect borders."""
    img = _as_image(img)
    g = gaussian_kernel(kernel, sigma)
    x = img.astype(np.float64)
    x = _convolve_axis(x, g, axis=1)
    x = _convolve_axis(x, g, axis=0)
    return _quantize(x)


def apply_geometric(
    img: np.ndarray,
    rotation: float,
    tx: float,
    ty: float,
    scale: float,
    shear: float,
) -> np.ndarray:
    """Affine warp about the image center: scale -> x-shear -> rotate ->
    translate, inverse-mapped with bilinear sampling and edge replication.

    *scale* is the zoom increment (factor 1 + scale); rotation/shear are in
    degrees, translation in pixels.
    """
    img = _as_image(img)
    h, w = img.shape[:2]
    theta = np.deg2rad(rotation)
    phi = np.deg2rad(shear)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    shear_m = np.array([[1.0, np.tan(phi)], [0.0, 1.0]])
    scale_m = np.eye(2) * (1.0 + scale)
    fwd = rot @ shear_m @ scale_m
    inv = np.linalg.inv(fwd)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    u = xs - cx - tx
    vcoord = ys - cy - ty
    sx = inv[0, 0] * u + inv[0, 1] * vcoord + cx
    sy = inv[1, 0] * u + inv[1, 1] * vcoord + cy
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0l = x0.astype(np.int64)
    y0l = y0.astype(np.int64)
    x0i = np.clip(x0l, 0, w - 1)
    x1i = np.clip(x0l + 1, 0, w - 1)
    y0i = np.clip(y0l, 0, h - 1)
    y1i = np.clip(y0l + 1, 0, h - 1)
    src = img.astype(np.float64)
    out = (
        src[y0i, x0i] * ((1 - fx) * (1 - fy))[..., None]
        + src[y0i, x1i] * (fx * (1 - fy))[..., None]
        + src[y1i, x0i] * ((1 - fx) * fy)[..., None]
        + src[y1i, x1i] * (fx * fy)[..., None]
    )
    return _quantize(out)


# ---------------------------------------------------------------------------
# PPM (P6) I/O, decoder-pluggable for other formats


def read_ppm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:2] != b"P6":
        raise ValueError(f"not a binary PPM (P6) file: {path}")
    # header tokens: magic, width, height, maxval; '#' comments allowed
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"truncated PPM header: {path}")
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    width, height, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"unsupported PPM maxval {maxval}: {path}")
    data = blob[pos : pos + width * height * 3]
    if len(data) != width * height * 3:
        raise ValueError(f"truncated PPM pixel data: {path}")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(img: np.ndarray, path: str | Path) -> None:
    img = _as_image(img)
    h, w = img.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def load_image(path: str | Path) -> np.ndarray:
    """PPM natively; other extensions go through Pillow when available."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover
        raise ValueError(f"no decoder wired for {path.suffix!r} files") from exc
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_image(img: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        write_ppm(img, path)
        return
    from PIL import Image

    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_as_image(img), mode="RGB").save(path)


# ---------------------------------------------------------------------------
# Task building


_SPLIT_DIRS = (("train",), ("test", "normal"), ("test", "anomalous"))


def _list_images(dirpath: Path) -> list[Path]:
    if not dirpath.is_dir():
        return []
    exts = {".ppm", ".png", ".jpg", ".jpeg", ".bmp"}
    return sorted(p for p in dirpath.iterdir() if p.suffix.lower() in exts)


def build_drift_tasks(source_dir: str | Path, plan: DriftPlan, out_dir: str | Path) -> Path:
    """Materialize the drifted task sequence from a source image tree.

    Expects ``source_dir/train``, ``source_dir/test/normal`` and optionally
    ``source_dir/test/anomalous``. Emits ``out_dir/task_NN/<same tree>``, a
    ``manifest.json`` listing tasks in drift order, and a
    ``drift_params.json`` sidecar with the plan plus every sampled per-image
    parameter. Color tracks draw v and per-attribute signs per image from
    SplitMix64(seed, task ordinal, image index); blur and geometric tracks
    apply the task's fixed parameters to every image.
    """
    source_dir = Path(source_dir)
    out_dir = Path(out_dir)
    sources: list[tuple[tuple[str, ...], Path]] = []
    for parts in _SPLIT_DIRS:
        for p in _list_images(source_dir.joinpath(*parts)):
            sources.append((parts, p))
    if not any(parts == ("train",) for parts, _ in sources):
        raise ValueError(f"empty directory: no train images under {source_dir}")

    manifest_tasks = []
    sidecar_tasks = []
    for ordinal, params in enumerate(plan.params):
        task_id = f"task_{ordinal + 1:02d}"
        task_dir = out_dir / task_id
        image_params = []
        for idx, (parts, src_path) in enumerate(sources):
            img = load_image(src_path)
            record: dict = {"source": str(src_path), "split": "/".join(parts)}
            if plan.track == "color":
                stream = SplitMix64(derive_seed(plan.seed, ordinal, idx))
                u = stream.uniform_block(1)[0]
                v = params.lo + u * (params.hi - params.lo)
                signs = tuple(1 if stream.next_u64() & 1 == 0 else -1 for _ in range(3))
                img = apply_color(img, v, signs)
                record.update(v=v, signs=list(signs))
            elif plan.track == "blur":
                img = apply_blur(img, params.kernel, params.sigma)
            else:
                img = apply_geometric(
                    img, params.rotation, params.tx, params.ty, params.scale, params.shear
                )
            dest = task_dir.joinpath(*parts) / src_path.name
            save_image(img, dest)
            record["output"] = str(dest.relative_to(out_dir))
            image_params.append(record)
        manifest_tasks.append(
            {
                "task_id": task_id,
                "train_dir": f"{task_id}/train",
                "test_normal_dir": f"{task_id}/test/normal",
                "test_anomalous_dir": f"{task_id}/test/anomalous",
            }
        )
        sidecar_tasks.append(
            {"task_id": task_id, "params": asdict(params), "images": image_params}
        )

    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps({"tasks": manifest_tasks}, indent=2) + "\n")
    sidecar = {"plan": plan.to_json(), "tasks": sidecar_tasks}
    (out_dir / "drift_params.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return manifest_path
