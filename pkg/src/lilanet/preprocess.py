"""Ground removal, cylindrical crop, fixed-size downsampling and unit-sphere normalization."""
from __future__ import annotations

import configparser
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .geometry_io import EmptyCloudError, RawPointCloud

DEGENERATE_SCALE = 1e-12


class EmptyAfterFilterError(EmptyCloudError):
    def __init__(self, stage: str, message: str = ""):
        self.stage = stage
        super().__init__(f"{stage}: {message or 'no points left'}")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        super().__init__(f"preprocessing failed at stage {stage!r}: {cause}")


@dataclass(frozen=True)
class Plane:
    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if not norm > 0:
            raise ValueError("plane normal must be non-zero")
        object.__setattr__(self, "normal", n / norm)
        object.__setattr__(self, "offset", float(self.offset) / norm)

    def distance(self, points: np.ndarray) -> np.ndarray:
        """Unsigned point-to-plane distances."""
        return np.abs(points @ self.normal + self.offset)

    def to_dict(self) -> dict:
        return {"normal": self.normal.tolist(), "offset": self.offset}


@dataclass
class PreprocessConfig:
    ransac_iterations: int = 200
    inlier_threshold: float = 0.15
    min_inlier_fraction: float = 0.2
    crop_radius: float = 15.0
    min_radius: float = 0.0
    target_points: int = 2048
    seed: int = 0
    allow_out_of_range_radius: bool = False
    refine_plane: bool = True
    remove_ground_plane: bool = True
    crop: bool = True

    def validate(self) -> None:
        from .model import ConfigError

        if self.ransac_iterations < 1:
            raise ConfigError("ransac_iterations", "must be positive")
        if not self.inlier_threshold > 0:
            raise ConfigError("inlier_threshold", "must be positive")
        if not 0 < self.min_inlier_fraction < 1:
            raise ConfigError("min_inlier_fraction", "must lie in (0, 1)")
        if not self.allow_out_of_range_radius and not 15.0 <= self.crop_radius <= 200.0:
            raise ConfigError("crop_radius", "must lie in [15, 200] m unless allow_out_of_range_radius is set")
        if self.crop_radius <= 0 or not 0 <= self.min_radius < self.crop_radius:
            raise ConfigError("min_radius", "need 0 <= min_radius < crop_radius")
        if self.target_points < 1:
            raise ConfigError("target_points", "must be positive")

    def to_ini(self) -> str:
        lines = ["[preprocess]"] + [f"{k} = {v}" for k, v in asdict(self).items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: dict) -> "PreprocessConfig":
        from .model import ConfigError

        kw = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            raw = values[f.name]
            try:
                if f.type in ("bool", bool):
                    kw[f.name] = raw if isinstance(raw, bool) else str(raw).strip().lower() in ("1", "true", "yes", "on")
                elif f.type in ("int", int):
                    kw[f.name] = int(raw)
                else:
                    kw[f.name] = float(raw)
            except ValueError:
                raise ConfigError(f.name, f"cannot parse {raw!r}") from None
        return cls(**kw)

    @classmethod
    def from_ini(cls, text: str) -> "PreprocessConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        return cls.from_mapping(dict(cp["preprocess"]) if cp.has_section("preprocess") else {})


@dataclass
class ProcessedCloud:
    points: np.ndarray
    centroid: np.ndarray
    scale: float
    source_id: str = ""
    label: Optional[str] = None

    def __len__(self) -> int:
        return len(self.points)

    def denormalize(self) -> np.ndarray:
        s = self.scale if self.scale >= DEGENERATE_SCALE else 1.0
        return self.points * s + self.centroid


@dataclass
class StageReport:
    stage: str
    points_in: int
    points_out: int
    plane: Optional[dict] = None
    note: str = ""

    def to_dict(self) -> dict:
        d = {"stage": self.stage, "points_in": self.points_in, "points_out": self.points_out,
             "plane": self.plane}
        if self.note:
            d["note"] = self.note
        return d


# ---------------------------------------------------------------- RANSAC

def _plane_from_triples(P: np.ndarray, tri: np.ndarray):
    a, b, c = P[tri[:, 0]], P[tri[:, 1]], P[tri[:, 2]]
    n = np.cross(b - a, c - a)
    norm = np.linalg.norm(n, axis=1)
    span = np.maximum(np.linalg.norm(b - a, axis=1) * np.linalg.norm(c - a, axis=1), 1e-300)
    ok = norm > 1e-9 * span
    n = n / np.where(ok, norm, 1.0)[:, None]
    d = -(n * a).sum(axis=1)
    return n, d, ok


def _refit(P: np.ndarray) -> tuple[np.ndarray, float]:
    c = P.mean(axis=0)
    _, _, vt = np.linalg.svd(P - c, full_matrices=False)
    n = vt[-1]
    return n, -float(n @ c)


def fit_ground_plane(cloud: RawPointCloud, cfg: PreprocessConfig) -> Optional[tuple[Plane, np.ndarray]]:
    """Dominant plane by RANSAC over random point triples.

    Returns ``(plane, inlier_mask)`` or ``None`` when no candidate reaches
    ``min_inlier_fraction``. With ``cfg.refine_plane`` the best consensus set
    is refit by least squares and inliers recomputed, kept only if the refit
    does not lose inliers.
    """
    P = cloud.points
    N = len(P)
    if N < 3:
        raise ValueError(f"RANSAC needs at least 3 points, got {N}")
    rng = np.random.default_rng(cfg.seed)
    tri = np.stack([rng.choice(N, size=3, replace=False) for _ in range(cfg.ransac_iterations)])
    normals, offsets, ok = _plane_from_triples(P, tri)
    if not ok.any():
        return None
    thr = cfg.inlier_threshold
    best_count, best_k = -1, -1
    chunk = max(1, 4_000_000 // max(N, 1))
    for s in range(0, len(tri), chunk):
        n, d, v = normals[s:s + chunk], offsets[s:s + chunk], ok[s:s + chunk]
        counts = (np.abs(P @ n.T + d[None, :]) <= thr).sum(axis=0)
        counts[~v] = -1
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count, best_k = int(counts[k]), s + k
    if best_count / N < cfg.min_inlier_fraction:
        return None
    plane = Plane(normals[best_k], offsets[best_k])
    mask = plane.distance(P) <= thr
    if cfg.refine_plane and mask.sum() >= 3:
        n, d = _refit(P[mask])
        refined = Plane(n, d)
        rmask = refined.distance(P) <= thr
        if rmask.sum() >= mask.sum():
            plane, mask = refined, rmask
    return plane, mask


def remove_ground(cloud: RawPointCloud, plane: Plane, threshold: float) -> RawPointCloud:
    keep = plane.distance(cloud.points) > threshold
    if not keep.any():
        raise EmptyAfterFilterError("remove_ground", "every point lies on the ground plane")
    return RawPointCloud(cloud.points[keep], cloud.source_id)


def cylinder_crop(cloud: RawPointCloud, radius: float, min_radius: float = 0.0) -> RawPointCloud:
    """Keep points whose horizontal range lies in [min_radius, radius] (closed)."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    r = np.hypot(cloud.points[:, 0], cloud.points[:, 1])
    keep = (r <= radius) & (r >= min_radius)
    if not keep.any():
        raise EmptyAfterFilterError("cylinder_crop", f"no points within {radius} m")
    return RawPointCloud(cloud.points[keep], cloud.source_id)


def random_downsample(cloud: RawPointCloud, target: int, seed: int) -> RawPointCloud:
    """Exactly ``target`` points: without replacement when possible, else pad with duplicates."""
    N = len(cloud.points)
    rng = np.random.default_rng(seed)
    if N >= target:
        idx = rng.choice(N, size=target, replace=False)
    else:
        extra = rng.integers(0, N, size=target - N)
        idx = rng.permutation(np.concatenate([np.arange(N), extra]))
    return RawPointCloud(cloud.points[idx], cloud.source_id)


def normalize_unit_sphere(cloud: RawPointCloud | np.ndarray, source_id: str = "") -> ProcessedCloud:
    """Center on the centroid and scale so the farthest point sits at radius one."""
    if isinstance(cloud, RawPointCloud):
        P, source_id = cloud.points, cloud.source_id
    else:
        P = np.asarray(cloud, dtype=np.float64)
    centroid = P.mean(axis=0)
    centered = P - centroid
    scale = float(np.sqrt((centered * centered).sum(axis=1)).max())
    if scale < DEGENERATE_SCALE:
        return ProcessedCloud(centered, centroid, scale, source_id)
    out = centered / scale
    # rounding can leave the farthest point a few ulps outside the unit sphere
    rmax = np.sqrt((out * out).sum(axis=1)).max()
    while rmax > 1.0:
        out = out / np.nextafter(rmax, np.inf)
        rmax = np.sqrt((out * out).sum(axis=1)).max()
    return ProcessedCloud(out, centroid, scale, source_id)


def preprocess_pipeline(cloud: RawPointCloud, cfg: PreprocessConfig) -> tuple[ProcessedCloud, list[StageReport]]:
    """ground fit -> ground removal -> crop -> downsample -> normalize, with per-stage reports."""
    reports: list[StageReport] = []
    current = cloud
    stage = "fit_ground_plane"
    try:
        if cfg.remove_ground_plane and len(current) >= 3:
            fit = fit_ground_plane(current, cfg)
            if fit is None:
                reports.append(StageReport("remove_ground", len(current), len(current), None, "no_plane"))
            else:
                plane, _ = fit
                stage = "remove_ground"
                out = remove_ground(current, plane, cfg.inlier_threshold)
                reports.append(StageReport("remove_ground", len(current), len(out), plane.to_dict()))
                current = out
        else:
            reports.append(StageReport("remove_ground", len(current), len(current), None, "skipped"))
        stage = "cylinder_crop"
        if cfg.crop:
            out = cylinder_crop(current, cfg.crop_radius, cfg.min_radius)
            reports.append(StageReport(stage, len(current), len(out)))
            current = out
        stage = "random_downsample"
        out = random_downsample(current, cfg.target_points, cfg.seed)
        reports.append(StageReport(stage, len(current), len(out)))
        current = out
        stage = "normalize_unit_sphere"
        processed = normalize_unit_sphere(current)
        reports.append(StageReport(stage, len(current), len(processed)))
    except (EmptyCloudError, ValueError) as e:
        raise PipelineError(stage, e) from e
    return processed, reports


def reports_to_json(reports: list[StageReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2)


def per_cloud_seed(seed: int, index: int) -> int:
    """Seed for the ``index``-th cloud of a batch job, independent of scheduling."""
    return int(seed) ^ int(index)
