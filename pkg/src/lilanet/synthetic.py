"""Procedural shapes and street scenes used as the bundled, network-free dataset."""
from __future__ import annotations

import numpy as np

from .geometry_io import RawPointCloud
from .preprocess import ProcessedCloud, normalize_unit_sphere

CLASSES = ("sphere", "cube", "plane")


def _rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def sphere_surface(n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def cube_surface(n: int, rng: np.random.Generator) -> np.ndarray:
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-1, 1, (n, 2))
    pts = np.empty((n, 3))
    axis = face % 3
    sign = np.where(face < 3, 1.0, -1.0)
    for a in range(3):
        sel = axis == a
        others = [k for k in range(3) if k != a]
        pts[sel, a] = sign[sel]
        pts[np.ix_(sel, others)] = uv[sel]
    return pts


def plane_patch(n: int, rng: np.random.Generator) -> np.ndarray:
    uv = rng.uniform(-1, 1, (n, 2))
    return np.column_stack([uv, np.zeros(n)])


_GENERATORS = {"sphere": sphere_surface, "cube": cube_surface, "plane": plane_patch}


def make_shape(kind: str, n: int, rng: np.random.Generator, jitter: float = 0.0) -> np.ndarray:
    """One randomly scaled, stretched and rotated instance of ``kind`` with ``n`` points."""
    pts = _GENERATORS[kind](n, rng)
    stretch = rng.uniform(0.7, 1.3, 3)
    pts = pts * stretch
    pts = pts @ _rotation(rng).T
    if jitter:
        pts = pts + rng.normal(0, jitter, pts.shape)
    return pts * rng.uniform(0.5, 2.0) + rng.uniform(-1, 1, 3)


def toy_dataset(n_shapes: int, points: int, seed: int = 0,
                classes=CLASSES) -> list[ProcessedCloud]:
    """Normalized shapes cycling through ``classes``; each cloud carries its class label."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_shapes):
        kind = classes[i % len(classes)]
        pc = normalize_unit_sphere(make_shape(kind, points, rng), source_id=f"{kind}_{i:04d}")
        pc.label = kind
        out.append(pc)
    return out


def street_scene(rng: np.random.Generator, ground_points: int = 3000, clutter_points: int = 1200,
                 noise: float = 0.03, extent: float = 30.0, tilt_deg: float = 0.0,
                 ground_height: float = -1.7) -> tuple[RawPointCloud, np.ndarray]:
    """Sensor-centred scene: a noisy ground plane plus box-shaped objects standing on it.

    Returns the cloud and the boolean ground mask. Object points sit at least
    0.3 m above the ground.
    """
    xy = rng.uniform(-extent, extent, (ground_points, 2))
    t = np.deg2rad(tilt_deg)
    gz = ground_height + np.tan(t) * xy[:, 0] + rng.normal(0, noise, ground_points)
    ground = np.column_stack([xy, gz])
    boxes = []
    per_box = max(1, clutter_points // 6)
    for _ in range(6):
        c = rng.uniform(-extent * 0.5, extent * 0.5, 2)
        size = rng.uniform([1.0, 1.0, 1.0], [4.0, 2.5, 2.5])
        p = rng.uniform(-0.5, 0.5, (per_box, 3)) * size
        p[:, :2] += c
        base = ground_height + np.tan(t) * p[:, 0]
        p[:, 2] = base + 0.3 + (p[:, 2] + size[2] / 2)
        boxes.append(p)
    clutter = np.concatenate(boxes)
    pts = np.concatenate([ground, clutter])
    mask = np.concatenate([np.ones(len(ground), bool), np.zeros(len(clutter), bool)])
    return RawPointCloud(pts, "street"), mask
