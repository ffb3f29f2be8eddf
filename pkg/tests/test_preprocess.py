import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from lilanet import preprocess as pp
from lilanet import synthetic
from lilanet.geometry_io import RawPointCloud
from lilanet.model import ConfigError


def cfg(**kw):
    return pp.PreprocessConfig(**kw)


def angle_deg(n1, n2):
    c = abs(float(np.dot(n1, n2)) / (np.linalg.norm(n1) * np.linalg.norm(n2)))
    return float(np.degrees(np.arccos(min(1.0, c))))


def test_plane_normalizes():
    p = pp.Plane([0, 0, 2], 4)
    assert abs(np.linalg.norm(p.normal) - 1) < 1e-12
    assert p.offset == 2
    assert p.distance(np.array([[0, 0, -2.0]]))[0] == 0


def test_ransac_flat_ground_with_elevated_points():
    rng = np.random.default_rng(0)
    ground = np.column_stack([rng.uniform(-5, 5, (1000, 2)), np.zeros(1000)])
    high = np.column_stack([rng.uniform(-5, 5, (100, 2)), rng.uniform(1, 2, 100)])
    cloud = RawPointCloud(np.concatenate([ground, high]))
    plane, mask = pp.fit_ground_plane(cloud, cfg(inlier_threshold=0.1))
    assert angle_deg(plane.normal, [0, 0, 1]) < 1e-6
    assert mask[:1000].sum() >= 990
    assert not mask[1000:].any()
    # mask agrees with a direct distance test
    assert np.array_equal(mask, np.abs(cloud.points @ plane.normal + plane.offset) <= 0.1)


def test_ransac_tilted_plane():
    rng = np.random.default_rng(1)
    xy = rng.uniform(-10, 10, (2000, 2))
    pts = np.column_stack([xy, 0.05 * xy[:, 0]])
    plane, _ = pp.fit_ground_plane(RawPointCloud(pts), cfg())
    assert angle_deg(plane.normal, [-0.05, 0, 1]) < 1.0


def test_ransac_unit_ball_has_no_plane():
    rng = np.random.default_rng(2)
    v = rng.standard_normal((500, 3))
    pts = v / np.linalg.norm(v, axis=1, keepdims=True) * rng.uniform(0, 1, (500, 1)) ** (1 / 3)
    c = cfg(min_inlier_fraction=0.5)
    # oracle: best consensus over many candidate triples stays under one half
    tri = np.stack([rng.choice(500, 3, replace=False) for _ in range(5000)])
    n = np.cross(pts[tri[:, 1]] - pts[tri[:, 0]], pts[tri[:, 2]] - pts[tri[:, 0]])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    d = -(n * pts[tri[:, 0]]).sum(axis=1)
    best = (np.abs(pts @ n.T + d) <= c.inlier_threshold).sum(axis=0).max()
    assert best / 500 < 0.5
    assert pp.fit_ground_plane(RawPointCloud(pts), c) is None


def test_ransac_too_few_points():
    with pytest.raises(ValueError):
        pp.fit_ground_plane(RawPointCloud([[0, 0, 0], [1, 0, 0]]), cfg())


def test_ransac_collinear_is_no_plane():
    pts = np.column_stack([np.linspace(0, 1, 50), np.zeros(50), np.zeros(50)])
    assert pp.fit_ground_plane(RawPointCloud(pts), cfg()) is None


def test_ransac_deterministic():
    cloud, _ = synthetic.street_scene(np.random.default_rng(3))
    a = pp.fit_ground_plane(cloud, cfg(seed=5))
    b = pp.fit_ground_plane(cloud, cfg(seed=5))
    assert np.array_equal(a[0].normal, b[0].normal) and a[0].offset == b[0].offset
    assert np.array_equal(a[1], b[1])


@pytest.mark.parametrize("seed", range(10))
def test_ransac_street_scene_quality(seed):
    rng = np.random.default_rng(seed)
    tilt_deg = rng.uniform(0, 4)
    cloud, truth = synthetic.street_scene(rng, tilt_deg=tilt_deg)
    plane, mask = pp.fit_ground_plane(cloud, cfg(seed=seed))
    tilt = np.deg2rad(tilt_deg)
    true_n = np.array([-np.tan(tilt), 0.0, 1.0])
    assert angle_deg(plane.normal, true_n) < 1.0
    assert mask[truth].mean() >= 0.99
    assert mask[~truth].mean() <= 0.01


def test_remove_ground_examples():
    plane = pp.Plane([0, 0, 1], 0)
    out = pp.remove_ground(RawPointCloud([[0, 0, 0], [0, 0, 1]]), plane, 0.1)
    assert out.points.tolist() == [[0, 0, 1]]
    with pytest.raises(pp.EmptyAfterFilterError):
        pp.remove_ground(RawPointCloud([[0, 0, 0], [1, 1, 0.05]]), plane, 0.1)
    pts = np.array([[0, 0, 2.0], [3, 1, -1.0], [1, 1, 5.0]])
    assert np.array_equal(pp.remove_ground(RawPointCloud(pts), plane, 0.1).points, pts)


def test_cylinder_crop_examples():
    out = pp.cylinder_crop(RawPointCloud([[10, 0, 5], [20, 0, 0]]), 15)
    assert out.points.tolist() == [[10, 0, 5]]
    rng = np.random.default_rng(4)
    ang = rng.uniform(0, 2 * np.pi, 300)
    r = rng.uniform(0, 150, 300)
    pts = np.column_stack([r * np.cos(ang), r * np.sin(ang), rng.normal(0, 3, 300)])
    assert np.array_equal(pp.cylinder_crop(RawPointCloud(pts), 200).points, pts)
    assert len(pp.cylinder_crop(RawPointCloud([[3, 4, 0], [3, 4.1, 0]]), 5)) == 1
    with pytest.raises(pp.EmptyAfterFilterError):
        pp.cylinder_crop(RawPointCloud([[30, 0, 0]]), 15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(1, 50), st.floats(1, 50))
def test_cylinder_crop_idempotent_and_monotone(seed, r1, r2):
    r1, r2 = min(r1, r2), max(r1, r2)
    pts = np.random.default_rng(seed).uniform(-60, 60, (400, 3))
    cloud = RawPointCloud(pts)
    try:
        once = pp.cylinder_crop(cloud, r1)
    except pp.EmptyAfterFilterError:
        return
    assert np.array_equal(pp.cylinder_crop(once, r1).points, once.points)
    big = {tuple(p) for p in pp.cylinder_crop(cloud, r2).points}
    assert {tuple(p) for p in once.points} <= big


def test_cylinder_crop_annulus():
    out = pp.cylinder_crop(RawPointCloud([[1, 0, 0], [5, 0, 0], [20, 0, 0]]), 15, min_radius=2)
    assert out.points.tolist() == [[5, 0, 0]]


def test_downsample_contracts():
    rng = np.random.default_rng(5)
    pts = rng.standard_normal((5000, 3))
    out = pp.random_downsample(RawPointCloud(pts), 2048, seed=1).points
    assert len(out) == 2048 and len({tuple(p) for p in out}) == 2048
    assert {tuple(p) for p in out} <= {tuple(p) for p in pts}

    small = rng.standard_normal((2048, 3))
    out = pp.random_downsample(RawPointCloud(small), 2048, seed=1).points
    assert sorted(map(tuple, out)) == sorted(map(tuple, small))

    few = rng.standard_normal((1000, 3))
    out = pp.random_downsample(RawPointCloud(few), 2048, seed=1).points
    assert len(out) == 2048
    assert {tuple(p) for p in out} == {tuple(p) for p in few}

    a = pp.random_downsample(RawPointCloud(pts), 100, seed=7).points
    b = pp.random_downsample(RawPointCloud(pts), 100, seed=7).points
    assert a.tobytes() == b.tobytes()


def test_normalize_examples():
    pc = pp.normalize_unit_sphere(RawPointCloud([[1, 1, 1], [3, 1, 1]]))
    assert pc.centroid.tolist() == [2, 1, 1]
    assert pc.points.tolist() == [[-1, 0, 0], [1, 0, 0]]
    single = pp.normalize_unit_sphere(RawPointCloud([[5, 2, -3]]))
    assert single.points.tolist() == [[0, 0, 0]]
    assert np.allclose(single.denormalize(), [[5, 2, -3]])


def test_normalize_denormalize_round_trip():
    pts = np.random.default_rng(6).uniform(-30, 30, (200, 3))
    pc = pp.normalize_unit_sphere(pts)
    assert np.max(np.abs(pc.denormalize() - pts)) < 1e-9


clouds = hnp.arrays(np.float64, st.tuples(st.integers(2, 60), st.just(3)),
                    elements=st.floats(-1e3, 1e3, allow_nan=False))


@settings(max_examples=100, deadline=None)
@given(clouds, hnp.arrays(np.float64, 3, elements=st.floats(-100, 100)), st.floats(0.01, 100))
def test_normalize_invariants(pts, t, s):
    spread = np.linalg.norm(pts - pts.mean(axis=0), axis=1).max()
    if spread < 1e-3:
        return
    a = pp.normalize_unit_sphere(pts).points
    assert np.linalg.norm(a.mean(axis=0)) < 1e-6
    r = np.linalg.norm(a, axis=1).max()
    assert 1 - 1e-6 <= r <= 1
    assert np.max(np.abs(pp.normalize_unit_sphere(a).points - a)) < 1e-9
    b = pp.normalize_unit_sphere(pts * s + t).points
    assert np.max(np.abs(a - b)) < 1e-9


def test_config_validation_and_ini():
    with pytest.raises(ConfigError) as err:
        cfg(crop_radius=5).validate()
    assert err.value.field == "crop_radius"
    cfg(crop_radius=5, allow_out_of_range_radius=True).validate()
    c = cfg(crop_radius=30.0, seed=4, refine_plane=False)
    assert pp.PreprocessConfig.from_ini(c.to_ini()) == c


def street(seed, **kw):
    return synthetic.street_scene(np.random.default_rng(seed), extent=14.0, **kw)


def test_pipeline_street_scene():
    cloud, _ = street(8)
    c = cfg(target_points=512)
    out, reports = pp.preprocess_pipeline(cloud, c)
    assert out.points.shape == (512, 3)
    assert [r.stage for r in reports] == ["remove_ground", "cylinder_crop", "random_downsample",
                                         "normalize_unit_sphere"]
    plane = pp.Plane(**reports[0].plane)
    assert np.all(plane.distance(out.denormalize()) > c.inlier_threshold)
    for a, b in zip(reports, reports[1:]):
        assert a.points_out == b.points_in
    assert reports[-1].points_out == 512


def test_pipeline_no_plane_flagged():
    rng = np.random.default_rng(9)
    v = rng.standard_normal((400, 3))
    pts = v / np.linalg.norm(v, axis=1, keepdims=True) * 5
    out, reports = pp.preprocess_pipeline(RawPointCloud(pts), cfg(target_points=128, min_inlier_fraction=0.5))
    assert reports[0].note == "no_plane" and reports[0].plane is None
    assert reports[0].points_in == reports[0].points_out == 400
    assert len(out) == 128


def test_pipeline_deterministic_and_error_names_stage():
    cloud, _ = street(10)
    a, _ = pp.preprocess_pipeline(cloud, cfg(target_points=256, seed=3))
    b, _ = pp.preprocess_pipeline(cloud, cfg(target_points=256, seed=3))
    assert a.points.tobytes() == b.points.tobytes()
    far = RawPointCloud(np.random.default_rng(0).uniform(100, 120, (50, 3)))
    with pytest.raises(pp.PipelineError) as err:
        pp.preprocess_pipeline(far, cfg(remove_ground_plane=False))
    assert err.value.stage == "cylinder_crop"


def test_report_json_shape():
    cloud, _ = street(11)
    _, reports = pp.preprocess_pipeline(cloud, cfg(target_points=64))
    import json
    data = json.loads(pp.reports_to_json(reports))
    assert set(data[0]) >= {"stage", "points_in", "points_out", "plane"}
    assert set(data[0]["plane"]) == {"normal", "offset"}
    assert data[1]["plane"] is None


def test_per_cloud_seed():
    assert pp.per_cloud_seed(12, 5) == 12 ^ 5
