import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fieldforge.frames import FrameSet, read_depth, read_pgm, read_ppm
from fieldforge.geom import CLASS_LEAF, CLASS_STEM, LabeledMesh, merge_meshes, plant_mesh, transform_mesh
from fieldforge.plantsim import PlantParams, grow
from fieldforge.render import (
    ALBEDO, Camera, plant_tint, project, quantize, rasterize, shade, shadow_mask, shadow_test, sun_direction,
)
from fieldforge.scene import place_plants, sample_scene

from render_support import V, analytic_triangle, camera, config, tri_mesh


# ---- camera and projection

def test_basis_orthonormal():
    cam = Camera.from_spec(sample_scene(42, 3).camera)
    B = np.stack([cam.right, cam.up, cam.forward])
    assert np.allclose(B @ B.T, np.eye(3), atol=1e-9)
    assert np.dot(cam.forward, np.asarray(sample_scene(42, 3).camera.look_at) - cam.position) > 0


def test_optical_axis_projects_to_center():
    (x, y), d = project(camera(64, 48), (0.0, 250.0, 0.0))
    assert (x, y, d) == (32.0, 24.0, 250.0)


def test_top_frustum_edge():
    fov = 1.0
    d = 300.0
    (x, y), _ = project(camera(64, 64, fov), (0.0, d, d * math.tan(fov / 2)))
    assert abs(y) < 0.5 and x == pytest.approx(32.0)


def test_behind_camera_negative_depth():
    assert project(camera(), (0.0, -10.0, 0.0))[1] < 0


# ---- rasterize

def test_empty_scene():
    cfg = config(fog_density=0.01)
    f = rasterize(LabeledMesh.empty(), camera(), cfg)
    assert (f.label == 0).all() and np.isinf(f.depth).all()
    assert (f.rgb == quantize(np.array(cfg.sky_color))).all()


def test_single_triangle_analytic():
    xy, dist, depth = analytic_triangle(V)
    assert np.allclose(xy, [[16, 48], [48, 48], [32, 16]])  # by hand: 32 + 32 x/y, 32 - 32 z/y
    f = rasterize(tri_mesh(V), camera(), config())
    covered = f.label != 0
    assert (f.label[covered] == CLASS_LEAF * 4096 + 5).all()
    sure_in, sure_out = dist > 0.5, dist < -0.5
    assert covered[sure_in].all() and not covered[sure_out].any()
    assert np.abs(f.depth[covered] - depth[covered]).max() < 1e-4
    assert f.label[32, 32] == 8197
    assert np.isinf(f.depth[~covered]).all()


def test_depth_order_wins():
    near = [(-40, 100, -40), (40, 100, -40), (0, 100, 40)]
    far = [(-80, 200, -80), (80, 200, -80), (0, 200, 80)]
    m = merge_meshes([tri_mesh(far, CLASS_STEM, 2), tri_mesh(near, CLASS_LEAF, 1)])
    f = rasterize(m, camera(), config())
    assert f.label[32, 32] == CLASS_LEAF * 4096 + 1
    assert f.depth[32, 32] == pytest.approx(1.0)


def test_equal_depth_lower_plant_wins():
    t = [(-40, 100, -40), (40, 100, -40), (0, 100, 40)]
    for order in ([3, 1], [1, 3]):
        m = merge_meshes([tri_mesh(t, CLASS_LEAF, p) for p in order])
        assert rasterize(m, camera(), config()).label[32, 32] == CLASS_LEAF * 4096 + 1


def test_top_left_rule_shares_pixels_once():
    # two triangles forming a square: every pixel in it is covered exactly once
    sq = [(-30, 100, -30), (30, 100, -30), (30, 100, 30), (-30, 100, -30), (30, 100, 30), (-30, 100, 30)]
    a = rasterize(tri_mesh(sq[:3], plant=1), camera(), config())
    b = rasterize(tri_mesh(sq[3:], plant=2), camera(), config())
    both = rasterize(merge_meshes([tri_mesh(sq[:3], plant=1), tri_mesh(sq[3:], plant=2)]), camera(), config())
    ca, cb = a.label != 0, b.label != 0
    assert not (ca & cb).any()
    assert ((both.label != 0) == (ca | cb)).all()
    # projected edges at 32 -+ 9.6 px enclose pixel centres 22.5 .. 41.5 on both axes
    assert (ca | cb).sum() == 20 * 20


def scene_mesh(seed=42, sid=0):
    cfg = sample_scene(seed, sid)
    params = PlantParams()
    meshes = []
    for pl in place_plants(cfg, seed, params):
        s = grow(params, pl.growth_seed, cfg.plant_age)
        meshes.append(transform_mesh(plant_mesh(s, params, pl.plant_id), pl.position, pl.yaw, pl.scale))
    return cfg, meshes


def test_scene_consistency_and_determinism():
    cfg, meshes = scene_mesh()
    cam = Camera.from_spec(cfg.camera)
    f = rasterize(merge_meshes(meshes), cam, cfg)
    fg = f.label != 0
    assert fg.any() and (~fg).any()
    assert (np.isfinite(f.depth) == fg).all()
    assert (f.depth[fg] > 0).all()
    submitted = {c * 4096 + p for m in meshes for c, p in zip(m.tri_class, m.tri_plant)}
    assert set(np.unique(f.label[fg]).tolist()) <= submitted
    g = rasterize(merge_meshes(meshes), cam, cfg)
    assert f.equals(g)
    # submission order does not matter
    h = rasterize(merge_meshes(meshes[::-1]), cam, cfg)
    assert np.array_equal(f.label, h.label) and np.array_equal(f.depth, h.depth)
    assert np.array_equal(f.rgb, h.rgb)


def test_shadow_darkens():
    # a ground quad under a floating occluder with the sun straight up
    ground = [(-100, 200, -60), (100, 200, -60), (100, 400, -60), (-100, 200, -60), (100, 400, -60), (-100, 400, -60)]
    roof = [(-30, 230, -20), (30, 230, -20), (0, 300, -20)]
    cfg = config(ambient_factor=0.2)
    cam = Camera.look_at((0, 0, 40), (0, 300, -60), 1.0, 64, 64)
    lit = rasterize(tri_mesh(ground, CLASS_STEM, 1), cam, cfg)
    shaded = rasterize(merge_meshes([tri_mesh(ground, CLASS_STEM, 1), tri_mesh(roof, CLASS_LEAF, 2)]), cam, cfg)
    ground_px = (shaded.label == CLASS_STEM * 4096 + 1) & (lit.label == CLASS_STEM * 4096 + 1)
    darker = (shaded.rgb.astype(int).sum(-1) < lit.rgb.astype(int).sum(-1)) & ground_px
    assert darker.sum() > 10


# ---- shading

def test_shade_facing_sun():
    albedo = np.array([0.2, 0.5, 0.1])
    sun = np.array([0.0, 0.0, 1.0])
    out = shade(sun, albedo, sun, (0.0, 0.2, (1, 1, 1)), False, 3.0)
    assert np.array_equal(out, quantize(albedo))


def test_shade_shadowed_is_ambient():
    albedo = np.array([0.4, 0.8, 0.2])
    sun = np.array([0.0, 0.0, 1.0])
    out = shade(sun, albedo, sun, (0.0, 0.25, (1, 1, 1)), True, 3.0)
    assert np.array_equal(out, quantize(albedo * 0.25))


def test_fog_halfway():
    albedo, sky = np.array([0.1, 0.6, 0.2]), np.array([0.9, 0.9, 1.0])
    sun = np.array([0.0, 0.0, 1.0])
    rho = 0.02
    out = shade(sun, albedo, sun, (rho, 0.2, sky), False, math.log(2) / rho)
    assert np.abs(out.astype(float) / 255 - (albedo + sky) / 2).max() <= 1 / 255


def test_quantize_rounding():
    assert quantize(np.array([0.0, 1.0, -3.0, 7.0])).tolist() == [0, 255, 0, 255]
    assert quantize(np.array([0.5 / 255, 1.49 / 255])).tolist() == [1, 1]


def test_sun_direction_unit():
    d = sun_direction(1.0, 0.5)
    assert np.linalg.norm(d) == pytest.approx(1.0) and d[2] == pytest.approx(math.sin(0.5))


def test_tint_range_and_determinism():
    t = [plant_tint(3, p) for p in range(200)]
    assert all(0.9 <= x <= 1.1 for x in t) and t == [plant_tint(3, p) for p in range(200)]
    assert len(ALBEDO) == 2


# ---- shadow rays

def test_shadow_no_occluders():
    assert not shadow_test((0, 0, 0), (0, 0, 1), [])


def test_shadow_occluder_between():
    tri = [[(-1, -1, 5), (1, -1, 5), (0, 1, 5)]]
    assert shadow_test((0, 0, 0), (0, 0, 1), tri)


def test_shadow_occluder_behind():
    tri = [[(-1, -1, -5), (1, -1, -5), (0, 1, -5)]]
    assert not shadow_test((0, 0, 0), (0, 0, 1), tri)


def test_shadow_epsilon_ignores_own_surface():
    tri = [[(-1, -1, 0.05), (1, -1, 0.05), (0, 1, 0.05)]]
    assert not shadow_test((0, 0, 0), (0, 0, 1), tri)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.2, 1.5), st.floats(0, 6.28))
def test_shadow_grid_matches_brute_force(seed, elev, az):
    rng = np.random.default_rng(seed)
    tris = rng.uniform(-20, 20, (60, 3, 3))
    pts = rng.uniform(-20, 20, (200, 3))
    sun = sun_direction(az, elev)
    brute = np.array([shadow_test(p, sun, tris) for p in pts])
    assert np.array_equal(shadow_mask(pts, sun, tris, grid=8), brute)


# ---- file formats

def test_frame_files_roundtrip(tmp_path):
    cfg, meshes = scene_mesh()
    f = rasterize(merge_meshes(meshes), Camera.from_spec(cfg.camera), cfg)
    f.save(tmp_path / "x")
    back = FrameSet.load(tmp_path / "x", scene_id=f.scene_id)
    assert back.equals(f)
    raw = (tmp_path / "x.pgm").read_bytes()
    assert raw.startswith(b"P5\n64 64\n65535\n")
    body = np.frombuffer(raw[len(b"P5\n64 64\n65535\n"):], dtype=">u2").reshape(64, 64)
    assert np.array_equal(body, f.label)
    assert (tmp_path / "x.ppm").read_bytes().startswith(b"P6\n64 64\n255\n")
    d = (tmp_path / "x.dpth").read_bytes()
    assert d[:4] == b"DPTH" and len(d) == 16 + 64 * 64 * 4
    assert np.array_equal(read_depth(tmp_path / "x.dpth"), f.depth)
    assert np.array_equal(read_ppm(tmp_path / "x.ppm"), f.rgb)
    assert np.array_equal(read_pgm(tmp_path / "x.pgm"), f.label)
