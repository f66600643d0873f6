import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perfcap.energies import (
    Correspondences,
    EnergyReport,
    EnergyTermConfig,
    chamfer_loss,
    compute_boundary_sets,
    joint_limit_loss,
    landmark_loss,
    landmark_loss_pose,
    nearest_correspondences,
    render_loss,
    silhouette_loss,
    solve_lighting,
)
from perfcap.errors import ConfigError
from perfcap.geometry import Pose, Skeleton
from perfcap.render import (
    BoundarySet,
    Camera,
    SHLighting,
    bilinear_sample,
    distance_transform,
    project,
    rasterize,
    render_image,
    sh_basis,
)
from perfcap.synthetic import camera_ring, cloth_mesh, sphere_mesh

from conftest import central_difference, relative_error


def front_camera(size=48, f=48.0, distance=2.0):
    return Camera(f, f, (size - 1) / 2, (size - 1) / 2, size, size, np.eye(3), [0, 0, distance])


def sheet(n=10, size=1.0):
    """Camera-facing square sheet centered at the origin."""
    V, F = cloth_mesh(size, size, n, n)
    V = V - V.mean(axis=0)
    return V, F[:, ::-1]


def pixel_sheet(cam, lo=12, hi=36, step=3):
    """Camera-facing sheet at depth 2 whose vertices project exactly onto pixel centers."""
    px = np.arange(lo, hi + 1, step, dtype=float)
    n = len(px)
    U, Vv = np.meshgrid(px, px)
    z = 2.0 - cam.t[2]
    V = np.stack([(U.ravel() - cam.cx) * 2.0 / cam.fx, (Vv.ravel() - cam.cy) * 2.0 / cam.fy, np.full(n * n, z)], 1)
    F = []
    for r in range(n - 1):
        for c in range(n - 1):
            a = r * n + c
            F += [[a, a + n, a + 1], [a + 1, a + n, a + n + 1]]
    return V, np.array(F)


def bilinear_field(rng, size):
    """Image a + b u + c v + d u v, which bilinear sampling reproduces exactly (no grid kinks)."""
    ys, xs = np.mgrid[0:size, 0:size].astype(float)
    a, b, c, d = rng.uniform(0.5, 1.5), rng.normal(), rng.normal(), rng.normal(scale=0.05)
    return a + b * xs + c * ys + d * xs * ys


def off_grid(cams, X, margin=1e-2):
    """Vertices whose projections stay ``margin`` pixels away from every pixel-grid line in all views."""
    ok = np.ones(len(X), dtype=bool)
    for cam in cams:
        uv, _ = project(cam, X)
        ok &= np.all(np.abs(uv - np.rint(uv)) > margin, axis=1)
    return ok


# -- configuration and reports ---------------------------------------------------------

def test_term_config_defaults_and_validation():
    cfg = EnergyTermConfig()
    assert all(cfg.weight(t) == 1.0 for t in cfg.enabled)
    assert EnergyTermConfig(enabled=("sil",)).weight("mk") == 0.0
    with pytest.raises(ConfigError):
        EnergyTermConfig(weights={"sil": -1.0})
    with pytest.raises(ConfigError):
        EnergyTermConfig(weights={"bogus": 1.0})


@settings(max_examples=30)
@given(st.dictionaries(st.sampled_from(["sil", "mk", "dr", "cf"]), st.floats(0, 1e3), min_size=1),
       st.lists(st.floats(0, 1e6), min_size=4, max_size=4))
def test_report_total_is_weighted_sum(weights, values):
    terms = dict(zip(["sil", "mk", "dr", "cf"], values))
    cfg = EnergyTermConfig(weights=weights)
    rep = EnergyReport.assemble(terms, cfg.weights)
    expected = sum(cfg.weights[k] * v for k, v in terms.items())
    assert abs(rep.total - expected) <= 1e-10 * max(1.0, abs(expected))
    assert json.loads(rep.to_json())["terms"] == terms


# -- silhouette --------------------------------------------------------------------------

def test_silhouette_zero_on_exact_overlap():
    cam = front_camera()
    V, F = pixel_sheet(cam)
    mask = rasterize(cam, V, F).mask
    dt = distance_transform(mask)
    value, grad = silhouette_loss(V, [cam], [dt], faces=F, masks=[mask])
    sets = compute_boundary_sets(V, F, [cam], [mask])
    assert len(sets[0].indices) > 0
    uv, _ = project(cam, V[sets[0].indices])
    # boundary vertices sit on pixel centers of the boundary, where the DT vanishes
    assert np.abs(bilinear_sample(dt, uv)).max() <= 1e-10
    assert abs(value) <= 1e-10 and np.abs(grad).max() <= 1e-10


def test_silhouette_single_vertex_value():
    cam = front_camera()
    dt = np.full((48, 48), 3.0)
    V = np.array([[0.0, 0.0, 0.0]])
    value, _ = silhouette_loss(V, [cam], [dt], [BoundarySet(np.array([0]), np.array([1.0]))])
    assert value == 9.0
    signed, _ = silhouette_loss(V, [cam], [dt], [BoundarySet(np.array([0]), np.array([-1.0]))])
    assert signed == -9.0
    unsigned, _ = silhouette_loss(V, [cam], [dt], [BoundarySet(np.array([0]), np.array([-1.0]))], signed=False)
    assert unsigned == 9.0


def test_silhouette_empty_set_contributes_nothing():
    cam = front_camera()
    empty = BoundarySet(np.zeros(0, dtype=int), np.zeros(0))
    value, grad = silhouette_loss(np.zeros((3, 3)), [cam], [np.ones((48, 48))], [empty])
    assert value == 0 and not grad.any()


def test_silhouette_shifted_square_matches_direct_evaluation():
    cam = front_camera()
    V, F = sheet()
    shifted = rasterize(cam, V + [2 / 24.0, 0, 0], F).mask
    dt = distance_transform(shifted)
    sets = compute_boundary_sets(V, F, [cam], [shifted])
    value, _ = silhouette_loss(V, [cam], [dt], sets)
    assert (sets[0].direction == 1).any() and (sets[0].direction == -1).any()
    direct = 0.0
    for i, d in zip(sets[0].indices, sets[0].direction):
        u, v = project(cam, V[i:i + 1])[0][0]
        x0, y0 = int(np.floor(u)), int(np.floor(v))
        fx, fy = u - x0, v - y0
        D = ((1 - fx) * (1 - fy) * dt[y0, x0] + fx * (1 - fy) * dt[y0, x0 + 1]
             + (1 - fx) * fy * dt[y0 + 1, x0] + fx * fy * dt[y0 + 1, x0 + 1])
        direct += d * D * D
    assert abs(value - direct) <= 1e-10 * max(1.0, abs(direct))


@pytest.mark.parametrize("signed", [True, False])
def test_silhouette_gradient_on_distance_maps(rng, signed):
    cams = camera_ring(3, distance=2.5, center=(0, 0, 0), size=64)
    V, F = sphere_mesh(0.5, 8, 16)
    masks = [rasterize(c, V * 1.1 + [0.03, 0, 0], F).mask for c in cams]
    dts = [distance_transform(m) for m in masks]
    sets = compute_boundary_sets(V, F, cams, masks)
    X = V + rng.normal(scale=0.01, size=V.shape)
    # bilinear DT lookups are only piecewise smooth; compare away from pixel-grid lines
    ok = off_grid(cams, X)
    _, g = silhouette_loss(X, cams, dts, sets, signed=signed)
    fd = central_difference(lambda y: silhouette_loss(y, cams, dts, sets, signed=signed)[0], X)
    assert ok.sum() > 0.8 * len(X)
    assert relative_error(g[ok], fd[ok]) < 1e-4


def test_silhouette_gradient_on_smooth_maps(rng):
    cams = camera_ring(3, distance=2.5, center=(0, 0, 0), size=64)
    V, F = sphere_mesh(0.5, 8, 16)
    masks = [rasterize(c, V * 1.1, F).mask for c in cams]
    sets = compute_boundary_sets(V, F, cams, masks)
    maps = [bilinear_field(rng, 64) for _ in cams]
    X = V + rng.normal(scale=0.01, size=V.shape)
    _, g = silhouette_loss(X, cams, maps, sets)
    fd = central_difference(lambda y: silhouette_loss(y, cams, maps, sets)[0], X)
    assert relative_error(g, fd) < 1e-6


# -- landmarks -----------------------------------------------------------------------

def test_landmark_zero_and_offset():
    cam = front_camera()
    M = np.array([[0.1, 0.2, 0.0], [-0.2, 0.1, 0.3]])
    kp, _ = project(cam, M)
    assert landmark_loss(M, [cam], [kp], [np.ones(2)])[0] == 0
    off = kp + [[3.0, 4.0], [0.0, 0.0]]
    assert abs(landmark_loss(M, [cam], [off], [np.ones(2)])[0] - 25.0) < 1e-12
    assert landmark_loss(M, [cam], [off], [np.array([0.0, 1.0])])[0] == 0
    with pytest.raises(ValueError):
        landmark_loss(M, [cam], [kp[:1]], [np.ones(1)])


def _hand_like(n_joints=7):
    """Chain skeleton with three landmarks per joint (21 keypoints)."""
    rng = np.random.default_rng(5)
    offsets = np.zeros((n_joints, 3))
    offsets[1:, 1] = 0.2
    axes = [np.zeros((0, 3))] + [np.eye(3)] * (n_joints - 1)
    return Skeleton(np.arange(-1, n_joints - 1), offsets, tuple(axes),
                    landmark_joints=np.repeat(np.arange(n_joints), 3),
                    landmark_offsets=rng.normal(scale=0.05, size=(3 * n_joints, 3)))


def test_landmark_pose_minimum_at_truth():
    skel = _hand_like()
    cams = camera_ring(4, distance=3.0, center=(0, 0.6, 0), size=128)
    rng = np.random.default_rng(2)
    truth = Pose(rng.uniform(-0.3, 0.3, skel.dof_count), rng.uniform(-0.2, 0.2, 3), [0.05, 0.0, -0.05])
    from perfcap.geometry import landmark_positions
    P = landmark_positions(skel, truth)
    assert len(P) == 21
    kps = [project(c, P)[0] for c in cams]
    conf = [np.ones(21)] * len(cams)
    x0 = truth.to_vector()
    base, g = landmark_loss_pose(skel, truth, cams, kps, conf)
    assert base <= 1e-20 and np.abs(g).max() <= 1e-8
    for k in range(x0.size):
        for delta in (-1e-2, 1e-2):
            x = x0.copy()
            x[k] += delta
            assert landmark_loss_pose(skel, Pose.from_vector(x, skel.dof_count), cams, kps, conf)[0] > base


def test_landmark_pose_gradient(rng):
    skel = _hand_like()
    cams = camera_ring(3, distance=3.0, center=(0, 0.6, 0), size=128)
    kps = [rng.uniform(30, 90, size=(21, 2)) for _ in cams]
    conf = [rng.random(21) for _ in cams]
    x = rng.uniform(-0.3, 0.3, skel.dof_count + 6)
    n = skel.dof_count
    _, g = landmark_loss_pose(skel, Pose.from_vector(x, n), cams, kps, conf)
    fd = central_difference(lambda y: landmark_loss_pose(skel, Pose.from_vector(y, n), cams, kps, conf)[0], x)
    assert relative_error(g, fd) < 1e-6


# -- dense rendering -------------------------------------------------------------------

def test_render_loss_self_consistent(rng):
    cams = camera_ring(2, distance=2.5, center=(0, 0, 0), size=48)
    V, F = sphere_mesh(0.5, 8, 16)
    albedo = rng.random((len(V), 3))
    lights = [SHLighting(rng.normal(size=(9, 3))) for _ in cams]
    images = [render_image(c, V, F, albedo, l) for c, l in zip(cams, lights)]
    value, _ = render_loss(V, F, albedo, cams, lights, images)
    assert value <= 1e-20


def test_render_loss_uniform_offset():
    cam = front_camera()
    V, F = sheet(4)
    albedo = np.full((len(V), 3), 0.5)
    light = SHLighting.ambient(1.0)
    eps = 0.01
    img = render_image(cam, V, F, albedo, light)
    cov = rasterize(cam, V, F).mask
    img[cov] += eps
    value, _ = render_loss(V, F, albedo, [cam], [light], [img])
    P = int(cov.sum())
    assert abs(value - 3 * P * eps**2) <= 1e-12


def test_render_loss_pixel_sum_oracle(rng):
    cam = front_camera(32, 40.0)
    V, F = sphere_mesh(0.4, 6, 10)
    albedo = rng.random((len(V), 3))
    light = SHLighting(rng.normal(size=(9, 3)))
    img = rng.random((32, 32, 3))
    value, _ = render_loss(V, F, albedo, [cam], [light], [img])
    ras = rasterize(cam, V, F)
    direct = 0.0
    for y in range(32):
        for x in range(32):
            f = ras.face_id[y, x]
            if f < 0:
                continue
            a = ras.bary[y, x] @ albedo[F[f]]
            shade = a * (sh_basis(ras.normals[y, x]) @ light.l)
            direct += float(np.sum((shade - img[y, x]) ** 2))
    assert abs(value - direct) <= 1e-10 * direct


def test_render_loss_gradient(rng):
    cams = camera_ring(2, distance=2.5, center=(0, 0, 0), size=48)
    V, F = sphere_mesh(0.5, 6, 12)
    albedo = rng.random((len(V), 3))
    lights = [SHLighting(rng.normal(scale=0.5, size=(9, 3))) for _ in cams]
    images = [np.stack([bilinear_field(rng, 48) for _ in range(3)], axis=-1) for _ in cams]
    rasters = [rasterize(c, V, F) for c in cams]
    X = V + rng.normal(scale=0.003, size=V.shape)
    _, g = render_loss(X, F, albedo, cams, lights, images, rasters)
    fd = central_difference(lambda y: render_loss(y, F, albedo, cams, lights, images, rasters)[0], X)
    assert relative_error(g, fd) < 1e-6


# -- chamfer ------------------------------------------------------------------------------

def test_chamfer_basic_values(rng):
    X = rng.normal(size=(30, 3))
    assert chamfer_loss(X, X)[0] == 0
    assert chamfer_loss([[0, 0, 0.0]], [[0.3, 0.4, 0.0]])[0] == pytest.approx(2 * 0.25, abs=1e-15)
    with pytest.raises(ValueError):
        chamfer_loss(np.zeros((0, 3)), X)


def test_chamfer_double_loop_oracle(rng):
    X, Y = rng.normal(size=(50, 3)), rng.normal(size=(70, 3))
    direct = 0.0
    for x in X:
        direct += min(float(np.sum((x - y) ** 2)) for y in Y)
    for y in Y:
        direct += min(float(np.sum((x - y) ** 2)) for x in X)
    assert abs(chamfer_loss(X, Y)[0] - direct) <= 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 40), st.integers(1, 40))
def test_chamfer_symmetric(seed, n, m):
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    assert abs(chamfer_loss(X, Y)[0] - chamfer_loss(Y, X)[0]) <= 1e-12 * max(1.0, chamfer_loss(X, Y)[0])


def test_chamfer_gradient_frozen_correspondences(rng):
    X, Y = rng.normal(size=(20, 3)), rng.normal(size=(25, 3))
    corr = nearest_correspondences(X, Y)
    assert isinstance(corr, Correspondences)
    _, g = chamfer_loss(X, Y, corr)
    fd = central_difference(lambda x: chamfer_loss(x, Y, corr)[0], X)
    assert relative_error(g, fd) < 1e-8


# -- joint limits -------------------------------------------------------------------------

def test_joint_limit_values():
    limits = np.array([[-1, 1], [0, 0.5], [-0.2, 0.2]])
    assert joint_limit_loss([0.0, 0.25, 0.1], limits)[0] == 0
    assert joint_limit_loss([1.1, 0.25, 0.1], limits)[0] == pytest.approx(0.01, abs=1e-15)
    with pytest.raises(ConfigError):
        joint_limit_loss([0.0], [[1.0, 0.0]])
    with pytest.raises(ConfigError):
        joint_limit_loss([0.0, 1.0], [[0.0, 1.0]])


def test_joint_limit_manual_and_gradient(rng):
    lo = rng.uniform(-1, 0, 12)
    limits = np.stack([lo, lo + rng.uniform(0, 1, 12)], axis=1)
    theta = rng.uniform(-1.5, 1.5, 12)
    value, g = joint_limit_loss(theta, limits)
    manual = sum(max(t - b, 0) ** 2 + max(a - t, 0) ** 2 for t, (a, b) in zip(theta, limits))
    assert abs(value - manual) <= 1e-12
    assert relative_error(g, central_difference(lambda t: joint_limit_loss(t, limits)[0], theta)) < 1e-6


# -- lighting -----------------------------------------------------------------------------

def _lighting_scene(rng, n_frames=3):
    cam = Camera.look_at([0, 0, 2.5], [0, 0, 0], [0, 1, 0], 180, 180, 128, 128)
    V, F = sphere_mesh(0.6, 16, 32)
    albedo = 0.3 + 0.7 * rng.random((len(V), 3))
    frames = [V + rng.normal(scale=0.01, size=3) for _ in range(n_frames)]
    return cam, frames, F, albedo


def test_lighting_round_trip(rng):
    cam, frames, F, albedo = _lighting_scene(rng)
    l_true = rng.normal(size=(9, 3))
    images = [render_image(cam, V, F, albedo, SHLighting(l_true)) for V in frames]
    sol = solve_lighting(cam, frames, images, F, albedo)
    assert relative_error(sol.lighting.l, l_true) < 1e-6
    assert not sol.rank_deficient
    assert sol.residual <= sol.baseline_residual


def test_lighting_zero_scene(rng):
    cam, frames, F, albedo = _lighting_scene(rng, 1)
    sol = solve_lighting(cam, frames, [np.zeros((128, 128, 3))], F, np.zeros_like(albedo))
    assert not sol.lighting.l.any()
    assert sol.rank_deficient


def test_lighting_constant_normal_null_space(rng):
    cam = front_camera(32, 32.0)
    V, F = sheet(3)
    albedo = np.ones((len(V), 3))
    l_true = rng.normal(size=(9, 3))
    img = render_image(cam, V, F, albedo, SHLighting(l_true))
    sol = solve_lighting(cam, [V], [img], F, albedo)
    assert sol.rank_deficient
    assert sol.residual <= 1e-10 * sol.baseline_residual
    # the recovered lighting matches along the only observed direction, n = (0, 0, -1)
    Y = sh_basis(np.array([0, 0, -1.0]))
    np.testing.assert_allclose(Y @ sol.lighting.l, Y @ l_true, atol=1e-6)
    # and is minimum-norm: no component orthogonal to Y
    P = np.eye(9) - np.outer(Y, Y) / (Y @ Y)
    assert np.abs(P @ sol.lighting.l).max() < 1e-5


def test_lighting_adam_agrees_with_closed_form(rng):
    cam, frames, F, albedo = _lighting_scene(rng, 1)
    l_true = rng.normal(scale=0.3, size=(9, 3))
    images = [render_image(cam, V, F, albedo, SHLighting(l_true)) for V in frames]
    exact = solve_lighting(cam, frames, images, F, albedo)
    sol = solve_lighting(cam, frames, images, F, albedo, method="adam")
    assert sol.residual <= 1e-4 * sol.baseline_residual
    assert sol.residual >= exact.residual
    with pytest.raises(ConfigError):
        solve_lighting(cam, frames, images, F, albedo, method="newton")
