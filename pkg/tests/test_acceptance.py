"""Acceptance criteria 1-9.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary prints
one PASS/FAIL line per criterion. The end-to-end fits take several minutes.
"""
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from perfcap import cli
from perfcap.deformation import (
    apply_character,
    apply_embedded_deformation,
    arap_energy,
    build_graph,
    isometry_energy,
    laplacian_energy,
)
from perfcap.energies import EnergyTermConfig, chamfer_loss, nearest_correspondences, silhouette_loss, solve_lighting
from perfcap.fitting import FitOptions, FrameObjective, Stage, StageSchedule, evaluate_metrics, fit_frame, stage_functions
from perfcap.geometry import Mesh, Pose, RigidityWeights, Skeleton, SkinningWeights, dqs_pose, skinning_transforms, unpose_to_canonical
from perfcap.observation import FrameObservation, ViewObservation
from perfcap.parametric import StitchPart, register_face, stitch_models
from perfcap.render import (
    Camera,
    SHLighting,
    distance_transform,
    mask_boundary,
    rasterize,
    render_image,
    sh_shade,
)
from perfcap.synthetic import (
    SyntheticScenario,
    cloth_mesh,
    face_template,
    generate,
    sphere_mesh,
    tube_template,
)

from conftest import Criterion, random_rotation

# image terms are in px^2, arap in m^2; at 256 px one pixel is about 3 mm, so 1e5 puts them on par
FIT_WEIGHTS = dict(sil=1.0, mk=1.0, dr=1.0, cf=1e6, arap=1e5, iso=1.0, lap=1.0, jl=1.0)
FIT_ITERATIONS = 200


def fit_options():
    return FitOptions(weights=EnergyTermConfig(weights=FIT_WEIGHTS))


def full_schedule():
    return StageSchedule.default(max_iterations=FIT_ITERATIONS, stepper="lbfgs")


# -- 1. gradient suite -------------------------------------------------------------------------

# (label, term, blocks): every term against every parameter block it reaches
GRADIENT_CASES = (
    ("sil", "sil", ("graph", "disp")),
    ("mk/pose", "mk", ("pose",)),
    ("mk/graph", "mk", ("graph",)),
    ("dr", "dr", ("graph", "disp")),
    ("cf", "cf", ("graph", "disp")),
    ("arap", "arap", ("graph",)),
    ("iso", "iso", ("graph", "disp")),
    ("lap", "lap", ("graph", "disp")),
    ("jl", "jl", ("pose",)),
)
N_CONFIGS = 20
FD_STEP = 1e-5
BLOCK_COORDS = 24


def smooth_field(rng, size):
    """Positive ``a + b u + c v + d u v``; bilinear lookups reproduce it exactly, so FD sees no grid kinks."""
    ys, xs = np.mgrid[0:size, 0:size].astype(float)
    b, c = rng.uniform(-0.5, 0.5, size=2)
    return 2.0 * size + b * xs + c * ys + rng.uniform(-1e-3, 1e-3) * xs * ys


@pytest.fixture(scope="module")
def gradient_scene():
    ds = generate(SyntheticScenario(resolution=96, n_cameras=4, graph_nodes=16))
    rng = np.random.default_rng(7)
    size = ds.scenario.resolution
    views = [ViewObservation(v.camera, v.mask, smooth_field(rng, size),
                             np.stack([smooth_field(rng, size) / (2 * size) for _ in range(3)], axis=-1),
                             v.keypoints, v.confidences) for v in ds.frames[0].views]
    obs = FrameObservation(views, ds.frames[0].point_cloud)
    return ds, obs


def random_config(ds, rng):
    truth = ds.truth[0]
    D = rng.normal(scale=5e-3, size=truth.displacements.shape)
    pose = Pose(truth.pose.theta + rng.normal(scale=0.05, size=truth.pose.theta.shape),
                truth.pose.alpha + rng.normal(scale=0.05, size=3), truth.pose.t + rng.normal(scale=0.01, size=3))
    return replace(truth, pose=pose, graph_A=truth.graph_A + rng.normal(scale=0.05, size=truth.graph_A.shape),
                   graph_T=truth.graph_T + rng.normal(scale=0.01, size=truth.graph_T.shape), displacements=D)


def limit_violating(params, limits, rng):
    """Angles a fixed distance inside or outside their limits, at least one outside."""
    lo, hi = np.asarray(limits, dtype=float).T
    mid, half = (lo + hi) / 2, (hi - lo) / 2
    outside = rng.random(lo.size) < 0.5
    outside[rng.integers(lo.size)] = True
    frac = np.where(outside, rng.uniform(1.1, 1.5, lo.size), rng.uniform(0.0, 0.9, lo.size))
    theta = mid + rng.choice([-1.0, 1.0], lo.size) * frac * half
    return replace(params, pose=replace(params.pose, theta=theta))


def gradient_error(obj, term, blocks, params, rng):
    stage = Stage("check", blocks, (term,))
    packing, evaluate, refresh = stage_functions(obj, stage, params)
    x0 = packing.pack(params)
    frozen = refresh(x0)
    _, g = evaluate(x0, frozen)
    sizes = {"pose": params.pose.theta.size + 6, "graph": 6 * len(params.graph_A),
             "disp": 3 * len(packing.free_rows)}
    assert sum(sizes[b] for b in blocks) == x0.size
    coords, start = [], 0
    for block in blocks:
        span = np.arange(start, start + sizes[block])
        coords.append(span if len(span) <= BLOCK_COORDS else rng.choice(span, BLOCK_COORDS, replace=False))
        start += sizes[block]
    coords = np.concatenate(coords)
    fd = np.empty(len(coords))
    for k, i in enumerate(coords):
        e = np.zeros_like(x0)
        e[i] = FD_STEP
        fd[k] = (obj.weights.weight(term) * (evaluate(x0 + e, frozen)[0][term] - evaluate(x0 - e, frozen)[0][term])
                 / (2 * FD_STEP))
    return float(np.linalg.norm(fd - g[coords]) / np.linalg.norm(g[coords]))


def test_criterion_1_gradient_suite(gradient_scene):
    ds, obs = gradient_scene
    with Criterion(1, "analytic gradients match central differences") as c:
        rng = np.random.default_rng(11)
        lights = [SHLighting(rng.normal(scale=0.3, size=(9, 3))) for _ in obs.views]
        obj = FrameObjective(ds.template, ds.graph, obs, FitOptions(), lights)
        t0 = time.perf_counter()
        worst = {}
        for label, term, blocks in GRADIENT_CASES:
            configs = [random_config(ds, rng) for _ in range(N_CONFIGS)]
            if term == "jl":
                configs = [limit_violating(p, ds.template.skeleton.limits, rng) for p in configs]
            errors = [gradient_error(obj, term, blocks, p, rng) for p in configs]
            worst[label] = max(errors)
        elapsed = time.perf_counter() - t0
        top = max(worst, key=worst.get)
        c.detail = f"worst {top} {worst[top]:.1e} over {N_CONFIGS} configs x {len(worst)} cases, {elapsed:.1f} s"
        for label, err in worst.items():
            assert err < 1e-4, f"{label}: relative error {err:.2e}"
        assert elapsed < 60.0


# -- 2. rest and rigid zeros ----------------------------------------------------------------------

def test_criterion_2_rest_and_rigid_zeros():
    with Criterion(2, "regularizers vanish at rest and under rigid motion") as c:
        rng = np.random.default_rng(2)
        tube = tube_template()
        mesh = tube.canonical_mesh()
        graph = build_graph(mesh, tube.rigidity, 48)
        values = {}
        R = random_rotation(rng)
        t = rng.normal(size=3)
        A = np.tile(Rotation.from_matrix(R).as_rotvec(), (graph.n_nodes, 1))
        T = graph.node_positions @ R.T + t - graph.node_positions
        values["arap_rigid"] = arap_energy(graph, A, T)[0]
        values["iso_rest"] = isometry_energy(mesh.vertices, mesh, tube.rigidity)[0]
        values["lap_rest"] = laplacian_energy(mesh.vertices, mesh)[0]
        values["chamfer_identical"] = chamfer_loss(mesh.vertices, mesh.vertices)[0]
        # sheet whose vertices sit on pixel centers: boundary vertices land where the DT is zero
        cam = Camera(48.0, 48.0, 23.5, 23.5, 48, 48, np.eye(3), [0, 0, 2.0])
        px = np.arange(12, 37, 3, dtype=float)
        U, Vv = np.meshgrid(px, px)
        V = np.stack([(U.ravel() - cam.cx) * 2 / cam.fx, (Vv.ravel() - cam.cy) * 2 / cam.fy,
                      np.zeros(U.size)], axis=1)
        n = len(px)
        F = np.array([f for r in range(n - 1) for q in range(n - 1)
                      for f in ([r * n + q, (r + 1) * n + q, r * n + q + 1],
                                [r * n + q + 1, (r + 1) * n + q, (r + 1) * n + q + 1])])
        mask = rasterize(cam, V, F).mask
        values["silhouette_overlap"] = silhouette_loss(V, [cam], [distance_transform(mask)], faces=F, masks=[mask])[0]
        c.detail = ", ".join(f"{k}={v:.1e}" for k, v in values.items())
        for k, v in values.items():
            assert abs(v) <= 1e-10, k


# -- 3. skinning -----------------------------------------------------------------------------

def test_criterion_3_skinning():
    with Criterion(3, "DQS rigidity, equivariance and pose round trip") as c:
        rng = np.random.default_rng(3)
        errs = {"single_bone": 0.0, "equivariance": 0.0, "round_trip": 0.0}
        sk = Skeleton([-1, 0], [[0, 0, 0], [0, 0.5, 0]], (np.zeros((0, 3)), np.eye(3)))
        P = rng.normal(size=(40, 3))
        W = SkinningWeights.from_dense(np.c_[np.zeros(40), np.ones(40)])
        tube = tube_template()
        for _ in range(20):
            pose = Pose(rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3), rng.normal(size=3))
            R, t = skinning_transforms(sk, pose)
            out = dqs_pose(P, sk, W, pose)
            errs["single_bone"] = max(errs["single_bone"], np.abs(out - (P @ R[1].T + t[1])).max())
            theta = rng.uniform(-0.6, 0.6, tube.skeleton.dof_count)
            alpha, shift = rng.uniform(-1, 1, 3), rng.normal(size=3)
            local = dqs_pose(tube.mesh, tube.skeleton, tube.skinning, Pose(theta))
            moved = dqs_pose(tube.mesh, tube.skeleton, tube.skinning, Pose(theta, alpha, shift))
            G = Rotation.from_rotvec(alpha).as_matrix()
            errs["equivariance"] = max(errs["equivariance"], np.abs(moved - (local @ G.T + shift)).max())
            back = unpose_to_canonical(moved, tube.skeleton, tube.skinning, Pose(theta, alpha, shift))
            again = dqs_pose(back, tube.skeleton, tube.skinning, Pose(theta, alpha, shift))
            errs["round_trip"] = max(errs["round_trip"], np.abs(back - tube.mesh.vertices).max(),
                                     np.abs(again - moved).max())
        c.detail = ", ".join(f"{k}={v:.1e}" for k, v in errs.items())
        assert errs["single_bone"] <= 1e-9 and errs["equivariance"] <= 1e-9
        assert errs["round_trip"] <= 1e-8


# -- 4. oracles ------------------------------------------------------------------------------

def test_criterion_4_oracles():
    with Criterion(4, "chamfer, embedded deformation, SH shading and DT match direct oracles") as c:
        rng = np.random.default_rng(4)
        # chamfer vs O(PN) double loop
        X, Y = rng.normal(size=(40, 3)), rng.normal(size=(50, 3))
        value, _ = chamfer_loss(X, Y)
        nn_xy = [min(range(len(Y)), key=lambda j: float(np.sum((x - Y[j]) ** 2))) for x in X]
        nn_yx = [min(range(len(X)), key=lambda i: float(np.sum((X[i] - y) ** 2))) for y in Y]
        corr = nearest_correspondences(X, Y)
        assert list(corr.to_target) == nn_xy and list(corr.to_source) == nn_yx
        da, db = X - Y[nn_xy], X[nn_yx] - Y
        assert value == float(np.sum(da * da) + np.sum(db * db))
        loop = sum(float(np.sum((X[i] - Y[j]) ** 2)) for i, j in enumerate(nn_xy)) + \
            sum(float(np.sum((X[i] - Y[j]) ** 2)) for j, i in enumerate(nn_yx))
        assert abs(value - loop) <= 1e-13 * loop
        # embedded deformation vs the per-vertex formula
        V, F = cloth_mesh(1.0, 1.0, 8, 6)
        graph = build_graph(Mesh(V, F), RigidityWeights(np.ones(len(V))), 8)
        A, T = rng.normal(scale=0.5, size=(8, 3)), rng.normal(size=(8, 3))
        out = apply_embedded_deformation(V, graph, A, T)
        Wd, g = graph.influence.toarray(), graph.node_positions
        direct = np.array([sum(Wd[i, k] * (Rotation.from_rotvec(A[k]).as_matrix() @ (V[i] - g[k]) + g[k] + T[k])
                               for k in range(8) if Wd[i, k]) for i in range(len(V))])
        ed_err = np.abs(out - direct).max()
        assert ed_err <= 1e-12
        # SH shading vs the explicit basis sum
        n = rng.normal(size=(100, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        l, alb = rng.normal(size=(9, 3)), rng.random((100, 3))
        s = sh_shade(n, SHLighting(l), alb)
        k0, k1, k2 = 0.5 * np.sqrt(1 / np.pi), np.sqrt(3 / (4 * np.pi)), 0.5 * np.sqrt(15 / np.pi)
        sh_err = 0.0
        for p, (x, y, z) in enumerate(n):
            Yb = [k0, k1 * y, k1 * z, k1 * x, k2 * x * y, k2 * y * z, 0.25 * np.sqrt(5 / np.pi) * (3 * z * z - 1),
                  k2 * x * z, 0.25 * np.sqrt(15 / np.pi) * (x * x - y * y)]
            sh_err = max(sh_err, np.abs(s[p] - alb[p] * sum(Yb[j] * l[j] for j in range(9))).max())
        assert sh_err <= 1e-10
        # distance transform vs brute-force scan
        mask = np.zeros((50, 50), dtype=bool)
        mask[8:40, 12:30] = True
        mask[20:45, 25:44] = True
        mask[30:34, 5:15] = True
        edge = np.argwhere(mask_boundary(mask))
        yy, xx = np.mgrid[0:50, 0:50]
        brute = np.sqrt(((yy[..., None] - edge[:, 0]) ** 2 + (xx[..., None] - edge[:, 1]) ** 2).min(axis=-1))
        assert np.array_equal(distance_transform(mask), brute)
        c.detail = f"chamfer exact, ED {ed_err:.1e}, SH {sh_err:.1e}, DT exact"


# -- 5. lighting ------------------------------------------------------------------------------

def test_criterion_5_lighting_round_trip():
    with Criterion(5, "SH lighting recovered from rendered images") as c:
        rng = np.random.default_rng(5)
        t0 = time.perf_counter()
        cam = Camera.look_at([0, 0, 2.5], [0, 0, 0], [0, 1, 0], 180, 180, 128, 128)
        V, F = sphere_mesh(0.6, 16, 32)
        albedo = 0.3 + 0.7 * rng.random((len(V), 3))
        frames = [V + rng.normal(scale=0.01, size=3) for _ in range(3)]
        l_true = rng.normal(size=(9, 3))
        images = [render_image(cam, X, F, albedo, SHLighting(l_true)) for X in frames]
        sol = solve_lighting(cam, frames, images, F, albedo)
        err = float(np.linalg.norm(sol.lighting.l - l_true) / np.linalg.norm(l_true))
        elapsed = time.perf_counter() - t0
        c.detail = f"relative error {err:.1e}, {elapsed:.2f} s"
        assert err < 1e-6 and elapsed < 10.0


# -- 6 and 7. synthetic recovery and ablations -----------------------------------------------------

@pytest.fixture(scope="module")
def wrinkled():
    return generate(SyntheticScenario())


@pytest.fixture(scope="module")
def full_fit(wrinkled):
    t0 = time.perf_counter()
    res = fit_frame(wrinkled.template, wrinkled.graph, wrinkled.frames[0], full_schedule(), options=fit_options())
    return res, time.perf_counter() - t0


def test_criterion_6_synthetic_recovery(wrinkled, full_fit):
    with Criterion(6, "full staged fit recovers the wrinkled cylinder") as c:
        res, elapsed = full_fit
        ds = wrinkled
        truth = ds.truth[0]
        assert ds.template.n_vertices == 480 and len(ds.cameras) == 8
        assert ds.cameras[0].width == ds.cameras[0].height == 256
        radius = float(np.max(np.linalg.norm(ds.template.mesh.vertices[:, [0, 2]], axis=1)))
        err = float(np.linalg.norm(res.vertices - ds.truth_vertices[0], axis=1).mean())
        # true pose, no graph warp, no displacements
        rest_graph = ds.graph.with_params(np.zeros_like(truth.graph_A), np.zeros_like(truth.graph_T))
        baseline_V = apply_character(ds.template, rest_graph, None, truth.pose)
        baseline = evaluate_metrics(baseline_V, ds.truth_vertices[0])[0]
        chamfer = evaluate_metrics(res.vertices, ds.truth_vertices[0])[0]
        c.detail = (f"mean error {err:.2e} = {100 * err / radius:.2f}% of radius, chamfer {chamfer:.2e} = "
                    f"{100 * chamfer / baseline:.3f}% of baseline, {elapsed:.0f} s")
        assert err < 0.01 * radius
        assert chamfer < 0.05 * baseline
        assert elapsed < 300.0


def test_criterion_7_ablation_direction(wrinkled, full_fit):
    with Criterion(7, "removing render loss, chamfer loss or displacement stage hurts") as c:
        ds = wrinkled
        full = evaluate_metrics(full_fit[0].vertices, ds.truth_vertices[0])[0]
        schedules = {"no render": full_schedule().without_term("dr"),
                     "no chamfer": full_schedule().without_term("cf"),
                     "no displacement": full_schedule().without("displacement")}
        ablated = {}
        for name, sched in schedules.items():
            res = fit_frame(ds.template, ds.graph, ds.frames[0], sched, options=fit_options())
            ablated[name] = evaluate_metrics(res.vertices, ds.truth_vertices[0])[0]
        c.detail = f"full {full:.4e}; " + ", ".join(f"{k} {v:.4e}" for k, v in ablated.items())
        for name, value in ablated.items():
            assert value > full, name


# -- 8. registration --------------------------------------------------------------------------

def test_criterion_8_registration_self_consistency():
    with Criterion(8, "face registration recovers the planted asset") as c:
        fx = face_template()
        pairs = type(fx.pairs)(fx.pairs.template - fx.face_vertices[0], fx.pairs.model)
        assert np.array_equal(fx.face_vertices, fx.face_vertices[0] + np.arange(len(fx.face_vertices)))
        exact = register_face(fx.model, fx.face_points, pairs, prior=0.0)
        sim_err = max(np.abs(exact.affine.linear - fx.affine.linear).max(), np.abs(exact.affine.t - fx.affine.t).max())
        reg = register_face(fx.model, fx.face_points, pairs)
        w, w_true = np.r_[reg.w_S, reg.w_E], np.r_[fx.w_S, fx.w_E]
        coef_err = float(np.linalg.norm(w - w_true) / np.linalg.norm(w_true))
        readd = float(np.abs(reg.neutral + fx.model.expression_offset(reg.w_E) - reg.refined).max())
        kept = fx.model.kept
        stitched = stitch_models(fx.template, [StitchPart("face", reg.neutral_in_template(fx.model),
                                                          fx.model.submesh(kept), fx.remove)], max_distance=0.1)
        rows = np.asarray(stitched.template.skinning.weights.sum(axis=1)).ravel()
        row_err = float(np.abs(rows - 1).max())
        c.detail = (f"similarity {sim_err:.1e}, coefficients {coef_err:.1e}, re-add {readd:.1e}, "
                    f"row sums {row_err:.1e}")
        assert sim_err <= 1e-10
        assert coef_err <= 1e-3
        assert readd <= 1e-12
        assert row_err <= 1e-12


# -- 9. determinism --------------------------------------------------------------------------

def test_criterion_9_determinism(tmp_path):
    with Criterion(9, "repeated fits write byte-identical parameters") as c:
        stages = [
            {"name": "pose", "blocks": ["pose"], "terms": ["mk", "jl"], "max_iterations": 50, "stepper": "lbfgs"},
            {"name": "graph", "blocks": ["graph"], "terms": ["sil", "mk", "arap"], "max_iterations": 20,
             "stepper": "lbfgs"},
            {"name": "lighting", "blocks": ["lighting"], "terms": []},
            {"name": "graph_full", "blocks": ["graph"], "terms": ["sil", "mk", "arap", "dr", "cf"],
             "max_iterations": 20, "stepper": "lbfgs"},
            {"name": "displacement", "blocks": ["disp"], "terms": ["sil", "dr", "cf", "iso", "lap"],
             "max_iterations": 20, "stepper": "lbfgs"},
        ]
        base = {"seed": 3, "scenario": {"resolution": 96, "n_cameras": 4, "graph_nodes": 16, "n_frames": 2,
                                        "motion": "rotate"},
                "schedule": {"stages": stages}, "weights": {"cf": 1e6}}
        cli.cmd_generate(cli.load_config(environ={}, overrides={**base, "paths": {"data": str(tmp_path / "data")}}))
        outs = []
        for k in range(2):
            out = tmp_path / f"run{k}"
            config = cli.load_config(environ={}, overrides={**base, "paths": {"data": str(tmp_path / "data"),
                                                                              "output": str(out)}})
            assert cli.cmd_fit(config)["frames"] == [0, 1]
            outs.append(out)
        names = sorted(p.name for p in (outs[0] / "frames").glob("*.json") if not p.name.endswith(".fit.json"))
        assert names == ["000000.json", "000001.json"]
        same = [(outs[0] / "frames" / n).read_bytes() == (outs[1] / "frames" / n).read_bytes() for n in names]
        c.detail = f"{sum(same)}/{len(same)} parameter files identical"
        assert all(same)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
