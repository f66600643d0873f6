import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perfcap.deformation import DisplacementField, apply_character, apply_embedded_deformation, build_graph
from perfcap.errors import ConfigError, DegenerateGeometryError
from perfcap.geometry import Pose, dqs_pose
from perfcap.parametric import (
    AffineTransform,
    FaceAttachment,
    HandAttachment,
    LandmarkPairs,
    LinearShapeModel,
    StitchPart,
    apply_expression_and_hands,
    boundary_loops,
    eval_linear_model,
    euler_characteristic,
    extract_hand_canonical,
    fit_affine,
    fit_shape_expression,
    is_closed_manifold,
    pose_hand_model,
    refine_and_extract_neutral,
    refine_vertices,
    register_face,
    stitch_models,
)
from perfcap.synthetic import face_model, face_template, hand_model, sphere_mesh, tube_template

from conftest import grid_mesh, random_rotation


@pytest.fixture(scope="module")
def face():
    return face_model()


@pytest.fixture(scope="module")
def fixture():
    return face_template()


@pytest.fixture(scope="module")
def hands():
    return hand_model()


def local_pairs(fx):
    """Landmark pairs indexing the face region instead of the whole template."""
    return LandmarkPairs(fx.pairs.template - fx.face_vertices[0], fx.pairs.model)


def small_model(rng, n=12, S=3, E=2):
    return LinearShapeModel(rng.normal(size=(n, 3)), rng.normal(size=(S, 3 * n)), rng.random(S) + 0.5,
                            rng.normal(size=(E, 3 * n)), rng.random(E) + 0.5, np.array([[0, 1, 2]]))


# -- linear models ----------------------------------------------------------------------

def test_face_model_dimensions(face):
    model, landmarks = face
    assert model.n_shape == 80 and model.n_expr == 64
    assert len(landmarks) == 8


def test_linear_model_basics(rng):
    m = small_model(rng)
    np.testing.assert_array_equal(eval_linear_model(m), m.mean)
    e = np.zeros(3)
    e[1] = 1.0
    np.testing.assert_allclose(eval_linear_model(m, e), m.mean + m.shape_sigma[1] * m.shape_basis[1].reshape(-1, 3),
                               atol=1e-14)
    with pytest.raises(ValueError):
        eval_linear_model(m, np.zeros(4))
    with pytest.raises(ValueError):
        LinearShapeModel(m.mean, m.shape_basis, -m.shape_sigma, m.expr_basis, m.expr_sigma, m.faces)
    with pytest.raises(ValueError):
        LinearShapeModel(m.mean, m.shape_basis, m.shape_sigma[:2], m.expr_basis, m.expr_sigma, m.faces)


def test_linear_model_loop_oracle(face, rng):
    model, _ = face
    wS, wE = rng.normal(size=80), rng.normal(size=64)
    expected = model.mean.ravel().copy()
    for i in range(80):
        expected += wS[i] * model.shape_sigma[i] * model.shape_basis[i]
    for j in range(64):
        expected += wE[j] * model.expr_sigma[j] * model.expr_basis[j]
    assert np.abs(eval_linear_model(model, wS, wE) - expected.reshape(-1, 3)).max() <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_linear_model_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    m = small_model(rng)
    w1, w2 = rng.normal(size=5), rng.normal(size=5)
    f = lambda w: eval_linear_model(m, w[:3], w[3:]) - m.mean
    assert np.abs(f(a * w1 + b * w2) - a * f(w1) - b * f(w2)).max() <= 1e-10


# -- similarity ---------------------------------------------------------------------------

def test_affine_transform_validation():
    with pytest.raises(ValueError):
        AffineTransform(scale=0.0)
    R = AffineTransform([0.3, -1.2, 2.0]).R
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-14)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_fit_affine_identity(rng):
    P = rng.normal(size=(8, 3))
    affine, residual = fit_affine(None, P, P)
    np.testing.assert_allclose(affine.linear, np.eye(3), atol=1e-12)
    assert affine.scale == pytest.approx(1.0, abs=1e-12) and residual <= 1e-24


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_fit_affine_recovers_similarity(seed):
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(8, 3))
    R = random_rotation(rng)
    s, t = rng.uniform(0.2, 5.0), rng.normal(size=3)
    Q = s * P @ R.T + t
    affine, residual = fit_affine(LandmarkPairs(np.arange(8), np.arange(8)), Q, P)
    assert abs(affine.scale - s) <= 1e-10 * s
    assert np.abs(affine.R - R).max() <= 1e-10
    assert np.abs(affine.t - t).max() <= 1e-10
    assert residual <= 1e-20


def test_fit_affine_guards(rng):
    P = rng.normal(size=(2, 3))
    with pytest.raises(ConfigError):
        fit_affine(None, P, P)
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(DegenerateGeometryError):
        fit_affine(None, line, line)


# -- face fitting ------------------------------------------------------------------------------

def test_shape_expression_self_sampling(face, rng):
    model, landmarks = face
    # coefficients of 0.01 move vertices by a few millimetres, a plausible face variation
    wS, wE = rng.normal(scale=0.01, size=80), rng.normal(scale=0.01, size=64)
    target = eval_linear_model(model, wS, wE)[model.kept]
    pos = np.full(model.n_vertices, -1)
    pos[model.kept] = np.arange(len(model.kept))
    pairs = LandmarkPairs(pos[landmarks], landmarks)
    fit = fit_shape_expression(model, AffineTransform(), target, pairs, prior=1e-6)
    w, w_true = np.r_[fit.w_S, fit.w_E], np.r_[wS, wE]
    assert np.linalg.norm(w - w_true) / np.linalg.norm(w_true) <= 1e-3


def test_shape_expression_mean_is_fixed_point(face):
    model, landmarks = face
    target = model.mean[model.kept]
    pos = np.full(model.n_vertices, -1)
    pos[model.kept] = np.arange(len(model.kept))
    fit = fit_shape_expression(model, AffineTransform(), target, LandmarkPairs(pos[landmarks], landmarks))
    assert np.abs(np.r_[fit.w_S, fit.w_E]).max() <= 1e-12


def test_prior_path_shrinks_coefficients(face, rng):
    model, landmarks = face
    target = eval_linear_model(model, rng.normal(scale=0.01, size=80), rng.normal(scale=0.01, size=64))[model.kept]
    target = target + rng.normal(scale=1e-3, size=target.shape)
    pos = np.full(model.n_vertices, -1)
    pos[model.kept] = np.arange(len(model.kept))
    pairs = LandmarkPairs(pos[landmarks], landmarks)
    norms = []
    for prior in (0.0, 1e-4, 1e-3, 1e-2, 0.1, 1.0):
        fit = fit_shape_expression(model, AffineTransform(), target, pairs, prior=prior)
        norms.append(np.linalg.norm(np.r_[fit.w_S, fit.w_E]))
    assert all(b <= a + 1e-12 for a, b in zip(norms, norms[1:]))


def test_neutral_extraction(face, rng):
    model, _ = face
    V = rng.normal(size=model.mean.shape)
    np.testing.assert_array_equal(refine_and_extract_neutral(model, V, np.zeros(64)), V)
    e = np.zeros(64)
    e[0] = 1.0
    V1 = model.mean + model.expr_sigma[0] * model.expr_basis[0].reshape(-1, 3)
    assert np.abs(refine_and_extract_neutral(model, V1, e) - model.mean).max() <= 1e-15
    wE = rng.normal(size=64)
    neutral = refine_and_extract_neutral(model, V, wE)
    assert np.abs(neutral + model.expression_offset(wE) - V).max() <= 1e-12
    with pytest.raises(ValueError):
        refine_and_extract_neutral(model, V[:-1], wE)


def test_refinement_keeps_exact_surface(face):
    model, _ = face
    X = model.mean[model.kept]
    affine = AffineTransform([0.1, 0.2, 0.3], [1, 2, 3], 1.3)
    refined, chamfer = refine_vertices(X, model.submesh(model.kept), affine, affine.apply(X))
    assert chamfer <= 1e-20
    np.testing.assert_allclose(refined, X, atol=1e-10)


def test_register_face_recovers_planted_parameters(fixture):
    fx = fixture
    reg = register_face(fx.model, fx.face_points, local_pairs(fx))
    assert set(reg.residuals) == {"affine", "shape_expression", "refinement"}
    w, w_true = np.r_[reg.w_S, reg.w_E], np.r_[fx.w_S, fx.w_E]
    assert np.linalg.norm(w - w_true) / np.linalg.norm(w_true) <= 1e-3
    assert abs(reg.affine.scale - fx.affine.scale) <= 1e-6
    assert reg.residuals["refinement"] <= 1e-6
    re_added = reg.neutral + fx.model.expression_offset(reg.w_E)
    assert np.abs(re_added - reg.refined).max() <= 1e-12


def test_register_face_exact_without_prior(fixture):
    fx = fixture
    reg = register_face(fx.model, fx.face_points, local_pairs(fx), prior=0.0)
    assert np.abs(reg.affine.linear - fx.affine.linear).max() <= 1e-10
    assert np.abs(reg.affine.t - fx.affine.t).max() <= 1e-10


def test_register_face_needs_eight_landmarks(fixture):
    fx = fixture
    p = local_pairs(fx)
    with pytest.raises(ConfigError):
        register_face(fx.model, fx.face_points, LandmarkPairs(p.template[:6], p.model[:6]))


# -- hands --------------------------------------------------------------------------------------

def test_hand_model_rest_pose(hands):
    np.testing.assert_allclose(pose_hand_model(hands), hands.mean, atol=1e-15)
    w = np.linspace(-1, 1, hands.n_shape)
    np.testing.assert_allclose(pose_hand_model(hands, w), eval_linear_model(hands, w), atol=1e-15)


def test_hand_single_joint_rigid(hands, rng):
    rig = hands.rig
    W = np.zeros_like(rig.weights)
    W[:, 0] = 1.0
    one = LinearShapeModel(hands.mean, hands.shape_basis, hands.shape_sigma, hands.expr_basis, hands.expr_sigma,
                           hands.faces, hands.region, type(rig)(rig.parents, rig.joints, W, rig.n_body, rig.n_hand))
    theta_b = np.zeros((rig.n_body, 3))
    theta_b[0] = rng.normal(size=3)
    from scipy.spatial.transform import Rotation
    R = Rotation.from_rotvec(theta_b[0]).as_matrix()
    expected = (hands.mean - rig.joints[0]) @ R.T + rig.joints[0]
    assert np.abs(pose_hand_model(one, None, theta_b) - expected).max() <= 1e-12


def test_hand_lbs_matrix_oracle(hands, rng):
    from scipy.spatial.transform import Rotation
    rig = hands.rig
    tb = rng.normal(scale=0.3, size=(rig.n_body, 3))
    th = rng.normal(scale=0.3, size=(2, rig.n_hand, 3))
    aa = np.concatenate([tb, th.reshape(-1, 3)])
    G = []
    for j in range(rig.n_joints):
        L = np.eye(4)
        L[:3, :3] = Rotation.from_rotvec(aa[j]).as_matrix()
        p = rig.parents[j]
        L[:3, 3] = rig.joints[j] - (rig.joints[p] if p >= 0 else 0)
        G.append(L if p < 0 else G[p] @ L)
    M = hands.mean
    expected = np.zeros_like(M)
    for i in range(len(M)):
        T = sum(rig.weights[i, j] * G[j] @ np.linalg.inv(np.r_[np.c_[np.eye(3), rig.joints[j]], [[0, 0, 0, 1]]])
                for j in range(rig.n_joints))
        expected[i] = (T @ np.r_[M[i], 1.0])[:3]
    assert np.abs(pose_hand_model(hands, None, tb, th) - expected).max() <= 1e-10


def test_hand_guards(hands, face):
    with pytest.raises(ConfigError):
        pose_hand_model(face[0])
    with pytest.raises(ValueError):
        pose_hand_model(hands, None, np.zeros(4))


def test_hand_canonical_extraction(hands):
    parts = extract_hand_canonical(hands)
    assert len(parts) == 2
    for side, (ids, V, F) in enumerate(parts):
        np.testing.assert_array_equal(ids, hands.hand_vertices(side))
        np.testing.assert_allclose(V, hands.mean[ids], atol=1e-15)
        assert F.max() < len(ids)


# -- topology -------------------------------------------------------------------------------------

def test_topology_helpers():
    V, F = sphere_mesh(1.0, 6, 8)
    assert is_closed_manifold(F) and euler_characteristic(F) == 2
    assert boundary_loops(F) == []
    g = grid_mesh(4, 3)
    loops = boundary_loops(g.faces)
    assert len(loops) == 1 and len(loops[0]) == 10
    assert not is_closed_manifold(g.faces) and euler_characteristic(g.faces) == 1


# -- stitching -------------------------------------------------------------------------------------

def _region_part(template, remove, scale=1.0):
    canon = template.canonical_mesh()
    ids = np.flatnonzero(remove)
    remap = np.full(template.n_vertices, -1)
    remap[ids] = np.arange(len(ids))
    F = remap[canon.faces]
    F = F[np.all(F >= 0, axis=1)]
    P = canon.vertices[ids].copy()
    P[:, [0, 2]] *= scale
    return StitchPart("part", P, F, remove)


def test_identity_stitch_preserves_attributes():
    tube = tube_template()
    V = tube.canonical_mesh().vertices
    remove = (V[:, 1] > 0.4) & (V[:, 1] < 0.6) & (V[:, 0] > 0)
    res = stitch_models(tube, [_region_part(tube, remove)], bridge=False)
    ids = res.part_vertices["part"]
    orig = np.flatnonzero(remove)
    np.testing.assert_array_equal(res.source[ids], orig)
    Wn, Wo = res.template.skinning.weights.toarray(), tube.skinning.weights.toarray()
    np.testing.assert_array_equal(Wn[ids], Wo[orig])
    np.testing.assert_array_equal(res.template.rigidity.r[ids], tube.rigidity.r[orig])
    np.testing.assert_array_equal(res.template.mesh.albedo[ids], tube.mesh.albedo[orig])
    np.testing.assert_allclose(res.template.canonical_mesh().vertices[ids], V[orig], atol=1e-12)
    assert res.template.n_vertices == tube.n_vertices


def test_stitched_rows_sum_to_one(fixture):
    rows = np.asarray(fixture.template.skinning.weights.sum(axis=1)).ravel()
    assert np.all(rows == 1.0)


def test_cap_bridge_closes_surface():
    tube = tube_template(capped=True)
    V = tube.canonical_mesh().vertices
    assert is_closed_manifold(tube.mesh.faces)
    remove = V[:, 1] > 0.9
    res = stitch_models(tube, [_region_part(tube, remove, scale=0.95)], bridge=True)
    assert res.bridged == 1
    assert is_closed_manifold(res.template.mesh.faces)
    assert euler_characteristic(res.template.mesh.faces) == 2


def test_stitch_guards():
    tube = tube_template()
    V = tube.canonical_mesh().vertices
    remove = V[:, 1] > 0.9
    part = _region_part(tube, remove)
    far = StitchPart("far", part.vertices + [0, 1.0, 0], part.faces, remove)
    with pytest.raises(DegenerateGeometryError):
        stitch_models(tube, [far])
    empty = StitchPart("none", part.vertices, part.faces, np.zeros(tube.n_vertices, dtype=bool))
    with pytest.raises(ConfigError):
        stitch_models(tube, [empty])


def test_stitch_copies_graph_influence():
    tube = tube_template()
    graph = build_graph(tube.canonical_mesh(), tube.rigidity, 24)
    V = tube.canonical_mesh().vertices
    remove = (V[:, 1] > 0.4) & (V[:, 1] < 0.6) & (V[:, 0] > 0)
    res = stitch_models(tube, [_region_part(tube, remove, 0.98)], graph=graph, bridge=False)
    W = res.graph.influence.toarray()
    np.testing.assert_array_equal(W, graph.influence.toarray()[res.source])
    np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-12)


# -- per-frame face and hand state -------------------------------------------------------------------

@pytest.fixture(scope="module")
def rigged(fixture, hands):
    """Face fixture template with both hands stitched onto the tube sides."""
    fx = fixture
    affine = AffineTransform(np.zeros(3), [0.0, 0.5, 0.0], 0.75)
    canon = fx.template.canonical_mesh().vertices
    parts = []
    model_vertices = []
    for side, (ids, P, F) in enumerate(extract_hand_canonical(hands)):
        sign = -1 if side == 0 else 1
        remove = (sign * canon[:, 0] > 0.2) & (np.abs(canon[:, 1] - 0.5) < 0.06) & (np.abs(canon[:, 2]) < 0.08)
        parts.append(StitchPart(f"hand{side}", affine.apply(P), F, remove))
        model_vertices.append(ids)
    graph = build_graph(fx.template.canonical_mesh(), fx.template.rigidity, 32)
    res = stitch_models(fx.template, parts, graph=graph, bridge=False, max_distance=0.1)
    # the face stays in place: survivors keep their relative order
    position = np.full(fx.template.n_vertices, -1)
    position[res.kept] = np.arange(len(res.kept))
    face_ids = position[fx.face_vertices]
    assert np.all(face_ids >= 0)
    face_att = FaceAttachment(fx.model, fx.affine, face_ids)
    hand_att = HandAttachment(hands, affine, None, (res.part_vertices["hand0"], res.part_vertices["hand1"]),
                              tuple(model_vertices))
    return res.template, face_att, hand_att, res.graph


def test_zero_state_is_unchanged(rigged):
    template, face_att, hand_att, _ = rigged
    X = apply_expression_and_hands(template, face_att, np.zeros(64), hand_att, np.zeros((2, 15, 3)))
    np.testing.assert_allclose(X, template.canonical_mesh().vertices, atol=1e-12)


def test_single_expression_moves_only_face(rigged):
    template, face_att, _, _ = rigged
    e = np.zeros(64)
    e[3] = 2.0
    X = apply_expression_and_hands(template, face_att, e)
    moved = np.flatnonzero(np.any(X != template.canonical_mesh().vertices, axis=1))
    assert len(moved) > 0 and set(moved) <= set(face_att.vertices.tolist())


def test_hand_pose_moves_only_hands(rigged, rng):
    template, _, hand_att, _ = rigged
    X = apply_expression_and_hands(template, hands=hand_att, theta_h=rng.normal(scale=0.3, size=(2, 15, 3)))
    moved = np.flatnonzero(np.any(np.abs(X - template.canonical_mesh().vertices) > 1e-12, axis=1))
    allowed = set(np.concatenate(hand_att.vertices).tolist())
    assert len(moved) > 0 and set(moved) <= allowed


def test_composition_with_character(rigged, rng):
    template, face_att, hand_att, graph = rigged
    graph = graph.with_params(rng.normal(scale=0.1, size=(32, 3)), rng.normal(scale=0.01, size=(32, 3)))
    field = DisplacementField.from_rigidity(rng.normal(scale=0.005, size=(template.n_vertices, 3)), template.rigidity)
    pose = Pose(rng.uniform(-0.3, 0.3, template.skeleton.dof_count), rng.normal(scale=0.2, size=3), rng.normal(size=3))
    wE = rng.normal(scale=0.5, size=64)
    th = rng.normal(scale=0.3, size=(2, 15, 3))
    canonical = apply_expression_and_hands(template, face_att, wE, hand_att, th)
    out = apply_character(template, graph, field, pose, canonical=canonical)

    X = template.canonical_mesh().vertices.copy()
    X[face_att.vertices] += face_att.model.expression_offset(wE)[face_att.model.kept] @ face_att.affine.linear.T
    posed = pose_hand_model(hand_att.model, None, None, th)
    rest = pose_hand_model(hand_att.model)
    for side in (0, 1):
        mv = hand_att.model_vertices[side]
        X[hand_att.vertices[side]] += (posed[mv] - rest[mv]) @ hand_att.affine.linear.T
    X = apply_embedded_deformation(X, graph) + field.masked()
    manual = dqs_pose(X, template.skeleton, template.skinning, pose)
    assert np.abs(out - manual).max() <= 1e-12
