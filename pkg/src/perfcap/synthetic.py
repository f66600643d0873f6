"""Procedural test assets: tube/sphere/cloth templates, camera rings and scenarios.

These stand in for studio captures. A scenario renders noiseless (or
deliberately corrupted) observations of a template deformed by known
parameters, so every fit can be scored against ground truth.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from .deformation import (
    DEFAULT_EPSILON_RIGID,
    CharacterParams,
    EmbeddedGraph,
    apply_embedded_deformation,
    build_graph,
    rigid_mask,
)
from .geometry import Mesh, Pose, RigidityWeights, Skeleton, SkinningWeights, dqs_pose, landmark_positions
from .observation import FrameObservation, ViewObservation
from .render import Camera, SHLighting, distance_transform, project, rasterize, render_image
from .template import Template


# -- meshes --------------------------------------------------------------------

def tube_mesh(radius=0.25, height=1.0, n_around=24, n_rings=20, capped=False):
    """Open (or capped) cylinder along +y with outward-facing triangles."""
    phi = 2.0 * np.pi * np.arange(n_around) / n_around
    ys = np.linspace(0.0, height, n_rings)
    V = np.array([[radius * np.cos(p), y, radius * np.sin(p)] for y in ys for p in phi])
    faces = []
    for k in range(n_rings - 1):
        for j in range(n_around):
            a = k * n_around + j
            b = (k + 1) * n_around + j
            c = k * n_around + (j + 1) % n_around
            d = (k + 1) * n_around + (j + 1) % n_around
            faces += [[a, b, c], [c, b, d]]
    if capped:
        bottom = len(V)
        top = bottom + 1
        V = np.vstack([V, [[0.0, 0.0, 0.0], [0.0, height, 0.0]]])
        last = (n_rings - 1) * n_around
        for j in range(n_around):
            jn = (j + 1) % n_around
            faces.append([bottom, j, jn])
            faces.append([top, last + jn, last + j])
    return V, np.array(faces, dtype=np.int64)


def sphere_mesh(radius=1.0, n_lat=16, n_lon=32, center=(0.0, 0.0, 0.0)):
    """UV sphere with outward-facing triangles."""
    V = [[0.0, radius, 0.0]]
    for i in range(1, n_lat):
        th = np.pi * i / n_lat
        for j in range(n_lon):
            ph = 2.0 * np.pi * j / n_lon
            V.append([radius * np.sin(th) * np.cos(ph), radius * np.cos(th), radius * np.sin(th) * np.sin(ph)])
    V.append([0.0, -radius, 0.0])
    V = np.array(V) + np.asarray(center)
    faces = []
    ring = lambda i, j: 1 + (i - 1) * n_lon + j % n_lon
    for j in range(n_lon):
        faces.append([0, ring(1, j + 1), ring(1, j)])
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces += [[a, b, c], [b, d, c]]
    south = len(V) - 1
    for j in range(n_lon):
        faces.append([south, ring(n_lat - 1, j), ring(n_lat - 1, j + 1)])
    return V, np.array(faces, dtype=np.int64)


def cloth_mesh(width=1.0, height=1.0, nx=24, ny=20):
    """Flat grid in the z=0 plane, facing -z."""
    xs = np.linspace(-width / 2, width / 2, nx)
    ys = np.linspace(0.0, height, ny)
    V = np.array([[x, y, 0.0] for y in ys for x in xs])
    faces = []
    for k in range(ny - 1):
        for j in range(nx - 1):
            a = k * nx + j
            faces += [[a, a + 1, a + nx], [a + 1, a + nx + 1, a + nx]]
    return V, np.array(faces, dtype=np.int64)


# -- rig -----------------------------------------------------------------------

def chain_skeleton(height=1.0, radius=0.25, with_limits=True) -> Skeleton:
    """Three-joint vertical chain: a root plus two 2-DOF bending joints."""
    j1, j2 = 0.35 * height, 0.7 * height
    lm_heights = [0.05, 0.35, 0.7, 0.95]
    lm_joints, lm_offsets = [], []
    joint_y = [0.0, j1, j2]
    for h in lm_heights:
        y = h * height
        joint = max(k for k, jy in enumerate(joint_y) if jy <= y + 1e-12)
        for off in ([radius, 0, 0], [0, 0, radius], [-radius, 0, 0]):
            lm_joints.append(joint)
            lm_offsets.append(np.array(off) + [0.0, y - joint_y[joint], 0.0])
    limits = np.array([[-1.0, 1.0]] * 4) if with_limits else None
    return Skeleton(
        parents=[-1, 0, 1],
        offsets=[[0.0, 0.0, 0.0], [0.0, j1, 0.0], [0.0, j2 - j1, 0.0]],
        axes=[np.zeros((0, 3)), [[1, 0, 0], [0, 0, 1]], [[1, 0, 0], [0, 0, 1]]],
        limits=limits,
        landmark_joints=lm_joints,
        landmark_offsets=lm_offsets,
        names=("root", "mid", "top"),
    )


def chain_skinning(V, skeleton: Skeleton, blend=0.1) -> SkinningWeights:
    """Height-based weights blending linearly across each child joint."""
    y = np.asarray(V)[:, 1]
    jy = skeleton.rest_positions[:, 1]
    J = len(jy)
    W = np.zeros((len(y), J))
    # owner step functions smoothed into ramps of width 2 * blend around joints
    s = [np.clip((y - jy[k] + blend) / (2 * blend), 0.0, 1.0) for k in range(1, J)]
    W[:, 0] = 1.0 - s[0]
    for k in range(1, J):
        nxt = s[k] if k < J - 1 else 0.0
        W[:, k] = s[k - 1] - nxt
    W = np.clip(W, 0.0, None)
    return SkinningWeights.from_dense(W)


def band_materials(V, height=1.0):
    """Material labels by height: skin at the bottom, face at the top, clothing between."""
    y = np.asarray(V)[:, 1] / height
    labels = np.where(y < 0.12, "skin", np.where(y > 0.88, "face", np.where(y < 0.5, "pants", "upper")))
    return tuple(str(s) for s in labels)


def pattern_albedo(V, height=1.0):
    phi = np.arctan2(V[:, 2], V[:, 0])
    y = V[:, 1] / height
    return np.clip(np.stack([
        0.55 + 0.35 * np.sin(3 * phi + 6 * y),
        0.50 + 0.30 * np.cos(2 * phi - 5 * y),
        0.50 + 0.30 * np.sin(4 * y + phi),
    ], axis=1), 0.05, 0.95)


def tube_template(radius=0.25, height=1.0, n_around=24, n_rings=20, capped=False) -> Template:
    V, F = tube_mesh(radius, height, n_around, n_rings, capped)
    skeleton = chain_skeleton(height, radius)
    materials = band_materials(V, height)
    return Template(
        mesh=Mesh(V, F, pattern_albedo(V, height)),
        skeleton=skeleton,
        skinning=chain_skinning(V, skeleton),
        rigidity=RigidityWeights.from_labels(materials),
        materials=materials,
        metadata={"shape": "cylinder", "radius": radius, "height": height},
    )


def camera_ring(n_cameras=8, distance=2.2, center=(0.0, 0.5, 0.0), size=256, focal=None, elevation=0.15):
    """Cameras evenly spaced on a horizontal ring, all looking at ``center``."""
    center = np.asarray(center, dtype=float)
    focal = 0.62 * size * distance / 1.0 if focal is None else focal
    cams = []
    for k in range(n_cameras):
        a = 2.0 * np.pi * k / n_cameras
        eye = center + np.array([distance * np.sin(a), elevation * distance, -distance * np.cos(a)])
        cams.append(Camera.look_at(eye, center, [0.0, 1.0, 0.0], focal, focal, size, size))
    return cams


def default_lighting() -> SHLighting:
    l = np.zeros((9, 3))
    l[0] = [2.2, 2.1, 2.0]
    l[1] = [-0.35, -0.3, -0.3]
    l[2] = [-0.9, -0.85, -0.8]
    l[3] = [0.15, 0.1, 0.05]
    l[6] = [-0.1, -0.1, -0.12]
    return SHLighting(l)


# -- ground-truth motion -------------------------------------------------------

def warp_graph_params(graph: EmbeddedGraph, height=1.0, bulge=0.06, twist=0.15, sway=0.02, rigidity_cut=DEFAULT_EPSILON_RIGID):
    """Smooth bulge-twist-sway warp sampled at the graph nodes."""
    g = graph.node_positions
    y = g[:, 1] / height
    soft = (graph.node_rigidity <= rigidity_cut).astype(float)
    s = 1.0 + bulge * np.sin(np.pi * y) * soft
    psi = twist * y
    c, sn = np.cos(psi), np.sin(psi)
    x = s * g[:, 0]
    z = s * g[:, 2]
    target = np.stack([c * x + sn * z + sway * np.sin(np.pi * y), g[:, 1], -sn * x + c * z], axis=1)
    A = np.stack([np.zeros_like(psi), psi, np.zeros_like(psi)], axis=1)
    return A, target - g


def wrinkle_displacements(template: Template, amplitude=0.01, frequency=4.0, epsilon_rigid=DEFAULT_EPSILON_RIGID):
    """Radial sinusoidal folds, zero on rigid vertices."""
    V = template.canonical_mesh().vertices
    phi = np.arctan2(V[:, 2], V[:, 0])
    y = V[:, 1] / max(np.ptp(V[:, 1]), 1e-12)
    radial = np.stack([np.cos(phi), np.zeros_like(phi), np.sin(phi)], axis=1)
    D = amplitude * (np.sin(2.0 * np.pi * frequency * y) * np.cos(2.0 * phi))[:, None] * radial
    return D * rigid_mask(template.rigidity, epsilon_rigid)


# -- scenarios -----------------------------------------------------------------

@dataclass
class SyntheticScenario:
    """Parameters of a generated dataset."""

    shape: str = "cylinder"
    resolution: int = 256
    n_cameras: int = 8
    n_frames: int = 1
    graph_nodes: int = 48
    motion: str = "none"
    rotation_step: float = 0.05
    deformation: float = 1.0
    wrinkle_amplitude: float = 0.01
    wrinkle_frequency: float = 4.0
    keypoint_sigma: float = 0.0
    mask_erosion: int = 0
    cloud_jitter: float = 0.0
    cloud_fraction: float = 1.0
    epsilon_rigid: float = DEFAULT_EPSILON_RIGID
    seed: int = 0
    pose: tuple = (0.15, -0.1, 0.2, 0.05)
    root_rotation: tuple = (0.0, 0.3, 0.0)
    translation: tuple = (0.05, 0.0, -0.03)

    def __post_init__(self):
        if self.n_cameras < 1:
            raise ValueError("need at least one camera")
        if self.resolution <= 0 or self.n_frames <= 0:
            raise ValueError("resolution and frame count must be positive")
        if self.shape not in ("cylinder", "sphere", "plane-cloth"):
            raise ValueError(f"unknown base shape {self.shape!r}")


@dataclass
class SyntheticDataset:
    scenario: SyntheticScenario
    template: Template
    graph: EmbeddedGraph
    cameras: list
    lighting: list
    frames: list
    truth: list
    truth_vertices: list
    meta: dict = field(default_factory=dict)


def scenario_template(scenario: SyntheticScenario) -> Template:
    if scenario.shape == "cylinder":
        return tube_template()
    if scenario.shape == "sphere":
        V, F = sphere_mesh(0.3, 12, 24, center=(0.0, 0.5, 0.0))
    else:
        V, F = cloth_mesh(0.8, 1.0, 24, 20)
    skeleton = chain_skeleton(1.0, 0.25)
    materials = band_materials(V, 1.0)
    return Template(
        mesh=Mesh(V, F, pattern_albedo(V, 1.0)),
        skeleton=skeleton,
        skinning=chain_skinning(V, skeleton),
        rigidity=RigidityWeights.from_labels(materials),
        materials=materials,
        metadata={"shape": scenario.shape, "radius": 0.3 if scenario.shape == "sphere" else 0.4, "height": 1.0},
    )


def truth_params(scenario: SyntheticScenario, template: Template, graph: EmbeddedGraph, frame: int) -> CharacterParams:
    A, T = warp_graph_params(graph)
    A, T = A * scenario.deformation, T * scenario.deformation
    D = wrinkle_displacements(template, scenario.wrinkle_amplitude, scenario.wrinkle_frequency,
                              scenario.epsilon_rigid)
    alpha = np.array(scenario.root_rotation, dtype=float)
    if scenario.motion == "rotate":
        alpha = alpha + np.array([0.0, scenario.rotation_step * frame, 0.0])
    theta = np.array(scenario.pose, dtype=float)[:template.skeleton.dof_count]
    pose = Pose(theta, alpha, np.array(scenario.translation, dtype=float))
    return CharacterParams(pose, A, T, D)


def character_markers(template: Template, graph: EmbeddedGraph, params: CharacterParams, marker_influence=None):
    """Posed landmarks after the graph warp (landmarks carry no displacements)."""
    L0 = template.skeleton.rest_landmarks
    W = graph.point_influence(L0) if marker_influence is None else marker_influence
    Lx = apply_embedded_deformation(L0, graph, params.graph_A, params.graph_T, influence=W)
    return landmark_positions(template.skeleton, params.pose, canonical=Lx)


def posed_vertices(template: Template, graph: EmbeddedGraph, params: CharacterParams, epsilon_rigid=DEFAULT_EPSILON_RIGID):
    V0 = template.canonical_mesh().vertices
    X = apply_embedded_deformation(V0, graph, params.graph_A, params.graph_T)
    X = X + params.displacements * rigid_mask(template.rigidity, epsilon_rigid)
    return dqs_pose(X, template.skeleton, template.skinning, params.pose)


def observe(template: Template, cameras, lightings, V, markers, rng=None, keypoint_sigma=0.0,
            mask_erosion=0, cloud=None) -> FrameObservation:
    """Render masks, distance maps, images and keypoints of posed vertices ``V``."""
    views = []
    faces = template.mesh.faces
    albedo = template.mesh.albedo
    for cam, light in zip(cameras, lightings):
        ras = rasterize(cam, V, faces)
        mask = ras.mask
        if mask_erosion > 0:
            mask = ndimage.binary_erosion(mask, iterations=mask_erosion)
        image = render_image(cam, V, faces, albedo, light, raster=ras)
        uv, _ = project(cam, markers)
        if keypoint_sigma > 0:
            uv = uv + rng.normal(scale=keypoint_sigma, size=uv.shape)
        views.append(ViewObservation(
            camera=cam,
            mask=mask,
            distance=distance_transform(mask),
            image=image,
            keypoints=uv,
            confidences=np.ones(len(uv)),
        ))
    return FrameObservation(views=views, point_cloud=cloud)


def generate(scenario: SyntheticScenario) -> SyntheticDataset:
    rng = np.random.default_rng(scenario.seed)
    template = scenario_template(scenario)
    graph = build_graph(template.canonical_mesh(), template.rigidity, scenario.graph_nodes)
    cameras = camera_ring(scenario.n_cameras, size=scenario.resolution)
    lighting = [default_lighting() for _ in cameras]
    frames, truth, truth_V = [], [], []
    for f in range(scenario.n_frames):
        params = truth_params(scenario, template, graph, f)
        V = posed_vertices(template, graph, params, scenario.epsilon_rigid)
        markers = character_markers(template, graph, params)
        cloud = V.copy()
        if scenario.cloud_fraction < 1.0:
            keep = rng.random(len(cloud)) < scenario.cloud_fraction
            cloud = cloud[keep]
        if scenario.cloud_jitter > 0:
            cloud = cloud + rng.normal(scale=scenario.cloud_jitter, size=cloud.shape)
        frames.append(observe(template, cameras, lighting, V, markers, rng, scenario.keypoint_sigma,
                              scenario.mask_erosion, cloud))
        truth.append(params)
        truth_V.append(V)
    return SyntheticDataset(scenario, template, graph, cameras, lighting, frames, truth, truth_V)


# -- parametric model fixtures ------------------------------------------------------

def _similarity_modes(points):
    """Infinitesimal translation, rotation and scaling fields of a point set, (7, 3N)."""
    c = points - points.mean(axis=0)
    modes = [np.tile(e, (len(points), 1)) for e in np.eye(3)]
    modes += [np.cross(e, c) for e in np.eye(3)]
    modes.append(c)
    return np.stack([m.ravel() for m in modes])


def _orthonormal_smooth_basis(rng, mesh_faces, n_vertices, n_rows, smoothing=3, exclude=None):
    """Orthonormal rows (n_rows, 3N) of low-frequency random vector fields.

    Rows are kept orthogonal to the rows of ``exclude`` (e.g. similarity modes).
    """
    G = rng.normal(size=(n_vertices, 3, n_rows))
    if smoothing and len(mesh_faces):
        e = np.concatenate([mesh_faces[:, [0, 1]], mesh_faces[:, [1, 2]], mesh_faces[:, [2, 0]]])
        A = sp.csr_matrix((np.ones(2 * len(e)), (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])),
                          shape=(n_vertices, n_vertices))
        A.data[:] = 1.0
        deg = np.asarray(A.sum(axis=1)).ravel()
        avg = sp.diags(1.0 / (1.0 + deg)) @ (A + sp.identity(n_vertices))
        for _ in range(smoothing):
            G = np.stack([avg @ G[:, c, :] for c in range(3)], axis=1)
    G = G.reshape(3 * n_vertices, n_rows)
    if exclude is not None:
        Qx, _ = np.linalg.qr(np.asarray(exclude).T)
        G = G - Qx @ (Qx.T @ G)
    Q, _ = np.linalg.qr(G)
    return Q.T


def face_model(rows=20, cols=25, n_shape=80, n_expr=64, seed=0, width=0.18, height=0.22):
    """Curved face-like patch with random orthogonal shape/expression bases.

    Returns ``(model, landmark_indices)``; the outer ring of the patch is
    flagged as removable (neck/ears) and the 8 landmarks sit at eye corners,
    lip corners, the nose tip and the chin. Values are float32-representable
    so the binary asset format round-trips exactly.
    """
    from .parametric import REGION_REMOVED, LinearShapeModel

    rng = np.random.default_rng(seed)
    u = np.linspace(-0.5, 0.5, cols)
    v = np.linspace(-0.5, 0.5, rows)
    U, Vv = np.meshgrid(u, v)
    x = width * U
    y = height * Vv
    z = -0.08 * (1.0 - (2 * U) ** 2 * 0.5 - (2 * Vv) ** 2 * 0.3) - 0.02 * np.exp(-((U / 0.12) ** 2 + (Vv / 0.15) ** 2))
    mean = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    faces = []
    for r in range(rows - 1):
        for c in range(cols - 1):
            a = r * cols + c
            faces += [[a, a + cols, a + 1], [a + 1, a + cols, a + cols + 1]]
    faces = np.array(faces, dtype=np.int64)
    n = len(mean)
    basis = _orthonormal_smooth_basis(rng, faces, n, n_shape + n_expr, exclude=_similarity_modes(mean))
    shape_sigma = np.linspace(1.5, 1.0, n_shape)
    expr_sigma = np.linspace(1.4, 1.0, n_expr)
    region = np.zeros(n, dtype=np.uint8)
    rr, cc = np.divmod(np.arange(n), cols)
    region[(rr == 0) | (cc == 0) | (cc == cols - 1)] = REGION_REMOVED

    def at(fu, fv):
        return int(round((fv + 0.5) * (rows - 1))) * cols + int(round((fu + 0.5) * (cols - 1)))

    landmarks = np.array([at(-0.3, 0.2), at(-0.12, 0.2), at(0.12, 0.2), at(0.3, 0.2),
                          at(-0.15, -0.25), at(0.15, -0.25), at(0.0, 0.0), at(0.0, -0.42)])
    f32 = lambda a: np.asarray(a, dtype=np.float32).astype(float)
    model = LinearShapeModel(f32(mean), f32(basis[:n_shape]), f32(shape_sigma), f32(basis[n_shape:]),
                             f32(expr_sigma), faces, region)
    return model, landmarks


def hand_model(n_body=3, n_shape=16, seed=0, finger_length=0.08, segments=6):
    """Toy body-with-hands model: two five-finger hands of quad strips on a small body.

    Body joints: root plus one wrist per side (extra body joints chain off
    the root). Each finger has three joints.
    """
    from .parametric import REGION_HAND_LEFT, REGION_HAND_RIGHT, HandRig, LinearShapeModel

    if n_body < 3:
        raise ValueError("need a root and two wrists")
    rng = np.random.default_rng(seed)
    n_hand = 15
    parents = [-1, 0, 0] + [0] * (n_body - 3)
    joints = [[0.0, 0.0, 0.0], [-0.3, 0.0, 0.0], [0.3, 0.0, 0.0]] + [[0.0, 0.05 * k, 0.0] for k in range(1, n_body - 2)]
    verts, faces, region, owner = [], [], [], []
    # body: a small quad around the root
    verts += [[-0.05, -0.05, 0.0], [0.05, -0.05, 0.0], [0.05, 0.05, 0.0], [-0.05, 0.05, 0.0]]
    faces += [[0, 1, 2], [0, 2, 3]]
    region += [0] * 4
    owner += [(0, 0, 1.0)] * 4
    for side, sign, flag in ((0, -1.0, REGION_HAND_LEFT), (1, 1.0, REGION_HAND_RIGHT)):
        wrist = 1 + side
        base_joint = len(parents)
        for f in range(5):
            zoff = (f - 2) * 0.02
            chain = []
            for k in range(3):
                parent = wrist if k == 0 else chain[-1]
                jx = sign * (0.32 + k * finger_length / 3.0)
                parents.append(parent)
                joints.append([jx, 0.0, zoff])
                chain.append(base_joint + f * 3 + k)
            start = len(verts)
            for s in range(segments + 1):
                along = s / segments * finger_length
                x = sign * (0.32 + along)
                seg = min(int(along / (finger_length / 3.0)), 2)
                for w in (-0.006, 0.006):
                    verts.append([x, 0.0, zoff + w])
                    region.append(flag)
                    frac = along / (finger_length / 3.0) - seg
                    owner.append((chain[seg], wrist if seg == 0 else chain[seg - 1], 0.5 + 0.5 * min(frac, 1.0)))
            for s in range(segments):
                a = start + 2 * s
                if sign > 0:
                    faces += [[a, a + 2, a + 1], [a + 1, a + 2, a + 3]]
                else:
                    faces += [[a, a + 1, a + 2], [a + 1, a + 3, a + 2]]
    J = len(parents)
    N = len(verts)
    W = np.zeros((N, J))
    for i, (j, p, wj) in enumerate(owner):
        W[i, j] += wj
        W[i, p] += 1.0 - wj
    mean = np.array(verts)
    faces = np.array(faces, dtype=np.int64)
    basis = _orthonormal_smooth_basis(rng, faces, N, n_shape) * 0.02
    f32 = lambda a: np.asarray(a, dtype=np.float32).astype(float)
    W = f32(W)
    W /= W.sum(axis=1, keepdims=True)
    rig = HandRig(np.array(parents), f32(joints), W, n_body, n_hand)
    model = LinearShapeModel(f32(mean), f32(basis), f32(np.linspace(1.0, 0.5, n_shape)),
                             np.zeros((0, 3 * N)), np.zeros(0), faces, np.array(region, dtype=np.uint8), rig)
    return model


@dataclass
class FaceFixture:
    """Template whose face region is an exact sample of a linear face model."""

    template: Template
    model: object
    pairs: object                # LandmarkPairs: template vertex <-> model vertex
    face_vertices: np.ndarray    # template indices of the sampled face region
    w_S: np.ndarray
    w_E: np.ndarray
    affine: object

    @property
    def face_points(self) -> np.ndarray:
        return self.template.canonical_mesh().vertices[self.face_vertices]

    @property
    def remove(self) -> np.ndarray:
        mask = np.zeros(self.template.n_vertices, dtype=bool)
        mask[self.face_vertices] = True
        return mask


def face_template(seed=0, coefficient_scale=0.01, euler=(0.05, np.pi - 0.1, 0.02), translation=(0.01, 0.8, 0.16),
                  scale=1.1) -> FaceFixture:
    """Tube template with its upper front replaced by ``affine(face_model(w))``."""
    from .parametric import AffineTransform, LandmarkPairs, StitchPart, eval_linear_model, stitch_models

    model, landmarks = face_model(seed=seed)
    rng = np.random.default_rng(seed + 1)
    w_S = rng.normal(scale=coefficient_scale, size=model.n_shape)
    w_E = rng.normal(scale=coefficient_scale, size=model.n_expr)
    affine = AffineTransform(euler, translation, scale)
    kept = model.kept
    sample = affine.apply(eval_linear_model(model, w_S, w_E)[kept])
    tube = tube_template()
    V = tube.canonical_mesh().vertices
    window = (V[:, 2] > 0.12) & (np.abs(V[:, 1] - translation[1]) < 0.14) & (np.abs(V[:, 0]) < 0.12)
    part = StitchPart("face", sample, model.submesh(kept), window)
    stitched = stitch_models(tube, [part], max_distance=0.1)
    face_vertices = stitched.part_vertices["face"]
    position = np.full(model.n_vertices, -1)
    position[kept] = np.arange(len(kept))
    pairs = LandmarkPairs(face_vertices[position[landmarks]], landmarks)
    return FaceFixture(stitched.template, model, pairs, face_vertices, w_S, w_E, affine)
