"""Data terms, the joint-limit prior and the per-camera lighting solve.

Every energy returns ``(value, gradient)``. Discrete sets (boundary vertices,
chamfer correspondences, rasterized coverage) are taken as arguments so
callers can freeze them while a line search probes nearby parameters; when
omitted they are computed at the given vertices.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError
from .geometry import Pose, Skeleton, landmark_pose_jacobian, scatter_rows
from .render import (
    Camera,
    Raster,
    SHLighting,
    bilinear_sample,
    boundary_vertices,
    project,
    rasterize,
    sh_basis,
    sh_basis_jacobian,
    vertex_normals,
    vertex_normals_vjp,
)

TERMS = ("sil", "mk", "dr", "cf", "arap", "iso", "lap", "jl")


@dataclass
class EnergyTermConfig:
    """Per-term weights and on/off switches. Terms default to weight 1."""

    weights: dict = field(default_factory=lambda: {name: 1.0 for name in TERMS})
    enabled: tuple = TERMS
    stage: str = ""

    def __post_init__(self):
        full = {name: 1.0 for name in TERMS}
        full.update(self.weights)
        unknown = set(full) - set(TERMS) | set(self.enabled) - set(TERMS)
        if unknown:
            raise ConfigError(f"unknown energy terms: {sorted(unknown)}")
        if any(w < 0 for w in full.values()):
            raise ConfigError("term weights must be nonnegative")
        self.weights = full
        self.enabled = tuple(self.enabled)

    def weight(self, name: str) -> float:
        return self.weights[name] if name in self.enabled else 0.0


@dataclass
class EnergyReport:
    """Per-term values, weighted total and gradient norms per parameter block."""

    terms: dict
    weights: dict
    total: float
    grad_norms: dict = field(default_factory=dict)
    stage: str = ""
    iteration: int = 0
    flags: dict = field(default_factory=dict)

    @classmethod
    def assemble(cls, terms: dict, weights: dict, **kwargs) -> "EnergyReport":
        total = float(sum(weights[name] * value for name, value in terms.items()))
        return cls(dict(terms), {k: weights[k] for k in terms}, total, **kwargs)

    def to_json(self) -> str:
        return json.dumps({
            "stage": self.stage,
            "iteration": self.iteration,
            "total": self.total,
            "terms": self.terms,
            "weights": self.weights,
            "grad_norms": self.grad_norms,
            "flags": self.flags,
        }, sort_keys=True)


# -- silhouette ----------------------------------------------------------------

def compute_boundary_sets(V, faces, cameras, masks, rasters=None):
    rasters = [None] * len(cameras) if rasters is None else rasters
    return [boundary_vertices(cam, V, faces, m, raster=r) for cam, m, r in zip(cameras, masks, rasters)]


def silhouette_loss(V, cameras, distance_maps, boundary_sets=None, faces=None, masks=None, signed=True):
    """``sum_c sum_{i in B_c} d_ci * D_c(pi_c(V_i))^2`` with bilinear DT lookups.

    The directional weight enters literally, so -1 terms make the loss signed.
    ``signed=False`` drops it (every boundary vertex is pulled onto the
    nearest mask boundary), which is what the fitter uses by default.
    """
    V = np.asarray(V, dtype=float)
    if boundary_sets is None:
        if faces is None or masks is None:
            raise ConfigError("faces and masks are needed to compute boundary sets")
        boundary_sets = compute_boundary_sets(V, faces, cameras, masks)
    total = 0.0
    grad = np.zeros_like(V)
    for cam, dt, bset in zip(cameras, distance_maps, boundary_sets):
        if len(bset.indices) == 0:
            continue
        idx = bset.indices
        uv, _, J = project(cam, V[idx], jacobian=True)
        val, du, dv = bilinear_sample(dt, uv, gradient=True)
        d = bset.direction if signed else np.ones(len(idx))
        total += float(np.sum(d * val * val))
        g_uv = (2.0 * d * val)[:, None] * np.stack([du, dv], axis=1)
        grad += scatter_rows(len(V), idx, np.einsum("na,nab->nb", g_uv, J))
    return total, grad


# -- landmarks -----------------------------------------------------------------

def landmark_loss(markers, cameras, keypoints, confidences):
    """``sum_c sum_j beta_cj |pi_c(M_j) - m_cj|^2`` and its gradient w.r.t. the markers."""
    M = np.asarray(markers, dtype=float)
    total = 0.0
    grad = np.zeros_like(M)
    for cam, kp, beta in zip(cameras, keypoints, confidences):
        kp = np.asarray(kp, dtype=float)
        beta = np.asarray(beta, dtype=float)
        if kp.shape != (len(M), 2) or beta.shape != (len(M),):
            raise ValueError("keypoints/confidences must match the marker count")
        use = beta > 0
        if not np.any(use):
            continue
        uv, _, J = project(cam, M[use], jacobian=True)
        r = uv - kp[use]
        total += float(np.sum(beta[use] * np.sum(r * r, axis=1)))
        grad[use] += np.einsum("na,nab->nb", 2.0 * beta[use, None] * r, J)
    return total, grad


def landmark_loss_pose(skeleton: Skeleton, pose: Pose, cameras, keypoints, confidences, canonical=None):
    """Marker loss for skeleton-attached landmarks, gradient w.r.t. the pose vector."""
    P, J = landmark_pose_jacobian(skeleton, pose, canonical)
    value, gM = landmark_loss(P, cameras, keypoints, confidences)
    return value, np.einsum("na,nak->k", gM, J)


# -- dense rendering -----------------------------------------------------------

def render_loss(V, faces, albedo, cameras, lightings, images, rasters=None):
    """Squared photometric error over mesh-covered pixels.

    For each covered pixel the frozen face id and barycentrics define a
    surface point; its shaded color is compared with the image sampled
    bilinearly at the point's projection. At the rasterization state the
    projection is the pixel center, so the value equals the per-pixel sum.
    """
    V = np.asarray(V, dtype=float)
    faces = np.asarray(faces, dtype=np.int64)
    albedo = np.asarray(albedo, dtype=float)
    if rasters is None:
        rasters = [rasterize(cam, V, faces) for cam in cameras]
    unit, _ = vertex_normals(V, faces)
    total = 0.0
    grad = np.zeros_like(V)
    g_unit = np.zeros_like(V)
    for cam, light, img, ras in zip(cameras, lightings, images, rasters):
        ys, xs = ras.covered()
        if len(ys) == 0:
            continue
        l = light.l if isinstance(light, SHLighting) else np.asarray(light).reshape(9, 3)
        corners = faces[ras.face_id[ys, xs]]
        b = ras.bary[ys, xs]
        X = np.einsum("pk,pka->pa", b, V[corners])
        uv, _, J = project(cam, X, jacobian=True)
        sample, du, dv = bilinear_sample(img, uv, gradient=True)
        A = np.einsum("pk,pka->pa", b, albedo[corners])
        n_raw = np.einsum("pk,pka->pa", b, unit[corners])
        n_len = np.linalg.norm(n_raw, axis=1, keepdims=True)
        n = n_raw / n_len
        nc = n @ cam.R.T
        Y = sh_basis(nc)
        r = A * (Y @ l) - sample
        total += float(np.sum(r * r))

        g_r = 2.0 * r
        g_Y = (g_r * A) @ l.T
        g_nc = np.einsum("pj,pja->pa", g_Y, sh_basis_jacobian(nc))
        g_n = g_nc @ cam.R
        g_raw = (g_n - n * np.sum(g_n * n, axis=1, keepdims=True)) / n_len
        g_unit += scatter_rows(len(V), corners, b[:, :, None] * g_raw[:, None, :])

        g_uv = -np.stack([np.sum(g_r * du, axis=1), np.sum(g_r * dv, axis=1)], axis=1)
        g_X = np.einsum("pa,pab->pb", g_uv, J)
        grad += scatter_rows(len(V), corners, b[:, :, None] * g_X[:, None, :])
    grad += vertex_normals_vjp(V, faces, g_unit)
    return total, grad


# -- chamfer -------------------------------------------------------------------

@dataclass(frozen=True)
class Correspondences:
    """Nearest neighbours: ``to_target[i]`` for each point, ``to_source[j]`` for each target."""

    to_target: np.ndarray
    to_source: np.ndarray


def nearest_correspondences(V, target) -> Correspondences:
    V = np.asarray(V, dtype=float)
    target = np.asarray(target, dtype=float)
    if len(V) == 0 or len(target) == 0:
        raise ValueError("chamfer needs two nonempty point sets")
    _, a = cKDTree(target).query(V)
    _, b = cKDTree(V).query(target)
    return Correspondences(a, b)


def chamfer_loss(V, target, correspondences: Correspondences | None = None):
    """Symmetric sum of squared nearest-neighbour distances, gradient w.r.t. ``V``."""
    V = np.asarray(V, dtype=float)
    target = np.asarray(target, dtype=float)
    if correspondences is None:
        correspondences = nearest_correspondences(V, target)
    da = V - target[correspondences.to_target]
    db = V[correspondences.to_source] - target
    value = float(np.sum(da * da) + np.sum(db * db))
    grad = 2.0 * da + scatter_rows(len(V), correspondences.to_source, 2.0 * db)
    return value, grad


# -- joint limits --------------------------------------------------------------

def joint_limit_loss(theta, limits):
    """Squared hinge outside per-DOF ``[min, max]`` intervals."""
    theta = np.asarray(theta, dtype=float)
    limits = np.asarray(limits, dtype=float).reshape(-1, 2)
    if limits.shape[0] != theta.size:
        raise ConfigError("one [min, max] limit per joint angle required")
    if np.any(limits[:, 0] > limits[:, 1]):
        raise ConfigError("joint limit min exceeds max")
    over = np.maximum(theta - limits[:, 1], 0.0)
    under = np.maximum(limits[:, 0] - theta, 0.0)
    value = float(np.sum(over * over) + np.sum(under * under))
    return value, 2.0 * over - 2.0 * under


# -- lighting ------------------------------------------------------------------

@dataclass
class LightingSolution:
    lighting: SHLighting
    residual: float
    baseline_residual: float
    rank_deficient: bool
    n_pixels: int


def _lighting_rows(camera: Camera, V, faces, albedo, image, raster: Raster | None = None):
    raster = rasterize(camera, V, faces) if raster is None else raster
    ys, xs = raster.covered()
    corners = np.asarray(faces)[raster.face_id[ys, xs]]
    A = np.einsum("pk,pka->pa", raster.bary[ys, xs], np.asarray(albedo)[corners])
    Y = sh_basis(raster.normals[ys, xs])
    return A, Y, np.asarray(image, dtype=float)[ys, xs]


def solve_lighting(camera: Camera, vertex_sets, images, faces, albedo, damping: float = 1e-6,
                   method: str = "lstsq", iterations: int = 5000, learning_rate: float = 0.05,
                   rasters=None) -> LightingSolution:
    """Fit one camera's SH coefficients across sampled frames.

    Shading is linear in the coefficients, so ``method="lstsq"`` solves the
    damped normal equations per channel in closed form. ``method="adam"``
    minimizes the same damped objective iteratively.
    """
    rows, targets = [], []
    for k, (V, img) in enumerate(zip(vertex_sets, images)):
        ras = None if rasters is None else rasters[k]
        A, Y, I = _lighting_rows(camera, V, faces, albedo, img, ras)
        rows.append((A, Y))
        targets.append(I)
    if rows:
        A = np.concatenate([r[0] for r in rows])
        Y = np.concatenate([r[1] for r in rows])
        I = np.concatenate(targets)
    else:
        A, Y, I = np.zeros((0, 3)), np.zeros((0, 9)), np.zeros((0, 3))

    l = np.zeros((9, 3))
    rank_deficient = False
    normal_mats = []
    for c in range(3):
        M = A[:, c:c + 1] * Y
        G = M.T @ M
        normal_mats.append((G, M.T @ I[:, c]))
        ev = np.linalg.eigvalsh(G)
        if ev[-1] <= 0 or ev[0] <= 1e-9 * ev[-1]:
            rank_deficient = True
    if method == "lstsq":
        for c, (G, rhs) in enumerate(normal_mats):
            l[:, c] = np.linalg.solve(G + damping * np.eye(9), rhs)
    elif method == "adam":
        m = np.zeros_like(l)
        v = np.zeros_like(l)
        for it in range(1, iterations + 1):
            g = np.stack([2.0 * (G @ l[:, c] - rhs) + 2.0 * damping * l[:, c]
                          for c, (G, rhs) in enumerate(normal_mats)], axis=1)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            l -= learning_rate * (m / (1 - 0.9**it)) / (np.sqrt(v / (1 - 0.999**it)) + 1e-12)
    else:
        raise ConfigError(f"unknown lighting solver {method!r}")

    residual = float(np.sum((A * (Y @ l) - I) ** 2))
    baseline = float(np.sum(I * I))
    return LightingSolution(SHLighting(l), residual, baseline, rank_deficient, len(I))
