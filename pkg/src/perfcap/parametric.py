"""Linear face/body-hand models, their registration to a template, and stitching.

Registration runs in the template's canonical pose: a similarity transform
from landmark pairs, shape and expression coefficients against the template
surface, the similarity again, free per-vertex refinement, and finally
removal of the fitted expression to obtain a neutral face. Stitching swaps
template regions for model meshes and transfers skinning, rigidity, albedo
and graph influence from the closest original template vertex.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve
from scipy.spatial import cKDTree

from . import rotations as rot
from .deformation import EmbeddedGraph
from .errors import ConfigError, DegenerateGeometryError
from .geometry import Mesh, RigidityWeights, SkinningWeights, dqs_pose
from .template import Template

REGION_REMOVED = 1
REGION_HAND_LEFT = 2
REGION_HAND_RIGHT = 4
FACE_LANDMARKS = 8
DEFAULT_PRIOR = 1e-3


# -- models ------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class HandRig:
    """Joint tree and dense LBS weights of a body-with-hands model.

    Joints are ordered ``[body (n_body, root first), left hand (n_hand), right hand (n_hand)]``.
    """

    parents: np.ndarray
    joints: np.ndarray
    weights: np.ndarray
    n_body: int
    n_hand: int = 15

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64)
        joints = np.asarray(self.joints, dtype=float).reshape(-1, 3)
        W = np.asarray(self.weights, dtype=float)
        J = len(parents)
        if J != self.n_body + 2 * self.n_hand or len(joints) != J:
            raise ValueError("joint count must equal n_body + 2 * n_hand")
        if parents[0] != -1 or np.any(parents[1:] >= np.arange(1, J)) or np.any(parents[1:] < 0):
            raise ValueError("joints must be topologically ordered with a single root")
        if W.ndim != 2 or W.shape[1] != J:
            raise ValueError("weights must be (N, J)")
        if np.any(W < 0) or np.max(np.abs(W.sum(axis=1) - 1.0)) > 1e-6:
            raise ValueError("LBS weight rows must be nonnegative and sum to 1")
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "weights", W)

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    def hand_joints(self, side: int) -> np.ndarray:
        return self.n_body + side * self.n_hand + np.arange(self.n_hand)


@dataclass(frozen=True, eq=False)
class LinearShapeModel:
    """``V = mean + sum w_S sigma_S B_S + sum w_E sigma_E B_E`` with optional LBS rig.

    Basis rows are flattened (x, y, z) per vertex. ``region`` holds per-vertex
    bit flags: removed parts (e.g. neck and ears) and left/right hand vertices.
    """

    mean: np.ndarray
    shape_basis: np.ndarray
    shape_sigma: np.ndarray
    expr_basis: np.ndarray
    expr_sigma: np.ndarray
    faces: np.ndarray
    region: np.ndarray | None = None
    rig: HandRig | None = None

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1, 3)
        n3 = mean.size
        BS = np.asarray(self.shape_basis, dtype=float).reshape(-1, n3)
        BE = np.asarray(self.expr_basis, dtype=float).reshape(-1, n3)
        sS = np.asarray(self.shape_sigma, dtype=float).ravel()
        sE = np.asarray(self.expr_sigma, dtype=float).ravel()
        if len(sS) != len(BS) or len(sE) != len(BE):
            raise ValueError("one standard deviation per basis row required")
        if np.any(sS <= 0) or np.any(sE <= 0):
            raise ValueError("standard deviations must be positive")
        F = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if F.size and (F.min() < 0 or F.max() >= len(mean)):
            raise ValueError("face index out of range")
        region = np.zeros(len(mean), dtype=np.uint8) if self.region is None else np.asarray(self.region, dtype=np.uint8)
        if region.shape != (len(mean),):
            raise ValueError("region flags must have one entry per vertex")
        if self.rig is not None and self.rig.weights.shape[0] != len(mean):
            raise ValueError("rig weights must have one row per vertex")
        for name, value in (("mean", mean), ("shape_basis", BS), ("shape_sigma", sS), ("expr_basis", BE),
                            ("expr_sigma", sE), ("faces", F), ("region", region)):
            object.__setattr__(self, name, value)

    @property
    def n_vertices(self) -> int:
        return len(self.mean)

    @property
    def n_shape(self) -> int:
        return len(self.shape_sigma)

    @property
    def n_expr(self) -> int:
        return len(self.expr_sigma)

    @property
    def kept(self) -> np.ndarray:
        """Vertex indices not flagged for removal."""
        return np.flatnonzero((self.region & REGION_REMOVED) == 0)

    def hand_vertices(self, side: int) -> np.ndarray:
        flag = REGION_HAND_LEFT if side == 0 else REGION_HAND_RIGHT
        return np.flatnonzero(self.region & flag)

    def expression_offset(self, w_E) -> np.ndarray:
        w_E = _coeffs(w_E, self.n_expr, "expression")
        return ((w_E * self.expr_sigma) @ self.expr_basis).reshape(-1, 3)

    def submesh(self, indices) -> tuple:
        """Vertices' faces restricted to ``indices`` and reindexed."""
        return _submesh_faces(self.faces, indices, self.n_vertices)


def _coeffs(w, n, what):
    w = np.zeros(n) if w is None else np.asarray(w, dtype=float).ravel()
    if w.size != n:
        raise ValueError(f"{what} coefficients: expected {n}, got {w.size}")
    return w


def _submesh_faces(faces, indices, n):
    indices = np.asarray(indices, dtype=np.int64)
    remap = np.full(n, -1, dtype=np.int64)
    remap[indices] = np.arange(len(indices))
    F = remap[faces]
    return F[np.all(F >= 0, axis=1)]


def eval_linear_model(model: LinearShapeModel, w_S=None, w_E=None) -> np.ndarray:
    """Model vertices for the given shape and expression coefficients."""
    w_S = _coeffs(w_S, model.n_shape, "shape")
    w_E = _coeffs(w_E, model.n_expr, "expression")
    flat = model.mean.ravel() + (w_S * model.shape_sigma) @ model.shape_basis \
        + (w_E * model.expr_sigma) @ model.expr_basis
    return flat.reshape(-1, 3)


# -- similarity transforms -----------------------------------------------------------

@dataclass(frozen=True)
class AffineTransform:
    """Similarity ``x -> s R(euler) x + t`` (xyz Euler angles in radians)."""

    euler: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "euler", np.asarray(self.euler, dtype=float).reshape(3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def R(self) -> np.ndarray:
        return rot.euler_to_matrix(self.euler)

    @property
    def linear(self) -> np.ndarray:
        return self.scale * self.R

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.linear.T + self.t

    def apply_vectors(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.linear.T

    @classmethod
    def from_matrix(cls, scale, R, t) -> "AffineTransform":
        return cls(rot.matrix_to_euler(R), t, scale)

    def to_dict(self) -> dict:
        return {"euler": self.euler.tolist(), "t": self.t.tolist(), "scale": self.scale}


@dataclass(frozen=True)
class LandmarkPairs:
    """Index pairs ``(template vertex, model vertex)``."""

    template: np.ndarray
    model: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.template, dtype=np.int64).ravel()
        b = np.asarray(self.model, dtype=np.int64).ravel()
        if a.shape != b.shape:
            raise ValueError("landmark index lists must have equal length")
        object.__setattr__(self, "template", a)
        object.__setattr__(self, "model", b)

    def __len__(self):
        return len(self.template)


def _similarity(src, dst, weights=None):
    """Closed-form weighted similarity ``dst ~ s R src + t`` (Umeyama)."""
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    xs, xd = src - mu_s, dst - mu_d
    cov = (xd * w[:, None]).T @ xs
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    var = float(np.sum(w * np.sum(xs * xs, axis=1)))
    s = float(np.trace(np.diag(S) @ D)) / var
    t = mu_d - s * R @ mu_s
    return s, R, t


def fit_affine(pairs: LandmarkPairs | None, template_pts, model_pts):
    """Least-squares similarity mapping model landmarks onto template landmarks.

    Returns ``(AffineTransform, residual)`` with the residual the summed
    squared landmark distance after alignment.
    """
    template_pts = np.asarray(template_pts, dtype=float).reshape(-1, 3)
    model_pts = np.asarray(model_pts, dtype=float).reshape(-1, 3)
    if pairs is not None:
        dst, src = template_pts[pairs.template], model_pts[pairs.model]
    else:
        dst, src = template_pts, model_pts
    if len(src) != len(dst):
        raise ValueError("landmark sets must have equal size")
    if len(src) < 3:
        raise ConfigError("similarity fit needs at least 3 landmark pairs")
    sv = np.linalg.svd(src - src.mean(0), compute_uv=False)
    if sv[0] <= 0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateGeometryError("landmarks are collinear or coincident")
    s, R, t = _similarity(src, dst)
    affine = AffineTransform.from_matrix(s, R, t)
    res = affine.apply(src) - dst
    return affine, float(np.sum(res * res))


# -- face fitting --------------------------------------------------------------------

@dataclass
class ShapeFit:
    w_S: np.ndarray
    w_E: np.ndarray
    chamfer: float
    landmark: float
    prior: float
    iterations: int


def _chamfer_pairs(P, target, tree=None):
    """Correspondence indices for both chamfer directions."""
    tree = cKDTree(target) if tree is None else tree
    _, to_target = tree.query(P)
    _, to_model = cKDTree(P).query(target)
    return to_target, to_model


def _chamfer_value(P, target):
    da, _ = cKDTree(target).query(P)
    db, _ = cKDTree(P).query(target)
    return float(np.sum(da * da) + np.sum(db * db))


def fit_shape_expression(model: LinearShapeModel, affine: AffineTransform, template_points, pairs: LandmarkPairs,
                         template_landmarks=None, prior: float = DEFAULT_PRIOR, landmark_weight: float = 1.0,
                         max_iterations: int = 50, w_init=None) -> ShapeFit:
    """Shape and expression coefficients for a fixed similarity.

    Minimizes chamfer(affine(model(w)), template) plus the landmark term plus
    ``prior * |w|^2``. The model is linear in ``w``, so with correspondences
    frozen each step is an exact damped least-squares solve (Gauss-Newton);
    correspondences are refreshed until they stop changing.
    ``template_landmarks`` gives landmark positions (defaults to
    ``template_points[pairs.template]``).
    """
    target = np.asarray(template_points, dtype=float)
    if len(target) == 0:
        raise ValueError("template region is empty")
    kept = model.kept
    if template_landmarks is None:
        template_landmarks = target[pairs.template]
    L = affine.linear
    S, E = model.n_shape, model.n_expr
    # columns: d(affine(model vertex))/dw, per kept vertex (k, 3, S+E)
    basis = np.concatenate([model.shape_basis * model.shape_sigma[:, None],
                            model.expr_basis * model.expr_sigma[:, None]]).reshape(S + E, -1, 3)
    Jall = np.einsum("ab,cnb->nac", L, basis)
    base_all = affine.apply(model.mean)
    Jk, base_k = Jall[kept], base_all[kept]
    Jl, base_l = Jall[pairs.model], base_all[pairs.model]
    tree = cKDTree(target)
    w = np.zeros(S + E) if w_init is None else np.asarray(w_init, dtype=float).copy()
    last = None
    it = 0
    for it in range(1, max_iterations + 1):
        P = base_k + Jk @ w
        corr = _chamfer_pairs(P, target, tree)
        if last is not None and all(np.array_equal(a, b) for a, b in zip(corr, last)):
            it -= 1
            break
        last = corr
        to_target, to_model = corr
        A = np.concatenate([Jk.reshape(-1, S + E), Jk[to_model].reshape(-1, S + E),
                            np.sqrt(landmark_weight) * Jl.reshape(-1, S + E)])
        b = np.concatenate([(target[to_target] - base_k).ravel(), (target - base_k[to_model]).ravel(),
                            np.sqrt(landmark_weight) * (template_landmarks - base_l).ravel()])
        w = np.linalg.solve(A.T @ A + prior * np.eye(S + E), A.T @ b)
    P = base_k + Jk @ w
    lm = base_l + Jl @ w - template_landmarks
    return ShapeFit(w[:S], w[S:], _chamfer_value(P, target), float(np.sum(lm * lm)),
                    float(prior * w @ w), it)


def refit_affine(model_vertices, template_points, pairs: LandmarkPairs, template_landmarks=None,
                 landmark_weight: float = 1.0, max_iterations: int = 50):
    """Similarity minimizing chamfer plus landmark distance for fixed model vertices."""
    target = np.asarray(template_points, dtype=float)
    M = np.asarray(model_vertices, dtype=float)
    if template_landmarks is None:
        template_landmarks = target[pairs.template]
    affine, _ = fit_affine(None, template_landmarks, M[pairs.model])
    tree = cKDTree(target)
    last = None
    for _ in range(max_iterations):
        P = affine.apply(M)
        corr = _chamfer_pairs(P, target, tree)
        if last is not None and all(np.array_equal(a, b) for a, b in zip(corr, last)):
            break
        last = corr
        to_target, to_model = corr
        src = np.concatenate([M, M[to_model], M[pairs.model]])
        dst = np.concatenate([target[to_target], target, template_landmarks])
        wts = np.concatenate([np.ones(len(M) + len(target)), np.full(len(pairs), landmark_weight)])
        s, R, t = _similarity(src, dst, wts)
        affine = AffineTransform.from_matrix(s, R, t)
    return affine


def fit_similarity_and_coefficients(model: LinearShapeModel, affine: AffineTransform, w, template_points,
                                    pairs: LandmarkPairs, template_landmarks=None, prior: float = DEFAULT_PRIOR,
                                    landmark_weight: float = 1.0, max_iterations: int = 50, tol: float = 1e-14):
    """Joint Gauss-Newton over the similarity and the coefficients.

    Alternating the two blocks converges slowly when model modes and
    similarity motions are nearly aligned; solving both together removes that.
    Correspondences are refreshed every iteration. Returns ``(affine, ShapeFit)``.
    """
    target = np.asarray(template_points, dtype=float)
    if template_landmarks is None:
        template_landmarks = target[pairs.template]
    S, E = model.n_shape, model.n_expr
    K = S + E
    basis = np.concatenate([model.shape_basis * model.shape_sigma[:, None],
                            model.expr_basis * model.expr_sigma[:, None]]).reshape(K, -1, 3)
    kept = model.kept
    rows = np.concatenate([kept, pairs.model])
    Bk = np.transpose(basis[:, rows], (1, 2, 0))          # (m, 3, K)
    mean = model.mean[rows]
    w = np.asarray(w, dtype=float).copy()
    s, R, t = affine.scale, affine.R, affine.t.copy()
    tree = cKDTree(target)
    nk = len(kept)
    sw = np.sqrt(landmark_weight)
    damp = np.r_[np.zeros(7), np.full(K, prior)]
    it = 0
    for it in range(1, max_iterations + 1):
        X = mean + Bk @ w
        Y = s * X @ R.T + t
        Yk = Y[:nk]
        to_target, to_model = _chamfer_pairs(Yk, target, tree)
        sel = np.concatenate([np.arange(nk), to_model, nk + np.arange(len(pairs))])
        goal = np.concatenate([target[to_target], target, template_landmarks])
        scale_rows = np.concatenate([np.ones(nk + len(target)), np.full(len(pairs), sw)])
        Ys = Y[sel]
        J = np.zeros((len(sel), 3, 7 + K))
        J[:, :, 0:3] = -rot.skew(Ys - t)                   # d/d(omega): omega x (Y - t)
        J[:, :, 3] = Ys - t                                # d/d(log s)
        J[:, :, 4:7] = np.eye(3)
        J[:, :, 7:] = s * np.einsum("ab,mbk->mak", R, Bk[sel])
        r = (goal - Ys) * scale_rows[:, None]
        J *= scale_rows[:, None, None]
        A = J.reshape(-1, 7 + K)
        g = A.T @ r.ravel() - damp * np.r_[np.zeros(7), w]
        dx = np.linalg.solve(A.T @ A + np.diag(damp), g)
        R = rot.rodrigues(dx[0:3]) @ R
        s *= np.exp(dx[3])
        t = t + dx[4:7]
        w = w + dx[7:]
        if dx @ dx <= tol * (1.0 + w @ w):
            break
    affine = AffineTransform.from_matrix(s, R, t)
    V = eval_linear_model(model, w[:S], w[S:])
    P = affine.apply(V[kept])
    lm = affine.apply(V[pairs.model]) - template_landmarks
    return affine, ShapeFit(w[:S], w[S:], _chamfer_value(P, target), float(np.sum(lm * lm)),
                            float(prior * w @ w), it)


def refine_vertices(model_vertices, faces, affine: AffineTransform, template_points, smoothness: float = 1e-4,
                    max_iterations: int = 20):
    """Free per-vertex positions (model space) minimizing chamfer, Laplacian-regularized.

    The Laplacian term penalizes the change of the umbrella Laplacian relative
    to the starting vertices, keeping the surface from collapsing onto a
    subset of template points.
    """
    X0 = np.asarray(model_vertices, dtype=float)
    target = np.asarray(template_points, dtype=float)
    n = len(X0)
    Lin = affine.linear
    Linv = np.linalg.inv(Lin)
    lap = Mesh(X0, faces).umbrella if len(faces) else sp.csr_matrix((n, n))
    # work in template space: Y = affine(X); the Laplacian term is invariant up to s^2
    Y0 = affine.apply(X0)
    Y = Y0.copy()
    tree = cKDTree(target)
    last = None
    LtL = (lap.T @ lap).tocsr()
    for _ in range(max_iterations):
        corr = _chamfer_pairs(Y, target, tree)
        if last is not None and all(np.array_equal(a, b) for a, b in zip(corr, last)):
            break
        last = corr
        to_target, to_model = corr
        cnt = 1.0 + np.bincount(to_model, minlength=n)
        rhs = target[to_target].copy()
        for c in range(3):
            rhs[:, c] += np.bincount(to_model, weights=target[:, c], minlength=n)
        M = sp.diags(cnt) + smoothness * LtL
        rhs = rhs + smoothness * (LtL @ Y0)
        Y = np.stack([spsolve(M.tocsc(), rhs[:, c]) for c in range(3)], axis=1)
    X = (Y - affine.t) @ Linv.T
    return X, _chamfer_value(Y, target)


def refine_and_extract_neutral(model: LinearShapeModel, refined_vertices, w_E) -> np.ndarray:
    """Neutral face: refined vertices minus the fitted expression component."""
    V = np.asarray(refined_vertices, dtype=float)
    if V.shape != model.mean.shape:
        raise ValueError(f"refined vertices must be {model.mean.shape}")
    return V - model.expression_offset(w_E)


@dataclass
class FaceRegistration:
    affine: AffineTransform
    w_S: np.ndarray
    w_E: np.ndarray
    refined: np.ndarray       # model space, all model vertices
    neutral: np.ndarray       # model space
    residuals: dict

    def neutral_in_template(self, model: LinearShapeModel) -> np.ndarray:
        return self.affine.apply(self.neutral[model.kept])


def register_face(model: LinearShapeModel, template_points, pairs: LandmarkPairs, template_landmarks=None,
                  prior: float = DEFAULT_PRIOR, landmark_weight: float = 1.0,
                  smoothness: float = 1e-4) -> FaceRegistration:
    """Similarity from landmarks, then similarity and coefficients jointly, per-vertex refinement, neutral extraction.

    The coefficient solve starts from zero under the landmark similarity;
    fitting coefficients under a frozen similarity first tends to absorb the
    similarity error into the shape and lands in a worse basin.
    """
    if len(pairs) != FACE_LANDMARKS:
        raise ConfigError(f"face registration needs {FACE_LANDMARKS} landmark pairs, got {len(pairs)}")
    target = np.asarray(template_points, dtype=float)
    if len(target) == 0:
        raise ValueError("template region is empty")
    if template_landmarks is None:
        template_landmarks = target[pairs.template]
    residuals = {}
    affine, residuals["affine"] = fit_affine(None, template_landmarks, model.mean[pairs.model])
    affine, fit = fit_similarity_and_coefficients(model, affine, np.zeros(model.n_shape + model.n_expr), target,
                                                  pairs, template_landmarks, prior, landmark_weight)
    residuals["shape_expression"] = fit.chamfer + landmark_weight * fit.landmark
    V = eval_linear_model(model, fit.w_S, fit.w_E)
    kept = model.kept
    faces = model.submesh(kept)
    refined_kept, residuals["refinement"] = refine_vertices(V[kept], faces, affine, target, smoothness)
    refined = V.copy()
    refined[kept] = refined_kept
    neutral = refine_and_extract_neutral(model, refined, fit.w_E)
    return FaceRegistration(affine, fit.w_S, fit.w_E, refined, neutral, residuals)


# -- hands -------------------------------------------------------------------------

def _rig_transforms(rig: HandRig, theta_b, theta_h):
    """World joint motions (R, t) of the rig for body/hand axis-angle rotations."""
    J = rig.n_joints
    aa = np.zeros((J, 3))
    tb = np.asarray(theta_b, dtype=float)
    th = np.asarray(theta_h, dtype=float)
    if tb.size:
        aa[:rig.n_body] = tb.reshape(rig.n_body, 3)
    if th.size:
        aa[rig.n_body:] = th.reshape(2 * rig.n_hand, 3)
    if not (np.all(np.isfinite(aa))):
        raise ValueError("joint angles must be finite")
    local = rot.rodrigues(aa)
    Gr = np.zeros((J, 3, 3))
    Gt = np.zeros((J, 3))
    for j in range(J):
        p = rig.parents[j]
        if p < 0:
            Gr[j], Gt[j] = local[j], rig.joints[j]
        else:
            Gr[j] = Gr[p] @ local[j]
            Gt[j] = Gt[p] + Gr[p] @ (rig.joints[j] - rig.joints[p])
    t = Gt - np.einsum("jab,jb->ja", Gr, rig.joints)
    return Gr, t


def pose_hand_model(model: LinearShapeModel, w_SH=None, theta_b=None, theta_h=None) -> np.ndarray:
    """Shape the body-hand model and pose it with linear blend skinning."""
    if model.rig is None:
        raise ConfigError("model has no skinning rig")
    rig = model.rig
    M = eval_linear_model(model, w_SH, None)
    theta_b = np.zeros((rig.n_body, 3)) if theta_b is None else np.asarray(theta_b, dtype=float)
    theta_h = np.zeros((2, rig.n_hand, 3)) if theta_h is None else np.asarray(theta_h, dtype=float)
    if theta_b.size != 3 * rig.n_body or theta_h.size != 6 * rig.n_hand:
        raise ValueError(f"expected {rig.n_body}x3 body and 2x{rig.n_hand}x3 hand angles")
    R, t = _rig_transforms(rig, theta_b, theta_h)
    per_joint = np.einsum("jab,nb->jna", R, M) + t[:, None, :]
    return np.einsum("nj,jna->na", rig.weights, per_joint)


def extract_hand_canonical(model: LinearShapeModel, w_SH=None) -> list:
    """Zero-pose shaped hand vertices and faces, ``[(indices, V, F) left, right]``."""
    V = pose_hand_model(model, w_SH)
    out = []
    for side in (0, 1):
        idx = model.hand_vertices(side)
        if len(idx) == 0:
            raise ConfigError(f"model has no {'left' if side == 0 else 'right'} hand vertices")
        out.append((idx, V[idx], model.submesh(idx)))
    return out


# -- topology helpers ----------------------------------------------------------------

def boundary_loops(faces) -> list:
    """Boundary loops as vertex sequences following their faces' edge direction."""
    F = np.asarray(faces, dtype=np.int64)
    directed = np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]])
    keys = set(map(tuple, directed.tolist()))
    nxt = {}
    for a, b in directed.tolist():
        if (b, a) not in keys:
            if a in nxt:
                raise DegenerateGeometryError(f"non-manifold boundary at vertex {a}")
            nxt[a] = b
    loops = []
    seen = set()
    for start in sorted(nxt):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        v = nxt[start]
        while v != start:
            if v in seen or v not in nxt:
                raise DegenerateGeometryError("open boundary chain")
            loop.append(v)
            seen.add(v)
            v = nxt[v]
        loops.append(loop)
    return loops


def euler_characteristic(faces, n_vertices=None) -> int:
    F = np.asarray(faces, dtype=np.int64)
    used = np.unique(F)
    V = len(used) if n_vertices is None else n_vertices
    e = np.sort(np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]]), axis=1)
    return int(V - len(np.unique(e, axis=0)) + len(F))


def is_closed_manifold(faces) -> bool:
    """Every edge shared by exactly two faces with opposite orientation."""
    F = np.asarray(faces, dtype=np.int64)
    directed = np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]])
    d_unique, counts = np.unique(directed, axis=0, return_counts=True)
    if np.any(counts > 1):
        return False
    keys = set(map(tuple, d_unique.tolist()))
    return all((b, a) in keys for a, b in keys)


def _tri_area(a, b, c):
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a))


def bridge_loops(V, outer, inner) -> np.ndarray:
    """Greedy minimal-area strip joining two boundary loops.

    ``outer`` is a hole loop of the remaining template and ``inner`` a
    boundary loop of the inserted part, both in their faces' edge direction.
    """
    A = list(reversed(outer))
    B = list(inner)
    # start both loops at their closest pair
    d = np.linalg.norm(V[A][:, None, :] - V[B][None, :, :], axis=2)
    i0, j0 = np.unravel_index(np.argmin(d), d.shape)
    A = A[i0:] + A[:i0]
    B = B[j0:] + B[:j0]
    n, m = len(A), len(B)
    tris = []
    i = j = 0
    while i < n or j < m:
        a, a1 = A[i % n], A[(i + 1) % n]
        b, b1 = B[j % m], B[(j + 1) % m]
        adv_a = i < n and (j >= m or _tri_area(V[a], V[a1], V[b]) <= _tri_area(V[a], V[b1], V[b]))
        if adv_a:
            tris.append([a, a1, b])
            i += 1
        else:
            tris.append([a, b1, b])
            j += 1
    return np.array(tris, dtype=np.int64).reshape(-1, 3)


# -- stitching ---------------------------------------------------------------------

@dataclass
class StitchPart:
    """A model mesh (template canonical space) replacing a flagged template region."""

    name: str
    vertices: np.ndarray
    faces: np.ndarray
    remove: np.ndarray              # boolean over template vertices
    albedo: np.ndarray | None = None
    material: str | None = None


@dataclass
class StitchResult:
    template: Template
    part_vertices: dict             # part name -> vertex indices in the new template
    kept: np.ndarray                # original indices of surviving template vertices
    source: np.ndarray              # per new vertex: original template vertex it copies attributes from
    graph: EmbeddedGraph | None = None
    bridged: int = 0


def stitch_models(template: Template, parts, graph: EmbeddedGraph | None = None, bridge: bool = True,
                  max_distance: float = 0.05) -> StitchResult:
    """Replace template regions by model meshes in the canonical pose, then repose.

    Every inserted vertex copies skinning weights, rigidity, material and
    albedo (unless the part supplies its own) from the closest vertex of the
    original canonical template, and graph influence when ``graph`` is given.
    """
    canon = template.canonical_mesh()
    V0 = canon.vertices
    N = len(V0)
    remove = np.zeros(N, dtype=bool)
    for part in parts:
        r = np.asarray(part.remove, dtype=bool)
        if r.shape != (N,):
            raise ValueError(f"part {part.name!r}: removal mask must cover every template vertex")
        if not r.any():
            raise ConfigError(f"part {part.name!r}: empty removal region")
        remove |= r
    kept = np.flatnonzero(~remove)
    remap = np.full(N, -1, dtype=np.int64)
    remap[kept] = np.arange(len(kept))
    faces = remap[canon.faces]
    faces = faces[np.all(faces >= 0, axis=1)]

    tree = cKDTree(V0)
    verts = [V0[kept]]
    source = [kept]
    part_vertices = {}
    part_faces = []
    offset = len(kept)
    albedo = [canon.albedo[kept] if canon.albedo is not None else np.full((len(kept), 3), 0.5)]
    own_albedo = []
    for part in parts:
        P = np.asarray(part.vertices, dtype=float).reshape(-1, 3)
        d, nearest = tree.query(P)
        if np.any(d > max_distance):
            raise DegenerateGeometryError(
                f"part {part.name!r}: vertex {int(np.argmax(d))} lies {d.max():.4g} from the template "
                f"(limit {max_distance}); misregistered?")
        verts.append(P)
        source.append(nearest)
        part_vertices[part.name] = offset + np.arange(len(P))
        part_faces.append(np.asarray(part.faces, dtype=np.int64) + offset)
        if part.albedo is not None:
            albedo.append(np.asarray(part.albedo, dtype=float))
        else:
            albedo.append(canon.albedo[nearest] if canon.albedo is not None else np.full((len(P), 3), 0.5))
        own_albedo.append(part.albedo is not None)
        offset += len(P)
    V = np.concatenate(verts)
    src = np.concatenate(source)
    F = np.concatenate([faces] + part_faces) if part_faces else faces

    bridged = 0
    if bridge:
        # hole loops: boundaries of the kept mesh that border a removed face
        touched = np.zeros(N, dtype=bool)
        touched[canon.faces[np.any(remove[canon.faces], axis=1)].ravel()] = True
        holes = [h for h in boundary_loops(faces) if np.all(touched[kept[h]])]
        strips = []
        for pf in part_faces:
            for loop in boundary_loops(pf):
                if not holes:
                    break
                c = V[loop].mean(axis=0)
                k = int(np.argmin([np.linalg.norm(V[h].mean(axis=0) - c) for h in holes]))
                strips.append(bridge_loops(V, holes.pop(k), loop))
                bridged += 1
        if strips:
            F = np.concatenate([F] + strips)

    skin = template.skinning.weights[src]
    materials = None
    if template.materials is not None:
        materials = tuple(template.materials[i] for i in src)
        materials = list(materials)
        for part in parts:
            if part.material is not None:
                for k in part_vertices[part.name]:
                    materials[k] = part.material
        materials = tuple(materials)
        rigidity = RigidityWeights.from_labels(materials)
    else:
        rigidity = RigidityWeights(template.rigidity.r[src])
    skinning = SkinningWeights(sp.csr_matrix(skin))
    canonical_mesh = Mesh(V, F, np.concatenate(albedo))
    posed = dqs_pose(canonical_mesh, template.skeleton, skinning, template.rigging_pose)
    new_template = replace(template, mesh=canonical_mesh.with_vertices(posed), skinning=skinning,
                           rigidity=rigidity, materials=materials,
                           metadata={**template.metadata, "stitched": sorted(part_vertices)})
    new_graph = None
    if graph is not None:
        new_graph = EmbeddedGraph(graph.node_positions, graph.node_edges, graph.influence[src],
                                  graph.node_rigidity, None, graph.A, graph.T)
    return StitchResult(new_template, part_vertices, kept, src, new_graph, bridged)


# -- per-frame face and hand state -----------------------------------------------------

@dataclass
class FaceAttachment:
    model: LinearShapeModel
    affine: AffineTransform
    vertices: np.ndarray            # new-template indices of the stitched face (model kept order)


@dataclass
class HandAttachment:
    model: LinearShapeModel
    affine: AffineTransform
    w_SH: np.ndarray | None
    vertices: tuple                 # (left indices, right indices) in the new template
    model_vertices: tuple           # matching model vertex indices per side


def apply_expression_and_hands(template: Template, face: FaceAttachment | None = None, w_E=None,
                               hands: HandAttachment | None = None, theta_h=None) -> np.ndarray:
    """Canonical vertices with a frame's expression and hand pose applied.

    The expression offset is mapped into template space by the face's
    similarity. Hands are posed by linear blend skinning in model space with
    the body at rest, then mapped through the hand similarity.
    """
    X = template.canonical_mesh().vertices.copy()
    if face is not None and w_E is not None:
        offset = face.model.expression_offset(w_E)[face.model.kept]
        X[face.vertices] += face.affine.apply_vectors(offset)
    if hands is not None and theta_h is not None:
        posed = pose_hand_model(hands.model, hands.w_SH, None, theta_h)
        rest = pose_hand_model(hands.model, hands.w_SH)
        for side in (0, 1):
            mv = hands.model_vertices[side]
            X[hands.vertices[side]] += hands.affine.apply_vectors(posed[mv] - rest[mv])
    return X
