"""Mesh, skeleton and skinning primitives.

The skeleton uses world-aligned rest frames: every joint's rest orientation
is the identity and its rotation axes are expressed in that frame. A joint
transform in the rest pose is therefore a pure translation to the joint's
rest position, and the canonical pose is the all-zero :class:`Pose`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import rotations as rot
from .errors import DegenerateGeometryError, SkinningDegeneracyError

MAX_INFLUENCES = 4

#: Per-material rigidity used by the isometry regularizer and the rigid mask.
MATERIAL_RIGIDITY = {
    "face": 200.0,
    "skin": 50.0,
    "dress": 1.0,
    "upper": 2.0,
    "pants": 2.5,
}


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle mesh with optional per-vertex linear RGB albedo."""

    vertices: np.ndarray
    faces: np.ndarray
    albedo: np.ndarray | None = None

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        f = np.ascontiguousarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must be (N, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError(f"faces must be (F, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.albedo is not None:
            a = np.ascontiguousarray(self.albedo, dtype=float)
            if a.shape != v.shape:
                raise ValueError(f"albedo must be {v.shape}, got {a.shape}")
            object.__setattr__(self, "albedo", a)
        if len(f):
            area = face_areas(v, f)
            if np.any(area <= 1e-14 * max(1.0, np.ptp(v) ** 2)):
                raise DegenerateGeometryError("mesh has zero-area faces")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @cached_property
    def edges(self) -> np.ndarray:
        """Undirected edges as sorted, deduplicated (E, 2) pairs with i < j."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def directed_edges(self) -> np.ndarray:
        """Both orientations of every edge, sorted by source vertex."""
        e = self.edges
        d = np.concatenate([e, e[:, ::-1]])
        order = np.lexsort((d[:, 1], d[:, 0]))
        return d[order]

    @cached_property
    def degree(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n_vertices)

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        e = self.directed_edges
        n = self.n_vertices
        return sp.csr_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))

    @cached_property
    def umbrella(self) -> sp.csr_matrix:
        """Uniform graph Laplacian ``deg(i) x_i - sum_j x_j``."""
        return (sp.diags(self.degree.astype(float)) - self.adjacency).tocsr()

    def with_vertices(self, vertices) -> "Mesh":
        return Mesh(vertices, self.faces, self.albedo)


def scatter_rows(n: int, idx, values) -> np.ndarray:
    """Sum rows of ``values`` (m, d) into an (n, d) array at row indices ``idx``."""
    idx = np.asarray(idx, dtype=np.int64).ravel()
    values = np.asarray(values, dtype=float).reshape(len(idx), -1)
    return np.stack([np.bincount(idx, weights=values[:, c], minlength=n) for c in range(values.shape[1])],
                    axis=1)


def face_areas(vertices, faces):
    v = np.asarray(vertices)
    e1 = v[faces[:, 1]] - v[faces[:, 0]]
    e2 = v[faces[:, 2]] - v[faces[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)


@dataclass(frozen=True, eq=False)
class RigidityWeights:
    """Per-vertex material stiffness; edges take the smaller endpoint value."""

    r: np.ndarray

    def __post_init__(self):
        r = np.ascontiguousarray(self.r, dtype=float)
        if r.ndim != 1:
            raise ValueError("rigidity must be a vector")
        if np.any(r < 0) or not np.all(np.isfinite(r)):
            raise ValueError("rigidity weights must be finite and nonnegative")
        object.__setattr__(self, "r", r)

    @classmethod
    def from_labels(cls, labels, table=None) -> "RigidityWeights":
        table = MATERIAL_RIGIDITY if table is None else table
        try:
            return cls(np.array([table[name] for name in labels], dtype=float))
        except KeyError as exc:
            raise ValueError(f"unknown material label {exc.args[0]!r}") from None

    def edge_rigidity(self, edges) -> np.ndarray:
        edges = np.asarray(edges)
        return np.minimum(self.r[edges[:, 0]], self.r[edges[:, 1]])


# -- skeleton ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Skeleton:
    """Kinematic tree in topological order.

    ``offsets[0]`` is the root's rest position; every other offset is the rest
    translation from the parent joint. ``axes[j]`` holds the joint's 0-3 local
    rotation axes, applied in order. Landmarks are attached to a joint with a
    rest-frame offset.
    """

    parents: np.ndarray
    offsets: np.ndarray
    axes: tuple
    limits: np.ndarray | None = None
    landmark_joints: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    landmark_offsets: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    names: tuple | None = None

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64)
        offsets = np.asarray(self.offsets, dtype=float).reshape(-1, 3)
        if len(parents) != len(offsets) or len(self.axes) != len(parents):
            raise ValueError("parents, offsets and axes must have one entry per joint")
        if np.sum(parents < 0) != 1 or parents[0] >= 0:
            raise ValueError("skeleton needs exactly one root, at index 0")
        if np.any(parents[1:] >= np.arange(1, len(parents))):
            raise ValueError("joints must be in topological order (parent < child)")
        axes = []
        for a in self.axes:
            a = np.asarray(a, dtype=float).reshape(-1, 3)
            if len(a) > 3:
                raise ValueError("at most three rotation axes per joint")
            if len(a):
                a = a / np.linalg.norm(a, axis=1, keepdims=True)
            axes.append(a)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "axes", tuple(axes))
        lj = np.asarray(self.landmark_joints, dtype=np.int64)
        lo = np.asarray(self.landmark_offsets, dtype=float).reshape(-1, 3)
        if len(lj) != len(lo):
            raise ValueError("landmark joints/offsets length mismatch")
        if len(lj) and (lj.min() < 0 or lj.max() >= len(parents)):
            raise ValueError("landmark joint index out of range")
        object.__setattr__(self, "landmark_joints", lj)
        object.__setattr__(self, "landmark_offsets", lo)
        if self.limits is not None:
            lim = np.asarray(self.limits, dtype=float).reshape(-1, 2)
            if len(lim) != self.dof_count:
                raise ValueError("limits must have one [min, max] row per DOF")
            object.__setattr__(self, "limits", lim)

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @cached_property
    def dof_count(self) -> int:
        return int(sum(len(a) for a in self.axes))

    @cached_property
    def dof_slices(self) -> tuple:
        out, start = [], 0
        for a in self.axes:
            out.append(slice(start, start + len(a)))
            start += len(a)
        return tuple(out)

    @cached_property
    def rest_positions(self) -> np.ndarray:
        pos = np.zeros_like(self.offsets)
        for j, p in enumerate(self.parents):
            pos[j] = self.offsets[j] if p < 0 else pos[p] + self.offsets[j]
        return pos

    @cached_property
    def ancestors(self) -> tuple:
        """For each joint, the chain root..joint inclusive."""
        chains = []
        for j, p in enumerate(self.parents):
            chains.append((j,) if p < 0 else chains[p] + (j,))
        return tuple(chains)

    @property
    def rest_landmarks(self) -> np.ndarray:
        return self.rest_positions[self.landmark_joints] + self.landmark_offsets


@dataclass(frozen=True, eq=False)
class Pose:
    """Joint angles, root axis-angle rotation and global translation."""

    theta: np.ndarray
    alpha: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("theta", "alpha", "t"):
            value = np.array(getattr(self, name), dtype=float).ravel()
            if not np.all(np.isfinite(value)):
                raise ValueError(f"pose {name} must be finite")
            object.__setattr__(self, name, value)
        if self.alpha.shape != (3,) or self.t.shape != (3,):
            raise ValueError("alpha and t must have three values")

    @classmethod
    def zero(cls, dof_count: int) -> "Pose":
        return cls(np.zeros(dof_count))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.theta, self.alpha, self.t])

    @classmethod
    def from_vector(cls, vec, dof_count: int) -> "Pose":
        vec = np.asarray(vec, dtype=float)
        return cls(vec[:dof_count], vec[dof_count:dof_count + 3], vec[dof_count + 3:dof_count + 6])


@dataclass(frozen=True, eq=False)
class SkinningWeights:
    """Sparse N x J nonnegative weights, rows summing to one."""

    weights: sp.csr_matrix

    def __post_init__(self):
        W = sp.csr_matrix(self.weights, dtype=float)
        W.eliminate_zeros()
        W.sort_indices()
        if W.nnz and W.data.min() < 0:
            raise ValueError("skinning weights must be nonnegative")
        rows = np.asarray(W.sum(axis=1)).ravel()
        if np.any(np.abs(rows - 1.0) > 1e-6):
            raise ValueError("skinning weight rows must sum to 1")
        if np.diff(W.indptr).max(initial=0) > MAX_INFLUENCES:
            raise ValueError(f"at most {MAX_INFLUENCES} influences per vertex")
        object.__setattr__(self, "weights", W)

    @classmethod
    def from_dense(cls, dense, max_influences: int = MAX_INFLUENCES) -> "SkinningWeights":
        """Keep the largest ``max_influences`` entries per row and renormalize."""
        dense = np.array(dense, dtype=float)
        if dense.shape[1] > max_influences:
            drop = np.argsort(-dense, axis=1, kind="stable")[:, max_influences:]
            np.put_along_axis(dense, drop, 0.0, axis=1)
        dense /= dense.sum(axis=1, keepdims=True)
        return cls(sp.csr_matrix(dense))

    @property
    def shape(self):
        return self.weights.shape

    def to_triplets(self):
        coo = self.weights.tocoo()
        return coo.row, coo.col, coo.data


# -- dual quaternions ----------------------------------------------------------

@dataclass(frozen=True)
class DualQuaternion:
    """Unit dual quaternion ``real + eps * dual`` encoding a rigid motion."""

    real: np.ndarray
    dual: np.ndarray

    @classmethod
    def from_rigid(cls, R, t) -> "DualQuaternion":
        qr = rot.quat_from_matrix(R)
        qd = 0.5 * rot.quat_mul(np.concatenate([[0.0], np.asarray(t, dtype=float)]), qr)
        return cls(qr, qd)

    def __mul__(self, other: "DualQuaternion") -> "DualQuaternion":
        real = rot.quat_mul(self.real, other.real)
        dual = rot.quat_mul(self.real, other.dual) + rot.quat_mul(self.dual, other.real)
        return DualQuaternion(real, dual)

    def is_unit(self, tol: float = 1e-9) -> bool:
        return (abs(np.linalg.norm(self.real) - 1.0) <= tol
                and abs(float(np.dot(self.real, self.dual))) <= tol)

    def to_rigid(self):
        return _dq_to_rigid(self.real[None], self.dual[None])

    def transform(self, points) -> np.ndarray:
        R, t = self.to_rigid()
        return np.asarray(points, dtype=float) @ R[0].T + t[0]


def _dq_to_rigid(real, dual):
    R = rot.quat_to_matrix(real)
    t = 2.0 * rot.quat_mul(dual, rot.quat_conj(real))[..., 1:]
    return R, t


# -- kinematics ----------------------------------------------------------------

def _check_pose(skeleton: Skeleton, pose: Pose):
    if pose.theta.shape != (skeleton.dof_count,):
        raise ValueError(f"pose has {pose.theta.size} joint angles, skeleton expects {skeleton.dof_count}")


def _local_rotations(skeleton: Skeleton, pose: Pose):
    """Per joint: list of cumulative partial rotations and the full local rotation."""
    partials, locals_ = [], []
    for j, axes in enumerate(skeleton.axes):
        angles = pose.theta[skeleton.dof_slices[j]]
        R = np.eye(3)
        steps = []
        for axis, angle in zip(axes, angles):
            steps.append(R)
            R = R @ rot.axis_rotation(axis, angle)
        partials.append(steps)
        locals_.append(R)
    return partials, locals_


def forward_kinematics(skeleton: Skeleton, pose: Pose) -> np.ndarray:
    """World transforms (J, 4, 4) of every joint frame."""
    _check_pose(skeleton, pose)
    _, local = _local_rotations(skeleton, pose)
    G = np.zeros((skeleton.n_joints, 4, 4))
    G[:, 3, 3] = 1.0
    for j, p in enumerate(skeleton.parents):
        if p < 0:
            G[j, :3, :3] = rot.rodrigues(pose.alpha) @ local[j]
            G[j, :3, 3] = skeleton.offsets[j] + pose.t
        else:
            G[j, :3, :3] = G[p, :3, :3] @ local[j]
            G[j, :3, 3] = G[p, :3, 3] + G[p, :3, :3] @ skeleton.offsets[j]
    return G


def skinning_transforms(skeleton: Skeleton, pose: Pose):
    """Rest-relative joint motions ``(R, t)`` mapping canonical to posed space."""
    G = forward_kinematics(skeleton, pose)
    R = G[:, :3, :3]
    t = G[:, :3, 3] - np.einsum("jab,jb->ja", R, skeleton.rest_positions)
    return R, t


def blended_transforms(weights: SkinningWeights, R, t):
    """Per-vertex rigid transforms from dual-quaternion blending of joint motions."""
    W = weights.weights
    if W.shape[1] != len(R):
        raise ValueError(f"skinning weights have {W.shape[1]} columns for {len(R)} joints")
    qr = rot.quat_from_matrix(R)
    qd = 0.5 * rot.quat_mul(np.concatenate([np.zeros((len(t), 1)), t], axis=1), qr)

    rows = np.repeat(np.arange(W.shape[0]), np.diff(W.indptr))
    cols = W.indices
    vals = W.data
    # hemisphere of the dominant joint per vertex
    pivot = np.asarray(W.argmax(axis=1)).ravel()
    sign = np.where(np.sum(qr[cols] * qr[pivot[rows]], axis=1) < 0.0, -1.0, 1.0)
    Ws = sp.csr_matrix((vals * sign, (rows, cols)), shape=W.shape)
    br = Ws @ qr
    bd = Ws @ qd
    norm = np.linalg.norm(br, axis=1)
    if norm.size and norm.min() < 1e-12:
        bad = int(np.argmin(norm))
        raise SkinningDegeneracyError(f"blended rotation vanishes at vertex {bad}")
    return _dq_to_rigid(br / norm[:, None], bd / norm[:, None])


def dqs_pose(mesh, skeleton: Skeleton, weights: SkinningWeights, pose: Pose) -> np.ndarray:
    """Pose canonical vertices with dual quaternion skinning.

    ``mesh`` may be a :class:`Mesh` or an (N, 3) array.
    """
    V = mesh.vertices if isinstance(mesh, Mesh) else np.asarray(mesh, dtype=float)
    _check_pose(skeleton, pose)
    if weights.shape[0] != len(V):
        raise ValueError("skinning weights do not match vertex count")
    Rv, tv = blended_transforms(weights, *skinning_transforms(skeleton, pose))
    return np.einsum("nab,nb->na", Rv, V) + tv


def unpose_to_canonical(vertices, skeleton: Skeleton, weights: SkinningWeights, pose: Pose) -> np.ndarray:
    """Invert :func:`dqs_pose` vertex by vertex."""
    V = vertices.vertices if isinstance(vertices, Mesh) else np.asarray(vertices, dtype=float)
    _check_pose(skeleton, pose)
    if weights.shape[0] != len(V):
        raise ValueError("skinning weights do not match vertex count")
    Rv, tv = blended_transforms(weights, *skinning_transforms(skeleton, pose))
    return np.einsum("nba,nb->na", Rv, V - tv)


def lbs_pose(vertices, weights, R, t) -> np.ndarray:
    """Linear blend skinning with dense or sparse weights and joint motions (R, t)."""
    V = np.asarray(vertices, dtype=float)
    per_joint = np.einsum("jab,nb->jna", R, V) + t[:, None, :]
    W = weights.toarray() if sp.issparse(weights) else np.asarray(weights)
    return np.einsum("nj,jna->na", W, per_joint)


# -- landmarks -----------------------------------------------------------------

def landmark_positions(skeleton: Skeleton, pose: Pose, canonical=None) -> np.ndarray:
    """Posed landmarks; ``canonical`` overrides the rest landmark positions."""
    R, t = skinning_transforms(skeleton, pose)
    p = skeleton.rest_landmarks if canonical is None else np.asarray(canonical, dtype=float)
    j = skeleton.landmark_joints
    return np.einsum("nab,nb->na", R[j], p) + t[j]


def landmark_pose_jacobian(skeleton: Skeleton, pose: Pose, canonical=None):
    """Posed landmarks and their Jacobian (L, 3, dof + 6) w.r.t. the pose vector.

    Column order matches :meth:`Pose.to_vector`: joint angles, root
    rotation, translation.
    """
    G = forward_kinematics(skeleton, pose)
    partials, _ = _local_rotations(skeleton, pose)
    P = landmark_positions(skeleton, pose, canonical)
    ndof = skeleton.dof_count
    J = np.zeros((len(P), 3, ndof + 6))
    Ralpha = rot.rodrigues(pose.alpha)
    for n, j in enumerate(skeleton.landmark_joints):
        p = P[n]
        for k in skeleton.ancestors[j]:
            parent = skeleton.parents[k]
            Rp = Ralpha if parent < 0 else G[parent, :3, :3]
            pivot = G[k, :3, 3]
            for m, col in enumerate(range(skeleton.dof_slices[k].start, skeleton.dof_slices[k].stop)):
                axis = Rp @ partials[k][m] @ skeleton.axes[k][m]
                J[n, :, col] = np.cross(axis, p - pivot)
        J[n, :, ndof:ndof + 3] = -rot.skew(p - G[0, :3, 3]) @ rot.left_jacobian(pose.alpha)
        J[n, :, ndof + 3:] = np.eye(3)
    return P, J
