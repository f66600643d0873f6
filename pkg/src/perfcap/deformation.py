"""Embedded deformation graph, rigidity-masked displacements and geometric regularizers.

All deformation happens in the canonical pose: the graph warps the template,
masked per-vertex displacements are added on top, and skinning poses the
result last.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial import cKDTree

from . import rotations as rot
from .errors import ConfigError, DegenerateGeometryError
from .geometry import Mesh, Pose, RigidityWeights, dqs_pose

DEFAULT_EPSILON_RIGID = 10.0
N_INFLUENCES = 4


@dataclass(frozen=True, eq=False)
class EmbeddedGraph:
    """Coarse deformation graph with per-node rotation ``A`` and translation ``T``.

    ``node_edges`` lists every connection in both directions.
    """

    node_positions: np.ndarray
    node_edges: np.ndarray
    influence: sp.csr_matrix
    node_rigidity: np.ndarray
    node_vertices: np.ndarray | None = None
    A: np.ndarray | None = None
    T: np.ndarray | None = None

    def __post_init__(self):
        g = np.ascontiguousarray(self.node_positions, dtype=float)
        K = len(g)
        W = sp.csr_matrix(self.influence, dtype=float)
        W.sort_indices()
        if W.shape[1] != K:
            raise ValueError("influence columns must match node count")
        object.__setattr__(self, "node_positions", g)
        object.__setattr__(self, "influence", W)
        object.__setattr__(self, "node_edges", np.asarray(self.node_edges, dtype=np.int64).reshape(-1, 2))
        object.__setattr__(self, "node_rigidity", np.asarray(self.node_rigidity, dtype=float))
        for name in ("A", "T"):
            value = getattr(self, name)
            value = np.zeros((K, 3)) if value is None else np.array(value, dtype=float).reshape(K, 3)
            object.__setattr__(self, name, value)

    @property
    def n_nodes(self) -> int:
        return len(self.node_positions)

    def with_params(self, A=None, T=None) -> "EmbeddedGraph":
        return replace(self, A=self.A if A is None else A, T=self.T if T is None else T)

    def is_connected(self) -> bool:
        K = self.n_nodes
        e = self.node_edges
        adj = sp.csr_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(K, K))
        return connected_components(adj, directed=False)[0] == 1

    def point_influence(self, points) -> sp.csr_matrix:
        """Influence rows for off-mesh points (e.g. landmarks), by Euclidean distance."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        k = min(N_INFLUENCES + 1, self.n_nodes)
        d, idx = cKDTree(self.node_positions).query(points, k=k)
        d = d.reshape(len(points), k)
        idx = idx.reshape(len(points), k)
        return _falloff_weights(d, idx, self.n_nodes)


def _falloff_weights(d, idx, n_nodes):
    """Rows of ``(1 - d/d_max)^2`` over the 4 nearest nodes, ``d_max`` the 5th."""
    n = len(d)
    k = min(N_INFLUENCES, d.shape[1])
    if d.shape[1] > N_INFLUENCES:
        dmax = d[:, N_INFLUENCES]
    else:
        dmax = d[:, -1] * (1.0 + 1e-3) + 1e-12
    dk, ik = d[:, :k], idx[:, :k]
    w = np.clip(1.0 - dk / dmax[:, None], 0.0, None) ** 2
    on_node = dk[:, 0] <= 1e-12
    w[on_node] = 0.0
    w[on_node, 0] = 1.0
    empty = w.sum(axis=1) <= 0
    w[empty] = 1.0
    w /= w.sum(axis=1, keepdims=True)
    rows = np.repeat(np.arange(n), k)
    W = sp.csr_matrix((w.ravel(), (rows, ik.ravel())), shape=(n, n_nodes))
    W.eliminate_zeros()
    return W


def _edge_length_graph(mesh: Mesh) -> sp.csr_matrix:
    e = mesh.edges
    length = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    n = mesh.n_vertices
    return sp.csr_matrix((np.concatenate([length, length]),
                          (np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]]))),
                         shape=(n, n))


def build_graph(mesh: Mesh, rigidity: RigidityWeights, target_nodes: int) -> EmbeddedGraph:
    """Sample a deformation graph by geodesic farthest-point sampling.

    Geodesics are shortest paths along mesh edges. Every vertex is bound to
    its 4 geodesically nearest nodes; two nodes are connected when they
    share a vertex or when their dominant regions touch across a mesh edge.
    """
    N = mesh.n_vertices
    if not 4 <= target_nodes <= N:
        raise ConfigError(f"target_nodes must lie in [4, {N}], got {target_nodes}")
    graph = _edge_length_graph(mesh)
    if connected_components(graph, directed=False)[0] != 1:
        raise DegenerateGeometryError("mesh is not connected")

    nodes = [0]
    dist = np.empty((target_nodes, N))
    dist[0] = dijkstra(graph, directed=False, indices=0)
    nearest = dist[0].copy()
    for k in range(1, target_nodes):
        nxt = int(np.argmax(nearest))
        nodes.append(nxt)
        dist[k] = dijkstra(graph, directed=False, indices=nxt)
        np.minimum(nearest, dist[k], out=nearest)
    nodes = np.array(nodes)

    kk = min(N_INFLUENCES + 1, target_nodes)
    idx = np.argsort(dist.T, axis=1, kind="stable")[:, :kk]
    d = np.take_along_axis(dist.T, idx, axis=1)
    W = _falloff_weights(d, idx, target_nodes)

    overlap = (W.T @ W).tocoo()
    pairs = [np.stack([overlap.row, overlap.col], axis=1)]
    dominant = np.asarray(W.argmax(axis=1)).ravel()
    e = mesh.edges
    pairs.append(np.stack([dominant[e[:, 0]], dominant[e[:, 1]]], axis=1))
    pairs = np.concatenate(pairs)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    pairs = np.unique(np.concatenate([pairs, pairs[:, ::-1]]), axis=0)

    return EmbeddedGraph(
        node_positions=mesh.vertices[nodes],
        node_edges=pairs,
        influence=W,
        node_rigidity=rigidity.r[nodes],
        node_vertices=nodes,
    )


def _vertices(mesh_or_array):
    if isinstance(mesh_or_array, Mesh):
        return mesh_or_array.vertices
    return np.asarray(mesh_or_array, dtype=float)


def apply_embedded_deformation(mesh, graph: EmbeddedGraph, A=None, T=None, influence=None) -> np.ndarray:
    """``v_i' = sum_k w_ik [R(A_k)(v_i - g_k) + g_k + T_k]``.

    ``influence`` overrides the graph's vertex weights (for off-mesh points).
    """
    V = _vertices(mesh)
    A = graph.A if A is None else np.asarray(A, dtype=float)
    T = graph.T if T is None else np.asarray(T, dtype=float)
    W = graph.influence if influence is None else influence
    if W.shape != (len(V), graph.n_nodes):
        raise ValueError(f"influence {W.shape} does not match {len(V)} points, {graph.n_nodes} nodes")
    if A.shape != (graph.n_nodes, 3) or T.shape != (graph.n_nodes, 3):
        raise ValueError("A and T must be (K, 3)")
    rows = np.repeat(np.arange(W.shape[0]), np.diff(W.indptr))
    cols = W.indices
    R = rot.rodrigues(A)
    g = graph.node_positions
    local = np.einsum("nab,nb->na", R[cols], V[rows] - g[cols]) + g[cols] + T[cols]
    out = np.zeros_like(V)
    np.add.at(out, rows, W.data[:, None] * local)
    return out


def embedded_deformation_vjp(mesh, graph: EmbeddedGraph, A, grad_out, influence=None):
    """Pull a gradient on deformed points back to ``(dA, dT)``."""
    V = _vertices(mesh)
    W = graph.influence if influence is None else influence
    rows = np.repeat(np.arange(W.shape[0]), np.diff(W.indptr))
    cols = W.indices
    R = rot.rodrigues(A)
    K = graph.n_nodes
    wg = W.data[:, None] * grad_out[rows]
    gT = np.zeros((K, 3))
    np.add.at(gT, cols, wg)
    # d(R p)/da = -R [p]x J_r(a)  =>  vjp = J_r^T (p x R^T g)
    p = V[rows] - graph.node_positions[cols]
    inner = np.cross(p, np.einsum("nba,nb->na", R[cols], wg))
    acc = np.zeros((K, 3))
    np.add.at(acc, cols, inner)
    gA = np.einsum("kba,kb->ka", rot.right_jacobian(A), acc)
    return gA, gT


# -- displacements -------------------------------------------------------------

def rigid_mask(rigidity, epsilon_rigid: float = DEFAULT_EPSILON_RIGID) -> np.ndarray:
    """(N, 3) mask; row i is ones where ``r_i <= epsilon_rigid`` (deformable)."""
    r = rigidity.r if isinstance(rigidity, RigidityWeights) else np.asarray(rigidity, dtype=float)
    return np.repeat((r <= epsilon_rigid)[:, None], 3, axis=1).astype(float)


@dataclass(frozen=True, eq=False)
class DisplacementField:
    D: np.ndarray
    M: np.ndarray
    epsilon_rigid: float = DEFAULT_EPSILON_RIGID

    @classmethod
    def zeros(cls, rigidity, epsilon_rigid: float = DEFAULT_EPSILON_RIGID) -> "DisplacementField":
        M = rigid_mask(rigidity, epsilon_rigid)
        return cls(np.zeros_like(M), M, epsilon_rigid)

    @classmethod
    def from_rigidity(cls, D, rigidity, epsilon_rigid: float = DEFAULT_EPSILON_RIGID):
        return cls(np.asarray(D, dtype=float), rigid_mask(rigidity, epsilon_rigid), epsilon_rigid)

    def masked(self) -> np.ndarray:
        return self.D * self.M


@dataclass(frozen=True, eq=False)
class CharacterParams:
    pose: Pose
    graph_A: np.ndarray
    graph_T: np.ndarray
    displacements: np.ndarray

    def __post_init__(self):
        for name in ("graph_A", "graph_T", "displacements"):
            value = np.array(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(value)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, value)

    @classmethod
    def zeros(cls, dof_count: int, n_nodes: int, n_vertices: int) -> "CharacterParams":
        return cls(Pose.zero(dof_count), np.zeros((n_nodes, 3)), np.zeros((n_nodes, 3)),
                   np.zeros((n_vertices, 3)))


def deform_canonical(template, graph: EmbeddedGraph, displacement: DisplacementField | None = None) -> np.ndarray:
    """Graph warp followed by masked displacements, still in canonical pose."""
    V0 = template.canonical_mesh().vertices
    X = apply_embedded_deformation(V0, graph)
    if displacement is not None:
        X = X + displacement.masked()
    return X


def apply_character(template, graph: EmbeddedGraph, displacement: DisplacementField | None, pose: Pose,
                    canonical=None) -> np.ndarray:
    """Posed, deformed template vertices.

    ``canonical`` replaces the undeformed canonical vertices (used when face
    expression and hand pose have already been applied).
    """
    if canonical is None:
        X = deform_canonical(template, graph, displacement)
    else:
        X = apply_embedded_deformation(canonical, graph)
        if displacement is not None:
            X = X + displacement.masked()
    return dqs_pose(X, template.skeleton, template.skinning, pose)


# -- regularizers --------------------------------------------------------------

def arap_edge_weights(graph: EmbeddedGraph) -> np.ndarray:
    e = graph.node_edges
    r = graph.node_rigidity
    return np.minimum(r[e[:, 0]], r[e[:, 1]]) / max(len(e), 1)


def arap_energy(graph: EmbeddedGraph, A=None, T=None):
    """As-rigid-as-possible energy on the graph and its gradient ``(E, dA, dT)``.

    ``E = sum_(k,l) u_kl |R(A_k)(g_l - g_k) + g_k + T_k - (g_l + T_l)|^2``
    """
    A = graph.A if A is None else np.asarray(A, dtype=float)
    T = graph.T if T is None else np.asarray(T, dtype=float)
    g = graph.node_positions
    e = graph.node_edges
    k, l = e[:, 0], e[:, 1]
    u = arap_edge_weights(graph)
    R = rot.rodrigues(A)
    d = g[l] - g[k]
    res = np.einsum("nab,nb->na", R[k], d) + g[k] + T[k] - g[l] - T[l]
    E = float(np.sum(u * np.sum(res * res, axis=1)))
    gres = 2.0 * u[:, None] * res
    gT = np.zeros_like(T)
    np.add.at(gT, k, gres)
    np.add.at(gT, l, -gres)
    acc = np.zeros_like(A)
    np.add.at(acc, k, np.cross(d, np.einsum("nba,nb->na", R[k], gres)))
    gA = np.einsum("kba,kb->ka", rot.right_jacobian(A), acc)
    return E, gA, gT


def isometry_energy(V, mesh: Mesh, rigidity: RigidityWeights):
    """Rigidity-weighted edge-length preservation against the rest mesh ``(E, dV)``.

    Each vertex sums over its incident edges, normalized by its degree.
    """
    V = np.asarray(V, dtype=float)
    if V.shape != mesh.vertices.shape:
        raise ValueError(f"V must be {mesh.vertices.shape}")
    e = mesh.directed_edges
    i, j = e[:, 0], e[:, 1]
    rest = np.linalg.norm(mesh.vertices[i] - mesh.vertices[j], axis=1)
    if np.any(rest <= 0):
        raise DegenerateGeometryError("zero-length rest edge")
    w = rigidity.edge_rigidity(e) / mesh.degree[i]
    diff = V[i] - V[j]
    length = np.linalg.norm(diff, axis=1)
    res = length - rest
    E = float(np.sum(w * res * res))
    safe = np.where(length > 0, length, 1.0)
    gd = (2.0 * w * res / safe)[:, None] * diff
    grad = np.zeros_like(V)
    np.add.at(grad, i, gd)
    np.add.at(grad, j, -gd)
    return E, grad


def default_laplacian_weights(rigidity: RigidityWeights) -> np.ndarray:
    return rigidity.r / len(rigidity.r)


def laplacian_energy(V, mesh: Mesh, weights=None):
    """Weighted umbrella-Laplacian energy of the offset field ``V - V_rest``."""
    V = np.asarray(V, dtype=float)
    if V.shape != mesh.vertices.shape:
        raise ValueError(f"V must be {mesh.vertices.shape}")
    w = np.ones(len(V)) if weights is None else np.asarray(weights, dtype=float)
    L = mesh.umbrella
    lo = L @ (V - mesh.vertices)
    E = float(np.sum(w * np.sum(lo * lo, axis=1)))
    grad = 2.0 * (L.T @ (w[:, None] * lo))
    return E, grad
