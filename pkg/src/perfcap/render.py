"""Pinhole cameras, a z-buffer rasterizer, silhouette tools and SH shading.

Pixel ``(x, y)`` has its center at image coordinates ``u = x, v = y``;
images are indexed ``img[y, x]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DegenerateGeometryError
from .geometry import scatter_rows

MIN_DEPTH = 1e-6
BOUNDARY_BAND = 2.0
VISIBILITY_TOLERANCE = 1e-3


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera with world-to-camera rotation ``R`` and translation ``t``."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = None
    t: np.ndarray = None

    def __post_init__(self):
        R = np.eye(3) if self.R is None else np.asarray(self.R, dtype=float).reshape(3, 3)
        t = np.zeros(3) if self.t is None else np.asarray(self.t, dtype=float).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.R.T + self.t

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None) -> "Camera":
        """Camera at ``eye`` looking at ``target``; image y points along -up."""
        eye = np.asarray(eye, dtype=float)
        z = np.asarray(target, dtype=float) - eye
        z /= np.linalg.norm(z)
        x = np.cross(-np.asarray(up, dtype=float), z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        cx = (width - 1) / 2.0 if cx is None else cx
        cy = (height - 1) / 2.0 if cy is None else cy
        return cls(fx, fy, cx, cy, width, height, R, -R @ eye)


def project(camera: Camera, points, jacobian: bool = False):
    """Project world points to pixel coordinates.

    Returns ``(uv, depth)`` or ``(uv, depth, J)`` with ``J`` of shape
    (n, 2, 3), the derivative of ``uv`` w.r.t. the world point.
    """
    P = np.atleast_2d(np.asarray(points, dtype=float))
    Pc = camera.to_camera(P)
    z = Pc[:, 2]
    if np.any(z <= MIN_DEPTH):
        raise ValueError("point behind or too close to the camera")
    uv = np.stack([camera.fx * Pc[:, 0] / z + camera.cx, camera.fy * Pc[:, 1] / z + camera.cy], axis=1)
    if not jacobian:
        return uv, z
    Jc = np.zeros((len(P), 2, 3))
    Jc[:, 0, 0] = camera.fx / z
    Jc[:, 0, 2] = -camera.fx * Pc[:, 0] / z**2
    Jc[:, 1, 1] = camera.fy / z
    Jc[:, 1, 2] = -camera.fy * Pc[:, 1] / z**2
    return uv, z, Jc @ camera.R


# -- normals -------------------------------------------------------------------

def vertex_normals(V, faces):
    """Area-weighted unit vertex normals and the unnormalized sums."""
    V = np.asarray(V, dtype=float)
    fn = np.cross(V[faces[:, 1]] - V[faces[:, 0]], V[faces[:, 2]] - V[faces[:, 0]])
    acc = scatter_rows(len(V), faces, np.repeat(fn[:, None, :], 3, axis=1))
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    return acc / np.where(norm > 0, norm, 1.0), acc


def vertex_normals_vjp(V, faces, grad_unit):
    """Gradient w.r.t. ``V`` of ``sum(grad_unit * vertex_normals(V))``."""
    V = np.asarray(V, dtype=float)
    unit, acc = vertex_normals(V, faces)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    norm = np.where(norm > 0, norm, 1.0)
    g_acc = (grad_unit - unit * np.sum(grad_unit * unit, axis=1, keepdims=True)) / norm
    g_fn = g_acc[faces[:, 0]] + g_acc[faces[:, 1]] + g_acc[faces[:, 2]]
    a, b, c = V[faces[:, 0]], V[faces[:, 1]], V[faces[:, 2]]
    # fn = (b - a) x (c - a)
    gb = np.cross(c - a, g_fn)
    gc = np.cross(g_fn, b - a)
    return scatter_rows(len(V), faces, np.stack([-gb - gc, gb, gc], axis=1))


# -- rasterization -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Raster:
    """Per-pixel z-buffer output. ``bary`` are perspective-correct barycentrics."""

    depth: np.ndarray
    face_id: np.ndarray
    bary: np.ndarray
    normals: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.face_id >= 0

    def covered(self):
        """Flat pixel indices ``(ys, xs)`` of covered pixels, row-major."""
        return np.nonzero(self.face_id >= 0)


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def rasterize(camera: Camera, V, faces) -> Raster:
    """Z-buffer rasterization with per-pixel face ids, barycentrics and normals.

    A pixel is covered when its center lies inside or on the edge of a
    projected triangle. Normals are barycentric blends of area-weighted
    vertex normals, renormalized and expressed in the camera frame.
    """
    V = np.asarray(V, dtype=float)
    faces = np.asarray(faces, dtype=np.int64)
    H, W = camera.height, camera.width
    depth = np.full((H, W), np.inf)
    face_id = np.full((H, W), -1, dtype=np.int64)
    bary = np.zeros((H, W, 3))
    normals = np.zeros((H, W, 3))
    if len(faces) == 0:
        return Raster(depth, face_id, bary, normals)

    Pc = camera.to_camera(V)
    z = Pc[:, 2]
    front = np.all(z[faces] > MIN_DEPTH, axis=1)
    fidx = np.nonzero(front)[0]
    if len(fidx) == 0:
        return Raster(depth, face_id, bary, normals)
    zs = np.where(z > MIN_DEPTH, z, 1.0)
    u = camera.fx * Pc[:, 0] / zs + camera.cx
    v = camera.fy * Pc[:, 1] / zs + camera.cy

    tri = faces[fidx]
    tu, tv = u[tri], v[tri]
    x0 = np.clip(np.ceil(tu.min(axis=1)), 0, W).astype(np.int64)
    x1 = np.clip(np.floor(tu.max(axis=1)), -1, W - 1).astype(np.int64)
    y0 = np.clip(np.ceil(tv.min(axis=1)), 0, H).astype(np.int64)
    y1 = np.clip(np.floor(tv.max(axis=1)), -1, H - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    count = nx * ny
    keep = count > 0
    if not np.any(keep):
        return Raster(depth, face_id, bary, normals)
    fidx, tri, tu, tv = fidx[keep], tri[keep], tu[keep], tv[keep]
    x0, y0, nx, count = x0[keep], y0[keep], nx[keep], count[keep]

    owner = np.repeat(np.arange(len(fidx)), count)
    local = np.arange(owner.size) - np.repeat(np.cumsum(count) - count, count)
    px = x0[owner] + local % nx[owner]
    py = y0[owner] + local // nx[owner]

    ax, bx, cx = tu[owner, 0], tu[owner, 1], tu[owner, 2]
    ay, by, cy = tv[owner, 0], tv[owner, 1], tv[owner, 2]
    area = _edge(ax, ay, bx, by, cx, cy)
    w0 = _edge(bx, by, cx, cy, px, py)
    w1 = _edge(cx, cy, ax, ay, px, py)
    w2 = _edge(ax, ay, bx, by, px, py)
    nz = area != 0
    inside = nz & (((w0 >= 0) & (w1 >= 0) & (w2 >= 0)) | ((w0 <= 0) & (w1 <= 0) & (w2 <= 0)))
    owner, px, py = owner[inside], px[inside], py[inside]
    area = area[inside]
    b = np.stack([w0[inside], w1[inside], w2[inside]], axis=1) / area[:, None]
    zt = z[tri[owner]]
    inv = b / zt
    inv_sum = inv.sum(axis=1)
    pdepth = 1.0 / inv_sum
    pbary = inv / inv_sum[:, None]

    pix = py * W + px
    order = np.lexsort((owner, pdepth, pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]

    flat_depth = depth.reshape(-1)
    flat_face = face_id.reshape(-1)
    flat_bary = bary.reshape(-1, 3)
    flat_depth[pix[win]] = pdepth[win]
    flat_face[pix[win]] = fidx[owner[win]]
    flat_bary[pix[win]] = pbary[win]

    vn, _ = vertex_normals(V, faces)
    wf = flat_face[pix[win]]
    n = np.einsum("pk,pka->pa", pbary[win], vn[faces[wf]])
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    normals.reshape(-1, 3)[pix[win]] = n @ camera.R.T
    return Raster(depth, face_id, bary, normals)


def _point_in_bbox_pairs(points, lo, hi, cell):
    """Pairs ``(point, box)`` with the 2D point inside the axis-aligned box, via a uniform grid."""
    c0 = np.floor(lo / cell).astype(np.int64)
    c1 = np.floor(hi / cell).astype(np.int64)
    base = np.minimum(c0.min(axis=0), np.floor(points.min(axis=0) / cell).astype(np.int64))
    c0 -= base
    c1 -= base
    pc = np.floor(points / cell).astype(np.int64) - base
    ncols = int(max(c1[:, 0].max(), pc[:, 0].max())) + 1
    nrows = int(max(c1[:, 1].max(), pc[:, 1].max())) + 1
    span = c1 - c0 + 1
    count = span[:, 0] * span[:, 1]
    box = np.repeat(np.arange(len(lo)), count)
    local = np.arange(box.size) - np.repeat(np.cumsum(count) - count, count)
    cx = c0[box, 0] + local % span[box, 0]
    cy = c0[box, 1] + local // span[box, 0]
    grid = sp.csr_matrix((np.ones(box.size, dtype=bool), (cy * ncols + cx, box)), shape=(nrows * ncols, len(lo)))
    hits = grid[pc[:, 1] * ncols + pc[:, 0]].tocoo()
    pt, bx = hits.row, hits.col
    inside = np.all((points[pt] >= lo[bx]) & (points[pt] <= hi[bx]), axis=1)
    return pt[inside], bx[inside]


def vertex_visibility(camera: Camera, V, faces, tolerance=None) -> np.ndarray:
    """Boolean visibility per vertex.

    A vertex is visible when it projects inside the image in front of the
    camera and no non-incident face in front of the camera crosses the ray
    from the camera center to it more than ``tolerance`` (depth) before the
    vertex. Candidate faces come from projected bounding boxes, so the ray
    test is exact rather than limited to pixel centers.
    """
    V = np.asarray(V, dtype=float)
    faces = np.asarray(faces, dtype=np.int64)
    if tolerance is None:
        tolerance = VISIBILITY_TOLERANCE * float(np.linalg.norm(np.ptp(V, axis=0))) if len(V) else 0.0
    Pc = camera.to_camera(V)
    z = Pc[:, 2]
    vis = z > MIN_DEPTH
    zs = np.where(vis, z, 1.0)
    uv = np.stack([camera.fx * Pc[:, 0] / zs + camera.cx, camera.fy * Pc[:, 1] / zs + camera.cy], axis=1)
    x = np.rint(uv[:, 0])
    y = np.rint(uv[:, 1])
    vis &= (x >= 0) & (x < camera.width) & (y >= 0) & (y < camera.height)
    idx = np.nonzero(vis)[0]
    front = faces[np.all(z[faces] > MIN_DEPTH, axis=1)] if len(faces) else faces
    if len(idx) == 0 or len(front) == 0:
        return vis

    tuv = uv[front]
    owner, fi = _point_in_bbox_pairs(uv[idx], tuv.min(axis=1), tuv.max(axis=1), cell=8.0)
    tri = front[fi]
    keep = ~np.any(tri == idx[owner, None], axis=1)
    owner, tri = owner[keep], tri[keep]

    # Moller-Trumbore in camera space: ray from the origin towards the vertex
    d = Pc[idx[owner]]
    a, b, c = Pc[tri[:, 0]], Pc[tri[:, 1]], Pc[tri[:, 2]]
    e1, e2 = b - a, c - a
    h = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, h)
    ok = det != 0
    inv = 1.0 / np.where(ok, det, 1.0)
    s = -a
    bu = inv * np.einsum("ij,ij->i", s, h)
    q = np.cross(s, e1)
    bv = inv * np.einsum("ij,ij->i", d, q)
    t = inv * np.einsum("ij,ij->i", e2, q)
    blocked = ok & (bu >= 0) & (bv >= 0) & (bu + bv <= 1) & (t > 0) & (t * d[:, 2] < d[:, 2] - tolerance)
    occluded = np.zeros(len(idx), dtype=bool)
    occluded[owner[blocked]] = True
    vis[idx] = ~occluded
    return vis


def mask_boundary(mask) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background (image border excluded)."""
    m = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(2, 1), border_value=1)
    return m & ~inner


def distance_transform(mask) -> np.ndarray:
    """Exact Euclidean distance (pixels) to the nearest silhouette-boundary pixel."""
    boundary = mask_boundary(mask)
    if not boundary.any():
        raise DegenerateGeometryError("mask has no silhouette boundary")
    return ndimage.distance_transform_edt(~boundary).astype(float)


@dataclass(frozen=True, eq=False)
class BoundarySet:
    """Boundary vertices of one view with their directional weights."""

    indices: np.ndarray
    direction: np.ndarray


def boundary_vertices(camera: Camera, V, faces, mask, raster: Raster | None = None,
                      visible=None, band: float = BOUNDARY_BAND) -> BoundarySet:
    """Visible vertices projecting within ``band`` pixels of the rendered silhouette boundary.

    The direction is +1 where the projection falls outside the observed
    foreground mask and -1 inside it.
    """
    V = np.asarray(V, dtype=float)
    raster = rasterize(camera, V, faces) if raster is None else raster
    if visible is None:
        visible = vertex_visibility(camera, V, faces)
    edge = mask_boundary(raster.mask)
    empty = BoundarySet(np.zeros(0, dtype=np.int64), np.zeros(0))
    if not edge.any():
        return empty
    ys, xs = np.nonzero(edge)
    idx = np.nonzero(visible)[0]
    if len(idx) == 0:
        return empty
    uv, _ = project(camera, V[idx])
    d, _ = cKDTree(np.stack([xs, ys], axis=1).astype(float)).query(uv)
    near = d <= band
    idx, uv = idx[near], uv[near]
    x = np.clip(np.rint(uv[:, 0]).astype(np.int64), 0, camera.width - 1)
    y = np.clip(np.rint(uv[:, 1]).astype(np.int64), 0, camera.height - 1)
    inside_img = ((uv[:, 0] > -0.5) & (uv[:, 0] < camera.width - 0.5)
                  & (uv[:, 1] > -0.5) & (uv[:, 1] < camera.height - 0.5))
    fg = np.asarray(mask, dtype=bool)[y, x] & inside_img
    return BoundarySet(idx, np.where(fg, -1.0, 1.0))


# -- image sampling ------------------------------------------------------------

def bilinear_sample(image, uv, gradient: bool = False):
    """Sample an (H, W) or (H, W, C) image at continuous pixel coordinates.

    Coordinates are clamped to the image; derivatives are zero across the
    clamped border. Returns values (n[, C]) and optionally d/du, d/dv.
    """
    img = np.asarray(image, dtype=float)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    H, W = img.shape[:2]
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    u = np.clip(uv[:, 0], 0.0, W - 1.0)
    v = np.clip(uv[:, 1], 0.0, H - 1.0)
    x0 = np.minimum(np.floor(u).astype(np.int64), max(W - 2, 0))
    y0 = np.minimum(np.floor(v).astype(np.int64), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (u - x0)[:, None]
    fy = (v - y0)[:, None]
    I00, I01 = img[y0, x0], img[y0, x1]
    I10, I11 = img[y1, x0], img[y1, x1]
    val = (1 - fy) * ((1 - fx) * I00 + fx * I01) + fy * ((1 - fx) * I10 + fx * I11)
    if not gradient:
        return val[:, 0] if squeeze else val
    du = (1 - fy) * (I01 - I00) + fy * (I11 - I10)
    dv = (1 - fx) * (I10 - I00) + fx * (I11 - I01)
    du *= ((uv[:, 0] >= 0) & (uv[:, 0] <= W - 1))[:, None]
    dv *= ((uv[:, 1] >= 0) & (uv[:, 1] <= H - 1))[:, None]
    if squeeze:
        return val[:, 0], du[:, 0], dv[:, 0]
    return val, du, dv


# -- spherical harmonics -------------------------------------------------------

_C0 = 0.5 / np.sqrt(np.pi)
_C1 = np.sqrt(3.0) / (2.0 * np.sqrt(np.pi))
_C2 = np.sqrt(15.0) / (2.0 * np.sqrt(np.pi))
_C3 = np.sqrt(5.0) / (4.0 * np.sqrt(np.pi))
_C4 = np.sqrt(15.0) / (4.0 * np.sqrt(np.pi))


@dataclass(frozen=True, eq=False)
class SHLighting:
    """Nine real SH coefficients per RGB channel, shape (9, 3)."""

    l: np.ndarray

    def __post_init__(self):
        l = np.array(self.l, dtype=float).reshape(9, 3)
        if not np.all(np.isfinite(l)):
            raise ValueError("lighting coefficients must be finite")
        object.__setattr__(self, "l", l)

    @classmethod
    def ambient(cls, level: float = 1.0) -> "SHLighting":
        l = np.zeros((9, 3))
        l[0] = level / _C0
        return cls(l)


def sh_basis(n):
    """Real orthonormal SH basis, bands 0-2, for unit normals (..., 3) -> (..., 9)."""
    n = np.asarray(n, dtype=float)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return np.stack([
        np.full_like(x, _C0),
        _C1 * y,
        _C1 * z,
        _C1 * x,
        _C2 * x * y,
        _C2 * y * z,
        _C3 * (3.0 * z * z - 1.0),
        _C2 * x * z,
        _C4 * (x * x - y * y),
    ], axis=-1)


def sh_basis_jacobian(n):
    """Derivative of :func:`sh_basis` w.r.t. the normal components, (..., 9, 3)."""
    n = np.asarray(n, dtype=float)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    J = np.zeros(n.shape[:-1] + (9, 3))
    J[..., 1, 1] = _C1
    J[..., 2, 2] = _C1
    J[..., 3, 0] = _C1
    J[..., 4, 0] = _C2 * y
    J[..., 4, 1] = _C2 * x
    J[..., 5, 1] = _C2 * z
    J[..., 5, 2] = _C2 * y
    J[..., 6, 2] = 6.0 * _C3 * z
    J[..., 7, 0] = _C2 * z
    J[..., 7, 2] = _C2 * x
    J[..., 8, 0] = 2.0 * _C4 * x
    J[..., 8, 1] = -2.0 * _C4 * y
    return J


def sh_shade(normals, lighting, albedo):
    """Lambertian SH shading ``albedo * sum_j l_j Y_j(n)`` per pixel and channel."""
    l = lighting.l if isinstance(lighting, SHLighting) else np.asarray(lighting, dtype=float).reshape(9, 3)
    return np.asarray(albedo, dtype=float) * (sh_basis(normals) @ l)


def render_image(camera: Camera, V, faces, albedo, lighting, raster: Raster | None = None,
                 background=0.0) -> np.ndarray:
    """Shaded (H, W, 3) image of a mesh with per-vertex albedo."""
    raster = rasterize(camera, V, faces) if raster is None else raster
    img = np.zeros((camera.height, camera.width, 3))
    img[...] = background
    ys, xs = raster.covered()
    fid = raster.face_id[ys, xs]
    a = np.einsum("pk,pka->pa", raster.bary[ys, xs], np.asarray(albedo)[faces[fid]])
    img[ys, xs] = sh_shade(raster.normals[ys, xs], lighting, a)
    return img
