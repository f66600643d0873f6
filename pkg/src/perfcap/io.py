"""Readers and writers for meshes, templates, cameras, images and run records.

Binary floats are little-endian float32; JSON floats are written with
``repr`` precision so every value round-trips exactly.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import cv2
import numpy as np
import scipy.sparse as sp

from .deformation import CharacterParams, EmbeddedGraph
from .errors import FormatError
from .geometry import Mesh, Pose, RigidityWeights, Skeleton, SkinningWeights
from .parametric import HandRig, LinearShapeModel
from .render import Camera, SHLighting
from .template import Template


# -- atomic writes -----------------------------------------------------------------

def atomic_write(path, data) -> None:
    """Write bytes or text to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _f(x) -> str:
    return repr(float(x))


# -- meshes ------------------------------------------------------------------------

def write_obj(path, vertices, faces, colors=None) -> None:
    """OBJ with optional per-vertex colors appended to ``v`` lines."""
    V = np.asarray(vertices, dtype=float)
    lines = []
    for i, v in enumerate(V):
        parts = ["v", _f(v[0]), _f(v[1]), _f(v[2])]
        if colors is not None:
            parts += [_f(c) for c in colors[i]]
        lines.append(" ".join(parts))
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces, dtype=np.int64)]
    atomic_write(path, "\n".join(lines) + "\n")


def read_obj(path):
    """Returns ``(vertices, faces, colors or None)``; polygons are fan-triangulated."""
    V, C, F = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    V.append([float(x) for x in parts[1:4]])
                    if len(parts) >= 7:
                        C.append([float(x) for x in parts[4:7]])
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    idx = [i - 1 if i > 0 else len(V) + i for i in idx]
                    for k in range(1, len(idx) - 1):
                        F.append([idx[0], idx[k], idx[k + 1]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    colors = np.array(C) if C and len(C) == len(V) else None
    return np.array(V, dtype=float).reshape(-1, 3), np.array(F, dtype=np.int64).reshape(-1, 3), colors


def write_ply(path, vertices, faces=None, colors=None) -> None:
    """ASCII PLY; colors are stored as float properties to keep full precision."""
    V = np.asarray(vertices, dtype=float)
    F = np.zeros((0, 3), dtype=np.int64) if faces is None else np.asarray(faces, dtype=np.int64)
    head = ["ply", "format ascii 1.0", f"element vertex {len(V)}",
            "property double x", "property double y", "property double z"]
    if colors is not None:
        head += ["property double red", "property double green", "property double blue"]
    head += [f"element face {len(F)}", "property list uchar int vertex_indices", "end_header"]
    rows = []
    for i, v in enumerate(V):
        vals = list(v) + (list(colors[i]) if colors is not None else [])
        rows.append(" ".join(_f(x) for x in vals))
    rows += [f"3 {a} {b} {c}" for a, b, c in F]
    atomic_write(path, "\n".join(head + rows) + "\n")


def read_ply(path):
    """ASCII PLY reader; returns ``(vertices, faces, colors or None)``.

    Integer color properties are scaled from [0, 255] to [0, 1].
    """
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: not a PLY file")
    n_v = n_f = 0
    props, current = [], None
    i = 1
    while i < len(lines) and lines[i].strip() != "end_header":
        parts = lines[i].split()
        if parts[:2] == ["format", "binary_little_endian"] or parts[:2] == ["format", "binary_big_endian"]:
            raise FormatError(f"{path}: only ASCII PLY is supported")
        if parts and parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_v = int(parts[2])
            elif current == "face":
                n_f = int(parts[2])
        elif parts and parts[0] == "property" and current == "vertex":
            props.append((parts[-1], parts[1]))
        i += 1
    if i == len(lines):
        raise FormatError(f"{path}: missing end_header")
    body = lines[i + 1:]
    if len(body) < n_v + n_f:
        raise FormatError(f"{path}: expected {n_v} vertices and {n_f} faces, file is truncated")
    names = [p[0] for p in props]
    data = np.array([[float(x) for x in body[k].split()] for k in range(n_v)]).reshape(n_v, len(props))
    V = data[:, [names.index(a) for a in ("x", "y", "z")]]
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        cols = [names.index(c) for c in ("red", "green", "blue")]
        colors = data[:, cols]
        if props[cols[0]][1] in ("uchar", "uint8"):
            colors = colors / 255.0
    F = []
    for k in range(n_v, n_v + n_f):
        idx = [int(x) for x in body[k].split()]
        poly = idx[1:1 + idx[0]]
        for m in range(1, len(poly) - 1):
            F.append([poly[0], poly[m], poly[m + 1]])
    return V, np.array(F, dtype=np.int64).reshape(-1, 3), colors


def read_mesh(path):
    return read_ply(path) if str(path).lower().endswith(".ply") else read_obj(path)


# -- templates ---------------------------------------------------------------------

def skeleton_to_dict(sk: Skeleton) -> dict:
    return {
        "parents": [int(p) for p in sk.parents],
        "offsets": np.asarray(sk.offsets).tolist(),
        "axes": [np.asarray(a).reshape(-1, 3).tolist() for a in sk.axes],
        "limits": None if sk.limits is None else np.asarray(sk.limits).tolist(),
        "landmark_joints": [int(j) for j in sk.landmark_joints],
        "landmark_offsets": np.asarray(sk.landmark_offsets).tolist(),
        "names": list(sk.names) if sk.names is not None else None,
    }


def skeleton_from_dict(d: dict) -> Skeleton:
    return Skeleton(
        parents=d["parents"],
        offsets=d["offsets"],
        axes=[np.asarray(a, dtype=float).reshape(-1, 3) for a in d["axes"]],
        limits=d.get("limits"),
        landmark_joints=d.get("landmark_joints", []),
        landmark_offsets=d.get("landmark_offsets", np.zeros((0, 3))),
        names=tuple(d["names"]) if d.get("names") else None,
    )


def pose_to_dict(pose: Pose) -> dict:
    return {"theta": pose.theta.tolist(), "alpha": pose.alpha.tolist(), "t": pose.t.tolist()}


def pose_from_dict(d: dict) -> Pose:
    return Pose(d["theta"], d["alpha"], d["t"])


def template_sidecar(template: Template) -> dict:
    rows, cols, vals = template.skinning.to_triplets()
    out = {
        "skeleton": skeleton_to_dict(template.skeleton),
        "skinning": {"rows": rows.tolist(), "cols": cols.tolist(), "values": vals.tolist()},
        "rigging_pose": pose_to_dict(template.rigging_pose),
        "metadata": template.metadata,
    }
    if template.materials is not None:
        out["materials"] = list(template.materials)
    else:
        out["rigidity"] = template.rigidity.r.tolist()
    return out


def save_template(path, template: Template) -> tuple:
    """Write ``<stem>.obj`` (geometry + albedo) and ``<stem>.json`` (rig sidecar)."""
    path = Path(path)
    mesh_path = path.with_suffix(".obj")
    side_path = path.with_suffix(".json")
    write_obj(mesh_path, template.mesh.vertices, template.mesh.faces, template.mesh.albedo)
    write_json(side_path, {"mesh": mesh_path.name, **template_sidecar(template)})
    return mesh_path, side_path


def load_template(path) -> Template:
    """Load a template from its sidecar JSON (the mesh file is named inside it)."""
    path = Path(path)
    side = read_json(path.with_suffix(".json"))
    V, F, C = read_mesh(path.parent / side.get("mesh", path.with_suffix(".obj").name))
    if C is None:
        C = np.full_like(V, 0.5)
    skeleton = skeleton_from_dict(side["skeleton"])
    sk = side["skinning"]
    W = sp.csr_matrix((sk["values"], (sk["rows"], sk["cols"])), shape=(len(V), skeleton.n_joints))
    materials = side.get("materials")
    if materials is not None:
        rigidity = RigidityWeights.from_labels(materials)
    else:
        rigidity = RigidityWeights(np.asarray(side["rigidity"], dtype=float))
    pose = side.get("rigging_pose")
    return Template(
        mesh=Mesh(V, F, C),
        skeleton=skeleton,
        skinning=SkinningWeights(W),
        rigidity=rigidity,
        rigging_pose=None if pose is None else pose_from_dict(pose),
        materials=None if materials is None else tuple(materials),
        metadata=side.get("metadata", {}),
    )


# -- cameras and lighting -------------------------------------------------------------

def camera_to_dict(cam: Camera) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy, "W": cam.width, "H": cam.height,
            "R": np.asarray(cam.R).reshape(9).tolist(), "t": np.asarray(cam.t).tolist()}


def camera_from_dict(d: dict) -> Camera:
    try:
        return Camera(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                      int(d["W"]), int(d["H"]), np.asarray(d["R"], dtype=float).reshape(3, 3),
                      np.asarray(d["t"], dtype=float))
    except KeyError as exc:
        raise FormatError(f"camera record missing {exc}") from None


def save_cameras(path, cameras, lightings=None) -> None:
    recs = [camera_to_dict(c) for c in cameras]
    if lightings is not None:
        for rec, light in zip(recs, lightings):
            rec["sh"] = np.asarray(light.l).tolist()
    write_json(path, {"cameras": recs})


def load_cameras(path):
    """Returns ``(cameras, lightings or None)``."""
    data = read_json(path)
    recs = data["cameras"] if isinstance(data, dict) else data
    cams = [camera_from_dict(r) for r in recs]
    lights = [SHLighting(np.asarray(r["sh"])) for r in recs] if all("sh" in r for r in recs) else None
    return cams, lights


# -- images -------------------------------------------------------------------------

def srgb_encode(linear):
    x = np.clip(np.asarray(linear, dtype=float), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def srgb_decode(encoded):
    x = np.asarray(encoded, dtype=float)
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def quantize_image(linear, bits: int = 16):
    """The linear image that a PNG of the given depth stores for ``linear``."""
    top = (1 << bits) - 1
    return srgb_decode(np.round(srgb_encode(linear) * top) / top)


def write_image(path, linear, bits: int = 16) -> None:
    """Linear RGB in [0, 1] to an sRGB PNG (8 or 16 bit)."""
    if bits not in (8, 16):
        raise ValueError("PNG depth must be 8 or 16")
    top = (1 << bits) - 1
    codes = np.round(srgb_encode(linear) * top).astype(np.uint16 if bits == 16 else np.uint8)
    ok, buf = cv2.imencode(".png", np.ascontiguousarray(codes[:, :, ::-1]))
    if not ok:
        raise OSError(f"PNG encoding failed for {path}")
    atomic_write(path, buf.tobytes())


def read_image(path):
    """sRGB PNG to linear float RGB."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FormatError(f"cannot read image {path}")
    if raw.ndim == 2:
        raw = np.repeat(raw[:, :, None], 3, axis=2)
    raw = raw[:, :, 2::-1]
    top = 65535.0 if raw.dtype == np.uint16 else 255.0
    return srgb_decode(raw.astype(float) / top)


def write_mask(path, mask) -> None:
    ok, buf = cv2.imencode(".png", np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))
    if not ok:
        raise OSError(f"PNG encoding failed for {path}")
    atomic_write(path, buf.tobytes())


def read_mask(path):
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FormatError(f"cannot read mask {path}")
    if raw.ndim == 3:
        raw = raw[:, :, 0]
    return raw > (raw.max() // 2 if raw.max() > 1 else 0)


# -- distance transforms -----------------------------------------------------------

def write_distance(path, dt) -> None:
    """``<u4 W><u4 H>`` followed by row-major little-endian float32 values."""
    dt = np.asarray(dt)
    H, W = dt.shape
    atomic_write(path, struct.pack("<II", W, H) + dt.astype("<f4").tobytes())


def read_distance(path):
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise FormatError(f"{path}: truncated header at byte {len(data)}")
    W, H = struct.unpack_from("<II", data, 0)
    need = 8 + 4 * W * H
    if len(data) != need:
        raise FormatError(f"{path}: expected {need} bytes for {W}x{H}, found {len(data)} (payload starts at byte 8)")
    return np.frombuffer(data, dtype="<f4", offset=8).reshape(H, W).astype(float)


# -- keypoints and point clouds ------------------------------------------------------

def write_keypoints(path, keypoints, confidences) -> None:
    write_json(path, {"views": [{"uv": np.asarray(k).tolist(), "confidence": np.asarray(c).tolist()}
                                for k, c in zip(keypoints, confidences)]})


def read_keypoints(path):
    views = read_json(path)["views"]
    return ([np.asarray(v["uv"], dtype=float).reshape(-1, 2) for v in views],
            [np.asarray(v["confidence"], dtype=float) for v in views])


def write_points(path, points) -> None:
    write_ply(path, points)


def read_points(path):
    return read_ply(path)[0]


# -- graph and parameters -------------------------------------------------------------

def graph_to_dict(graph: EmbeddedGraph) -> dict:
    W = graph.influence.tocoo()
    return {
        "nodes": graph.node_positions.tolist(),
        "edges": graph.node_edges.tolist(),
        "influence": {"rows": W.row.tolist(), "cols": W.col.tolist(), "values": W.data.tolist(),
                      "n_vertices": int(W.shape[0])},
        "node_rigidity": graph.node_rigidity.tolist(),
        "node_vertices": None if graph.node_vertices is None else np.asarray(graph.node_vertices).tolist(),
    }


def graph_from_dict(d: dict) -> EmbeddedGraph:
    inf = d["influence"]
    K = len(d["nodes"])
    W = sp.csr_matrix((inf["values"], (inf["rows"], inf["cols"])), shape=(inf["n_vertices"], K))
    return EmbeddedGraph(
        node_positions=np.asarray(d["nodes"], dtype=float).reshape(K, 3),
        node_edges=np.asarray(d["edges"], dtype=np.int64).reshape(-1, 2),
        influence=W,
        node_rigidity=np.asarray(d["node_rigidity"], dtype=float),
        node_vertices=None if d.get("node_vertices") is None else np.asarray(d["node_vertices"], dtype=np.int64),
    )


def save_graph(path, graph: EmbeddedGraph) -> None:
    write_json(path, graph_to_dict(graph))


def load_graph(path) -> EmbeddedGraph:
    return graph_from_dict(read_json(path))


def array_checksum(a) -> str:
    """SHA-256 of the array as little-endian float64, C order."""
    return hashlib.sha256(np.ascontiguousarray(a, dtype="<f8").tobytes()).hexdigest()


def params_record(params: CharacterParams, include_displacements: bool = False) -> dict:
    rec = {
        "pose": pose_to_dict(params.pose),
        "A": params.graph_A.tolist(),
        "T": params.graph_T.tolist(),
        "D_checksum": array_checksum(params.displacements),
        "D_shape": list(params.displacements.shape),
    }
    if include_displacements:
        rec["D"] = params.displacements.tolist()
    return rec


def params_from_record(rec: dict, n_vertices: int | None = None) -> CharacterParams:
    if "D" in rec:
        D = np.asarray(rec["D"], dtype=float)
    else:
        n = rec["D_shape"][0] if n_vertices is None else n_vertices
        D = np.zeros((n, 3))
    params = CharacterParams(pose_from_dict(rec["pose"]), np.asarray(rec["A"], dtype=float),
                             np.asarray(rec["T"], dtype=float), D)
    if "D" in rec and array_checksum(D) != rec["D_checksum"]:
        raise FormatError("displacement checksum mismatch")
    return params


def params_json(params: CharacterParams, include_displacements: bool = False) -> str:
    """Canonical serialization: sorted keys, repr floats, stable across runs."""
    return json.dumps(params_record(params, include_displacements), indent=1, sort_keys=True) + "\n"


# -- linear model container ----------------------------------------------------------

MODEL_MAGIC = b"PCMD"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sIIIIIII")


def write_model(path, model: LinearShapeModel) -> None:
    """Binary linear-model container.

    Header ``magic "PCMD", u32 version, N, S, E, F, n_body, n_hand`` (n_body = 0
    without a rig), then float32 mean (N,3), shape basis (S,3N), shape sigma,
    expression basis (E,3N), expression sigma, int32 faces (F,3), uint8 region
    flags (N); with a rig: int32 parents, float32 joints (J,3), float32 weights (N,J).
    """
    rig = model.rig
    n_body, n_hand = (rig.n_body, rig.n_hand) if rig is not None else (0, 0)
    parts = [_MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, model.n_vertices, model.n_shape, model.n_expr,
                                len(model.faces), n_body, n_hand)]
    for a in (model.mean, model.shape_basis, model.shape_sigma, model.expr_basis, model.expr_sigma):
        parts.append(np.asarray(a, dtype="<f4").tobytes())
    parts.append(np.asarray(model.faces, dtype="<i4").tobytes())
    parts.append(np.asarray(model.region, dtype=np.uint8).tobytes())
    if rig is not None:
        parts += [rig.parents.astype("<i4").tobytes(), rig.joints.astype("<f4").tobytes(),
                  rig.weights.astype("<f4").tobytes()]
    atomic_write(path, b"".join(parts))


class _Cursor:
    def __init__(self, path, data: bytes):
        self.path, self.data, self.offset = path, data, 0

    def take(self, dtype, count: int, what: str) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        if self.offset + size > len(self.data):
            raise FormatError(f"{self.path}: truncated {what} at byte {self.offset}: "
                              f"need {size} bytes, {len(self.data) - self.offset} left")
        out = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.offset)
        self.offset += size
        return out


def read_model(path) -> LinearShapeModel:
    data = Path(path).read_bytes()
    if len(data) < _MODEL_HEADER.size:
        raise FormatError(f"{path}: truncated header at byte {len(data)} (need {_MODEL_HEADER.size})")
    magic, version, N, S, E, F, n_body, n_hand = _MODEL_HEADER.unpack_from(data, 0)
    if magic != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    cur = _Cursor(path, data)
    cur.offset = _MODEL_HEADER.size
    mean = cur.take("<f4", 3 * N, "mean").reshape(N, 3)
    BS = cur.take("<f4", S * 3 * N, "shape basis").reshape(S, 3 * N)
    sS = cur.take("<f4", S, "shape sigma")
    BE = cur.take("<f4", E * 3 * N, "expression basis").reshape(E, 3 * N)
    sE = cur.take("<f4", E, "expression sigma")
    start = cur.offset
    faces = cur.take("<i4", 3 * F, "faces").reshape(F, 3)
    if F and (faces.min() < 0 or faces.max() >= N):
        raise FormatError(f"{path}: face index out of range in block at byte {start}")
    region = cur.take(np.uint8, N, "region flags")
    rig = None
    if n_body:
        J = n_body + 2 * n_hand
        parents = cur.take("<i4", J, "joint parents")
        joints = cur.take("<f4", 3 * J, "joints").reshape(J, 3)
        start = cur.offset
        weights = cur.take("<f4", N * J, "skinning weights").reshape(N, J).astype(float)
        try:
            rig = HandRig(parents, joints.astype(float), weights, n_body, n_hand)
        except ValueError as exc:
            raise FormatError(f"{path}: invalid rig in block at byte {start}: {exc}") from exc
    if cur.offset != len(data):
        raise FormatError(f"{path}: {len(data) - cur.offset} trailing bytes at byte {cur.offset}")
    try:
        return LinearShapeModel(mean.astype(float), BS.astype(float), sS.astype(float), BE.astype(float),
                                sE.astype(float), faces.astype(np.int64), region.copy(), rig)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# -- per-frame face and hand parameters ----------------------------------------------

def write_frame_parameters(path, frames) -> None:
    """JSON array with one ``{"w_E": [...], "theta_h": [[...]...]}`` object per frame."""
    out = []
    for f in frames:
        rec = {}
        if f.get("w_E") is not None:
            rec["w_E"] = np.asarray(f["w_E"], dtype=float).tolist()
        if f.get("theta_h") is not None:
            rec["theta_h"] = np.asarray(f["theta_h"], dtype=float).tolist()
        out.append(rec)
    write_json(path, out)


def read_frame_parameters(path, n_expr: int | None = None) -> list:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"per-frame parameter file {path} is missing")
    frames = read_json(path)
    if not isinstance(frames, list):
        raise FormatError(f"{path}: expected a JSON array of frames")
    out = []
    for i, rec in enumerate(frames):
        w_E = np.asarray(rec["w_E"], dtype=float) if "w_E" in rec else None
        theta_h = np.asarray(rec["theta_h"], dtype=float).reshape(2, -1, 3) if "theta_h" in rec else None
        if w_E is not None and n_expr is not None and len(w_E) != n_expr:
            raise FormatError(f"{path}: frame {i} has {len(w_E)} expression coefficients, expected {n_expr}")
        for v in (w_E, theta_h):
            if v is not None and not np.all(np.isfinite(v)):
                raise FormatError(f"{path}: frame {i} has non-finite parameters")
        out.append({"w_E": w_E, "theta_h": theta_h})
    return out
