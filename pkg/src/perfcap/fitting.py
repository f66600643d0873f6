"""Staged per-frame fitting of pose, graph deformation and displacements.

A frame is fitted by running stages in order. Each stage optimizes a subset
of parameter blocks on a weighted sum of energy terms; all other blocks stay
bitwise frozen. Discrete sets (silhouette boundary vertices, rasterized
coverage, chamfer correspondences) are recomputed once per outer iteration
and held constant during that iteration's line search.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .deformation import (
    DEFAULT_EPSILON_RIGID,
    CharacterParams,
    EmbeddedGraph,
    apply_embedded_deformation,
    arap_energy,
    default_laplacian_weights,
    embedded_deformation_vjp,
    isometry_energy,
    laplacian_energy,
    rigid_mask,
)
from .energies import (
    TERMS,
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
from .errors import ConfigError, FitAborted
from .geometry import Pose, blended_transforms, skinning_transforms
from .observation import FrameObservation
from .render import rasterize
from .template import Template

BLOCKS = ("pose", "graph", "disp", "lighting")
VERTEX_TERMS = ("sil", "dr", "cf", "iso", "lap")
STEPPERS = ("gd", "lbfgs", "adam")

# observation each data term needs
_REQUIRES = {"sil": "mask", "mk": "keypoints", "dr": "image", "cf": "point_cloud"}


@dataclass(frozen=True)
class Stage:
    """One fitting stage: which blocks move, which terms count, when to stop."""

    name: str
    blocks: tuple
    terms: tuple = ()
    max_iterations: int = 500
    gtol: float = 1e-6
    ftol: float = 1e-12
    stepper: str = "gd"
    learning_rate: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "terms", tuple(self.terms))
        if not self.blocks or set(self.blocks) - set(BLOCKS):
            raise ConfigError(f"stage {self.name!r}: blocks must be a nonempty subset of {BLOCKS}")
        if set(self.terms) - set(TERMS):
            raise ConfigError(f"stage {self.name!r}: unknown terms {sorted(set(self.terms) - set(TERMS))}")
        if "lighting" in self.blocks and len(self.blocks) > 1:
            raise ConfigError("the lighting solve runs as a stage of its own")
        if "pose" in self.blocks and set(self.terms) & set(VERTEX_TERMS + ("arap",)):
            raise ConfigError(f"stage {self.name!r}: the pose block only supports the mk and jl terms")
        if "pose" in self.blocks and len(self.blocks) > 1:
            raise ConfigError("the pose block is optimized on its own")
        if "disp" not in self.blocks and set(self.terms) & {"iso", "lap"} and "graph" not in self.blocks:
            raise ConfigError(f"stage {self.name!r}: iso/lap need a vertex block")
        if "jl" in self.terms and "pose" not in self.blocks:
            raise ConfigError(f"stage {self.name!r}: jl only acts on the pose block")
        if self.stepper not in STEPPERS:
            raise ConfigError(f"unknown stepper {self.stepper!r}")
        if self.max_iterations < 0 or self.gtol < 0 or self.ftol < 0:
            raise ConfigError("iteration caps and tolerances must be nonnegative")

    def to_dict(self) -> dict:
        return {"name": self.name, "blocks": list(self.blocks), "terms": list(self.terms),
                "max_iterations": self.max_iterations, "gtol": self.gtol, "ftol": self.ftol,
                "stepper": self.stepper, "learning_rate": self.learning_rate}


@dataclass(frozen=True)
class StageSchedule:
    stages: tuple

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise ConfigError("stage names must be unique")

    @classmethod
    def default(cls, max_iterations: int = 500, stepper: str = "gd") -> "StageSchedule":
        """Pose, coarse graph, lighting, graph with dense terms, displacements."""
        kw = {"max_iterations": max_iterations, "stepper": stepper}
        return cls((
            Stage("pose", ("pose",), ("mk", "jl"), **kw),
            Stage("graph", ("graph",), ("sil", "mk", "arap"), **kw),
            Stage("lighting", ("lighting",), ()),
            Stage("graph_full", ("graph",), ("sil", "mk", "arap", "dr", "cf"), **kw),
            Stage("displacement", ("disp",), ("sil", "dr", "cf", "iso", "lap"), **kw),
        ))

    def without(self, stage_name: str) -> "StageSchedule":
        return StageSchedule(tuple(s for s in self.stages if s.name != stage_name))

    def without_term(self, term: str) -> "StageSchedule":
        return StageSchedule(tuple(replace(s, terms=tuple(t for t in s.terms if t != term))
                                   for s in self.stages))

    def with_options(self, **kwargs) -> "StageSchedule":
        """Apply option overrides (e.g. ``stepper``) to every optimizing stage."""
        return StageSchedule(tuple(s if "lighting" in s.blocks else replace(s, **kwargs)
                                   for s in self.stages))

    def to_dict(self) -> dict:
        return {"stages": [s.to_dict() for s in self.stages]}

    @classmethod
    def from_dict(cls, data: dict) -> "StageSchedule":
        return cls(tuple(Stage(**{**s, "blocks": tuple(s["blocks"]), "terms": tuple(s.get("terms", ()))})
                         for s in data["stages"]))


@dataclass
class FitOptions:
    """Knobs shared by all stages."""

    weights: EnergyTermConfig = field(default_factory=EnergyTermConfig)
    epsilon_rigid: float = DEFAULT_EPSILON_RIGID
    lighting_damping: float = 1e-6
    # "deformed": Laplacian of displacements relative to the graph-deformed posed mesh;
    # "rest": relative to the undeformed canonical template
    laplacian_reference: str = "deformed"
    # the literal signed silhouette pushes inside vertices away from the mask edge
    silhouette_signed: bool = False
    armijo_c: float = 1e-4
    shrink: float = 0.5
    lbfgs_memory: int = 10

    def __post_init__(self):
        if self.laplacian_reference not in ("deformed", "rest"):
            raise ConfigError("laplacian_reference must be 'deformed' or 'rest'")
        if not (0 < self.shrink < 1) or not (0 < self.armijo_c < 1):
            raise ConfigError("line search constants must lie in (0, 1)")


@dataclass
class StageResult:
    name: str
    reports: list
    converged: bool
    reason: str
    iterations: int
    seconds: float
    steps: list = field(default_factory=list)  # (E_before, E_after) per accepted step


@dataclass
class FitResult:
    params: CharacterParams
    stages: list
    lightings: list | None = None
    vertices: np.ndarray | None = None

    @property
    def converged(self) -> dict:
        return {s.name: s.converged for s in self.stages}

    @property
    def total_iterations(self) -> int:
        return sum(s.iterations for s in self.stages)

    def stage(self, name: str) -> StageResult:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)


# -- objective ------------------------------------------------------------------

class FrameObjective:
    """Energy terms of one frame as functions of the character parameters."""

    def __init__(self, template: Template, graph: EmbeddedGraph, observation: FrameObservation,
                 options: FitOptions, lightings=None):
        self.template = template
        self.graph = graph
        self.obs = observation
        self.options = options
        self.weights = options.weights
        canon = template.canonical_mesh()
        self.canonical = canon
        self.V0 = canon.vertices
        self.faces = canon.faces
        self.albedo = canon.albedo
        self.mask = rigid_mask(template.rigidity, options.epsilon_rigid)[:, 0] > 0
        self.marker_influence = graph.point_influence(template.skeleton.rest_landmarks)
        self.lap_weights = default_laplacian_weights(template.rigidity)
        self.cameras = observation.cameras
        self.lightings = lightings

    def check(self, stage: Stage, lit: bool = False):
        for term in stage.terms:
            if self.weights.weight(term) == 0.0:
                continue
            need = _REQUIRES.get(term)
            if need is not None and not self.obs.has(need):
                raise ConfigError(f"stage {stage.name!r}: term {term!r} needs {need} observations")
            if term == "dr" and self.lightings is None and not lit:
                raise ConfigError(f"stage {stage.name!r}: render loss needs lighting (solve it first)")
            if term == "jl" and self.template.skeleton.limits is None:
                raise ConfigError("joint-limit term needs skeleton limits")
        if "lighting" in stage.blocks:
            if not self.obs.has("image"):
                raise ConfigError("lighting solve needs images")

    # -- pieces shared by evaluations
    def markers_canonical(self, A, T):
        return apply_embedded_deformation(self.template.skeleton.rest_landmarks, self.graph, A, T,
                                          influence=self.marker_influence)

    def canonical_vertices(self, params: CharacterParams):
        X = apply_embedded_deformation(self.V0, self.graph, params.graph_A, params.graph_T)
        return X + params.displacements * self.mask[:, None]

    def posing(self, pose: Pose):
        Rj, tj = skinning_transforms(self.template.skeleton, pose)
        Rv, tv = blended_transforms(self.template.skinning, Rj, tj)
        lj = self.template.skeleton.landmark_joints
        return {"Rv": Rv, "tv": tv, "Rl": Rj[lj], "tl": tj[lj]}

    def posed_vertices(self, params: CharacterParams, posing=None):
        posing = self.posing(params.pose) if posing is None else posing
        X = self.canonical_vertices(params)
        return np.einsum("nab,nb->na", posing["Rv"], X) + posing["tv"]

    def frozen_sets(self, V, terms):
        """Discrete sets evaluated at posed vertices ``V``."""
        frozen = {}
        w = self.weights
        need_sil = "sil" in terms and w.weight("sil") > 0
        need_dr = "dr" in terms and w.weight("dr") > 0
        if need_sil or need_dr:
            rasters = [rasterize(c, V, self.faces) for c in self.cameras]
            if need_sil:
                frozen["boundary"] = compute_boundary_sets(V, self.faces, self.cameras,
                                                           [v.mask for v in self.obs.views], rasters)
            if need_dr:
                frozen["rasters"] = rasters
        if "cf" in terms and w.weight("cf") > 0:
            frozen["corr"] = nearest_correspondences(V, self.obs.point_cloud)
        return frozen

    def vertex_terms(self, V, terms, frozen, lap_reference):
        """Term values and their gradients w.r.t. posed vertices."""
        values, grads = {}, {}
        w = self.weights
        views = self.obs.views
        for term in terms:
            if w.weight(term) == 0.0:
                continue
            if term == "sil":
                values[term], grads[term] = silhouette_loss(V, self.cameras, [v.distance for v in views],
                                                            frozen["boundary"],
                                                            signed=self.options.silhouette_signed)
            elif term == "dr":
                values[term], grads[term] = render_loss(V, self.faces, self.albedo, self.cameras,
                                                        self.lightings, [v.image for v in views],
                                                        frozen["rasters"])
            elif term == "cf":
                values[term], grads[term] = chamfer_loss(V, self.obs.point_cloud, frozen["corr"])
            elif term == "iso":
                values[term], grads[term] = isometry_energy(V, self.canonical, self.template.rigidity)
            elif term == "lap":
                values[term], grads[term] = laplacian_energy(V, lap_reference, self.lap_weights)
        return values, grads

    def marker_term(self, A, T, posing):
        views = self.obs.views
        Lx = self.markers_canonical(A, T)
        P = np.einsum("nab,nb->na", posing["Rl"], Lx) + posing["tl"]
        value, gP = landmark_loss(P, self.cameras, [v.keypoints for v in views],
                                  [v.confidences for v in views])
        gLx = np.einsum("nba,nb->na", posing["Rl"], gP)
        return value, gLx


# -- parameter packing ------------------------------------------------------------

class _Packing:
    def __init__(self, blocks, params: CharacterParams, free_rows):
        self.blocks = blocks
        self.base = params
        self.free_rows = free_rows
        self.dof = params.pose.theta.size

    def pack(self, params: CharacterParams) -> np.ndarray:
        parts = []
        if "pose" in self.blocks:
            parts.append(params.pose.to_vector())
        if "graph" in self.blocks:
            parts += [params.graph_A.ravel(), params.graph_T.ravel()]
        if "disp" in self.blocks:
            parts.append(params.displacements[self.free_rows].ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    def unpack(self, x) -> CharacterParams:
        p = self.base
        pose, A, T, D = p.pose, p.graph_A, p.graph_T, p.displacements
        o = 0
        if "pose" in self.blocks:
            n = self.dof + 6
            pose = Pose.from_vector(x[o:o + n], self.dof)
            o += n
        if "graph" in self.blocks:
            K = A.shape[0]
            A = x[o:o + 3 * K].reshape(K, 3)
            T = x[o + 3 * K:o + 6 * K].reshape(K, 3)
            o += 6 * K
        if "disp" in self.blocks:
            D = D.copy()
            n = 3 * len(self.free_rows)
            D[self.free_rows] = x[o:o + n].reshape(-1, 3)
            o += n
        return CharacterParams(pose, A, T, D)

    def split_norms(self, g) -> dict:
        out, o = {}, 0
        if "pose" in self.blocks:
            n = self.dof + 6
            out["pose"] = float(np.linalg.norm(g[o:o + n]))
            o += n
        if "graph" in self.blocks:
            n = self.base.graph_A.size * 2
            out["graph"] = float(np.linalg.norm(g[o:o + n]))
            o += n
        if "disp" in self.blocks:
            out["disp"] = float(np.linalg.norm(g[o:]))
        return out


def stage_functions(obj: FrameObjective, stage: Stage, params: CharacterParams):
    """Build ``(packing, evaluate, refresh)`` for one optimizing stage.

    ``refresh(x)`` recomputes the discrete sets; ``evaluate(x, frozen)`` returns
    per-term values and the gradient of the weighted total w.r.t. ``x``.
    """
    free_rows = np.flatnonzero(obj.mask)
    packing = _Packing(stage.blocks, params, free_rows)
    w = obj.weights
    terms = tuple(t for t in stage.terms if w.weight(t) > 0)
    views = obj.obs.views

    if "pose" in stage.blocks:
        Lx = obj.markers_canonical(params.graph_A, params.graph_T)
        skeleton = obj.template.skeleton

        def evaluate(x, frozen):
            p = packing.unpack(x)
            values = {}
            g = np.zeros_like(x)
            if "mk" in terms:
                values["mk"], gm = landmark_loss_pose(skeleton, p.pose, obj.cameras,
                                                      [v.keypoints for v in views],
                                                      [v.confidences for v in views], canonical=Lx)
                g += w.weight("mk") * gm
            if "jl" in terms:
                values["jl"], gj = joint_limit_loss(p.pose.theta, skeleton.limits)
                g[:packing.dof] += w.weight("jl") * gj
            return values, g

        return packing, evaluate, lambda x: {}

    posing = obj.posing(params.pose)
    Rv = posing["Rv"]
    if obj.options.laplacian_reference == "deformed":
        base = replace(params, displacements=np.zeros_like(params.displacements))
        lap_reference = obj.canonical.with_vertices(obj.posed_vertices(base, posing))
    else:
        lap_reference = obj.canonical

    def evaluate(x, frozen):
        p = packing.unpack(x)
        X = obj.canonical_vertices(p)
        V = np.einsum("nab,nb->na", Rv, X) + posing["tv"]
        values, grads = obj.vertex_terms(V, terms, frozen, lap_reference)
        gV = np.zeros_like(V)
        for term, gt in grads.items():
            gV += w.weight(term) * gt
        gX = np.einsum("nba,nb->na", Rv, gV)
        parts = []
        if "graph" in stage.blocks:
            gA, gT = embedded_deformation_vjp(obj.V0, obj.graph, p.graph_A, gX)
            if "mk" in terms:
                values["mk"], gL = obj.marker_term(p.graph_A, p.graph_T, posing)
                mA, mT = embedded_deformation_vjp(obj.template.skeleton.rest_landmarks, obj.graph,
                                                  p.graph_A, gL, influence=obj.marker_influence)
                gA = gA + w.weight("mk") * mA
                gT = gT + w.weight("mk") * mT
            if "arap" in terms:
                values["arap"], aA, aT = arap_energy(obj.graph, p.graph_A, p.graph_T)
                gA = gA + w.weight("arap") * aA
                gT = gT + w.weight("arap") * aT
            parts += [gA.ravel(), gT.ravel()]
        else:
            if "mk" in terms:
                values["mk"], _ = obj.marker_term(p.graph_A, p.graph_T, posing)
            if "arap" in terms:
                values["arap"] = arap_energy(obj.graph, p.graph_A, p.graph_T)[0]
        if "disp" in stage.blocks:
            parts.append(gX[free_rows].ravel())
        return values, np.concatenate(parts)

    def refresh(x):
        p = packing.unpack(x)
        V = np.einsum("nab,nb->na", Rv, obj.canonical_vertices(p)) + posing["tv"]
        return obj.frozen_sets(V, terms)

    return packing, evaluate, refresh


# -- optimizer ------------------------------------------------------------------

def _total(values, weights):
    return float(sum(weights.weight(k) * v for k, v in values.items()))


def _lbfgs_direction(g, memory):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(memory):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if memory:
        s, y, _ = memory[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(memory, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def _run_stage(stage: Stage, packing, evaluate, refresh, x0, options: FitOptions, weights):
    """Minimize one stage; returns the final vector and a :class:`StageResult`."""
    t0 = time.perf_counter()
    x = x0.copy()
    frozen = refresh(x)
    values, g = evaluate(x, frozen)
    E = _total(values, weights)
    reports = []

    def report(it, E, values, g, flags=None):
        r = EnergyReport.assemble(values, weights.weights, grad_norms=packing.split_norms(g),
                                  stage=stage.name, iteration=it, flags=flags or {})
        reports.append(r)
        return r

    def abort(msg, it, values, g):
        raise FitAborted(f"stage {stage.name!r}, iteration {it}: {msg}",
                         report(it, E, values, g, {"aborted": msg}))

    if not np.isfinite(E) or not np.all(np.isfinite(g)):
        abort("non-finite objective at start", 0, values, g)
    report(0, E, values, g)
    g0 = float(np.max(np.abs(g))) if g.size else 0.0
    memory = []
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    step = None
    steps = []
    reason = "max_iterations"
    converged = False
    it = 0
    for it in range(1, stage.max_iterations + 1):
        gmax = float(np.max(np.abs(g))) if g.size else 0.0
        if gmax <= stage.gtol * g0 or gmax == 0.0:
            reason, converged, it = "gtol", True, it - 1
            break
        if stage.stepper == "adam":
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            d = -stage.learning_rate * (m / (1 - 0.9**it)) / (np.sqrt(v / (1 - 0.999**it)) + 1e-12)
            alpha = 1.0
        else:
            d = _lbfgs_direction(g, memory) if stage.stepper == "lbfgs" else -g
            if g @ d >= 0:
                memory.clear()
                d = -g
            if stage.stepper == "lbfgs" and memory:
                alpha = 1.0
            else:
                alpha = step * 2.0 if step is not None else 1.0 / max(np.linalg.norm(g), 1e-300)
        slope = float(g @ d)
        # backtracking on the frozen objective
        while True:
            xn = x + alpha * d
            try:
                vn, gn = evaluate(xn, frozen)
            except ValueError:
                # trial left the valid domain (e.g. geometry behind a camera)
                vn, gn = None, None
            if vn is not None:
                En = _total(vn, weights)
                if np.isnan(En) or np.any(np.isnan(gn)):
                    abort("NaN in objective during line search", it, vn, gn)
                if En <= E + options.armijo_c * alpha * slope and np.isfinite(En):
                    break
            alpha *= options.shrink
            if alpha * np.max(np.abs(d)) < 1e-15 * max(1.0, np.max(np.abs(x))):
                alpha = 0.0
                break
        if alpha == 0.0:
            reason, converged, it = "line_search_stalled", True, it - 1
            break
        if stage.stepper != "adam":
            step = alpha
        steps.append((E, En))
        s = xn - x
        x = xn
        frozen = refresh(x)
        values_new, g_new = evaluate(x, frozen)
        if not np.all(np.isfinite(g_new)) or not np.isfinite(_total(values_new, weights)):
            abort("non-finite objective after refresh", it, values_new, g_new)
        y = g_new - g
        if stage.stepper == "lbfgs":
            sy = float(s @ y)
            if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
                memory.append((s, y, 1.0 / sy))
                if len(memory) > options.lbfgs_memory:
                    memory.pop(0)
        decrease = E - En
        values, g = values_new, g_new
        E_prev, E = E, _total(values, weights)
        report(it, E, values, g)
        if decrease <= stage.ftol * max(1.0, abs(E_prev)):
            reason, converged = "ftol", True
            break
    result = StageResult(stage.name, reports, converged, reason, it, time.perf_counter() - t0, steps)
    return x, result


# -- initialization ----------------------------------------------------------------

def triangulate(cameras, keypoints, confidences) -> np.ndarray:
    """Linear (DLT) triangulation per marker; NaN where fewer than two views see it."""
    L = len(keypoints[0])
    out = np.full((L, 3), np.nan)
    for j in range(L):
        rows = []
        for cam, kp, beta in zip(cameras, keypoints, confidences):
            if beta[j] <= 0:
                continue
            K = np.array([[cam.fx, 0, cam.cx], [0, cam.fy, cam.cy], [0, 0, 1.0]])
            P = K @ np.hstack([cam.R, cam.t[:, None]])
            u, v = kp[j]
            rows += [beta[j] * (u * P[2] - P[0]), beta[j] * (v * P[2] - P[1])]
        if len(rows) >= 4:
            _, _, Vt = np.linalg.svd(np.array(rows))
            h = Vt[-1]
            if abs(h[3]) > 1e-12:
                out[j] = h[:3] / h[3]
    return out


def initial_params(template: Template, graph: EmbeddedGraph, observation: FrameObservation) -> CharacterParams:
    """Zero pose and deformation; translation from the keypoints when available."""
    skel = template.skeleton
    params = CharacterParams.zeros(skel.dof_count, graph.n_nodes, template.n_vertices)
    if not observation.has("keypoints"):
        return params
    views = observation.views
    rest = skel.rest_landmarks
    if len(views) >= 2:
        pts = triangulate(observation.cameras, [v.keypoints for v in views], [v.confidences for v in views])
        ok = np.all(np.isfinite(pts), axis=1)
        if not np.any(ok):
            return params
        t = pts[ok].mean(axis=0) - rest[ok].mean(axis=0)
    else:
        view = views[0]
        cam = view.camera
        use = view.confidences > 0
        if use.sum() < 2:
            return params
        kp = view.keypoints[use]
        spread2d = np.sqrt(np.mean(np.sum((kp - kp.mean(0)) ** 2, axis=1)))
        # spread across the image plane only; depth extent does not show in the keypoints
        lateral = (rest[use] - rest[use].mean(0)) @ cam.R[:2].T
        spread3d = np.sqrt(np.mean(np.sum(lateral**2, axis=1)))
        depth = cam.fx * spread3d / max(spread2d, 1e-9)
        c = kp.mean(axis=0)
        ray = np.array([(c[0] - cam.cx) / cam.fx, (c[1] - cam.cy) / cam.fy, 1.0])
        center = cam.R.T @ (ray * depth - cam.t)
        t = center - rest[use].mean(axis=0)
    return replace(params, pose=Pose(params.pose.theta, params.pose.alpha, t))


# -- drivers ---------------------------------------------------------------------

def _check_stages(obj: FrameObjective, schedule: StageSchedule, lightings):
    # an earlier lighting stage satisfies the render term
    lit = lightings is not None
    for stage in schedule.stages:
        obj.check(stage, lit)
        lit = lit or "lighting" in stage.blocks


def validate_frame(template: Template, graph: EmbeddedGraph, observation: FrameObservation,
                   schedule: StageSchedule | None = None, options: FitOptions | None = None, lightings=None) -> None:
    """Raise ``ConfigError`` if ``observation`` lacks data an enabled term needs."""
    schedule = StageSchedule.default() if schedule is None else schedule
    options = FitOptions() if options is None else options
    _check_stages(FrameObjective(template, graph, observation, options, lightings), schedule, lightings)


def fit_frame(template: Template, graph: EmbeddedGraph, observation: FrameObservation,
              schedule: StageSchedule | None = None, init: CharacterParams | None = None,
              options: FitOptions | None = None, lightings=None) -> FitResult:
    """Run every stage of ``schedule`` on one frame."""
    schedule = StageSchedule.default() if schedule is None else schedule
    options = FitOptions() if options is None else options
    obj = FrameObjective(template, graph, observation, options, lightings)
    _check_stages(obj, schedule, lightings)

    params = initial_params(template, graph, observation) if init is None else init
    results = []
    for stage in schedule.stages:
        t0 = time.perf_counter()
        if "lighting" in stage.blocks:
            V = obj.posed_vertices(params)
            sols = [solve_lighting(cam, [V], [view.image], obj.faces, obj.albedo,
                                   damping=options.lighting_damping)
                    for cam, view in zip(obj.cameras, observation.views)]
            obj.lightings = [s.lighting for s in sols]
            flags = {"rank_deficient": [s.rank_deficient for s in sols],
                     "residual": [s.residual for s in sols],
                     "baseline_residual": [s.baseline_residual for s in sols]}
            rep = EnergyReport({}, {}, float(sum(s.residual for s in sols)), stage=stage.name, flags=flags)
            results.append(StageResult(stage.name, [rep], True, "closed_form", 1, time.perf_counter() - t0))
            continue
        packing, evaluate, refresh = stage_functions(obj, stage, params)
        x0 = packing.pack(params)
        x, res = _run_stage(stage, packing, evaluate, refresh, x0, options, options.weights)
        params = packing.unpack(x)
        results.append(res)
    V = obj.posed_vertices(params)
    return FitResult(params, results, obj.lightings, V)


def fit_sequence(template: Template, graph: EmbeddedGraph, observations, schedule: StageSchedule | None = None,
                 options: FitOptions | None = None, init: CharacterParams | None = None,
                 warm_start: bool = True, lightings=None) -> list:
    """Fit frames in order, starting each from the previous frame's result."""
    observations = list(observations)
    if not observations:
        raise ConfigError("fit_sequence needs at least one frame")
    results = []
    previous = init
    for obs in observations:
        start = previous if warm_start else init
        res = fit_frame(template, graph, obs, schedule, start, options, lightings)
        results.append(res)
        previous = res.params
    return results


def evaluate_metrics(V_fit, V_gt):
    """Mean chamfer (squared distances, averaged per direction) and symmetric Hausdorff."""
    A = np.asarray(V_fit, dtype=float).reshape(-1, 3)
    B = np.asarray(V_gt, dtype=float).reshape(-1, 3)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("metrics need two nonempty point sets")
    da, _ = cKDTree(B).query(A)
    db, _ = cKDTree(A).query(B)
    chamfer = float(np.mean(da * da) + np.mean(db * db))
    hausdorff = float(max(da.max(), db.max()))
    return chamfer, hausdorff
