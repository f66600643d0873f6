"""Command-line entry point: ``perfcap generate | fit | register | eval``.

Configuration is a JSON file merged over built-in defaults. Every key can be
overridden from the environment as ``PERFCAP_<KEY>`` with nested keys joined
by a double underscore, e.g. ``PERFCAP_WEIGHTS__CF=1e6`` or
``PERFCAP_PATHS__DATA=/tmp/run``. Values are parsed as JSON when possible.
Command-line flags override both.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io as _stdio
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import io
from .deformation import DEFAULT_EPSILON_RIGID, build_graph
from .energies import TERMS, EnergyTermConfig
from .errors import ConfigError, FormatError, PerfcapError
from .fitting import FitOptions, StageSchedule, evaluate_metrics, fit_frame, validate_frame
from .observation import FrameObservation, ViewObservation
from .parametric import (
    LandmarkPairs,
    StitchPart,
    extract_hand_canonical,
    fit_affine,
    register_face,
    stitch_models,
)
from .render import mask_boundary
from .synthetic import SyntheticScenario, generate

ENV_PREFIX = "PERFCAP_"

DEFAULT_CONFIG = {
    "seed": 0,
    "threads": 1,
    "fail_fast": False,
    "frames": None,
    "warm_start": True,
    "paths": {"data": "data", "output": "output"},
    "scenario": {f.name: f.default for f in fields(SyntheticScenario)},
    "schedule": {"max_iterations": 500, "stepper": "gd", "stages": None},
    "weights": {name: 1.0 for name in TERMS},
    "options": {
        "epsilon_rigid": DEFAULT_EPSILON_RIGID,
        "lighting_damping": 1e-6,
        "laplacian_reference": "deformed",
        "silhouette_signed": False,
    },
    "thresholds": {"chamfer": None, "hausdorff": None},
    "register": {
        "template": None,
        "face_model": None,
        "landmarks": None,
        "output": None,
        "prior": 1e-3,
        "landmark_weight": 1.0,
        "smoothness": 1e-4,
        "max_distance": 0.05,
        "bridge": True,
        "hands": None,
    },
}


# -- configuration -----------------------------------------------------------------

def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in out:
            raise ConfigError(f"unknown config key {where + key!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _parse_env(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_env(config: dict, environ, prefix: str = ENV_PREFIX) -> dict:
    out = copy.deepcopy(config)
    for key, value in out.items():
        name = prefix + key.upper()
        if isinstance(value, dict):
            out[key] = _apply_env(value, environ, name + "__")
        if name in environ:
            out[key] = _parse_env(environ[name])
    return out


def load_config(path=None, environ=None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON file, then ``PERFCAP_*`` variables, then ``overrides``."""
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        config = _merge(config, io.read_json(path))
    config = _apply_env(config, os.environ if environ is None else environ)
    if overrides:
        config = _merge(config, overrides)
    return config


def parse_frames(text: str | None):
    """``"a..b"`` (inclusive) or a single index; ``None`` selects every frame."""
    if text is None:
        return None
    text = str(text)
    if ".." in text:
        a, b = text.split("..", 1)
        first, last = int(a), int(b)
    else:
        first = last = int(text)
    if first < 0 or last < first:
        raise ConfigError(f"bad frame range {text!r}")
    return range(first, last + 1)


def fit_options(config: dict) -> FitOptions:
    weights = EnergyTermConfig(weights={k: float(v) for k, v in config["weights"].items()})
    return FitOptions(weights=weights, **config["options"])


def schedule_from_config(config: dict) -> StageSchedule:
    sc = config["schedule"]
    if sc.get("stages"):
        return StageSchedule.from_dict({"stages": sc["stages"]})
    return StageSchedule.default(max_iterations=int(sc["max_iterations"]), stepper=sc["stepper"])


def scenario_from_config(config: dict) -> SyntheticScenario:
    sc = dict(config["scenario"])
    for key in ("pose", "root_rotation", "translation"):
        sc[key] = tuple(sc[key])
    sc["seed"] = int(config["seed"])
    return SyntheticScenario(**sc)


# -- dataset layout ----------------------------------------------------------------

def _frame_name(index: int) -> str:
    return f"{index:06d}"


def save_observation(directory, observation: FrameObservation) -> None:
    directory = Path(directory)
    for c, view in enumerate(observation.views):
        io.write_mask(directory / f"view{c:02d}_mask.png", view.mask)
        io.write_distance(directory / f"view{c:02d}_dt.bin", view.distance)
        io.write_image(directory / f"view{c:02d}_image.png", view.image)
    io.write_keypoints(directory / "keypoints.json", [v.keypoints for v in observation.views],
                       [v.confidences for v in observation.views])
    if observation.point_cloud is not None:
        io.write_points(directory / "cloud.ply", observation.point_cloud)


def load_observation(directory, cameras) -> FrameObservation:
    directory = Path(directory)
    keypoints = confidences = None
    if (directory / "keypoints.json").exists():
        keypoints, confidences = io.read_keypoints(directory / "keypoints.json")
    views = []
    for c, cam in enumerate(cameras):
        def path(kind):
            p = directory / f"view{c:02d}_{kind}"
            return p if p.exists() else None
        mask = io.read_mask(path("mask.png")) if path("mask.png") else None
        dt = io.read_distance(path("dt.bin")) if path("dt.bin") else None
        image = io.read_image(path("image.png")) if path("image.png") else None
        views.append(ViewObservation(cam, mask, dt, image,
                                     None if keypoints is None else keypoints[c],
                                     None if confidences is None else confidences[c]))
    cloud = io.read_points(directory / "cloud.ply") if (directory / "cloud.ply").exists() else None
    return FrameObservation(views, cloud)


def _validate_written(directory, observation: FrameObservation, cameras) -> None:
    """Reload a written frame and require every artifact to match bit for bit."""
    back = load_observation(directory, cameras)
    for c, (a, b) in enumerate(zip(observation.views, back.views)):
        if not np.array_equal(a.mask, b.mask) or not np.array_equal(a.image, b.image):
            raise FormatError(f"{directory}: view {c} mask or image did not round-trip")
        if not np.array_equal(np.asarray(a.distance, dtype=np.float32), np.asarray(b.distance, dtype=np.float32)):
            raise FormatError(f"{directory}: view {c} distance map did not round-trip")
        if np.any(b.distance[mask_boundary(a.mask)] != 0):
            raise FormatError(f"{directory}: view {c} distance map is nonzero on the mask boundary")
        if not np.array_equal(a.keypoints, b.keypoints):
            raise FormatError(f"{directory}: view {c} keypoints did not round-trip")
    if observation.point_cloud is not None and not np.array_equal(observation.point_cloud, back.point_cloud):
        raise FormatError(f"{directory}: point cloud did not round-trip")


def cmd_generate(config: dict) -> Path:
    """Write a synthetic dataset (template, graph, cameras, frames, ground truth)."""
    scenario = scenario_from_config(config)
    out = Path(config["paths"]["data"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    ds = generate(scenario)
    selected = parse_frames(config["frames"])
    frames = range(scenario.n_frames) if selected is None else [f for f in selected if f < scenario.n_frames]
    # images on disk are 16-bit PNGs; keep the in-memory copy identical to what reloads
    for obs in ds.frames:
        for view in obs.views:
            view.image = io.quantize_image(view.image)
    scenario_rec = asdict(scenario)
    io.write_json(out / "scenario.json", scenario_rec)
    io.save_template(out / "template", ds.template)
    io.save_graph(out / "graph.json", ds.graph)
    io.save_cameras(out / "cameras.json", ds.cameras, ds.lighting)
    for f in frames:
        name = _frame_name(f)
        save_observation(out / "frames" / name, ds.frames[f])
        _validate_written(out / "frames" / name, ds.frames[f], ds.cameras)
        io.write_json(out / "truth" / f"{name}.json", io.params_record(ds.truth[f], include_displacements=True))
        io.write_obj(out / "truth" / f"{name}.obj", ds.truth_vertices[f], ds.template.mesh.faces)
    return out


# -- fitting -------------------------------------------------------------------------

def _frame_indices(data: Path, selected) -> list:
    frames_dir = data / "frames"
    if not frames_dir.is_dir():
        raise ConfigError(f"dataset {data} has no frames directory")
    available = sorted(int(p.name) for p in frames_dir.iterdir() if p.is_dir() and p.name.isdigit())
    if selected is None:
        return available
    missing = [f for f in selected if f not in available]
    if missing:
        raise ConfigError(f"frames {missing} are not in {frames_dir}")
    return list(selected)


def _load_dataset(data: Path):
    template = io.load_template(data / "template")
    cameras, _ = io.load_cameras(data / "cameras.json")
    return template, cameras, data / "graph.json"


def _fit_one(args):
    template, graph, observation, schedule, options, init, out, index = args
    result = fit_frame(template, graph, observation, schedule, init, options)
    _write_frame_result(out, index, template, result)
    return index, result


def _write_frame_result(out: Path, index: int, template, result) -> None:
    name = _frame_name(index)
    frames = out / "frames"
    io.write_obj(frames / f"{name}.obj", result.vertices, template.mesh.faces)
    io.atomic_write(frames / f"{name}.json", io.params_json(result.params))
    lines = []
    for stage in result.stages:
        for rep in stage.reports:
            rec = json.loads(rep.to_json())
            rec["frame"] = index
            lines.append(json.dumps(rec, sort_keys=True))
    io.atomic_write(frames / f"{name}.energies.jsonl", "\n".join(lines) + "\n")
    summary = {"frame": index, "stages": [
        {"name": s.name, "converged": s.converged, "reason": s.reason, "iterations": s.iterations,
         "seconds": s.seconds} for s in result.stages]}
    io.write_json(frames / f"{name}.fit.json", summary)


def cmd_fit(config: dict) -> dict:
    """Fit every selected frame; returns ``{"frames": [...], "failures": {...}, "metrics": ...}``."""
    data = Path(config["paths"]["data"])
    out = Path(config["paths"]["output"])
    schedule = schedule_from_config(config)
    options = fit_options(config)
    template, cameras, graph_path = _load_dataset(data)
    if graph_path.exists():
        graph = io.load_graph(graph_path)
    else:
        graph = build_graph(template.canonical_mesh(), template.rigidity, int(config["scenario"]["graph_nodes"]))
    indices = _frame_indices(data, parse_frames(config["frames"]))
    observations = {f: load_observation(data / "frames" / _frame_name(f), cameras) for f in indices}
    # every frame must be complete before any fitting starts
    for f, obs in observations.items():
        try:
            validate_frame(template, graph, obs, schedule, options)
        except ConfigError as exc:
            raise ConfigError(f"frame {f}: {exc}") from exc
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "config.json", config)

    failures, done = {}, []
    threads = max(1, int(config["threads"]))
    if threads > 1 and not config["warm_start"]:
        jobs = [(template, graph, observations[f], schedule, options, None, out, f) for f in indices]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = {f: pool.submit(_fit_one, job) for f, job in zip(indices, jobs)}
            for f, fut in futures.items():
                try:
                    fut.result()
                    done.append(f)
                except PerfcapError as exc:
                    failures[f] = f"{type(exc).__name__}: {exc}"
                    if config["fail_fast"]:
                        raise
    else:
        init = None
        for f in indices:
            try:
                _, result = _fit_one((template, graph, observations[f], schedule, options, init, out, f))
                done.append(f)
                if config["warm_start"]:
                    init = result.params
            except PerfcapError as exc:
                failures[f] = f"{type(exc).__name__}: {exc}"
                if config["fail_fast"]:
                    raise
    io.write_json(out / "failures.json", {str(k): v for k, v in sorted(failures.items())})
    metrics = None
    if (data / "truth").is_dir() and done:
        metrics = evaluate_dirs(out / "frames", data / "truth", frames=sorted(done))
        _write_metrics(out, metrics)
    return {"frames": sorted(done), "failures": failures, "metrics": metrics}


# -- evaluation ------------------------------------------------------------------------

def _mesh_files(directory: Path) -> dict:
    directory = Path(directory)
    if (directory / "frames").is_dir():
        directory = directory / "frames"
    return {int(p.stem): p for p in sorted(directory.glob("*.obj")) if p.stem.isdigit()}


def evaluate_dirs(pred_dir, gt_dir, frames=None) -> dict:
    """Per-frame and mean chamfer / Hausdorff between matching OBJ files."""
    pred, gt = _mesh_files(pred_dir), _mesh_files(gt_dir)
    if frames is None:
        if sorted(pred) != sorted(gt):
            raise ConfigError(f"frame mismatch: prediction has {sorted(pred)}, ground truth has {sorted(gt)}")
        frames = sorted(pred)
    if not frames:
        raise ConfigError("no frames to evaluate")
    rows = []
    for f in frames:
        if f not in pred or f not in gt:
            raise ConfigError(f"frame {f} missing from prediction or ground truth")
        chamfer, hausdorff = evaluate_metrics(io.read_mesh(pred[f])[0], io.read_mesh(gt[f])[0])
        rows.append({"frame": f, "chamfer": chamfer, "hausdorff": hausdorff})
    return {"frames": rows,
            "mean": {"chamfer": float(np.mean([r["chamfer"] for r in rows])),
                     "hausdorff": float(np.mean([r["hausdorff"] for r in rows]))}}


def metrics_table(metrics: dict) -> str:
    lines = [f"{'frame':>8}  {'chamfer':>14}  {'hausdorff':>14}"]
    for r in metrics["frames"]:
        lines.append(f"{r['frame']:>8}  {r['chamfer']:>14.6e}  {r['hausdorff']:>14.6e}")
    m = metrics["mean"]
    lines.append(f"{'mean':>8}  {m['chamfer']:>14.6e}  {m['hausdorff']:>14.6e}")
    return "\n".join(lines)


def _write_metrics(out: Path, metrics: dict) -> None:
    io.write_json(out / "metrics.json", metrics)
    buf = _stdio.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["frame", "chamfer", "hausdorff"])
    for r in metrics["frames"]:
        writer.writerow([r["frame"], repr(r["chamfer"]), repr(r["hausdorff"])])
    writer.writerow(["mean", repr(metrics["mean"]["chamfer"]), repr(metrics["mean"]["hausdorff"])])
    io.atomic_write(out / "metrics.csv", buf.getvalue())


def thresholds_met(metrics: dict, thresholds: dict) -> bool:
    for key in ("chamfer", "hausdorff"):
        limit = thresholds.get(key)
        if limit is not None and not metrics["mean"][key] <= float(limit):
            return False
    return True


def cmd_eval(config: dict, pred_dir, gt_dir, out_dir=None) -> tuple:
    """Returns ``(metrics, ok)`` where ``ok`` means every configured threshold holds."""
    metrics = evaluate_dirs(pred_dir, gt_dir)
    _write_metrics(Path(out_dir if out_dir is not None else pred_dir), metrics)
    return metrics, thresholds_met(metrics, config["thresholds"])


# -- registration ----------------------------------------------------------------------

def cmd_register(config: dict) -> dict:
    """Register a face model (and optional hands) to a template and stitch them in.

    ``register.landmarks`` is a JSON file ``{"template": [8 vertex ids],
    "model": [8 vertex ids], "face_region": [template vertex ids]}``. Hands
    (``register.hands``) map to ``{"model": path, "sides": [{"template": [...],
    "model": [...], "region": [...]}, ...]}`` with left first.
    """
    rc = config["register"]
    for key in ("template", "face_model", "landmarks", "output"):
        if not rc.get(key):
            raise ConfigError(f"register.{key} is required")
    template = io.load_template(rc["template"])
    model = io.read_model(rc["face_model"])
    marks = io.read_json(rc["landmarks"])
    region = np.asarray(marks["face_region"], dtype=np.int64)
    canon = template.canonical_mesh().vertices
    target = canon[region]
    template_landmarks = canon[np.asarray(marks["template"], dtype=np.int64)]
    pairs = LandmarkPairs(np.arange(len(marks["model"])), np.asarray(marks["model"], dtype=np.int64))
    reg = register_face(model, target, pairs, template_landmarks, prior=float(rc["prior"]),
                        landmark_weight=float(rc["landmark_weight"]), smoothness=float(rc["smoothness"]))
    remove = np.zeros(template.n_vertices, dtype=bool)
    remove[region] = True
    parts = [StitchPart("face", reg.neutral_in_template(model), model.submesh(model.kept), remove)]
    report = {"face": {"residuals": reg.residuals, "affine": reg.affine.to_dict(),
                       "w_S": reg.w_S.tolist(), "w_E": reg.w_E.tolist()}}
    if rc.get("hands"):
        hands = rc["hands"]
        hand_model = io.read_model(hands["model"])
        canonical_hands = extract_hand_canonical(hand_model)
        for side, (spec, (ids, pts, faces)) in enumerate(zip(hands["sides"], canonical_hands)):
            local = np.full(hand_model.n_vertices, -1)
            local[ids] = np.arange(len(ids))
            model_ids = local[np.asarray(spec["model"], dtype=np.int64)]
            if np.any(model_ids < 0):
                raise ConfigError(f"hand side {side}: landmark is not a hand vertex")
            affine, residual = fit_affine(None, canon[np.asarray(spec["template"], dtype=np.int64)], pts[model_ids])
            hand_remove = np.zeros(template.n_vertices, dtype=bool)
            hand_remove[np.asarray(spec["region"], dtype=np.int64)] = True
            parts.append(StitchPart(f"hand{side}", affine.apply(pts), faces, hand_remove))
            report[f"hand{side}"] = {"residual": residual, "affine": affine.to_dict()}
    stitched = stitch_models(template, parts, bridge=bool(rc["bridge"]), max_distance=float(rc["max_distance"]))
    out = Path(rc["output"])
    io.save_template(out, stitched.template)
    report["bridged"] = stitched.bridged
    report["vertices"] = stitched.template.n_vertices
    io.write_json(out.with_name(out.stem + "_registration.json"), report)
    return report


# -- entry point -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="perfcap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--frames", help="frame range a..b (inclusive)")
        p.add_argument("--threads", type=int, help="frame worker processes")
        p.add_argument("--fail-fast", action="store_true", default=None, help="stop at the first failed frame")
        return p

    g = common(sub.add_parser("generate", help="write a synthetic dataset"))
    g.add_argument("--out", help="dataset directory (paths.data)")
    f = common(sub.add_parser("fit", help="fit frames of a dataset"))
    f.add_argument("--data", help="dataset directory (paths.data)")
    f.add_argument("--out", help="results directory (paths.output)")
    r = common(sub.add_parser("register", help="register and stitch face/hand models"))
    r.add_argument("--out", help="stitched template path (register.output)")
    e = common(sub.add_parser("eval", help="compare predicted and ground-truth meshes"))
    e.add_argument("pred", help="directory of predicted OBJ files")
    e.add_argument("gt", help="directory of ground-truth OBJ files")
    e.add_argument("--out", help="where to write metrics (defaults to pred)")
    return parser


def _overrides(args) -> dict:
    o = {}
    if args.seed is not None:
        o["seed"] = args.seed
    if args.frames is not None:
        o["frames"] = args.frames
    if args.threads is not None:
        o["threads"] = args.threads
    if args.fail_fast:
        o["fail_fast"] = True
    paths = {}
    if getattr(args, "data", None):
        paths["data"] = args.data
    if args.command == "generate" and args.out:
        paths["data"] = args.out
    if args.command == "fit" and args.out:
        paths["output"] = args.out
    if paths:
        o["paths"] = paths
    if args.command == "register" and args.out:
        o["register"] = {"output": args.out}
    return o


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, overrides=_overrides(args))
        if args.command == "generate":
            out = cmd_generate(config)
            print(f"wrote dataset to {out}")
            return 0
        if args.command == "fit":
            t0 = time.perf_counter()
            res = cmd_fit(config)
            print(f"fitted {len(res['frames'])} frame(s) in {time.perf_counter() - t0:.1f} s")
            for f, msg in sorted(res["failures"].items()):
                print(f"frame {f} failed: {msg}", file=sys.stderr)
            if res["metrics"] is not None:
                print(metrics_table(res["metrics"]))
            return 1 if res["failures"] else 0
        if args.command == "register":
            report = cmd_register(config)
            print(json.dumps({"face": report["face"]["residuals"], "vertices": report["vertices"]}, indent=1))
            return 0
        metrics, ok = cmd_eval(config, args.pred, args.gt, args.out)
        print(metrics_table(metrics))
        return 0 if ok else 1
    except (PerfcapError, OSError, KeyError) as exc:
        print(f"perfcap {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
