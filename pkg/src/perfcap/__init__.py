"""Template-based human performance capture from multi-view images.

A person-specific template is posed by a skeleton (dual quaternion
skinning), warped by an embedded deformation graph and refined with
per-vertex displacements. Parameters are fitted per frame, in stages,
against silhouettes, keypoints, images and point clouds.
"""
from .deformation import CharacterParams, EmbeddedGraph, apply_character, build_graph
from .errors import (
    ConfigError,
    DegenerateGeometryError,
    FitAborted,
    FormatError,
    PerfcapError,
    SkinningDegeneracyError,
)
from .fitting import FitOptions, FitResult, Stage, StageSchedule, evaluate_metrics, fit_frame, fit_sequence
from .geometry import Mesh, Pose, RigidityWeights, Skeleton, SkinningWeights
from .observation import FrameObservation, ViewObservation
from .render import Camera, SHLighting
from .template import Template

__version__ = "0.1.0"

__all__ = [
    "CharacterParams",
    "EmbeddedGraph",
    "apply_character",
    "build_graph",
    "ConfigError",
    "DegenerateGeometryError",
    "FitAborted",
    "FormatError",
    "PerfcapError",
    "SkinningDegeneracyError",
    "FitOptions",
    "FitResult",
    "Stage",
    "StageSchedule",
    "evaluate_metrics",
    "fit_frame",
    "fit_sequence",
    "Mesh",
    "Pose",
    "RigidityWeights",
    "Skeleton",
    "SkinningWeights",
    "FrameObservation",
    "ViewObservation",
    "Camera",
    "SHLighting",
    "Template",
]
