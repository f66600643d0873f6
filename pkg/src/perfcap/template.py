"""The person-specific template: mesh, rig, skinning and material rigidity."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Mesh, Pose, RigidityWeights, Skeleton, SkinningWeights, unpose_to_canonical


@dataclass(frozen=True, eq=False)
class Template:
    """Rigged template. ``mesh.vertices`` are stored in the rigging pose."""

    mesh: Mesh
    skeleton: Skeleton
    skinning: SkinningWeights
    rigidity: RigidityWeights
    rigging_pose: Pose | None = None
    materials: tuple | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.mesh.n_vertices
        if self.skinning.shape != (n, self.skeleton.n_joints):
            raise ValueError(f"skinning weights {self.skinning.shape} do not match "
                             f"({n}, {self.skeleton.n_joints})")
        if len(self.rigidity.r) != n:
            raise ValueError("rigidity must have one value per vertex")
        if self.rigging_pose is None:
            object.__setattr__(self, "rigging_pose", Pose.zero(self.skeleton.dof_count))
        if self.materials is not None and len(self.materials) != n:
            raise ValueError("one material label per vertex required")

    @property
    def n_vertices(self) -> int:
        return self.mesh.n_vertices

    def is_canonical(self) -> bool:
        p = self.rigging_pose
        return not (np.any(p.theta) or np.any(p.alpha) or np.any(p.t))

    def canonical_mesh(self) -> Mesh:
        """Template mesh unposed from its rigging pose to the all-zero pose."""
        if self.is_canonical():
            return self.mesh
        V = unpose_to_canonical(self.mesh.vertices, self.skeleton, self.skinning, self.rigging_pose)
        return self.mesh.with_vertices(V)

    def canonical(self) -> "Template":
        return replace(self, mesh=self.canonical_mesh(),
                       rigging_pose=Pose.zero(self.skeleton.dof_count))
