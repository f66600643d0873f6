"""Fit a linear face model into a template and stitch it in.

The template's face region is planted as a scaled, rotated sample of a
linear shape/expression model. Registration has to find the similarity
transform and the coefficients from eight landmark pairs plus the surface,
then the neutral face replaces the region and inherits skinning.
"""
import numpy as np

from perfcap.parametric import StitchPart, register_face, stitch_models
from perfcap.synthetic import face_template

fx = face_template()
print(f"template {fx.template.n_vertices} vertices; face model {fx.model.n_vertices} vertices, "
      f"{len(fx.w_S)} shape and {len(fx.w_E)} expression coefficients")

# landmark indices are relative to the face region handed to the registration
pairs = type(fx.pairs)(fx.pairs.template - fx.face_vertices[0], fx.pairs.model)
reg = register_face(fx.model, fx.face_points, pairs)

print(f"scale {reg.affine.scale:.6f} (planted {fx.affine.scale:.6f})")
print(f"translation error {np.abs(reg.affine.t - fx.affine.t).max():.1e} m")
w, w_true = np.r_[reg.w_S, reg.w_E], np.r_[fx.w_S, fx.w_E]
print(f"coefficient relative error {np.linalg.norm(w - w_true) / np.linalg.norm(w_true):.1e}")
for name, value in reg.residuals.items():
    print(f"  residual {name}: {value:.3e}")

# the expression-free face goes into the template; its vertices get skinning from nearby body vertices
part = StitchPart("face", reg.neutral_in_template(fx.model), fx.model.submesh(fx.model.kept), fx.remove)
stitched = stitch_models(fx.template, [part], max_distance=0.1)
rows = np.asarray(stitched.template.skinning.weights.sum(axis=1)).ravel()
print(f"stitched template: {stitched.template.n_vertices} vertices, "
      f"skinning rows sum to 1 within {np.abs(rows - 1).max():.1e}")
