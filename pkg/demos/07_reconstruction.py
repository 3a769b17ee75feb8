"""Measurement-guided 3D face reconstruction.

Shape coefficients are optimized so the reconstructed mesh's measurements
match the targets, with a Mahalanobis ridge keeping the face plausible.
Damped Gauss-Newton converges in a handful of iterations because the
measurement gradients are analytic.
"""

import numpy as np

from voiceface.geometry import compute_all_ams
from voiceface.reconstruction import ReconstructionProblem, fit, per_vertex_error
from voiceface.shapespace import build_basis
from voiceface.synthdata import SynthConfig, generate

ds = generate(SynthConfig(n_speakers=40, seed=21))
basis = build_basis([ds.meshes[s] for s in ds.split_speakers["train"]], d=24)

# take a held-out face and pretend its measurements were predicted from voice
speaker = ds.split_speakers["eval"][0]
truth_mesh = ds.meshes[speaker]
targets = ds.raw_ams[speaker]

weights = np.zeros(len(ds.am_ids))
for am_id in ds.manifest.planted:  # only the predictable measurements guide the fit
    weights[ds.am_ids.index(am_id)] = 1.0

problem = ReconstructionProblem(basis, ds.landmarks, ds.am_defs, targets, weights, lam=1e-3)
result = fit(problem)
print(f"converged: {result.converged} after {result.n_iterations} iterations")
print(f"objective: {result.objective_trace[0]:.4f} -> {result.objective_trace[-1]:.6f}")

fitted = compute_all_ams(result.mesh, ds.landmarks, ds.am_defs).values
print("\nguided measurements (target vs fitted):")
for am_id in ds.manifest.planted:
    k = ds.am_ids.index(am_id)
    print(f"  {am_id:12s} {targets[k]:8.3f} vs {fitted[k]:8.3f}")

errors = per_vertex_error(result.mesh, truth_mesh)
baseline = per_vertex_error(
    type(truth_mesh)(basis.mean_shape.reshape(-1, 3), truth_mesh.topology_id), truth_mesh
)
print(f"\nper-vertex error vs ground truth: mean {errors.mean():.3f} mm "
      f"(mean face baseline {baseline.mean():.3f} mm)")
print(f"worst vertex: {errors.max():.3f} mm")
