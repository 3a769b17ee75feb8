"""Voice-to-measurement regression with learned uncertainty.

The estimator maps mel segments to a 64-dim voice code and, per measurement,
to a mean and a strictly positive variance.  Training minimizes
(mean - target)^2 / var + ln(var), whose optimum in var is the squared error
itself, so small predicted variance certifies small expected error.
Segment predictions of one recording fuse by inverse variance, and the fused
variance is rescaled by the segment count to undo length bias.
"""

import numpy as np

from voiceface.estimator import TrainingConfig, aggregate, predict_split, train
from voiceface.synthdata import SynthConfig, generate

ds = generate(SynthConfig(n_speakers=120, seed=3))
est = ds.estimator_dataset()
print(f"planted measurements: {ds.manifest.planted}")

config = TrainingConfig(iterations=150, batch_size=16, segment_frames=(24, 32),
                        warmup_iterations=30, eval_every=50, seed=0)
result = train(est, config)
print(f"best validation error {result.best_v1_error:.3f} at iteration {result.selected_iteration}")

v2 = est.split("v2")
truth = est.target_matrix(v2)
preds, calibrated = predict_split(result.model, v2)
mse = ((preds - truth) ** 2).mean(axis=0)
chance = (truth**2).mean(axis=0)  # targets are normalized, chance predicts 0

print("\nMSE / chance on the held-out v2 split:")
for am_id in ds.manifest.planted:
    k = est.am_ids.index(am_id)
    print(f"  {am_id:12s} planted    {mse[k] / chance[k]:.3f}")
for am_id in ("crown_angle", "ear_aspect_l"):
    k = est.am_ids.index(am_id)
    print(f"  {am_id:12s} unplanted  {mse[k] / chance[k]:.3f}")

# inverse-variance fusion: confident segments dominate; duplicating all
# segments must not change the calibrated uncertainty
means = np.array([[1.0], [3.0]])
variances = np.array([[1.0], [3.0]])
agg = aggregate(means, variances)
print(f"\nfuse means {{1, 3}} with variances {{1, 3}}: "
      f"mean {agg.mean[0]:.2f}, raw var {agg.variance[0]:.2f}, calibrated {agg.calibrated[0]:.2f}")
twice = aggregate(np.vstack([means, means]), np.vstack([variances, variances]))
print(f"after duplicating every segment:      "
      f"mean {twice.mean[0]:.2f}, raw var {twice.variance[0]:.2f}, calibrated {twice.calibrated[0]:.2f}")
