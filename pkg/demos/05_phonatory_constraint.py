"""The diffusion-based phonatory constraint.

Short windows of a same-speaker recording are noised with the closed-form
forward process, and a small denoiser conditioned on the voice code learns
to predict the injected noise.  Because the denoiser can only beat the
unconditional baseline by exploiting e, its gradients push the shared
encoder to keep identity-bearing signal.  Training-only: inference never
runs any of this.
"""

import numpy as np

from voiceface.phonatory import (
    WINDOW,
    DiffusionSchedule,
    diffusion_loss,
    forward_sample,
    init_denoiser,
    joint_step,
)

schedule = DiffusionSchedule.linear()
print(f"schedule: T = {schedule.t_steps}, beta {schedule.betas[0]:.4f}..{schedule.betas[-1]:.3f}")
print(f"alpha_bar at t = 1, 25, 50: "
      f"{schedule.alpha_bars[0]:.4f}, {schedule.alpha_bars[24]:.4f}, {schedule.alpha_bars[-1]:.4f}")

rng = np.random.default_rng(0)
x0 = np.sin(2 * np.pi * np.arange(WINDOW) / 64)
for t in (1, 25, 50):
    x_t = forward_sample(schedule, x0, t, rng.standard_normal(WINDOW))
    print(f"t = {t:2d}: signal-to-total std ratio "
          f"{np.sqrt(schedule.alpha_bars[t - 1]):.3f}, window std {x_t.std():.3f}")

# a fresh denoiser outputs zero, so its loss is E|N(0,1)| = sqrt(2/pi)
params = init_denoiser(rng)
x0_batch = rng.standard_normal((256, WINDOW))
e = rng.standard_normal((256, 64))
loss = diffusion_loss(params, schedule, x0_batch, e, rng)
print(f"\nfresh denoiser loss {loss:.4f} (sqrt(2/pi) = {np.sqrt(2 / np.pi):.4f})")

# the combined step mixes gradients; gamma = 0 is exactly estimator-only
est_grads = {"fc2_w": np.ones(3)}
diff_grads = {"fc2_w": np.full(3, 0.5), "dn1_w": np.ones(2)}
for gamma in (0.0, 0.1):
    total_loss, total = joint_step(1.0, est_grads, 0.8, diff_grads, gamma)
    print(f"gamma = {gamma}: loss {total_loss:.2f}, encoder grad {total['fc2_w']}, "
          f"denoiser keys {sorted(k for k in total if k.startswith('dn'))}")
