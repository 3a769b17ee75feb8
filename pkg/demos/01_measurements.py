"""Facial measurements on a landmarked mesh.

A measurement (AM) is a scalar read off named landmarks: a distance in mm,
a proportion of two distances, or an angle in degrees.  All of them are
intra-face, so rigid motion of the head never changes them.
"""

import numpy as np

from voiceface.geometry import (
    AMDefinition,
    LandmarkMap,
    Mesh,
    compute_all_ams,
    compute_am,
    compute_am_gradient,
)

# a toy "face": four labeled points
mesh = Mesh([
    [0.0, 0.0, 0.0],    # chin
    [0.0, 50.0, 10.0],  # nose tip
    [-20.0, 60.0, 0.0], # left eye corner
    [20.0, 60.0, 0.0],  # right eye corner
])
landmarks = LandmarkMap({"chin": 0, "nose": 1, "eye_l": 2, "eye_r": 3})

defs = [
    AMDefinition("eye_span", "distance", ("eye_l", "eye_r")),
    AMDefinition("face_height", "distance", ("chin", "nose")),
    AMDefinition("span_height_ratio", "proportion", ("eye_l", "eye_r", "chin", "nose")),
    AMDefinition("nose_angle", "angle", ("eye_l", "nose", "eye_r")),
]

vec = compute_all_ams(mesh, landmarks, defs)
for am_id, value in zip(vec.am_ids, vec.values):
    print(f"{am_id:18s} = {value:8.3f}")

# every measurement is differentiable in the vertex coordinates;
# the gradient is sparse (only the involved landmarks appear)
grad = compute_am_gradient(mesh, landmarks, defs[0])
print("\ngradient of eye_span (unit vectors of the difference):")
for idx, g in sorted(grad.items()):
    print(f"  vertex {idx}: {np.round(g, 3)}")

# rigid motion leaves all measurements untouched
theta = 0.4
rot = np.array([
    [np.cos(theta), -np.sin(theta), 0.0],
    [np.sin(theta), np.cos(theta), 0.0],
    [0.0, 0.0, 1.0],
])
moved = Mesh(mesh.vertices @ rot.T + np.array([100.0, -30.0, 5.0]))
shift = np.abs(compute_all_ams(moved, landmarks, defs).values - vec.values).max()
print(f"\nmax measurement change under a rigid transform: {shift:.2e}")

# degenerate geometry raises instead of returning NaN
collapsed = Mesh(np.zeros((4, 3)))
try:
    compute_am(collapsed, landmarks, defs[0])
except Exception as exc:
    print(f"degenerate mesh -> {type(exc).__name__}: {exc}")
