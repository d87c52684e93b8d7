"""
Scoring tracklets against detections
====================================

An untrained model on three hand-made tracklets, followed by the
Hungarian matching that turns match probabilities into identities.
"""

# %%
import numpy as np

from transstam.association import associate, speed_filter
from transstam.model import AssociationInput, ModelConfig, assignment_matrix, init_params, normalize_boxes

cfg = ModelConfig(d=16, heads=2, layers=1, ffn_dim=32, appearance_dim=4, window_T=5)
params = init_params(cfg, seed=0)
image = (640, 480)

# %%
# Three tracklets seen over frames 1-3, each with its own appearance
# direction. Boxes are pixels (left, top, w, h) and get normalized by the
# image size before the model sees them.
rng = np.random.default_rng(0)
starts = np.array([[50.0, 100.0], [300.0, 200.0], [500.0, 50.0]])
frames = np.tile(np.arange(1.0, 4.0), (3, 1))
boxes = np.stack([np.c_[starts[i] + np.outer(np.arange(3), [4, 1]), np.full((3, 2), [30.0, 60.0])] for i in range(3)])
looks = np.eye(4)[:3]
trk_app = looks[:, None, :] + 0.05 * rng.standard_normal((3, 3, 4))

# Frame 4 brings two of the objects back (in swapped order) and a newcomer.
det_boxes = np.array([[312.0, 203.0, 30, 60], [62.0, 103.0, 30, 60], [200.0, 400.0, 30, 60]])
det_app = np.array([looks[1], looks[0], np.eye(4)[3]]) + 0.05 * rng.standard_normal((3, 4))

trk_geom = normalize_boxes(boxes.reshape(-1, 4), image).reshape(3, 3, 4)
det_geom = normalize_boxes(det_boxes, image)
batch = AssociationInput(trk_app, trk_geom, frames, np.ones((3, 3), bool), det_app, det_geom, 4)

# %%
A = assignment_matrix(params, batch, cfg)
print("match probabilities (rows: tracklets, cols: detections)")
print(np.round(A, 3))

# %%
# Pairs moving faster than max_speed (normalized units per frame) are never
# queried. Whatever survives goes to the Hungarian solver on 1 - A, and
# matches at or below tau are thrown back.
mask = speed_filter(trk_geom[:, -1, :2], frames[:, -1], det_geom[:, :2], 4, max_speed=0.1)
print("speed-filtered pairs:")
print(mask.astype(int))
result = associate(A, tau=0.5, mask=mask)
print("pairs:", result.pairs)
print("unmatched detections (new ids):", result.unmatched_detections)
# With random weights the probabilities hover around 0.5; the second demo
# trains a model so they separate.
