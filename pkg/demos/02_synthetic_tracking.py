"""
Training and tracking on a synthetic sequence
=============================================

Generate two short synthetic sequences, train a small model on one and
track the other. A hundred or so gradient steps take seconds on a
single core.
"""

# %%
import logging
from dataclasses import replace

from transstam.data import SynthSpec, synth_generate
from transstam.metrics import format_table
from transstam.model import ModelConfig
from transstam.suite import SuiteConfig, run_fold
from transstam.tracker import TrackerConfig
from transstam.training import OptimizerConfig

logging.basicConfig(level=logging.INFO, format="%(message)s")

# %%
# Ten objects over 150 frames with missed detections, false positives and
# occlusion bursts. Appearance vectors stand in for ReID features.
cfg = SuiteConfig(
    seeds=(0, 1),
    synth=SynthSpec(objects=10, frames=150),
    model=ModelConfig(d=32, heads=4, layers=1, ffn_dim=64, appearance_dim=16, window_T=20),
    optimizer=OptimizerConfig(learning_rate=1e-2, epochs=4, samples_per_epoch=128, max_speed=0.03),
    tracker=TrackerConfig(window_T=20, max_speed=0.03),
)
train_seq, test_seq = (synth_generate(replace(cfg.synth, seed=s)) for s in cfg.seeds)
print(f"{len(train_seq.detections)} training detections, {len(test_seq.detections)} test detections")

# %%
report, params, curve = run_fold([train_seq], test_seq, cfg)
print(f"loss {curve[0][2]:.3f} -> {curve[-1][2]:.3f} over {len(curve)} steps")
print(format_table([report]))
