"""Train a small velocity model and check it on held-out scenes.

Usage: python 03_train_small_model.py [epochs] [train_scenes] [test_scenes]

The defaults finish in a couple of minutes; 40 epochs on 200 scenes is
what the acceptance suite uses.
"""

import sys
import time
from dataclasses import replace

import numpy as np

from flowpose.flow import TrainConfig
from flowpose.pipeline import IR_GRID, PipelineConfig, estimate_pose, eval_metrics, train_model
from flowpose.scenes import SceneSpec, generate_scenes

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
n_train = int(sys.argv[2]) if len(sys.argv) > 2 else 100
n_test = int(sys.argv[3]) if len(sys.argv) > 3 else 20

base = SceneSpec(shape="L-bracket", visibility=0.7, resample=True)
diam = generate_scenes(base, 1, 0)[0].diameter
base = replace(base, noise=0.0025 * diam)
train, test = generate_scenes(base, n_train, 100), generate_scenes(base, n_test, 200)

cfg = PipelineConfig()
t0 = time.perf_counter()
model, log = train_model(train, TrainConfig(epochs=epochs), cfg)
print(f"trained {model.n_params} parameters in {time.perf_counter() - t0:.0f} s")
print("loss by epoch:", " ".join(f"{l:.4f}" for l in log.losses))

ok, irs = [], []
for rec in test:
    pose, _, diag = estimate_pose(rec, cfg, model)
    ok.append(eval_metrics(pose, rec.gt, rec.query).success(rec.diameter))
    irs.append([diag["inlier_ratio"][t] for t in IR_GRID])
print(f"success (5 deg, 5% diameter): {100 * np.mean(ok):.0f}% of {len(test)} scenes")
for t, v in zip(IR_GRID, np.mean(irs, axis=0)):
    print(f"  IR at tau={100 * t:4g}% diameter: {v:5.1f}%")
