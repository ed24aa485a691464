"""A 4-fold symmetric cuboid seen with and without an appearance cue.

With constant texture the geometry cannot tell the four yaw-symmetric poses
apart, and rotation errors pile up near multiples of 90 degrees. An
asymmetric texture fused into the conditioning picks the right one.

Usage: python 04_symmetry.py [epochs] [train_scenes] [test_scenes]
"""

import sys

from flowpose.flow import TrainConfig
from flowpose.pipeline import run_symmetry_study

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 15
n_train = int(sys.argv[2]) if len(sys.argv) > 2 else 100
n_test = int(sys.argv[3]) if len(sys.argv) > 3 else 40

report, _ = run_symmetry_study("cuboid", n_train, n_test, TrainConfig(epochs=epochs))
for row in report.rows():
    print(f"{row['condition']:>9}: success {row['success_rate']:5.1f}%  median rotation "
          f"{row['median_rotation_deg']:7.2f} deg  modes 0/90/180/270: "
          + " ".join(f"{row[f'mode_{m}']:.2f}" for m in (0, 90, 180, 270)))
print("relative IR gain of fused over geometry-only:")
for tau, g in report.ir_gain.items():
    print(f"  tau={100 * tau:4g}%: {g:+6.1f}%  ({report.ir_gain_points[tau]:+.1f} points)")
