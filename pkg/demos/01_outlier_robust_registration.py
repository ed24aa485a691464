"""Global least squares versus RANSAC on correspondences with gross outliers.

Half of the pairs are replaced by points drawn in a 1 m box. The all-pairs
Kabsch fit is dragged away; RANSAC on minimal triples is not.
"""

import numpy as np

from flowpose.geom import RigidTransform, random_rotation, rotation_angle
from flowpose.register import CorrespondenceSet, RansacConfig, ransac_register, svd_global_align

rng = np.random.default_rng(0)
src = rng.uniform(-0.1, 0.1, size=(300, 3))
gt = RigidTransform(random_rotation(rng), [0.02, -0.01, 0.7])
dst = gt.apply(src) + rng.normal(scale=0.001, size=src.shape)

print("outliers   svd rot err   ransac rot err   ransac inliers")
for frac in (0.0, 0.2, 0.4, 0.6, 0.8):
    d = dst.copy()
    bad = rng.permutation(len(d))[: int(frac * len(d))]
    d[bad] = rng.uniform(-0.5, 0.5, size=(len(bad), 3)) + [0, 0, 0.7]
    corr = CorrespondenceSet(src, d)
    svd = svd_global_align(corr)
    ran = ransac_register(corr, RansacConfig(seed=1))
    print(f"{frac:8.0%}   {np.degrees(rotation_angle(svd.transform.rotation, gt.rotation)):9.3f}"
          f"   {np.degrees(rotation_angle(ran.transform.rotation, gt.rotation)):12.3f}"
          f"   {ran.inlier_count:10d}")
