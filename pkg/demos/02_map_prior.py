"""From binary road mask to map prior: distance transform, softmax, lookup.

Renders the synthetic fork's drivable area, its distance transform, and
the resulting probability grid; then queries the differentiable
log-density at a few points on and off the road.
"""

import numpy as np

from trajflow.scenemap import (build_p_tilde, distance_transform,
                               log_p_tilde_with_penalty, value_stats)
from trajflow.synthetic import fork_mask

mask = fork_mask(ego_position=np.zeros(2))
dist = distance_transform(mask)
p = build_p_tilde(dist, value_stats([dist]))

print(f"drivable pixels: {mask.drivable_count()} of {mask.grid.size}")
print(f"max off-road distance: {dist.grid.max():.1f} px")
print(f"prior sums to {p.prob.sum():.9f}")
print(f"drivable pixels share the max probability: "
      f"{np.allclose(p.prob[mask.grid], p.prob.max())}")

print("\nlog-density queries (x, y in meters, ego frame):")
for xy in [(0.0, -10.0), (0.0, 8.0), (12.0, 8.0), (-30.0, -30.0), (80.0, 0.0)]:
    value, grad, inside = log_p_tilde_with_penalty(p, np.array(xy))
    where = "on-grid" if inside else "off-grid (penalty)"
    print(f"  {str(xy):>16}: log p = {value:8.3f}  grad = "
          f"({grad[0]:+.3f}, {grad[1]:+.3f})  [{where}]")

# coarse ASCII view of the prior (brighter = more probable)
chars = " .:-=+*#%@"
small = p.prob[::8, ::8]
scaled = (small - small.min()) / (small.max() - small.min())
print("\nprior, 28x28 downsample:")
for row in scaled:
    print("".join(chars[int(v * (len(chars) - 1))] for v in row))
