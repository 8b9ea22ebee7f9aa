"""
The STanH quantizer, step by step
=================================

A sum of shifted, scaled tanh steps that behaves like a smooth staircase at
low inverse temperature and like an exact ladder quantizer as beta grows.
Run with ``python3 notebooks/01_quantizer_walkthrough.py``.
"""

import numpy as np

from svrc import annealing
from svrc import quantizer as qz

np.set_printoptions(precision=4, suppress=True)

# A layer is just step weights w and boundaries b. Levels follow from w:
# the first level is -sum(w)/2 and each next one adds a step.
layer = qz.StanhLayer(w=[1.0, 2.0, 1.0], b=[-1.5, 0.0, 1.5])
print("levels of w=(1,2,1):", qz.reconstruction_levels(layer))

# The interval of each level runs between neighbouring boundaries, with
# infinite tails at the two ends.
grid = qz.interval_bounds(layer)
print("left bounds :", grid.left_bounds)
print("right bounds:", grid.right_bounds)

# Hard quantization finds the interval by binary search.
y = np.array([-3.0, -0.2, 0.0, 0.7, 9.0])
values, idx = qz.hard_quantize(y, layer)
print("y      :", y)
print("index  :", idx)
print("hard   :", values)

# Soft quantization is differentiable. Raising beta sharpens the steps.
for beta in (1.0, 5.0, 50.0):
    soft = qz.soft_quantize(y, layer, beta).data
    print(f"soft at beta={beta:>5}:", soft)

# Training starts from a uniform ladder. With compensated summation the
# end levels land exactly on the requested range.
uniform = qz.init_uniform(60, -30.0, 30.0)
levels = qz.reconstruction_levels(uniform)
print("uniform 60 levels: first", levels[0], "last", levels[-1], "step", uniform.w[0])

# Two trained layers can be blended; the result is again a valid layer.
coarse = qz.init_uniform(60, -45.0, 45.0)
mid = qz.interpolate(uniform, coarse, 0.5)
print("blended step width:", mid.w[0])

# The annealing schedule raises the ceiling on beta by K times the gap
# between soft and hard outputs, then draws beta uniformly below it.
state = annealing.AnnealingState(K=15.0, seed=0)
betas = [state.step(0.0)]
for gap in (0.02, 0.05, 0.01, 0.0):
    betas.append(state.step(gap))
print("beta ceiling after four updates:", state.beta_max)
print("sampled betas:", np.round(betas, 4))
