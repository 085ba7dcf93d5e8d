"""
Local attention as a position-varying convolution
==================================================

Each query position attends to a (2r+1) x (2r+1) window of keys.  The
result equals dense attention with every key outside the window masked,
at a fraction of the cost.
"""
import numpy as np

from localtrans import lak
from localtrans.tensor.core import Tensor

rng = np.random.default_rng(0)
c, h, w, r = 8, 12, 12, 2
q, k, v = (rng.standard_normal((1, c, h, w)) for _ in range(3))

# the fused kernel returns the attended features and the normalised window map
y, amap = lak.lak_fused(Tensor(q), Tensor(k), Tensor(v), c, r)
print("features", y.shape, "window map", amap.window_array().shape)

# every window sums to one; slots that fall outside the image get no mass
sums = amap.window_array().sum(axis=(-1, -2))
print("window sums in [%.12f, %.12f]" % (sums.min(), sums.max()))

# the dense oracle with the same window mask agrees to rounding error
dense = lak.global_attention_oracle(q, k, v, c, radius=r)
print("max |local - masked dense| = %.2e" % np.abs(y.data - dense).max())

# instrumented counters against the closed-form costs
with lak.count_ops() as local_cost:
    lak.lak_fused(Tensor(q), Tensor(k), Tensor(v), c, r)
with lak.count_ops() as dense_cost:
    lak.global_attention_oracle(q, k, v, c)
print("local :", local_cost)
print("dense :", dense_cost)
assert local_cost == lak.cost_report(h, w, c, r, "local")

# the attention-map ratio is (2r+1)^2 / (HW) at every size
for side in (16, 32, 64):
    loc = lak.cost_report(side, side, 32, r, "local").attention_map_elements
    glo = lak.cost_report(side, side, 32, r, "global").attention_map_elements
    print(f"{side}x{side}: local/global map elements = {loc / glo:.5f}")
