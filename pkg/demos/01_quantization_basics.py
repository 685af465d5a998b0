# coding: utf-8

# # Affine quantization by hand

# A real value r is stored as an integer q with r = S * (q - Z). The scale S and
# zero point Z come from an observed range. Here we build them for a small range
# and look at what survives a round trip.

# In[1]:

import numpy as np

from tdnnq import RangeStats, compute_qparams, dequantize, quantize


# In[2]:

stats = RangeStats(-0.7, 1.3)
sym = compute_qparams(stats, 8, "symmetric")
asym = compute_qparams(stats, 8, "asymmetric")
print(sym)
print(asym)


# The symmetric grid is centred on zero and widened to [-1.3, 1.3], so half of
# the negative codes go unused for this range. The asymmetric grid only covers
# [0, 127] codes, and its zero point shifts the range so that zero is exact.

# In[3]:

x = np.linspace(-0.7, 1.3, 9)
for p in (sym, asym):
    q = quantize(x, p)
    print(p.mode, q.data, np.abs(dequantize(q) - x).max(), "<=", p.scale / 2)


# Out-of-range values saturate. Symmetric int8 uses [-127, 127] and never emits -128:

# In[4]:

q = quantize(np.array([-1e6, -1.31, 0.0, 1.31, 1e6]), sym)
print(q.data)


# # The integer matmul

# With both operands quantized, a dot product expands into four terms. Only the
# last one needs the full N multiply-adds; the others are row and column sums.

# In[5]:

from tdnnq.int_kernels import accumulator_dtype, build_plan, integer_core, int_matmul_float_out

rng = np.random.default_rng(0)
acts = rng.uniform(0, 2, size=(4, 30))
weights = rng.normal(size=(5, 30))
ap = compute_qparams(RangeStats.of(acts), 8, "asymmetric")
wp = compute_qparams(RangeStats.of(weights), 8, "symmetric")
qa = quantize(acts, ap)
plan = build_plan(weights, wp, ap)

core = integer_core(plan, qa)
direct = (qa.data.astype(np.int64) - ap.zero_point) @ (plan.q_weights.data.astype(np.int64) - wp.zero_point).T
# the sum of products runs in int32; zero-point corrections are added in int64
print(np.dtype(accumulator_dtype(wp, ap)), np.array_equal(core, direct))


# Scaling the integer result by M = S1 * S2 reproduces the product of the
# dequantized operands to float precision. The gap to the unquantized product
# is the quantization error itself.

# In[6]:

out = int_matmul_float_out(plan, qa)
print(np.abs(out - dequantize(qa) @ dequantize(plan.q_weights).T).max())
print(np.abs(out - acts @ weights.T).max())
