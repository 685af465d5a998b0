# coding: utf-8

# # Low-rank factorization

# Each weight matrix W (m x n) is replaced by A @ B with A = U_r diag(s_r) and
# B = V_r^T from its SVD. The Frobenius error equals the energy in the dropped
# singular values.

# In[1]:

import numpy as np

from tdnnq.lowrank import FACTORIZED_TARGET_RATIO, factorize_model, svd_truncate
from tdnnq.tdnn import forward_float, random_model

rng = np.random.default_rng(0)
w = rng.normal(size=(24, 60))
s = np.linalg.svd(w, compute_uv=False)
for r in (1, 4, 12, 24):
    err = np.linalg.norm(w - svd_truncate(w, r).dense())
    print(r, round(err, 6), round(np.sqrt(np.sum(s[r:] ** 2)), 6))


# A factorized layer is only smaller when r (m + n) < m n. For a full-size
# 7-layer TDNN the ranks can be chosen so the whole model keeps about 0.4 of its
# parameters.

# In[2]:

model = random_model(rng, 40, 625, 7, 41, head_kind="monophone")
small, report = factorize_model(model, FACTORIZED_TARGET_RATIO)
print(report["params_before"], "->", report["params_after"], f"({report['param_ratio']:.3f})")
print(report["ranks"])


# In[3]:

x = rng.normal(size=(1, 50, 40)).astype(np.float32)
print("max log-prob change on a random input:", np.abs(forward_float(model, x) - forward_float(small, x)).max())
