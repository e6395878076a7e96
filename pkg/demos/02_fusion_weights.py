"""Optimal matrix weights for fusing correlated estimates.

Two scalar estimates with error variances p11, p22 and cross-covariance
p12 fuse best with weight (p22 - p12) / (p11 + p22 - 2 p12) on the first.
The same idea extends to N vector estimates: the weights solve one linear
system built from all pairwise cross-covariances and sum to the identity.

Run:  python demos/02_fusion_weights.py
"""

import numpy as np

from rhfusion.fusion import CrossCovState, fuse, fusion_weights, fusion_weights_block_inverse
from rhfusion.numerics import EstimatorState

# --- two scalars ---------------------------------------------------------
p11, p22 = 1.0, 2.0
print(" p12    w1      fused variance")
for p12 in (-0.5, 0.0, 0.5, 0.9):
    blocks = np.array([[[[p11]], [[p12]]], [[[p12]], [[p22]]]])
    cross = CrossCovState(0.0, (0, 1), blocks)
    W = fusion_weights(cross)
    out = fuse([EstimatorState(0.0, np.zeros(1), blocks[a, a]) for a in range(2)], cross, W)
    print(f"{p12:+.1f}  {W[0][0, 0]:.4f}  {out.cov[0, 0]:.4f}")
# with p12 = 0.9 close to p11 the better estimate gets weight > 1

# --- three correlated 2-vectors ------------------------------------------
rng = np.random.default_rng(0)
N, n = 3, 2
M = rng.normal(size=(N * n, N * n + 2))
joint = M @ M.T + 0.05 * np.eye(N * n)  # joint error covariance of the three estimators
blocks = joint.reshape(N, n, N, n).transpose(0, 2, 1, 3)
cross = CrossCovState(0.0, (0, 1, 2), blocks)

W = fusion_weights(cross)
Wb = fusion_weights_block_inverse(cross)
print("\nsum of weights:\n", np.round(sum(W), 12))
print("linear solve vs block inverse, max gap:", max(np.abs(a - b).max() for a, b in zip(W, Wb)))

states = [EstimatorState(0.0, np.zeros(n), blocks[a, a]) for a in range(N)]
fused = fuse(states, cross, W)
print("local traces:", [round(float(np.trace(blocks[a, a])), 4) for a in range(N)])
print("fused trace: ", round(float(np.trace(fused.cov)), 4))
