"""Subspace pooling on a single feature map.

Run: python demos/01_subspace_pooling.py
"""

# %% A c x (h*w) feature map and its SVD
import numpy as np

from subpool import FeatureMap, pool_forward, projection_distance, svd
from subpool.pooling import canonicalize_signs

rng = np.random.default_rng(0)
fm = FeatureMap.from_array(rng.standard_normal((8, 4, 4)))
f = svd(fm.A)
print("singular values:", np.round(f.S, 3))
print("max |U^T U - I|:", np.abs(f.U.T @ f.U - np.eye(8)).max())
print("reconstruction error:", np.linalg.norm(f.reconstruct() - fm.A))

# %% Pool to the top-4 left singular vectors
desc, cache = pool_forward(fm, 4)
U = desc.U
print("descriptor shape:", U.shape)

# Truncation is the best rank-4 approximation: no other rank-4 projector
# leaves a smaller residual.
best = np.linalg.norm(fm.A - U @ U.T @ fm.A)
tail = np.sqrt(np.sum(cache.factors.S[4:] ** 2))
others = []
for _ in range(100):
    Q, _ = np.linalg.qr(rng.standard_normal((8, 4)))
    others.append(np.linalg.norm(fm.A - Q @ Q.T @ fm.A))
print(f"residual {best:.6f} = spectral tail {tail:.6f}; best random projector {min(others):.6f}")

# %% Sign convention
# Singular vectors are defined up to sign. The largest-magnitude entry of
# every column is made non-negative so the descriptor is a function of A.
flipped, signs = canonicalize_signs(-U)
print("re-canonicalized signs:", signs, "recovers U:", np.array_equal(flipped, U))

# %% Comparing subspaces
# The projection distance ignores the basis inside each subspace.
R, _ = np.linalg.qr(rng.standard_normal((4, 4)))
other = pool_forward(FeatureMap.from_array(rng.standard_normal((8, 4, 4))), 4)[0]
print("distance to a rotated copy:", projection_distance(U, U @ R))
print("distance to another map:   ", projection_distance(desc, other))
print("upper bound sqrt(k):       ", np.sqrt(4))

# Reordering spatial locations (columns of A) leaves the subspace unchanged.
shuffled = FeatureMap(8, 1, 16, fm.A[:, rng.permutation(16)])
print("after shuffling locations:  ", projection_distance(U, pool_forward(shuffled, 4)[0]))
