"""Differentiating through the truncated SVD.

Run: python demos/02_gradients.py
"""

# %% Analytic backward pass against central differences
import numpy as np

from subpool import FeatureMap, pool_backward, pool_forward
from subpool.gradcheck import central_difference, degenerate_matrix, relative_error, run

rng = np.random.default_rng(1)
A = rng.standard_normal((5, 8))
W = rng.standard_normal((5, 2))


def loss():
    return float(np.sum(W * pool_forward(FeatureMap(5, 1, 8, A), 2)[0].U))


_, cache = pool_forward(FeatureMap(5, 1, 8, A), 2)
analytic = pool_backward(cache, W)
numeric = central_difference(loss, A, 1e-5)
print("relative error, separated spectrum:", relative_error(analytic, numeric))

# %% Near-degenerate spectrum
# sigma_2 and sigma_3 differ by 5e-7. Individual singular vectors are then
# ill-defined, but the retained subspace is not, and the Lorentzian
# broadening keeps the gradient finite.
B = degenerate_matrix(seed=0)
print("singular values:", np.round(pool_forward(FeatureMap(6, 1, 6, B), 3)[1].factors.S, 8))
_, cache = pool_forward(FeatureMap(6, 1, 6, B), 3)
g = pool_backward(cache, rng.standard_normal((6, 3)))
print("basis-dependent gradient finite:", bool(np.all(np.isfinite(g))), "norm", np.linalg.norm(g))

# %% Every stage of the package
for result in run(degenerate=True):
    print(f"{result.stage:20s} {result.error:.2e}  (tol {result.tolerance:g})  {result.detail}")
