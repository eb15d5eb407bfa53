"""Identification and batch-hard triplet losses.

Run: python demos/03_losses.py
"""

# %% Softmax cross-entropy
import numpy as np

from subpool import TripletBatch, batch_hard_triplet, cross_entropy
from subpool.losses import hardest_pairs, pairwise_distances

print("uniform logits over 4 classes:", cross_entropy(np.zeros((2, 4)), [0, 3]).loss, np.log(4))
logits = np.array([[50.0, 0, 0], [0, 0, 50.0]])
print("confident and correct:", cross_entropy(logits, [0, 2]).loss)

# %% Batch-hard mining on a P x K batch
rng = np.random.default_rng(2)
P, K = 3, 4
labels = np.repeat(np.arange(P), K)
x = rng.standard_normal((P, 2))[labels] * 2 + 0.8 * rng.standard_normal((P * K, 2))
dist = pairwise_distances(x)
pairs = hardest_pairs(dist, labels, margin=0.3)
for a in range(0, P * K, K):
    print(f"anchor {a}: hardest positive {pairs.positive[a]}, hardest negative "
          f"{pairs.negative[a]}, hinge {pairs.terms[a]:.3f}")

mean = batch_hard_triplet(TripletBatch(x, labels, 0.3)).loss
total = batch_hard_triplet(TripletBatch(x, labels, 0.3), "sum").loss
print(f"mean {mean:.4f}, sum {total:.4f}, P*K*mean {P * K * mean:.4f}")

# %% Collapsed embeddings
# All distances are zero, so every anchor pays exactly the margin.
print("all-identical batch, sum:", batch_hard_triplet(TripletBatch(np.zeros((4, 3)), [0, 0, 1, 1], 0.3), "sum").loss)
