# %% [markdown]
# # Alignment losses on toy batches
#
# Every loss takes batches of embeddings (rows are materials) and returns an
# autodiff scalar. Values are batch sums.

# %%
import numpy as np

from mmalign import autodiff as ad
from mmalign import losses as L

rng = np.random.default_rng(0)
A, B, C = rng.normal(size=(3, 8, 16))

# %%
L.clip_loss(A, B).data, L.clip_loss(A, A + 0.01 * B).data

# %% [markdown]
# Matched pairs drive the contrastive loss towards zero. With three
# modalities there are two ways to use pairwise terms, and one genuinely
# three-way version.

# %%
{
    "allpairs": L.allpairs_clip_loss([A, B, C]).data,
    "anchored": L.anchored_clip_loss(A, [B, C]).data,
    "tensorclip": L.tensor_clip_loss(A, B, C).data,
    "barlow3d": L.barlow3d_loss(A, B, C).data,
}

# %%
# identical orthonormal embeddings: 2*log(1 + 3/e) for tensorclip at tau=1
E = np.eye(4)
L.tensor_clip_loss(E, E, E, L.ClipParams(tau=1.0)).data, 2 * np.log(1 + 3 / np.e)

# %% [markdown]
# Gradients come from the same graph. A finite-difference check on one entry:

# %%
graph = ad.LossGraph(lambda P: L.barlow3d_loss(P["a"], B, C), {"a": A})
g = ad.grad_of(graph, "a")
h = 1e-6
Ap = A.copy()
Ap[2, 3] += h
(L.barlow3d_loss(Ap, B, C).data - L.barlow3d_loss(A, B, C).data) / h, g[2, 3]
