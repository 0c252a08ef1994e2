# %% [markdown]
# # Screening by DOS
#
# Build an index of crystal embeddings, query it with the embedding of a
# target DOS, and keep the best true DOS match among the first n candidates.

# %%
from mmalign import screening as SC
from mmalign import trainer as T
from mmalign.encoders import encode_dos
from mmalign.evalkit import dos_mae
from mmalign.synthdata import generate_dataset

library = generate_dataset(300, seed=3)
ckpt = T.pretrain(T.preset("desk", epochs=6, warmup_epochs=1, d=16), library)
index = SC.build_index(library, ckpt.encoders["crystal"])
index.size, index.dim

# %%
target = generate_dataset(1, seed=999)[0].dos
SC.query_nearest(index, encode_dos(target, ckpt.encoders["dos"]), 3)

# %%
lookup = {r.id: r.dos for r in library}
curve = SC.best_of_n_curve(index, target, lookup, ckpt.encoders["dos"], [1, 5, 10, 50])
[(len(r.neighbors), round(r.best_mae, 3)) for r in curve]

# %% [markdown]
# Best-of-n can only improve with n. For reference, a random library member:

# %%
dos_mae(target, library[0].dos).value

# %%
table = SC.export_embeddings(ckpt.encoders["crystal"], library, 100, seed=0)
xy = SC.project_2d(table)
xy[:5]
