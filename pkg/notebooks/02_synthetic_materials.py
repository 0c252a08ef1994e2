# %% [markdown]
# # Synthetic materials
#
# Each record is drawn from a hidden latent vector which feeds a crystal graph,
# a density of states curve, a voxel charge density and a few scalar
# properties. Missing modalities are simulated by dropout.

# %%
import numpy as np

from mmalign.synthdata import (
    SplitSpec,
    generate_dataset,
    materials_by_modality,
    split_dataset,
)

data = generate_dataset(300, seed=1)
r = data[0]
r.id, r.crystal.node_features.shape, len(r.dos.energies), r.density.voxels.shape, r.properties

# %%
gaps = np.array([m.properties["gap"] for m in data])
dos_at_zero = np.array([np.interp(0.0, m.dos.energies, m.dos.values) for m in data])
np.corrcoef(gaps, dos_at_zero)[0, 1]  # an open gap empties the curve near zero

# %%
materials_by_modality(data.records)

# %%
train, val, test = split_dataset(data, SplitSpec(0.8, 0.1, 0.1, seed=0))
len(train), len(val), len(test)
