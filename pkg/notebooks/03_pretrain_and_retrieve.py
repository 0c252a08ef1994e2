# %% [markdown]
# # Pretraining and cross-modal retrieval
#
# A small run with the desk preset shrunk further so it finishes in well under
# a minute. Retrieval asks whether a crystal embedding finds its own DOS among
# the held-out materials.

# %%
from mmalign import trainer as T
from mmalign.encoders import embed_all
from mmalign.evalkit import retrieval_report
from mmalign.synthdata import SplitSpec, generate_dataset, split_dataset

data = generate_dataset(400, seed=0)
train, _, test = split_dataset(data, SplitSpec(0.8, 0.1, 0.1, seed=0))
cfg = T.preset("desk", epochs=8, warmup_epochs=1, d=16)
ckpt = T.pretrain(cfg, train)
[round(h["loss"], 3) for h in ckpt.history]

# %%
emb = {m: embed_all(test.payloads(m), ckpt.encoders[m]) for m in cfg.modalities}
rep = retrieval_report(emb, [1, 5, 10])
for row in rep.rows():
    print(row)

# %% [markdown]
# Chance level for top-5 on 40 materials is 0.125.

# %%
T.save_checkpoint(ckpt, "/tmp/demo.mmck")
T.load_checkpoint("/tmp/demo.mmck").epoch
