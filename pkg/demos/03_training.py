# coding: utf-8

# # Pretraining, fine-tuning and BN recalibration
#
# Pretraining samples several full-width paths per batch, accumulates their
# gradients and makes one update. Fine-tuning then trains the store at
# several widths so that narrow subnets inherit usable weights. This runs on
# a small synthetic texture task in a few minutes.

# In[1]:

import numpy as np

from oneshot_nas import (DatasetSpec, SubnetView, bn_recalibrate, classification_head,
                         desk_space, evaluate, finetune, finetune_config, generate,
                         init_weight_store, pretrain, pretrain_config)
from oneshot_nas.space import uniform_genotype

space = desk_space()
data = generate(DatasetSpec(n_train=1024, n_val=256, n_test=256))
store = init_weight_store(space, seed=0, head=classification_head(space))
cfg = pretrain_config(epochs=5, batch_size=32, lr0=0.3, subnets_per_step=3, val_subnets=1,
                      recal_batches=4)
store, rows = pretrain(store, data, cfg, log=print)


# A subnet evaluated with the store's shared running statistics is often
# much worse than the same weights after recalibrating BN on a few batches.

# In[2]:

g = uniform_genotype(space, np.random.default_rng(3), expansion=6.0)
raw = evaluate(SubnetView(store, g), data.val.images, data.val.labels)["metrics"]["oa"]
view = bn_recalibrate(SubnetView(store, g), data.train.image_batches(128), 4)
fixed = evaluate(view, data.val.images, data.val.labels)["metrics"]["oa"]
print(f"shared stats {raw:.3f}  recalibrated {fixed:.3f}")


# Sandwich fine-tuning: smallest, largest and a random width per sampled
# topology.

# In[3]:

ft = finetune_config(epochs=2, batch_size=32, lr0=0.05, subnets_per_step=2, val_subnets=2,
                     recal_batches=4)
store, rows = finetune(store, "classification", data, ft, log=print)
print(store.stage)
