# coding: utf-8

# # Swapping in a segmentation head
#
# The backbone weights do not change when heads are swapped. The
# segmentation head is an ASPP module on a backbone whose last downsampling
# stage is dilated instead of strided, with logits upsampled to input size.

# In[1]:

import numpy as np

from oneshot_nas import (SubnetView, attach_head, classification_head, desk_space, detach_head,
                         evaluate, generate, init_weight_store, segmentation_head,
                         segmentation_spec)
from oneshot_nas.space import maximal_genotype

space = desk_space()
store = init_weight_store(space, seed=0, head=classification_head(space))
before = {k: v.copy() for k, v in store.backbone_items().items()}
detach_head(store)
attach_head(store, segmentation_head(6, channels=32, rates=(1, 2, 4)))
print(all(np.array_equal(store.params[k], v) for k, v in before.items() if k in store.params))


# In[2]:

data = generate(segmentation_spec(n_train=16, n_val=16, n_test=16))
print(data.train.images.shape, data.train.labels.shape, data.train.label_counts)
view = SubnetView(store, maximal_genotype(space))
print(view.forward(data.val.images[:2], "eval").shape)
report = evaluate(view, data.val.images, data.val.labels)
print(report["metrics"])
