# coding: utf-8

# # One weight store, many networks
#
# The supernet keeps one set of weights per (layer, kernel) at the widest
# expansion. A subnet reads leading-channel slices of those arrays, so it is a
# view and not a copy: changing the store changes every subnet that uses it.

# In[1]:

import numpy as np

from oneshot_nas import (Genotype, SearchSpace, StageSpec, SubnetView, classification_head,
                         export_standalone, init_weight_store)
from oneshot_nas.nn import softmax_cross_entropy

space = SearchSpace(stages=(StageSpec(1, 8, 2), StageSpec(1, 12, 1)), input_resolution=8,
                    stem_channels=4, first_block_channels=4, head_channels=8, num_classes=3,
                    expansion_choices=(2.0, 4.0, 6.0))
store = init_weight_store(space, seed=0, dtype=np.float64, head=classification_head(space))
print(len(store.params), "parameter tensors")


# A narrow path and the same path exported as a self-contained model give
# the same logits.

# In[2]:

g = Genotype(((5, 2.0), (3, 4.0)))
x = np.random.default_rng(1).standard_normal((4, 8, 8, 3))
view_out = SubnetView(store, g).forward(x, "eval")
alone_out = SubnetView(export_standalone(store, g), g).forward(x, "eval")
print("max difference", np.abs(view_out - alone_out).max())


# After a backward pass only the sampled path has gradients. The other
# kernel's slot gets nothing, and inside the used slot only the leading
# channels do.

# In[3]:

view = SubnetView(store, g)
_, dout = softmax_cross_entropy(view.forward(x, "train"), np.array([0, 1, 2, 0]))
view.backward(dout)
grads = {}
view.accumulate_grads(grads)
print("touched:", sorted(k for k in grads if k.startswith("L")))
dw = grads["L0.k5.dw.w"]
print("nonzero depthwise channels in L0.k5:", np.flatnonzero(np.abs(dw).sum((0, 1))))
