# coding: utf-8

# # The search space and what an architecture costs
#
# Every searchable layer picks a kernel size and an expansion ratio. A genotype
# is just that list of pairs, and its FLOPs (multiply-adds) and parameter count
# follow from the layer plan alone, without building any network.

# In[1]:

import numpy as np

from oneshot_nas import (constraint_preset, count_resources, decode_genotype, desk_space,
                         encode_genotype)
from oneshot_nas.space import flops_range, minimal_genotype, maximal_genotype, space_size

space = desk_space()
print(space.num_layers, "searchable layers")
print("kernels", space.kernel_choices, "expansions", space.expansion_choices)
print("genotypes:", space_size(space))


# The smallest and largest networks bound every budget.

# In[2]:

for g in (minimal_genotype(space), maximal_genotype(space)):
    r = count_resources(space, g)
    print(encode_genotype(g), r.flops, "MACs", r.params, "params")


# Genotypes round-trip through their text form, which is what the CLI and
# the logs use.

# In[3]:

g = decode_genotype("K3_E2.0-K5_E6.0-K3_E4.5-K3_E3.0-K5_E2.5-K3_E6.0-K5_E4.0-K3_E2.0", space)
print(count_resources(space, g))


# Budgets are fractions of the largest network, so "small" means the same
# thing at any scale.

# In[4]:

lo, hi = flops_range(space)
for name in ("small", "medium", "large"):
    print(name, constraint_preset(space, name), "of", hi)

rng = np.random.default_rng(0)
from oneshot_nas.space import random_genotype
budget = constraint_preset(space, "small")
draws = [count_resources(space, random_genotype(space, rng, budget)).flops for _ in range(200)]
print("200 feasible draws, max flops", max(draws), "<=", budget)
