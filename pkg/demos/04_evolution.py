# coding: utf-8

# # Evolutionary search against a known optimum
#
# Any callable from genotype to a score can drive the search. Here the score
# is minus the distance to a hidden genotype, so we can check that the search
# finds it, and compare against random sampling at the same number of calls.

# In[1]:

import numpy as np

from oneshot_nas import EvoConfig, SearchSpace, StageSpec, evolutionary_search, random_search
from oneshot_nas.space import constraint_preset, count_resources, uniform_genotype

space = SearchSpace(stages=(StageSpec(3, 8, 2), StageSpec(3, 16, 2)), input_resolution=16,
                    stem_channels=8, first_block_channels=8, head_channels=16, num_classes=4,
                    expansion_choices=(2.0, 4.0, 6.0))
target = uniform_genotype(space, np.random.default_rng(7))


def fitness(g):
    ks, es = space.kernel_choices, space.expansion_choices
    return -sum(abs(ks.index(a[0]) - ks.index(b[0])) + abs(es.index(a[1]) - es.index(b[1]))
                for a, b in zip(g, target))


# In[2]:

cfg = EvoConfig(population=50, generations=30, seed=0)
ea = evolutionary_search(fitness, space, cfg)
rs = random_search(fitness, space, cfg.budget, seed=0)
print("target found:", ea.best.genotype == target)
print("EA best", ea.best.fitness, "random best", rs.best.fitness, "calls", cfg.budget)
for row in ea.history[::5]:
    print(row["generation"], row["best"], round(row["mean"], 2))


# With a FLOPs budget every individual ever scored is feasible.

# In[3]:

budget = constraint_preset(space, "small")
res = evolutionary_search(fitness, space, EvoConfig(population=20, generations=10,
                                                      max_flops=budget))
print(max(i.resources.flops for i in res.population), "<=", budget)
print(count_resources(space, target).flops, "flops at the unconstrained target")
