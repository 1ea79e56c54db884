# coding: utf-8

# # Kendall tau
#
# The correlation study asks whether the supernet orders architectures the
# same way as training each one alone. Tau counts concordant minus
# discordant pairs, corrected for ties.

# In[1]:

import numpy as np

from oneshot_nas import kendall_tau

oneshot = [0.61, 0.64, 0.64, 0.70, 0.72]
standalone = [0.80, 0.83, 0.82, 0.86, 0.85]
print(kendall_tau(oneshot, standalone))
print(kendall_tau(oneshot, oneshot), kendall_tau(oneshot, [-s for s in standalone]))


# Noise on the stand-alone side pulls tau towards zero quickly when the true
# differences are small.

# In[2]:

rng = np.random.default_rng(0)
truth = np.linspace(0.80, 0.86, 20)
for sd in (0.0, 0.005, 0.02, 0.05):
    taus = [kendall_tau(truth, truth + rng.normal(0, sd, 20)) for _ in range(200)]
    print(f"noise sd {sd:.3f}: median tau {np.median(taus):.2f}")
