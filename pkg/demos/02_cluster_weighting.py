# coding: utf-8

# # Why the cluster weighting matters
#
# Large clusters in this model also have higher response rates.  Treating
# every subject as independent ignores both the correlation and the link
# between size and outcome.  Here we compare the three weighting modes on
# the same data.

# In[1]:

import numpy as np

from msgee import FitConfig, SimConfig, fit_with_influence, pointwise_se, simulate_study


# In[2]:

data, truth = simulate_study(SimConfig(n_clusters=150, rng_seed=3))
times = np.array([0.5, 1.0, 1.5])


# In[3]:

for mode in ("tcm", "acm", "iid"):
    fit, infl = fit_with_influence(data, 2, FitConfig(weight_mode=mode), times=times)
    se = pointwise_se(infl)
    print(mode, "beta_1:", np.round(fit.beta[:, 1], 3), "se:", np.round(se[:, 1], 4))

print("truth  beta_1:", truth.beta(times)[:, 1])


# The `iid` standard errors come out smaller: they treat thousands of
# correlated subjects as independent.  A short simulation shows what that
# does to coverage (increase `reps` for a sharper picture).

# In[4]:

from dataclasses import replace

from msgee.montecarlo import run_replications

rep = run_replications(replace(SimConfig(), n_clusters=50), reps=40, report_times=(1.0,),
                       modes=("tcm", "iid"), seed=11)
for mode in ("tcm", "iid"):
    c = rep.cell("pointwise", mode=mode, coefficient=1, t=1.0)
    print(f"{mode}: bias {c['bias']:+.4f}  ASE {c['ase']:.4f}  MCSD {c['mcsd']:.4f}  CP {c['cp']:.3f}")
