# coding: utf-8

# # Fitting a coefficient path and a simultaneous band
#
# We simulate one clustered study, fit the occupation model for the
# response state (state 2) and put a 95% band around the first slope.

# In[1]:

import numpy as np

from msgee import (FitConfig, SimConfig, confidence_band, fit_with_influence,
                   pointwise_se, response_jump_percentiles, simulate_study)


# In[2]:

data, truth = simulate_study(SimConfig(n_clusters=80, rng_seed=1))
len(data.clusters), sum(len(c.members) for c in data.clusters)


# The estimate is a step function that changes only where the data change.
# `fit_with_influence` solves at every such time and keeps the per-cluster
# influences needed for standard errors and bands.

# In[3]:

fit, infl = fit_with_influence(data, 2, FitConfig(weight_mode="tcm"))
se = pointwise_se(infl)
print(fit.grid.size, "time points,", fit.converged.mean().round(3), "converged")


# The points that fail all come before the first response is observed:
# with every response equal to 0 there is no finite intercept.

# In[4]:

print("last non-estimable time:", fit.grid[~fit.converged].max())


# In[5]:

for t in (0.5, 1.0, 1.5):
    k = np.searchsorted(fit.grid, t, side="right") - 1
    print(f"t={t}: beta_1 = {fit.beta[k, 1]:+.3f} (se {se[k, 1]:.3f}), truth {truth.beta(t)[0, 1]:+.3f}")


# Bands are unstable where few response jumps are seen, so the domain is
# cut at the 10th and 90th percentiles of the observed jump times.

# In[6]:

domain = response_jump_percentiles(data, 2)
band = confidence_band(fit, infl, 1, alpha=0.05, B=1000, domain=domain, rng_seed=7)
print("domain", np.round(domain, 3), "critical value", round(band.c_alpha, 3))
print("truth inside band:", band.covers(truth.beta(band.grid)[:, 1]))
print("zero excluded somewhere:", band.excludes_zero())
