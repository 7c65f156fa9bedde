#!/usr/bin/env python3
"""Decompose predictions into base + location + feature + interaction parts,
then recover the hidden coefficient surfaces.

Location enters the game as one joint player (both coordinates swap together),
and every row keeps its point id so perturbed rows still retrieve their true
neighbourhoods.  For a target generated as b1(u,v)*x1 + b2(u,v)*x2 the slope
estimate (phi_j + phi_geo_j) / (x_j - mean x_j) recovers b_j at each location.
"""

import numpy as np

from geoagg import (
    ContextPool,
    ModelConfig,
    QueryPool,
    RowBatch,
    TrainConfig,
    generate_gwr,
    geoshapley_explain,
    gwr_beta1,
    gwr_beta2,
    local_coefficients,
    make_shap_predictor,
    split_dataset,
    train,
)

ds = generate_gwr(900, seed=42)
train_ds, test_ds = split_dataset(ds, split=0.7, seed=0)
config = ModelConfig(l_max=32)
params, _ = train(train_ds, config, TrainConfig(epochs=15, seed=0))

rng = np.random.default_rng(0)
background = RowBatch.from_records(
    [train_ds.points[i] for i in sorted(rng.choice(train_ds.n, 30, replace=False))]
)
inst_records = [test_ds.points[i] for i in sorted(rng.choice(test_ds.n, 40, replace=False))]
instances = RowBatch.from_records(inst_records)

predictor = make_shap_predictor(params, config, ContextPool(train_ds.points),
                                QueryPool(inst_records))
result = geoshapley_explain(predictor, instances, background)

# the four components reconstruct the prediction exactly
preds = predictor(instances.ids, instances.coords, instances.x)
print(f"max |phi0 + phi_geo + sum phi_j + sum phi_geo_j - prediction| = "
      f"{np.abs(result.reconstruct() - preds).max():.2e}")
print(f"base value phi0 = {result.phi0:.3f}; "
      f"mean |location effect| = {np.abs(result.phi_geo).mean():.3f}")

beta = local_coefficients(result, instances, background)
for j, surface in enumerate((gwr_beta1, gwr_beta2)):
    truth = surface(instances.coords[:, 0], instances.coords[:, 1])
    valid = np.isfinite(beta[:, j])
    r = np.corrcoef(beta[valid, j], truth[valid])[0, 1]
    print(f"x{j + 1}: recovered slopes correlate with the true surface at r = {r:.3f} "
          f"({valid.sum()}/{len(valid)} rows usable)")
