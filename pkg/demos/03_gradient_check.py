"""
Checking gradients against finite differences
=============================================

Every parameter block of a small model, differentiated end to end through
the association loss.
"""

# %%
import numpy as np

from transstam import autodiff as ad
from transstam.model import AssociationInput, ModelConfig, forward, init_params
from transstam.training import bce_loss

cfg = ModelConfig(d=8, heads=2, layers=1, ffn_dim=8, appearance_dim=4, window_T=4)
rng = np.random.default_rng(1)
params = init_params(cfg, seed=0, dtype=np.float64)
params["rstpe.w"] = rng.normal(0, 0.5, params["rstpe.w"].shape)

batch = AssociationInput(
    rng.normal(size=(2, 3, 4)), rng.uniform(0.2, 0.8, (2, 3, 4)), np.tile([1.0, 2.0, 3.0], (2, 1)),
    np.array([[True, True, True], [True, True, False]]), rng.normal(size=(2, 4)), rng.uniform(0.2, 0.8, (2, 4)), 4,
)
gt = np.eye(2).ravel()


def loss(p):
    probs = forward(p, batch, cfg)
    return bce_loss(ad.getitem(probs, (slice(None), 1)), gt, np.ones(4, bool))


# %%
# Analytic gradients come from one backward pass; the check perturbs each
# scalar by +-1e-5 and compares.
leaves = {k: ad.parameter(v) for k, v in params.items()}
ad.backward(loss(leaves))
for name in ("app_proj.weight", "rstpe.w", "head.w2"):
    print(name, "gradient norm", np.linalg.norm(leaves[name].grad))

print("max relative error:", ad.finite_difference_check(loss, params))
