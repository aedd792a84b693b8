"""
Checking the second-order meta-gradient
=======================================

The composite objective adds the meta-train task loss at the original
parameters to the alignment losses at the adapted parameters. Its gradient
flows through the inner SGD step. Here we compare autograd against central
differences on a small MLP, then show how much the first-order shortcut
drifts.
"""

import numpy as np
import torch

from etta import MLPBackbone, TrainConfig, generate_synthetic_domains, init_params
from etta.metatrain import composite_loss, sample_task

torch.set_default_dtype(torch.float64)

##############################################################################
# A 2-8-6 MLP with two class prototypes: 90 parameters in total. The clip
# threshold is huge so clipping never fires.

domains = generate_synthetic_domains("rotated_two_moons", 3, 150, [0, 30, 60], seed=1)
params = init_params(MLPBackbone(2, 8, 6), 2, np.random.default_rng(0))
cfg = TrainConfig(hidden=8, d_z=6, alpha=0.1, clip_norm=1e6, batch_per_domain=16, n_te=16)
task = sample_task(domains, cfg, np.random.default_rng(0))


def gradient(config):
    leaves = params.as_leaves()
    total, _, _ = composite_loss(leaves, task, config)
    return torch.cat([g.reshape(-1) for g in torch.autograd.grad(total, leaves.tensors())]).numpy()


def loss_at(flat):
    return float(composite_loss(params.unflatten(flat).as_leaves(), task, cfg)[0].detach())


##############################################################################
# Central differences with step 1e-5, one coordinate at a time.

x0 = params.flatten().numpy()
fd = np.array([(loss_at(x0 + h) - loss_at(x0 - h)) / 2e-5 for h in np.eye(x0.size) * 1e-5])

second = gradient(cfg)
first = gradient(cfg.replace(second_order=False))
print("relative error, second order:", np.linalg.norm(second - fd) / np.linalg.norm(fd))
print("relative error, first order: ", np.linalg.norm(first - fd) / np.linalg.norm(fd))
