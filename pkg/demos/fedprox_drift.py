"""
Proximal term and client drift
==============================

After one federated round, each client trains one more local epoch with a
growing proximal weight mu. The distance from the downlinked B shrinks as mu
grows; mu = 0 is plain SGD.
"""

from dataclasses import replace

import numpy as np

from fedlora import parse_config, run_experiment
from fedlora.federation import local_train

res = run_experiment(parse_config(overrides=["federation.rounds=1"], env={}))
for mu in (0.0, 0.01, 0.1, 1.0, 10.0):
    drift = []
    for c in res.clients:
        c = replace(c, hyper=replace(c.hyper, prox_mu=mu, local_epochs=1))
        out, _ = local_train(c, res.base, 2)
        drift.append(np.linalg.norm(out.adapter.B - c.reference["B"]))
    print(f"mu={mu:<5} mean ||B - B_ref|| = {np.mean(drift):.4f}")
