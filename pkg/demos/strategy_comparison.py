"""
Personal A versus the usual adapter baselines
=============================================

Same data, same frozen base, three ways of sharing adapter matrices:
personal A with shared B, both shared, and a frozen A with shared B.
"""

import numpy as np

from fedlora import parse_config, run_experiment

seed = 0
base = None
for strategy in ("plora", "full_lora", "ffa_lora"):
    cfg = parse_config(overrides=[f"adapter.strategy={strategy}", f"seed={seed}"], env={})
    res = run_experiment(cfg, base=base)
    base = res.base  # same seed, data and model: reuse the pretrained base
    final = res.reports[-1]
    per_client = np.array([r.eval.accuracy for r in final.clients])
    print(f"{strategy:9s} round0 {res.reports[0].mean_eval.accuracy:.3f} -> final {per_client.mean():.3f}  "
          f"per client {np.round(per_client, 3)}  total uplink {sum(r.uplink_bytes for r in res.reports)} B")
