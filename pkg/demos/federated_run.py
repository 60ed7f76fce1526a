"""
One federated experiment, round by round
========================================

Four domain-skewed clients train personal-A adapters; the server averages
B only. Round 0 is the frozen base with zero adapters.
"""

from fedlora import parse_config, run_experiment
from fedlora.output import rounds_table

cfg = parse_config(overrides=["federation.rounds=4"], env={})
res = run_experiment(cfg)

print("pretrained base held-out accuracy: %.3f" % res.base.pretrain_meta["heldout_accuracy"])
for rep in res.reports:
    accs = " ".join(f"{r.eval.accuracy:.3f}" for r in rep.clients)
    print(f"round {rep.round}: clients [{accs}]  mean {rep.mean_eval.accuracy:.3f}  uplink {rep.uplink_bytes} B")

print()
print(rounds_table(res.reports[-1:]))
