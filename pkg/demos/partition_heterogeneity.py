"""
How skewed are the client splits?
=================================

Three ways to hand one synthetic dataset to four clients, compared by the
mean pairwise total-variation distance between client label histograms.
"""

import numpy as np

from fedlora import RngStream
from fedlora.data import gen_mixture, label_histogram, mean_pairwise_tv, partition_domains, partition_iid, partition_shards

ds = gen_mixture(per_class=400, rng=RngStream(0), num_domains=4, domain_shift=1.0, label_skew=0.6)
print(len(ds), "examples,", ds.num_classes, "classes,", ds.num_domains, "domains")

splits = {
    "iid": partition_iid(ds, 4, rng=RngStream(1)),
    "shards (8 per client)": partition_shards(ds, 32, 8, 4, rng=RngStream(1)),
    "shards (2 per client)": partition_shards(ds, 8, 2, 4, rng=RngStream(1)),
    "domain": partition_domains(ds, 4, rng=RngStream(1)),
}
for name, part in splits.items():
    part.validate(np.arange(len(ds)))
    print(f"{name:22s} mean pairwise TV {mean_pairwise_tv(ds, part):.3f}")

# the domain split: each client is dominated by its home classes
np.set_printoptions(precision=2, suppress=True)
for cid, c in enumerate(splits["domain"].clients):
    print("client", cid, label_histogram(ds, c.all))
