"""
Low-rank adapters on a frozen head
==================================

A fresh adapter has B = 0, so the adapted model starts out identical to the
frozen one. Only B (m x r) leaves a personal-A client; a full adapter also
ships A (r x n).
"""

import numpy as np

from fedlora import RngStream, init_adapter
from fedlora.adapters import effective_weights, extract_uplink, payload_bytes
from fedlora.layers import LinearLayer, linear_forward, lora_forward

m, n, r = 8, 64, 4
rng = RngStream(7)
w0 = LinearLayer(rng.child(0).generator().standard_normal((m, n)))
x = rng.child(1).generator().standard_normal(n)

adapter = init_adapter(m, n, r, alpha=8.0, dropout=0.1, strategy="plora", rng=rng.child(2))
print("scale alpha/r:", adapter.scale)
print("fresh adapter matches frozen head:", np.array_equal(lora_forward(w0, adapter, x), linear_forward(w0, x)))

# pretend some training happened
adapter = adapter.with_matrices(B=0.1 * rng.child(3).generator().standard_normal((m, r)))
merged = effective_weights(w0.weight, adapter)
print("merged weights reproduce the two-path forward:",
      np.allclose(linear_forward(LinearLayer(merged), x), lora_forward(w0, adapter, x), rtol=0, atol=1e-12))

# what goes over the wire
p = extract_uplink(adapter, "plora", sample_count=100)
print("personal-A uplink carries", sorted(p.matrices), "in", p.byte_size, "bytes")
for strategy in ("plora", "full_lora", "ffa_lora"):
    print(f"  {strategy:9s} {payload_bytes(strategy, m, n, r):6d} bytes per client per round")
