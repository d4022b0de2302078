"""How the cut point moves work between a device and the server.

Builds the default 20-64-64-64-10 network, cuts it at each candidate and
prints the client share of parameters and FLOPs, then the simulated round
time on every device kind for a 128-sample round.
"""

import numpy as np

from s2fl.device_sim import QUALITY_FLOPS, QUALITY_RATE, DeviceProfile, ServerProfile, portion_round_time
from s2fl.nn_core import build_model, split_model

model = build_model([20, 64, 64, 64, 10], (1, 2, 3), np.random.default_rng(0))
print(f"full model: {model.param_bytes} bytes, {model.flops_per_sample} FLOPs per sample\n")

print("split  client bytes  client FLOPs/sample  server FLOPs/sample")
for s in model.split_candidates:
    client, server = split_model(model, s)
    print(f"{s:>5}  {client.param_bytes:>12}  {client.flops_per_sample:>19}  {server.flops_per_sample:>19}")

server = ServerProfile()
print("\nround seconds (p = 128)")
print(f"{'compute':>8} {'link':>5} " + " ".join(f"{'s=' + str(s):>8}" for s in model.split_candidates))
for cq, flops in QUALITY_FLOPS.items():
    for rq, rate in QUALITY_RATE.items():
        dev = DeviceProfile(0, flops, rate)
        row = []
        for s in model.split_candidates:
            client, srv = split_model(model, s)
            row.append(portion_round_time(client, srv, 128, dev, server, 20, s).total_seconds)
        print(f"{cq:>8} {rq:>5} " + " ".join(f"{t:8.4f}" for t in row))

# A slow-link device pays mostly for shipping its client portion, so a small
# cut helps it most; a fast device barely notices the difference.
