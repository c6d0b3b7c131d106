"""Single-thread inference time for ED+ES of one 10-slice 192 px stack."""
import argparse
import time

import numpy as np
from threadpoolctl import threadpool_limits

from _common import dump, setup
from cmrfcn import data, network as net

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--repeats", type=int, default=3)
p.add_argument("--threads", type=int, default=1)
p.add_argument("--out", default="runs/timing")
a = p.parse_args()
out = setup(a.out)

spec = data.random_phantom_spec(np.random.default_rng(0), image_size=192, n_slices=10)
vol, _ = data.generate_phantom(spec)
model = net.build_network(net.NetworkConfig(k=4, input_size=192), seed=0)
# one training-mode pass records batch-norm statistics
net.forward(model, data.normalize_intensity(vol.data[0])[:2, None], "train")

times = []
with threadpool_limits(a.threads):
    for _ in range(a.repeats):
        t0 = time.perf_counter()
        for f in (0, spec.es_frame):
            net.segment(model, data.normalize_intensity(vol.data[f]))
        times.append(time.perf_counter() - t0)
dump(out / "result.json", {"seconds": times, "threads": a.threads, "slices": 2 * spec.n_slices})
