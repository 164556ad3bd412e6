"""Which experts give an illness away?

Two groups of 100 prompts differ only in the illness named in them. A
Welch t-test on every (layer, expert) load finds the experts whose load
shifts with the illness. The control splits a single illness in two, so
any expert it flags is noise.

Run:  python demos/leaky_experts.py [illness_a illness_b]
"""
import sys

import numpy as np

from moeleak.corpus import illness_names
from moeleak.harness import illness_ttest
from moeleak.moe import build_model, preset

a, b = (int(v) for v in sys.argv[1:3]) if len(sys.argv) > 2 else (97, 73)
model = build_model(preset("toy"))
names = illness_names()
ab, control = illness_ttest(model, 100, a, b, seed=0)

m = model.config.num_experts
print(f"{names[a]} vs {names[b]}: {ab.leaky_count} experts with |t| > {ab.threshold}")
print(f"{names[a]} split in two:  {control.leaky_count}\n")
for idx in np.argsort(-np.abs(ab.t))[:8]:
    layer, expert = divmod(int(idx), m)
    print(f"  layer {layer} expert {expert:2d}  t = {ab.t[idx]:+6.2f}")
