"""Quick learnability dry run: small budgets, prints metric trajectories."""

import sys
import time

sys.path.insert(0, "src")

import numpy as np

from cornerkit import cornergraph as cg
from cornerkit import harness, heads, synth

data = synth.generate(synth.SynthConfig(n_samples=2000, seed=123))
train_set, test_set = cg.split(data, 0.8, 42)
print(f"data: {len(train_set)} train / {len(test_set)} test, "
      f"shot rate {np.mean([c.shot_taken for c in data]):.3f}")

# step-time measurement at the pinned receiver configuration
cfg = harness.TrainConfig(task=heads.RECEIVER, steps=3, eval_every=10**9)
t0 = time.time()
harness.train(cfg, train_set[:1280], test_set[:128])
print(f"pinned receiver config: {(time.time() - t0) / 3:.2f} s/step (3 steps, incl eval)")

cfg = harness.TrainConfig(task=heads.RECEIVER, steps=600, eval_every=200)
t0 = time.time()
ckpt = harness.train(cfg, train_set, test_set,
                     log=lambda s, l: print(f"  step {s}: eval loss {l:.4f}", flush=True))
dt = time.time() - t0
report = harness.evaluate(ckpt, test_set)
print(f"receiver 600 steps ({dt:.0f}s): top1={report.top1:.3f} top3={report.top3:.3f}")
