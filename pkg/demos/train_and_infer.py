"""Overfit the tiny model on the synthetic shapes set, save it, reload it and classify one image.

Run: python3 demos/train_and_infer.py [output-dir]
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from edgenext import SyntheticDataset, load_weights, model_forward, save_config, save_weights, tiny, train_loop
from edgenext.tensor import softmax

out = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="edgenext-"))
out.mkdir(parents=True, exist_ok=True)

cfg = tiny()
data = SyntheticDataset(seed=0)
result = train_loop(cfg, data, steps=2000, eval_every=50, target_accuracy=1.0, log=print)
save_weights(result.weights, out / "weights.edgw")
save_config(cfg, out / "config.json")
(out / "curve.csv").write_text(result.curve_csv())
print(f"saved to {out}")

weights = load_weights(out / "weights.edgw", cfg)
for index in (0, 7, 13):
    x, label = data.sample(index)
    probs = softmax(model_forward(cfg, weights, x[None]).astype(np.float64))[0]
    print(f"sample {index}: label {label}, predicted {probs.argmax()} (p={probs.max():.3f})")
