"""Set prediction with a mini detection transformer.

Trains briefly on toy scenes (axis-aligned rectangles of two classes),
then prints which query slots the bipartite matcher paired with each
ground-truth object.

Run: python3 demos/05_set_prediction.py  (about a minute on a CPU)
"""

import os
import tempfile

import numpy as np

from deskml import rng as R
from deskml.baselines import build_detr_mini
from deskml.checkpoint import load_checkpoint
from deskml.config import Config
from deskml.data import ShardSpec, build_dataset
from deskml.matchers import hungarian
from deskml.train import run_trainer

workdir = os.path.join(tempfile.mkdtemp(), "detr_run")
config = Config({
    "model": {"name": "detr_detection"},
    "dataset": {"name": "boxes_detection",
                "num_train_examples": 64, "num_eval_examples": 16,
                # report metrics on the training scenes: this demo
                # deliberately overfits a tiny world
                "eval_on_train": True},
    "batch_size": 32,
    "total_steps": 1200,
    "eval_every": 300,
    "optimizer": {"kind": "adam", "lr": 3e-4},
})
metrics = run_trainer("detection", config, workdir, seed=0)
print("metrics after 1200 steps:", metrics)

# Reload the trained parameters and inspect one image's matching.
state = load_checkpoint(os.path.join(workdir, "ckpt_1200.bin"))
ds = build_dataset("boxes_detection", ShardSpec(0, 1, 1, 4),
                   R.split(R.RngKey.from_seed(0), 2)[0], config)
contract = build_detr_mini(config, ds.meta_data)
arch = contract.build_model()
batch = next(ds.eval_iter())
outputs, _ = arch.apply(state.params, state.model_state, batch["inputs"],
                        train=False)

# show the first eval image that actually contains objects
counts = (batch["label"].data != ds.meta_data.num_classes).sum(-1)
i = int(np.argmax(counts > 0))
labels = batch["label"].data[i]
tboxes = batch["boxes"].data[i]
logits = outputs["class_logits"].data[i]
pboxes = outputs["boxes"].data[i]
real = np.nonzero(labels != ds.meta_data.num_classes)[0]
print(f"\nimage {i} has {len(real)} objects; 8 query slots available")
if len(real):
    probs = np.exp(logits - logits.max(-1, keepdims=True))
    probs /= probs.sum(-1, keepdims=True)
    cost = (1.0 - probs[:, labels[real]].T
            + 5.0 * np.abs(tboxes[real][:, None] - pboxes[None]).sum(-1))
    match = hungarian(cost)
    for target, slot in zip(real, match.row_to_col):
        err = np.abs(pboxes[slot] - tboxes[target]).mean()
        print(f"  object {target} (class {labels[target]}) -> slot {slot}, "
              f"predicted class {logits[slot].argmax()}, box L1 {err:.3f}")
