"""End-to-end training: registry lookup, data-parallel trainer, metrics
log, checkpointing, and resume.

Run: python3 demos/04_train_classifier.py
"""

import json
import os
import tempfile

from deskml.config import Config
from deskml.models import registered_models
from deskml.train import run_trainer

print("registered models:", registered_models())

workdir = os.path.join(tempfile.mkdtemp(), "mlp_run")
config = Config({
    "model": {"name": "fully_connected_classification"},
    "dataset": {"name": "blobs_classification",
                "num_train_examples": 256, "num_eval_examples": 64},
    # 2 simulated devices, each with a 16-example sub-batch; gradients
    # are averaged across devices every step.
    "topology": {"host_count": 1, "devices_per_host": 2},
    "batch_size": 16,
    "total_steps": 100,
    "eval_every": 25,
    "optimizer": {"kind": "adam", "lr": 1e-2},
})

metrics = run_trainer("classification", config, workdir, seed=0)
print("final eval metrics:", metrics)

print("\nartifacts in", workdir)
for name in sorted(os.listdir(workdir)):
    print(" ", name)

print("\nlast metrics.jsonl records:")
with open(os.path.join(workdir, "metrics.jsonl")) as f:
    for line in f.read().splitlines()[-4:]:
        record = json.loads(line)
        print(f"  step {record['step']:>3} {record['name']:<15} "
              f"{record['value']:.4f}")

# Calling run_trainer again with a larger budget resumes from the
# newest ckpt_<step>.bin instead of starting over.
config_more = Config({**config.to_dict(), "total_steps": 150})
metrics = run_trainer("classification", config_more, workdir, seed=0)
print("\nresumed to step 150, eval accuracy:", metrics["accuracy"])
