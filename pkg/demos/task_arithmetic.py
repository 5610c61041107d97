"""Editing a pre-trained model by adding and subtracting task vectors.

Pre-trains on the coarse corpus, fine-tunes one model per task two ways
(ordinary and in the tangent space), then merges the task vectors.

    python3 demos/task_arithmetic.py [seed]
"""
import sys

import numpy as np

from tta.bench import ExperimentSetup, addition_results, negation_results, prepare_seed
from tta.tasks import accuracy

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
run = prepare_seed(seed, ExperimentSetup())
suite = run.suite

print(f"seed {seed}: {len(suite.specs)} tasks, control task {suite.control}\n")
print("task  zero-shot  fine-tuned  tangent-fine-tuned")
for t in range(len(suite.specs)):
    zs = accuracy(run.base, suite.split(t, "test"))
    print(f"{t:>4}  {zs:9.3f}  {run.nonlinear[t].test_accuracy:10.3f}  {run.linearized[t].test_accuracy:18.3f}")

# One merged model that should solve all tasks at once.
print("\nadding all task vectors, alpha picked on held-out data")
for method, r in addition_results(run).items():
    per_task = " ".join(f"{a:.2f}" for a in r.accuracies)
    print(f"  {method:<10} alpha={r.alpha:.2f}  normalized={r.normalized_accuracy:.3f}  per task [{per_task}]")

# Forgetting: subtract one vector while keeping the control task usable.
print("\nsubtracting one task vector (control accuracy kept at 95% of zero-shot)")
for method, results in negation_results(run).items():
    target = np.mean([r.target_accuracy for r in results])
    control = np.mean([r.control_accuracy for r in results])
    print(f"  {method:<10} mean target acc {target:.3f}  mean control acc {control:.3f}")
