"""Transfer a learned representation to a new task with few samples.

Twenty logistic training tasks share a two-dimensional projection of a
thirty-dimensional input. We learn the projection from the pooled training
data, then fit only a two-parameter head on the new task. The baseline learns
projection and head from the new task's samples alone.

Run with ``python3 demos/01_transfer_vs_isolation.py``; it takes well under
a minute.
"""

import numpy as np

from divlearn.envs import make_environment, sample_task_dataset, sample_training_sets
from divlearn.erm import (
    OptConfig,
    isolation_baseline,
    model_class_for,
    population_excess_risk,
    test_phase_erm,
    train_phase_erm,
)
from divlearn.experiments import representation_sine
from divlearn.models import Family

D, R, T, N = 30, 2, 20, 150
M_GRID = (5, 10, 20, 40)
TRIALS = 5

transfer = {m: [] for m in M_GRID}
isolation = {m: [] for m in M_GRID}
for trial in range(TRIALS):
    env = make_environment(Family.LINEAR_LOGISTIC, D, R, T, seed=trial)
    mc = model_class_for(env)
    opt = OptConfig(seed=trial, restarts=2)

    # Stage one: shared representation from t * n pooled samples.
    fit = train_phase_erm(sample_training_sets(env, N, seed=trial), mc, opt)
    print(f"trial {trial}: sin of largest angle to the true subspace {representation_sine(fit.rep, env.rep_truth):.3f}")

    # Stage two: a new task with only m labelled samples.
    for m in M_GRID:
        ds0 = sample_task_dataset(env, 0, m, seed=trial)
        head = test_phase_erm(ds0, fit.rep, mc, opt, head_cap=env.c1)
        transfer[m].append(population_excess_risk(env, fit.rep, head, 50_000, trial).value)
        iso_head, iso_rep = isolation_baseline(ds0, mc, opt)
        isolation[m].append(population_excess_risk(env, iso_rep, iso_head, 50_000, trial).value)

print("\n  m   transfer   isolation   (median excess risk)")
for m in M_GRID:
    print(f"{m:3d}   {np.median(transfer[m]):8.4f}   {np.median(isolation[m]):9.4f}")
