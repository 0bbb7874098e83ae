# %% [markdown]
# # Trading accuracy for bytes
#
# The toy pipeline is trained end to end through the relaxed selector. The
# sparsity weight lambda pushes the feature threshold up, which removes cells
# from every agent's candidate set.

# %%
from itertools import islice

from coopsched.netsim import CommBudget, run_frame
from coopsched.relax import TrainParams, train_toy
from coopsched.scene import SceneConfig
from coopsched.sched import SchedulerConfig

scenario = SceneConfig().build()
runs = {lam: train_toy([scenario], TrainParams(epochs=30, lam=lam)) for lam in (0.0, 0.2, 10.0)}

# %%
for lam, run in runs.items():
    first, last = run.metrics[0], run.metrics[-1]
    frame = run_frame(scenario, run.params, SchedulerConfig(tau=run.params.tau), CommBudget())
    print(f"lambda={lam:5.2f}: loss_task {first.loss_task:.3f} -> {last.loss_task:.3f}, "
          f"kappa {run.params.kappa:.3f}, frame bytes {frame.total_bytes}")

# %% [markdown]
# Per-epoch metrics for the unpenalised run.

# %%
for row in islice(runs[0.0].csv_rows(), 6):
    print(row)
