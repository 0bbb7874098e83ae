# %% [markdown]
# # Bytes as the fleet grows
#
# Broadcasting every observed cell grows linearly with the number of agents.
# Scheduling sends each cell once, from its best observer, so total traffic
# follows the covered area instead.

# %%
from coopsched.netsim import CommBudget, scaling_sweep
from coopsched.relax import ToyParams
from coopsched.scene import SceneConfig
from coopsched.sched import SchedulerConfig

scene = SceneConfig()
params = ToyParams.default(scene.grid)
res = scaling_sweep(scene, [2, 4, 8, 16], range(5), CommBudget(1e9, 10), params,
                    SchedulerConfig(tau=params.tau))

# %%
print(f"{'N':>3} {'scheduled B':>12} {'broadcast B':>12} {'utility':>9}")
for n in (2, 4, 8, 16):
    print(f"{n:3d} {res.mean(n, 'bytes_total'):12.0f} {res.mean(n, 'bytes_baseline'):12.0f} "
          f"{res.mean(n, 'frame_utility'):9.2f}")

# %% [markdown]
# Going from 4 to 16 agents:

# %%
for key in ("bytes_total", "bytes_baseline"):
    print(key, round(res.mean(16, key) / res.mean(4, key), 2))
