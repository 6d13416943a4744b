"""Criterion-5 calibration: overfit 4 episodes at full config, time the steps."""
import sys, time
import numpy as np
import torch

sys.path.insert(0, "src")
from pixelbc import env as E
from pixelbc.data import record_from_trajectory
from pixelbc.policy import PolicyConfig
from pixelbc.training import TrainConfig, train_bc
from pixelbc.idm import IDMConfig, train_idm

torch.set_num_threads(2)

records = []
for i in range(4):
    traj = E.generate_episode(E.EnvConfig(seed=i), E.expert_policy,
                              np.random.default_rng(i))
    records.append(record_from_trajectory(traj))
print("episodes:", [r.n_frames for r in records], flush=True)

t0 = time.time()
tcfg = TrainConfig(max_steps=2000, eval_interval=25, patience=10_000, seed=0,
                   augment=False)
live = lambda row: print(f"step {row['step']:5d} train_ppl {row['train_ppl']:.4f} "
                         f"val_ppl {row['val_ppl']:.4f} wall {row['wall']:.0f}s",
                         flush=True)
net, m = train_bc(records, records, tcfg, PolicyConfig(), stop_train_ppl=1.05,
                  on_eval=live)
print(f"POLICY: steps={m.total_steps} train_ppl "
      f"{m.rows[-1]['train_ppl']:.4f} in {time.time()-t0:.0f}s", flush=True)

t0 = time.time()
inet, im = train_idm(records, records, IDMConfig(),
                     TrainConfig(max_steps=2000, eval_interval=25,
                                 patience=10_000, seed=0, augment=False),
                     stop_accuracy=0.95)
for row in im.rows[-3:]:
    print(f"step {row['step']:5d} val_acc {row['val_accuracy']:.4f}", flush=True)
print(f"IDM: best_acc={im.best_val_accuracy:.4f} rows={len(im.rows)} "
      f"in {time.time()-t0:.0f}s", flush=True)
