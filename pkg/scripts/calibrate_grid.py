"""Short lr x augmentation sensitivity grid on the full-label corpus."""
import sys, time
import numpy as np
import torch

sys.path.insert(0, "src")
from pixelbc import env as E
from pixelbc import data as D
from pixelbc import runtime as R
from pixelbc.policy import PolicyConfig
from pixelbc.training import TrainConfig, train_bc

torch.set_num_threads(2)

labeled = []
for i in range(200):
    traj = E.generate_episode(E.EnvConfig(seed=i), E.expert_policy,
                              np.random.default_rng(i))
    labeled.append(D.record_from_trajectory(traj, provenance="expert"))
rng = np.random.default_rng(0)
order = rng.permutation(200)
val = [labeled[i] for i in order[:20]]
train = [labeled[i] for i in order[20:]]

pcfg = PolicyConfig()
for lr in (3e-4, 1e-3):
    for augment in (True, False):
        t0 = time.time()
        tcfg = TrainConfig(lr=lr, max_steps=300, eval_interval=100, patience=100,
                           seed=0, augment=augment)
        net, m = train_bc(train, val, tcfg, pcfg)
        score = R.run_agent(E.EnvConfig(), net, episodes=20).mean_score
        curve = [round(r["val_ppl"], 3) for r in m.rows]
        print(f"lr={lr} aug={augment}: val_ppl {curve} online={score:.2f} "
              f"({time.time()-t0:.0f}s)", flush=True)
