"""Limited + IDM + Imputed rehearsal (Full comes from calibrate_long).

Usage: calibrate_mixture.py [limited_steps] [imputed_steps]
"""
import sys, time
import numpy as np
import torch

sys.path.insert(0, "src")
from pixelbc import env as E
from pixelbc import data as D
from pixelbc import runtime as R
from pixelbc.idm import IDMConfig, impute, train_idm
from pixelbc.policy import PolicyConfig
from pixelbc.training import (TrainConfig, _impute_until, limited_slice,
                              match_frames, train_bc)

torch.set_num_threads(2)
LIM_STEPS = int(sys.argv[1]) if len(sys.argv) > 1 else 1400
IMP_STEPS = int(sys.argv[2]) if len(sys.argv) > 2 else 2800

labeled = []
for i in range(200):
    traj = E.generate_episode(E.EnvConfig(seed=i), E.expert_policy,
                              np.random.default_rng(i))
    labeled.append(D.record_from_trajectory(traj, provenance="expert"))
noisy_pol = E.noisy_expert_policy(0.2)
unlabeled = []
for i in range(400):
    traj = E.generate_episode(E.EnvConfig(seed=10_000 + i), noisy_pol,
                              np.random.default_rng(10_000 + i))
    unlabeled.append(D.EpisodeRecord(frames=np.stack(traj.frames),
                                     provenance="noisy_expert", seed=traj.seed))
rng = np.random.default_rng(0)
order = rng.permutation(200)
val = [labeled[i] for i in order[:20]]
train = [labeled[i] for i in order[20:]]
limited = limited_slice(train, 0.1)
print(f"limited {len(limited)} episodes, {sum(r.n_frames for r in limited)} frames",
      flush=True)

t0 = time.time()
live = lambda name: (lambda row: print(f"[{name}] {row['step']} "
                                       f"tp {row.get('train_ppl', 0):.3f} "
                                       f"vp {row.get('val_ppl', row.get('val_loss', 0)):.3f}",
                                       flush=True))
tcfg = TrainConfig(max_steps=LIM_STEPS, eval_interval=50, patience=6, seed=0)
lnet, lm = train_bc(limited, val, tcfg, PolicyConfig(), on_eval=live("limited"))
print(f"LIMITED best_vp={lm.best_val_ppl:.4f} early={lm.early_stopped} "
      f"steps={lm.total_steps} ({time.time()-t0:.0f}s)", flush=True)

icfg = IDMConfig()
itc = TrainConfig(max_steps=700, eval_interval=50, patience=6, seed=0)
idm_net, im = train_idm(limited, val, icfg, itc,
                        on_eval=lambda r: print(f"[idm] {r['step']} "
                                                f"vl {r['val_loss']:.3f} "
                                                f"va {r['val_accuracy']:.3f}", flush=True))
print(f"IDM best_acc={im.best_val_accuracy:.3f} ({time.time()-t0:.0f}s)", flush=True)

hidden = [D.EpisodeRecord(frames=r.frames, provenance="noisy_expert", seed=r.seed)
          for r in val]
recovered = impute(hidden, idm_net)
agree = sum(int(a == b) for rec, truth in zip(recovered, val)
            for a, b in zip(rec.actions, truth.actions))
total = sum(r.n_frames for r in val)
print(f"hide-and-compare agreement {agree/total:.3f}", flush=True)

target = sum(r.n_frames for r in train)
deficit = target - sum(r.n_frames for r in limited)
t1 = time.time()
imputed_eps = _impute_until(unlabeled, idm_net, deficit)
print(f"imputed {len(imputed_eps)} episodes in {time.time()-t1:.0f}s", flush=True)
mixture = match_frames(limited, imputed_eps, target)

tcfg = TrainConfig(max_steps=IMP_STEPS, eval_interval=100, patience=1000, seed=0)
inet, imx = train_bc(mixture, val, tcfg, PolicyConfig(), on_eval=live("imputed"))
score = R.run_agent(E.EnvConfig(), inet, episodes=30).mean_score
print(f"IMPUTED best_vp={imx.best_val_ppl:.4f} online={score:.2f} "
      f"({time.time()-t0:.0f}s)", flush=True)
print(f"MARGIN limited-imputed = {lm.best_val_ppl - imx.best_val_ppl:.4f}", flush=True)
