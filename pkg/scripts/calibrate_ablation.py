"""Dress rehearsal for the ablation acceptance criteria.

Trains Full at full scale with periodic online evaluation to find the
step count needed for online competence, then runs Limited + IDM +
Imputed at the chosen scale and prints all margins.
"""
import sys, time
import numpy as np
import torch

sys.path.insert(0, "src")
from pixelbc import env as E
from pixelbc import data as D
from pixelbc import runtime as R
from pixelbc.policy import PolicyConfig, PolicyNet
from pixelbc.training import TrainConfig, train_bc, limited_slice, match_frames, _impute_until
from pixelbc.idm import IDMConfig, train_idm, impute

torch.set_num_threads(2)

t0 = time.time()
N_LABELED, N_UNLABELED = 200, 400  # enough unlabeled for frame matching
labeled = []
for i in range(N_LABELED):
    traj = E.generate_episode(E.EnvConfig(seed=i), E.expert_policy,
                              np.random.default_rng(i))
    labeled.append(D.record_from_trajectory(traj, provenance="expert"))
noisy_pol = E.noisy_expert_policy(0.2)
unlabeled = []
for i in range(N_UNLABELED):
    traj = E.generate_episode(E.EnvConfig(seed=10_000 + i), noisy_pol,
                              np.random.default_rng(10_000 + i))
    unlabeled.append(D.EpisodeRecord(frames=np.stack(traj.frames),
                                     provenance="noisy_expert", seed=traj.seed))
rng = np.random.default_rng(0)
order = rng.permutation(N_LABELED)
val = [labeled[i] for i in order[:20]]
train = [labeled[i] for i in order[20:]]
print(f"data: train {sum(r.n_frames for r in train)} frames, "
      f"val {sum(r.n_frames for r in val)}, "
      f"unlabeled {sum(r.n_frames for r in unlabeled)} ({time.time()-t0:.0f}s)",
      flush=True)

pcfg = PolicyConfig()
live = lambda name: (lambda row: print(f"[{name}] {row['step']} "
                                       f"tp {row['train_ppl']:.3f} vp {row['val_ppl']:.3f} "
                                       f"w {row['wall']:.0f}s", flush=True))

def online(net, episodes=30):
    rep = R.run_agent(E.EnvConfig(), net, episodes=episodes)
    return rep.mean_score

# Full, one run; the eval curve shows where it saturates.
tcfg = TrainConfig(max_steps=1400, eval_interval=100, patience=100, seed=0)
net, m = train_bc(train, val, tcfg, pcfg, on_eval=live("full"))
score = online(net)
print(f"FULL steps=1400: best_vp={m.best_val_ppl:.4f} "
      f"online={score:.2f} ({time.time()-t0:.0f}s)", flush=True)

# Limited with early stopping.
limited = limited_slice(train, 0.1)
tcfg = TrainConfig(max_steps=1400, eval_interval=50, patience=6, seed=0)
lnet, lm = train_bc(limited, val, tcfg, pcfg, on_eval=live("limited"))
print(f"LIMITED: best_vp={lm.best_val_ppl:.4f} early={lm.early_stopped} "
      f"steps={lm.total_steps} ({time.time()-t0:.0f}s)", flush=True)

# IDM on limited + hide-and-compare on held-out labeled data.
icfg = IDMConfig()
itc = TrainConfig(max_steps=700, eval_interval=50, patience=6, seed=0)
t1 = time.time()
idm_net, im = train_idm(limited, val, icfg, itc,
                        on_eval=lambda r: print(f"[idm] {r['step']} "
                                                f"vl {r['val_loss']:.3f} va {r['val_accuracy']:.3f}",
                                                flush=True))
print(f"IDM: best_acc={im.best_val_accuracy:.3f} in {time.time()-t1:.0f}s", flush=True)

hidden = [D.EpisodeRecord(frames=r.frames, provenance="noisy_expert", seed=r.seed)
          for r in val]
recovered = impute(hidden, idm_net)
agree = 0
total = 0
for rec, truth in zip(recovered, val):
    for a, b in zip(rec.actions, truth.actions):
        agree += int(a == b)
        total += 1
print(f"IDM hide-and-compare exact-action agreement on clean val: "
      f"{agree/total:.3f}", flush=True)

# Imputed mixture matched to Full.
target = sum(r.n_frames for r in train)
deficit = target - sum(r.n_frames for r in limited)
t1 = time.time()
imputed_eps = _impute_until(unlabeled, idm_net, deficit)
print(f"imputation of {len(imputed_eps)} episodes in {time.time()-t1:.0f}s", flush=True)
mixture = match_frames(limited, imputed_eps, target)
tcfg = TrainConfig(max_steps=1400, eval_interval=100, patience=100, seed=0)
inet, imx = train_bc(mixture, val, tcfg, pcfg, on_eval=live("imputed"))
print(f"IMPUTED: best_vp={imx.best_val_ppl:.4f} online={online(inet):.2f} "
      f"({time.time()-t0:.0f}s)", flush=True)

print(f"MARGIN limited-imputed: {lm.best_val_ppl - imx.best_val_ppl:.4f}", flush=True)
print(f"TOTAL WALL {time.time()-t0:.0f}s", flush=True)
