"""Long single training run at TrainConfig defaults with online probes.

Finds the step budget where the cloned policy becomes online-competent.
Uses the deterministic-prefix property: a run with larger max_steps
replays the shorter run exactly, so checkpoints along one trajectory are
probed by training in increasing segments only when needed.
"""
import sys, time
import numpy as np
import torch

sys.path.insert(0, "src")
from pixelbc import env as E
from pixelbc import data as D
from pixelbc import runtime as R
from pixelbc.policy import PolicyConfig, forward_teacher_forced, episode_token_array
from pixelbc.training import TrainConfig, train_bc
import torch.nn.functional as F

torch.set_num_threads(2)
LR = float(sys.argv[1]) if len(sys.argv) > 1 else 3e-4
STEPS = int(sys.argv[2]) if len(sys.argv) > 2 else 2800

labeled = []
for i in range(200):
    traj = E.generate_episode(E.EnvConfig(seed=i), E.expert_policy,
                              np.random.default_rng(i))
    labeled.append(D.record_from_trajectory(traj, provenance="expert"))
rng = np.random.default_rng(0)
order = rng.permutation(200)
val = [labeled[i] for i in order[:20]]
train = [labeled[i] for i in order[20:]]
print(f"lr={LR} steps={STEPS} train_frames={sum(r.n_frames for r in train)}",
      flush=True)

t0 = time.time()
tcfg = TrainConfig(lr=LR, max_steps=STEPS, eval_interval=100, patience=1000, seed=0)
live = lambda row: print(f"step {row['step']:5d} tp {row['train_ppl']:.3f} "
                         f"vp {row['val_ppl']:.3f} w {row['wall']:.0f}s", flush=True)
net, m = train_bc(train, val, tcfg, PolicyConfig(), on_eval=live)
print(f"trained in {time.time()-t0:.0f}s best_vp={m.best_val_ppl:.4f}", flush=True)

rep = R.run_agent(E.EnvConfig(), net, episodes=50)
print(f"ONLINE mean={rep.mean_score:.2f} median={rep.median_score} "
      f"scores[:20]={rep.scores[:20]}", flush=True)

# Per-position NLL decomposition on the val split.
with torch.no_grad():
    totals = np.zeros(6)
    counts = 0
    for rec in val:
        toks = episode_token_array(rec.actions)
        for s0 in range(0, rec.n_frames - 16, 16):
            fr = torch.from_numpy(rec.frames[s0:s0 + 16]).unsqueeze(0)
            tk = torch.from_numpy(toks[s0:s0 + 16]).unsqueeze(0)
            logits = forward_teacher_forced(net, fr, tk)
            from pixelbc.policy import tokens_to_local_targets
            local = tokens_to_local_targets(tk)
            for j in range(6):
                totals[j] += float(F.cross_entropy(
                    logits[j].reshape(-1, logits[j].shape[-1]),
                    local[..., j].reshape(-1), reduction="sum"))
            counts += 16
    print("per-position NLL:", np.round(totals / counts, 3), flush=True)
