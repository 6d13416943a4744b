"""Behavior-cloning training loop and the label-fraction experiment suite.

One TrainConfig is shared by every run in the suite so the comparison
isolates the data mixture: Full (all labeled episodes), Limited (a 10%
slice), and Imputed (the same slice plus IDM-imputed episodes padded or
truncated to match Full's total frame count). Runs are seeded end to end:
same seed, same curves, bit for bit.

Validation frames are never augmented, and each loader audits that flag.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import policy as P
from .data import (
    AugmentConfig,
    EpisodeRecord,
    apply_augment,
    draw_augment_params,
    resize_frame,
)
from .idm import IDMConfig, impute, train_idm


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8        # windows per step
    window_len: int = 16       # steps per window
    max_steps: int = 1000
    patience: int = 5          # evaluations without val improvement
    eval_interval: int = 50
    seed: int = 0
    augment: bool = True
    augment_config: AugmentConfig = AugmentConfig()

    def __post_init__(self):
        if min(self.lr, self.eps, self.batch_size, self.window_len,
               self.max_steps, self.eval_interval) <= 0:
            raise ValueError("TrainConfig values must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class RunMetrics:
    rows: list[dict] = field(default_factory=list)
    best_step: int = -1
    best_val_loss: float = math.inf
    best_val_ppl: float = math.inf
    early_stopped: bool = False
    total_steps: int = 0
    wall_seconds: float = 0.0

    def write(self, out_dir: Path, name: str) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / f"{name}_metrics.jsonl", "w") as f:
            for row in self.rows:
                f.write(json.dumps(row) + "\n")
        summary = {k: v for k, v in vars(self).items() if k != "rows"}
        with open(out_dir / f"{name}_summary.json", "w") as f:
            json.dump(summary, f, indent=2)


class _WindowDataset:
    """Pre-tokenized episode windows with per-epoch episode-level augmentation.

    Every frame passes through the shared resize on load, the same symbol
    the inference loop uses.
    """

    def __init__(self, records: list[EpisodeRecord], window_len: int,
                 frame_size: int, augment: bool, augment_config: AugmentConfig):
        self.window_len = window_len
        self.augment = augment
        self.augment_config = augment_config
        self.frames: list[np.ndarray] = []
        self.tokens: list[np.ndarray] = []
        self.windows: list[tuple[int, int]] = []
        for idx, rec in enumerate(records):
            if rec.actions is None:
                raise ValueError("training mixture must be fully labeled")
            resized = np.stack([resize_frame(f, frame_size, frame_size)
                                for f in rec.frames])
            self.frames.append(resized)
            self.tokens.append(P.episode_token_array(rec.actions))
            for s0, _ in P.iter_windows(rec.n_frames, window_len, drop_tail=True):
                self.windows.append((idx, s0))
        if not self.windows:
            raise ValueError("no training windows (dataset empty or episodes too short)")
        self._epoch_params: list = []

    def start_epoch(self, rng: np.random.Generator) -> np.ndarray:
        """Seeded shuffle plus fresh per-episode augmentation draws."""
        if self.augment:
            self._epoch_params = [draw_augment_params(rng, self.augment_config)
                                  for _ in self.frames]
        return rng.permutation(len(self.windows))

    def batch(self, idxs) -> tuple[torch.Tensor, torch.Tensor]:
        frames, tokens = [], []
        for i in idxs:
            ep, s0 = self.windows[i]
            f = self.frames[ep][s0:s0 + self.window_len]
            if self.augment:
                f = apply_augment(f, self._epoch_params[ep])
            frames.append(f)
            tokens.append(self.tokens[ep][s0:s0 + self.window_len])
        return (torch.from_numpy(np.stack(frames)),
                torch.from_numpy(np.stack(tokens)))

    @property
    def total_frames(self) -> int:
        return sum(len(f) for f in self.frames)


@torch.no_grad()
def evaluate_offline(net: P.PolicyNet, val_records: list[EpisodeRecord],
                     window_len: int | None = None) -> tuple[float, float]:
    """Deterministic (val loss, val perplexity); clean frames, no side effects."""
    if not val_records:
        raise ValueError("empty validation split")
    ppl = P.perplexity(net, val_records, window_len)
    return math.log(ppl), ppl


def train_bc(train_records: list[EpisodeRecord], val_records: list[EpisodeRecord],
             tcfg: TrainConfig, pcfg: P.PolicyConfig,
             stop_train_ppl: float | None = None,
             on_eval=None) -> tuple[P.PolicyNet, RunMetrics]:
    """Adam on bc_loss over uniformly sampled windows; best-val checkpoint.

    Early-stops after `patience` evaluations without val improvement.
    `stop_train_ppl` optionally ends the run once the running training
    perplexity falls below a bar (overfitting harnesses).
    """
    if not train_records:
        raise ValueError("empty training mixture")
    torch.manual_seed(tcfg.seed)
    net = P.PolicyNet(pcfg)
    opt = torch.optim.Adam(net.parameters(), lr=tcfg.lr,
                           betas=(tcfg.beta1, tcfg.beta2), eps=tcfg.eps)
    data = _WindowDataset(train_records, tcfg.window_len, pcfg.frame_size,
                          tcfg.augment, tcfg.augment_config)
    rng = np.random.default_rng(tcfg.seed)

    metrics = RunMetrics()
    best_state = None
    bad_evals = 0
    step = 0
    train_nll_sum, train_tok_sum = 0.0, 0
    t0 = time.monotonic()
    stop = False
    while not stop and step < tcfg.max_steps:
        order = data.start_epoch(rng)
        for i in range(0, len(order), tcfg.batch_size):
            frames, tokens = data.batch(order[i:i + tcfg.batch_size])
            logits = P.forward_teacher_forced(net, frames, tokens)
            loss = P.bc_loss(logits, tokens)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {float(loss)} at step {step} "
                    f"(lr={tcfg.lr}, batch={tcfg.batch_size})")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            train_nll_sum += float(loss.detach()) * tokens.numel()
            train_tok_sum += tokens.numel()

            if step % tcfg.eval_interval == 0 or step >= tcfg.max_steps:
                train_loss = train_nll_sum / max(train_tok_sum, 1)
                train_nll_sum, train_tok_sum = 0.0, 0
                val_loss, val_ppl = evaluate_offline(net, val_records, tcfg.window_len)
                metrics.rows.append({
                    "step": step, "train_loss": train_loss,
                    "train_ppl": math.exp(train_loss),
                    "val_loss": val_loss, "val_ppl": val_ppl,
                    "wall": time.monotonic() - t0,
                })
                if on_eval is not None:
                    on_eval(metrics.rows[-1])
                if val_loss < metrics.best_val_loss:
                    metrics.best_val_loss = val_loss
                    metrics.best_val_ppl = val_ppl
                    metrics.best_step = step
                    best_state = {k: v.detach().clone()
                                  for k, v in net.state_dict().items()}
                    bad_evals = 0
                else:
                    bad_evals += 1
                    if bad_evals >= tcfg.patience:
                        metrics.early_stopped = True
                        stop = True
                if stop_train_ppl is not None and math.exp(train_loss) < stop_train_ppl:
                    stop = True
            if stop or step >= tcfg.max_steps:
                break

    if best_state is not None:
        net.load_state_dict(best_state)
    metrics.total_steps = step
    metrics.wall_seconds = time.monotonic() - t0
    return net, metrics


# ---------------------------------------------------------------------------
# Label-fraction ablation
# ---------------------------------------------------------------------------

@dataclass
class AblationReport:
    full: RunMetrics
    limited: RunMetrics
    imputed: RunMetrics
    idm_val_accuracy: float
    frames_full: int
    frames_limited: int
    frames_imputed: int
    relative_reduction: float   # (ppl_L - ppl_I) / (ppl_L - 1)

    def summary(self) -> dict:
        return {
            "best_val_ppl": {"full": self.full.best_val_ppl,
                             "limited": self.limited.best_val_ppl,
                             "imputed": self.imputed.best_val_ppl},
            "ordering_full_le_imputed": self.full.best_val_ppl <= self.imputed.best_val_ppl,
            "ordering_imputed_lt_limited": self.imputed.best_val_ppl < self.limited.best_val_ppl,
            "relative_reduction": self.relative_reduction,
            "limited_early_stopped": self.limited.early_stopped,
            "idm_val_accuracy": self.idm_val_accuracy,
            "frames": {"full": self.frames_full, "limited": self.frames_limited,
                       "imputed": self.frames_imputed},
        }


def limited_slice(train_records: list[EpisodeRecord],
                  fraction: float = 0.1) -> list[EpisodeRecord]:
    """The low-label condition: a stable prefix slice of the train split."""
    n = max(1, int(len(train_records) * fraction))
    return train_records[:n]


def match_frames(labeled: list[EpisodeRecord], imputed: list[EpisodeRecord],
                 target_frames: int) -> list[EpisodeRecord]:
    """Pad the mixture with imputed episodes until total frames == target.

    The final imputed episode is truncated to land exactly; raises when
    the imputed corpus cannot cover the deficit.
    """
    need = target_frames - sum(r.n_frames for r in labeled)
    if need < 0:
        raise ValueError("labeled slice already exceeds the frame target")
    out: list[EpisodeRecord] = []
    for rec in imputed:
        if need == 0:
            break
        take = min(rec.n_frames, need)
        if take == rec.n_frames:
            out.append(rec)
        else:
            out.append(EpisodeRecord(
                frames=rec.frames[:take], actions=rec.actions[:take],
                raw_deltas=None if rec.raw_deltas is None else rec.raw_deltas[:take],
                confidences=None if rec.confidences is None else rec.confidences[:take],
                provenance=rec.provenance, source_id=rec.source_id, seed=rec.seed))
        need -= take
    if need > 0:
        raise ValueError(f"unlabeled corpus too small: {need} frames short of target")
    return labeled + out


def _impute_until(unlabeled: list[EpisodeRecord], net, need_frames: int,
                  chunk: int = 32) -> list[EpisodeRecord]:
    """Impute unlabeled episodes until the frame deficit is covered."""
    out: list[EpisodeRecord] = []
    have = 0
    for i in range(0, len(unlabeled), chunk):
        if have >= need_frames:
            break
        batch = impute(unlabeled[i:i + chunk], net)
        out.extend(batch)
        have += sum(r.n_frames for r in batch)
    return out


def run_ablation(train_records: list[EpisodeRecord], val_records: list[EpisodeRecord],
                 unlabeled_records: list[EpisodeRecord], tcfg: TrainConfig,
                 pcfg: P.PolicyConfig, icfg: IDMConfig | None = None,
                 limited_fraction: float = 0.1,
                 idm_train_config: TrainConfig | None = None,
                 out_dir: Path | None = None,
                 nets_out: dict | None = None,
                 verbose: bool = False) -> AblationReport:
    """Full / Limited / Imputed comparison under one shared TrainConfig.

    The IDM is trained on the Limited slice only (that condition's
    premise is that no other labels exist), then imputes unlabeled
    episodes until the mixture can be frame-matched to Full.
    """
    icfg = icfg or IDMConfig(t_w=tcfg.window_len, frame_size=pcfg.frame_size,
                             seed=tcfg.seed)
    limited = limited_slice(train_records, limited_fraction)

    def live(name):
        if not verbose:
            return None
        return lambda row: print(f"  [{name}] {row}", flush=True)

    full_net, full_m = train_bc(train_records, val_records, tcfg, pcfg,
                                on_eval=live("full"))
    limited_net, limited_m = train_bc(limited, val_records, tcfg, pcfg,
                                      on_eval=live("limited"))

    idm_net, idm_m = train_idm(limited, val_records, icfg,
                               idm_train_config or tcfg, on_eval=live("idm"))
    target = sum(r.n_frames for r in train_records)
    deficit = target - sum(r.n_frames for r in limited)
    imputed_eps = _impute_until(unlabeled_records, idm_net, deficit)
    mixture = match_frames(limited, imputed_eps, target)
    imputed_net, imputed_m = train_bc(mixture, val_records, tcfg, pcfg,
                                      on_eval=live("imputed"))

    report = AblationReport(
        full=full_m, limited=limited_m, imputed=imputed_m,
        idm_val_accuracy=idm_m.best_val_accuracy,
        frames_full=target,
        frames_limited=sum(r.n_frames for r in limited),
        frames_imputed=sum(r.n_frames for r in mixture),
        relative_reduction=((limited_m.best_val_ppl - imputed_m.best_val_ppl)
                            / max(limited_m.best_val_ppl - 1.0, 1e-12)),
    )
    if nets_out is not None:
        nets_out.update({"full": full_net, "limited": limited_net,
                         "imputed": imputed_net, "idm": idm_net})
    if out_dir is not None:
        out_dir = Path(out_dir)
        full_m.write(out_dir, "full")
        limited_m.write(out_dir, "limited")
        imputed_m.write(out_dir, "imputed")
        with open(out_dir / "ablation_report.json", "w") as f:
            json.dump(report.summary(), f, indent=2)
    return report
