"""Inverse dynamics model: action classification from surrounding frames.

A stack of frames runs through two 3D conv layers (temporal kernels see
motion direction, spatial strides shrink the frame), a per-frame linear
projection, and a transformer with NO attention mask, so the prediction
for tick t may freely use frames after t. Six independent per-timestep
heads classify the sub-action tokens; there is no autoregression here
because imputation only needs the argmax.

The transformer carries no positional encoding: temporal order within
the conv receptive field is what identifies an action, and the rest of
the stack acts as unordered context. This keeps interior predictions on
a constant frame stack exactly identical, edge effects aside.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .actions import (
    MOUSE_TOKEN_BASE,
    N_ACTION_TOKENS,
    NONE_SLOT,
    POSITION_VOCAB_SIZES,
    Action,
    canonicalize_chord,
)
from .blocks import TransformerBlock, seeded_init_
from .data import EpisodeRecord


@dataclass(frozen=True)
class IDMConfig:
    t_w: int = 16                      # frame window
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    frame_size: int = 64
    conv_channels: tuple[int, int] = (16, 32)
    seed: int = 0

    def __post_init__(self):
        if self.t_w < 3:
            raise ValueError("window must cover the temporal kernel (t_w >= 3)")
        if self.frame_size % 4 != 0:
            raise ValueError("frame_size must survive two stride-2 convs")

    @property
    def conv_out_dim(self) -> int:
        return self.conv_channels[1] * (self.frame_size // 4) ** 2


class IDMNet(nn.Module):
    def __init__(self, config: IDMConfig):
        super().__init__()
        self.config = config
        c1, c2 = config.conv_channels
        # Temporal kernel 3, stride 1, zero padding; spatial stride 2 each.
        self.conv1 = nn.Conv3d(3, c1, kernel_size=(3, 5, 5), stride=(1, 2, 2),
                               padding=(1, 2, 2))
        self.conv2 = nn.Conv3d(c1, c2, kernel_size=(3, 3, 3), stride=(1, 2, 2),
                               padding=(1, 1, 1))
        self.frame_proj = nn.Linear(config.conv_out_dim, config.d_model)
        self.layers = nn.ModuleList(
            TransformerBlock(config.d_model, config.n_heads)
            for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(config.d_model)
        self.heads = nn.ModuleList(
            nn.Linear(config.d_model, v) for v in POSITION_VOCAB_SIZES)
        seeded_init_(self, config.seed)


def idm_forward(net: IDMNet, frames: torch.Tensor,
                return_attn: bool = False):
    """Logits for every timestep of a frame window.

    frames: (B, T_w, H, W, 3) u8 or f32-in-[0,1]. Returns a list of 6
    tensors (B, T_w, vocab_j); with return_attn also a list of per-layer
    attention weights (B, heads, T_w, T_w), useful to verify the absence
    of any causal mask.
    """
    cfg = net.config
    if frames.ndim != 5 or frames.shape[1] != cfg.t_w:
        raise ValueError(f"expected (B, {cfg.t_w}, H, W, 3) frames, got {tuple(frames.shape)}")
    if frames.shape[2] != cfg.frame_size or frames.shape[3] != cfg.frame_size:
        raise ValueError(f"expected {cfg.frame_size}x{cfg.frame_size} frames")
    x = frames.to(net.conv1.weight.dtype)
    if frames.dtype == torch.uint8:
        x = x / 255.0
    x = x.permute(0, 4, 1, 2, 3)                 # (B, C, T, H, W)
    x = F.relu(net.conv1(x))
    x = F.relu(net.conv2(x))
    b = x.shape[0]
    x = x.permute(0, 2, 1, 3, 4).reshape(b, cfg.t_w, -1)
    x = net.frame_proj(x)
    attns = []
    for layer in net.layers:
        if return_attn:
            x, attn = layer(x, attn_mask=None, return_attn=True)
            attns.append(attn)
        else:
            x = layer(x, attn_mask=None)
    h = net.ln_f(x)
    logits = [net.heads[j](h) for j in range(N_ACTION_TOKENS)]
    return (logits, attns) if return_attn else logits


def idm_loss(logits: list[torch.Tensor], tokens: torch.Tensor,
             valid: torch.Tensor | None = None) -> torch.Tensor:
    """Mean NLL per (timestep, position); positions are independent.

    tokens: (B, T_w, 6) global ids; valid masks zero-padded timesteps.
    """
    from .policy import tokens_to_local_targets

    local = tokens_to_local_targets(tokens)
    if valid is None:
        valid = torch.ones(tokens.shape[:2], dtype=torch.bool)
    total = logits[0].new_zeros(())
    n = 0
    for j in range(N_ACTION_TOKENS):
        lj = logits[j][valid]
        tj = local[..., j][valid]
        total = total + F.cross_entropy(lj, tj, reduction="sum")
        n += tj.numel()
    if n == 0:
        raise ValueError("no valid timesteps in batch")
    return total / n


def exact_match_accuracy(logits: list[torch.Tensor], tokens: torch.Tensor,
                         valid: torch.Tensor | None = None) -> float:
    """Fraction of timesteps with all 6 positions predicted correctly."""
    from .policy import tokens_to_local_targets

    local = tokens_to_local_targets(tokens)
    if valid is None:
        valid = torch.ones(tokens.shape[:2], dtype=torch.bool)
    ok = torch.ones(tokens.shape[:2], dtype=torch.bool)
    for j in range(N_ACTION_TOKENS):
        ok &= logits[j].argmax(-1) == local[..., j]
    return float(ok[valid].float().mean())


def gradient(net: IDMNet, frames: torch.Tensor,
             tokens: torch.Tensor) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Loss and exact parameter gradients of idm_loss on one batch."""
    net.zero_grad(set_to_none=True)
    loss = idm_loss(idm_forward(net, frames), tokens)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {float(loss)}")
    loss.backward()
    grads = {name: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
             for name, p in net.named_parameters()}
    net.zero_grad(set_to_none=True)
    return loss.detach(), grads


# ---------------------------------------------------------------------------
# Imputation
# ---------------------------------------------------------------------------

def _episode_windows(n_frames: int, t_w: int, stride: int) -> list[int]:
    """Window start offsets covering every tick, last window tail-aligned."""
    if n_frames <= t_w:
        return [0]
    starts = list(range(0, n_frames - t_w + 1, stride))
    if starts[-1] != n_frames - t_w:
        starts.append(n_frames - t_w)
    return starts


def _pad_window(frames: np.ndarray, t_w: int) -> np.ndarray:
    if len(frames) >= t_w:
        return frames
    pad = np.zeros((t_w - len(frames), *frames.shape[1:]), dtype=frames.dtype)
    return np.concatenate([frames, pad], axis=0)


@torch.no_grad()
def impute(records: list[EpisodeRecord], net: IDMNet,
           stride: int | None = None,
           confidence_threshold: float | None = None) -> list[EpisodeRecord]:
    """Assign actions to unlabeled episodes by sliding-window argmax.

    Windows overlap (default stride t_w/2) and each tick takes the
    prediction from the window where it sits most centrally (ties to the
    earlier window). Raw argmax chords are re-canonicalized before
    storage; per-position max probabilities are recorded as confidences.
    With a confidence threshold set, episodes whose mean confidence falls
    below it are dropped (off by default).
    """
    cfg = net.config
    stride = stride or cfg.t_w // 2
    out: list[EpisodeRecord] = []
    for rec in records:
        n = rec.n_frames
        starts = _episode_windows(n, cfg.t_w, stride)
        center = (cfg.t_w - 1) / 2.0
        best_dist = np.full(n, np.inf)
        chosen_local = np.zeros((n, N_ACTION_TOKENS), dtype=np.int64)
        chosen_conf = np.zeros((n, N_ACTION_TOKENS), dtype=np.float32)
        for s0 in starts:
            window = _pad_window(rec.frames[s0:s0 + cfg.t_w], cfg.t_w)
            logits = idm_forward(net, torch.from_numpy(window).unsqueeze(0))
            for t in range(min(cfg.t_w, n - s0)):
                dist = abs(t - center)
                if dist < best_dist[s0 + t] - 1e-9:
                    best_dist[s0 + t] = dist
                    for j in range(N_ACTION_TOKENS):
                        pj = torch.softmax(logits[j][0, t], dim=0)
                        chosen_local[s0 + t, j] = int(pj.argmax())
                        chosen_conf[s0 + t, j] = float(pj.max())
        actions = [_decode_imputed(chosen_local[t]) for t in range(n)]
        if confidence_threshold is not None and n > 0:
            if float(chosen_conf.mean()) < confidence_threshold:
                continue
        out.append(EpisodeRecord(frames=rec.frames, actions=actions,
                                 confidences=chosen_conf, provenance="imputed",
                                 source_id=rec.source_id, seed=rec.seed))
    return out


def _decode_imputed(local: np.ndarray) -> Action:
    """Raw per-position argmax -> canonical Action.

    Chord slots may come out unsorted or duplicated; keep the distinct
    non-NONE keys and canonicalize.
    """
    slots = [int(s) for s in local[:4]]  # chord heads are already slot values
    keys = {s for s in slots if s != NONE_SLOT}
    chord = canonicalize_chord(sorted(keys))
    return Action(chord=chord, dx_bin=int(local[4]), dy_bin=int(local[5]))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class IDMMetrics:
    rows: list[dict]
    best_step: int
    best_val_loss: float
    best_val_accuracy: float
    early_stopped: bool


def _label_windows(records: list[EpisodeRecord], t_w: int, stride: int):
    from .policy import episode_token_array

    windows = []
    for idx, rec in enumerate(records):
        if rec.actions is None:
            raise ValueError("IDM training needs labeled episodes")
        toks = episode_token_array(rec.actions)
        for s0 in _episode_windows(rec.n_frames, t_w, stride):
            ln = min(t_w, rec.n_frames - s0)
            windows.append((idx, s0, ln, toks))
    return windows


def _window_batch(records, windows, idxs, t_w, frame_tf=None):
    frames, tokens, valid = [], [], []
    for i in idxs:
        ep, s0, ln, toks = windows[i]
        f = records[ep].frames[s0:s0 + ln]
        if frame_tf is not None:
            f = frame_tf(ep, f)
        frames.append(_pad_window(f, t_w))
        tk = np.zeros((t_w, N_ACTION_TOKENS), dtype=np.int64)
        tk[:, :4] = 1 + NONE_SLOT
        tk[:, 4:] = MOUSE_TOKEN_BASE
        tk[:ln] = toks[s0:s0 + ln]
        tokens.append(tk)
        v = np.zeros(t_w, dtype=bool)
        v[:ln] = True
        valid.append(v)
    return (torch.from_numpy(np.stack(frames)), torch.from_numpy(np.stack(tokens)),
            torch.from_numpy(np.stack(valid)))


def evaluate_idm(net: IDMNet, records: list[EpisodeRecord],
                 batch_size: int = 8) -> tuple[float, float]:
    """Mean loss and exact-match accuracy over non-overlapping windows."""
    cfg = net.config
    windows = _label_windows(records, cfg.t_w, cfg.t_w)
    total, count, correct, ticks = 0.0, 0, 0.0, 0
    with torch.no_grad():
        for i in range(0, len(windows), batch_size):
            frames, tokens, valid = _window_batch(records, windows,
                                                  range(i, min(i + batch_size, len(windows))),
                                                  cfg.t_w)
            logits = idm_forward(net, frames)
            n = int(valid.sum()) * N_ACTION_TOKENS
            total += float(idm_loss(logits, tokens, valid)) * n
            count += n
            correct += exact_match_accuracy(logits, tokens, valid) * int(valid.sum())
            ticks += int(valid.sum())
    return total / count, correct / ticks


def train_idm(train_records: list[EpisodeRecord], val_records: list[EpisodeRecord],
              config: IDMConfig, train_config=None,
              augment_fn=None, stop_accuracy: float | None = None,
              on_eval=None) -> tuple[IDMNet, IDMMetrics]:
    """Cross-entropy training of the IDM with seeded determinism.

    Same optimizer contract as policy training; returns the
    best-validation checkpoint. `stop_accuracy` optionally ends the run
    once training-batch exact-match accuracy sustains above the bar
    (used by overfitting harnesses).
    """
    from .training import TrainConfig  # shared optimizer/loop constants

    tcfg = train_config or TrainConfig()
    net = IDMNet(config)
    opt = torch.optim.Adam(net.parameters(), lr=tcfg.lr,
                           betas=(tcfg.beta1, tcfg.beta2), eps=tcfg.eps)
    rng = np.random.default_rng(tcfg.seed)
    torch.manual_seed(tcfg.seed)
    windows = _label_windows(train_records, config.t_w, config.t_w // 2)
    if not windows:
        raise ValueError("empty IDM training dataset")

    rows: list[dict] = []
    best = (math.inf, -1, None, 0.0)  # val loss, step, state, accuracy
    bad_evals = 0
    early_stopped = False
    step = 0
    recent_acc: list[float] = []
    import time as _time
    t0 = _time.monotonic()
    while step < tcfg.max_steps:
        order = rng.permutation(len(windows))
        for i in range(0, len(order), tcfg.batch_size):
            idxs = order[i:i + tcfg.batch_size]
            frames, tokens, valid = _window_batch(train_records, windows, idxs,
                                                  config.t_w, augment_fn)
            logits = idm_forward(net, frames)
            loss = idm_loss(logits, tokens, valid)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"IDM training diverged at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            if stop_accuracy is not None:
                recent_acc.append(exact_match_accuracy(logits, tokens, valid))
                recent_acc = recent_acc[-5:]
                if len(recent_acc) == 5 and min(recent_acc) > stop_accuracy:
                    early_stopped = True
            if step % tcfg.eval_interval == 0 or step >= tcfg.max_steps or early_stopped:
                val_loss, val_acc = evaluate_idm(net, val_records)
                rows.append({"step": step, "train_loss": float(loss.detach()),
                             "val_loss": val_loss, "val_accuracy": val_acc,
                             "wall": _time.monotonic() - t0})
                if on_eval is not None:
                    on_eval(rows[-1])
                if val_loss < best[0]:
                    best = (val_loss, step,
                            {k: v.detach().clone() for k, v in net.state_dict().items()},
                            val_acc)
                    bad_evals = 0
                else:
                    bad_evals += 1
                    if bad_evals >= tcfg.patience:
                        early_stopped = True
            if early_stopped or step >= tcfg.max_steps:
                break
        if early_stopped:
            break

    if best[2] is not None:
        net.load_state_dict(best[2])
    metrics = IDMMetrics(rows=rows, best_step=best[1], best_val_loss=best[0],
                         best_val_accuracy=best[3], early_stopped=early_stopped)
    return net, metrics
