"""Pixel-input policy: patch tokenizer, masked decoder-only transformer,
and autoregressive constrained action sampling with incremental decoding.

Per step the transformer consumes 64 patch-projection tokens of the
current frame, a handful of learned "think" tokens that buy extra
computation before any action is emitted, then generates the 6
sub-action tokens one forward pass at a time, starting from a learned
start embedding. The attention mask (masking module) keeps every past
step's action tokens out of view, so the policy cannot learn to copy its
previous action instead of reading the pixels.

Inference keeps per-layer key/value state for the obs/think blocks of up
to `t_ctx` steps; action-segment entries live only while sampling the
current step. Position encoding is a learned within-step table plus a
learned per-head relative step-distance bias added to attention scores.
Putting step identity on the score side (rather than into the token
embeddings) keeps cached keys/values valid when the context window
slides, so eviction is a row drop and per-tick inference cost stays flat
over unbounded episodes.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import masking
from .actions import (
    N_ACTION_TOKENS,
    POSITION_VOCAB_SIZES,
    START_TOKEN,
    VOCAB_SIZE,
    Action,
    action_to_tokens,
    legal_tokens,
    local_to_token,
    token_to_local,
    tokens_to_action,
)
from .blocks import TransformerBlock, seeded_init_

# Global-token offset per sub-action position (chord tokens start at 1,
# mouse tokens at 10); used to convert between vocab ids and head indices.
_LOCAL_OFFSETS = torch.tensor([1, 1, 1, 1, 10, 10], dtype=torch.int64)


@dataclass(frozen=True)
class PolicyConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    patch_size: int = 8
    frame_size: int = 64
    k_think: int = 4
    t_ctx: int = 16          # max steps in context
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.frame_size % self.patch_size != 0:
            raise ValueError("frame_size must be divisible by patch_size")
        if self.t_ctx < 1:
            raise ValueError("t_ctx must be >= 1")

    @property
    def n_obs(self) -> int:
        return (self.frame_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def tokens_per_step(self) -> int:
        return self.n_obs + self.k_think + N_ACTION_TOKENS


class PolicyNet(nn.Module):
    """All trainable weights; deterministic init from config.seed."""

    def __init__(self, config: PolicyConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.patch_proj = nn.Linear(config.patch_dim, d)
        self.pos_within = nn.Parameter(torch.empty(config.tokens_per_step, d))
        # Attention-score bias per head, indexed by query_step - key_step.
        self.rel_step_bias = nn.Parameter(torch.empty(config.n_heads, config.t_ctx))
        self.think_tokens = nn.Parameter(torch.empty(config.k_think, d))
        self.act_emb = nn.Embedding(VOCAB_SIZE, d)
        self.layers = nn.ModuleList(
            TransformerBlock(d, config.n_heads) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(d)
        self.heads = nn.ModuleList(nn.Linear(d, v) for v in POSITION_VOCAB_SIZES)
        seeded_init_(self, config.seed)


def frames_to_patches(frames: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(..., H, W, 3) u8 -> (..., n_patches, patch*patch*3) f32 in [0, 1].

    Row-major patch order; pixels within a patch stay row-major with
    channels last.
    """
    *lead, h, w, c = frames.shape
    gh, gw = h // patch_size, w // patch_size
    x = frames.to(torch.float32) / 255.0
    x = x.view(*lead, gh, patch_size, gw, patch_size, c)
    x = x.movedim(-3, -4)  # (..., gh, gw, p, p, c)
    return x.reshape(*lead, gh * gw, patch_size * patch_size * c)


def embed_frame(frame: np.ndarray, net: PolicyNet) -> torch.Tensor:
    """One frame -> (n_obs, d_model) patch-projection embeddings.

    Positional terms are added by the sequence assemblers, not here.
    """
    cfg = net.config
    if frame.shape != (cfg.frame_size, cfg.frame_size, 3):
        raise ValueError(f"expected frame {(cfg.frame_size, cfg.frame_size, 3)}, "
                         f"got {frame.shape}")
    patches = frames_to_patches(torch.from_numpy(np.ascontiguousarray(frame)),
                                cfg.patch_size)
    return net.patch_proj(patches.to(net.patch_proj.weight.dtype))


_MASK_CACHE: dict[tuple, tuple[torch.Tensor, torch.Tensor]] = {}


def _window_mask(n_steps: int, n_obs: int, k_think: int, acts_last: int | None = None,
                 full_acts: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Cached (boolean mask, per-token step index) for a window layout.

    full_acts=True gives every step a 6-token action segment (training);
    otherwise steps carry no action tokens except an optional trailing
    segment of `acts_last` tokens (inference replay).
    """
    if full_acts:
        acts: tuple[int, ...] = (N_ACTION_TOKENS,) * n_steps
    else:
        acts = (0,) * (n_steps - 1) + (acts_last or 0,)
    key = (n_obs, k_think, acts)
    cached = _MASK_CACHE.get(key)
    if cached is None:
        layout = masking.TokenLayout(n_obs=n_obs, n_think=k_think, acts=acts)
        mask = torch.from_numpy(masking.build_mask(layout))
        steps = torch.tensor([layout.token_info(g)[0]
                              for g in range(layout.total_tokens)])
        cached = (mask, steps)
        _MASK_CACHE[key] = cached
    return cached


def _qk_extras(net: PolicyNet, steps: torch.Tensor,
               n_steps: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Query/key columns realizing the relative-step bias inside SDPA.

    q_extra (T, S) is sqrt(D') * onehot(q_step); k_extra (H, T, S) holds,
    for key token k and candidate query step qs, the bias value
    rel_step_bias[h, qs - step(k)]. Their dot product divided by sqrt(D')
    is exactly the bias for the realized (q_step, k_step) pair; pairs
    with k_step > q_step are masked before softmax, so their clamped
    entries never contribute.
    """
    cfg = net.config
    d_aug = cfg.d_model // cfg.n_heads + n_steps
    dtype = net.rel_step_bias.dtype
    key = ("extras", cfg.n_obs, cfg.k_think, n_steps, steps.shape[0], d_aug)
    cached = _MASK_CACHE.get(key)
    if cached is None:
        onehot = torch.eye(n_steps)[steps] * math.sqrt(d_aug)          # (T, S)
        qs = torch.arange(n_steps)
        dist_cols = (qs[None, :] - steps[:, None]).clamp(0, cfg.t_ctx - 1)  # (T, S)
        cached = (onehot, dist_cols)
        _MASK_CACHE[key] = cached
    onehot, dist_cols = cached
    return onehot.to(dtype), net.rel_step_bias[:, dist_cols]


def _assemble_window(net: PolicyNet, frames: torch.Tensor,
                     tokens_in: torch.Tensor) -> torch.Tensor:
    """Build the (B, S*74, d) input sequence for a teacher-forced window."""
    cfg = net.config
    b, s = frames.shape[0], frames.shape[1]
    patches = frames_to_patches(frames, cfg.patch_size).to(net.patch_proj.weight.dtype)
    obs = net.patch_proj(patches)                                          # (B,S,n_obs,d)
    think = net.think_tokens.expand(b, s, cfg.k_think, cfg.d_model)
    act = net.act_emb(tokens_in)                                           # (B,S,6,d)
    x = torch.cat([obs, think, act], dim=2) + net.pos_within
    return x.reshape(b, s * cfg.tokens_per_step, cfg.d_model)


def forward_teacher_forced(net: PolicyNet, frames: torch.Tensor,
                           tokens: torch.Tensor) -> list[torch.Tensor]:
    """Training forward pass over windows of steps.

    frames: (B, S, H, W, 3) u8; tokens: (B, S, 6) global target token ids.
    The action segment is fed as [START, t1..t5] and logits are read at
    those six positions, predicting [t1..t6]. Returns one logits tensor
    per position, shapes (B, S, 9) x4 then (B, S, 11) x2.
    """
    cfg = net.config
    if frames.ndim != 5 or frames.shape[1] > cfg.t_ctx:
        raise ValueError(f"need (B, S<= {cfg.t_ctx}, H, W, 3) frames, got {tuple(frames.shape)}")
    if tokens.shape != (*frames.shape[:2], N_ACTION_TOKENS):
        raise ValueError("tokens must be (B, S, 6) and aligned with frames")
    b, s = frames.shape[:2]
    start = torch.full((b, s, 1), START_TOKEN, dtype=torch.int64)
    tokens_in = torch.cat([start, tokens[..., :-1]], dim=-1)
    x = _assemble_window(net, frames, tokens_in)
    mask, steps = _window_mask(s, cfg.n_obs, cfg.k_think)
    extras = _qk_extras(net, steps, s)
    for layer in net.layers:
        x = layer(x, attn_mask=mask, qk_extra=extras)
    x = x.view(b, s, cfg.tokens_per_step, cfg.d_model)
    h = net.ln_f(x[:, :, cfg.n_obs + cfg.k_think:, :])
    return [net.heads[j](h[:, :, j, :]) for j in range(N_ACTION_TOKENS)]


def tokens_to_local_targets(tokens: torch.Tensor) -> torch.Tensor:
    """Global target token ids (..., 6) -> per-head class indices."""
    local = tokens - _LOCAL_OFFSETS
    sizes = torch.tensor(POSITION_VOCAB_SIZES)
    if (local < 0).any() or (local >= sizes).any():
        bad = torch.nonzero((local < 0) | (local >= sizes))[0]
        pos = int(bad[-1])
        raise ValueError(f"target token {int(tokens[tuple(bad)])} illegal at position {pos}")
    return local


def bc_loss(logits: list[torch.Tensor], tokens: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood per sub-action token."""
    local = tokens_to_local_targets(tokens)
    total = logits[0].new_zeros(())
    n = 0
    for j in range(N_ACTION_TOKENS):
        lj = logits[j].reshape(-1, POSITION_VOCAB_SIZES[j])
        tj = local[..., j].reshape(-1)
        total = total + F.cross_entropy(lj, tj, reduction="sum")
        n += tj.numel()
    return total / n


def episode_token_array(actions) -> np.ndarray:
    """Per-tick global token ids, (N, 6) int64."""
    return np.array([action_to_tokens(a) for a in actions], dtype=np.int64)


def iter_windows(n: int, window_len: int, drop_tail: bool = False):
    """Non-overlapping (start, length) chunks covering an episode."""
    starts = range(0, n, window_len)
    for s0 in starts:
        length = min(window_len, n - s0)
        if length == 0 or (drop_tail and length < window_len):
            continue
        yield s0, length


@torch.no_grad()
def perplexity(net: PolicyNet, records, window_len: int | None = None,
               batch_size: int = 8) -> float:
    """exp(mean NLL per sub-action token) over a labeled dataset."""
    windows = _dataset_windows(net, records, window_len)
    if not windows:
        raise ValueError("perplexity of an empty dataset")
    total_nll, total_tokens = 0.0, 0
    for frames, tokens in _batched_windows(windows, batch_size):
        logits = forward_teacher_forced(net, frames, tokens)
        loss = bc_loss(logits, tokens)
        n = tokens.numel()
        total_nll += float(loss) * n
        total_tokens += n
    return float(math.exp(total_nll / total_tokens))


def _dataset_windows(net: PolicyNet, records, window_len: int | None):
    wl = window_len or net.config.t_ctx
    out = []
    for rec in records:
        if rec.actions is None:
            raise ValueError("dataset must be labeled")
        toks = episode_token_array(rec.actions)
        for s0, ln in iter_windows(rec.n_frames, wl):
            out.append((torch.from_numpy(rec.frames[s0:s0 + ln]),
                        torch.from_numpy(toks[s0:s0 + ln])))
    return out


def _batched_windows(windows, batch_size: int):
    by_len: dict[int, list] = {}
    for w in windows:
        by_len.setdefault(w[0].shape[0], []).append(w)
    for length in sorted(by_len):
        group = by_len[length]
        for i in range(0, len(group), batch_size):
            chunk = group[i:i + batch_size]
            yield (torch.stack([c[0] for c in chunk]),
                   torch.stack([c[1] for c in chunk]))


def gradient(net: PolicyNet, frames: torch.Tensor,
             tokens: torch.Tensor) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Loss and exact parameter gradients of bc_loss on one batch."""
    net.zero_grad(set_to_none=True)
    loss = bc_loss(forward_teacher_forced(net, frames, tokens), tokens)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {float(loss)}")
    loss.backward()
    grads = {name: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
             for name, p in net.named_parameters()}
    net.zero_grad(set_to_none=True)
    return loss.detach(), grads


# ---------------------------------------------------------------------------
# Incremental decoding
# ---------------------------------------------------------------------------

@contextlib.contextmanager
def inference_threads(n: int = 1):
    """Pin intra-op parallelism for the incremental-decode hot path.

    Per-sub-action forwards are tiny; multi-thread handoff adds heavy
    tail latency on small CPUs, so tick loops run them single-threaded.
    """
    prev = torch.get_num_threads()
    torch.set_num_threads(n)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


@dataclass
class DecodeCache:
    """Per-layer key/value state for the obs/think blocks of retained steps.

    Step identity lives in the relative-step attention bias, not in the
    cached tensors, so sliding the window is a plain row eviction.
    Action-segment keys/values exist only transiently inside act().
    """

    k: list[torch.Tensor] = field(default_factory=list)   # per layer (T, H, hd)
    v: list[torch.Tensor] = field(default_factory=list)
    n_steps: int = 0


@dataclass
class ActionTrace:
    """Per-position sampling record: probabilities over legal tokens only."""

    probs: list[np.ndarray]        # local-head-sized, zero mass on illegal tokens
    logits: list[torch.Tensor]     # raw head outputs, pre-legality-masking
    tokens: list[int]              # sampled global token ids


def fresh_cache(net: PolicyNet) -> DecodeCache:
    cfg = net.config
    hd = cfg.d_model // cfg.n_heads
    zero = lambda: torch.zeros(0, cfg.n_heads, hd)
    return DecodeCache(k=[zero() for _ in range(cfg.n_layers)],
                       v=[zero() for _ in range(cfg.n_layers)])


def _obsthink_inputs(net: PolicyNet, frame: np.ndarray) -> torch.Tensor:
    cfg = net.config
    x = torch.cat([embed_frame(frame, net), net.think_tokens], dim=0)
    return x + net.pos_within[:cfg.n_obs + cfg.k_think]


_DIST_CACHE: dict[tuple, torch.Tensor] = {}


def _tick_bias(net: PolicyNet, n_prior: int) -> torch.Tensor:
    """Relative-step bias row for one whole tick's queries.

    All of the tick's queries (obs/think block, then each action token)
    sit in the newest step, so one (H, 1, T_kv_max) row serves them all:
    keys of the j-th prior block at distance n_prior - j, everything in
    the current step (obs/think plus action prefix) at distance 0.
    Callers slice to the live key count.
    """
    cfg = net.config
    per = cfg.n_obs + cfg.k_think
    key = (n_prior, per)
    dist = _DIST_CACHE.get(key)
    if dist is None:
        dist = torch.cat([torch.arange(n_prior, 0, -1).repeat_interleave(per),
                          torch.zeros(per + N_ACTION_TOKENS, dtype=torch.int64)])
        _DIST_CACHE[key] = dist
    return net.rel_step_bias[:, dist].unsqueeze(1)


@torch.no_grad()
def act(net: PolicyNet, cache: DecodeCache, frame: np.ndarray,
        rng: np.random.Generator, temperature: float | None = None
        ) -> tuple[Action, DecodeCache, ActionTrace]:
    """Sample one action autoregressively, updating the decode cache.

    Embeds the frame plus think tokens once (attending to retained prior
    steps), then runs one forward pass per sub-action token with logits
    restricted to the legal set, so every sampled sequence parses to a
    valid Action. temperature 0 means argmax. Once `t_ctx` is exceeded
    the oldest step's cache rows are evicted; relative-step biases keep
    the remaining rows valid unchanged.
    """
    cfg = net.config
    if temperature is None:
        temperature = cfg.temperature
    per = cfg.n_obs + cfg.k_think
    if cache.n_steps >= cfg.t_ctx:
        # Slide: evict the oldest step's rows; distances re-derive at score time.
        evict = (cache.n_steps - (cfg.t_ctx - 1)) * per
        for l in range(cfg.n_layers):
            cache.k[l] = cache.k[l][evict:]
            cache.v[l] = cache.v[l][evict:]
        cache.n_steps = cfg.t_ctx - 1

    # One preallocated K/V buffer per layer covers the whole tick: retained
    # rows, this step's obs/think block, then the action prefix.
    n_prior = cache.n_steps
    old = n_prior * per
    total = old + per + N_ACTION_TOKENS
    hd = cfg.d_model // cfg.n_heads
    buf_k, buf_v = [], []
    for l in range(cfg.n_layers):
        bk = torch.empty(total, cfg.n_heads, hd, dtype=cache.k[l].dtype)
        bv = torch.empty_like(bk)
        bk[:old] = cache.k[l]
        bv[:old] = cache.v[l]
        buf_k.append(bk)
        buf_v.append(bv)
    bias = _tick_bias(net, n_prior)

    x = _obsthink_inputs(net, frame)
    for l, layer in enumerate(net.layers):
        x = layer.forward_buffered(x, buf_k[l], buf_v[l], old, bias[:, :, :old + per])
    base = old + per
    for l in range(cfg.n_layers):
        cache.k[l] = buf_k[l][:base]
        cache.v[l] = buf_v[l][:base]
    cache.n_steps += 1

    sampled: list[int] = []
    probs_trace: list[np.ndarray] = []
    logits_trace: list[torch.Tensor] = []
    tok_in = START_TOKEN
    for j in range(N_ACTION_TOKENS):
        x = (net.act_emb.weight[tok_in] + net.pos_within[per + j]).unsqueeze(0)
        for l, layer in enumerate(net.layers):
            x = layer.forward_buffered(x, buf_k[l], buf_v[l], base + j,
                                       bias[:, :, :base + j + 1])
        logits = net.heads[j](net.ln_f(x))[0]
        logits_trace.append(logits.clone())
        tok_local = _sample_position(j, logits, sampled, rng, temperature, probs_trace)
        tok_global = local_to_token(j, tok_local)
        sampled.append(tok_global)
        tok_in = tok_global

    action = tokens_to_action(sampled)
    return action, cache, ActionTrace(probs=probs_trace, logits=logits_trace,
                                      tokens=sampled)


def _sample_position(j: int, logits: torch.Tensor, prefix: list[int],
                     rng: np.random.Generator, temperature: float,
                     probs_trace: list[np.ndarray]) -> int:
    legal_local = sorted(token_to_local(j, t) for t in legal_tokens(j, prefix))
    masked = torch.full_like(logits, float("-inf"))
    masked[legal_local] = logits[legal_local]
    if temperature == 0.0:
        probs = torch.zeros_like(logits, dtype=torch.float64)
        choice = int(torch.argmax(masked))
        probs[choice] = 1.0
        probs_trace.append(probs.numpy())
        return choice
    probs = torch.softmax(masked.to(torch.float64) / temperature, dim=0)
    p = probs.numpy()
    cum = np.cumsum(p)
    cum[-1] = 1.0  # guard the tail against rounding
    choice = int(np.searchsorted(cum, rng.random(), side="right"))
    probs_trace.append(p)
    return choice


@torch.no_grad()
def replay_logits_nocache(net: PolicyNet, frames: list[np.ndarray],
                          step_tokens: list[list[int]]) -> list[list[torch.Tensor]]:
    """Reference path: full recomputation of act()'s logits, no cache.

    For each step s the whole frame history is re-processed in one pass:
    obs/think blocks of every step, each attending only within its own
    sliding window (step distance < t_ctx, matching cache eviction),
    plus the current step's action prefix (past action segments were
    discarded at inference). Returns, per step, the 6 head logits
    produced along that step's action staircase.
    """
    cfg = net.config
    out: list[list[torch.Tensor]] = []
    for s in range(len(frames)):
        xs = [_obsthink_inputs(net, frames[i]) for i in range(s + 1)]
        tokens_in = [START_TOKEN] + step_tokens[s][:-1]
        act_x = (net.act_emb.weight[torch.tensor(tokens_in)]
                 + net.pos_within[cfg.n_obs + cfg.k_think:])
        x = torch.cat(xs + [act_x], dim=0).unsqueeze(0)
        mask, steps = _window_mask(s + 1, cfg.n_obs, cfg.k_think,
                                   acts_last=N_ACTION_TOKENS, full_acts=False)
        dist = steps[:, None] - steps[None, :]
        windowed = mask & (dist < cfg.t_ctx)
        extras = _qk_extras(net, steps, s + 1)
        for layer in net.layers:
            x = layer(x, attn_mask=windowed, qk_extra=extras)
        h = net.ln_f(x[0, -N_ACTION_TOKENS:])
        out.append([net.heads[j](h[j]) for j in range(N_ACTION_TOKENS)])
    return out
