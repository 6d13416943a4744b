"""Structured attention mask for the policy transformer.

Per step the token stream is [observation block | think block | action
segment]. The mask implements five rules:

  R1  no attention to later steps;
  R2  obs/think tokens attend bidirectionally to all obs/think tokens of
      their own and earlier steps;
  R3  obs/think tokens never attend to action tokens;
  R4  action tokens attend to all obs/think tokens of their own and
      earlier steps;
  R5  action tokens attend to their own step's action tokens at
      positions <= their own (causal staircase) and never to earlier
      steps' action tokens.

R3+R5 exclude every past-step action token from everybody's view, which
is the mitigation for policies that learn to copy their previous action
instead of reading the pixels. `allow_past_actions` is a reserved switch
that re-admits strictly-earlier action tokens (R3/R5 relaxed across
steps); it is off by default and not exercised by the training stack.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

OBS = "obs"
THINK = "think"
ACT = "act"

# Events understood by incremental_layout.
APPEND_OBS_BLOCK = "append_obs_block"
APPEND_ACTION_TOKEN = "append_action_token"
FINISH_STEP = "finish_step"

MAX_ACT_TOKENS = 6


@dataclass(frozen=True)
class TokenLayout:
    """Arrangement of obs/think/action tokens over a window of steps.

    `acts[s]` is the number of action-segment tokens present in step s
    (START plus up to 5 sampled sub-action inputs). `open_step` marks a
    step still being grown by the incremental sampling loop.
    """

    n_obs: int
    n_think: int
    acts: tuple[int, ...] = ()
    open_step: bool = False
    allow_past_actions: bool = False

    def __post_init__(self):
        if self.n_obs < 0 or self.n_think < 0:
            raise ValueError("n_obs/n_think must be non-negative")
        if any(a < 0 or a > MAX_ACT_TOKENS for a in self.acts):
            raise ValueError(f"per-step action token count must be 0..{MAX_ACT_TOKENS}")

    @property
    def n_steps(self) -> int:
        return len(self.acts)

    def step_len(self, s: int) -> int:
        return self.n_obs + self.n_think + self.acts[s]

    def step_start(self, s: int) -> int:
        return sum(self.step_len(i) for i in range(s))

    @property
    def total_tokens(self) -> int:
        return sum(self.step_len(s) for s in range(self.n_steps))

    def token_info(self, g: int) -> tuple[int, str, int]:
        """Global index -> (step, kind, offset within its segment)."""
        if g < 0:
            raise IndexError(f"token index {g} out of range")
        rem = g
        for s in range(self.n_steps):
            if rem < self.n_obs:
                return s, OBS, rem
            rem -= self.n_obs
            if rem < self.n_think:
                return s, THINK, rem
            rem -= self.n_think
            if rem < self.acts[s]:
                return s, ACT, rem
            rem -= self.acts[s]
        raise IndexError(f"token index {g} out of range (total {self.total_tokens})")


def allowed(layout: TokenLayout, q: int, k: int) -> bool:
    """Rule-level oracle: may query token q attend to key token k?"""
    q_step, q_kind, q_off = layout.token_info(q)
    k_step, k_kind, k_off = layout.token_info(k)
    if k_step > q_step:
        return False  # R1
    if k_kind != ACT:
        return True  # R2 / R4: obs+think of own or earlier steps
    # Key is an action token.
    if k_step < q_step:
        return layout.allow_past_actions
    if q_kind != ACT:
        return False  # R3: obs/think never see same-step actions
    return k_off <= q_off  # R5 staircase, self-inclusive


def build_mask(layout: TokenLayout) -> np.ndarray:
    """Boolean mask matrix: entry (q, k) = True iff q may attend to k.

    Vectorized construction; agrees with `allowed` entry-for-entry.
    """
    n = layout.total_tokens
    step = np.empty(n, dtype=np.int64)
    is_act = np.zeros(n, dtype=bool)
    act_off = np.zeros(n, dtype=np.int64)
    i = 0
    for s in range(layout.n_steps):
        span = layout.step_len(s)
        step[i:i + span] = s
        a = layout.acts[s]
        if a:
            is_act[i + span - a:i + span] = True
            act_off[i + span - a:i + span] = np.arange(a)
        i += span

    q_step, k_step = step[:, None], step[None, :]
    q_act, k_act = is_act[:, None], is_act[None, :]
    q_off, k_off = act_off[:, None], act_off[None, :]

    same_or_earlier = k_step <= q_step
    mask = same_or_earlier & ~k_act
    staircase = q_act & k_act & (k_step == q_step) & (k_off <= q_off)
    mask |= staircase
    if layout.allow_past_actions:
        mask |= k_act & (k_step < q_step)
    return mask


def incremental_layout(layout: TokenLayout, event: str) -> TokenLayout:
    """Grow a layout one sampling-loop event at a time.

    Legal order per step: append_obs_block once, then up to 6
    append_action_token, then finish_step. Illegal orders raise.
    """
    if event == APPEND_OBS_BLOCK:
        if layout.open_step:
            raise ValueError("obs block already appended for the open step")
        return replace(layout, acts=layout.acts + (0,), open_step=True)
    if event == APPEND_ACTION_TOKEN:
        if not layout.open_step:
            raise ValueError("no open step to append an action token to")
        if layout.acts[-1] >= MAX_ACT_TOKENS:
            raise ValueError(f"at most {MAX_ACT_TOKENS} action tokens per step")
        return replace(layout, acts=layout.acts[:-1] + (layout.acts[-1] + 1,))
    if event == FINISH_STEP:
        if not layout.open_step:
            raise ValueError("no open step to finish")
        return replace(layout, open_step=False)
    raise ValueError(f"unknown layout event {event!r}")
