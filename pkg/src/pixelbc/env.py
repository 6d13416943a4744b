"""GatherWorld: a deterministic toy game rendered to raw RGB pixels.

The player (WASD, SHIFT = sprint, SPACE = dash) collects green targets by
standing on one while the yellow crosshair cursor (driven by mouse bins)
hovers it and E is pressed. Red hazards cost a point and teleport the
player back to spawn. Everything is a pure function of (seed, action
sequence), so episodes are bit-reproducible.

The cursor is deliberately tiny (a 3x3 crosshair) so that policies must
resolve sub-patch detail to aim, and rewards are recorded but never used
for training (behavior cloning only).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .actions import (
    Action,
    KEY_A,
    KEY_D,
    KEY_E,
    KEY_S,
    KEY_SHIFT,
    KEY_SPACE,
    KEY_W,
    MOUSE_CLAMP,
    NULL_ACTION,
    canonicalize_chord,
    discretize_mouse,
    random_action,
)

PATCH = 8  # frame dims must divide the policy's patch grid

BASE_SPEED = 0.6          # cells per tick
SHIFT_MULT = 2.0
SPACE_MULT = 3.0

# Interaction rules live in rendered-pixel space (Chebyshev distance on the
# same integer coordinates the rasterizer uses), so everything that decides
# an outcome is visible in the frame and a pixel policy can, in principle,
# imitate the scripted expert exactly.
COLLECT_PX = 1            # player sprite to target sprite
CURSOR_PX = 3             # crosshair center to target sprite
HAZARD_PX = 1             # player sprite to hazard sprite
AVOID_PX = 3              # expert's safety margin around hazards
SPRINT_PX = 11            # expert holds SHIFT beyond this distance

COLOR_BG = (24, 26, 30)
COLOR_TARGET = (40, 220, 70)
COLOR_HAZARD = (230, 50, 50)
COLOR_PLAYER = (0, 180, 255)
COLOR_CURSOR = (255, 220, 0)

PolicyFn = Callable[["EnvState", np.random.Generator], Action]


@dataclass(frozen=True)
class EnvConfig:
    world_size: int = 24       # grid cells per side
    frame_size: int = 64       # pixels per side, 3-channel u8
    episode_len: int = 200     # ticks
    n_targets: int = 6
    n_hazards: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.frame_size % PATCH != 0:
            raise ValueError(f"frame_size must be divisible by {PATCH}, got {self.frame_size}")
        if self.episode_len < 1:
            raise ValueError("episode_len must be >= 1")
        if self.world_size < 4:
            raise ValueError("world_size too small")
        if self.n_targets < 0 or self.n_hazards < 0:
            raise ValueError("counts must be non-negative")

    @property
    def scale(self) -> float:
        return self.frame_size / self.world_size


@dataclass
class EnvState:
    config: EnvConfig
    player: np.ndarray          # (2,) float64, cells
    cursor: np.ndarray          # (2,) float64, pixels
    spawn: np.ndarray           # (2,) float64, cells
    targets: np.ndarray         # (n_targets, 2) float64, cells
    hazards: np.ndarray         # (n_hazards, 2) float64, cells
    collected: np.ndarray       # (n_targets,) bool
    tick: int = 0
    score: int = 0
    collections: int = 0
    hazard_hits: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    @property
    def done(self) -> bool:
        return self.tick >= self.config.episode_len or bool(self.collected.all())

    def copy(self) -> "EnvState":
        return dataclasses.replace(
            self,
            player=self.player.copy(),
            cursor=self.cursor.copy(),
            spawn=self.spawn.copy(),
            targets=self.targets.copy(),
            hazards=self.hazards.copy(),
            collected=self.collected.copy(),
        )


@dataclass
class Trajectory:
    """One rolled-out episode: per-tick (frame, action, reward)."""

    frames: list[np.ndarray]
    actions: list[Action]
    rewards: list[int]
    score: int
    all_collected: bool
    seed: int

    def __len__(self) -> int:
        return len(self.frames)


def reset(config: EnvConfig) -> tuple[EnvState, np.ndarray]:
    """Seed-determined initial state plus its rendered frame."""
    rng = np.random.default_rng(config.seed)
    w = config.world_size
    spawn = np.array([w / 2.0, w / 2.0])

    # Distinct integer cells; hazards keep a margin from spawn and from every
    # target so a straight-line path onto a target always has safe footing.
    def sample(n: int, taken: set, keep_clear: list[np.ndarray], margin: float):
        out = []
        while len(out) < n:
            c = (int(rng.integers(1, w - 1)), int(rng.integers(1, w - 1)))
            center = np.array(c, dtype=np.float64) + 0.5
            if c in taken:
                continue
            if any(np.linalg.norm(center - p) < margin for p in keep_clear):
                continue
            taken.add(c)
            out.append(center)
        return out

    taken: set = set()
    target_centers = sample(config.n_targets, taken, [spawn], 1.5)
    hazard_centers = sample(config.n_hazards, taken, [spawn] + target_centers, 2.0)
    centers = (np.array(target_centers + hazard_centers, dtype=np.float64)
               if taken else np.zeros((0, 2)))
    state = EnvState(
        config=config,
        player=spawn.copy(),
        cursor=np.array([config.frame_size / 2.0, config.frame_size / 2.0]),
        spawn=spawn,
        targets=centers[:config.n_targets],
        hazards=centers[config.n_targets:],
        collected=np.zeros(config.n_targets, dtype=bool),
        rng=rng,
    )
    return state, render(state)


_KEY_VECS = {
    KEY_W: np.array([0.0, -1.0]),
    KEY_A: np.array([-1.0, 0.0]),
    KEY_S: np.array([0.0, 1.0]),
    KEY_D: np.array([1.0, 0.0]),
}


def _move_vector(keys: frozenset[int]) -> np.ndarray:
    vec = np.zeros(2)
    for k in keys:
        if k in _KEY_VECS:
            vec = vec + _KEY_VECS[k]
    speed = BASE_SPEED
    if KEY_SHIFT in keys:
        speed *= SHIFT_MULT
    if KEY_SPACE in keys:
        speed *= SPACE_MULT
    return vec * speed


def to_px(pos: np.ndarray, scale: float) -> np.ndarray:
    """Continuous cell position -> the integer pixel the rasterizer drew."""
    return (np.asarray(pos) * scale).astype(int)


def _chebyshev(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b).max(axis=-1)


def step(state: EnvState, action: Action) -> tuple[EnvState, np.ndarray, int, bool]:
    """Advance one tick. Deterministic given (state, action)."""
    if state.done:
        raise ValueError("cannot step a terminal state")
    cfg = state.config
    s = state.copy()

    s.player = np.clip(s.player + _move_vector(action.keys), 0.0, cfg.world_size - 1e-9)
    s.cursor = np.clip(s.cursor + np.array([action.dx, action.dy]), 0.0, cfg.frame_size - 1.0)

    reward = 0
    player_px = to_px(s.player, cfg.scale)
    hazard_hit = (s.hazards.size > 0
                  and bool((_chebyshev(to_px(s.hazards, cfg.scale), player_px)
                            <= HAZARD_PX).any()))
    if hazard_hit:
        reward = -1
        s.hazard_hits += 1
        s.player = s.spawn.copy()
    elif KEY_E in action.keys and s.targets.size > 0:
        target_px = to_px(s.targets, cfg.scale)
        cursor_px = s.cursor.astype(int)
        hit = (~s.collected) & (_chebyshev(target_px, player_px) <= COLLECT_PX) \
            & (_chebyshev(target_px, cursor_px) <= CURSOR_PX)
        if hit.any():
            idx = int(np.argmax(hit))  # at most one target inside the box in practice
            s.collected[idx] = True
            s.collections += 1
            reward = 1

    s.score += reward
    s.tick += 1
    return s, render(s), reward, s.done


def _blit(frame: np.ndarray, cx: int, cy: int, half: int, color: tuple[int, int, int]) -> None:
    h, w = frame.shape[:2]
    x0, x1 = max(cx - half, 0), min(cx + half + 1, w)
    y0, y1 = max(cy - half, 0), min(cy + half + 1, h)
    if x0 < x1 and y0 < y1:
        frame[y0:y1, x0:x1] = color


def render(state: EnvState) -> np.ndarray:
    """Pure rasterizer: state -> (H, W, 3) u8 frame.

    Draw order target < hazard < player < cursor; the cursor is a 5-pixel
    crosshair inside a 3x3 box so a cursor-only state change touches at
    most 18 pixels.
    """
    cfg = state.config
    frame = np.empty((cfg.frame_size, cfg.frame_size, 3), dtype=np.uint8)
    frame[:] = COLOR_BG
    for pos in state.targets[~state.collected]:
        px, py = (pos * cfg.scale).astype(int)
        _blit(frame, px, py, 1, COLOR_TARGET)
    for pos in state.hazards:
        px, py = (pos * cfg.scale).astype(int)
        _blit(frame, px, py, 1, COLOR_HAZARD)
    px, py = (state.player * cfg.scale).astype(int)
    _blit(frame, px, py, 2, COLOR_PLAYER)
    cx, cy = state.cursor.astype(int)
    h, w = frame.shape[:2]
    for dx, dy in ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)):
        x, y = cx + dx, cy + dy
        if 0 <= x < w and 0 <= y < h:
            frame[y, x] = COLOR_CURSOR
    return frame


def expert_policy(state: EnvState, rng: np.random.Generator) -> Action:
    """Greedy scripted expert.

    Heads for the nearest uncollected target (diagonal chords, SHIFT when
    far, deterministic sidesteps around hazards), steers the cursor onto
    it with the nearest discretized delta, and presses E once both the
    overlap and cursor conditions hold. Every decision reads the
    pixel-rounded positions the renderer draws, never sub-pixel state, so
    the expert's action is a pure function of the visible frame (rng only
    breaks exact pixel-distance ties between targets).
    """
    cfg = state.config
    remaining = np.flatnonzero(~state.collected)
    if remaining.size == 0:
        return NULL_ACTION
    player_px = to_px(state.player, cfg.scale)
    targets_px = to_px(state.targets, cfg.scale)
    dists = np.linalg.norm(targets_px[remaining] - player_px, axis=1)
    best = dists.min()
    tied = remaining[np.abs(dists - best) < 1e-9]
    target_idx = int(tied[0]) if tied.size == 1 else int(tied[rng.integers(tied.size)])
    target_px = targets_px[target_idx]

    keys: set[int] = set()
    delta = target_px - player_px
    on_target = _chebyshev(target_px, player_px) <= COLLECT_PX
    if not on_target:
        if delta[0] > COLLECT_PX:
            keys.add(KEY_D)
        elif delta[0] < -COLLECT_PX:
            keys.add(KEY_A)
        if delta[1] > COLLECT_PX:
            keys.add(KEY_S)
        elif delta[1] < -COLLECT_PX:
            keys.add(KEY_W)
        if float(np.linalg.norm(delta)) > SPRINT_PX:
            keys.add(KEY_SHIFT)
        keys = _avoid_hazards(state, keys, delta)

    # Steer the crosshair onto the target sprite.
    cursor_px = state.cursor.astype(int)
    cursor_delta = target_px - cursor_px
    dx_bin = discretize_mouse(float(np.clip(cursor_delta[0], -MOUSE_CLAMP, MOUSE_CLAMP)))
    dy_bin = discretize_mouse(float(np.clip(cursor_delta[1], -MOUSE_CLAMP, MOUSE_CLAMP)))

    if on_target and _chebyshev(target_px, cursor_px) <= CURSOR_PX:
        keys.add(KEY_E)
    return Action(chord=canonicalize_chord(keys), dx_bin=dx_bin, dy_bin=dy_bin)


def _avoid_hazards(state: EnvState, keys: set[int], delta: np.ndarray) -> set[int]:
    """Replace a move that would land near a hazard with a safe sidestep."""
    if state.hazards.size == 0 or not keys:
        return keys
    cfg = state.config
    hazards_px = to_px(state.hazards, cfg.scale)
    player_px = to_px(state.player, cfg.scale)

    def safe(candidate: set[int]) -> bool:
        # Landing estimated from the visible position (the true landing can
        # differ by a pixel; AVOID_PX leaves margin for that), so the
        # decision stays a pure function of the frame.
        est = player_px + np.round(_move_vector(frozenset(candidate)) * cfg.scale)
        est = np.clip(est, 0, cfg.frame_size - 1)
        return bool((_chebyshev(hazards_px, est) > AVOID_PX).all())

    if safe(keys):
        return keys
    shift = {KEY_SHIFT} & keys
    x_key = {KEY_D} if delta[0] >= 0 else {KEY_A}
    y_key = {KEY_S} if delta[1] >= 0 else {KEY_W}
    # Prefer single-axis progress, then perpendicular sidesteps, then retreat.
    candidates = [x_key, y_key, {KEY_S} if KEY_S not in y_key else {KEY_W},
                  {KEY_A} if KEY_A not in x_key else {KEY_D}]
    if abs(delta[1]) > abs(delta[0]):
        candidates[0], candidates[1] = candidates[1], candidates[0]
    for cand in candidates:
        if safe(cand | shift):
            return cand | shift
        if safe(cand):
            return cand
    return keys  # no safe move; accept the hit


def random_policy(state: EnvState, rng: np.random.Generator) -> Action:
    """Uniform over legal token sequences; the untrained-policy baseline."""
    return random_action(rng)


def noisy_expert_policy(epsilon: float = 0.2) -> PolicyFn:
    """Expert with per-tick probability epsilon of a uniform random action.

    Generates the near- but off-distribution unlabeled corpus.
    """

    def policy(state: EnvState, rng: np.random.Generator) -> Action:
        if rng.random() < epsilon:
            return random_action(rng)
        return expert_policy(state, rng)

    return policy


def generate_episode(config: EnvConfig, policy: PolicyFn,
                     rng: np.random.Generator) -> Trajectory:
    """Roll a policy until done, recording (frame, action, reward) per tick."""
    state, frame = reset(config)
    frames: list[np.ndarray] = []
    actions: list[Action] = []
    rewards: list[int] = []
    done = state.done
    while not done:
        action = policy(state, rng)
        frames.append(frame)
        actions.append(action)
        state, frame, reward, done = step(state, action)
        rewards.append(reward)
    return Trajectory(frames=frames, actions=actions, rewards=rewards,
                      score=state.score, all_collected=bool(state.collected.all()),
                      seed=config.seed)
