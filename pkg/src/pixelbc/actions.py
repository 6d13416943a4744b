"""Chorded keyboard + discretized mouse action space and its token codec.

Single source of truth for action indexing. Everything that touches
actions (env, policy heads, IDM heads, episode files, the wire protocol)
imports from here so the encodings can never drift apart.

An action is a chord of up to four simultaneously held keys plus a
discretized 2-axis mouse delta. Chords are stored canonically: key ids
strictly increasing, padded with NONE. The whole action maps to a fixed
sequence of 6 sub-action tokens (4 chord slots, dx bin, dy bin) drawn
from a 21-token vocabulary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

# Key ids.
KEY_W, KEY_A, KEY_S, KEY_D, KEY_SHIFT, KEY_SPACE, KEY_E, KEY_F = range(8)
KEY_NAMES = ("W", "A", "S", "D", "SHIFT", "SPACE", "E", "F")
N_KEYS = 8
NONE_SLOT = 8  # chord slot value meaning "no key held"
MAX_CHORD = 4

# Mouse delta discretization: fixed asymmetrically spaced bin centers,
# pixels per tick. Coarse at the edges, fine around stillness.
MOUSE_BIN_CENTERS = (-40.0, -20.0, -10.0, -4.0, -1.0, 0.0, 1.0, 4.0, 10.0, 20.0, 40.0)
N_MOUSE_BINS = len(MOUSE_BIN_CENTERS)
MOUSE_CLAMP = 256.0  # raw deltas are clamped upstream to +/- this

# Token vocabulary: START=0; chord tokens 1..9 (key id k -> 1+k, NONE -> 9);
# mouse-bin tokens 10..20 (bin b -> 10+b). Total 21.
START_TOKEN = 0
CHORD_TOKEN_BASE = 1
NONE_TOKEN = CHORD_TOKEN_BASE + NONE_SLOT  # 9
MOUSE_TOKEN_BASE = 10
VOCAB_SIZE = 21

N_ACTION_TOKENS = 6
# Per-position legal vocabulary sizes: 4 chord positions (8 keys + NONE),
# then 2 mouse positions (11 bins).
POSITION_VOCAB_SIZES = (9, 9, 9, 9, 11, 11)


class ActionDecodeError(ValueError):
    """A token sequence does not parse to a canonical action."""

    def __init__(self, position: int, token: int, reason: str):
        self.position = position
        self.token = token
        self.reason = reason
        super().__init__(f"position {position}, token {token}: {reason}")


def canonicalize_chord(keys: Iterable[int]) -> tuple[int, int, int, int]:
    """Sort a set of key ids into the canonical 4-slot chord tuple.

    Non-NONE slots are the key ids in strictly increasing order; the
    remainder is NONE-padded. More than four distinct keys is an error.
    """
    unique = sorted(set(keys))
    if any(k < 0 or k >= N_KEYS for k in unique):
        raise ValueError(f"key ids must be in 0..{N_KEYS - 1}, got {unique}")
    if len(unique) > MAX_CHORD:
        raise ValueError(f"chord holds at most {MAX_CHORD} keys, got {len(unique)}")
    slots = unique + [NONE_SLOT] * (MAX_CHORD - len(unique))
    return tuple(slots)


NULL_CHORD = canonicalize_chord(())


@dataclass(frozen=True)
class Action:
    """One tick of control: canonical chord + discretized mouse delta."""

    chord: tuple[int, int, int, int] = NULL_CHORD
    dx_bin: int = N_MOUSE_BINS // 2
    dy_bin: int = N_MOUSE_BINS // 2

    def __post_init__(self):
        if len(self.chord) != MAX_CHORD:
            raise ValueError(f"chord must have {MAX_CHORD} slots, got {self.chord}")
        non_none = [s for s in self.chord if s != NONE_SLOT]
        if canonicalize_chord(non_none) != tuple(self.chord):
            raise ValueError(f"chord {self.chord} is not canonical")
        for b in (self.dx_bin, self.dy_bin):
            if not 0 <= b < N_MOUSE_BINS:
                raise ValueError(f"mouse bin {b} out of range 0..{N_MOUSE_BINS - 1}")

    @property
    def keys(self) -> frozenset[int]:
        return frozenset(s for s in self.chord if s != NONE_SLOT)

    @property
    def dx(self) -> float:
        return undiscretize_mouse(self.dx_bin)

    @property
    def dy(self) -> float:
        return undiscretize_mouse(self.dy_bin)


NULL_ACTION = Action()


def discretize_mouse(v: float) -> int:
    """Map a raw per-tick delta to the nearest bin center.

    Ties break toward the smaller-magnitude center (bias toward stillness).
    """
    if not math.isfinite(v):
        raise ValueError(f"mouse delta must be finite, got {v}")
    best = min(range(N_MOUSE_BINS),
               key=lambda b: (abs(v - MOUSE_BIN_CENTERS[b]), abs(MOUSE_BIN_CENTERS[b])))
    return best


def undiscretize_mouse(b: int) -> float:
    """Bin index back to its center value (inference-time emission)."""
    if not 0 <= b < N_MOUSE_BINS:
        raise ValueError(f"mouse bin {b} out of range 0..{N_MOUSE_BINS - 1}")
    return MOUSE_BIN_CENTERS[b]


def action_to_tokens(a: Action) -> list[int]:
    """Encode an action as its 6 sub-action token ids."""
    return ([CHORD_TOKEN_BASE + s for s in a.chord]
            + [MOUSE_TOKEN_BASE + a.dx_bin, MOUSE_TOKEN_BASE + a.dy_bin])


def tokens_to_action(seq: Sequence[int]) -> Action:
    """Decode 6 sub-action tokens back to an Action (inverse of encode).

    Raises ActionDecodeError on out-of-range tokens or non-canonical
    chords (unsorted, duplicate, key after NONE).
    """
    if len(seq) != N_ACTION_TOKENS:
        raise ActionDecodeError(len(seq), -1, f"expected {N_ACTION_TOKENS} tokens")
    slots = []
    for pos in range(MAX_CHORD):
        tok = seq[pos]
        if not CHORD_TOKEN_BASE <= tok <= NONE_TOKEN:
            raise ActionDecodeError(pos, tok, "not a chord token")
        slots.append(tok - CHORD_TOKEN_BASE)
    seen_none = False
    last_key = -1
    for pos, s in enumerate(slots):
        if s == NONE_SLOT:
            seen_none = True
        elif seen_none:
            raise ActionDecodeError(pos, seq[pos], "key after NONE")
        elif s <= last_key:
            raise ActionDecodeError(pos, seq[pos], "chord ids not strictly increasing")
        else:
            last_key = s
    bins = []
    for pos in (4, 5):
        tok = seq[pos]
        if not MOUSE_TOKEN_BASE <= tok < MOUSE_TOKEN_BASE + N_MOUSE_BINS:
            raise ActionDecodeError(pos, tok, "not a mouse token")
        bins.append(tok - MOUSE_TOKEN_BASE)
    return Action(chord=tuple(slots), dx_bin=bins[0], dy_bin=bins[1])


def legal_tokens(position: int, prefix: Sequence[int]) -> set[int]:
    """Legal token ids at a sub-action position given the sampled prefix.

    Chord positions admit NONE always, and any key strictly above the
    last key sampled so far; once NONE appears only NONE remains. Mouse
    positions admit all bins. Sampling under this rule always yields a
    sequence that parses without error.
    """
    if not 0 <= position < N_ACTION_TOKENS:
        raise ValueError(f"position {position} out of range")
    if len(prefix) < min(position, MAX_CHORD):
        raise ValueError(f"prefix of length {len(prefix)} inconsistent with position {position}")
    if position >= MAX_CHORD:
        return set(range(MOUSE_TOKEN_BASE, MOUSE_TOKEN_BASE + N_MOUSE_BINS))
    chord_prefix = [t - CHORD_TOKEN_BASE for t in prefix[:position]]
    if NONE_SLOT in chord_prefix:
        return {NONE_TOKEN}
    last_key = max(chord_prefix, default=-1)
    legal = {CHORD_TOKEN_BASE + k for k in range(last_key + 1, N_KEYS)}
    legal.add(NONE_TOKEN)
    return legal


def token_to_local(position: int, token: int) -> int:
    """Global token id -> index into that position's output head."""
    base = CHORD_TOKEN_BASE if position < MAX_CHORD else MOUSE_TOKEN_BASE
    local = token - base
    if not 0 <= local < POSITION_VOCAB_SIZES[position]:
        raise ValueError(f"token {token} illegal at position {position}")
    return local


def local_to_token(position: int, local: int) -> int:
    """Head index -> global token id for a sub-action position."""
    if not 0 <= local < POSITION_VOCAB_SIZES[position]:
        raise ValueError(f"local index {local} out of range at position {position}")
    base = CHORD_TOKEN_BASE if position < MAX_CHORD else MOUSE_TOKEN_BASE
    return base + local


def all_valid_chords() -> list[tuple[int, int, int, int]]:
    """Every canonical chord (sum over sizes 0..4 of C(8,k) = 163)."""
    from itertools import combinations

    out = []
    for k in range(MAX_CHORD + 1):
        for combo in combinations(range(N_KEYS), k):
            out.append(canonicalize_chord(combo))
    return out


def random_action(rng) -> Action:
    """Sample an action uniformly over legal tokens at each position.

    Matches the sampling structure of an untrained policy (uniform over
    each position's legal set), which keeps random-baseline behavior
    comparable to untrained-policy behavior.
    """
    tokens: list[int] = []
    for pos in range(N_ACTION_TOKENS):
        legal = sorted(legal_tokens(pos, tokens))
        tokens.append(legal[rng.integers(len(legal))])
    return tokens_to_action(tokens)
