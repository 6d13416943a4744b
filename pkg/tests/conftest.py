"""Shared fixtures: tiny model configs and synthetic labeled episodes."""
import numpy as np
import pytest
import torch

from pixelbc import env as E
from pixelbc.actions import Action, canonicalize_chord
from pixelbc.data import EpisodeRecord
from pixelbc.idm import IDMConfig
from pixelbc.policy import PolicyConfig

torch.set_num_threads(2)


@pytest.fixture
def tiny_cfg():
    # 16x16 frames -> 4 obs tokens; small enough for finite differences.
    return PolicyConfig(d_model=32, n_layers=2, n_heads=2, patch_size=8,
                        frame_size=16, k_think=2, t_ctx=4, seed=0)


@pytest.fixture
def tiny_idm_cfg():
    return IDMConfig(t_w=6, d_model=32, n_layers=2, n_heads=2, frame_size=16,
                     conv_channels=(4, 8), seed=0)


def synthetic_records(n_episodes=3, n_frames=20, frame_size=16, seed=0,
                      provenance="expert"):
    """Labeled episodes with actions weakly correlated to pixel content."""
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(n_episodes):
        frames = rng.integers(0, 256, (n_frames, frame_size, frame_size, 3),
                              dtype=np.uint8)
        actions = []
        for t in range(n_frames):
            key = int(frames[t].sum()) % 8
            actions.append(Action(chord=canonicalize_chord({key}),
                                  dx_bin=int(frames[t, 0, 0, 0]) % 11,
                                  dy_bin=int(frames[t, 0, 0, 1]) % 11))
        records.append(EpisodeRecord(frames=frames, actions=actions,
                                     provenance=provenance,
                                     seed=int(rng.integers(1 << 31))))
    return records


@pytest.fixture
def tiny_records():
    return synthetic_records()


def gather_records(n_episodes=4, seed=0, frame_size=64, episode_len=40,
                   policy=None):
    """Real GatherWorld expert episodes at a given frame size."""
    from pixelbc.data import record_from_trajectory

    records = []
    for i in range(n_episodes):
        cfg = E.EnvConfig(seed=seed + i, frame_size=frame_size,
                          episode_len=episode_len)
        traj = E.generate_episode(cfg, policy or E.expert_policy,
                                  np.random.default_rng(seed + i))
        records.append(record_from_trajectory(traj))
    return records
