"""Binary checkpoint container shared by policy and IDM weights.

Layout (little-endian):

    magic "P2PW" | u32 version=1
    u32 model kind (0 = policy, 1 = idm)
    config block: fixed per-kind sequence of u32/f32 words
    tensors until EOF:
        u16 name length | name bytes (utf-8) | u8 rank | u32 dims x rank | f32 data

Weights are stored and reloaded as float32, so a reloaded model evaluates
bit-identically to the one saved.
"""
from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np
import torch

CHECKPOINT_MAGIC = b"P2PW"
CHECKPOINT_VERSION = 1
KIND_POLICY = 0
KIND_IDM = 1


class CheckpointError(ValueError):
    pass


def _write_words(f: BinaryIO, words: list[tuple[str, float]]) -> None:
    for fmt, value in words:
        f.write(struct.pack("<" + fmt, value))


def _split_seed(seed: int) -> tuple[int, int]:
    return seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF


def _join_seed(lo: int, hi: int) -> int:
    return (hi << 32) | lo


def write_checkpoint(path, kind: int, config_words: list[tuple[str, float]],
                     tensors: dict[str, torch.Tensor]) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, kind))
        _write_words(f, config_words)
        for name, t in tensors.items():
            arr = t.detach().cpu().to(torch.float32).numpy()
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f4").tobytes())


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint reading {what}")
    return buf


def read_checkpoint(path):
    """Returns (kind, config word list, {name: f32 ndarray})."""
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError("bad checkpoint magic")
        version, kind = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        schema = _CONFIG_SCHEMAS.get(kind)
        if schema is None:
            raise CheckpointError(f"unknown model kind {kind}")
        words = {}
        for name, fmt in schema:
            (words[name],) = struct.unpack("<" + fmt, _read_exact(f, 4, name))
        tensors: dict[str, np.ndarray] = {}
        while True:
            head = f.read(2)
            if not head:
                break
            if len(head) != 2:
                raise CheckpointError("truncated tensor name length")
            (name_len,) = struct.unpack("<H", head)
            name = _read_exact(f, name_len, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, "tensor rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "tensor dims"))
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(_read_exact(f, 4 * count, f"tensor {name}"),
                                 dtype="<f4").reshape(dims).copy()
            tensors[name] = data
        return kind, words, tensors


# Config block schemas, in file order.
_CONFIG_SCHEMAS = {
    KIND_POLICY: [("d_model", "I"), ("n_layers", "I"), ("n_heads", "I"),
                  ("patch_size", "I"), ("frame_size", "I"), ("k_think", "I"),
                  ("t_ctx", "I"), ("temperature", "f"),
                  ("seed_lo", "I"), ("seed_hi", "I")],
    KIND_IDM: [("t_w", "I"), ("d_model", "I"), ("n_layers", "I"), ("n_heads", "I"),
               ("frame_size", "I"), ("conv1_channels", "I"), ("conv2_channels", "I"),
               ("seed_lo", "I"), ("seed_hi", "I")],
}


def save_policy(path, net) -> None:
    cfg = net.config
    lo, hi = _split_seed(cfg.seed)
    words = [("I", cfg.d_model), ("I", cfg.n_layers), ("I", cfg.n_heads),
             ("I", cfg.patch_size), ("I", cfg.frame_size), ("I", cfg.k_think),
             ("I", cfg.t_ctx), ("f", cfg.temperature), ("I", lo), ("I", hi)]
    write_checkpoint(path, KIND_POLICY, words, dict(net.state_dict()))


def load_policy(path):
    from .policy import PolicyConfig, PolicyNet

    kind, w, tensors = read_checkpoint(path)
    if kind != KIND_POLICY:
        raise CheckpointError(f"expected a policy checkpoint, got kind {kind}")
    cfg = PolicyConfig(d_model=w["d_model"], n_layers=w["n_layers"], n_heads=w["n_heads"],
                       patch_size=w["patch_size"], frame_size=w["frame_size"],
                       k_think=w["k_think"], t_ctx=w["t_ctx"],
                       temperature=w["temperature"],
                       seed=_join_seed(w["seed_lo"], w["seed_hi"]))
    net = PolicyNet(cfg)
    net.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    return net


def save_idm(path, net) -> None:
    cfg = net.config
    lo, hi = _split_seed(cfg.seed)
    words = [("I", cfg.t_w), ("I", cfg.d_model), ("I", cfg.n_layers), ("I", cfg.n_heads),
             ("I", cfg.frame_size), ("I", cfg.conv_channels[0]), ("I", cfg.conv_channels[1]),
             ("I", lo), ("I", hi)]
    write_checkpoint(path, KIND_IDM, words, dict(net.state_dict()))


def load_idm(path):
    from .idm import IDMConfig, IDMNet

    kind, w, tensors = read_checkpoint(path)
    if kind != KIND_IDM:
        raise CheckpointError(f"expected an IDM checkpoint, got kind {kind}")
    cfg = IDMConfig(t_w=w["t_w"], d_model=w["d_model"], n_layers=w["n_layers"],
                    n_heads=w["n_heads"], frame_size=w["frame_size"],
                    conv_channels=(w["conv1_channels"], w["conv2_channels"]),
                    seed=_join_seed(w["seed_lo"], w["seed_hi"]))
    net = IDMNet(cfg)
    net.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    return net


def describe_checkpoint(path) -> dict:
    """Header summary for the CLI inspect subcommand."""
    kind, words, tensors = read_checkpoint(path)
    return {
        "kind": {KIND_POLICY: "policy", KIND_IDM: "idm"}[kind],
        "config": words,
        "tensors": {k: list(v.shape) for k, v in tensors.items()},
        "n_params": int(sum(v.size for v in tensors.values())),
    }
