"""Episode persistence, the shared resize function, and train-time augmentation.

`resize_frame` is the single resize implementation in the artifact; the
recorder, the training loader, the inference loop, and the UI streamer
all call this symbol, which is what closes the train/inference
distribution gap caused by mismatched resampling code.

Augmentation simulates variable video-compression quality by bit-depth
quantization plus a brightness jitter, drawn once per episode and applied
at training time only. Episode files are raw little-endian binary (format
below) so round trips are bit-exact and tests stay codec-free.
"""
from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

from .actions import Action, MOUSE_CLAMP, discretize_mouse, undiscretize_mouse
from .env import Trajectory

EPISODE_MAGIC = b"P2PD"
EPISODE_VERSION = 1

PROVENANCES = ("expert", "noisy_expert", "human", "imputed")
_PROV_CODE = {name: i for i, name in enumerate(PROVENANCES)}


class EpisodeFileError(ValueError):
    """Corrupt or truncated episode file; carries the failing byte offset."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} at byte offset {offset}")


@dataclass(eq=False)
class EpisodeRecord:
    """A stored episode: frames plus (possibly absent) per-tick actions."""

    frames: np.ndarray                      # (N, H, W, 3) u8
    actions: list[Action] | None = None     # present iff labeled
    raw_deltas: np.ndarray | None = None    # (N, 2) i16, pre-discretization pixels
    confidences: np.ndarray | None = None   # (N, 6) f32, imputed only
    provenance: str = "expert"
    source_id: str = ""
    seed: int = 0
    created_at: float = field(default_factory=time.time)

    def __post_init__(self):
        if self.frames.dtype != np.uint8 or self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError("frames must be (N, H, W, 3) uint8")
        if self.provenance not in _PROV_CODE:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        n = len(self.frames)
        if self.actions is not None and len(self.actions) != n:
            raise ValueError("action count must equal frame count")
        if self.provenance == "imputed" and self.confidences is None:
            raise ValueError("imputed episodes must carry confidences")
        if self.actions is not None and self.raw_deltas is None:
            self.raw_deltas = np.array(
                [[round(a.dx), round(a.dy)] for a in self.actions], dtype=np.int16
            ).reshape(n, 2)

    @property
    def labeled(self) -> bool:
        return self.actions is not None

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def __eq__(self, other) -> bool:
        # Content equality; created_at/source_id are session metadata and
        # deliberately outside the stored format.
        if not isinstance(other, EpisodeRecord):
            return NotImplemented
        same_conf = ((self.confidences is None) == (other.confidences is None)
                     and (self.confidences is None
                          or np.array_equal(self.confidences, other.confidences)))
        same_raw = ((self.raw_deltas is None) == (other.raw_deltas is None)
                    and (self.raw_deltas is None
                         or np.array_equal(self.raw_deltas, other.raw_deltas)))
        return (np.array_equal(self.frames, other.frames)
                and self.actions == other.actions
                and same_raw and same_conf
                and self.provenance == other.provenance
                and self.seed == other.seed)


def record_from_trajectory(traj: Trajectory, provenance: str = "expert",
                           source_id: str = "") -> EpisodeRecord:
    return EpisodeRecord(
        frames=np.stack(traj.frames) if traj.frames else np.zeros((0, 1, 1, 3), np.uint8),
        actions=list(traj.actions),
        provenance=provenance,
        source_id=source_id,
        seed=traj.seed,
    )


# ---------------------------------------------------------------------------
# Shared resize
# ---------------------------------------------------------------------------

def resize_frame(frame: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize, the one resampler every pipeline must use.

    Source coordinate for output pixel x is (x + 0.5) * (in / out) - 0.5,
    clamped to [0, in - 1]; channels interpolate in f32; the result is
    rounded half-up to u8.
    """
    if out_w <= 0 or out_h <= 0:
        raise ValueError(f"output dims must be positive, got {out_w}x{out_h}")
    flat = frame.ndim == 2
    if flat:
        frame = frame[..., None]
    in_h, in_w = frame.shape[:2]

    def axis_coords(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = (src - lo).astype(np.float32)
        return lo, hi, frac

    x0, x1, fx = axis_coords(out_w, in_w)
    y0, y1, fy = axis_coords(out_h, in_h)
    img = frame.astype(np.float32)
    top = img[y0][:, x0] * (1 - fx)[None, :, None] + img[y0][:, x1] * fx[None, :, None]
    bot = img[y1][:, x0] * (1 - fx)[None, :, None] + img[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    out = np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    return out[..., 0] if flat else out


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    quality_levels: tuple[int, ...] = (4, 5, 6, 7, 8)  # bits per channel
    brightness_jitter: int = 10


@dataclass(frozen=True)
class AugmentParams:
    quality_bits: int
    brightness: int


def draw_augment_params(rng: np.random.Generator,
                        config: AugmentConfig = AugmentConfig()) -> AugmentParams:
    """One draw per episode: quality level and brightness shift."""
    q = int(config.quality_levels[rng.integers(len(config.quality_levels))])
    b = int(rng.integers(-config.brightness_jitter, config.brightness_jitter + 1))
    return AugmentParams(quality_bits=q, brightness=b)


def quantize_frame(frame: np.ndarray, quality_bits: int) -> np.ndarray:
    """Reduce to 2^q levels per channel: floor to level, re-expand to midpoint."""
    if quality_bits >= 8:
        return frame.copy()
    step = 256 >> quality_bits
    level = frame // step
    return (level * step + (step - 1) // 2).astype(np.uint8)


def apply_augment(frame: np.ndarray, params: AugmentParams) -> np.ndarray:
    out = quantize_frame(frame, params.quality_bits)
    if params.brightness:
        out = np.clip(out.astype(np.int16) + params.brightness, 0, 255).astype(np.uint8)
    return out


def augment(frame: np.ndarray, rng: np.random.Generator,
            config: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Draw params and apply; training loaders draw once per episode instead."""
    return apply_augment(frame, draw_augment_params(rng, config))


# ---------------------------------------------------------------------------
# Episode file format
#
#   magic "P2PD" | u32 version | u32 episode count
#   per episode:
#     u32 frame count | u16 W | u16 H | u8 channels(=3) | u8 labeled
#     u8 provenance | u8 reserved | u64 seed
#     frames: raw u8 row-major
#     if labeled, per tick: 4xu8 chord slots | i16 dx_raw | i16 dy_raw
#                           | u8 dx_bin | u8 dy_bin
#                           | if imputed: 6xf32 confidences
# ---------------------------------------------------------------------------

_EP_HEADER = struct.Struct("<IHHBBBBQ")


def write_episodes(records: Sequence[EpisodeRecord], path) -> None:
    with open(path, "wb") as f:
        f.write(EPISODE_MAGIC)
        f.write(struct.pack("<II", EPISODE_VERSION, len(records)))
        for rec in records:
            n, h, w = rec.frames.shape[0], rec.frames.shape[1], rec.frames.shape[2]
            f.write(_EP_HEADER.pack(n, w, h, 3, int(rec.labeled),
                                    _PROV_CODE[rec.provenance], 0, rec.seed))
            f.write(rec.frames.tobytes())
            if rec.labeled:
                imputed = rec.provenance == "imputed"
                for i, a in enumerate(rec.actions):
                    dx_raw, dy_raw = (int(rec.raw_deltas[i, 0]), int(rec.raw_deltas[i, 1]))
                    f.write(struct.pack("<4BhhBB", *a.chord, dx_raw, dy_raw,
                                        a.dx_bin, a.dy_bin))
                    if imputed:
                        f.write(struct.pack("<6f", *rec.confidences[i]))


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    offset = f.tell()
    buf = f.read(n)
    if len(buf) != n:
        raise EpisodeFileError(f"truncated file reading {what}", offset + len(buf))
    return buf


def read_episodes(path) -> list[EpisodeRecord]:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != EPISODE_MAGIC:
            raise EpisodeFileError(f"bad magic {magic!r}", 0)
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != EPISODE_VERSION:
            raise EpisodeFileError(f"unsupported version {version}", 4)
        records = []
        for _ in range(count):
            n, w, h, channels, labeled, prov_code, _reserved, seed = _EP_HEADER.unpack(
                _read_exact(f, _EP_HEADER.size, "episode header"))
            if channels != 3:
                raise EpisodeFileError(f"expected 3 channels, got {channels}",
                                       f.tell() - _EP_HEADER.size)
            if prov_code >= len(PROVENANCES):
                raise EpisodeFileError(f"unknown provenance code {prov_code}",
                                       f.tell() - _EP_HEADER.size)
            frames = np.frombuffer(_read_exact(f, n * h * w * 3, "frames"),
                                   dtype=np.uint8).reshape(n, h, w, 3).copy()
            provenance = PROVENANCES[prov_code]
            actions = None
            raw = None
            conf = None
            if labeled:
                imputed = provenance == "imputed"
                actions, raw_rows, conf_rows = [], [], []
                for _t in range(n):
                    at = f.tell()
                    s0, s1, s2, s3, dx_raw, dy_raw, dxb, dyb = struct.unpack(
                        "<4BhhBB", _read_exact(f, 10, "action"))
                    try:
                        actions.append(Action(chord=(s0, s1, s2, s3), dx_bin=dxb, dy_bin=dyb))
                    except ValueError as err:
                        raise EpisodeFileError(f"invalid action ({err})", at) from err
                    raw_rows.append((dx_raw, dy_raw))
                    if imputed:
                        conf_rows.append(struct.unpack("<6f", _read_exact(f, 24, "confidences")))
                raw = np.array(raw_rows, dtype=np.int16).reshape(n, 2)
                if imputed:
                    conf = np.array(conf_rows, dtype=np.float32).reshape(n, 6)
            records.append(EpisodeRecord(frames=frames, actions=actions, raw_deltas=raw,
                                         confidences=conf, provenance=provenance, seed=seed))
        return records


# ---------------------------------------------------------------------------
# Manifest and splits
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    path: str
    index: int          # episode index within its file
    provenance: str
    n_frames: int
    labeled: bool
    seed: int
    split: str = ""     # "", "train" or "val"


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    content_hash: str = ""

    def to_json(self) -> str:
        return json.dumps({
            "version": 1,
            "content_hash": self.content_hash,
            "entries": [vars(e) for e in self.entries],
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        obj = json.loads(text)
        return cls(entries=[ManifestEntry(**e) for e in obj["entries"]],
                   content_hash=obj["content_hash"])


def build_manifest(paths: Iterable) -> DatasetManifest:
    """Scan episode files into a manifest; the hash covers all referenced bytes."""
    entries: list[ManifestEntry] = []
    sha = hashlib.sha256()
    for path in paths:
        with open(path, "rb") as f:
            sha.update(f.read())
        for i, rec in enumerate(read_episodes(path)):
            entries.append(ManifestEntry(path=str(path), index=i, provenance=rec.provenance,
                                         n_frames=rec.n_frames, labeled=rec.labeled,
                                         seed=rec.seed))
    return DatasetManifest(entries=entries, content_hash=sha.hexdigest())


def make_splits(manifest: DatasetManifest, val_fraction: float,
                seed: int) -> DatasetManifest:
    """Episode-level split. Validation draws only from clean expert episodes.

    n_val = floor(n_expert_labeled * val_fraction); deterministic under seed.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    expert_idx = [i for i, e in enumerate(manifest.entries)
                  if e.labeled and e.provenance == "expert"]
    if not expert_idx:
        raise ValueError("no labeled expert episodes to draw validation from")
    order = list(expert_idx)
    np.random.default_rng(seed).shuffle(order)
    n_val = int(len(expert_idx) * val_fraction)
    val = set(order[:n_val])
    for i, entry in enumerate(manifest.entries):
        entry.split = "val" if i in val else "train"
    return manifest


def load_split(manifest: DatasetManifest, split: str) -> list[EpisodeRecord]:
    """Materialize one split's records, in manifest order."""
    cache: dict[str, list[EpisodeRecord]] = {}
    out = []
    for e in manifest.entries:
        if e.split != split:
            continue
        if e.path not in cache:
            cache[e.path] = read_episodes(e.path)
        out.append(cache[e.path][e.index])
    return out


# ---------------------------------------------------------------------------
# Curation filter
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FilterDecision:
    accept: bool
    reason: str = ""

    def __post_init__(self):
        if not self.accept and not self.reason:
            raise ValueError("rejections must state a reason")


FilterFn = Callable[[EpisodeRecord], FilterDecision]

MIN_EPISODE_FRAMES = 20
MIN_MEAN_PIXEL_CHANGE = 0.5


def accept_all_filter(record: EpisodeRecord) -> FilterDecision:
    return FilterDecision(accept=True)


def heuristic_filter(record: EpisodeRecord) -> FilterDecision:
    """Cheap stand-in for content curation: drop stubs and static clips."""
    if record.n_frames < MIN_EPISODE_FRAMES:
        return FilterDecision(accept=False, reason="too short")
    diffs = np.abs(np.diff(record.frames.astype(np.int16), axis=0))
    if float(diffs.mean()) < MIN_MEAN_PIXEL_CHANGE:
        return FilterDecision(accept=False, reason="static content")
    return FilterDecision(accept=True)


def curation_filter(record: EpisodeRecord,
                    impl: FilterFn = accept_all_filter) -> FilterDecision:
    """Apply a pluggable curation policy; decisions, not failures."""
    return impl(record)
