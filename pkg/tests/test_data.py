"""Data layer: resize formula, augmentation, episode files, splits, curation."""
import numpy as np
import pytest

from pixelbc import data as D
from pixelbc import env as E
from pixelbc.actions import Action, canonicalize_chord


def naive_resize(frame: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Per-pixel reference implementation of the stated formula."""
    in_h, in_w = frame.shape[:2]
    out = np.zeros((out_h, out_w, frame.shape[2]), dtype=np.uint8)
    for y in range(out_h):
        sy = min(max((y + 0.5) * in_h / out_h - 0.5, 0.0), in_h - 1.0)
        y0, fy = int(np.floor(sy)), sy - int(np.floor(sy))
        y1 = min(y0 + 1, in_h - 1)
        for x in range(out_w):
            sx = min(max((x + 0.5) * in_w / out_w - 0.5, 0.0), in_w - 1.0)
            x0, fx = int(np.floor(sx)), sx - int(np.floor(sx))
            x1 = min(x0 + 1, in_w - 1)
            for c in range(frame.shape[2]):
                v = (frame[y0, x0, c] * (1 - fx) * (1 - fy)
                     + frame[y0, x1, c] * fx * (1 - fy)
                     + frame[y1, x0, c] * (1 - fx) * fy
                     + frame[y1, x1, c] * fx * fy)
                out[y, x, c] = min(max(int(np.floor(v + 0.5)), 0), 255)
    return out


def test_resize_identity_is_bit_identical():
    rng = np.random.default_rng(0)
    frame = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
    assert np.array_equal(D.resize_frame(frame, 64, 64), frame)


def test_resize_2x2_to_1x1_hand_value():
    frame = np.array([[0, 255], [255, 255]], dtype=np.uint8)
    out = D.resize_frame(frame, 1, 1)
    # src coord 0.5 on both axes: mean of the four corners = 191.25 -> 191
    assert out.shape == (1, 1)
    assert out[0, 0] == 191


def test_resize_constant_stays_constant():
    frame = np.full((32, 48, 3), 77, dtype=np.uint8)
    for dims in ((16, 16), (64, 64), (13, 7)):
        out = D.resize_frame(frame, *dims)
        assert (out == 77).all()
        assert out.shape == (dims[1], dims[0], 3)


def test_resize_matches_naive_reference():
    rng = np.random.default_rng(1)
    for in_dims, out_dims in (((8, 8), (4, 4)), ((6, 10), (12, 5)), ((16, 16), (9, 9))):
        frame = rng.integers(0, 256, (*in_dims, 3), dtype=np.uint8)
        got = D.resize_frame(frame, out_dims[1], out_dims[0])
        want = naive_resize(frame, out_dims[1], out_dims[0])
        assert np.array_equal(got, want)


def test_resize_rejects_zero_dims():
    frame = np.zeros((4, 4, 3), dtype=np.uint8)
    with pytest.raises(ValueError):
        D.resize_frame(frame, 0, 4)


def test_augment_identity_at_full_quality():
    rng = np.random.default_rng(0)
    frame = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    out = D.apply_augment(frame, D.AugmentParams(quality_bits=8, brightness=0))
    assert np.array_equal(out, frame)


def test_augment_q4_uses_16_midpoints():
    rng = np.random.default_rng(0)
    frame = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    out = D.apply_augment(frame, D.AugmentParams(quality_bits=4, brightness=0))
    midpoints = {level * 16 + 7 for level in range(16)}
    assert set(np.unique(out)) <= midpoints


def test_augment_deviation_bound():
    rng = np.random.default_rng(2)
    for _ in range(20):
        frame = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
        params = D.draw_augment_params(rng)
        out = D.apply_augment(frame, params)
        # Half a quantization step plus the brightness jitter; floor-to-level
        # with midpoint re-expansion deviates by at most 2^(8-q)/2 exactly.
        bound = (256 / 2 ** params.quality_bits) / 2 + 10
        dev = np.abs(out.astype(int) - frame.astype(int)).max()
        assert dev <= bound + 1e-9


def test_augment_deterministic_under_rng_state():
    frame = np.arange(16 * 16 * 3, dtype=np.uint8).reshape(16, 16, 3)
    a = D.augment(frame, np.random.default_rng(5))
    b = D.augment(frame, np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_quantize_frame_5bit_levels():
    frame = np.arange(256, dtype=np.uint8).reshape(16, 16, 1).repeat(3, axis=2)
    out = D.quantize_frame(frame, 5)
    assert len(np.unique(out)) == 32


def make_records(n=3, frames_per=12, labeled=True, provenance="expert"):
    rng = np.random.default_rng(0)
    out = []
    for i in range(n):
        frames = rng.integers(0, 256, (frames_per, 16, 16, 3), dtype=np.uint8)
        actions = None
        conf = None
        if labeled:
            actions = [Action(chord=canonicalize_chord({int(rng.integers(0, 8))}),
                              dx_bin=int(rng.integers(0, 11)),
                              dy_bin=int(rng.integers(0, 11)))
                       for _ in range(frames_per)]
        if provenance == "imputed":
            conf = rng.random((frames_per, 6)).astype(np.float32)
        out.append(D.EpisodeRecord(frames=frames, actions=actions, confidences=conf,
                                   provenance=provenance, seed=100 + i))
    return out


def test_roundtrip_labeled(tmp_path):
    records = make_records(3)
    path = tmp_path / "eps.p2pd"
    D.write_episodes(records, path)
    back = D.read_episodes(path)
    assert back == records


def test_roundtrip_unlabeled(tmp_path):
    records = make_records(2, labeled=False, provenance="noisy_expert")
    path = tmp_path / "eps.p2pd"
    D.write_episodes(records, path)
    back = D.read_episodes(path)
    assert back == records
    assert not back[0].labeled


def test_roundtrip_imputed_confidences(tmp_path):
    records = make_records(2, provenance="imputed")
    path = tmp_path / "eps.p2pd"
    D.write_episodes(records, path)
    back = D.read_episodes(path)
    assert back == records
    assert back[0].confidences.dtype == np.float32


def test_truncated_file_reports_offset(tmp_path):
    records = make_records(1)
    path = tmp_path / "eps.p2pd"
    D.write_episodes(records, path)
    data = path.read_bytes()
    cut = len(data) - 7
    (tmp_path / "cut.p2pd").write_bytes(data[:cut])
    with pytest.raises(D.EpisodeFileError, match="byte offset") as exc:
        D.read_episodes(tmp_path / "cut.p2pd")
    assert exc.value.offset <= cut


def test_bad_magic_offset_zero(tmp_path):
    (tmp_path / "bad.p2pd").write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(D.EpisodeFileError) as exc:
        D.read_episodes(tmp_path / "bad.p2pd")
    assert exc.value.offset == 0


def test_record_invariants():
    frames = np.zeros((4, 8, 8, 3), dtype=np.uint8)
    with pytest.raises(ValueError, match="action count"):
        D.EpisodeRecord(frames=frames, actions=[Action()] * 3)
    with pytest.raises(ValueError, match="confidences"):
        D.EpisodeRecord(frames=frames, actions=[Action()] * 4, provenance="imputed")
    with pytest.raises(ValueError, match="provenance"):
        D.EpisodeRecord(frames=frames, provenance="scraped")


def test_manifest_and_splits(tmp_path):
    for i in range(4):
        D.write_episodes(make_records(5, frames_per=8), tmp_path / f"part{i}.p2pd")
    paths = sorted(tmp_path.glob("*.p2pd"))
    manifest = D.build_manifest(paths)
    assert len(manifest.entries) == 20
    m1 = D.make_splits(manifest, 0.1, seed=3)
    val = [e for e in m1.entries if e.split == "val"]
    train = [e for e in m1.entries if e.split == "train"]
    assert len(val) == 2  # floor(20 * 0.1)
    assert len(val) + len(train) == 20
    assert all(e.provenance == "expert" for e in val)
    # Determinism under seed.
    m2 = D.make_splits(D.build_manifest(paths), 0.1, seed=3)
    assert [e.split for e in m1.entries] == [e.split for e in m2.entries]
    m3 = D.make_splits(D.build_manifest(paths), 0.1, seed=4)
    assert [e.split for e in m1.entries] != [e.split for e in m3.entries]
    # Round trip through JSON.
    again = D.DatasetManifest.from_json(m1.to_json())
    assert [e.split for e in again.entries] == [e.split for e in m1.entries]
    # load_split returns disjoint record sets.
    val_records = D.load_split(m1, "val")
    assert len(val_records) == 2


def test_make_splits_validates_fraction(tmp_path):
    D.write_episodes(make_records(2), tmp_path / "x.p2pd")
    manifest = D.build_manifest([tmp_path / "x.p2pd"])
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            D.make_splits(manifest, bad, seed=0)


def test_manifest_hash_tracks_content(tmp_path):
    D.write_episodes(make_records(2), tmp_path / "x.p2pd")
    h1 = D.build_manifest([tmp_path / "x.p2pd"]).content_hash
    data = bytearray((tmp_path / "x.p2pd").read_bytes())
    data[40] ^= 0xFF  # inside the first episode's frame bytes
    (tmp_path / "x.p2pd").write_bytes(bytes(data))
    h2 = D.build_manifest([tmp_path / "x.p2pd"]).content_hash
    assert h1 != h2


def test_corrupt_action_bytes_report_offset(tmp_path):
    D.write_episodes(make_records(1), tmp_path / "x.p2pd")
    data = bytearray((tmp_path / "x.p2pd").read_bytes())
    data[-1] = 0xF9  # dy_bin byte of the final action
    (tmp_path / "x.p2pd").write_bytes(bytes(data))
    with pytest.raises(D.EpisodeFileError, match="invalid action"):
        D.read_episodes(tmp_path / "x.p2pd")


def test_filter_too_short():
    rec = make_records(1, frames_per=10)[0]
    decision = D.curation_filter(rec, D.heuristic_filter)
    assert not decision.accept and decision.reason == "too short"


def test_filter_static_content():
    frames = np.full((50, 16, 16, 3), 30, dtype=np.uint8)
    rec = D.EpisodeRecord(frames=frames, provenance="noisy_expert")
    decision = D.curation_filter(rec, D.heuristic_filter)
    assert not decision.accept and decision.reason == "static content"


def test_filter_accepts_real_episode():
    traj = E.generate_episode(E.EnvConfig(seed=11), E.expert_policy,
                              np.random.default_rng(11))
    rec = D.record_from_trajectory(traj)
    assert D.curation_filter(rec, D.heuristic_filter).accept
    assert D.curation_filter(rec).accept  # default accepts everything


def test_filter_decision_requires_reason_on_reject():
    with pytest.raises(ValueError):
        D.FilterDecision(accept=False)
