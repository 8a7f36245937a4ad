import numpy as np
import pytest

from streamgesture import container
from streamgesture.config import REGIONS, Config
from streamgesture.errors import ConfigError, DataError
from streamgesture.evalmetrics import BeatSet, beat_constancy, detect_motion_beats
from streamgesture.synthdata import (PAPER_DIMS, RegionScaler, RegionSpec, SynthSession, default_specs,
                                     denormalize, fit_scalers, gen_session, normalize, window)

CFG = Config.desk()
SPEC = default_specs(CFG)


def session(seed=0, duration=6.0, spec=SPEC):
    return gen_session(seed, duration, spec, CFG.frame_rate, CFG.sample_rate, CFG.n_symbols)


def test_determinism():
    a, b = session(3), session(3)
    for r in REGIONS:
        assert np.array_equal(a.poses[r], b.poses[r])
    assert np.array_equal(a.waveform, b.waveform)
    assert np.array_equal(a.beat_times, b.beat_times)
    assert not np.array_equal(session(4).waveform, a.waveform)


def test_shapes_and_frame_count():
    s = session(0, 2.0)
    for rs in SPEC:
        assert s.poses[rs.region].shape == (40, rs.dim)
    assert len(s.waveform) == 2 * CFG.sample_rate
    assert np.all(np.diff(s.beat_times) > 0)


def test_paper_dims_are_default():
    assert {rs.region: rs.dim for rs in default_specs()} == PAPER_DIMS
    assert PAPER_DIMS == {"upper_body": 78, "lower_body": 61, "hands": 180, "face": 103}


def test_invalid_inputs():
    with pytest.raises(ConfigError):
        session(0, 0.5)
    with pytest.raises(ConfigError):
        session(0, 2.0, [])
    with pytest.raises(ConfigError):
        RegionSpec("tail", 3)
    with pytest.raises(ConfigError):
        RegionSpec("lower_body", 5)


def test_contacts_are_binary():
    c = session(5, 10.0).poses["lower_body"][:, -4:]
    assert set(np.unique(c)) <= {0.0, 1.0}


@pytest.mark.parametrize("seed", range(20))
def test_beat_coupling_and_separability(seed):
    s = session(seed, 12.0)
    mb = detect_motion_beats(s.poses["upper_body"], s.frame_rate)
    assert beat_constancy(mb, BeatSet(s.beat_times), 0.1) > 0.8
    delta = {r: np.abs(np.diff(s.poses[r], axis=0)).mean() for r in ("hands", "lower_body")}
    assert delta["hands"] > delta["lower_body"]


def test_symbol_events_sparse():
    s = session(2, 20.0)
    assert np.all(np.diff(s.symbol_times) >= 1.0)
    ids = s.symbol_steps(100)
    assert ids.max() <= CFG.n_symbols and (ids > 0).sum() == len(s.symbol_times)


def test_window_counts():
    s = session(0, 2.0)
    w = window(s, 16, 8)
    assert len(w) == 4
    assert np.array_equal(w[0]["hands"], s.poses["hands"][:16])
    tiled = window(s, 8, 8)
    assert np.array_equal(np.concatenate([t["face"] for t in tiled]), s.poses["face"])
    with pytest.raises(DataError):
        window(s, 41, 1)
    with pytest.raises(ConfigError):
        window(s, 16, 0)


def test_normalize_roundtrip_and_stats():
    train = [session(i, 4.0) for i in range(3)]
    sc = fit_scalers(train)
    x = np.concatenate([s.poses["upper_body"] for s in train])
    z = normalize(x, sc["upper_body"])
    assert np.abs(z.mean(axis=0)).max() < 1e-6
    assert np.abs(denormalize(z, sc["upper_body"]) - x).max() < 1e-10
    const = RegionScaler().fit(np.ones((10, 2)))
    assert np.array_equal(const.transform(np.ones((3, 2))), np.zeros((3, 2)))


def test_session_container_roundtrip(tmp_path):
    s = session(7, 3.0)
    sha = s.save(tmp_path / "a.sgs")
    assert sha == s.save(tmp_path / "b.sgs")
    back = SynthSession.load(tmp_path / "a.sgs")
    assert back.seed == 7 and np.array_equal(back.poses["hands"], s.poses["hands"])
    arrays, manifest = container.load(tmp_path / "a.sgs")
    assert manifest["seed"] == 7 and manifest["dims"]["hands"] == 16
    # little-endian u64 header length, then a JSON header
    raw = (tmp_path / "a.sgs").read_bytes()
    n = int.from_bytes(raw[:8], "little")
    assert raw[8:9] == b"{" and raw[8 + n - 1:8 + n] in (b"}", b" ")
