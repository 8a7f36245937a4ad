"""Procedural beat-coupled motion + audio sessions for desk-scale training.

Every region shares a fixed vocabulary of key poses (drawn from a constant
seed, so all sessions speak the same motion "language"); a session seed only
controls tempo, key-pose sequence, audio texture and noise. Beats and speech
syllables sit on the 200 ms motion-token grid, so the motion a single token
has to describe comes from a small discrete repertoire plus noise.

* upper body: minimum-jerk transitions between key poses, one transition per
  inter-beat interval, so joint speed bottoms out on every audio beat
* hands: key poses on beats *and* between beats plus a beat-locked 5 Hz tremor
  (the highest-frequency region); symbol events pick the next hand pose
* face: jaw channel follows the speech-syllable loudness envelope, the rest
  switch expression every two beats
* lower body: weight shifts between three stances every two beats, with four
  binary foot-contact flags derived from the sideways translation

Regions are coupled through one shared phrase (sequence of key indices), so
a region's motion can be partly inferred from the others.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import container
from ._validation import check_fitted, check_poses
from .config import REGIONS, Config
from .errors import ConfigError, DataError

PAPER_DIMS = {"upper_body": 78, "lower_body": 61, "hands": 180, "face": 103}
N_CONTACTS = 4
N_TRANSLATION = 3
_VOCAB_SEED = 0x5EED


@dataclass(frozen=True)
class RegionSpec:
    region: str
    dim: int

    def __post_init__(self):
        if self.region not in REGIONS:
            raise ConfigError(f"unknown region {self.region!r}")
        if self.dim <= 0:
            raise ConfigError("region dim must be positive")
        if self.region == "lower_body" and self.dim < N_CONTACTS + N_TRANSLATION:
            raise ConfigError("lower body needs room for translation and contact channels")

    @property
    def translation_slice(self) -> slice | None:
        if self.region != "lower_body":
            return None
        end = self.dim - N_CONTACTS
        return slice(end - N_TRANSLATION, end)


def default_specs(cfg: Config | None = None) -> list[RegionSpec]:
    dims = cfg.region_dims if cfg is not None else PAPER_DIMS
    return [RegionSpec(r, dims[r]) for r in REGIONS]


@dataclass
class SynthSession:
    seed: int
    duration: float
    frame_rate: int
    audio_sample_rate: int
    poses: dict[str, np.ndarray]
    waveform: np.ndarray
    beat_times: np.ndarray
    symbol_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    symbol_cats: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_frames(self) -> int:
        return next(iter(self.poses.values())).shape[0]

    @property
    def specs(self) -> list[RegionSpec]:
        return [RegionSpec(r, p.shape[1]) for r, p in self.poses.items()]

    def symbol_steps(self, n_steps: int, step_seconds: float = 0.2) -> np.ndarray:
        """Per-token-step symbol ids: 0 means no event, c+1 means category c."""
        ids = np.zeros(n_steps, dtype=np.int64)
        for t, c in zip(self.symbol_times, self.symbol_cats):
            s = int(t // step_seconds)
            if s < n_steps:
                ids[s] = int(c) + 1
        return ids

    # -- container I/O ----------------------------------------------------
    def to_arrays(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays = {f"pose/{r}": p for r, p in self.poses.items()}
        arrays["waveform"] = self.waveform
        arrays["beat_times"] = self.beat_times
        arrays["symbol_times"] = np.asarray(self.symbol_times, dtype=np.float64)
        arrays["symbol_cats"] = np.asarray(self.symbol_cats, dtype=np.int64)
        manifest = {
            "kind": "session", "seed": int(self.seed), "duration": float(self.duration),
            "frame_rate": int(self.frame_rate), "audio_sample_rate": int(self.audio_sample_rate),
            "dims": {r: int(p.shape[1]) for r, p in self.poses.items()},
            "regions": list(self.poses),
        }
        return arrays, manifest

    def save(self, path) -> str:
        arrays, manifest = self.to_arrays()
        return container.save(path, arrays, manifest)

    @classmethod
    def load(cls, path) -> "SynthSession":
        arrays, m = container.load(path)
        if m.get("kind") != "session":
            raise DataError(f"{path} is not a session container")
        return cls(
            seed=m["seed"], duration=m["duration"], frame_rate=m["frame_rate"],
            audio_sample_rate=m["audio_sample_rate"],
            poses={r: arrays[f"pose/{r}"] for r in m["regions"]},
            waveform=arrays["waveform"], beat_times=arrays["beat_times"],
            symbol_times=arrays["symbol_times"], symbol_cats=arrays["symbol_cats"],
        )


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _min_jerk(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u**3 * (10 - 15 * u + 6 * u**2)


def _keyframe_track(t: np.ndarray, key_times: np.ndarray, key_poses: np.ndarray) -> np.ndarray:
    """Hold the first pose, min-jerk between consecutive keys, hold the last."""
    if len(key_times) == 1:
        return np.repeat(key_poses[:1], len(t), axis=0)
    k = np.clip(np.searchsorted(key_times, t, side="right") - 1, 0, len(key_times) - 2)
    u = (t - key_times[k]) / (key_times[k + 1] - key_times[k])
    w = _min_jerk(u)[:, None]
    return key_poses[k] + (key_poses[k + 1] - key_poses[k]) * w


def _vocab(region: str, dim: int, n: int, scale: float) -> np.ndarray:
    """``n`` key poses; mutually orthogonal (hence equidistant) when ``n <= dim``."""
    rng = np.random.default_rng([_VOCAB_SEED, REGIONS.index(region), dim])
    g = rng.normal(0.0, 1.0, size=(dim, n))
    if n > dim:
        return scale * g.T
    q, _ = np.linalg.qr(g)
    return scale * np.sqrt(dim) * q.T


def _pose_chain(rng: np.random.Generator, n_keys: int, n_proto: int) -> np.ndarray:
    """Mostly cycle through the vocabulary, sometimes jump elsewhere."""
    seq = [int(rng.integers(n_proto))]
    for _ in range(n_keys - 1):
        if rng.random() < 0.7:
            seq.append((seq[-1] + 1) % n_proto)
        else:
            seq.append(int((seq[-1] + rng.integers(1, n_proto)) % n_proto))
    return np.asarray(seq)


def _follow(rng: np.random.Generator, phrase: np.ndarray, n_proto: int, shift: int,
            p_follow: float = 0.85) -> np.ndarray:
    """Key indices tied to the shared phrase, with occasional independent picks."""
    tied = (phrase + shift) % n_proto
    free = rng.integers(n_proto, size=len(phrase))
    return np.where(rng.random(len(phrase)) < p_follow, tied, free)


def _beats(rng: np.random.Generator, duration: float, grid: float) -> tuple[np.ndarray, float]:
    """Isochronous beats on the motion-token grid (2, 3 or 4 grid steps apart)."""
    steps = int(rng.integers(2, 5))
    period = steps * grid
    t0 = grid * int(rng.integers(1, steps + 1))
    beats = t0 + period * np.arange(int(np.floor((duration - t0) / period)) + 1)
    beats = beats[(beats > 0.05) & (beats < duration - 0.05)]
    if len(beats) == 0:
        beats = np.array([duration / 2])
    return beats, period


def _audio(rng: np.random.Generator, duration: float, sr: int, beats: np.ndarray, grid: float):
    n = int(round(duration * sr))
    t = np.arange(n) / sr
    wav = rng.normal(0.0, 0.003, size=n)
    f0 = rng.uniform(110.0, 220.0)
    # beat pulses: short harmonic bursts with a sharp attack
    pulse_len = int(0.12 * sr)
    tp = np.arange(pulse_len) / sr
    env = np.minimum(tp / 0.005, 1.0) * np.exp(-tp / 0.03)
    tone = sum(np.sin(2 * np.pi * f0 * k * tp) / k for k in range(1, 6))
    pulse = 0.6 * env * tone
    for b in beats:
        s = int(round(b * sr))
        e = min(n, s + pulse_len)
        wav[s:e] += pulse[: e - s]
    # speech-like syllables on a 0.2 s grid with random loudness
    syl_len = int(0.15 * sr)
    hann = np.hanning(syl_len)
    loud = np.zeros(n)
    for s0 in np.arange(0.0, duration, grid):
        if rng.random() < 0.3:
            continue
        a = (0.06, 0.15)[int(rng.integers(2))]
        s = int(round(s0 * sr))
        e = min(n, s + syl_len)
        if e <= s:
            continue
        f = f0 * rng.uniform(1.2, 1.8)
        seg = a * hann[: e - s] * np.sin(2 * np.pi * f * np.arange(e - s) / sr)
        wav[s:e] += seg
        loud[s:e] += a * hann[: e - s]
    return wav, loud, t


def gen_session(seed: int, duration: float, spec: list[RegionSpec] | None = None,
                frame_rate: int = 20, sample_rate: int = 16000, n_symbols: int = 8) -> SynthSession:
    """Deterministically synthesise one session from ``seed``."""
    if duration < 1.0:
        raise ConfigError("duration must be at least 1 s")
    spec = default_specs() if spec is None else spec
    if not spec:
        raise ConfigError("need at least one region")
    rng = np.random.default_rng(seed)
    n_frames = int(round(duration * frame_rate))
    tf = np.arange(n_frames) / frame_rate

    grid = 4.0 / frame_rate  # one motion token
    beats, period = _beats(rng, duration, grid)
    # virtual keys outside the session keep motion flowing at both ends
    key_beats = np.concatenate([[beats[0] - period], beats, [beats[-1] + period]])
    wav, loud, _ = _audio(rng, duration, sample_rate, beats, grid)

    # sparse symbol events, at least 1 s apart
    sym_t = []
    t = rng.uniform(0.5, 2.0)
    while t < duration - 0.2:
        sym_t.append(t)
        t += rng.uniform(1.0, 3.0)
    sym_t = np.asarray(sym_t)
    sym_c = rng.integers(0, n_symbols, size=len(sym_t))

    # one gesture phrase drives every region: each region's key pose follows
    # the upper-body key index most of the time, so regions are predictable
    # from each other as well as from their own past
    phrase = _pose_chain(rng, len(key_beats), 4)
    poses = {}
    for rs in spec:
        d = rs.dim
        noise = rng.normal(0.0, 0.02, size=(n_frames, d))
        if rs.region == "upper_body":
            vocab = _vocab(rs.region, d, 4, 1.0)
            keys = vocab[phrase]
            x = _keyframe_track(tf, key_beats, keys) + noise
        elif rs.region == "hands":
            vocab = _vocab(rs.region, d, 4, 1.5)
            # the in-between key sits on the token grid too
            half = key_beats[:-1] + grid * (int(round(period / grid)) // 2)
            key_t = np.sort(np.concatenate([key_beats, half]))
            chain = _pose_chain(rng, len(key_t), 4)
            on_beat = np.isin(key_t, key_beats)
            chain[on_beat] = _follow(rng, phrase, 4, 0)
            for st, c in zip(sym_t, sym_c):
                k = np.searchsorted(key_t, st)
                if k < len(chain):
                    chain[k] = c % 4
            x = _keyframe_track(tf, key_t, vocab[chain])
            k = np.searchsorted(beats, tf, side="right") - 1
            since = np.where(k >= 0, tf - beats[np.maximum(k, 0)], 0.0)
            tremor = np.sin(2 * np.pi * 5.0 * since) * np.exp(-since / 0.3) * (k >= 0)
            x = x + 0.3 * tremor[:, None] * _vocab(rs.region, d, 1, 1.0)[0] + noise
        elif rs.region == "face":
            vocab = _vocab(rs.region, d, 3, 0.5)
            key_t = key_beats[::2]
            keys = vocab[_follow(rng, phrase[::2], 3, 0)]
            x = _keyframe_track(tf, key_t, keys) + noise
            spf = sample_rate // frame_rate
            jaw = np.array([loud[max(0, i * spf - spf // 2): i * spf + spf // 2 + 1].mean() for i in range(n_frames)])
            x[:, 0] = 8.0 * jaw + noise[:, 0]
        elif rs.region == "lower_body":
            # weight shifts between three stances every two beats
            n_cont = d - N_CONTACTS
            vocab = _vocab(rs.region, n_cont, 3, 0.5)
            key_t = key_beats[::2]
            cont = _keyframe_track(tf, key_t, vocab[_follow(rng, phrase[::2], 3, 1)])
            sway = cont[:, n_cont - N_TRANSLATION]
            xs = np.sort(vocab[:, n_cont - N_TRANSLATION])
            left = (sway <= (xs[1] + xs[2]) / 2).astype(np.float64)
            right = (sway >= (xs[0] + xs[1]) / 2).astype(np.float64)
            contacts = np.stack([left, left, right, right], axis=1)
            x = np.concatenate([cont + noise[:, :n_cont], contacts], axis=1)
        else:  # pragma: no cover - RegionSpec validates names
            raise ConfigError(rs.region)
        poses[rs.region] = np.ascontiguousarray(x)

    return SynthSession(seed=seed, duration=float(duration), frame_rate=frame_rate,
                        audio_sample_rate=sample_rate, poses=poses, waveform=wav,
                        beat_times=beats, symbol_times=sym_t, symbol_cats=sym_c)


def gen_corpus(cfg: Config, n_sessions: int, seed: int, duration: float | None = None) -> list[SynthSession]:
    spec = default_specs(cfg)
    dur = cfg.data_duration if duration is None else duration
    return [gen_session(seed + i, dur, spec, cfg.frame_rate, cfg.sample_rate, cfg.n_symbols)
            for i in range(n_sessions)]


def window(session: SynthSession | dict, T_w: int, stride: int) -> list[dict[str, np.ndarray]]:
    """Sliding per-region windows (views, time order)."""
    poses = session.poses if isinstance(session, SynthSession) else session
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    n_frames = next(iter(poses.values())).shape[0]
    if T_w > n_frames:
        raise DataError(f"window of {T_w} frames exceeds session length {n_frames}")
    count = (n_frames - T_w) // stride + 1
    return [{r: p[i * stride: i * stride + T_w] for r, p in poses.items()} for i in range(count)]


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

class RegionScaler(TransformerMixin, BaseEstimator):
    """Per-channel standardisation with a floor on the standard deviation."""

    def __init__(self, std_floor: float = 1e-6):
        self.std_floor = std_floor

    def fit(self, X, y=None):
        X = check_poses(X)
        self.mean_ = X.mean(axis=0)
        self.scale_ = np.maximum(X.std(axis=0), self.std_floor)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_fitted(self, "mean_")
        X = check_poses(X, self.n_features_in_)
        return (X - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_fitted(self, "mean_")
        X = check_poses(X, self.n_features_in_)
        return X * self.scale_ + self.mean_


def normalize(poses: np.ndarray, stats: RegionScaler) -> np.ndarray:
    return stats.transform(poses)


def denormalize(poses: np.ndarray, stats: RegionScaler) -> np.ndarray:
    return stats.inverse_transform(poses)


def fit_scalers(sessions: list[SynthSession]) -> dict[str, RegionScaler]:
    regions = list(sessions[0].poses)
    return {r: RegionScaler().fit(np.concatenate([s.poses[r] for s in sessions])) for r in regions}


def list_sessions(directory) -> list[Path]:
    return sorted(Path(directory).glob("*.sgs"))
