"""Gesture-quality metrics: FGD, L1 diversity, beat constancy, parameter MSE.

FGD normally runs on features from a pretrained gesture encoder; here a frozen
seeded random-projection featurizer stands in, so only orderings of FGD values
are meaningful, never absolute values.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError

ROUNDOFF = 1e-10


@dataclass
class FeatureSet:
    features: np.ndarray | None
    mu: np.ndarray
    sigma: np.ndarray

    @classmethod
    def from_features(cls, g: np.ndarray) -> "FeatureSet":
        g = np.asarray(g, dtype=np.float64)
        if g.ndim != 2:
            raise ShapeError("features must be [n, dim]")
        mu = g.mean(axis=0)
        if g.shape[0] < 2:
            sigma = np.zeros((g.shape[1], g.shape[1]))
        else:
            sigma = np.atleast_2d(np.cov(g, rowvar=False))
        return cls(g, mu, (sigma + sigma.T) / 2)

    @classmethod
    def from_stats(cls, mu, sigma) -> "FeatureSet":
        mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
        sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
        return cls(None, mu, (sigma + sigma.T) / 2)

    @property
    def n(self) -> int | None:
        return None if self.features is None else self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


@dataclass
class BeatSet:
    times: np.ndarray
    sigma: float = 0.1

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if self.sigma <= 0:
            raise ConfigError("beat tolerance sigma must be positive")
        if np.any(np.diff(self.times) <= 0):
            raise DataError("beat times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)


# ---------------------------------------------------------------------------
# featurizer
# ---------------------------------------------------------------------------

def featurize(windows: np.ndarray, seed: int = 0, dim: int = 32) -> FeatureSet:
    """Frozen random two-layer tanh network over pose + velocity windows.

    ``windows`` is ``[n, T, D]``. The weights depend only on ``seed`` and the
    input shape, so the same call always yields the same features.
    """
    w = np.asarray(windows, dtype=np.float64)
    if w.ndim != 3 or w.shape[1] < 2:
        raise ShapeError("windows must be [n, T>=2, D]")
    n, T, D = w.shape
    x = np.concatenate([w.reshape(n, -1), np.diff(w, axis=1).reshape(n, -1) * 4.0], axis=1)
    rng = np.random.default_rng([seed, T, D, dim])
    hidden = 4 * dim
    w1 = rng.normal(0.0, 1.0 / np.sqrt(x.shape[1]), size=(x.shape[1], hidden))
    w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, dim))
    return FeatureSet.from_features(np.tanh(np.tanh(x @ w1) @ w2))


def motion_windows(poses: np.ndarray, T: int = 16, stride: int = 8) -> np.ndarray:
    poses = np.asarray(poses, dtype=np.float64)
    count = (poses.shape[0] - T) // stride + 1
    if count < 1:
        raise DataError("sequence shorter than one feature window")
    return np.stack([poses[i * stride: i * stride + T] for i in range(count)])


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    if vals.min(initial=0.0) < -ROUNDOFF * max(1.0, abs(vals).max(initial=0.0)):
        raise NumericError("matrix is not positive semidefinite")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fgd(real: FeatureSet, gen: FeatureSet, eps: float = 1e-6) -> float:
    """Fréchet distance between Gaussian fits of two feature sets."""
    if real.dim != gen.dim:
        raise ShapeError("feature dimensions differ")
    s1, s2 = real.sigma, gen.sigma
    for fs in (real, gen):
        if fs.n is not None and fs.n < fs.dim + 1:
            warnings.warn("fewer samples than feature dim + 1; regularising covariance", RuntimeWarning)
            s1 = s1 + eps * np.eye(real.dim)
            s2 = s2 + eps * np.eye(real.dim)
            break
    r1 = _psd_sqrt(s1)
    cross = _psd_sqrt(r1 @ s2 @ r1)
    diff = real.mu - gen.mu
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(cross))
    if value < 0.0:
        if value < -ROUNDOFF * max(1.0, np.trace(s1) + np.trace(s2)):
            raise NumericError(f"negative Fréchet distance {value}")
        value = 0.0
    return value


def l1_diversity(generations: np.ndarray, exclude_channels=None) -> float:
    """Mean pairwise L1 distance between generations ``[N, T, J]``.

    ``exclude_channels`` (slice, index list or mask) drops e.g. global
    translation before the comparison.
    """
    g = np.asarray(generations, dtype=np.float64)
    if g.ndim == 2:
        g = g[..., None]
    if g.shape[0] < 2:
        raise ConfigError("diversity needs at least two generations")
    if exclude_channels is not None:
        keep = np.ones(g.shape[-1], dtype=bool)
        keep[exclude_channels] = False
        g = g[..., keep]
    N, T = g.shape[:2]
    total = 0.0
    for i in range(N):
        total += np.abs(g[i][None] - g).sum()
    return float(total / (2 * N * (N - 1) * T))


def detect_motion_beats(poses: np.ndarray, frame_rate: float, sigma: float = 0.1,
                        gate: str = "median") -> BeatSet:
    """Strict local minima of joint speed that fall below the median speed."""
    x = np.asarray(poses, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ShapeError("need [T>=3, D] poses")
    speed = np.linalg.norm(np.gradient(x, axis=0), axis=1)
    threshold = np.median(speed) if gate == "median" else np.inf
    inner = speed[1:-1]
    is_min = (inner < speed[:-2]) & (inner < speed[2:]) & (inner < threshold)
    idx = np.nonzero(is_min)[0] + 1
    return BeatSet(idx / float(frame_rate), sigma)


def beat_constancy(motion_beats: BeatSet, audio_beats: BeatSet, sigma: float | None = None) -> float:
    """Mean Gaussian proximity of each motion beat to its nearest audio beat."""
    sigma = motion_beats.sigma if sigma is None else sigma
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    if len(motion_beats) == 0:
        raise DataError("beat constancy is undefined without motion beats")
    if len(audio_beats) == 0:
        raise DataError("beat constancy is undefined without audio beats")
    a = audio_beats.times
    m = motion_beats.times
    j = np.clip(np.searchsorted(a, m), 1, len(a) - 1) if len(a) > 1 else np.zeros(len(m), dtype=int)
    if len(a) > 1:
        d = np.minimum(np.abs(m - a[j - 1]), np.abs(m - a[j]))
    else:
        d = np.abs(m - a[0])
    return float(np.mean(np.exp(-(d**2) / (2 * sigma**2))))


def param_mse(gt: np.ndarray, pred: np.ndarray) -> float:
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.shape != pred.shape:
        raise ShapeError(f"shape mismatch {gt.shape} vs {pred.shape}")
    return float(np.mean((gt - pred) ** 2))


def metric_record(name: str, value: float, config: dict | None = None, seeds: dict | None = None) -> dict:
    return {"metric": name, "value": float(value), "config": config or {}, "seeds": seeds or {}}
