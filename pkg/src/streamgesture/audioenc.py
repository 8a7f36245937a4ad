"""Strictly causal audio front end.

Log-mel frames are emitted at the hop rate (80 Hz at 16 kHz / 200-sample
hop); frame i is computed from the window that *ends* at sample
``(i+1) * hop``, so no frame ever reads a sample from the future. The learned
encoder turns every group of 16 frames (one 200 ms chunk) into one audio
token aligned with one motion token.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_waveform
from .config import Config
from .errors import ConfigError, DataError, ShapeError, StateMismatchError
from .nncore import DTYPE, CausalConv1d, Frozen

LOG_FLOOR = 1e-6


# ---------------------------------------------------------------------------
# WAV I/O (16-bit PCM mono)
# ---------------------------------------------------------------------------

def read_wav(path, expected_rate: int | None = None) -> tuple[np.ndarray, int]:
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1 or w.getsampwidth() != 2:
                raise DataError("only 16-bit PCM mono WAV is supported")
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataError(f"cannot read WAV {path}: {exc}") from exc
    if expected_rate is not None and rate != expected_rate:
        raise ConfigError(f"sample rate {rate} Hz, expected {expected_rate} Hz")
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate


def write_wav(path, samples: np.ndarray, rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# log-mel
# ---------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float = 0.0,
                   fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filters with unit peak, shape ``[n_mels, n_fft//2+1]``."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def band_centers(cfg: Config) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))[1:-1]


@dataclass
class MelState:
    sample_rate: int
    tail: np.ndarray  # last (win - hop) samples seen, zero-initialised
    pending: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_frames: int = 0


class MelFrontEnd:
    """Streaming log-mel featurizer; one object per configuration."""

    def __init__(self, cfg: Config):
        self.sample_rate = cfg.sample_rate
        self.win, self.hop, self.n_fft = cfg.win_samples, cfg.hop_samples, cfg.n_fft
        self.n_mels = cfg.n_mels
        self.window = np.hanning(self.win + 2)[1:-1]  # periodic-free, nonzero ends
        self.fb = mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate, cfg.fmin, cfg.fmax)

    def open(self) -> MelState:
        return MelState(self.sample_rate, np.zeros(self.win - self.hop))

    def frames_from_buffer(self, buf: np.ndarray, n: int) -> np.ndarray:
        idx = np.arange(n)[:, None] * self.hop + np.arange(self.win)[None]
        spec = np.abs(np.fft.rfft(buf[idx] * self.window, n=self.n_fft, axis=-1))
        # einsum rather than BLAS so each row is computed the same way whatever the batch size
        return np.log(np.einsum("nf,mf->nm", spec, self.fb) + LOG_FLOOR)

    def __call__(self, samples: np.ndarray, state: MelState | None = None,
                 sample_rate: int | None = None) -> tuple[np.ndarray, MelState]:
        """Consume samples; emit every frame whose window has fully arrived."""
        if sample_rate is not None and sample_rate != self.sample_rate:
            raise ConfigError(f"sample rate {sample_rate} Hz, expected {self.sample_rate} Hz")
        state = self.open() if state is None else state
        x = check_waveform(samples)
        pending = np.concatenate([state.pending, x])
        n = len(pending) // self.hop
        buf = np.concatenate([state.tail, pending[: n * self.hop]])
        frames = self.frames_from_buffer(buf, n) if n else np.zeros((0, self.n_mels))
        keep = self.win - self.hop
        new = MelState(self.sample_rate, buf[len(buf) - keep:].copy() if keep else np.zeros(0),
                       pending[n * self.hop:].copy(), state.n_frames + n)
        return frames, new


def mel_features(samples, cfg: Config, state: MelState | None = None, sample_rate: int | None = None):
    return MelFrontEnd(cfg)(samples, state, sample_rate)


class LogMelTransformer(TransformerMixin, BaseEstimator):
    """Stateless scikit-learn wrapper: waveform -> ``[n_frames, n_mels]``."""

    def __init__(self, config: Config | None = None):
        self.config = config

    def fit(self, X=None, y=None):
        self.frontend_ = MelFrontEnd(self.config or Config.desk())
        return self

    def transform(self, X):
        if not hasattr(self, "frontend_"):
            self.fit()
        return self.frontend_(X)[0]


# ---------------------------------------------------------------------------
# learned encoder
# ---------------------------------------------------------------------------

@dataclass
class AudioEncState:
    model_fp: str
    hists: list
    pending: torch.Tensor  # mel frames not yet aggregated, [n < 16, n_mels]
    mel: MelState | None = None
    n_tokens: int = 0


class AudioEncoder(Frozen, nn.Module):
    """Causal projection -> dilated causal pyramid -> stride-16 aggregation."""

    def __init__(self, n_mels: int = 64, channels: int = 96, d_audio: int = 256,
                 dilations=(1, 2, 4, 8), group: int = 16):
        super().__init__()
        self.n_mels, self.group = n_mels, group
        self.register_buffer("mel_mean", torch.zeros(n_mels, dtype=DTYPE))
        self.register_buffer("mel_scale", torch.ones(n_mels, dtype=DTYPE))
        self.proj = CausalConv1d(n_mels, channels, 3)
        self.pyramid = nn.ModuleList(CausalConv1d(channels, channels, 2, d) for d in dilations)
        self.aggregate = nn.Conv1d(channels, d_audio, group, stride=group)

    @classmethod
    def from_config(cls, cfg: Config) -> "AudioEncoder":
        return cls(cfg.n_mels, cfg.audio_channels, cfg.d_audio, cfg.audio_dilations, cfg.mels_per_token)

    def fit_normalizer(self, frames: np.ndarray) -> None:
        f = np.asarray(frames, dtype=np.float64).reshape(-1, self.n_mels)
        with torch.no_grad():
            self.mel_mean.copy_(torch.as_tensor(f.mean(0)))
            self.mel_scale.copy_(torch.as_tensor(np.maximum(f.std(0), 1e-3)))

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _features(self, frames, hists):
        x = ((frames - self.mel_mean) / self.mel_scale).transpose(1, 2)
        h, h0 = self.proj(x, hists[0])
        new = [h0]
        for conv, hist in zip(self.pyramid, hists[1:]):
            d, nh = conv(F.gelu(h), hist)
            h = h + d
            new.append(nh)
        return F.gelu(h), new

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """Batch path: ``[B, n, n_mels]`` -> ``[B, n // 16, d_audio]`` (tail dropped)."""
        if frames.shape[-1] != self.n_mels:
            raise ShapeError(f"expected {self.n_mels} mel bands, got {frames.shape[-1]}")
        h, _ = self._features(frames, [None] * (1 + len(self.pyramid)))
        n = (h.shape[-1] // self.group) * self.group
        return self.aggregate(h[..., :n]).transpose(1, 2)

    # -- streaming ----------------------------------------------------
    def open(self, with_mel: MelFrontEnd | None = None) -> AudioEncState:
        return AudioEncState(self.fingerprint(), [None] * (1 + len(self.pyramid)),
                             torch.zeros(0, self.n_mels, dtype=DTYPE),
                             with_mel.open() if with_mel is not None else None)

    def encode_causal(self, frames: torch.Tensor, state: AudioEncState):
        """Consume mel frames ``[n, n_mels]``; emit one token per completed group."""
        if state.model_fp != self.fingerprint():
            raise StateMismatchError("audio encoder state belongs to a different model")
        frames = torch.as_tensor(frames, dtype=DTYPE)
        buf = torch.cat([state.pending, frames])
        n = (buf.shape[0] // self.group) * self.group
        hists = state.hists
        if n:
            h, hists = self._features(buf[None, :n], hists)
            tokens = self.aggregate(h).transpose(1, 2)[0]
        else:
            tokens = torch.zeros(0, self.aggregate.out_channels, dtype=DTYPE)
        new = AudioEncState(state.model_fp, hists, buf[n:], state.mel, state.n_tokens + n // self.group)
        return tokens, new


def encode_waveform(encoder: AudioEncoder, frontend: MelFrontEnd, samples: np.ndarray) -> torch.Tensor:
    """Offline path: whole waveform -> audio tokens ``[n_tokens, d_audio]``."""
    frames, _ = frontend(samples)
    return encoder(torch.as_tensor(frames)[None])[0]


def load_audio(path, cfg: Config) -> np.ndarray:
    p = Path(path)
    if p.suffix.lower() == ".wav":
        return read_wav(p, cfg.sample_rate)[0]
    raise DataError(f"unsupported audio file {p}")
