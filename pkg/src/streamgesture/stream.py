"""Chunked zero-look-ahead runtime.

One 200 ms audio chunk in, one token per region out, four pose frames per
region emitted. The per-chunk pipeline is mel frames -> audio token ->
experts (conditional and null-conditioned rows batched together) -> fusion
-> guided logits -> one categorical draw per region in canonical order ->
codebook -> projection head -> causal decoder step -> de-normalisation.

Each frame emitted by chunk j is stamped with that chunk's end time
``(j + 1) * chunk``: the earliest moment it could exist.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from . import container
from ._validation import check_waveform
from .bundle import Bundle
from .config import REGIONS
from .errors import BundleError, DataError, StateError, StateMismatchError
from .fuse import cfg_combine, sample_token
from .nncore import DTYPE, KVCache, band_mask
from .svq import DecoderState
from .audioenc import AudioEncState, MelState

ROWS = torch.tensor([False, True])  # conditional row, null-conditioned row


@dataclass
class LatencyReport:
    chunk_ms: float
    first_token_latency_ms: float
    per_chunk_compute_ms: list[float] = field(default_factory=list)

    @property
    def real_time_factor(self) -> float:
        return float(np.mean(self.per_chunk_compute_ms)) / self.chunk_ms if self.per_chunk_compute_ms else 0.0

    def to_dict(self) -> dict:
        c = np.asarray(self.per_chunk_compute_ms)
        return {
            "chunk_ms": self.chunk_ms,
            "accumulation_ms": self.chunk_ms,
            "first_token_latency_ms": self.first_token_latency_ms,
            "per_chunk_compute_ms": {
                "mean": float(c.mean()) if c.size else 0.0,
                "p50": float(np.percentile(c, 50)) if c.size else 0.0,
                "p95": float(np.percentile(c, 95)) if c.size else 0.0,
                "max": float(c.max()) if c.size else 0.0,
                "values": [float(v) for v in c],
            },
            "n_chunks": int(c.size),
            "real_time_factor": self.real_time_factor,
        }


class StreamSession:
    """All causal state needed to continue generation one chunk at a time."""

    def __init__(self, bundle: Bundle, seed: int = 0, gamma: float | None = None,
                 temperature: float | None = None, clock: Callable[[], float] = time.perf_counter,
                 cond_only: bool = False):
        bundle.check_consistency()
        self.bundle = bundle
        cfg = bundle.cfg
        self.cfg = cfg
        self.seed = seed
        self.gamma = cfg.gamma if gamma is None else float(gamma)
        self.temperature = cfg.temperature if temperature is None else float(temperature)
        self.clock = clock
        self.cond_only = bool(cond_only)
        self.rows = ROWS[:1] if self.cond_only else ROWS
        self.frontend = bundle.frontend()
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.mel_state: MelState = self.frontend.open()
        self.audio_state: AudioEncState = bundle.audio.open()
        self.expert_states = {r: bundle.experts[r].open() for r in REGIONS}
        self.fuse_state = bundle.fusion.open()
        self.dec_states: dict[str, DecoderState] = {r: bundle.tokenizers[r].ae.open_decoder() for r in REGIONS}
        self.prev: dict[str, int | None] = {r: None for r in REGIONS}
        self.tokens: dict[str, list[int]] = {r: [] for r in REGIONS}
        self.n_chunks = 0
        self.closed = False
        self.compute_ms: list[float] = []

    # -- core ---------------------------------------------------------
    @torch.inference_mode()
    def _advance(self, audio_t: torch.Tensor, symbol: int = 0) -> dict[str, np.ndarray]:
        b = self.bundle
        n = len(self.rows)
        a2 = audio_t.reshape(1, -1).expand(n, -1)
        sym = torch.full((n,), int(symbol), dtype=torch.long)
        hs = []
        for r in REGIONS:
            prev = None if self.prev[r] is None else torch.full((n,), self.prev[r], dtype=torch.long)
            _, h, self.expert_states[r] = b.experts[r].step(self.expert_states[r], prev, a2, sym, self.rows)
            hs.append(h)
        logits, self.fuse_state = b.fusion.step(self.fuse_state, torch.stack(hs, 1), a2, sym, self.rows)
        out = {}
        for i, r in enumerate(REGIONS):
            if self.cond_only:
                guided = logits[0, i]
            else:
                guided = cfg_combine(logits[1, i], logits[0, i], self.gamma)
            tok = sample_token(guided, self.rng, self.temperature)
            self.prev[r] = tok
            self.tokens[r].append(tok)
            y, self.dec_states[r] = b.tokenizers[r].decode(np.array([tok]), self.dec_states[r])
            out[r] = b.scalers[r].inverse_transform(y)
        return out

    def push_audio_chunk(self, chunk, symbol: int = 0) -> dict[str, np.ndarray]:
        """Consume one chunk of samples; return 4 de-normalised frames per region.

        A chunk shorter than ``chunk_samples`` is zero padded, its output is
        trimmed to the true duration, and the session closes.
        """
        if self.closed:
            raise StateError("session is closed")
        t0 = self.clock()
        x = check_waveform(chunk)
        n = self.cfg.chunk_samples
        if len(x) > n:
            raise DataError(f"chunk has {len(x)} samples, expected at most {n}")
        true_len = len(x)
        short = true_len < n
        if short:
            x = np.concatenate([x, np.zeros(n - len(x))])
        frames, self.mel_state = self.frontend(x, self.mel_state)
        out = self._push_frames(frames, symbol)
        if short:
            keep = int(np.ceil(true_len / self.cfg.samples_per_frame))
            out = {r: y[:keep] for r, y in out.items()}
            self.closed = True
        self.n_chunks += 1
        self.compute_ms.append((self.clock() - t0) * 1000.0)
        return out

    def push_mel_frames(self, frames, symbol: int = 0) -> dict[str, np.ndarray]:
        """Feature passthrough: one chunk's worth of precomputed log-mel frames."""
        if self.closed:
            raise StateError("session is closed")
        t0 = self.clock()
        frames = np.asarray(frames, dtype=np.float64)
        if frames.shape != (self.cfg.mels_per_token, self.cfg.n_mels):
            raise DataError(f"expected mel frames of shape {(self.cfg.mels_per_token, self.cfg.n_mels)}, "
                            f"got {frames.shape}")
        out = self._push_frames(frames, symbol)
        self.n_chunks += 1
        self.compute_ms.append((self.clock() - t0) * 1000.0)
        return out

    def _push_frames(self, frames, symbol):
        tok, self.audio_state = self.bundle.audio.encode_causal(torch.as_tensor(frames), self.audio_state)
        if tok.shape[0] != 1:
            raise StateMismatchError("chunk did not yield exactly one audio token")
        return self._advance(tok[0], symbol)

    def close(self) -> None:
        self.closed = True

    # -- persistence --------------------------------------------------
    def state_arrays(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays: dict[str, np.ndarray] = {}

        def put(prefix, tensors: dict):
            for k, v in tensors.items():
                if v is not None:
                    arrays[f"{prefix}{k}"] = np.ascontiguousarray(v.detach().numpy() if isinstance(v, torch.Tensor) else v)

        put("mel.", {"tail": self.mel_state.tail, "pending": self.mel_state.pending})
        put("audio.", {f"h{i}": h for i, h in enumerate(self.audio_state.hists)})
        put("audio.", {"pending": self.audio_state.pending})
        for r in REGIONS:
            put(f"expert.{r}.", self.expert_states[r].tensors())
            put(f"dec.{r}.", self.dec_states[r].tensors())
        for i, c in enumerate(self.fuse_state.caches):
            put(f"fuse.{i}.", c.tensors())
        manifest = {
            "kind": "stream_session", "seed": self.seed, "cond_only": self.cond_only, "gamma": self.gamma,
            "temperature": self.temperature, "n_chunks": self.n_chunks, "closed": self.closed,
            "mel_frames": self.mel_state.n_frames, "audio_tokens": self.audio_state.n_tokens,
            "expert_pos": {r: self.expert_states[r].pos for r in REGIONS},
            "fuse_pos": self.fuse_state.pos,
            "dec_steps": {r: self.dec_states[r].steps for r in REGIONS},
            "prev": self.prev, "tokens": self.tokens,
            "rng": self.rng.bit_generator.state,
            "fingerprints": self.bundle.fingerprints(),
        }
        return arrays, json.loads(json.dumps(manifest))

    def save(self, path) -> str:
        arrays, manifest = self.state_arrays()
        return container.save(path, arrays, manifest)

    @classmethod
    def restore(cls, bundle: Bundle, arrays: dict, m: dict) -> "StreamSession":
        if m.get("kind") != "stream_session":
            raise DataError("not a stream session container")
        if m["fingerprints"] != bundle.fingerprints():
            raise BundleError("session was saved against a different bundle")
        s = cls(bundle, m["seed"], m["gamma"], m["temperature"], cond_only=m.get("cond_only", False))
        T = lambda k: torch.as_tensor(arrays[k]) if k in arrays else None  # noqa: E731
        s.mel_state = MelState(bundle.cfg.sample_rate, arrays["mel.tail"], arrays["mel.pending"], m["mel_frames"])
        s.audio_state = AudioEncState(s.audio_state.model_fp,
                                      [T(f"audio.h{i}") for i in range(len(s.audio_state.hists))],
                                      T("audio.pending"), None, m["audio_tokens"])
        for r in REGIONS:
            st = s.expert_states[r]
            for i, c in enumerate(st.caches):
                c.load({"k": T(f"expert.{r}.{i}.k"), "v": T(f"expert.{r}.{i}.v")})
            st.pos = m["expert_pos"][r]
            ds = s.dec_states[r]
            ds.hists = [T(f"dec.{r}.h{i}") for i in range(len(ds.hists))]
            ds.steps = m["dec_steps"][r]
        for i, c in enumerate(s.fuse_state.caches):
            c.load({"k": T(f"fuse.{i}.k"), "v": T(f"fuse.{i}.v")})
        s.fuse_state.pos = m["fuse_pos"]
        s.prev = dict(m["prev"])
        s.tokens = {r: list(v) for r, v in m["tokens"].items()}
        s.rng.bit_generator.state = m["rng"]
        s.n_chunks, s.closed = m["n_chunks"], m["closed"]
        return s

    @classmethod
    def load(cls, bundle: Bundle, path) -> "StreamSession":
        arrays, m = container.load(path)
        return cls.restore(bundle, arrays, m)


def open_session(bundle: Bundle, seed: int = 0, gamma: float | None = None,
                 temperature: float | None = None, clock=time.perf_counter,
                 cond_only: bool = False) -> StreamSession:
    return StreamSession(bundle, seed, gamma, temperature, clock, cond_only)


def split_chunks(samples: np.ndarray, chunk: int) -> list[np.ndarray]:
    x = check_waveform(samples)
    return [x[i:i + chunk] for i in range(0, len(x), chunk)]


def stream_generate(bundle: Bundle, samples: np.ndarray, seed: int = 0, gamma: float | None = None,
                    symbols: np.ndarray | None = None, until: float | None = None,
                    session: StreamSession | None = None):
    """Push a whole waveform chunk by chunk.

    Returns (poses per region, frame timestamps, session). With ``until``
    (seconds) generation stops once the next chunk would end after it.
    """
    s = session or open_session(bundle, seed, gamma)
    cfg = bundle.cfg
    chunk_s = cfg.chunk_ms / 1000.0
    out = {r: [] for r in REGIONS}
    stamps = []
    for j, c in enumerate(split_chunks(samples, cfg.chunk_samples)):
        end = (j + 1) * chunk_s
        if until is not None and end > until + 1e-12:
            break
        sym = 0 if symbols is None or j >= len(symbols) else int(symbols[j])
        y = s.push_audio_chunk(c, sym)
        for r in REGIONS:
            out[r].append(y[r])
        stamps.extend([end] * len(y[REGIONS[0]]))
    poses = {r: np.concatenate(v) if v else np.zeros((0, bundle.dims[r])) for r, v in out.items()}
    return poses, np.asarray(stamps), s


# ---------------------------------------------------------------------------
# offline reference
# ---------------------------------------------------------------------------

@torch.inference_mode()
def generate_offline(bundle: Bundle, samples: np.ndarray, seed: int = 0, gamma: float | None = None,
                     temperature: float | None = None, symbols: np.ndarray | None = None):
    """Whole-utterance generation that recomputes every prefix from scratch.

    Shares no incremental state with the streaming path (batch mel, batch
    audio encoder, full-sequence expert and fusion passes per step, one batch
    decode at the end), so agreement between the two is a real test of the
    caches. Returns (poses per region, tokens per region).
    """
    cfg = bundle.cfg
    gamma = cfg.gamma if gamma is None else gamma
    temperature = cfg.temperature if temperature is None else temperature
    x = check_waveform(samples)
    n = cfg.chunk_samples
    n_chunks = int(np.ceil(len(x) / n))
    padded = np.concatenate([x, np.zeros(n_chunks * n - len(x))])
    frames, _ = bundle.frontend()(padded)
    audio = bundle.audio(torch.as_tensor(frames)[None])[0]  # [T, d_audio]
    T = audio.shape[0]
    sym = torch.zeros(T, dtype=torch.long)
    if symbols is not None:
        k = min(T, len(symbols))
        sym[:k] = torch.as_tensor(np.asarray(symbols[:k], dtype=np.int64))
    rng = np.random.Generator(np.random.PCG64(seed))
    tokens = {r: [] for r in REGIONS}
    a2 = audio[None].expand(2, -1, -1)
    s2 = sym[None].expand(2, -1)
    for t in range(T):
        hs = []
        for r in REGIONS:
            m = bundle.experts[r]
            prev = torch.as_tensor(tokens[r], dtype=torch.long)[None].expand(2, -1)
            slots = torch.cat([m.bos.expand(2, 1, -1), m.embed_tokens(prev)], dim=1)
            cond = m.conditioning(a2[:, :t + 1], s2[:, :t + 1], ROWS)
            _, h = m.run(slots, cond)
            hs.append(h)
        logits = bundle.fusion(torch.stack(hs, 2), a2[:, :t + 1], s2[:, :t + 1], ROWS)[:, t]
        for i, r in enumerate(REGIONS):
            tokens[r].append(sample_token(cfg_combine(logits[1, i], logits[0, i], gamma), rng, temperature))
    poses = {}
    n_frames = int(np.ceil(len(x) / cfg.samples_per_frame))
    for r in REGIONS:
        y, _ = bundle.tokenizers[r].decode(np.asarray(tokens[r]))
        poses[r] = bundle.scalers[r].inverse_transform(y)[:n_frames]
    return poses, tokens


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------

def causality_probe(generate: Callable, audio: np.ndarray, t_perturb: float, sample_rate: int,
                    seed: int = 0, reference=None) -> bool:
    """Perturb audio after ``t_perturb`` with noise; outputs stamped at or before it must not move.

    ``generate(audio, until)`` returns ``(poses_by_region, stamps)``. A
    precomputed ``reference`` (same return shape, unperturbed) can be passed
    to share work across probe points.
    """
    cut = int(round(t_perturb * sample_rate))
    if cut <= 0:
        return True
    x = np.asarray(audio, dtype=np.float64)
    noisy = x.copy()
    rng = np.random.default_rng(seed)
    noisy[cut:] = rng.normal(0.0, 0.3, size=len(x) - cut)
    ref = reference if reference is not None else generate(x, t_perturb)
    alt = generate(noisy, t_perturb)
    (p0, s0), (p1, s1) = ref[:2], alt[:2]
    k0 = np.asarray(s0) <= t_perturb + 1e-12
    k1 = np.asarray(s1) <= t_perturb + 1e-12
    if k0.sum() != k1.sum():
        return False
    return all(np.array_equal(p0[r][k0], p1[r][k1]) for r in p0)


def streaming_generator(bundle: Bundle, seed: int = 0, gamma: float | None = None) -> Callable:
    def gen(audio, until=None):
        poses, stamps, _ = stream_generate(bundle, audio, seed, gamma, until=until)
        return poses, stamps
    return gen


def latency_report(session: StreamSession, samples: np.ndarray) -> LatencyReport:
    """Stream ``samples`` through ``session``, timing every chunk."""
    cfg = session.cfg
    start = len(session.compute_ms)
    first = None
    for c in split_chunks(samples, cfg.chunk_samples):
        t0 = session.clock()
        session.push_audio_chunk(c)
        if first is None:
            first = (session.clock() - t0) * 1000.0
    return LatencyReport(float(cfg.chunk_ms), first or 0.0, session.compute_ms[start:])
